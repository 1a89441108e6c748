//! Training harness: DCG warm-up, joint optimization, evaluation, artifacts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, EpochRecord};
use crate::config::{DataConfig, DataSource, RunConfig, Variant};
use crate::data::{augment, load_csv_index, load_image_folder, stratified_split, synth_generate, Dataset, Image, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, f1, ConfusionMatrix};
use crate::model::Model;
use crate::nn::{Adam, Module};
use crate::objectives::{mmd_loss_with_grad, noise_loss, noise_loss_grad, softmax_ce_batch, total_loss};
use crate::sampler::classify_batch;
use crate::schedule::{combine_priors, forward_sample_into, LabelVector};

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const WARMUP_OFFSET: u64 = 1 << 32;

/// Independent generator for one purpose within one epoch.
pub fn stream_rng(seed: u64, epoch: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch.wrapping_mul(8).wrapping_add(purpose));
    r
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub noise: f64,
    pub mmd_global: f64,
    pub mmd_local: f64,
    pub ce: f64,
}

impl StepLosses {
    fn add_scaled(&mut self, o: &StepLosses, w: f64) {
        self.total += w * o.total;
        self.noise += w * o.noise;
        self.mmd_global += w * o.mmd_global;
        self.mmd_local += w * o.mmd_local;
        self.ce += w * o.ce;
    }

    fn is_finite(&self) -> bool {
        [self.total, self.noise, self.mmd_global, self.mmd_local, self.ce].iter().all(|v| v.is_finite())
    }
}

/// A model with its two optimizer groups.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    /// Image encoder, denoiser and classifier head.
    pub opt_main: Adam,
    /// DCG global and local streams.
    pub opt_dcg: Adam,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::new(config, &mut stream_rng(config.seed, 0, STREAM_INIT))?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: &RunConfig, model: Model) -> Self {
        Self {
            config: config.clone(),
            model,
            opt_main: Adam::new(config.optim.lr_denoiser as f32),
            opt_dcg: Adam::new(config.optim.lr_dcg as f32),
        }
    }

    fn batches(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order
            .chunks(self.config.optim.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    fn augmented(&self, data: &Dataset, idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<Image> {
        idx.iter().map(|&i| augment(&data.images[i], rng).normalized()).collect()
    }

    /// One CE step on the DCG alone; images are normalized.
    pub fn dcg_step(&mut self, images: &[Image], labels: &[usize]) -> Result<f64> {
        let k = self.model.classes;
        let dcg = self
            .model
            .dcg
            .as_mut()
            .ok_or_else(|| Error::Runtime("this variant has no DCG to warm up".into()))?;
        let refs: Vec<&Image> = images.iter().collect();
        let out = dcg.forward(&refs)?;
        let (ce_g, dg) = softmax_ce_batch(&out.global_logits, labels, k)?;
        let (ce_l, dl) = softmax_ce_batch(&out.local_logits, labels, k)?;
        dcg.backward(&dg, &dl);
        self.opt_dcg.step(dcg);
        Ok(ce_g + ce_l)
    }

    /// DCG warm-up; returns the mean CE of each epoch.
    pub fn pretrain_dcg(&mut self, train: &Dataset) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Data("cannot warm up on an empty dataset".into()));
        }
        if self.model.dcg.is_none() {
            return Ok(Vec::new());
        }
        let mut curve = Vec::with_capacity(self.config.optim.warmup_epochs);
        for e in 0..self.config.optim.warmup_epochs {
            let epoch = WARMUP_OFFSET + e as u64;
            let mut order_rng = stream_rng(self.config.seed, epoch, STREAM_ORDER);
            let mut aug_rng = stream_rng(self.config.seed, epoch, STREAM_AUGMENT);
            let batches = self.batches(train.len(), &mut order_rng);
            let mut sum = 0.0;
            for (b, idx) in batches.iter().enumerate() {
                let images = self.augmented(train, idx, &mut aug_rng);
                let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let ce = self.dcg_step(&images, &labels)?;
                if !ce.is_finite() {
                    return Err(self.non_finite(e + 1, b, &format!("warm-up cross-entropy {ce}")));
                }
                sum += ce;
            }
            let mean = sum / batches.len().max(1) as f64;
            log::info!("warm-up epoch {}/{}: ce {:.4}", e + 1, self.config.optim.warmup_epochs, mean);
            curve.push(mean);
        }
        Ok(curve)
    }

    fn non_finite(&self, epoch: usize, batch: usize, what: &str) -> Error {
        let echo = serde_json::to_string(&self.config).unwrap_or_default();
        Error::NonFinite {
            epoch,
            batch,
            detail: format!("{what}; config {echo}"),
        }
    }

    /// Forward and backward for one joint-phase batch of normalized images.
    /// Gradients are left in the parameters; see [`Trainer::apply_updates`].
    pub fn compute_gradients<R: Rng + ?Sized>(&mut self, images: &[Image], labels: &[usize], rng: &mut R) -> Result<StepLosses> {
        let cfg = &self.config;
        let model = &mut self.model;
        let k = model.classes;
        let b = images.len();
        if b < 2 || labels.len() != b {
            return Err(Error::Shape(format!("a training batch needs >= 2 labelled images, got {b}")));
        }
        let refs: Vec<&Image> = images.iter().collect();
        let mut losses = StepLosses::default();

        if model.variant == Variant::Basic {
            let rho = model.encoder.forward(&refs)?;
            let head = model.head.as_mut().expect("basic variant has a head");
            let logits = head.forward(&rho, b);
            let (ce, dlogits) = softmax_ce_batch(&logits, labels, k)?;
            let drho = head.backward(&dlogits, b);
            model.encoder.backward(&drho);
            losses.ce = ce;
            losses.total = ce;
            return Ok(losses);
        }

        let (priors, dcg_grads) = match model.dcg.as_mut() {
            Some(dcg) => {
                let out = dcg.forward(&refs)?;
                let (ce_g, dg) = softmax_ce_batch(&out.global_logits, labels, k)?;
                let (ce_l, dl) = softmax_ce_batch(&out.local_logits, labels, k)?;
                losses.ce = ce_g + ce_l;
                (out.priors(k), Some((dg, dl)))
            }
            None => (vec![crate::dcg::PriorPair::uniform(k); b], None),
        };
        let cond = |sel: &dyn Fn(&crate::dcg::PriorPair) -> (&[f64], &[f64])| -> Vec<(Vec<f64>, Vec<f64>)> {
            priors.iter().map(|p| {
                let (g, l) = sel(p);
                (g.to_vec(), l.to_vec())
            }).collect()
        };

        let rho = model.encoder.forward(&refs)?;
        let denoiser = model.denoiser.as_mut().expect("diffusion variant has a denoiser");
        let sched = &model.schedule;
        let t_max = sched.timesteps();
        let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t_max)).collect();
        let y0: Vec<LabelVector> = labels.iter().map(|&l| LabelVector::one_hot(k, l)).collect::<Result<_>>()?;

        // Builds `[y_t, c1, c2]` rows with `y_t` noised toward `mu` and returns the noise used.
        let build = |rng: &mut R, mus: &[Vec<f64>], conds: &[(Vec<f64>, Vec<f64>)]| -> Result<(Vec<f32>, Vec<f32>)> {
            let mut z = Vec::with_capacity(b * 3 * k);
            let mut eps_all = Vec::with_capacity(b * k);
            let mut y_t = vec![0.0; k];
            for i in 0..b {
                let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                forward_sample_into(&y0[i].0, &mus[i], ts[i], &eps, sched, &mut y_t)?;
                z.extend(y_t.iter().chain(&conds[i].0).chain(&conds[i].1).map(|&v| v as f32));
                eps_all.extend(eps.iter().map(|&v| v as f32));
            }
            Ok((z, eps_all))
        };

        let dual = cond(&|p| (&p.global, &p.local));
        let mus: Vec<Vec<f64>> = priors
            .iter()
            .map(|p| combine_priors(&p.global, &p.local, cfg.schedule.prior_combine).map(|v| v.0))
            .collect::<Result<_>>()?;
        let (z, eps) = build(rng, &mus, &dual)?;
        let eps_hat = denoiser.forward(&rho, &z, &ts, true)?;
        losses.noise = noise_loss(&eps, &eps_hat, k)?;
        let mut drho = denoiser.backward(&noise_loss_grad(&eps, &eps_hat, k)?);

        let lambda = cfg.loss.lambda;
        if model.variant.uses_mmd() && lambda > 0.0 {
            let branches: [(&dyn Fn(&crate::dcg::PriorPair) -> &[f64], &mut f64); 2] = [
                (&|p| &p.global, &mut losses.mmd_global),
                (&|p| &p.local, &mut losses.mmd_local),
            ];
            for (pick, slot) in branches {
                let single = cond(&|p| (pick(p), pick(p)));
                let mus: Vec<Vec<f64>> = priors.iter().map(|p| pick(p).to_vec()).collect();
                let (z, n) = build(rng, &mus, &single)?;
                let m = denoiser.forward(&rho, &z, &ts, true)?;
                let (value, dm) = mmd_loss_with_grad(&n, &m, k, &cfg.loss.mmd, true)?;
                *slot = value;
                let scaled: Vec<f32> = dm.iter().map(|g| g * lambda as f32).collect();
                for (a, g) in drho.iter_mut().zip(denoiser.backward(&scaled)) {
                    *a += g;
                }
            }
        }
        model.encoder.backward(&drho);

        if let (Some((dg, dl)), Some(dcg)) = (dcg_grads, model.dcg.as_mut()) {
            let w = cfg.loss.ce_weight as f32;
            if w > 0.0 {
                let scale = |v: Vec<f32>| v.into_iter().map(|g| g * w).collect::<Vec<_>>();
                dcg.backward(&scale(dg), &scale(dl));
            }
        }
        let diffusion = total_loss(losses.noise, losses.mmd_global, losses.mmd_local, lambda)?;
        losses.total = diffusion + cfg.loss.ce_weight * losses.ce;
        Ok(losses)
    }

    /// One Adam step per parameter group, clearing gradients.
    pub fn apply_updates(&mut self) {
        self.opt_main.step(&mut self.model.diffusion_group());
        if let Some(dcg) = self.model.dcg.as_mut() {
            self.opt_dcg.step(dcg);
        }
    }

    pub fn train_step<R: Rng + ?Sized>(&mut self, images: &[Image], labels: &[usize], rng: &mut R) -> Result<StepLosses> {
        let l = self.compute_gradients(images, labels, rng)?;
        if l.is_finite() {
            self.apply_updates();
        } else {
            self.model.zero_grad();
        }
        Ok(l)
    }

    /// One joint epoch (1-based `epoch`); returns mean losses.
    pub fn train_epoch(&mut self, train: &Dataset, epoch: usize) -> Result<StepLosses> {
        if train.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let e = epoch as u64;
        let mut order_rng = stream_rng(self.config.seed, e, STREAM_ORDER);
        let mut aug_rng = stream_rng(self.config.seed, e, STREAM_AUGMENT);
        let mut noise_rng = stream_rng(self.config.seed, e, STREAM_NOISE);
        let batches = self.batches(train.len(), &mut order_rng);
        let mut mean = StepLosses::default();
        for (b, idx) in batches.iter().enumerate() {
            let images = self.augmented(train, idx, &mut aug_rng);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let l = self.train_step(&images, &labels, &mut noise_rng)?;
            if !l.is_finite() {
                return Err(self.non_finite(epoch, b, &format!("losses {l:?}")));
            }
            mean.add_scaled(&l, 1.0 / batches.len() as f64);
        }
        Ok(mean)
    }
}

/// Loads or synthesizes the configured corpus and splits it by `data_seed`.
pub fn prepare_data(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let ds = match cfg.source {
        DataSource::Synthetic => synth_generate(&SynthSpec {
            classes: cfg.classes,
            count: cfg.count,
            image_size: cfg.image_size,
            noise_sigma: cfg.noise_sigma,
            blur_radius: cfg.blur_radius,
            imbalance: cfg.imbalance.clone(),
            seed: cfg.data_seed,
        })?,
        DataSource::ImageFolder | DataSource::CsvIndex => {
            let path = cfg
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("data.path is required for on-disk sources".into()))?;
            if cfg.source == DataSource::ImageFolder {
                load_image_folder(path, cfg.image_size, cfg.channels)?
            } else {
                load_csv_index(path, cfg.image_size, cfg.channels)?
            }
        }
    };
    if ds.classes() != cfg.classes {
        return Err(Error::Data(format!("config declares {} classes but the data has {}", cfg.classes, ds.classes())));
    }
    let split = stratified_split(&ds.labels, ds.classes(), cfg.train_ratio, cfg.data_seed)?;
    Ok((ds.subset(&split.train), ds.subset(&split.test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

/// Reverse-chain noise for test image `index`.
pub fn eval_noise(seed: u64, index: usize) -> ChaCha8Rng {
    stream_rng(seed, index as u64, STREAM_EVAL)
}

/// Classifies every image of `data`; image `i` uses its own noise stream.
pub fn evaluate(model: &Model, data: &Dataset, steps: usize, votes: usize, seed: u64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut preds = Vec::with_capacity(data.len());
    for (c, chunk) in data.images.chunks(128).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let mut noise: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|i| eval_noise(seed, c * 128 + i))
            .collect();
        preds.extend(classify_batch(&refs, model, steps, votes, &mut noise, &[])?.into_iter().map(|r| r.class));
    }
    let k = model.classes;
    Ok(EvalReport {
        accuracy: accuracy(&preds, &data.labels)?,
        macro_f1: f1(&preds, &data.labels, k, crate::config::F1Average::Macro)?,
        weighted_f1: f1(&preds, &data.labels, k, crate::config::F1Average::Weighted)?,
        confusion: ConfusionMatrix::new(&preds, &data.labels, k)?,
        predictions: preds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub warmup_ce: Vec<f64>,
    pub final_eval: EvalReport,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl ExperimentReport {
    /// Headline F1 under the configured averaging.
    pub fn final_f1(&self, cfg: &RunConfig) -> f64 {
        match cfg.eval.f1 {
            crate::config::F1Average::Macro => self.final_eval.macro_f1,
            crate::config::F1Average::Weighted => self.final_eval.weighted_f1,
        }
    }
}

pub struct Experiment {
    pub report: ExperimentReport,
    pub trainer: Trainer,
    pub best: Model,
}

fn meta_for(t: &Trainer, class_names: &[String], epoch: usize, history: &[EpochRecord], best: Option<(f64, usize)>, with_opt: bool) -> CheckpointMeta {
    CheckpointMeta {
        config: t.config.clone(),
        class_names: class_names.to_vec(),
        epoch,
        history: history.to_vec(),
        best_accuracy: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
        adam_steps_main: t.opt_main.steps,
        adam_steps_dcg: t.opt_dcg.steps,
        has_optimizer_state: with_opt,
    }
}

fn write_curves(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "phase", "loss_total", "loss_noise", "loss_mmd_global", "loss_mmd_local", "loss_ce", "test_accuracy", "test_f1"])
        .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.phase.clone(),
            r.loss_total.to_string(),
            r.loss_noise.to_string(),
            r.loss_mmd_global.to_string(),
            r.loss_mmd_local.to_string(),
            r.loss_ce.to_string(),
            opt(r.test_accuracy),
            opt(r.test_f1),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Warm-up, joint training with periodic evaluation, and artifacts.
///
/// With `out_dir`, writes `metrics.json`, `curves.csv`, `best.dmic` and
/// `last.dmic` (the latter with optimizer state for resuming). `resume`
/// continues a run from a `last.dmic` checkpoint.
pub fn run_experiment(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<(Model, CheckpointMeta)>,
) -> Result<Experiment> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("train and test sets must be non-empty".into()));
    }
    if train.classes() != config.data.classes {
        return Err(Error::Data(format!(
            "config declares {} classes but the data has {}",
            config.data.classes,
            train.classes()
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (mut trainer, mut history, start, mut best) = match resume {
        Some((model, meta)) => {
            if meta.config != *config {
                return Err(Error::Config("resume checkpoint was trained with a different config".into()));
            }
            if !meta.has_optimizer_state {
                return Err(Error::Checkpoint("resume needs a checkpoint with optimizer state (last.dmic)".into()));
            }
            let mut t = Trainer::with_model(config, model);
            t.opt_main.steps = meta.adam_steps_main;
            t.opt_dcg.steps = meta.adam_steps_dcg;
            let best = meta.best_accuracy.zip(meta.best_epoch);
            (t, meta.history, meta.epoch, best)
        }
        None => (Trainer::new(config)?, Vec::new(), 0, None),
    };
    let mut warmup_ce = Vec::new();
    if start == 0 {
        warmup_ce = trainer.pretrain_dcg(train)?;
        for (e, ce) in warmup_ce.iter().enumerate() {
            history.push(EpochRecord {
                epoch: e + 1,
                phase: "warmup".into(),
                loss_total: *ce,
                loss_noise: 0.0,
                loss_mmd_global: 0.0,
                loss_mmd_local: 0.0,
                loss_ce: *ce,
                test_accuracy: None,
                test_f1: None,
            });
        }
    }
    let steps = config.schedule.inference_steps;
    let epochs = config.optim.epochs;
    let mut best_model: Option<Model> = None;
    let mut last_eval = None;
    for epoch in start + 1..=epochs {
        let l = trainer.train_epoch(train, epoch)?;
        let mut rec = EpochRecord {
            epoch,
            phase: "joint".into(),
            loss_total: l.total,
            loss_noise: l.noise,
            loss_mmd_global: l.mmd_global,
            loss_mmd_local: l.mmd_local,
            loss_ce: l.ce,
            test_accuracy: None,
            test_f1: None,
        };
        if epoch % config.eval.every == 0 || epoch == epochs {
            let ev = evaluate(&trainer.model, test, steps, config.eval.votes, config.seed)?;
            rec.test_accuracy = Some(ev.accuracy);
            rec.test_f1 = Some(match config.eval.f1 {
                crate::config::F1Average::Macro => ev.macro_f1,
                crate::config::F1Average::Weighted => ev.weighted_f1,
            });
            if best.is_none_or(|(acc, _)| ev.accuracy > acc) {
                best = Some((ev.accuracy, epoch));
                best_model = Some(trainer.model.clone());
                if let Some(dir) = out_dir {
                    let meta = meta_for(&trainer, &train.class_names, epoch, &history, best, false);
                    checkpoint::save(&dir.join("best.dmic"), &mut trainer.model, &meta)?;
                }
            }
            last_eval = Some(ev);
        }
        log::info!(
            "{} epoch {epoch}/{epochs}: loss {:.4} (noise {:.4}, mmd {:.4}/{:.4}, ce {:.4}){}",
            config.variant,
            l.total,
            l.noise,
            l.mmd_global,
            l.mmd_local,
            l.ce,
            rec.test_accuracy.map(|a| format!(", test acc {a:.4}")).unwrap_or_default()
        );
        history.push(rec);
    }
    let final_eval = match last_eval {
        Some(ev) => ev,
        None => evaluate(&trainer.model, test, steps, config.eval.votes, config.seed)?,
    };
    let (best_accuracy, best_epoch) = best.unwrap_or((final_eval.accuracy, epochs));
    let report = ExperimentReport {
        variant: config.variant,
        seed: config.seed,
        epochs,
        warmup_ce,
        final_eval,
        best_accuracy,
        best_epoch,
        history,
    };
    if let Some(dir) = out_dir {
        let meta = meta_for(&trainer, &train.class_names, epochs, &report.history, best, true);
        checkpoint::save(&dir.join("last.dmic"), &mut trainer.model, &meta)?;
        let mpath = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Runtime(e.to_string()))?;
        std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
        write_curves(&dir.join("curves.csv"), &report.history)?;
    }
    let best = best_model.unwrap_or_else(|| trainer.model.clone());
    Ok(Experiment { report, trainer, best })
}
