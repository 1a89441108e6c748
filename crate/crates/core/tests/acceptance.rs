//! Acceptance suite: one pass/fail line per criterion.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use labeldiff::ablation::run_ablation;
use labeldiff::checkpoint;
use labeldiff::config::{RunConfig, Variant};
use labeldiff::data::Image;
use labeldiff::dcg::{grid_centers, select_rois, ChannelCollapse, Dcg, DcgConfig, GatedAttention, SaliencyMap};
use labeldiff::metrics::{accuracy, macro_f1};
use labeldiff::objectives::{mmd_loss, mmd_loss_with_grad, MmdConfig};
use labeldiff::sampler::{inference_timesteps, run_chain, ZeroNoise};
use labeldiff::schedule::{forward_sample, reconstruct_y0, LabelVector, NoiseSchedule};
use labeldiff::training::{evaluate, prepare_data, run_experiment};
use labeldiff::viz::trajectory_viz;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn single(v: f64) -> f64 {
    v as f32 as f64
}

fn algebraic_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut worst_round_trip = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=10);
        let t = rng.gen_range(1..=1000);
        let y0 = LabelVector::one_hot(k, rng.gen_range(0..k)).unwrap();
        let mu = LabelVector(simplex(&mut rng, k).into_iter().map(single).collect());
        let eps: Vec<f64> = normals(&mut rng, k).into_iter().map(single).collect();
        let y_t = forward_sample(&y0, &mu, t, &eps, &sched).unwrap();
        let back = reconstruct_y0(&y_t, &eps, &mu, t, &sched).unwrap();
        for (a, b) in back.0.iter().zip(&y0.0) {
            worst_round_trip = worst_round_trip.max((a - b).abs());
        }
    }
    let mut worst_gamma = 0.0f64;
    for steps in [10, 100, 1000] {
        let s = NoiseSchedule::linear(steps, 1e-4, 0.02).unwrap();
        for t in 2..=steps {
            let c = s.posterior_coefficients(t).unwrap();
            worst_gamma = worst_gamma.max((c.gamma0 + c.gamma1 + c.gamma2 - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_round_trip < 1e-5 && worst_gamma < 1e-10 && secs < 5.0,
        format!("round-trip max err {worst_round_trip:.2e} (< 1e-5), gamma sum max err {worst_gamma:.2e} (< 1e-10), {secs:.2}s (< 5s)"),
    )
}

fn oracle_recovery() -> Outcome {
    let start = Instant::now();
    let k = 4;
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let steps = inference_timesteps(100, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let trials = 100;
    let y0s: Vec<LabelVector> = (0..trials).map(|i| LabelVector::one_hot(k, i % k).unwrap()).collect();
    let mus: Vec<LabelVector> = (0..trials).map(|_| LabelVector(simplex(&mut rng, k))).collect();
    let oracle = |states: &[LabelVector], t: usize| {
        let ab = sched.alpha_bar(t);
        Ok(states
            .iter()
            .enumerate()
            .map(|(b, y)| {
                (0..k)
                    .map(|j| (y.0[j] - ab.sqrt() * y0s[b].0[j] - (1.0 - ab.sqrt()) * mus[b].0[j]) / (1.0 - ab).sqrt())
                    .collect()
            })
            .collect())
    };
    let l2 = |a: &LabelVector, b: &LabelVector| a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();

    let mut zero = vec![ZeroNoise; trials];
    let det = run_chain(&mus, &steps, &sched, &mut zero, &[], oracle).unwrap();
    let det_worst = det.iter().zip(&y0s).map(|(r, y)| l2(&r.y0_hat, y)).fold(0.0, f64::max);

    let mut noise: Vec<ChaCha8Rng> = (0..trials as u64).map(|i| ChaCha8Rng::seed_from_u64(1000 + i)).collect();
    let sto = run_chain(&mus, &steps, &sched, &mut noise, &[], oracle).unwrap();
    let sto_mean = sto.iter().zip(&y0s).map(|(r, y)| l2(&r.y0_hat, y)).sum::<f64>() / trials as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        det_worst < 1e-3 && sto_mean < 0.05 && secs < 10.0,
        format!("z=0 max L2 {det_worst:.2e} (< 1e-3), stochastic mean L2 {sto_mean:.2e} (< 0.05), {secs:.2}s (< 10s)"),
    )
}

fn brute_mmd(n: &[f32], m: &[f32], k: usize, bw: &[f64]) -> f64 {
    let rows = n.len() / k;
    let kbar = |a: &[f32], b: &[f32]| {
        let mut s = 0.0;
        for i in 0..rows {
            for j in 0..rows {
                let d2: f64 = (0..k).map(|d| (a[i * k + d] as f64 - b[j * k + d] as f64).powi(2)).sum();
                s += bw.iter().map(|s2| (-d2 / (2.0 * s2)).exp()).sum::<f64>() / bw.len() as f64;
            }
        }
        s / (rows * rows) as f64
    };
    kbar(n, n) - 2.0 * kbar(m, n) + kbar(m, m)
}

fn mmd_correctness() -> Outcome {
    let cfg = MmdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_value = 0.0f64;
    let mut worst_self = 0.0f64;
    let mut worst_grad = 0.0f64;
    for b in [2, 8, 32] {
        for k in [2, 7] {
            let n: Vec<f32> = normals(&mut rng, b * k).into_iter().map(|v| v as f32).collect();
            let m: Vec<f32> = normals(&mut rng, b * k).into_iter().map(|v| v as f32 * 0.7 + 0.3).collect();
            let (v, g) = mmd_loss_with_grad(&n, &m, k, &cfg, true).unwrap();
            worst_value = worst_value.max((v - brute_mmd(&n, &m, k, &cfg.bandwidths_sq)).abs());
            worst_self = worst_self.max(mmd_loss(&m, &m, k, &cfg).unwrap().abs());
            let h = 1e-3f32;
            let fd: Vec<f64> = (0..m.len())
                .map(|i| {
                    let (mut p, mut q) = (m.clone(), m.clone());
                    p[i] += h;
                    q[i] -= h;
                    (brute_mmd(&n, &p, k, &cfg.bandwidths_sq) - brute_mmd(&n, &q, k, &cfg.bandwidths_sq)) / (2.0 * h as f64)
                })
                .collect();
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            worst_grad = worst_grad.max(num / den);
        }
    }
    outcome(
        worst_value < 1e-6 && worst_self < 1e-12 && worst_grad < 1e-2,
        format!("|est - brute| max {worst_value:.2e} (< 1e-6), mmd(a,a) max {worst_self:.2e}, grad rel err max {worst_grad:.2e} (< 1e-2)"),
    )
}

fn dcg_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut simplex_err = 0.0f64;
    let att = GatedAttention::new(12, 8, &mut rng);
    for per_bag in [1, 3, 6] {
        let bags = 4;
        let h: Vec<f32> = normals(&mut rng, bags * per_bag * 12).into_iter().map(|v| v as f32).collect();
        let w = att.weights(&h, bags, per_bag);
        for bag in w.chunks(per_bag) {
            if bag.iter().any(|&x| x < 0.0) {
                simplex_err = f64::INFINITY;
            }
            simplex_err = simplex_err.max((bag.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
        }
    }

    let cfg = DcgConfig {
        global_channels: vec![4, 8],
        global_strides: vec![2, 2],
        local_channels: vec![4],
        local_strides: vec![2],
        attention_dim: 8,
        roi_count: 3,
        roi_size: 16,
        ..DcgConfig::default()
    };
    let dcg = Dcg::new(&cfg, 4, 1, 64, &mut rng).unwrap();
    let images: Vec<Image> = (0..3)
        .map(|_| Image::new(1, 64, 64, (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&Image> = images.iter().collect();
    let (maps, logits) = dcg.global_forward(&refs).unwrap();
    let mut mean_err = 0.0f64;
    for (b, map) in maps.iter().enumerate() {
        let hw = map.height * map.width;
        for c in 0..map.classes {
            let mut s = 0.0f64;
            for y in 0..map.height {
                for x in 0..map.width {
                    s += map.responses[c * hw + y * map.width + x] as f64;
                }
            }
            mean_err = mean_err.max((s / hw as f64 - logits[b * map.classes + c] as f64).abs());
        }
    }

    let image = Image::new(1, 64, 64, (0..64 * 64).map(|i| i as f32 / 4096.0).collect()).unwrap();
    let mut bounds_ok = true;
    let mut corner_ok = true;
    for (sy, sx) in [(0, 0), (0, 15), (15, 0), (15, 15), (7, 9)] {
        let mut r = vec![0.0f32; 2 * 16 * 16];
        r[16 * 16 + sy * 16 + sx] = 5.0;
        let sal = SaliencyMap::new(2, 16, 16, 4, r).unwrap();
        let rois = select_rois(&sal, &image, 6, 24, ChannelCollapse::Max).unwrap();
        bounds_ok &= rois.len() == 6
            && rois.origins.iter().all(|&(t, l)| t + 24 <= 64 && l + 24 <= 64)
            && rois.patches.len() == 6 * 24 * 24
            && rois.scores.windows(2).all(|w| w[0] >= w[1]);
        corner_ok &= rois.centers[0] == (sy * 4, sx * 4);
    }
    let flat = SaliencyMap::new(2, 16, 16, 4, vec![0.5; 2 * 16 * 16]).unwrap();
    let a = select_rois(&flat, &image, 6, 24, ChannelCollapse::Max).unwrap();
    let b = select_rois(&flat, &image, 6, 24, ChannelCollapse::Max).unwrap();
    let fallback_ok = a == b && a.centers == grid_centers(6, 64, 64);

    outcome(
        simplex_err < 1e-6 && mean_err < 1e-5 && bounds_ok && corner_ok && fallback_ok,
        format!(
            "simplex err {simplex_err:.2e}, global-logit vs spatial mean {mean_err:.2e} (< 1e-5), crops in bounds {bounds_ok}, spike-first {corner_ok}, grid fallback {fallback_ok}"
        ),
    )
}

fn ablation_trend(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let (train, test) = prepare_data(&cfg.data).unwrap();
    let report = match run_ablation(&cfg, &[0, 1, 2], &train, &test, Some(dir)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let mean = |v: Variant| report.mean(v).filter(|m| m.runs == 3).map(|m| m.accuracy);
    let (Some(basic), Some(c1), Some(c2), Some(full)) = (mean(Variant::Basic), mean(Variant::C1), mean(Variant::C2), mean(Variant::Full)) else {
        return outcome(false, format!("some cells failed\n{}", report.render_table()));
    };
    let margin = full >= basic + 0.02;
    let ladder = c1 >= basic - 0.01 && c2 >= c1 - 0.01 && full >= c2 - 0.01;
    let floor = full >= 0.90;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        margin && ladder && floor,
        format!(
            "mean acc basic {basic:.4} C1 {c1:.4} C2 {c2:.4} full {full:.4}; full >= basic+0.02 {margin}, ladder (tol 0.01) {ladder}, full >= 0.90 {floor}; {:.0} min",
            secs / 60.0
        ),
    )
}

fn trajectory_separation(ablation_dir: &Path, dir: &Path) -> Outcome {
    let ckpt = ablation_dir.join("full_seed0").join("last.dmic");
    let (model, meta) = match checkpoint::load(&ckpt) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("no trained full model: {e}")),
    };
    let (_, test) = prepare_data(&meta.config.data).unwrap();
    let steps = meta.config.schedule.inference_steps;
    let last_t = *inference_timesteps(meta.config.schedule.timesteps, steps).unwrap().last().unwrap();
    let record = [meta.config.schedule.timesteps, last_t];
    let (a, b) = (dir.join("a"), dir.join("b"));
    let ra = trajectory_viz(&model, &test, &record, steps, 0, Some(&a)).unwrap();
    trajectory_viz(&model, &test, &record, steps, 0, Some(&b)).unwrap();
    let first = ra.steps.first().unwrap().silhouette;
    let last = ra.steps.last().unwrap().silhouette;
    let identical = ra.files.iter().all(|f| {
        let name = f.file_name().unwrap();
        std::fs::read(a.join(name)).ok() == std::fs::read(b.join(name)).ok()
    });
    outcome(
        last > first && identical,
        format!("silhouette t=T {first:.4} -> final {last:.4}, repeated outputs byte-identical {identical}"),
    )
}

fn determinism_and_persistence(dir: &Path) -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.data.count = 200;
    cfg.data.image_size = 32;
    cfg.dcg.roi_size = 16;
    cfg.dcg.roi_count = 3;
    cfg.schedule.timesteps = 100;
    cfg.schedule.inference_steps = 10;
    cfg.optim.warmup_epochs = 1;
    cfg.optim.epochs = 2;
    cfg.eval.every = 1;
    let (train, test) = prepare_data(&cfg.data).unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    let exp = run_experiment(&cfg, &train, &test, Some(&a), None).unwrap();
    run_experiment(&cfg, &train, &test, Some(&b), None).unwrap();
    let same_metrics = std::fs::read(a.join("metrics.json")).unwrap() == std::fs::read(b.join("metrics.json")).unwrap();
    let steps = cfg.schedule.inference_steps;
    let in_memory = evaluate(&exp.trainer.model, &test, steps, 1, cfg.seed).unwrap().accuracy;
    let (loaded, _) = checkpoint::load(&a.join("last.dmic")).unwrap();
    let reloaded = evaluate(&loaded, &test, steps, 1, cfg.seed).unwrap().accuracy;
    outcome(
        same_metrics && in_memory == reloaded,
        format!("metrics.json byte-identical {same_metrics}, eval in-memory {in_memory:.4} vs reloaded {reloaded:.4}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=60);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut cm = vec![vec![0usize; k]; k];
        for (&l, &p) in labels.iter().zip(&preds) {
            cm[l][p] += 1;
        }
        let acc = (0..k).map(|c| cm[c][c]).sum::<usize>() as f64 / n as f64;
        let f1s: Vec<f64> = (0..k)
            .map(|c| {
                let tp = cm[c][c] as f64;
                let fp = (0..k).map(|r| cm[r][c]).sum::<usize>() as f64 - tp;
                let fneg = cm[c].iter().sum::<usize>() as f64 - tp;
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fneg)
                }
            })
            .collect();
        let mf1 = f1s.iter().sum::<f64>() / k as f64;
        worst = worst.max((accuracy(&preds, &labels).unwrap() - acc).abs());
        worst = worst.max((macro_f1(&preds, &labels, k).unwrap() - mf1).abs());
    }
    let worked = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    let worked_ok = (worked - 11.0 / 15.0).abs() < 1e-12;
    outcome(
        worst < 1e-9 && worked_ok,
        format!("max |metric - brute force| {worst:.2e} (< 1e-9), worked macro-F1 {worked:.6} (2/3 and 4/5 averaged)"),
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().unwrap();
    let ablation_dir = work.path().join("ablation");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("1 algebraic identities", Box::new(algebraic_identities)),
        ("2 oracle-denoiser recovery", Box::new(oracle_recovery)),
        ("3 mmd correctness", Box::new(mmd_correctness)),
        ("4 dcg properties", Box::new(dcg_properties)),
        ("5 desk ablation trend", Box::new(|| ablation_trend(&ablation_dir))),
        ("6 trajectory visualization", Box::new(|| trajectory_separation(&ablation_dir, &work.path().join("viz")))),
        ("7 determinism and persistence", Box::new(|| determinism_and_persistence(&work.path().join("determinism")))),
        ("8 metric oracles", Box::new(metric_oracles)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
