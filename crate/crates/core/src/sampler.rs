//! Reverse diffusion in label space and end-to-end classification.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Image;
use crate::dcg::PriorPair;
use crate::error::{ensure_len, Error, Result};
use crate::schedule::{combine_priors, reconstruct_y0, LabelVector, NoiseSchedule, PriorCombine};
use crate::model::Model;

/// Source of standard-normal draws for the reverse chain.
pub trait NoiseSource {
    fn normal(&mut self) -> f64;

    fn fill(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.normal());
    }
}

impl<R: RngCore> NoiseSource for R {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

/// Always returns zero; turns the chain into its mean path.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn normal(&mut self) -> f64 {
        0.0
    }
}

/// Draws `y_T = mu + z` with `mu` the combined prior.
pub fn init_y_t<N: NoiseSource + ?Sized>(priors: &PriorPair, combine: PriorCombine, noise: &mut N) -> Result<LabelVector> {
    let mut y = combine_priors(&priors.global, &priors.local, combine)?;
    y.0.iter_mut().for_each(|v| *v += noise.normal());
    Ok(y)
}

/// One step of the reverse chain from `t` to `next` (`None` ends the chain).
///
/// Returns the next state and the `y0` estimate at `t`. The terminal step
/// returns the estimate itself with no added noise.
pub fn reverse_jump<N: NoiseSource + ?Sized>(
    y_t: &LabelVector,
    eps_hat: &[f64],
    mu: &LabelVector,
    t: usize,
    next: Option<usize>,
    noise: &mut N,
    sched: &NoiseSchedule,
) -> Result<(LabelVector, LabelVector)> {
    ensure_len("prior", mu.len(), y_t.len())?;
    let y0 = reconstruct_y0(y_t, eps_hat, mu, t, sched)?;
    let Some(s) = next else {
        return Ok((y0.clone(), y0));
    };
    let c = sched.posterior_coefficients_between(t, s)?;
    let sigma = c.sigma_sq.sqrt();
    let y = (0..y_t.len())
        .map(|i| c.gamma0 * y0.0[i] + c.gamma1 * y_t.0[i] + c.gamma2 * mu.0[i] + sigma * noise.normal())
        .collect();
    Ok((LabelVector(y), y0))
}

/// Adjacent reverse step `t -> t - 1`; at `t = 1` returns the `y0` estimate.
pub fn reverse_step<N: NoiseSource + ?Sized>(
    y_t: &LabelVector,
    eps_hat: &[f64],
    mu: &LabelVector,
    t: usize,
    noise: &mut N,
    sched: &NoiseSchedule,
) -> Result<LabelVector> {
    let next = if t >= 2 { Some(t - 1) } else { None };
    Ok(reverse_jump(y_t, eps_hat, mu, t, next, noise, sched)?.0)
}

/// Descending timesteps from `T` to 1; evenly strided when `steps < T`.
pub fn inference_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Range(format!(
            "inference steps must lie in [1, {train_steps}], got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![train_steps]);
    }
    let span = (train_steps - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|i| (1.0 + i as f64 * span).round() as usize)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub y_t: LabelVector,
    pub y0_hat: LabelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub y0_hat: LabelVector,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Runs the reverse chain for a batch of chains sharing one timestep sequence.
///
/// `predict(states, t)` returns the noise estimate for every state.
/// `noise[i]` drives chain `i`. Steps listed in `record` are kept.
pub fn run_chain<N, F>(
    mus: &[LabelVector],
    timesteps: &[usize],
    sched: &NoiseSchedule,
    noise: &mut [N],
    record: &[usize],
    mut predict: F,
) -> Result<Vec<ChainResult>>
where
    N: NoiseSource,
    F: FnMut(&[LabelVector], usize) -> Result<Vec<Vec<f64>>>,
{
    ensure_len("noise sources", noise.len(), mus.len())?;
    if timesteps.is_empty() {
        return Err(Error::Range("empty timestep sequence".into()));
    }
    let mut states: Vec<LabelVector> = mus
        .iter()
        .zip(noise.iter_mut())
        .map(|(mu, n)| LabelVector(mu.0.iter().map(|m| m + n.normal()).collect()))
        .collect();
    let mut trajectories = vec![Vec::new(); mus.len()];
    let mut finals = vec![LabelVector(Vec::new()); mus.len()];
    for (i, &t) in timesteps.iter().enumerate() {
        let next = timesteps.get(i + 1).copied();
        let eps = predict(&states, t)?;
        ensure_len("noise predictions", eps.len(), states.len())?;
        for (b, state) in states.iter_mut().enumerate() {
            let (y_next, y0) = reverse_jump(state, &eps[b], &mus[b], t, next, &mut noise[b], sched)?;
            if record.contains(&t) {
                trajectories[b].push(TrajectoryPoint {
                    t,
                    y_t: state.clone(),
                    y0_hat: y0.clone(),
                });
            }
            if next.is_none() {
                finals[b] = y0;
            }
            *state = y_next;
        }
    }
    Ok(finals
        .into_iter()
        .zip(trajectories)
        .map(|(y0_hat, trajectory)| ChainResult { y0_hat, trajectory })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub y0_hat: LabelVector,
    pub priors: PriorPair,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Classifies a batch; `noise[i]` drives image `i` so results do not depend
/// on how images are grouped into batches.
///
/// With `votes > 1` the chain runs repeatedly, the class is the majority
/// vote (ties to the lower index) and `y0_hat` averages the runs.
pub fn classify_batch<N: NoiseSource>(
    images: &[&Image],
    model: &Model,
    steps: usize,
    votes: usize,
    noise: &mut [N],
    record: &[usize],
) -> Result<Vec<Classification>> {
    ensure_len("noise sources", noise.len(), images.len())?;
    if votes == 0 {
        return Err(Error::Config("votes must be at least 1".into()));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let priors = model.priors(images)?;
    let k = model.classes;
    let Some(denoiser) = &model.denoiser else {
        let probs = model.classifier_probs(images)?;
        return Ok(probs
            .into_iter()
            .zip(priors)
            .map(|(p, priors)| {
                let y = LabelVector(p);
                Classification {
                    class: y.argmax(),
                    y0_hat: y,
                    priors,
                    trajectory: Vec::new(),
                }
            })
            .collect());
    };
    let timesteps = inference_timesteps(model.schedule.timesteps(), steps)?;
    if let Some(bad) = record.iter().find(|t| !timesteps.contains(t)) {
        return Err(Error::Range(format!("step {bad} is not in the inference schedule")));
    }
    let rho = model.embed(images)?;
    let combine = model.schedule_config.prior_combine;
    let mus = priors
        .iter()
        .map(|p| combine_priors(&p.global, &p.local, combine))
        .collect::<Result<Vec<_>>>()?;
    let cond: Vec<f32> = priors
        .iter()
        .flat_map(|p| p.global.iter().chain(&p.local).map(|&v| v as f32).collect::<Vec<_>>())
        .collect();
    let b = images.len();
    let mut votes_per_image = vec![vec![0usize; k]; b];
    let mut sums = vec![vec![0.0f64; k]; b];
    let mut first: Vec<ChainResult> = Vec::new();
    for v in 0..votes {
        let rec: &[usize] = if v == 0 { record } else { &[] };
        let results = run_chain(&mus, &timesteps, &model.schedule, noise, rec, |states, t| {
            let mut z = Vec::with_capacity(b * 3 * k);
            for (i, s) in states.iter().enumerate() {
                z.extend(s.0.iter().map(|&x| x as f32));
                z.extend_from_slice(&cond[i * 2 * k..(i + 1) * 2 * k]);
            }
            let out = denoiser.infer(&rho, &z, &vec![t; b])?;
            Ok(out.chunks(k).map(|r| r.iter().map(|&x| x as f64).collect()).collect())
        })?;
        for (i, r) in results.iter().enumerate() {
            votes_per_image[i][r.y0_hat.argmax()] += 1;
            for (s, y) in sums[i].iter_mut().zip(&r.y0_hat.0) {
                *s += y;
            }
        }
        if v == 0 {
            first = results;
        }
    }
    Ok(first
        .into_iter()
        .zip(priors)
        .enumerate()
        .map(|(i, (r, priors))| {
            let y0_hat = if votes == 1 {
                r.y0_hat
            } else {
                LabelVector(sums[i].iter().map(|s| s / votes as f64).collect())
            };
            let counts = &votes_per_image[i];
            let class = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
            Classification {
                class,
                y0_hat,
                priors,
                trajectory: r.trajectory,
            }
        })
        .collect())
}

/// Single-image classification with `steps` reverse steps.
pub fn classify<N: NoiseSource>(image: &Image, model: &Model, steps: usize, noise: &mut N, record: &[usize]) -> Result<Classification> {
    model.check_image(image)?;
    let mut one = [Borrowed(noise)];
    Ok(classify_batch(&[image], model, steps, 1, &mut one, record)?.remove(0))
}

struct Borrowed<'a, N>(&'a mut N);

impl<N: NoiseSource> NoiseSource for Borrowed<'_, N> {
    fn normal(&mut self) -> f64 {
        self.0.normal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn true_eps(y_t: &LabelVector, y0: &LabelVector, mu: &LabelVector, t: usize, s: &NoiseSchedule) -> Vec<f64> {
        let ab = s.alpha_bar(t);
        (0..y_t.len())
            .map(|i| (y_t.0[i] - ab.sqrt() * y0.0[i] - (1.0 - ab.sqrt()) * mu.0[i]) / (1.0 - ab).sqrt())
            .collect()
    }

    fn l2(a: &LabelVector, b: &LabelVector) -> f64 {
        a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn init_with_zero_noise_is_the_prior_mean() {
        let p = PriorPair {
            global: vec![0.1, 0.9],
            local: vec![0.5, 0.5],
            global_logits: vec![],
            local_logits: vec![],
        };
        assert_eq!(init_y_t(&p, PriorCombine::Mean, &mut ZeroNoise).unwrap().0, vec![0.3, 0.7]);
    }

    #[test]
    fn init_moments_match_unit_gaussian() {
        let p = PriorPair::from_logits(vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.2]);
        let mu = combine_priors(&p.global, &p.local, PriorCombine::Mean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let k = 3;
        let mut mean = vec![0.0; k];
        let mut cov = vec![0.0; k * k];
        let draws: Vec<Vec<f64>> = (0..n).map(|_| init_y_t(&p, PriorCombine::Mean, &mut rng).unwrap().0).collect();
        for d in &draws {
            for i in 0..k {
                mean[i] += d[i] / n as f64;
            }
        }
        for d in &draws {
            for i in 0..k {
                for j in 0..k {
                    cov[i * k + j] += (d[i] - mean[i]) * (d[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        for i in 0..k {
            assert!((mean[i] - mu.0[i]).abs() < 3.0 / (n as f64).sqrt());
        }
        let diff: f64 = (0..k * k).map(|i| (cov[i] - if i % (k + 1) == 0 { 1.0 } else { 0.0 }).powi(2)).sum::<f64>().sqrt();
        assert!(diff / (k as f64).sqrt() < 0.05);
    }

    #[test]
    fn terminal_step_is_the_reconstruction() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let y = LabelVector(vec![0.4, -0.2, 1.3]);
        let mu = LabelVector(vec![0.3, 0.3, 0.4]);
        let eps = [0.5, 0.1, -0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = reverse_step(&y, &eps, &mu, 1, &mut rng, &s).unwrap();
        assert_eq!(out, reconstruct_y0(&y, &eps, &mu, 1, &s).unwrap());
    }

    #[test]
    fn zero_prior_step_matches_textbook_ddpm() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [2usize, 10, 57, 100] {
            let y0 = LabelVector::one_hot(4, 2).unwrap();
            let zero = LabelVector::zeros(4);
            let eps: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let yt = crate::schedule::forward_sample(&y0, &zero, t, &eps, &s).unwrap();
            let ours = reverse_step(&yt, &eps, &zero, t, &mut ZeroNoise, &s).unwrap();
            let (a, ab) = (s.alpha(t), s.alpha_bar(t));
            for i in 0..4 {
                let textbook = (yt.0[i] - (1.0 - a) / (1.0 - ab).sqrt() * eps[i]) / a.sqrt();
                assert!((ours.0[i] - textbook).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn strided_timesteps_cover_both_ends() {
        assert_eq!(inference_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        let t = inference_timesteps(1000, 100).unwrap();
        assert_eq!(t.len(), 100);
        assert_eq!((t[0], t[99]), (1000, 1));
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(inference_timesteps(1000, 1).unwrap(), vec![1000]);
        assert!(inference_timesteps(100, 101).is_err());
        assert!(inference_timesteps(100, 0).is_err());
    }

    fn oracle_chain(noise_seed: Option<u64>, trials: usize) -> f64 {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let steps = inference_timesteps(100, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        for trial in 0..trials {
            let y0 = LabelVector::one_hot(4, rng.gen_range(0..4)).unwrap();
            let mu = LabelVector((0..4).map(|_| rng.gen_range(0.0..1.0)).collect());
            let out = match noise_seed {
                None => run_chain(&[mu.clone()], &steps, &s, &mut [ZeroNoise], &[], |st, t| {
                    Ok(vec![true_eps(&st[0], &y0, &mu, t, &s)])
                }),
                Some(seed) => run_chain(&[mu.clone()], &steps, &s, &mut [ChaCha8Rng::seed_from_u64(seed + trial as u64)], &[], |st, t| {
                    Ok(vec![true_eps(&st[0], &y0, &mu, t, &s)])
                }),
            }
            .unwrap();
            total += l2(&out[0].y0_hat, &y0);
        }
        total / trials as f64
    }

    #[test]
    fn oracle_denoiser_recovers_y0() {
        assert!(oracle_chain(None, 20) < 1e-3);
        assert!(oracle_chain(Some(100), 100) < 0.05);
    }

    #[test]
    fn chain_records_requested_steps() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let steps = inference_timesteps(20, 5).unwrap();
        let mu = LabelVector(vec![0.5, 0.5]);
        let out = run_chain(&[mu.clone(), mu], &steps, &s, &mut [ZeroNoise, ZeroNoise], &[20, 1], |st, _| {
            Ok(vec![vec![0.1, -0.1]; st.len()])
        })
        .unwrap();
        for r in &out {
            assert_eq!(r.trajectory.iter().map(|p| p.t).collect::<Vec<_>>(), vec![20, 1]);
            assert_eq!(r.trajectory[1].y0_hat, r.y0_hat);
        }
    }

    fn small_model(variant: Variant) -> Model {
        let mut cfg = RunConfig::desk();
        cfg.variant = variant;
        cfg.data.image_size = 32;
        cfg.dcg.roi_size = 16;
        cfg.denoiser.latent_dim = 16;
        cfg.schedule.timesteps = 50;
        cfg.schedule.inference_steps = 10;
        Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn test_image() -> Image {
        Image::new(1, 32, 32, (0..1024).map(|i| ((i * 37) % 101) as f32 / 101.0).collect()).unwrap()
    }

    #[test]
    fn classify_is_deterministic_under_a_fixed_seed() {
        let m = small_model(Variant::Full);
        let img = test_image();
        let a = classify(&img, &m, 10, &mut ChaCha8Rng::seed_from_u64(9), &[50, 1]).unwrap();
        let b = classify(&img, &m, 10, &mut ChaCha8Rng::seed_from_u64(9), &[50, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.len(), 2);
        assert_eq!(a.class, a.y0_hat.argmax());
        assert!(classify(&img, &m, 10, &mut ZeroNoise, &[7]).is_err());
        assert!(classify(&img, &m, 51, &mut ZeroNoise, &[]).is_err());
    }

    #[test]
    fn batch_results_match_single_image_calls() {
        let m = small_model(Variant::C1);
        let imgs = [test_image(), Image::zeros(1, 32, 32)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut noise = [ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2)];
        let batch = classify_batch(&refs, &m, 10, 1, &mut noise, &[]).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let one = classify(img, &m, 10, &mut ChaCha8Rng::seed_from_u64(i as u64 + 1), &[]).unwrap();
            for (a, b) in one.y0_hat.0.iter().zip(&batch[i].y0_hat.0) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn basic_variant_classifies_without_diffusion() {
        let m = small_model(Variant::Basic);
        let c = classify(&test_image(), &m, 10, &mut ZeroNoise, &[]).unwrap();
        assert!((c.y0_hat.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(c.trajectory.is_empty());
    }

    #[test]
    fn argmax_ignores_constant_shifts() {
        let y = LabelVector(vec![0.1, 0.7, 0.3]);
        let shifted = LabelVector(y.0.iter().map(|v| v + 12.5).collect());
        assert_eq!(y.argmax(), shifted.argmax());
    }
}
