//! Conditional noise predictor over label space.
//!
//! Structure, with `D` the latent width and `K` the number of classes:
//!
//! ```text
//! u0 = softplus(BN(W0 [y_t, y_g, y_l])) * e0(t) * rho
//! u1 = softplus(BN(W1 u0)) * e1(t)
//! u2 = softplus(BN(W2 u1)) * e2(t)
//! eps_hat = W3 u2
//! ```
//!
//! `rho` is the image embedding and `e_i(t)` are learned projections of a
//! sinusoidal timestep code.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::dcg::batch_map;
use crate::error::{ensure_len, Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, join, softplus, softplus_grad, BatchNorm, ConvEncoder, Linear, Module, Slot};
use crate::schedule::LabelVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            encoder_channels: vec![8, 16, 32, 32],
            encoder_strides: vec![2, 2, 2, 1],
        }
    }
}

/// Sinusoidal code of timestep `t`: `dim / 2` sines then `dim / 2` cosines.
pub fn sinusoid(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

/// Learned projection of the sinusoidal timestep code.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    proj: Linear,
    dim: usize,
    rows: Vec<usize>,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(dim, dim, rng),
            dim,
            rows: Vec::new(),
        }
    }

    fn unique(ts: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut index = BTreeMap::new();
        let mut uniq = Vec::new();
        let rows = ts
            .iter()
            .map(|&t| {
                *index.entry(t).or_insert_with(|| {
                    uniq.push(t);
                    uniq.len() - 1
                })
            })
            .collect();
        (uniq, rows)
    }

    fn codes(&self, uniq: &[usize]) -> Vec<f32> {
        uniq.iter().flat_map(|&t| sinusoid(t, self.dim)).collect()
    }

    fn expand(&self, table: &[f32], rows: &[usize]) -> Vec<f32> {
        rows.iter().flat_map(|&r| table[r * self.dim..(r + 1) * self.dim].iter().cloned()).collect()
    }

    pub fn infer(&self, ts: &[usize]) -> Vec<f32> {
        let (uniq, rows) = Self::unique(ts);
        let table = self.proj.infer(&self.codes(&uniq), uniq.len());
        self.expand(&table, &rows)
    }

    pub fn forward(&mut self, ts: &[usize]) -> Vec<f32> {
        let (uniq, rows) = Self::unique(ts);
        let codes = self.codes(&uniq);
        let table = self.proj.forward(&codes, uniq.len());
        let out = self.expand(&table, &rows);
        self.rows = rows;
        out
    }

    pub fn backward(&mut self, dy: &[f32]) {
        let uniq = self.rows.iter().max().map_or(0, |m| m + 1);
        let mut dtable = vec![0.0f32; uniq * self.dim];
        for (b, &r) in self.rows.iter().enumerate() {
            for (o, v) in dtable[r * self.dim..(r + 1) * self.dim].iter_mut().zip(&dy[b * self.dim..(b + 1) * self.dim]) {
                *o += v;
            }
        }
        self.proj.backward(&dtable, uniq);
    }
}

impl Module for TimeEmbedding {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
}

/// Image embedding `rho`, one row of width `latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding(pub Vec<f32>);

/// CNN encoder, global average pool and a linear map to the latent width.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cnn: ConvEncoder,
    proj: Linear,
    channels: usize,
    image_size: usize,
    feat_shape: (usize, usize, usize, usize),
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &DenoiserConfig, channels: usize, image_size: usize, rng: &mut R) -> Result<Self> {
        if cfg.encoder_channels.is_empty() || cfg.encoder_channels.len() != cfg.encoder_strides.len() {
            return Err(Error::Config("image encoder needs one stride per block".into()));
        }
        let cnn = ConvEncoder::new(channels, &cfg.encoder_channels, &cfg.encoder_strides, rng);
        let proj = Linear::new(cnn.out_channels(), cfg.latent_dim, rng);
        Ok(Self {
            cnn,
            proj,
            channels,
            image_size,
            feat_shape: (0, 0, 0, 0),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.proj.out_dim()
    }

    fn check(&self, images: &[&Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Shape("empty image batch".into()));
        }
        for im in images {
            if im.channels != self.channels || im.height != self.image_size || im.width != self.image_size {
                return Err(Error::Shape(format!(
                    "encoder expects {}x{}x{} images, got {}x{}x{}",
                    self.channels, self.image_size, self.image_size, im.channels, im.height, im.width
                )));
            }
        }
        Ok(())
    }

    /// Embeddings (`B × D`) of normalized images.
    pub fn infer(&self, images: &[&Image]) -> Result<Vec<f32>> {
        self.check(images)?;
        let fm = self.cnn.infer(&batch_map(images));
        Ok(self.proj.infer(&global_avg_pool(&fm), images.len()))
    }

    /// Embedding of one raw `[0, 1]` image.
    pub fn embed_image(&self, image: &Image) -> Result<ImageEmbedding> {
        Ok(ImageEmbedding(self.infer(&[&image.normalized()])?))
    }

    pub fn forward(&mut self, images: &[&Image]) -> Result<Vec<f32>> {
        self.check(images)?;
        let fm = self.cnn.forward(&batch_map(images));
        self.feat_shape = (fm.channels, fm.batch, fm.height, fm.width);
        Ok(self.proj.forward(&global_avg_pool(&fm), images.len()))
    }

    pub fn backward(&mut self, drho: &[f32]) {
        let (c, b, h, w) = self.feat_shape;
        let dpool = self.proj.backward(drho, b);
        self.cnn.backward(global_avg_pool_backward(&dpool, c, b, h, w));
    }
}

impl Module for ImageEncoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.cnn.visit(&join(prefix, "cnn"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone, Default)]
struct Cache {
    rho: Vec<f32>,
    pre: Vec<Vec<f32>>,
    act: Vec<Vec<f32>>,
    temb: Vec<Vec<f32>>,
    rows: usize,
}

/// The noise predictor `eps_theta(rho, y_t, y_g, y_l, t)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    classes: usize,
    latent: usize,
    layers: Vec<Linear>,
    norms: Vec<BatchNorm>,
    times: Vec<TimeEmbedding>,
    head: Linear,
    cache: Cache,
}

const BLOCKS: usize = 3;

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(classes: usize, latent: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 || latent < 2 {
            return Err(Error::Config(format!("denoiser needs K >= 2 and D >= 2, got K={classes} D={latent}")));
        }
        let layers = (0..BLOCKS)
            .map(|i| Linear::new(if i == 0 { 3 * classes } else { latent }, latent, rng))
            .collect();
        let norms = (0..BLOCKS).map(|_| BatchNorm::new(latent)).collect();
        let times = (0..BLOCKS).map(|_| TimeEmbedding::new(latent, rng)).collect();
        let head = Linear::new(latent, classes, rng);
        Ok(Self {
            classes,
            latent,
            layers,
            norms,
            times,
            head,
            cache: Cache::default(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    fn check(&self, rho: &[f32], z: &[f32], ts: &[usize]) -> Result<usize> {
        let rows = ts.len();
        if rows == 0 {
            return Err(Error::Shape("empty denoiser batch".into()));
        }
        ensure_len("image embedding", rho.len(), rows * self.latent)?;
        ensure_len("denoiser input", z.len(), rows * 3 * self.classes)?;
        if ts.contains(&0) {
            return Err(Error::Range("timestep must be at least 1".into()));
        }
        Ok(rows)
    }

    fn run(&mut self, rho: &[f32], z: &[f32], ts: &[usize], train: bool) -> Vec<f32> {
        let rows = ts.len();
        let mut cache = Cache {
            rho: rho.to_vec(),
            rows,
            ..Cache::default()
        };
        let mut u = z.to_vec();
        for i in 0..BLOCKS {
            let a = self.layers[i].forward(&u, rows);
            let n = self.norms[i].forward(&a, rows, train);
            let e = self.times[i].forward(ts);
            let s: Vec<f32> = n.iter().map(|&v| softplus(v)).collect();
            u = s.iter().zip(&e).map(|(a, b)| a * b).collect();
            if i == 0 {
                u.iter_mut().zip(rho).for_each(|(a, r)| *a *= r);
            }
            cache.pre.push(n);
            cache.act.push(s);
            cache.temb.push(e);
        }
        self.cache = cache;
        self.head.forward(&u, rows)
    }

    /// Evaluation-mode batch prediction. `z` rows are `[y_t, y_g, y_l]`.
    pub fn infer(&self, rho: &[f32], z: &[f32], ts: &[usize]) -> Result<Vec<f32>> {
        let rows = self.check(rho, z, ts)?;
        let mut u = z.to_vec();
        for i in 0..BLOCKS {
            let n = self.norms[i].infer(&self.layers[i].infer(&u, rows), rows);
            let e = self.times[i].infer(ts);
            u = n.iter().zip(&e).map(|(a, b)| softplus(*a) * b).collect();
            if i == 0 {
                u.iter_mut().zip(rho).for_each(|(a, r)| *a *= r);
            }
        }
        Ok(self.head.infer(&u, rows))
    }

    /// Training-mode forward; caches activations for [`Denoiser::backward`].
    pub fn forward(&mut self, rho: &[f32], z: &[f32], ts: &[usize], train: bool) -> Result<Vec<f32>> {
        self.check(rho, z, ts)?;
        Ok(self.run(rho, z, ts, train))
    }

    /// Accumulates parameter gradients and returns `d rho`.
    pub fn backward(&mut self, deps: &[f32]) -> Vec<f32> {
        let c = std::mem::take(&mut self.cache);
        let rows = c.rows;
        let mut du = self.head.backward(deps, rows);
        let mut drho = vec![0.0f32; rows * self.latent];
        for i in (0..BLOCKS).rev() {
            let (s, e) = (&c.act[i], &c.temb[i]);
            let mut de = vec![0.0f32; du.len()];
            let mut dn = vec![0.0f32; du.len()];
            for j in 0..du.len() {
                let gate = if i == 0 { c.rho[j] } else { 1.0 };
                de[j] = du[j] * s[j] * gate;
                dn[j] = du[j] * e[j] * gate * softplus_grad(c.pre[i][j]);
                if i == 0 {
                    drho[j] = du[j] * s[j] * e[j];
                }
            }
            self.times[i].backward(&de);
            let da = self.norms[i].backward(&dn, rows);
            du = self.layers[i].backward(&da, rows);
        }
        drho
    }

    /// Single-sample evaluation-mode prediction in label space.
    pub fn predict_noise(&self, rho: &ImageEmbedding, y_t: &LabelVector, y_g: &[f64], y_l: &[f64], t: usize) -> Result<Vec<f64>> {
        let k = self.classes;
        ensure_len("y_t", y_t.len(), k)?;
        ensure_len("global prior", y_g.len(), k)?;
        ensure_len("local prior", y_l.len(), k)?;
        let z: Vec<f32> = y_t.as_slice().iter().chain(y_g).chain(y_l).map(|&v| v as f32).collect();
        Ok(self.infer(&rho.0, &z, &[t])?.into_iter().map(f64::from).collect())
    }
}

impl Module for Denoiser {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        for i in 0..BLOCKS {
            self.layers[i].visit(&join(prefix, &format!("fc{i}")), f);
            self.norms[i].visit(&join(prefix, &format!("bn{i}")), f);
            self.times[i].visit(&join(prefix, &format!("time{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(rng: &mut ChaCha8Rng, rows: usize, k: usize, d: usize) -> (Vec<f32>, Vec<f32>, Vec<usize>) {
        let rho = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = (0..rows * 3 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts = (0..rows).map(|_| rng.gen_range(1..=1000)).collect();
        (rho, z, ts)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(k, d) in &[(4usize, 256usize), (2, 8), (7, 33)] {
            let mut net = Denoiser::new(k, d, &mut rng).unwrap();
            assert_eq!(net.param_count(), 5 * d * d + 4 * k * d + 12 * d + k, "K={k} D={d}");
        }
        let mut net = Denoiser::new(4, 256, &mut rng).unwrap();
        assert_eq!(net.param_count(), 334_852);
    }

    #[test]
    fn sinusoid_layout() {
        let e = sinusoid(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let e = sinusoid(3, 8);
        assert!((e[0] - 3f32.sin()).abs() < 1e-6);
        assert!((e[4] - 3f32.cos()).abs() < 1e-6);
        assert_ne!(sinusoid(5, 16), sinusoid(6, 16));
    }

    #[test]
    fn output_shape_and_batch_independence_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, d) = (4, 16);
        let net = Denoiser::new(k, d, &mut rng).unwrap();
        let (rho, z, ts) = inputs(&mut rng, 5, k, d);
        let all = net.infer(&rho, &z, &ts).unwrap();
        assert_eq!(all.len(), 5 * k);
        for b in 0..5 {
            let one = net.infer(&rho[b * d..(b + 1) * d], &z[b * 3 * k..(b + 1) * 3 * k], &ts[b..b + 1]).unwrap();
            for j in 0..k {
                assert!((one[j] - all[b * k + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn predict_noise_matches_batched_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Denoiser::new(3, 8, &mut rng).unwrap();
        let rho = ImageEmbedding((0..8).map(|i| i as f32 * 0.1).collect());
        let y = LabelVector(vec![0.2, -0.4, 1.1]);
        let p = [0.2, 0.3, 0.5];
        let a = net.predict_noise(&rho, &y, &p, &p, 17).unwrap();
        let z: Vec<f32> = y.0.iter().chain(&p).chain(&p).map(|&v| v as f32).collect();
        let b = net.infer(&rho.0, &z, &[17]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, *y as f64);
        }
        assert!(net.predict_noise(&rho, &LabelVector(vec![0.0; 2]), &p, &p, 1).is_err());
        assert!(net.predict_noise(&rho, &y, &p, &p, 0).is_err());
    }

    #[test]
    fn forward_eval_matches_infer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Denoiser::new(4, 12, &mut rng).unwrap();
        let (rho, z, ts) = inputs(&mut rng, 3, 4, 12);
        let a = net.infer(&rho, &z, &ts).unwrap();
        let b = net.forward(&rho, &z, &ts, false).unwrap();
        assert_eq!(a, b);
    }

    fn check_gradients(train: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (k, d, rows) = (3, 6, 4);
        let mut net = Denoiser::new(k, d, &mut rng).unwrap();
        let (rho, z, ts) = inputs(&mut rng, rows, k, d);
        let loss = |n: &mut Denoiser, rho: &[f32]| -> f64 {
            let out = n.clone().forward(rho, &z, &ts, train).unwrap();
            out.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / out.len() as f64
        };
        let out = net.forward(&rho, &z, &ts, train).unwrap();
        let dout: Vec<f32> = out.iter().map(|&v| 2.0 * v / out.len() as f32).collect();
        let drho = net.backward(&dout);

        let mut names = Vec::new();
        net.visit("", &mut |n, s| {
            if let Slot::Param(p) = s {
                names.push((n, p.len()));
            }
        });
        let eps = 1e-2f32;
        let mut checked = 0;
        for (i, (name, len)) in names.iter().enumerate() {
            let idx = (i * 7) % len;
            let mut grad = 0.0;
            let mut plus = net.clone();
            let mut minus = net.clone();
            net.visit("", &mut |n, s| {
                if let Slot::Param(p) = s {
                    if &n == name {
                        grad = p.grad[idx];
                    }
                }
            });
            for (m, delta) in [(&mut plus, eps), (&mut minus, -eps)] {
                m.visit("", &mut |n, s| {
                    if let Slot::Param(p) = s {
                        if &n == name {
                            p.value[idx] += delta;
                        }
                    }
                });
            }
            let fd = (loss(&mut plus, &rho) - loss(&mut minus, &rho)) / (2.0 * eps as f64);
            let tol = 2e-2 * fd.abs().max(grad.abs() as f64).max(1e-2);
            assert!((fd - grad as f64).abs() < tol, "{name}[{idx}] fd {fd} vs {grad}");
            checked += 1;
        }
        assert!(checked >= 10);
        for j in [0, 5, 11, 23] {
            let mut rp = rho.clone();
            rp[j] += eps;
            let mut rm = rho.clone();
            rm[j] -= eps;
            let fd = (loss(&mut net, &rp) - loss(&mut net, &rm)) / (2.0 * eps as f64);
            let tol = 2e-2 * fd.abs().max(drho[j].abs() as f64).max(1e-2);
            assert!((fd - drho[j] as f64).abs() < tol, "rho[{j}] fd {fd} vs {}", drho[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_eval_mode() {
        check_gradients(false);
    }

    #[test]
    fn gradients_match_finite_differences_in_train_mode() {
        check_gradients(true);
    }

    #[test]
    fn image_encoder_embeds_to_latent_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DenoiserConfig {
            latent_dim: 10,
            encoder_channels: vec![4, 4],
            encoder_strides: vec![2, 2],
        };
        let enc = ImageEncoder::new(&cfg, 1, 16, &mut rng).unwrap();
        let img = Image::new(1, 16, 16, (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        assert_eq!(enc.embed_image(&img).unwrap().0.len(), 10);
        assert!(enc.embed_image(&Image::zeros(1, 8, 8)).is_err());
    }
}
