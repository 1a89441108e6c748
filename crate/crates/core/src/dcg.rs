//! Dual-granularity conditional guidance: a global saliency stream and a local
//! ROI stream, each producing a class prior for the diffusion model.
//!
//! Global stream: encoder -> 1×1 conv (one channel per class) -> saliency map;
//! the global logits are the spatial mean of each saliency channel.
//!
//! Local stream: the saliency map picks `n` ROIs by greedy non-maximum
//! suppression, each crop goes through a small encoder, and gated attention
//! pools the crop features into one vector for a linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    gemm, global_avg_pool, global_avg_pool_backward, join, sigmoid, softmax_rows, Conv2d, ConvEncoder,
    FeatureMap, Linear, Module, Param, Slot,
};

/// How per-class saliency responses collapse to one score per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelCollapse {
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcgConfig {
    pub global_channels: Vec<usize>,
    pub global_strides: Vec<usize>,
    pub local_channels: Vec<usize>,
    pub local_strides: Vec<usize>,
    pub attention_dim: usize,
    pub roi_count: usize,
    pub roi_size: usize,
    #[serde(default)]
    pub channel_collapse: ChannelCollapse,
}

impl Default for DcgConfig {
    fn default() -> Self {
        Self {
            global_channels: vec![8, 16, 32, 32],
            global_strides: vec![2, 2, 2, 1],
            local_channels: vec![8, 16],
            local_strides: vec![2, 2],
            attention_dim: 128,
            roi_count: 6,
            roi_size: 32,
            channel_collapse: ChannelCollapse::Max,
        }
    }
}

/// Per-class spatial responses of one image at encoder resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Input pixels per response cell along each axis.
    pub stride: usize,
    /// `classes × height × width`.
    pub responses: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(classes: usize, height: usize, width: usize, stride: usize, responses: Vec<f32>) -> Result<Self> {
        if responses.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "saliency {classes}x{height}x{width} needs {} values, got {}",
                classes * height * width,
                responses.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            stride,
            responses,
        })
    }

    pub fn collapse(&self, mode: ChannelCollapse) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|i| {
                let it = (0..self.classes).map(|k| self.responses[k * hw + i]);
                match mode {
                    ChannelCollapse::Max => it.fold(f32::NEG_INFINITY, f32::max),
                    ChannelCollapse::Sum => it.sum(),
                }
            })
            .collect()
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..self.classes)
            .map(|k| self.responses[k * hw..(k + 1) * hw].iter().sum::<f32>() / hw as f32)
            .collect()
    }
}

/// Selected crops of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    pub size: usize,
    pub channels: usize,
    /// `n × channels × size × size`.
    pub patches: Vec<f32>,
    /// Selected centers `(row, col)` in input pixels.
    pub centers: Vec<(usize, usize)>,
    /// Top-left corner `(row, col)` of each crop after clamping to the image.
    pub origins: Vec<(usize, usize)>,
    /// Selection scores, non-increasing.
    pub scores: Vec<f32>,
}

impl RoiSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.channels * self.size * self.size;
        &self.patches[i * n..(i + 1) * n]
    }
}

/// Fixed fallback centers: a `rows × cols` grid with `rows = floor(sqrt(n))`.
pub fn grid_centers(n: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let rows = ((n as f64).sqrt().floor() as usize).max(1);
    let cols = n.div_ceil(rows);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let y = ((r as f64 + 0.5) * height as f64 / rows as f64).floor() as usize;
            let x = ((c as f64 + 0.5) * width as f64 / cols as f64).floor() as usize;
            out.push((y.min(height - 1), x.min(width - 1)));
        }
    }
    out
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Greedy saliency-driven ROI selection.
///
/// The collapsed map is upsampled to image resolution by nearest neighbour;
/// pixels strictly above the map minimum are candidates, visited in
/// descending response with ties in row-major order. A candidate is taken
/// when its Chebyshev distance to every taken center is at least `size / 2`.
/// Missing picks come from [`grid_centers`]. Crops are clamped inside the image.
pub fn select_rois(sal: &SaliencyMap, image: &Image, n: usize, size: usize, collapse: ChannelCollapse) -> Result<RoiSet> {
    let (h, w) = (image.height, image.width);
    if n == 0 {
        return Err(Error::Config("roi count must be at least 1".into()));
    }
    if size == 0 || size > h || size > w {
        return Err(Error::Config(format!("roi size {size} does not fit a {h}x{w} image")));
    }
    let cells = sal.collapse(collapse);
    let upsampled: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let cy = (y * sal.height / h).min(sal.height - 1);
            let cx = (x * sal.width / w).min(sal.width - 1);
            cells[cy * sal.width + cx]
        })
        .collect();
    let floor = upsampled.iter().cloned().fold(f32::INFINITY, f32::min);
    let mut order: Vec<usize> = (0..h * w).filter(|&i| upsampled[i] > floor).collect();
    order.sort_by(|&a, &b| upsampled[b].total_cmp(&upsampled[a]).then(a.cmp(&b)));

    let radius = size / 2;
    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in order {
        if centers.len() == n {
            break;
        }
        let p = (i / w, i % w);
        if centers.iter().all(|&c| chebyshev(c, p) >= radius) {
            centers.push(p);
            scores.push(upsampled[i]);
        }
    }
    if centers.len() < n {
        let grid = grid_centers(n, h, w);
        for relaxed in [false, true] {
            for &g in &grid {
                if centers.len() == n {
                    break;
                }
                let ok = if relaxed {
                    !centers.contains(&g)
                } else {
                    centers.iter().all(|&c| chebyshev(c, g) >= radius)
                };
                if ok {
                    centers.push(g);
                    scores.push(floor);
                }
            }
        }
    }

    let c = image.channels;
    let mut patches = Vec::with_capacity(n * c * size * size);
    let mut origins = Vec::with_capacity(n);
    for &(cy, cx) in &centers {
        let top = cy.saturating_sub(radius).min(h - size);
        let left = cx.saturating_sub(radius).min(w - size);
        origins.push((top, left));
        for ch in 0..c {
            for y in top..top + size {
                let row = (ch * h + y) * w;
                patches.extend_from_slice(&image.data[row + left..row + left + size]);
            }
        }
    }
    Ok(RoiSet {
        size,
        channels: c,
        patches,
        centers,
        origins,
        scores,
    })
}

/// Gated-attention pooling over a bag of instance features.
///
/// `score_k = w . (tanh(V h_k) * sigmoid(U h_k))`, weights are the softmax of
/// the scores within each bag, and the output is the weighted feature sum.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    pub v: Param,
    pub u: Param,
    pub w: Param,
    feat: usize,
    att: usize,
    cache: Option<AttentionCache>,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    h: Vec<f32>,
    tanh_p: Vec<f32>,
    sig_q: Vec<f32>,
    weights: Vec<f32>,
    bags: usize,
    per_bag: usize,
}

impl GatedAttention {
    pub fn new<R: Rng + ?Sized>(feat: usize, att: usize, rng: &mut R) -> Self {
        let bf = 1.0 / (feat as f32).sqrt();
        let ba = 1.0 / (att as f32).sqrt();
        Self {
            v: Param::uniform(&[att, feat], bf, rng),
            u: Param::uniform(&[att, feat], bf, rng),
            w: Param::uniform(&[att], ba, rng),
            feat,
            att,
            cache: None,
        }
    }

    fn project(&self, h: &[f32], rows: usize) -> (Vec<f32>, Vec<f32>) {
        let mut p = vec![0.0; rows * self.att];
        let mut q = vec![0.0; rows * self.att];
        gemm(rows, self.feat, self.att, h, false, &self.v.value, true, 0.0, &mut p);
        gemm(rows, self.feat, self.att, h, false, &self.u.value, true, 0.0, &mut q);
        p.iter_mut().for_each(|x| *x = x.tanh());
        q.iter_mut().for_each(|x| *x = sigmoid(*x));
        (p, q)
    }

    /// Attention weights (`bags × per_bag`) for features `h` (`bags·per_bag × feat`).
    pub fn weights(&self, h: &[f32], bags: usize, per_bag: usize) -> Vec<f32> {
        let (tp, sq) = self.project(h, bags * per_bag);
        self.weights_from(&tp, &sq, bags, per_bag)
    }

    fn weights_from(&self, tp: &[f32], sq: &[f32], bags: usize, per_bag: usize) -> Vec<f32> {
        let scores: Vec<f32> = (0..bags * per_bag)
            .map(|r| {
                (0..self.att)
                    .map(|a| self.w.value[a] * tp[r * self.att + a] * sq[r * self.att + a])
                    .sum()
            })
            .collect();
        softmax_rows(&scores, per_bag)
    }

    fn pool(&self, h: &[f32], weights: &[f32], bags: usize, per_bag: usize) -> Vec<f32> {
        let f = self.feat;
        let mut out = vec![0.0; bags * f];
        for b in 0..bags {
            for k in 0..per_bag {
                let a = weights[b * per_bag + k];
                let row = &h[(b * per_bag + k) * f..(b * per_bag + k + 1) * f];
                for (o, v) in out[b * f..(b + 1) * f].iter_mut().zip(row) {
                    *o += a * v;
                }
            }
        }
        out
    }

    pub fn infer(&self, h: &[f32], bags: usize, per_bag: usize) -> (Vec<f32>, Vec<f32>) {
        let weights = self.weights(h, bags, per_bag);
        (self.pool(h, &weights, bags, per_bag), weights)
    }

    pub fn forward(&mut self, h: &[f32], bags: usize, per_bag: usize) -> Vec<f32> {
        let (tp, sq) = self.project(h, bags * per_bag);
        let weights = self.weights_from(&tp, &sq, bags, per_bag);
        let pooled = self.pool(h, &weights, bags, per_bag);
        self.cache = Some(AttentionCache {
            h: h.to_vec(),
            tanh_p: tp,
            sig_q: sq,
            weights,
            bags,
            per_bag,
        });
        pooled
    }

    /// Returns the gradient with respect to the instance features.
    pub fn backward(&mut self, dpooled: &[f32]) -> Vec<f32> {
        let c = self.cache.take().expect("attention backward without forward");
        let (f, att) = (self.feat, self.att);
        let rows = c.bags * c.per_bag;
        let mut dh = vec![0.0; rows * f];
        let mut dscore = vec![0.0; rows];
        for b in 0..c.bags {
            let dp = &dpooled[b * f..(b + 1) * f];
            let mut da = vec![0.0; c.per_bag];
            for k in 0..c.per_bag {
                let r = b * c.per_bag + k;
                let a = c.weights[r];
                let hr = &c.h[r * f..(r + 1) * f];
                da[k] = hr.iter().zip(dp).map(|(x, y)| x * y).sum();
                for (o, y) in dh[r * f..(r + 1) * f].iter_mut().zip(dp) {
                    *o += a * y;
                }
            }
            let dot: f32 = (0..c.per_bag).map(|k| c.weights[b * c.per_bag + k] * da[k]).sum();
            for k in 0..c.per_bag {
                let r = b * c.per_bag + k;
                dscore[r] = c.weights[r] * (da[k] - dot);
            }
        }
        let mut dp_pre = vec![0.0; rows * att];
        let mut dq_pre = vec![0.0; rows * att];
        for r in 0..rows {
            for a in 0..att {
                let i = r * att + a;
                let (tp, sq) = (c.tanh_p[i], c.sig_q[i]);
                self.w.grad[a] += dscore[r] * tp * sq;
                let dg = dscore[r] * self.w.value[a];
                dp_pre[i] = dg * sq * (1.0 - tp * tp);
                dq_pre[i] = dg * tp * sq * (1.0 - sq);
            }
        }
        gemm(att, rows, f, &dp_pre, true, &c.h, false, 1.0, &mut self.v.grad);
        gemm(att, rows, f, &dq_pre, true, &c.h, false, 1.0, &mut self.u.grad);
        gemm(rows, att, f, &dp_pre, false, &self.v.value, false, 1.0, &mut dh);
        gemm(rows, att, f, &dq_pre, false, &self.u.value, false, 1.0, &mut dh);
        dh
    }
}

impl Module for GatedAttention {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "v"), Slot::Param(&mut self.v));
        f(join(prefix, "u"), Slot::Param(&mut self.u));
        f(join(prefix, "w"), Slot::Param(&mut self.w));
    }
}

/// Global and local class priors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPair {
    pub global: Vec<f64>,
    pub local: Vec<f64>,
    pub global_logits: Vec<f32>,
    pub local_logits: Vec<f32>,
}

impl PriorPair {
    pub fn from_logits(global_logits: Vec<f32>, local_logits: Vec<f32>) -> Self {
        Self {
            global: softmax_f64(&global_logits),
            local: softmax_f64(&local_logits),
            global_logits,
            local_logits,
        }
    }

    /// Both priors at `1 / k`, used when the guidance model is disabled.
    pub fn uniform(k: usize) -> Self {
        Self::from_logits(vec![0.0; k], vec![0.0; k])
    }

    pub fn classes(&self) -> usize {
        self.global.len()
    }
}

pub(crate) fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Everything a training step needs from one DCG forward pass.
#[derive(Debug, Clone)]
pub struct DcgOutput {
    /// `B × K`.
    pub global_logits: Vec<f32>,
    /// `B × K`.
    pub local_logits: Vec<f32>,
    pub saliency: Vec<SaliencyMap>,
    pub rois: Vec<RoiSet>,
    /// `B × n` gated-attention weights.
    pub attention: Vec<f32>,
}

impl DcgOutput {
    pub fn priors(&self, k: usize) -> Vec<PriorPair> {
        self.global_logits
            .chunks(k)
            .zip(self.local_logits.chunks(k))
            .map(|(g, l)| PriorPair::from_logits(g.to_vec(), l.to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone)]
struct DcgCache {
    batch: usize,
    sal_shape: (usize, usize),
    local_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Dcg {
    cfg: DcgConfig,
    classes: usize,
    channels: usize,
    image_size: usize,
    global: ConvEncoder,
    saliency_head: Conv2d,
    local: ConvEncoder,
    attention: GatedAttention,
    local_head: Linear,
    cache: Option<DcgCache>,
}

impl Dcg {
    pub fn new<R: Rng + ?Sized>(cfg: &DcgConfig, classes: usize, channels: usize, image_size: usize, rng: &mut R) -> Result<Self> {
        if cfg.global_channels.is_empty() || cfg.global_channels.len() != cfg.global_strides.len() {
            return Err(Error::Config("dcg global stream needs one stride per block".into()));
        }
        if cfg.local_channels.is_empty() || cfg.local_channels.len() != cfg.local_strides.len() {
            return Err(Error::Config("dcg local stream needs one stride per block".into()));
        }
        if cfg.roi_count == 0 || cfg.roi_size == 0 || cfg.roi_size > image_size {
            return Err(Error::Config(format!(
                "roi size {} must fit the {image_size}px input",
                cfg.roi_size
            )));
        }
        let global = ConvEncoder::new(channels, &cfg.global_channels, &cfg.global_strides, rng);
        let saliency_head = Conv2d::new(global.out_channels(), classes, 1, 1, rng);
        let local = ConvEncoder::new(channels, &cfg.local_channels, &cfg.local_strides, rng);
        let feat = local.out_channels();
        let attention = GatedAttention::new(feat, cfg.attention_dim, rng);
        let local_head = Linear::new(feat, classes, rng);
        Ok(Self {
            cfg: cfg.clone(),
            classes,
            channels,
            image_size,
            global,
            saliency_head,
            local,
            attention,
            local_head,
            cache: None,
        })
    }

    pub fn config(&self) -> &DcgConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        for im in images {
            if im.channels != self.channels || im.height != self.image_size || im.width != self.image_size {
                return Err(Error::Shape(format!(
                    "dcg expects {}x{}x{} images, got {}x{}x{}",
                    self.channels, self.image_size, self.image_size, im.channels, im.height, im.width
                )));
            }
        }
        Ok(())
    }

    fn split_saliency(&self, sal: &FeatureMap) -> Vec<SaliencyMap> {
        let stride = (self.image_size / sal.height).max(1);
        (0..sal.batch)
            .map(|b| {
                let mut r = Vec::with_capacity(self.classes * sal.height * sal.width);
                for k in 0..self.classes {
                    r.extend_from_slice(sal.plane(k, b));
                }
                SaliencyMap {
                    classes: self.classes,
                    height: sal.height,
                    width: sal.width,
                    stride,
                    responses: r,
                }
            })
            .collect()
    }

    /// Global stream on normalized images: saliency maps and `B × K` logits.
    pub fn global_forward(&self, images: &[&Image]) -> Result<(Vec<SaliencyMap>, Vec<f32>)> {
        self.check_images(images)?;
        let x = batch_map(images);
        let sal = self.saliency_head.infer(&self.global.infer(&x));
        let maps = self.split_saliency(&sal);
        let logits = maps.iter().flat_map(|m| m.channel_means()).collect();
        Ok((maps, logits))
    }

    pub fn select(&self, sal: &SaliencyMap, image: &Image) -> Result<RoiSet> {
        select_rois(sal, image, self.cfg.roi_count, self.cfg.roi_size, self.cfg.channel_collapse)
    }

    fn roi_batch(&self, rois: &[RoiSet]) -> Result<FeatureMap> {
        let n = self.cfg.roi_count;
        let mut samples: Vec<&[f32]> = Vec::with_capacity(rois.len() * n);
        for set in rois {
            if set.len() != n || set.size != self.cfg.roi_size || set.channels != self.channels {
                return Err(Error::Shape(format!(
                    "expected {n} ROIs of {}px with {} channels",
                    self.cfg.roi_size, self.channels
                )));
            }
            for i in 0..n {
                samples.push(set.patch(i));
            }
        }
        let s = self.cfg.roi_size;
        Ok(FeatureMap::from_samples(self.channels, s, s, &samples))
    }

    /// Local stream: per-image logits (`B × K`) and attention weights (`B × n`).
    pub fn local_forward(&self, rois: &[RoiSet]) -> Result<(Vec<f32>, Vec<f32>)> {
        if rois.is_empty() {
            return Err(Error::Shape("local stream needs at least one ROI set".into()));
        }
        let x = self.roi_batch(rois)?;
        let fm = self.local.infer(&x);
        let h = global_avg_pool(&fm);
        let (fused, weights) = self.attention.infer(&h, rois.len(), self.cfg.roi_count);
        Ok((self.local_head.infer(&fused, rois.len()), weights))
    }

    /// Full inference on normalized images.
    pub fn infer(&self, images: &[&Image]) -> Result<DcgOutput> {
        let (saliency, global_logits) = self.global_forward(images)?;
        let rois = saliency
            .iter()
            .zip(images)
            .map(|(s, im)| self.select(s, im))
            .collect::<Result<Vec<_>>>()?;
        let (local_logits, attention) = self.local_forward(&rois)?;
        Ok(DcgOutput {
            global_logits,
            local_logits,
            saliency,
            rois,
            attention,
        })
    }

    /// Priors for raw `[0, 1]` images.
    pub fn priors(&self, images: &[&Image]) -> Result<Vec<PriorPair>> {
        let norm: Vec<Image> = images.iter().map(|im| im.normalized()).collect();
        let refs: Vec<&Image> = norm.iter().collect();
        Ok(self.infer(&refs)?.priors(self.classes))
    }

    /// Training forward on normalized images; caches for [`Dcg::backward`].
    pub fn forward(&mut self, images: &[&Image]) -> Result<DcgOutput> {
        self.check_images(images)?;
        let x = batch_map(images);
        let feats = self.global.forward(&x);
        let sal = self.saliency_head.forward(&feats);
        let saliency = self.split_saliency(&sal);
        let global_logits: Vec<f32> = saliency.iter().flat_map(|m| m.channel_means()).collect();
        let rois = saliency
            .iter()
            .zip(images)
            .map(|(s, im)| self.select(s, im))
            .collect::<Result<Vec<_>>>()?;
        let rx = self.roi_batch(&rois)?;
        let lf = self.local.forward(&rx);
        let h = global_avg_pool(&lf);
        let fused = self.attention.forward(&h, images.len(), self.cfg.roi_count);
        let attention = self.attention.cache.as_ref().map(|c| c.weights.clone()).unwrap_or_default();
        let local_logits = self.local_head.forward(&fused, images.len());
        self.cache = Some(DcgCache {
            batch: images.len(),
            sal_shape: (sal.height, sal.width),
            local_shape: (lf.channels, lf.height, lf.width),
        });
        Ok(DcgOutput {
            global_logits,
            local_logits,
            saliency,
            rois,
            attention,
        })
    }

    /// Backpropagates logit gradients (`B × K` each) into both streams.
    pub fn backward(&mut self, d_global: &[f32], d_local: &[f32]) {
        let c = self.cache.take().expect("dcg backward without forward");
        let (sh, sw) = c.sal_shape;
        let dsal = global_avg_pool_backward(d_global, self.classes, c.batch, sh, sw);
        let dfeat = self.saliency_head.backward(&dsal, true).expect("input grad requested");
        self.global.backward(dfeat);

        let dfused = self.local_head.backward(d_local, c.batch);
        let dh = self.attention.backward(&dfused);
        let (lc, lh, lw) = c.local_shape;
        let dlf = global_avg_pool_backward(&dh, lc, c.batch * self.cfg.roi_count, lh, lw);
        self.local.backward(dlf);
    }
}

impl Module for Dcg {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.global.visit(&join(prefix, "global"), f);
        self.saliency_head.visit(&join(prefix, "saliency_head"), f);
        self.local.visit(&join(prefix, "local"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.local_head.visit(&join(prefix, "local_head"), f);
    }
}

pub(crate) fn batch_map(images: &[&Image]) -> FeatureMap {
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let samples: Vec<&[f32]> = images.iter().map(|im| im.data.as_slice()).collect();
    FeatureMap::from_samples(c, h, w, &samples)
}
