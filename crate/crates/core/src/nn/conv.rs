use rand::Rng;

use super::{gemm, join, relu_backward, relu_inplace, BatchNorm2d, Module, Param, Slot};

/// Activations in channel-major `C × N × H × W` layout.
///
/// Keeping channels outermost lets a convolution be a single GEMM over the
/// whole batch with no transposes on either side.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    /// Packs per-sample `C × H × W` images into one batch.
    pub fn from_samples(channels: usize, height: usize, width: usize, samples: &[&[f32]]) -> Self {
        let hw = height * width;
        let n = samples.len();
        let mut fm = Self::zeros(channels, n, height, width);
        for (b, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), channels * hw, "sample shape");
            for c in 0..channels {
                let dst = (c * n + b) * hw;
                fm.data[dst..dst + hw].copy_from_slice(&s[c * hw..(c + 1) * hw]);
            }
        }
        fm
    }

    pub fn plane(&self, c: usize, b: usize) -> &[f32] {
        let hw = self.height * self.width;
        let o = (c * self.batch + b) * hw;
        &self.data[o..o + hw]
    }
}

/// Square-kernel 2-D convolution with zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    cols: Vec<f32>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::normal(&[out_ch, fan_in], (2.0 / fan_in as f32).sqrt(), rng),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            cols: Vec::new(),
            in_shape: (0, 0, 0),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap) -> Vec<f32> {
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = self.out_size(x.height, x.width);
        let p = x.batch * ho * wo;
        let mut cols = vec![0.0; self.in_ch * k * k * p];
        if k == 1 && s == 1 {
            cols.copy_from_slice(&x.data);
            return cols;
        }
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for b in 0..x.batch {
                        let src = x.plane(c, b);
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                            let dst = row + (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < x.width as isize {
                                    cols[dst + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32]) -> FeatureMap {
        let (batch, h, w) = self.in_shape;
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = self.out_size(h, w);
        let p = batch * ho * wo;
        let mut dx = FeatureMap::zeros(self.in_ch, batch, h, w);
        if k == 1 && s == 1 {
            dx.data.copy_from_slice(dcols);
            return dx;
        }
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for b in 0..batch {
                        let plane = (c * batch + b) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = row + (b * ho + oy) * wo;
                            let dst = plane + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx.data[dst + ix as usize] += dcols[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply(&self, cols: &[f32], batch: usize, ho: usize, wo: usize) -> FeatureMap {
        let p = batch * ho * wo;
        let mut out = FeatureMap::zeros(self.out_ch, batch, ho, wo);
        for (o, chunk) in out.data.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        let kk = self.in_ch * self.kernel * self.kernel;
        gemm(self.out_ch, kk, p, &self.weight.value, false, cols, false, 1.0, &mut out.data);
        out
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(x.height, x.width);
        let cols = self.im2col(x);
        self.apply(&cols, x.batch, ho, wo)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(x.height, x.width);
        self.cols = self.im2col(x);
        self.in_shape = (x.batch, x.height, x.width);
        self.apply(&self.cols, x.batch, ho, wo)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let (batch, h, w) = self.in_shape;
        let (ho, wo) = self.out_size(h, w);
        let p = batch * ho * wo;
        assert_eq!(dy.data.len(), self.out_ch * p, "conv grad shape");
        let kk = self.in_ch * self.kernel * self.kernel;
        gemm(self.out_ch, p, kk, &dy.data, false, &self.cols, true, 1.0, &mut self.weight.grad);
        for (o, chunk) in dy.data.chunks(p).enumerate() {
            self.bias.grad[o] += chunk.iter().sum::<f32>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, self.out_ch, p, &self.weight.value, true, &dy.data, false, 0.0, &mut dcols);
        Some(self.col2im(&dcols))
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

/// Stack of 3×3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    layers: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    outputs: Vec<FeatureMap>,
}

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, channels: &[usize], strides: &[usize], rng: &mut R) -> Self {
        assert_eq!(channels.len(), strides.len(), "one stride per block");
        let mut layers = Vec::with_capacity(channels.len());
        let mut c = in_ch;
        for (&out, &s) in channels.iter().zip(strides) {
            layers.push(Conv2d::new(c, out, 3, s, rng));
            c = out;
        }
        Self {
            norms: channels.iter().map(|&c| BatchNorm2d::new(c)).collect(),
            layers,
            outputs: Vec::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels()).unwrap_or(0)
    }

    pub fn out_size(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for l in &self.layers {
            (h, w) = l.out_size(h, w);
        }
        (h, w)
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        let mut cur = x.clone();
        for (l, n) in self.layers.iter().zip(&self.norms) {
            cur = n.infer(&l.infer(&cur));
            relu_inplace(&mut cur.data);
        }
        cur
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        self.outputs.clear();
        let mut cur = x.clone();
        for (l, n) in self.layers.iter_mut().zip(self.norms.iter_mut()) {
            cur = n.forward(&l.forward(&cur));
            relu_inplace(&mut cur.data);
            self.outputs.push(cur.clone());
        }
        cur
    }

    /// Backpropagates to the parameters; the image gradient is never needed.
    pub fn backward(&mut self, dy: FeatureMap) {
        let mut grad = dy;
        for i in (0..self.layers.len()).rev() {
            relu_backward(&self.outputs[i].data, &mut grad.data);
            grad = self.norms[i].backward(&grad);
            match self.layers[i].backward(&grad, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }
}

impl Module for ConvEncoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit(&join(prefix, &format!("bn{i}")), f);
        }
    }
}

/// `C × N × H × W` → row-major `N × C` spatial means.
pub fn global_avg_pool(x: &FeatureMap) -> Vec<f32> {
    let hw = (x.height * x.width) as f32;
    let mut out = vec![0.0; x.batch * x.channels];
    for c in 0..x.channels {
        for b in 0..x.batch {
            out[b * x.channels + c] = x.plane(c, b).iter().sum::<f32>() / hw;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &[f32], channels: usize, batch: usize, height: usize, width: usize) -> FeatureMap {
    let hw = height * width;
    let mut dx = FeatureMap::zeros(channels, batch, height, width);
    for c in 0..channels {
        for b in 0..batch {
            let g = dy[b * channels + c] / hw as f32;
            let o = (c * batch + b) * hw;
            dx.data[o..o + hw].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (k, s, pad) = (conv.kernel, conv.stride, conv.kernel as isize / 2);
        let (ho, wo) = conv.out_size(x.height, x.width);
        let mut out = FeatureMap::zeros(conv.out_ch, x.batch, ho, wo);
        for o in 0..conv.out_ch {
            for b in 0..x.batch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value[o];
                        for c in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - pad;
                                    let ix = (ox * s + kx) as isize - pad;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                        let wv = conv.weight.value[o * conv.in_ch * k * k + (c * k + ky) * k + kx];
                                        acc += wv * x.plane(c, b)[iy as usize * x.width + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data[((o * x.batch + b) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> FeatureMap {
        let mut fm = FeatureMap::zeros(c, n, h, w);
        for v in fm.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        fm
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::new(2, 3, k, s, &mut rng);
            let x = random_map(&mut rng, 2, 2, 7, 6);
            let got = conv.infer(&x);
            let want = direct_conv(&conv, &x);
            assert_eq!((got.height, got.width), (want.height, want.width));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 2, 3, 2, &mut rng);
        let x = random_map(&mut rng, 2, 2, 5, 5);
        let y = conv.forward(&x);
        // loss = sum(y * y) / 2 so dy = y
        let dx = conv.backward(&y, true).unwrap();
        let loss = |c: &Conv2d, x: &FeatureMap| -> f64 {
            c.infer(x).data.iter().map(|v| 0.5 * (*v as f64).powi(2)).sum()
        };
        let h = 1e-2;
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 2e-3, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for i in 0..conv.weight.len() {
            let g = conv.weight.grad[i] as f64;
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + h;
            let lp = loss(&conv, &x);
            conv.weight.value[i] = orig - h;
            let lm = loss(&conv, &x);
            conv.weight.value[i] = orig;
            assert!(((lp - lm) / (2.0 * h as f64) - g).abs() < 5e-3, "dw[{i}]");
        }
    }
}
