use super::{join, Buffer, FeatureMap, Module, Param, Slot};

/// Batch normalization over the rows of a `rows × features` batch.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates (momentum 0.1, unbiased variance); eval mode uses the running
/// estimates only, which makes each row independent of the rest of the batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    features: usize,
    momentum: f32,
    eps: f32,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    cached_train: bool,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::from_vec(&[features], vec![1.0; features]),
            beta: Param::zeros(&[features]),
            running_mean: Buffer::filled(&[features], 0.0),
            running_var: Buffer::filled(&[features], 1.0),
            features,
            momentum: 0.1,
            eps: 1e-5,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            cached_train: false,
        }
    }

    pub fn infer(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let f = self.features;
        assert_eq!(x.len(), rows * f, "batchnorm input shape");
        let mut y = vec![0.0; x.len()];
        for j in 0..f {
            let inv = 1.0 / (self.running_var.value[j] + self.eps).sqrt();
            let (g, b, m) = (self.gamma.value[j], self.beta.value[j], self.running_mean.value[j]);
            for r in 0..rows {
                y[r * f + j] = g * (x[r * f + j] - m) * inv + b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &[f32], rows: usize, train: bool) -> Vec<f32> {
        let f = self.features;
        assert_eq!(x.len(), rows * f, "batchnorm input shape");
        self.cached_train = train;
        self.xhat.resize(x.len(), 0.0);
        self.inv_std.resize(f, 0.0);
        let mut y = vec![0.0; x.len()];
        for j in 0..f {
            let (mean, inv) = if train {
                let mean = (0..rows).map(|r| x[r * f + j] as f64).sum::<f64>() / rows as f64;
                let ss = (0..rows)
                    .map(|r| (x[r * f + j] as f64 - mean).powi(2))
                    .sum::<f64>();
                let var = ss / rows as f64;
                let m = self.momentum;
                self.running_mean.value[j] = (1.0 - m) * self.running_mean.value[j] + m * mean as f32;
                if rows > 1 {
                    let unbiased = (ss / (rows - 1) as f64) as f32;
                    self.running_var.value[j] = (1.0 - m) * self.running_var.value[j] + m * unbiased;
                }
                (mean as f32, 1.0 / ((var as f32) + self.eps).sqrt())
            } else {
                (
                    self.running_mean.value[j],
                    1.0 / (self.running_var.value[j] + self.eps).sqrt(),
                )
            };
            self.inv_std[j] = inv;
            let (g, b) = (self.gamma.value[j], self.beta.value[j]);
            for r in 0..rows {
                let xh = (x[r * f + j] - mean) * inv;
                self.xhat[r * f + j] = xh;
                y[r * f + j] = g * xh + b;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &[f32], rows: usize) -> Vec<f32> {
        let f = self.features;
        assert_eq!(dy.len(), rows * f, "batchnorm grad shape");
        assert_eq!(self.xhat.len(), rows * f, "batchnorm backward without forward");
        let mut dx = vec![0.0; dy.len()];
        let n = rows as f32;
        for j in 0..f {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xh = 0.0f32;
            for r in 0..rows {
                let d = dy[r * f + j];
                sum_dy += d;
                sum_dy_xh += d * self.xhat[r * f + j];
            }
            self.beta.grad[j] += sum_dy;
            self.gamma.grad[j] += sum_dy_xh;
            let scale = self.gamma.value[j] * self.inv_std[j];
            for r in 0..rows {
                let i = r * f + j;
                dx[i] = if self.cached_train {
                    scale * (dy[i] - sum_dy / n - self.xhat[i] * sum_dy_xh / n)
                } else {
                    scale * dy[i]
                };
            }
        }
        dx
    }
}

impl Module for BatchNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

/// Per-channel batch normalization of a `C × N × H × W` map.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    inner: BatchNorm,
}

fn to_rows(x: &FeatureMap) -> Vec<f32> {
    let n = x.batch * x.height * x.width;
    let mut out = vec![0.0; x.data.len()];
    for c in 0..x.channels {
        for (i, v) in x.data[c * n..(c + 1) * n].iter().enumerate() {
            out[i * x.channels + c] = *v;
        }
    }
    out
}

fn from_rows(rows: &[f32], like: &FeatureMap) -> FeatureMap {
    let n = like.batch * like.height * like.width;
    let mut out = FeatureMap::zeros(like.channels, like.batch, like.height, like.width);
    for c in 0..like.channels {
        for (i, v) in out.data[c * n..(c + 1) * n].iter_mut().enumerate() {
            *v = rows[i * like.channels + c];
        }
    }
    out
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            inner: BatchNorm::new(channels),
        }
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        let rows = x.batch * x.height * x.width;
        from_rows(&self.inner.infer(&to_rows(x), rows), x)
    }

    /// Training-mode forward with batch statistics.
    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let rows = x.batch * x.height * x.width;
        from_rows(&self.inner.forward(&to_rows(x), rows, true), x)
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> FeatureMap {
        let rows = dy.batch * dy.height * dy.width;
        from_rows(&self.inner.backward(&to_rows(dy), rows), dy)
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.inner.visit(prefix, f);
    }
}
