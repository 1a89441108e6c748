use rand::Rng;

use super::{gemm, join, Module, Param, Slot};

/// Fully-connected layer over row-major `rows × in_dim` batches.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
    input: Vec<f32>,
}

impl Linear {
    /// Uniform(±1/sqrt(in_dim)) init for weight and bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self {
            weight: Param::uniform(&[out_dim, in_dim], bound, rng),
            bias: Param::uniform(&[out_dim], bound, rng),
            in_dim,
            out_dim,
            input: Vec::new(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn infer(&self, x: &[f32], rows: usize) -> Vec<f32> {
        assert_eq!(x.len(), rows * self.in_dim, "linear input shape");
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(rows, self.in_dim, self.out_dim, x, false, &self.weight.value, true, 1.0, &mut y);
        y
    }

    pub fn forward(&mut self, x: &[f32], rows: usize) -> Vec<f32> {
        let y = self.infer(x, rows);
        self.input.clear();
        self.input.extend_from_slice(x);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &[f32], rows: usize) -> Vec<f32> {
        assert_eq!(dy.len(), rows * self.out_dim, "linear grad shape");
        assert_eq!(self.input.len(), rows * self.in_dim, "linear backward without forward");
        gemm(self.out_dim, rows, self.in_dim, dy, true, &self.input, false, 1.0, &mut self.weight.grad);
        for row in dy.chunks(self.out_dim) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * self.in_dim];
        gemm(rows, self.out_dim, self.in_dim, dy, false, &self.weight.value, false, 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).sin()).collect();
        // loss = sum(y^2) / 2
        let y = lin.forward(&x, 2);
        let dx = lin.backward(&y, 2);
        let loss = |l: &Linear, x: &[f32]| -> f64 {
            l.infer(x, 2).iter().map(|v| 0.5 * (*v as f64).powi(2)).sum()
        };
        let h = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3, "dx[{i}]");
        }
        for i in 0..lin.weight.len() {
            let g = lin.weight.grad[i] as f64;
            let orig = lin.weight.value[i];
            lin.weight.value[i] = orig + h;
            let lp = loss(&lin, &x);
            lin.weight.value[i] = orig - h;
            let lm = loss(&lin, &x);
            lin.weight.value[i] = orig;
            assert!(((lp - lm) / (2.0 * h as f64) - g).abs() < 1e-3, "dw[{i}]");
        }
    }
}
