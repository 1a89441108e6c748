//! Minimal CPU building blocks with explicit backward passes.
//!
//! Layers cache what their backward pass needs during `forward`, so a
//! forward/backward pair must not be interleaved with another forward on the
//! same layer. Gradients accumulate into [`Param::grad`] until cleared.

mod act;
mod conv;
mod gemm;
mod linear;
mod norm;

pub use act::{log_softmax_rows, relu_backward, relu_inplace, sigmoid, softmax_rows, softplus, softplus_grad};
pub use conv::{global_avg_pool, global_avg_pool_backward, Conv2d, ConvEncoder, FeatureMap};
pub use gemm::gemm;
pub use linear::Linear;
pub use norm::{BatchNorm, BatchNorm2d};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n])
    }

    pub fn from_vec(shape: &[usize], value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            shape: shape.to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = shape.iter().product();
        Self::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_vec(shape, v)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<f32>, v: Vec<f32>) {
        debug_assert_eq!(m.len(), self.value.len());
        debug_assert_eq!(v.len(), self.value.len());
        self.m = m;
        self.v = v;
    }
}

/// A non-trainable persistent tensor (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub value: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Buffer {
    pub fn filled(shape: &[usize], fill: f32) -> Self {
        Self {
            value: vec![fill; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }
}

pub enum Slot<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Buffer),
}

/// Anything that owns named parameters and buffers.
pub trait Module {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.len();
            }
        });
        n
    }

    fn param_names(&mut self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(prefix, &mut |name, slot| {
            if let Slot::Param(_) = slot {
                names.push(name);
            }
        });
        names
    }

    /// Sum of squared gradient entries; zero when nothing flowed back.
    fn grad_sq_norm(&mut self) -> f64 {
        let mut s = 0.0f64;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                s += p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>();
            }
        });
        s
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Adam with bias correction; one instance per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub steps: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }

    /// Applies one update to every parameter of `module` and clears its grads.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) {
        self.steps += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        module.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                for i in 0..p.value.len() {
                    let g = p.grad[i];
                    p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                    p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                    let mh = p.m[i] / bc1;
                    let vh = p.v[i] / bc2;
                    p.value[i] -= lr * mh / (vh.sqrt() + eps);
                    p.grad[i] = 0.0;
                }
            }
        });
    }
}
