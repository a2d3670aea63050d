//! Minimal dense-layer toolkit with hand-written backward passes.
//!
//! Every layer is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference checks). Forward passes return an explicit cache that
//! the matching backward pass consumes, so several forward passes can be in
//! flight before gradients are accumulated.

mod adam;
mod attention;
mod layers;
mod transformer;

pub use adam::{Adam, AdamState};
pub use attention::{AttentionCache, MultiHeadAttention};
pub use layers::{dropout_mask, gelu, gelu_backward, relu, relu_backward, LayerNorm, LayerNormCache, Linear};
pub use transformer::{Block, BlockCache};

use std::fmt::{Debug, Display};

use ndarray::{Array2, NdFloat};
use num_traits::FromPrimitive;
use rand_distr::{Distribution, Normal, Uniform};

use crate::rng::RngStream;

/// Element type of every layer.
pub trait Scalar: NdFloat + FromPrimitive + Debug + Display + Default + 'static {
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every float type")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A trainable 2-D tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Array2<F>,
    pub grad: Array2<F>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Array2<F>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad, trainable: true }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        Self::new(Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng))))
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Self {
        if bound == 0.0 {
            return Self::zeros(rows, cols);
        }
        let dist = Uniform::new(-bound, bound).expect("bound is positive");
        Self::new(Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng))))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// `grad += delta` when trainable; frozen parameters never accumulate.
    pub fn accumulate(&mut self, delta: &Array2<F>) {
        if self.trainable {
            self.grad += delta;
        }
    }
}

/// Anything that owns named parameters in a fixed order.
pub trait Parameterized<F: Scalar> {
    fn params(&self) -> Vec<(String, &Param<F>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, p) in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Order-sensitive checksum of all parameter values (FNV-1a over the
    /// little-endian bytes), used to prove that a frozen model did not move.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in self.params() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.iter() {
                for b in v.to_f64_lossy().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn grad_norm(&self) -> f64 {
        self.params().iter().flat_map(|(_, p)| p.grad.iter()).map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences over `f64` parameters.

    use super::*;

    /// Worst relative error between `analytic` and central differences of
    /// `loss` over the parameter entries visited by `probe`.
    ///
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
    /// near-zero gradients from turning rounding noise into huge ratios.
    pub fn max_rel_error<M, L>(model: &mut M, mut loss: L, analytic: &[Array2<f64>], step: f64, floor: f64) -> f64
    where
        M: Parameterized<f64>,
        L: FnMut(&M) -> f64,
    {
        let n_params = model.params().len();
        let mut worst: f64 = 0.0;
        for pi in 0..n_params {
            let len = model.params()[pi].1.len();
            // probe a bounded subset of entries of large tensors
            let stride = (len / 24).max(1);
            for flat in (0..len).step_by(stride) {
                let orig = {
                    let mut ps = model.params_mut();
                    let v = ps[pi].1.value.as_slice_mut().expect("params are contiguous");
                    let o = v[flat];
                    v[flat] = o + step;
                    o
                };
                let plus = loss(model);
                model.params_mut()[pi].1.value.as_slice_mut().unwrap()[flat] = orig - step;
                let minus = loss(model);
                model.params_mut()[pi].1.value.as_slice_mut().unwrap()[flat] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[pi].as_slice().unwrap()[flat];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
        worst
    }
}
