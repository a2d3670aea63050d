use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{Param, Parameterized, Scalar};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Affine map `y = x·W + b` on row-major batches, `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self { weight: Param::uniform(input, output, bound, rng), bias: Param::zeros(1, output) }
    }

    /// `U(-1/√in, 1/√in)` for weights and bias alike.
    pub fn fan_in_uniform(input: usize, output: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Param::uniform(input, output, bound, rng);
        let bias = Param::uniform(1, output, bound, rng);
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Param::zeros(input, output), bias: Param::zeros(1, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn check_input(&self, x: &ArrayView2<'_, F>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("linear layer expects width {}, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients from `dy` and returns `dL/dx` when asked.
    pub fn backward(&mut self, x: &ArrayView2<'_, F>, dy: &Array2<F>, want_dx: bool) -> Option<Array2<F>> {
        if self.weight.trainable {
            self.weight.grad += &x.t().dot(dy);
            self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        want_dx.then(|| dy.dot(&self.weight.value.t()))
    }
}

impl<F: Scalar> Parameterized<F> for Linear<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Param::filled(1, dim, F::one()), beta: Param::zeros(1, dim), eps: 1e-6 }
    }

    pub fn forward(&self, x: &ArrayView2<'_, F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::of(x.ncols() as f64);
        let eps = F::of(self.eps);
        let mean = x.sum_axis(Axis(1)) / d;
        let mut xhat = x.to_owned();
        xhat -= &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &Array2<F>) -> Array2<F> {
        if self.gamma.trainable {
            self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let d = F::of(dy.ncols() as f64);
        let dxhat = dy * &self.gamma.value;
        let sum_dxhat = dxhat.sum_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
        let mut dx = Array2::zeros(dy.raw_dim());
        for (r, mut row) in dx.outer_iter_mut().enumerate() {
            let (s1, s2, inv) = (sum_dxhat[r], sum_dxhat_xhat[r], cache.inv_std[r]);
            Zip::from(&mut row).and(dxhat.row(r)).and(cache.xhat.row(r)).for_each(|o, &g, &xh| {
                *o = inv / d * (d * g - s1 - xh * s2);
            });
        }
        dx
    }
}

impl<F: Scalar> Parameterized<F> for LayerNorm<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let (k, c, half) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5));
    x.mapv(|v| half * v * (F::one() + (k * (v + c * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Scalar>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let (k, c, half, three) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5), F::of(3.0));
    let mut dx = Array2::zeros(x.raw_dim());
    Zip::from(&mut dx).and(x).and(dy).for_each(|o, &v, &g| {
        let t = (k * (v + c * v * v * v)).tanh();
        let dt = (F::one() - t * t) * k * (F::one() + three * c * v * v);
        *o = g * (half * (F::one() + t) + half * v * dt);
    });
    dx
}

pub fn relu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask<F: Scalar>(rows: usize, cols: usize, p: f64, rng: &mut RngStream) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || if rng.unit() < p { F::zero() } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed, "x");
        Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-1.5, 1.5))
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = RngStream::new(1, "lin");
        let mut lin = Linear::<f64>::xavier(5, 3, &mut rng);
        let x = random(4, 5, 2);
        let w = random(4, 3, 3);
        let loss = |m: &Linear<f64>| (m.forward(&x.view()) * &w).sum();
        lin.zero_grad();
        lin.backward(&x.view(), &w, false);
        let grads: Vec<_> = lin.params().iter().map(|(_, p)| p.grad.clone()).collect();
        assert!(max_rel_error(&mut lin, loss, &grads, 1e-5, 1e-8) < 1e-6);
    }

    #[test]
    fn linear_input_gradient() {
        let mut rng = RngStream::new(4, "lin");
        let mut lin = Linear::<f64>::xavier(3, 2, &mut rng);
        let x = random(2, 3, 5);
        let w = random(2, 2, 6);
        let dx = lin.backward(&x.view(), &w, true).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = ((lin.forward(&xp.view()) * &w).sum() - (lin.forward(&xm.view()) * &w).sum()) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut ln = LayerNorm::<f64>::new(6);
        ln.gamma.value = random(1, 6, 7);
        ln.beta.value = random(1, 6, 8);
        let x = random(3, 6, 9);
        let w = random(3, 6, 10);
        let (_, cache) = ln.forward(&x.view());
        ln.zero_grad();
        let dx = ln.backward(&cache, &w);
        let grads: Vec<_> = ln.params().iter().map(|(_, p)| p.grad.clone()).collect();
        let loss = |m: &LayerNorm<f64>| (m.forward(&x.view()).0 * &w).sum();
        assert!(max_rel_error(&mut ln, loss, &grads, 1e-5, 1e-8) < 1e-6);

        let h = 1e-6;
        for i in 0..3 {
            for j in 0..6 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = ((ln.forward(&xp.view()).0 * &w).sum() - (ln.forward(&xm.view()).0 * &w).sum()) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-6, "{num} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::<f64>::new(8);
        let (y, _) = ln.forward(&random(5, 8, 11).view());
        for row in y.outer_iter() {
            let mean = row.sum() / 8.0;
            let var = row.mapv(|v| (v - mean).powi(2)).sum() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn activation_derivatives() {
        let x = random(4, 7, 12);
        let w = random(4, 7, 13);
        let h = 1e-6;
        for (f, df) in
            [(gelu::<f64> as fn(&Array2<f64>) -> Array2<f64>, gelu_backward::<f64> as fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>)]
        {
            let dx = df(&x, &w);
            for ((i, j), g) in dx.indexed_iter() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = ((f(&xp) * &w).sum() - (f(&xm) * &w).sum()) / (2.0 * h);
                assert!((num - g).abs() < 1e-7);
            }
        }
        let r = relu_backward(&x, &w);
        for ((i, j), g) in r.indexed_iter() {
            assert_eq!(*g, if x[[i, j]] > 0.0 { w[[i, j]] } else { 0.0 });
        }
    }

    #[test]
    fn frozen_linear_accumulates_nothing() {
        let mut rng = RngStream::new(2, "f");
        let mut lin = Linear::<f64>::xavier(3, 3, &mut rng);
        lin.set_trainable(false);
        lin.backward(&random(2, 3, 1).view(), &random(2, 3, 2), true);
        assert_eq!(lin.grad_norm(), 0.0);
    }

    #[test]
    fn dropout_mask_rate() {
        let mut rng = RngStream::new(3, "drop");
        let m: Array2<f64> = dropout_mask(100, 100, 0.3, &mut rng);
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 0.3).abs() < 0.02);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }
}
