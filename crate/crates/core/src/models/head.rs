use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, prefixed, relu, relu_backward, Linear, Param, Parameterized};
use crate::rng::RngStream;

pub const HEAD_HIDDEN: usize = 256;
pub const HEAD_DROPOUT: f64 = 0.3;

/// Scalar regressor `h → Linear(256) → ReLU → Dropout → Linear(1)`.
///
/// Inputs are standardized with a fixed per-feature shift/scale and outputs
/// de-standardized with a fixed target mean/std; both default to identity and
/// are not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub fc1: Linear<f64>,
    pub fc2: Linear<f64>,
    pub dropout: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
}

impl RegressionHead {
    pub fn new(input_dim: usize, rng: &mut RngStream) -> Self {
        Self::with_hidden(input_dim, HEAD_HIDDEN, HEAD_DROPOUT, rng)
    }

    pub fn with_hidden(input_dim: usize, hidden: usize, dropout: f64, rng: &mut RngStream) -> Self {
        Self {
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
            fc1: Linear::fan_in_uniform(input_dim, hidden, rng),
            fc2: Linear::fan_in_uniform(hidden, 1, rng),
            dropout,
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    /// Fits the fixed input standardization to `features` (population std,
    /// with near-constant features left unscaled).
    pub fn fit_input_scaler(&mut self, features: &ArrayView2<'_, f64>) {
        let mean = features.mean_axis(Axis(0)).expect("non-empty features");
        let std = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        self.input_mean = mean;
        self.input_std = std;
    }

    pub fn fit_target_scaler(&mut self, targets: &[f64]) {
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        self.target_mean = mean;
        self.target_std = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    fn standardize(&self, h: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.input_dim() {
            return Err(Error::shape(format!("regression head expects width {}, got {}", self.input_dim(), h.ncols())));
        }
        let mut x = h.to_owned();
        x -= &self.input_mean;
        x /= &self.input_std;
        Ok(x)
    }

    /// Standardized-space outputs; dropout is active only when `dropout_rng` is given.
    pub fn forward_cached(&self, h: &ArrayView2<'_, f64>, dropout_rng: Option<&mut RngStream>) -> Result<(Array1<f64>, HeadCache)> {
        let input = self.standardize(h)?;
        let hidden = self.fc1.forward(&input.view());
        let activated = relu(&hidden);
        let mask = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => Some(dropout_mask(activated.nrows(), activated.ncols(), self.dropout, rng)),
            _ => None,
        };
        let dropped = match &mask {
            Some(m) => &activated * m,
            None => activated,
        };
        let out = self.fc2.forward(&dropped.view()).index_axis_move(Axis(1), 0);
        Ok((out, HeadCache { input, hidden, mask, dropped }))
    }

    /// Accumulates gradients for `dL/d(standardized output)`; returns `dL/dh`.
    pub fn backward(&mut self, cache: &HeadCache, dout: &Array1<f64>) -> Array2<f64> {
        let dout = dout.view().insert_axis(Axis(1)).to_owned();
        let mut ddropped = self.fc2.backward(&cache.dropped.view(), &dout, true).expect("requested dx");
        if let Some(m) = &cache.mask {
            ddropped *= m;
        }
        let dhidden = relu_backward(&cache.hidden, &ddropped);
        let mut dx = self.fc1.backward(&cache.input.view(), &dhidden, true).expect("requested dx");
        dx /= &self.input_std;
        dx
    }

    /// Evaluation-mode predictions in label units.
    pub fn predict(&self, h: &ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let (out, _) = self.forward_cached(h, None)?;
        Ok(out.mapv(|v| v * self.target_std + self.target_mean))
    }
}

impl Parameterized<f64> for RegressionHead {
    fn params(&self) -> Vec<(String, &Param<f64>)> {
        prefixed("fc1", self.fc1.params()).chain(prefixed("fc2", self.fc2.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<f64>)> {
        prefixed("fc1", self.fc1.params_mut()).chain(prefixed("fc2", self.fc2.params_mut())).collect()
    }
}

/// Evaluation-mode regression of a batch of representations.
pub fn regress(head: &RegressionHead, h: &ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    head.predict(h)
}
