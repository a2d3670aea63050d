//! Projection head and the NT-Xent objective.
//!
//! For anchor `i` with positive `π(i)` among `2N` unit vectors:
//!
//! ```text
//! L_i = -log( exp(z_i·z_π(i) / τ) / Σ_{k≠i} exp(z_i·z_k / τ) )
//! ```
//!
//! Only `k = i` is excluded from the denominator, so the positive appears in
//! it. The batch loss is the mean over all `2N` anchors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{prefixed, relu, relu_backward, Linear, Param, Parameterized};
use crate::rng::RngStream;

pub const PROJECTION_DIM: usize = 128;
const UNIT_TOLERANCE: f64 = 1e-6;

pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateInput(format!("cannot normalize a vector of norm {norm}")));
    }
    Ok(v.mapv(|x| x / norm))
}

/// Cosine similarity of two unit vectors.
pub fn similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// The usual two-view layout: rows `0..N` are first views, `N..2N` second views.
pub fn standard_pairing(n_clips: usize) -> Vec<usize> {
    (0..2 * n_clips).map(|i| (i + n_clips) % (2 * n_clips)).collect()
}

/// Validated input to [`ntxent_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Array2<f64>,
    pairing: Vec<usize>,
    temperature: f64,
}

impl EmbeddingBatch {
    pub fn new(z: Array2<f64>, pairing: Vec<usize>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidTemperature(temperature));
        }
        let rows = z.nrows();
        if rows < 2 || !rows.is_multiple_of(2) {
            return Err(Error::shape(format!("need 2N >= 2 embeddings, got {rows}")));
        }
        if pairing.len() != rows {
            return Err(Error::InvalidPairing(format!("pairing has {} entries for {rows} rows", pairing.len())));
        }
        for (i, &j) in pairing.iter().enumerate() {
            if j >= rows || j == i || pairing[j] != i {
                return Err(Error::InvalidPairing(format!("pairing is not a fixed-point-free involution at {i} -> {j}")));
            }
        }
        for (i, row) in z.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::input(format!("row {i} has norm {norm}, expected unit length")));
            }
        }
        Ok(Self { z, pairing, temperature })
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn n_clips(&self) -> usize {
        self.z.nrows() / 2
    }
}

/// Mean NT-Xent loss over all anchors and its gradient with respect to `Z`.
pub fn ntxent_loss(batch: &EmbeddingBatch) -> (f64, Array2<f64>) {
    let z = &batch.z;
    let tau = batch.temperature;
    let rows = z.nrows();
    let logits = z.dot(&z.t()) / tau;

    // weights[i][k] = softmax_{k≠i}(logits[i]) - [k = π(i)], zero on the diagonal
    let mut weights = Array2::<f64>::zeros((rows, rows));
    let mut total = 0.0;
    for i in 0..rows {
        let row = logits.row(i);
        let max = row.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..rows).filter(|&k| k != i) {
            let e = (row[k] - max).exp();
            weights[[i, k]] = e;
            denom += e;
        }
        let pos = batch.pairing[i];
        total += max + denom.ln() - row[pos];
        weights.row_mut(i).mapv_inplace(|e| e / denom);
        weights[[i, pos]] -= 1.0;
    }
    let loss = total / rows as f64;
    let sym = &weights + &weights.t();
    let grad = sym.dot(z) / (tau * rows as f64);
    (loss.max(0.0), grad)
}

/// Row-normalizes `raw`, evaluates NT-Xent, and pulls the gradient back
/// through the normalization.
pub fn ntxent_from_raw(raw: ArrayView2<'_, f64>, pairing: &[usize], temperature: f64) -> Result<(f64, Array2<f64>)> {
    let norms: Array1<f64> = raw.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::DegenerateInput(format!("embedding {i} has norm {}", norms[i])));
    }
    let z = &raw / &norms.view().insert_axis(Axis(1));
    let batch = EmbeddingBatch::new(z, pairing.to_vec(), temperature)?;
    let (loss, dz) = ntxent_loss(&batch);
    let mut draw = Array2::zeros(raw.raw_dim());
    for (i, mut out) in draw.outer_iter_mut().enumerate() {
        let zi = batch.z.row(i);
        let gi = dz.row(i);
        let radial = zi.dot(&gi);
        out.assign(&((&gi - &(&zi * radial)) / norms[i]));
    }
    Ok((loss, draw))
}

/// Two-layer MLP `h → relu(h·W1 + b1)·W2 + b2`, widths `d → d → 128`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub fc1: Linear<f64>,
    pub fc2: Linear<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    activated: Array2<f64>,
}

impl ProjectionHead {
    pub fn new(input_dim: usize, rng: &mut RngStream) -> Self {
        Self::with_widths(input_dim, input_dim, PROJECTION_DIM, rng)
    }

    pub fn with_widths(input: usize, hidden: usize, output: usize, rng: &mut RngStream) -> Self {
        Self { fc1: Linear::fan_in_uniform(input, hidden, rng), fc2: Linear::fan_in_uniform(hidden, output, rng) }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn forward(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(h)?.0)
    }

    pub fn forward_cached(&self, h: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ProjectionCache)> {
        self.fc1.check_input(&h)?;
        let hidden = self.fc1.forward(&h);
        let activated = relu(&hidden);
        let z = self.fc2.forward(&activated.view());
        Ok((z, ProjectionCache { input: h.to_owned(), hidden, activated }))
    }

    /// Accumulates head gradients; returns `dL/dh`.
    pub fn backward(&mut self, cache: &ProjectionCache, dz: &Array2<f64>) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.activated.view(), dz, true).expect("requested dx");
        let dhidden = relu_backward(&cache.hidden, &dact);
        self.fc1.backward(&cache.input.view(), &dhidden, true).expect("requested dx")
    }
}

/// Projects a single representation.
pub fn project(head: &ProjectionHead, h: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let z = head.forward(h.insert_axis(Axis(0)))?;
    Ok(z.index_axis_move(Axis(0), 0))
}

impl Parameterized<f64> for ProjectionHead {
    fn params(&self) -> Vec<(String, &Param<f64>)> {
        prefixed("fc1", self.fc1.params()).chain(prefixed("fc2", self.fc2.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<f64>)> {
        prefixed("fc1", self.fc1.params_mut()).chain(prefixed("fc2", self.fc2.params_mut())).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Literal double loop over anchors and denominator terms, no
    /// stabilization, no matrix algebra.
    #[allow(clippy::needless_range_loop)]
    pub fn brute_force_ntxent(z: &Array2<f64>, pairing: &[usize], tau: f64) -> f64 {
        let rows = z.nrows();
        let sim = |a: usize, b: usize| (0..z.ncols()).map(|c| z[[a, c]] * z[[b, c]]).sum::<f64>();
        let mut total = 0.0;
        for i in 0..rows {
            let num = (sim(i, pairing[i]) / tau).exp();
            let mut den = 0.0;
            for k in 0..rows {
                if k != i {
                    den += (sim(i, k) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / rows as f64
    }

    pub fn random_unit_rows(rows: usize, dim: usize, rng: &mut RngStream) -> Array2<f64> {
        let mut z = Array2::from_shape_simple_fn((rows, dim), || rng.uniform(-1.0, 1.0));
        for mut r in z.outer_iter_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        z
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(ndarray::arr1(&[3.0, 4.0]).view()).unwrap();
        assert_relative_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.8, epsilon = 1e-15);
        let again = l2_normalize(v.view()).unwrap();
        assert_relative_eq!(again[0], 0.6, epsilon = 1e-15);
        assert!(matches!(l2_normalize(ndarray::arr1(&[0.0, 0.0]).view()), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn similarity_examples() {
        let a = ndarray::arr1(&[0.6, 0.8]);
        let b = ndarray::arr1(&[-0.8, 0.6]);
        assert_relative_eq!(similarity(a.view(), a.view()), 1.0, epsilon = 1e-15);
        assert_relative_eq!(similarity(a.view(), b.view()), 0.0, epsilon = 1e-15);
        assert_relative_eq!(similarity(a.view(), (-&a).view()), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let mut rng = RngStream::new(1, "z");
        let z = random_unit_rows(2, 16, &mut rng);
        let batch = EmbeddingBatch::new(z, standard_pairing(1), 0.5).unwrap();
        let (loss, grad) = ntxent_loss(&batch);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_rows_give_log_2n_minus_1() {
        let row = l2_normalize(ndarray::arr1(&[1.0, 2.0, -0.5]).view()).unwrap();
        let z = Array2::from_shape_fn((4, 3), |(_, c)| row[c]);
        for tau in [0.07, 0.5, 1.0] {
            let batch = EmbeddingBatch::new(z.clone(), standard_pairing(2), tau).unwrap();
            assert_relative_eq!(ntxent_loss(&batch).0, 3f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_on_random_batch() {
        let mut rng = RngStream::new(2, "z");
        let z = random_unit_rows(4, 8, &mut rng);
        let pairing = standard_pairing(2);
        let batch = EmbeddingBatch::new(z.clone(), pairing.clone(), 0.5).unwrap();
        assert_relative_eq!(ntxent_loss(&batch).0, brute_force_ntxent(&z, &pairing, 0.5), max_relative = 1e-12);
    }

    #[test]
    fn validation_errors() {
        let mut rng = RngStream::new(3, "z");
        let z = random_unit_rows(4, 4, &mut rng);
        assert!(matches!(EmbeddingBatch::new(z.clone(), standard_pairing(2), 0.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(EmbeddingBatch::new(z.clone(), vec![1, 0, 3, 2], -1.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(EmbeddingBatch::new(z.clone(), vec![0, 1, 2, 3], 0.5), Err(Error::InvalidPairing(_))));
        assert!(matches!(EmbeddingBatch::new(z.clone(), vec![1, 2, 3, 0], 0.5), Err(Error::InvalidPairing(_))));
        assert!(EmbeddingBatch::new(z.clone(), vec![3, 2, 1, 0], 0.5).is_ok());
        assert!(EmbeddingBatch::new(&z * 2.0, standard_pairing(2), 0.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_through_normalization() {
        let mut rng = RngStream::new(4, "raw");
        let raw = Array2::from_shape_simple_fn((6, 5), || rng.uniform(-1.0, 1.0));
        let pairing = standard_pairing(3);
        let (_, grad) = ntxent_from_raw(raw.view(), &pairing, 0.5).unwrap();
        let h = 1e-4;
        for ((i, j), g) in grad.indexed_iter() {
            let mut p = raw.clone();
            p[[i, j]] += h;
            let mut m = raw.clone();
            m[[i, j]] -= h;
            let num =
                (ntxent_from_raw(p.view(), &pairing, 0.5).unwrap().0 - ntxent_from_raw(m.view(), &pairing, 0.5).unwrap().0) / (2.0 * h);
            let rel = (num - g).abs() / num.abs().max(g.abs()).max(1e-6);
            assert!(rel < 1e-4, "({i},{j}) numeric {num} analytic {g}");
        }
    }

    #[test]
    fn zero_projection_gives_zero() {
        let head = ProjectionHead { fc1: Linear::zeros(8, 8), fc2: Linear::zeros(8, 128) };
        let z = project(&head, Array1::from_elem(8, 3.0).view()).unwrap();
        assert_eq!(z.len(), 128);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_is_relu() {
        let mut head = ProjectionHead { fc1: Linear::zeros(128, 128), fc2: Linear::zeros(128, 128) };
        head.fc1.weight.value = Array2::eye(128);
        head.fc2.weight.value = Array2::eye(128);
        let h = Array1::from_shape_fn(128, |i| i as f64 - 64.0);
        let z = project(&head, h.view()).unwrap();
        for (zi, hi) in z.iter().zip(h.iter()) {
            assert_eq!(*zi, hi.max(0.0));
        }
    }

    #[test]
    fn projection_width_mismatch() {
        let mut rng = RngStream::new(5, "proj");
        let head = ProjectionHead::new(16, &mut rng);
        assert!(matches!(project(&head, Array1::zeros(8).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_head_gradients() {
        let mut rng = RngStream::new(6, "proj");
        let mut head = ProjectionHead::with_widths(6, 6, 4, &mut rng);
        let h = Array2::from_shape_simple_fn((3, 6), || rng.uniform(-1.0, 1.0));
        let w = Array2::from_shape_simple_fn((3, 4), || rng.uniform(-1.0, 1.0));
        let (_, cache) = head.forward_cached(h.view()).unwrap();
        head.zero_grad();
        head.backward(&cache, &w);
        let grads: Vec<_> = head.params().iter().map(|(_, p)| p.grad.clone()).collect();
        let loss = |m: &ProjectionHead| (m.forward(h.view()).unwrap() * &w).sum();
        assert!(max_rel_error(&mut head, loss, &grads, 1e-4, 1e-6) < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn normalize_is_scale_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..32), c in 0.01f64..100.0) {
            let v = Array1::from(v);
            prop_assume!(v.dot(&v) > 1e-6);
            let a = l2_normalize(v.view()).unwrap();
            let b = l2_normalize((&v * c).view()).unwrap();
            prop_assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-7);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = RngStream::new(seed, "perm");
            let z = random_unit_rows(2 * n, 8, &mut rng);
            let pairing = standard_pairing(n);
            let base = ntxent_loss(&EmbeddingBatch::new(z.clone(), pairing.clone(), 0.5).unwrap()).0;

            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..2 * n).collect();
            perm.shuffle(&mut rng);
            // new row r holds old row perm[r]
            let mut inv = vec![0; 2 * n];
            for (r, &old) in perm.iter().enumerate() {
                inv[old] = r;
            }
            let zp = z.select(Axis(0), &perm);
            let pp: Vec<usize> = perm.iter().map(|&old| inv[pairing[old]]).collect();
            let permuted = ntxent_loss(&EmbeddingBatch::new(zp, pp, 0.5).unwrap()).0;
            prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
        }

        #[test]
        fn loss_ignores_raw_scale(seed in any::<u64>(), c in 0.1f64..50.0) {
            let mut rng = RngStream::new(seed, "scale");
            let raw = Array2::from_shape_simple_fn((6, 8), || rng.uniform(-1.0, 1.0));
            let pairing = standard_pairing(3);
            let a = ntxent_from_raw(raw.view(), &pairing, 0.5).unwrap().0;
            let b = ntxent_from_raw((&raw * c).view(), &pairing, 0.5).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }
}
