use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::{prefixed, Linear, Param, Parameterized, Scalar};
use crate::rng::RngStream;

/// Multi-head scaled dot-product self-attention over one token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<F> {
    pub qkv: Linear<F>,
    pub out: Linear<F>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    input: Array2<F>,
    qkv: Array2<F>,
    /// Softmax weights per head, `tokens × tokens`.
    probs: Vec<Array2<F>>,
    merged: Array2<F>,
}

fn softmax_rows<F: Scalar>(scores: &mut Array2<F>) {
    for mut row in scores.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(dim: usize, heads: usize, rng: &mut RngStream) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} must split evenly into {heads} heads");
        Self { qkv: Linear::xavier(dim, 3 * dim, rng), out: Linear::xavier(dim, dim, rng), heads }
    }

    fn head_dim(&self) -> usize {
        self.out.input_dim() / self.heads
    }

    fn attend(&self, qkv: &Array2<F>, mut keep: Option<&mut Vec<Array2<F>>>) -> Array2<F> {
        let dim = self.out.input_dim();
        let dh = self.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores.mapv_inplace(|x| x * scale);
            softmax_rows(&mut scores);
            outputs.push(scores.dot(&v));
            if let Some(store) = keep.as_deref_mut() {
                store.push(scores);
            }
        }
        let views: Vec<ArrayView2<'_, F>> = outputs.iter().map(|o| o.view()).collect();
        concatenate(Axis(1), &views).expect("head outputs share a row count")
    }

    pub fn forward(&self, x: &ArrayView2<'_, F>) -> Array2<F> {
        let qkv = self.qkv.forward(x);
        let merged = self.attend(&qkv, None);
        self.out.forward(&merged.view())
    }

    pub fn forward_cached(&self, x: &ArrayView2<'_, F>) -> (Array2<F>, AttentionCache<F>) {
        let qkv = self.qkv.forward(x);
        let mut probs = Vec::with_capacity(self.heads);
        let merged = self.attend(&qkv, Some(&mut probs));
        let y = self.out.forward(&merged.view());
        (y, AttentionCache { input: x.to_owned(), qkv, probs, merged })
    }

    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dim = self.out.input_dim();
        let dh = self.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let dmerged = self.out.backward(&cache.merged.view(), dy, true).expect("requested dx");

        let mut dqkv = Array2::<F>::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
            let p = &cache.probs[h];
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);

            let dv = p.t().dot(&dout);
            let dp = dout.dot(&v.t());
            // softmax backward, folded with the 1/sqrt(dh) scale
            let mut ds = Array2::<F>::zeros(p.raw_dim());
            for r in 0..p.nrows() {
                let (prow, dprow) = (p.row(r), dp.row(r));
                let dot = prow.dot(&dprow);
                Zip::from(ds.row_mut(r)).and(prow).and(dprow).for_each(|o, &pi, &gi| *o = pi * (gi - dot) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., dim + h * dh..dim + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(&cache.input.view(), &dqkv, true).expect("requested dx")
    }
}

impl<F: Scalar> Parameterized<F> for MultiHeadAttention<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        prefixed("qkv", self.qkv.params()).chain(prefixed("out", self.out.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        prefixed("qkv", self.qkv.params_mut()).chain(prefixed("out", self.out.params_mut())).collect()
    }
}
