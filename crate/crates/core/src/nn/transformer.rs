use ndarray::{Array2, ArrayView2};

use super::{gelu, gelu_backward, prefixed, AttentionCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention};
use super::{Param, Parameterized, Scalar};
use crate::rng::RngStream;

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub norm1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    norm1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    norm2: LayerNormCache<F>,
    mlp_in: Array2<F>,
    hidden: Array2<F>,
    activated: Array2<F>,
}

impl<F: Scalar> Block<F> {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, rng: &mut RngStream) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::xavier(dim, mlp_dim, rng),
            fc2: Linear::xavier(mlp_dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView2<'_, F>) -> Array2<F> {
        let (a, _) = self.norm1.forward(x);
        let x1 = &self.attn.forward(&a.view()) + x;
        let (b, _) = self.norm2.forward(&x1.view());
        let g = gelu(&self.fc1.forward(&b.view()));
        self.fc2.forward(&g.view()) + &x1
    }

    pub fn forward_cached(&self, x: &ArrayView2<'_, F>) -> (Array2<F>, BlockCache<F>) {
        let (a, norm1) = self.norm1.forward(x);
        let (attn_out, attn) = self.attn.forward_cached(&a.view());
        let x1 = attn_out + x;
        let (mlp_in, norm2) = self.norm2.forward(&x1.view());
        let hidden = self.fc1.forward(&mlp_in.view());
        let activated = gelu(&hidden);
        let y = self.fc2.forward(&activated.view()) + &x1;
        (y, BlockCache { norm1, attn, norm2, mlp_in, hidden, activated })
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dact = self.fc2.backward(&cache.activated.view(), dy, true).expect("requested dx");
        let dhidden = gelu_backward(&cache.hidden, &dact);
        let dmlp_in = self.fc1.backward(&cache.mlp_in.view(), &dhidden, true).expect("requested dx");
        let mut dx1 = self.norm2.backward(&cache.norm2, &dmlp_in);
        dx1 += dy;
        let da = self.attn.backward(&cache.attn, &dx1);
        let mut dx = self.norm1.backward(&cache.norm1, &da);
        dx += &dx1;
        dx
    }
}

impl<F: Scalar> Parameterized<F> for Block<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        prefixed("norm1", self.norm1.params())
            .chain(prefixed("attn", self.attn.params()))
            .chain(prefixed("norm2", self.norm2.params()))
            .chain(prefixed("fc1", self.fc1.params()))
            .chain(prefixed("fc2", self.fc2.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        prefixed("norm1", self.norm1.params_mut())
            .chain(prefixed("attn", self.attn.params_mut()))
            .chain(prefixed("norm2", self.norm2.params_mut()))
            .chain(prefixed("fc1", self.fc1.params_mut()))
            .chain(prefixed("fc2", self.fc2.params_mut()))
            .collect()
    }
}
