use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::nn::{prefixed, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Param, Parameterized, Scalar};
use crate::rng::RngStream;
use crate::{CLIP_FRAMES, CLIP_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Full,
    Tiny,
}

/// Shape of the tubelet transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Frames per tubelet.
    pub tubelet_frames: usize,
    /// Tubelet side in pixels.
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl EncoderConfig {
    /// ViViT-Base geometry: 2×16×16 tubelets, width 768, 12 blocks of 12 heads.
    pub fn full() -> Self {
        Self { variant: EncoderVariant::Full, tubelet_frames: 2, patch: 16, dim: 768, depth: 12, heads: 12, mlp_dim: 3072 }
    }

    /// Desk-scale encoder: 4×32×32 tubelets (392 tokens), width 64, 2 blocks of 4 heads.
    pub fn tiny() -> Self {
        Self { variant: EncoderVariant::Tiny, tubelet_frames: 4, patch: 32, dim: 64, depth: 2, heads: 4, mlp_dim: 256 }
    }

    pub fn for_variant(variant: EncoderVariant) -> Self {
        match variant {
            EncoderVariant::Full => Self::full(),
            EncoderVariant::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tubelet_frames == 0 || !CLIP_FRAMES.is_multiple_of(self.tubelet_frames) {
            return fail(format!("{CLIP_FRAMES} frames are not divisible by tubelet length {}", self.tubelet_frames));
        }
        if self.patch == 0 || !CLIP_SIDE.is_multiple_of(self.patch) {
            return fail(format!("{CLIP_SIDE} px is not divisible by patch size {}", self.patch));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("width {} does not split into {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || self.mlp_dim == 0 {
            return fail("depth and mlp width must be positive".into());
        }
        if self.variant == EncoderVariant::Full && self.dim != 768 {
            return fail(format!("the full encoder has width 768, got {}", self.dim));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (CLIP_FRAMES / self.tubelet_frames) * (CLIP_SIDE / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.tubelet_frames * self.patch * self.patch
    }
}

/// Tubelet-embedding video transformer with joint space-time attention and
/// mean pooling over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoder<F> {
    config: EncoderConfig,
    pub embed: Linear<F>,
    pub pos: Param<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
}

/// Activations kept for one clip's backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    patches: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
}

impl<F: Scalar> VideoEncoder<F> {
    pub fn new(config: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let embed = Linear::xavier(config.patch_len(), config.dim, rng);
        let pos = Param::normal(config.tokens(), config.dim, 0.02, rng);
        let blocks = (0..config.depth).map(|_| Block::new(config.dim, config.heads, config.mlp_dim, rng)).collect();
        let norm = LayerNorm::new(config.dim);
        Ok(Self { config, embed, pos, blocks, norm })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Rearranges a clip into `tokens × (t·p·p)` tubelet rows, ordered by
    /// (time, row, column) for tokens and (frame, y, x) inside a tubelet.
    pub fn patches(&self, clip: &Clip) -> Array2<F> {
        let (t, p) = (self.config.tubelet_frames, self.config.patch);
        let grid = CLIP_SIDE / p;
        let tensor = clip.tensor();
        let mut out = Array2::<F>::zeros((self.config.tokens(), self.config.patch_len()));
        let mut row = 0;
        for ti in 0..CLIP_FRAMES / t {
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut dst = out.row_mut(row);
                    let dst = dst.as_slice_mut().expect("fresh array rows are contiguous");
                    let mut k = 0;
                    for dt in 0..t {
                        let frame = tensor.index_axis(Axis(0), ti * t + dt);
                        for dy in 0..p {
                            for dx in 0..p {
                                dst[k] = F::from_f32(frame[[gy * p + dy, gx * p + dx, 0]]).expect("f32 fits");
                                k += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }

    fn check_patches(&self, patches: &Array2<F>) -> Result<()> {
        if patches.dim() != (self.config.tokens(), self.config.patch_len()) {
            return Err(Error::shape(format!(
                "expected {}x{} tubelet matrix, got {:?}",
                self.config.tokens(),
                self.config.patch_len(),
                patches.dim()
            )));
        }
        Ok(())
    }

    fn pool(&self, tokens: &Array2<F>) -> Array1<F> {
        tokens.mean_axis(Axis(0)).expect("at least one token")
    }

    pub fn forward_patches(&self, patches: &Array2<F>) -> Result<Array1<F>> {
        self.check_patches(patches)?;
        let mut x = self.embed.forward(&patches.view());
        x += &self.pos.value;
        for block in &self.blocks {
            x = block.forward(&x.view());
        }
        let (y, _) = self.norm.forward(&x.view());
        Ok(self.pool(&y))
    }

    /// Same result as [`forward_patches`](Self::forward_patches), keeping activations.
    pub fn forward_cached(&self, patches: Array2<F>) -> Result<(Array1<F>, EncoderCache<F>)> {
        self.check_patches(&patches)?;
        let mut x = self.embed.forward(&patches.view());
        x += &self.pos.value;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward_cached(&x.view());
            x = y;
            caches.push(c);
        }
        let (y, norm) = self.norm.forward(&x.view());
        Ok((self.pool(&y), EncoderCache { patches, blocks: caches, norm }))
    }

    /// Accumulates parameter gradients for `dL/dh`. The input has no gradient.
    pub fn backward(&mut self, cache: &EncoderCache<F>, dh: ArrayView1<'_, F>) {
        if !self.is_trainable() {
            return;
        }
        let tokens = self.config.tokens();
        let scale = F::of(1.0 / tokens as f64);
        let dy = Array2::from_shape_fn((tokens, self.config.dim), |(_, c)| dh[c] * scale);
        let mut dx = self.norm.backward(&cache.norm, &dy);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(c, &dx);
        }
        self.pos.accumulate(&dx);
        self.embed.backward(&cache.patches.view(), &dx, false);
    }

    pub fn is_trainable(&self) -> bool {
        self.params().iter().any(|(_, p)| p.trainable)
    }

    pub fn encode_clip(&self, clip: &Clip) -> Result<Array1<F>> {
        self.forward_patches(&self.patches(clip))
    }

    /// `B × dim` representations, one row per clip.
    pub fn encode(&self, clips: &[Clip]) -> Result<Array2<F>> {
        let mut out = Array2::zeros((clips.len(), self.config.dim));
        for (clip, mut row) in clips.iter().zip(out.outer_iter_mut()) {
            row.assign(&self.encode_clip(clip)?);
        }
        Ok(out)
    }
}

impl<F: Scalar> Parameterized<F> for VideoEncoder<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        let mut out: Vec<(String, &Param<F>)> = prefixed("embed", self.embed.params()).collect();
        out.push(("pos".into(), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.params()));
        }
        out.extend(prefixed("norm", self.norm.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out: Vec<(String, &mut Param<F>)> = prefixed("embed", self.embed.params_mut()).collect();
        out.push(("pos".into(), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.params_mut()));
        }
        out.extend(prefixed("norm", self.norm.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn micro_config() -> EncoderConfig {
        EncoderConfig { variant: EncoderVariant::Tiny, tubelet_frames: 16, patch: 112, dim: 8, depth: 1, heads: 2, mlp_dim: 16 }
    }

    fn clip(seed: u64) -> Clip {
        let mut rng = RngStream::new(seed, "clip");
        Clip::new(Array4::from_shape_simple_fn((32, 224, 224, 1), || rng.uniform(-2.0, 2.5) as f32), "c", None).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(EncoderConfig::full().validate().is_ok());
        assert!(EncoderConfig::tiny().validate().is_ok());
        assert!(EncoderConfig { tubelet_frames: 3, ..EncoderConfig::tiny() }.validate().is_err());
        assert!(EncoderConfig { patch: 30, ..EncoderConfig::tiny() }.validate().is_err());
        assert!(EncoderConfig { dim: 512, ..EncoderConfig::full() }.validate().is_err());
        assert_eq!(EncoderConfig::tiny().tokens(), 8 * 7 * 7);
        assert_eq!(EncoderConfig::full().tokens(), 16 * 14 * 14);
    }

    #[test]
    fn full_encoder_has_about_88m_parameters() {
        let cfg = EncoderConfig::full();
        // closed-form count, no allocation
        let d = cfg.dim;
        let per_block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * cfg.mlp_dim + cfg.mlp_dim) + (cfg.mlp_dim * d + d);
        let total = cfg.patch_len() * d + d + cfg.tokens() * d + cfg.depth * per_block + 2 * d;
        assert!((total as f64 - 88e6).abs() < 8.8e6, "{total}");
    }

    #[test]
    fn tiny_param_count_matches_closed_form() {
        let cfg = EncoderConfig::tiny();
        let enc = VideoEncoder::<f32>::new(cfg.clone(), &mut RngStream::new(0, "init")).unwrap();
        let d = cfg.dim;
        let per_block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * cfg.mlp_dim + cfg.mlp_dim) + (cfg.mlp_dim * d + d);
        let total = cfg.patch_len() * d + d + cfg.tokens() * d + cfg.depth * per_block + 2 * d;
        assert_eq!(enc.param_count(), total);
    }

    #[test]
    fn patch_layout() {
        let cfg = EncoderConfig::tiny();
        let enc = VideoEncoder::<f32>::new(cfg.clone(), &mut RngStream::new(0, "init")).unwrap();
        let t = Array4::from_shape_fn((32, 224, 224, 1), |(f, y, x, _)| (f * 1_000_000 + y * 1000 + x) as f32);
        let p = enc.patches(&Clip::new(t, "ids", None).unwrap());
        // token (time 1, row 2, col 3), element (dt 2, dy 5, dx 7)
        let token = 49 + 2 * 7 + 3;
        let elem = 2 * 32 * 32 + 5 * 32 + 7;
        assert_eq!(p[[token, elem]], ((4 + 2) * 1_000_000 + (64 + 5) * 1000 + 96 + 7) as f32);
    }

    #[test]
    fn tiny_encode_shape_and_determinism() {
        let enc = VideoEncoder::<f32>::new(EncoderConfig::tiny(), &mut RngStream::new(0, "init")).unwrap();
        let c = clip(1);
        let out = enc.encode(&[c.clone(), c]).unwrap();
        assert_eq!(out.dim(), (2, 64));
        assert_eq!(out.row(0), out.row(1));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::nn::gradcheck::max_rel_error;
        let mut enc = VideoEncoder::<f64>::new(micro_config(), &mut RngStream::new(3, "init")).unwrap();
        let patches = enc.patches(&clip(2));
        let mut wr = RngStream::new(4, "w");
        let w = Array1::from_shape_simple_fn(8, || wr.uniform(-1.0, 1.0));
        let (_, cache) = enc.forward_cached(patches.clone()).unwrap();
        enc.zero_grad();
        enc.backward(&cache, w.view());
        let grads: Vec<_> = enc.params().iter().map(|(_, p)| p.grad.clone()).collect();
        let loss = |m: &VideoEncoder<f64>| m.forward_patches(&patches).unwrap().dot(&w);
        let err = max_rel_error(&mut enc, loss, &grads, 1e-5, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_encoder_has_zero_gradient() {
        let mut enc = VideoEncoder::<f64>::new(micro_config(), &mut RngStream::new(3, "init")).unwrap();
        enc.set_trainable(false);
        let (_, cache) = enc.forward_cached(enc.patches(&clip(5))).unwrap();
        enc.backward(&cache, Array1::from_elem(8, 1.0).view());
        assert_eq!(enc.grad_norm(), 0.0);
    }
}
