//! Raw video to model-ready clip: resample to 24 fps, keep 32 frames, then
//! center-crop, resize to 224², ImageNet-normalize and average to one channel.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, Axis};

use crate::data::{Clip, RawClip};
use crate::error::{Error, Result};
use crate::{CLIP_FRAMES, CLIP_SIDE};

pub const TARGET_FPS: f64 = 24.0;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Input frame index feeding each output frame when resampling `n` frames
/// from `fps` to `target_fps` (nearest index, clamped).
pub fn resample_indices(n: usize, fps: f64, target_fps: f64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::input("cannot resample a clip with zero frames"));
    }
    if !(fps > 0.0 && target_fps > 0.0) || !fps.is_finite() || !target_fps.is_finite() {
        return Err(Error::input(format!("frame rates must be positive, got {fps} -> {target_fps}")));
    }
    let duration = n as f64 / fps;
    let n_out = ((duration * target_fps).round() as usize).max(1);
    let step = fps / target_fps;
    Ok((0..n_out).map(|j| ((j as f64 * step).round() as usize).min(n - 1)).collect())
}

pub fn resample_fps(clip: &RawClip, target_fps: f64) -> Result<RawClip> {
    let idx = resample_indices(clip.frame_count(), clip.fps(), target_fps)?;
    clip.gather(&idx, target_fps)
}

/// Frame indices selecting exactly 32 frames: the first 32, or the whole clip
/// centered between copies of its first and last frame.
pub fn select_32_indices(n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::input("cannot select frames from an empty clip"));
    }
    if n >= CLIP_FRAMES {
        return Ok((0..CLIP_FRAMES).collect());
    }
    let front = (CLIP_FRAMES - n) / 2;
    let back = CLIP_FRAMES - n - front;
    let mut idx = vec![0; front];
    idx.extend(0..n);
    idx.extend(std::iter::repeat_n(n - 1, back));
    Ok(idx)
}

pub fn select_32(clip: &RawClip) -> Result<RawClip> {
    let idx = select_32_indices(clip.frame_count())?;
    clip.gather(&idx, clip.fps())
}

/// Offsets `(top, left)` and side of the largest centered square.
pub fn center_square(height: usize, width: usize) -> (usize, usize, usize) {
    let side = height.min(width);
    ((height - side) / 2, (width - side) / 2, side)
}

/// Separable bilinear lookup table: for each output coordinate, the two
/// source taps and the weight of the second one.
pub(crate) struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    /// Half-pixel-center mapping of `out` samples onto the source interval
    /// `[start, start + extent)`, clamped to `[0, len - 1]`.
    pub(crate) fn new(len: usize, start: f64, extent: f64, out: usize) -> Self {
        let scale = extent / out as f64;
        let max = (len - 1) as f64;
        let mut taps = AxisTaps { lo: Vec::with_capacity(out), hi: Vec::with_capacity(out), frac: Vec::with_capacity(out) };
        for d in 0..out {
            let src = (start + (d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

pub(crate) fn resize_with(src: ArrayView2<'_, f64>, rows: &AxisTaps, cols: &AxisTaps) -> Array2<f64> {
    let mut out = Array2::zeros((rows.lo.len(), cols.lo.len()));
    for (oy, mut row) in out.outer_iter_mut().enumerate() {
        let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
        let r0 = src.row(y0);
        let r1 = src.row(y1);
        for (ox, v) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            *v = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Bilinear resize of a whole plane to `out × out`.
pub fn resize_bilinear(src: ArrayView2<'_, f64>, out: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let rows = AxisTaps::new(h, 0.0, h as f64, out);
    let cols = AxisTaps::new(w, 0.0, w as f64, out);
    resize_with(src, &rows, &cols)
}

/// One `H × W × 3` frame to a `224 × 224` normalized gray plane.
pub fn spatial_pipeline(frame: ArrayView3<'_, u8>) -> Result<Array2<f32>> {
    let (h, w, c) = frame.dim();
    if h == 0 || w == 0 {
        return Err(Error::input("empty frame"));
    }
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let (top, left, side) = center_square(h, w);
    let crop = frame.slice(s![top..top + side, left..left + side, ..]);
    let taps = AxisTaps::new(side, 0.0, side as f64, CLIP_SIDE);

    let mut gray = Array2::<f64>::zeros((CLIP_SIDE, CLIP_SIDE));
    for ch in 0..3 {
        let plane = crop.index_axis(Axis(2), ch).mapv(f64::from);
        let resized = resize_with(plane.view(), &taps, &taps);
        let (mu, sigma) = (IMAGENET_MEAN[ch], IMAGENET_STD[ch]);
        gray.zip_mut_with(&resized, |g, &x| *g += (x / 255.0 - mu) / sigma);
    }
    Ok(gray.mapv(|g| (g / 3.0) as f32))
}

/// Closed interval every normalized gray value falls into.
pub fn normalized_range() -> (f64, f64) {
    let lo = IMAGENET_MEAN.iter().zip(IMAGENET_STD).map(|(m, s)| -m / s).fold(f64::INFINITY, f64::min);
    let hi = IMAGENET_MEAN.iter().zip(IMAGENET_STD).map(|(m, s)| (1.0 - m) / s).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Full recipe: `resample_fps → select_32 → spatial_pipeline` per frame.
pub fn preprocess_clip(clip: &RawClip) -> Result<Clip> {
    let resampled = resample_indices(clip.frame_count(), clip.fps(), TARGET_FPS)?;
    let selected = select_32_indices(resampled.len())?;
    let mut tensor = Array4::<f32>::zeros((CLIP_FRAMES, CLIP_SIDE, CLIP_SIDE, 1));
    // source frame -> first output slot holding it; duplicates are copied
    let mut done: Vec<(usize, usize)> = Vec::with_capacity(CLIP_FRAMES);
    for (t, &k) in selected.iter().enumerate() {
        let src = resampled[k];
        if let Some(&(_, prev_t)) = done.iter().find(|(s, _)| *s == src) {
            let (mut dst, prev) = tensor.multi_slice_mut((s![t, .., .., 0], s![prev_t, .., .., 0]));
            dst.assign(&prev);
            continue;
        }
        let plane = spatial_pipeline(clip.frame(src))?;
        tensor.slice_mut(s![t, .., .., 0]).assign(&plane);
        done.push((src, t));
    }
    Ok(Clip::new_unchecked(tensor, clip.source_id().to_string(), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use ndarray::Array3;
    use proptest::prelude::*;

    /// Nearest-timestamp oracle, independent of `resample_indices`; ties go
    /// to the later frame.
    fn nearest_oracle(n: usize, fps: f64, target: f64) -> Vec<usize> {
        let n_out = (n as f64 * target / fps).round() as usize;
        (0..n_out)
            .map(|j| {
                let t = j as f64 / target;
                let mut best = 0;
                for i in 0..n {
                    if (i as f64 / fps - t).abs() <= (best as f64 / fps - t).abs() + 1e-12 {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    fn numbered_clip(n: usize, fps: f64) -> RawClip {
        let frames = Array4::from_shape_fn((n, 2, 3, 3), |(t, _, _, _)| t as u8);
        RawClip::new(frames, fps, "numbered").unwrap()
    }

    fn frame_ids(c: &RawClip) -> Vec<u8> {
        (0..c.frame_count()).map(|t| c.frames()[[t, 0, 0, 0]]).collect()
    }

    #[test]
    fn downsample_48_to_24() {
        let idx = resample_indices(48, 48.0, 24.0).unwrap();
        assert_eq!(idx, (0..24).map(|j| 2 * j).collect::<Vec<_>>());
        assert_eq!(idx, nearest_oracle(48, 48.0, 24.0));
        let out = resample_fps(&numbered_clip(48, 48.0), 24.0).unwrap();
        assert_eq!(out.fps(), 24.0);
        assert_eq!(out.frame_count(), 24);
    }

    #[test]
    fn identity_at_target_rate() {
        let clip = numbered_clip(24, 24.0);
        assert_eq!(resample_fps(&clip, 24.0).unwrap(), clip);
    }

    #[test]
    fn upsample_30_at_10_fps() {
        let idx = resample_indices(30, 10.0, 24.0).unwrap();
        assert_eq!(idx.len(), 72);
        assert_eq!(idx, nearest_oracle(30, 10.0, 24.0));
        let mut counts = [0usize; 30];
        for &i in &idx {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| (2..=3).contains(&c)), "{counts:?}");
    }

    #[test]
    fn resample_rejects_bad_rates() {
        assert!(resample_indices(0, 24.0, 24.0).is_err());
        assert!(resample_indices(4, 0.0, 24.0).is_err());
        assert!(resample_indices(4, 24.0, -1.0).is_err());
    }

    #[test]
    fn select_truncates_long_clips() {
        let out = select_32(&numbered_clip(40, 24.0)).unwrap();
        assert_eq!(frame_ids(&out), (0..32).collect::<Vec<u8>>());
    }

    #[test]
    fn select_identity_at_32() {
        let clip = numbered_clip(32, 24.0);
        assert_eq!(select_32(&clip).unwrap(), clip);
    }

    #[test]
    fn select_centers_16() {
        let ids = frame_ids(&select_32(&numbered_clip(16, 24.0)).unwrap());
        let mut expected = vec![0u8; 8];
        expected.extend(0..16u8);
        expected.extend([15u8; 8]);
        assert_eq!(ids, expected);
    }

    #[test]
    fn select_31_pads_back_only() {
        let ids = frame_ids(&select_32(&numbered_clip(31, 24.0)).unwrap());
        let mut expected: Vec<u8> = (0..31).collect();
        expected.push(30);
        assert_eq!(ids, expected);
    }

    #[test]
    fn center_crop_offsets() {
        assert_eq!(center_square(360, 640), (0, 140, 360));
        assert_eq!(center_square(768, 1024), (0, 128, 768));
        assert_eq!(center_square(300, 200), (50, 0, 200));
    }

    #[test]
    fn black_frame_normalizes_to_closed_form() {
        let out = spatial_pipeline(Array3::<u8>::zeros((360, 640, 3)).view()).unwrap();
        let expected = (0..3).map(|c| -IMAGENET_MEAN[c] / IMAGENET_STD[c]).sum::<f64>() / 3.0;
        assert!((expected + 1.9860).abs() < 1e-4, "{expected}");
        for v in out.iter() {
            assert!((*v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_extremes() {
        // channel 0 at intensity 0: (0 - 0.485) / 0.229
        assert!((-IMAGENET_MEAN[0] / IMAGENET_STD[0] + 2.1179).abs() < 1e-4);
        let (lo, hi) = normalized_range();
        assert!((lo + 2.1179).abs() < 1e-4);
        assert!((hi - 2.64).abs() < 1e-4);
    }

    #[test]
    fn native_resolution_is_pointwise() {
        let mut rng = RngStream::new(1, "frame");
        let gray = Array2::from_shape_fn((224, 224), |_| (rng.unit() * 256.0) as u8);
        let frame = Array3::from_shape_fn((224, 224, 3), |(y, x, _)| gray[[y, x]]);
        let out = spatial_pipeline(frame.view()).unwrap();
        for ((y, x), v) in out.indexed_iter() {
            let g = gray[[y, x]] as f64 / 255.0;
            let expected = (0..3).map(|c| (g - IMAGENET_MEAN[c]) / IMAGENET_STD[c]).sum::<f64>() / 3.0;
            assert!((*v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_preserves_constants_and_linear_ramps() {
        let flat = Array2::from_elem((37, 53), 3.5);
        assert!(resize_bilinear(flat.view(), 224).iter().all(|&v| (v - 3.5).abs() < 1e-12));
        // interior samples of a horizontal ramp stay on the ramp
        let ramp = Array2::from_shape_fn((10, 10), |(_, x)| x as f64);
        let up = resize_bilinear(ramp.view(), 20);
        assert!((up[[5, 5]] - (5.5 * 0.5 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn composed_short_clip() {
        // 16 frames at 48 fps is 1/3 s: 8 frames at 24 fps, padded 12 + 12.
        let resampled = resample_indices(16, 48.0, 24.0).unwrap();
        assert_eq!(resampled, vec![0, 2, 4, 6, 8, 10, 12, 14]);
        let sel = select_32_indices(resampled.len()).unwrap();
        assert_eq!(sel.iter().filter(|&&k| k == 0).count(), 13);
        assert_eq!(sel.iter().filter(|&&k| k == 7).count(), 13);

        let frames = Array4::from_shape_fn((16, 8, 12, 3), |(t, _, _, _)| (t * 10) as u8);
        let clip = RawClip::new(frames, 48.0, "short").unwrap();
        let out = preprocess_clip(&clip).unwrap();
        let level = |t: usize| out.tensor()[[t, 100, 100, 0]];
        for t in 0..12 {
            assert_eq!(level(t), level(12));
        }
        for t in 20..32 {
            assert_eq!(level(t), level(19));
        }
        assert!(level(13) > level(12));
    }

    #[test]
    fn preprocess_is_deterministic() {
        let mut rng = RngStream::new(5, "clip");
        let frames = Array4::from_shape_fn((20, 30, 50, 3), |_| (rng.unit() * 256.0) as u8);
        let clip = RawClip::new(frames, 17.0, "d").unwrap();
        assert_eq!(preprocess_clip(&clip).unwrap(), preprocess_clip(&clip).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn select_keeps_order_and_only_duplicates_ends(n in 1usize..120) {
            let idx = select_32_indices(n).unwrap();
            prop_assert_eq!(idx.len(), 32);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            if n < 32 {
                let mut core = idx.clone();
                core.dedup();
                prop_assert_eq!(core, (0..n).collect::<Vec<_>>());
                if n > 1 {
                    let extra_front = idx.iter().filter(|&&i| i == 0).count() - 1;
                    let extra_back = idx.iter().filter(|&&i| i == n - 1).count() - 1;
                    prop_assert_eq!(extra_front, (32 - n) / 2);
                    prop_assert_eq!(extra_back, 32 - n - (32 - n) / 2);
                }
            }
        }

        #[test]
        fn resample_identity_when_rates_match(n in 1usize..200, fps in 8.0f64..75.0) {
            prop_assert_eq!(resample_indices(n, fps, fps).unwrap(), (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn spatial_output_in_normalized_range(h in 1usize..96, w in 1usize..96, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, "px");
            let frame = Array3::from_shape_fn((h, w, 3), |_| (rng.unit() * 256.0) as u8);
            let out = spatial_pipeline(frame.view()).unwrap();
            let (lo, hi) = normalized_range();
            prop_assert_eq!(out.dim(), (224, 224));
            prop_assert!(out.iter().all(|&v| v.is_finite() && (v as f64) >= lo - 1e-5 && (v as f64) <= hi + 1e-5));
        }
    }
}
