//! Two-view augmentation for contrastive pretraining.
//!
//! One [`ViewParams`] draw is applied to all 32 frames of a view, so motion
//! between frames survives augmentation. Frames are single-channel, which
//! reduces color jitter to brightness and contrast; the grayscale flag is
//! sampled but has nothing left to do.

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::preprocess::{resize_with, AxisTaps, IMAGENET_MEAN, IMAGENET_STD};
use crate::rng::RngStream;
use crate::{CLIP_FRAMES, CLIP_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_side: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_side: (0.5, 1.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: (0.2, 1.8),
            contrast: (0.2, 1.8),
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max {
                Ok(())
            } else {
                Err(Error::Config(format!("augment.{name} = ({lo}, {hi}) must satisfy {min} <= lo <= hi <= {max}")))
            }
        };
        range("crop_side", self.crop_side, 0.5, 1.0)?;
        range("brightness", self.brightness, 0.2, 1.8)?;
        range("contrast", self.contrast, 0.2, 1.8)?;
        range("blur_sigma", self.blur_sigma, 0.1, 2.0)?;
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Square crop in unit coordinates of the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub side: f64,
}

impl CropBox {
    pub const FULL: CropBox = CropBox { x: 0.0, y: 0.0, side: 1.0 };

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub crop: CropBox,
    pub flip: bool,
    pub brightness_factor: f64,
    pub contrast_factor: f64,
    pub blur_sigma: Option<f64>,
    pub apply_grayscale_jitter: bool,
}

impl ViewParams {
    pub const IDENTITY: ViewParams = ViewParams {
        crop: CropBox::FULL,
        flip: false,
        brightness_factor: 1.0,
        contrast_factor: 1.0,
        blur_sigma: None,
        apply_grayscale_jitter: false,
    };

    pub fn validate(&self) -> Result<()> {
        let CropBox { x, y, side } = self.crop;
        let eps = 1e-12;
        if !(0.5 - eps..=1.0 + eps).contains(&side) {
            return Err(Error::InvalidParams(format!("crop side {side} outside [0.5, 1]")));
        }
        if !(x >= -eps && y >= -eps && x + side <= 1.0 + eps && y + side <= 1.0 + eps) {
            return Err(Error::InvalidParams(format!("crop box {:?} leaves the unit square", self.crop)));
        }
        for (name, f) in [("brightness", self.brightness_factor), ("contrast", self.contrast_factor)] {
            if !(0.2..=1.8).contains(&f) {
                return Err(Error::InvalidParams(format!("{name} factor {f} outside [0.2, 1.8]")));
            }
        }
        if let Some(sigma) = self.blur_sigma {
            if !(0.1..=2.0).contains(&sigma) {
                return Err(Error::InvalidParams(format!("blur sigma {sigma} outside [0.1, 2]")));
            }
        }
        Ok(())
    }
}

/// Draws one view configuration. Every field consumes its draws whether or
/// not the transform ends up enabled, so streams stay aligned across configs.
pub fn sample_view_params(rng: &mut RngStream, cfg: &AugmentConfig) -> ViewParams {
    let side = rng.uniform(cfg.crop_side.0, cfg.crop_side.1);
    let (ux, uy) = (rng.unit(), rng.unit());
    let crop = CropBox { x: ux * (1.0 - side), y: uy * (1.0 - side), side };
    let flip = rng.bernoulli(cfg.flip_prob);

    let jitter = rng.bernoulli(cfg.jitter_prob);
    let b = rng.uniform(cfg.brightness.0, cfg.brightness.1);
    let c = rng.uniform(cfg.contrast.0, cfg.contrast.1);
    let (brightness_factor, contrast_factor) = if jitter { (b, c) } else { (1.0, 1.0) };

    let blur = rng.bernoulli(cfg.blur_prob);
    let sigma = rng.uniform(cfg.blur_sigma.0, cfg.blur_sigma.1);
    let apply_grayscale_jitter = rng.bernoulli(cfg.grayscale_prob);

    ViewParams { crop, flip, brightness_factor, contrast_factor, blur_sigma: blur.then_some(sigma), apply_grayscale_jitter }
}

/// `gray = GAIN * intensity - OFFSET` for a gray pixel pushed through the
/// per-channel normalization and channel mean.
fn gray_affine() -> (f64, f64) {
    let gain = IMAGENET_STD.iter().map(|s| 1.0 / s).sum::<f64>() / 3.0;
    let offset = IMAGENET_MEAN.iter().zip(IMAGENET_STD).map(|(m, s)| m / s).sum::<f64>() / 3.0;
    (gain, offset)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication.
fn blur_plane(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let r = (kernel.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let row = plane.row(y);
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * row[clampi(x as isize + k as isize - r, w)];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for (k, &wk) in kernel.iter().enumerate() {
            let src = tmp.row(clampi(y as isize + k as isize - r, h));
            out.row_mut(y).scaled_add(wk, &src);
        }
    }
    out
}

/// Applies one view configuration identically to every frame.
pub fn apply_view(clip: &Clip, params: &ViewParams) -> Result<Clip> {
    params.validate()?;
    if params.crop.is_full()
        && !params.flip
        && params.brightness_factor == 1.0
        && params.contrast_factor == 1.0
        && params.blur_sigma.is_none()
    {
        return Ok(clip.clone());
    }

    let side_px = CLIP_SIDE as f64;
    let taps = (!params.crop.is_full()).then(|| {
        let CropBox { x, y, side } = params.crop;
        (AxisTaps::new(CLIP_SIDE, y * side_px, side * side_px, CLIP_SIDE), AxisTaps::new(CLIP_SIDE, x * side_px, side * side_px, CLIP_SIDE))
    });

    let mut planes: Vec<Array2<f64>> = clip
        .tensor()
        .axis_iter(Axis(0))
        .map(|frame| {
            let plane: ArrayView2<'_, f32> = frame.index_axis_move(Axis(2), 0);
            let plane = plane.mapv(f64::from);
            let mut plane = match &taps {
                Some((rows, cols)) => resize_with(plane.view(), rows, cols),
                None => plane,
            };
            if params.flip {
                plane.invert_axis(Axis(1));
            }
            plane
        })
        .collect();

    let photometric = params.brightness_factor != 1.0 || params.contrast_factor != 1.0;
    if photometric {
        let (gain, offset) = gray_affine();
        for p in planes.iter_mut() {
            p.mapv_inplace(|v| ((v + offset) / gain * params.brightness_factor).clamp(0.0, 1.0));
        }
        if params.contrast_factor != 1.0 {
            let n = (planes.len() * CLIP_SIDE * CLIP_SIDE) as f64;
            let mean = planes.iter().map(|p| p.sum()).sum::<f64>() / n;
            let f = params.contrast_factor;
            for p in planes.iter_mut() {
                p.mapv_inplace(|v| ((v - mean) * f + mean).clamp(0.0, 1.0));
            }
        }
        for p in planes.iter_mut() {
            p.mapv_inplace(|v| gain * v - offset);
        }
    }

    if let Some(sigma) = params.blur_sigma {
        let kernel = gaussian_kernel(sigma);
        for p in planes.iter_mut() {
            *p = blur_plane(p, &kernel);
        }
    }

    let mut tensor = Array4::<f32>::zeros((CLIP_FRAMES, CLIP_SIDE, CLIP_SIDE, 1));
    for (t, p) in planes.iter().enumerate() {
        tensor.slice_mut(s![t, .., .., 0]).zip_mut_with(p, |dst, &v| *dst = v as f32);
    }
    Ok(Clip::new_unchecked(tensor, clip.source_id.clone(), clip.label))
}

/// Two independently sampled views of `clip`.
pub fn make_positive_pair(clip: &Clip, rng: &mut RngStream, cfg: &AugmentConfig) -> Result<(Clip, Clip)> {
    let p1 = sample_view_params(rng, cfg);
    let p2 = sample_view_params(rng, cfg);
    Ok((apply_view(clip, &p1)?, apply_view(clip, &p2)?))
}
