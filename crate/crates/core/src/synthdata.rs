//! Echo-like synthetic clips: a pulsating bright ellipse on a dark speckled
//! background. Pulsation amplitude and rate both grow with the target, so the
//! label is carried by motion rather than by any single frame.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, ManifestEntry, RawClip};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;

const BACKGROUND: f64 = 28.0;
const FOREGROUND: f64 = 196.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub seed: u64,
    /// Target range in L/min.
    pub co_range: (f64, f64),
    pub width: usize,
    pub height: usize,
    /// Std of the static speckle, in intensity units.
    pub speckle: f64,
    /// Std of the per-frame acquisition noise, in intensity units.
    pub noise: f64,
    pub fps_range: (f64, f64),
    pub frame_range: (usize, usize),
    /// Clip duration range in seconds (before clamping to `frame_range`).
    pub duration_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clips: 96,
            seed: 7,
            co_range: (2.0, 10.0),
            width: 160,
            height: 120,
            speckle: 12.0,
            noise: 3.0,
            fps_range: (10.0, 75.0),
            frame_range: (16, 181),
            duration_range: (2.0, 3.0),
        }
    }
}

impl SynthConfig {
    /// The fixed dataset used by the acceptance suite and CI.
    pub fn acceptance() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.co_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && lo > 0.0) {
            return Err(Error::Config(format!("co_range must satisfy 0 < low < high, got {:?}", self.co_range)));
        }
        let (f0, f1) = self.fps_range;
        if !(10.0..=75.0).contains(&f0) || !(10.0..=75.0).contains(&f1) || f0 > f1 {
            return Err(Error::Config(format!("fps_range must lie within [10, 75], got {:?}", self.fps_range)));
        }
        let (n0, n1) = self.frame_range;
        if n0 < 16 || n1 > 181 || n0 > n1 {
            return Err(Error::Config(format!("frame_range must lie within [16, 181], got {:?}", self.frame_range)));
        }
        let (d0, d1) = self.duration_range;
        if !(d0 > 0.0 && d0 <= d1) {
            return Err(Error::Config(format!("invalid duration_range {:?}", self.duration_range)));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config("frames must be at least 32×32".into()));
        }
        if self.speckle < 0.0 || self.noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Relative radius swing of the ellipse.
pub fn pulsation_amplitude(co: f64) -> f64 {
    0.06 + 0.03 * (co - 2.0)
}

/// Beats per second.
pub fn pulsation_rate(co: f64) -> f64 {
    0.9 + 0.15 * (co - 2.0)
}

struct Geometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

fn render_frame(g: &Geometry, scale: f64, speckle: &Array2<f64>, noise: &mut dyn FnMut() -> f64) -> Array2<u8> {
    let (h, w) = speckle.dim();
    let (rx, ry) = (g.rx * scale, g.ry * scale);
    let edge = rx.min(ry);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = (x as f64 + 0.5 - g.cx) / rx;
        let dy = (y as f64 + 0.5 - g.cy) / ry;
        // approximate signed distance to the boundary, in pixels
        let d = ((dx * dx + dy * dy).sqrt() - 1.0) * edge;
        let inside = (0.5 - d).clamp(0.0, 1.0);
        let v = BACKGROUND + (FOREGROUND - BACKGROUND) * inside + speckle[[y, x]] + noise();
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Renders one clip with target `co`. All randomness comes from `rng`.
pub fn gen_clip(rng: &mut RngStream, co: f64, config: &SynthConfig, source_id: &str) -> Result<RawClip> {
    config.validate()?;
    let (lo, hi) = config.co_range;
    if !(lo..=hi).contains(&co) {
        return Err(Error::input(format!("target {co} outside {:?}", config.co_range)));
    }
    let fps = rng.uniform(config.fps_range.0, config.fps_range.1);
    let duration = rng.uniform(config.duration_range.0, config.duration_range.1);
    let n = ((duration * fps).round() as usize).clamp(config.frame_range.0, config.frame_range.1);
    let (w, h) = (config.width as f64, config.height as f64);
    let side = w.min(h);
    let g = Geometry {
        cx: w / 2.0 + rng.uniform(-0.03, 0.03) * side,
        cy: h / 2.0 + rng.uniform(-0.03, 0.03) * side,
        rx: side * rng.uniform(0.21, 0.23),
        ry: side * rng.uniform(0.25, 0.27),
    };
    let phase = rng.uniform(0.0, 0.1) * TAU;

    let speckle_dist = Normal::new(0.0, config.speckle.max(f64::MIN_POSITIVE)).expect("valid std");
    let speckle = Array2::from_shape_simple_fn((config.height, config.width), || speckle_dist.sample(rng));
    let noise_dist = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut noise = || noise_dist.sample(rng);

    let (amp, rate) = (pulsation_amplitude(co), pulsation_rate(co));
    let mut frames = Array3::<u8>::zeros((n, config.height, config.width));
    for (i, mut frame) in frames.outer_iter_mut().enumerate() {
        let t = i as f64 / fps;
        let scale = 1.0 + amp * (TAU * rate * t + phase).sin();
        frame.assign(&render_frame(&g, scale, &speckle, &mut noise));
    }
    RawClip::from_gray(frames, fps, source_id)
}

/// Pixels brighter than the midpoint between background and ellipse.
pub fn ellipse_area(frame: ArrayView2<'_, u8>) -> usize {
    let threshold = ((BACKGROUND + FOREGROUND) / 2.0) as u8;
    frame.iter().filter(|&&v| v > threshold).count()
}

/// Population variance of the thresholded ellipse area across frames.
pub fn ellipse_area_variance(clip: &RawClip) -> f64 {
    let areas: Vec<f64> = (0..clip.frame_count()).map(|i| ellipse_area(clip.frame(i).index_axis(ndarray::Axis(2), 0)) as f64).collect();
    let m = areas.iter().sum::<f64>() / areas.len() as f64;
    areas.iter().map(|a| (a - m).powi(2)).sum::<f64>() / areas.len() as f64
}

pub fn source_id(seed: u64, index: usize) -> String {
    format!("synth-{seed}-{index:05}")
}

/// The label and stream for clip `index`; shared by the on-disk and in-memory generators.
fn clip_stream(config: &SynthConfig, index: usize) -> (RngStream, f64) {
    let mut rng = RngStream::new(config.seed, "synth").derive(format!("clip-{index}"));
    let co = rng.uniform(config.co_range.0, config.co_range.1);
    (rng, co)
}

/// Generates clip `index` of the dataset described by `config`.
pub fn gen_indexed(config: &SynthConfig, index: usize) -> Result<(RawClip, f64)> {
    let (mut rng, co) = clip_stream(config, index);
    Ok((gen_clip(&mut rng, co, config, &source_id(config.seed, index))?, co))
}

/// Writes every clip under `out/raw/` plus `out/manifest.tsv`; manifest paths
/// are relative to `out`.
pub fn gen_dataset(config: &SynthConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    if config.n_clips < 2 {
        return Err(Error::Config("n_clips must be at least 2".into()));
    }
    std::fs::create_dir_all(out.join("raw"))?;
    let mut entries = Vec::with_capacity(config.n_clips);
    for i in 0..config.n_clips {
        let (clip, co) = gen_indexed(config, i)?;
        let rel = format!("raw/{}.rawclip", io::file_stem(clip.source_id()));
        io::write_raw(&clip, &out.join(&rel))?;
        entries.push(ManifestEntry {
            source_id: clip.source_id().to_string(),
            path: rel.into(),
            fps: clip.fps(),
            frame_count: clip.frame_count(),
            label: Some(co),
        });
    }
    let manifest = Manifest::new(entries);
    manifest.write(&out.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Least-squares fit of label on the area-variance feature; returns the
/// Pearson correlation between fitted values and labels.
pub fn area_variance_fit_pearson(features: &[f64], labels: &[f64]) -> Result<f64> {
    let n = features.len() as f64;
    let (mx, my) = (features.iter().sum::<f64>() / n, labels.iter().sum::<f64>() / n);
    let sxx: f64 = features.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = features.iter().zip(labels).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateVariance("constant area-variance feature".into()));
    }
    let slope = sxy / sxx;
    let fitted: Vec<f64> = features.iter().map(|x| my + slope * (x - mx)).collect();
    crate::evaluate::pearson(labels, &fitted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { width: 64, height: 48, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_per_seed_and_target() {
        let cfg = small();
        let a = gen_clip(&mut RngStream::new(1, "s"), 5.0, &cfg, "a").unwrap();
        let b = gen_clip(&mut RngStream::new(1, "s"), 5.0, &cfg, "a").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_clip(&mut RngStream::new(2, "s"), 5.0, &cfg, "a").unwrap());
    }

    #[test]
    fn larger_target_moves_more() {
        let cfg = SynthConfig::default();
        for seed in 0..5 {
            let lo = gen_clip(&mut RngStream::new(seed, "s"), 2.0, &cfg, "lo").unwrap();
            let hi = gen_clip(&mut RngStream::new(seed, "s"), 10.0, &cfg, "hi").unwrap();
            assert!(ellipse_area_variance(&hi) > ellipse_area_variance(&lo));
        }
        assert!(pulsation_amplitude(3.0) * pulsation_rate(3.0) < pulsation_amplitude(3.1) * pulsation_rate(3.1));
    }

    #[test]
    fn clips_respect_configured_ranges() {
        let cfg = small();
        for i in 0..20 {
            let (clip, co) = gen_indexed(&cfg, i).unwrap();
            assert!((2.0..=10.0).contains(&co));
            assert!((10.0..=75.0).contains(&clip.fps()));
            assert!((16..=181).contains(&clip.frame_count()));
            assert_eq!(clip.frame_size(), (48, 64));
        }
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let r = gen_clip(&mut RngStream::new(0, "s"), 11.0, &small(), "x");
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn labels_are_uniform() {
        let cfg = SynthConfig { n_clips: 10_000, ..SynthConfig::default() };
        let mut bins = [0usize; 8];
        for i in 0..cfg.n_clips {
            let (_, co) = clip_stream(&cfg, i);
            bins[((co - 2.0) as usize).min(7)] += 1;
        }
        // 1250 expected per bin; 5 sigma is about 165
        assert!(bins.iter().all(|&b| (1085..=1415).contains(&b)), "{bins:?}");
    }

    #[test]
    fn dataset_is_written_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_clips: 4, ..small() };
        let m1 = gen_dataset(&cfg, &dir.path().join("a")).unwrap();
        let m2 = gen_dataset(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(Manifest::read(&dir.path().join("a/manifest.tsv")).unwrap(), m1);
        for e in &m1.entries {
            let a = std::fs::read(dir.path().join("a").join(&e.path)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&e.path)).unwrap();
            assert_eq!(io::sha256_hex(&a), io::sha256_hex(&b));
        }
    }
}
