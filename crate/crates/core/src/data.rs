//! Domain types shared by every stage, plus manifests and train/test splits.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::{CLIP_FRAMES, CLIP_SIDE};

/// Decoded video before preprocessing: `frames × H × W × 3` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    frames: Array4<u8>,
    fps: f64,
    source_id: String,
}

impl RawClip {
    pub fn new(frames: Array4<u8>, fps: f64, source_id: impl Into<String>) -> Result<Self> {
        let (n, h, w, c) = frames.dim();
        if n == 0 {
            return Err(Error::input("raw clip has zero frames"));
        }
        if h == 0 || w == 0 {
            return Err(Error::input(format!("raw clip has empty frames ({h}x{w})")));
        }
        if c != 3 {
            return Err(Error::shape(format!("raw clip frames must have 3 channels, got {c}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::input(format!("fps must be positive and finite, got {fps}")));
        }
        Ok(Self { frames, fps, source_id: source_id.into() })
    }

    /// Builds a clip from single-channel frames by replicating the channel.
    pub fn from_gray(gray: ndarray::Array3<u8>, fps: f64, source_id: impl Into<String>) -> Result<Self> {
        let (n, h, w) = gray.dim();
        let frames = Array4::from_shape_fn((n, h, w, 3), |(t, y, x, _)| gray[[t, y, x]]);
        Self::new(frames, fps, source_id)
    }

    pub fn frames(&self) -> &Array4<u8> {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> ArrayView3<'_, u8> {
        self.frames.index_axis(Axis(0), index)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    /// `(height, width)`.
    pub fn frame_size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.frames.dim();
        (h, w)
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn duration_secs(&self) -> f64 {
        self.frame_count() as f64 / self.fps
    }

    /// New clip made of the given frame indices, in order.
    pub(crate) fn gather(&self, indices: &[usize], fps: f64) -> Result<Self> {
        let frames = self.frames.select(Axis(0), indices);
        Self::new(frames, fps, self.source_id.clone())
    }
}

/// Preprocessed clip tensor, `32 × 224 × 224 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    tensor: Array4<f32>,
    pub source_id: String,
    /// Cardiac output in liters per minute.
    pub label: Option<f64>,
}

impl Clip {
    pub fn new(tensor: Array4<f32>, source_id: impl Into<String>, label: Option<f64>) -> Result<Self> {
        let dim = tensor.dim();
        if dim != (CLIP_FRAMES, CLIP_SIDE, CLIP_SIDE, 1) {
            return Err(Error::shape(format!("clip tensor must be {CLIP_FRAMES}x{CLIP_SIDE}x{CLIP_SIDE}x1, got {dim:?}")));
        }
        if let Some(bad) = tensor.iter().find(|v| !v.is_finite()) {
            return Err(Error::input(format!("clip tensor contains non-finite value {bad}")));
        }
        if let Some(l) = label {
            if !l.is_finite() {
                return Err(Error::input(format!("label must be finite, got {l}")));
            }
        }
        Ok(Self { tensor, source_id: source_id.into(), label })
    }

    /// Skips validation; callers guarantee the shape and finiteness invariants.
    pub(crate) fn new_unchecked(tensor: Array4<f32>, source_id: String, label: Option<f64>) -> Self {
        debug_assert_eq!(tensor.dim(), (CLIP_FRAMES, CLIP_SIDE, CLIP_SIDE, 1));
        Self { tensor, source_id, label }
    }

    pub fn tensor(&self) -> &Array4<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Array4<f32> {
        self.tensor
    }

    pub fn with_label(mut self, label: Option<f64>) -> Self {
        self.label = label;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub path: PathBuf,
    pub fps: f64,
    pub frame_count: usize,
    pub label: Option<f64>,
}

/// Ordered list of clips on disk.
///
/// The file form is tab-separated with a fixed header line:
///
/// ```text
/// source_id  path  fps  frame_count  label
/// clip-0000  clips/clip-0000.rawclip  48  97  5.25
/// ```
///
/// `label` is empty for unlabeled entries. Floats are written in Rust's
/// shortest round-trip form, so reading and re-writing a manifest produced by
/// [`Manifest::to_tsv`] is byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "source_id\tpath\tfps\tframe_count\tlabel";

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.source_id.as_str()) {
                return Err(Error::ManifestIntegrity(format!("duplicate source_id {:?}", e.source_id)));
            }
        }
        Ok(())
    }

    /// Fails unless every entry carries a finite label.
    pub fn check_labeled(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.label.is_some_and(f64::is_finite)) {
            Some(e) => Err(Error::input(format!("entry {:?} has no label", e.source_id))),
            None => Ok(()),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.entries.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            writeln!(out, "{}\t{}\t{}\t{}\t{}", e.source_id, e.path.display(), e.fps, e.frame_count, label)
                .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => return Err(Error::format(origin, format!("expected header {MANIFEST_HEADER:?}, found {other:?}"))),
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::format(origin, format!("line {}: expected 5 fields, got {}", lineno + 2, fields.len())));
            }
            let bad = |what: &str| Error::format(origin, format!("line {}: bad {what}", lineno + 2));
            let label = if fields[4].is_empty() { None } else { Some(fields[4].parse().map_err(|_| bad("label"))?) };
            entries.push(ManifestEntry {
                source_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                fps: fields[2].parse().map_err(|_| bad("fps"))?,
                frame_count: fields[3].parse().map_err(|_| bad("frame_count"))?,
                label,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self { train_fraction, seed }
    }

    /// Number of training entries for a manifest of `n` entries (round half up).
    pub fn train_len(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64) + 0.5).floor() as usize
    }
}

/// Indices (into `manifest.entries`) of the train and test subsets.
///
/// Source ids are sorted, shuffled with a permutation drawn from the split
/// seed, and the first `round(train_fraction · n)` become the training set.
/// Both index lists are returned in ascending order.
pub fn split_indices(manifest: &Manifest, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = manifest.len();
    if n < 2 {
        return Err(Error::input(format!("split needs at least 2 entries, got {n}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::input(format!("train_fraction must lie in (0, 1), got {}", spec.train_fraction)));
    }
    manifest.check_unique_ids()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| manifest.entries[a].source_id.cmp(&manifest.entries[b].source_id));
    let mut rng = RngStream::new(spec.seed, "split");
    order.shuffle(&mut rng);

    let n_train = spec.train_len(n);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_manifest(manifest: &Manifest, spec: &SplitSpec) -> Result<(Manifest, Manifest)> {
    let (train, test) = split_indices(manifest, spec)?;
    let pick = |idx: &[usize]| Manifest::new(idx.iter().map(|&i| manifest.entries[i].clone()).collect());
    Ok((pick(&train), pick(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| ManifestEntry {
                    source_id: format!("clip-{i:04}"),
                    path: PathBuf::from(format!("clips/clip-{i:04}.rawclip")),
                    fps: 24.0 + i as f64 * 0.5,
                    frame_count: 16 + i,
                    label: Some(2.0 + (i % 9) as f64 * 0.875),
                })
                .collect(),
        )
    }

    #[test]
    fn clinical_sized_split_is_201_67() {
        let (train, test) = split_manifest(&manifest(268), &SplitSpec::new(0.75, 40)).unwrap();
        assert_eq!(train.len(), 201);
        assert_eq!(test.len(), 67);
    }

    #[test]
    fn smallest_split() {
        let m = manifest(2);
        let a = split_manifest(&m, &SplitSpec::new(0.5, 3)).unwrap();
        let b = split_manifest(&m, &SplitSpec::new(0.5, 3)).unwrap();
        assert_eq!(a.0.len(), 1);
        assert_eq!(a.1.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn split_ignores_manifest_order() {
        let m = manifest(50);
        let mut reversed = m.clone();
        reversed.entries.reverse();
        let spec = SplitSpec::new(0.75, 9);
        let ids = |m: &Manifest| {
            let mut v: Vec<String> = m.entries.iter().map(|e| e.source_id.clone()).collect();
            v.sort();
            v
        };
        let (a, _) = split_manifest(&m, &spec).unwrap();
        let (b, _) = split_manifest(&reversed, &spec).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn split_errors() {
        let spec = SplitSpec::new(0.75, 0);
        assert!(matches!(split_manifest(&Manifest::default(), &spec), Err(Error::InvalidInput(_))));
        let mut dup = manifest(4);
        dup.entries[3].source_id = dup.entries[0].source_id.clone();
        assert!(matches!(split_manifest(&dup, &spec), Err(Error::ManifestIntegrity(_))));
        assert!(split_manifest(&manifest(4), &SplitSpec::new(1.0, 0)).is_err());
        assert!(split_manifest(&manifest(4), &SplitSpec::new(0.0, 0)).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(SplitSpec::new(0.75, 0).train_len(268), 201);
        assert_eq!(SplitSpec::new(0.75, 0).train_len(96), 72);
        assert_eq!(SplitSpec::new(0.5, 0).train_len(5), 3);
    }

    #[test]
    fn manifest_tsv_round_trip_is_byte_exact() {
        let mut m = manifest(5);
        m.entries[2].label = None;
        m.entries[1].fps = 29.97;
        m.entries[3].label = Some(0.1 + 0.2);
        let text = m.to_tsv();
        let back = Manifest::from_tsv(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_tsv(), text);
    }

    #[test]
    fn manifest_rejects_bad_header() {
        assert!(Manifest::from_tsv("id\tpath\n", Path::new("mem")).is_err());
    }

    #[test]
    fn raw_clip_invariants() {
        assert!(RawClip::new(Array4::zeros((0, 4, 4, 3)), 24.0, "x").is_err());
        assert!(RawClip::new(Array4::zeros((2, 4, 4, 1)), 24.0, "x").is_err());
        assert!(RawClip::new(Array4::zeros((2, 4, 4, 3)), 0.0, "x").is_err());
        assert!(RawClip::new(Array4::zeros((2, 4, 4, 3)), 24.0, "x").is_ok());
    }

    #[test]
    fn clip_invariants() {
        assert!(Clip::new(Array4::zeros((31, 224, 224, 1)), "x", None).is_err());
        let mut t = Array4::zeros((32, 224, 224, 1));
        assert!(Clip::new(t.clone(), "x", Some(4.0)).is_ok());
        t[[3, 4, 5, 0]] = f32::NAN;
        assert!(Clip::new(t, "x", None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_is_disjoint_exhaustive_and_deterministic(n in 2usize..500, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let m = manifest(n);
            let spec = SplitSpec::new(frac, seed);
            let (train, test) = split_indices(&m, &spec).unwrap();
            let (train2, test2) = split_indices(&m, &spec).unwrap();
            prop_assert_eq!(&train, &train2);
            prop_assert_eq!(&test, &test2);
            prop_assert_eq!(train.len(), spec.train_len(n));
            let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
