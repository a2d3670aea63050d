//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CSSLCKPT"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes, UTF-8 JSON (config, counters, tensor directory)
//! data    tensors in directory order, raw little-endian f32/f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, RegressionHead, VideoEncoder};
use crate::contrastive::ProjectionHead;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Linear, Parameterized, Scalar};
use crate::rng::RngStream;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSSLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
    Supervised,
}

/// Everything needed to resume or reuse a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    /// Serialized training configuration that produced this state.
    pub train_config: serde_json::Value,
    pub encoder: VideoEncoder<f32>,
    pub projection: Option<ProjectionHead>,
    pub head: Option<RegressionHead>,
    pub encoder_optim: Option<AdamState<f32>>,
    pub head_optim: Option<AdamState<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    input_dim: usize,
    hidden: usize,
    dropout: f64,
    target_mean: f64,
    target_std: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    epoch: usize,
    seed: u64,
    train_config: serde_json::Value,
    encoder_config: EncoderConfig,
    projection: Option<(usize, usize, usize)>,
    head: Option<HeadMeta>,
    encoder_optim_step: Option<u64>,
    head_optim_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

trait Dtype: Scalar {
    const NAME: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Dtype for f32 {
    const NAME: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Dtype for f64 {
    const NAME: &'static str = "f64";
    const SIZE: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Default)]
struct Writer {
    dir: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn push<F: Dtype>(&mut self, name: String, a: &Array2<F>) {
        self.dir.push(TensorEntry { name, dtype: F::NAME.into(), rows: a.nrows(), cols: a.ncols() });
        for &v in a.iter() {
            v.write_le(&mut self.data);
        }
    }

    fn push_params<F: Dtype, M: Parameterized<F>>(&mut self, prefix: &str, m: &M) {
        for (name, p) in m.params() {
            self.push(format!("{prefix}.{name}"), &p.value);
        }
    }

    fn push_adam<F: Dtype>(&mut self, prefix: &str, s: &AdamState<F>) {
        for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
            self.push(format!("{prefix}.m.{i}"), m);
            self.push(format!("{prefix}.v.{i}"), v);
        }
    }
}

struct Reader<'a> {
    origin: &'a Path,
    dir: std::vec::IntoIter<TensorEntry>,
    data: &'a [u8],
}

impl Reader<'_> {
    fn next<F: Dtype>(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<F>> {
        let e = self.dir.next().ok_or_else(|| Error::format(self.origin, format!("missing tensor {name}")))?;
        if e.name != name || e.dtype != F::NAME || e.rows != rows || e.cols != cols {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: expected {name} {}[{rows}x{cols}], found {} {}[{}x{}]",
                F::NAME,
                e.name,
                e.dtype,
                e.rows,
                e.cols
            )));
        }
        let n = rows * cols * F::SIZE;
        if self.data.len() < n {
            return Err(Error::format(self.origin, format!("truncated data for {name}")));
        }
        let (head, rest) = self.data.split_at(n);
        self.data = rest;
        let values: Vec<F> = head.chunks_exact(F::SIZE).map(F::read_le).collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    }

    fn fill_params<F: Dtype, M: Parameterized<F>>(&mut self, prefix: &str, m: &mut M) -> Result<()> {
        for (name, p) in m.params_mut() {
            let (r, c) = p.value.dim();
            p.value = self.next(&format!("{prefix}.{name}"), r, c)?;
        }
        Ok(())
    }

    fn adam<F: Dtype>(&mut self, prefix: &str, step: u64, shapes: &[(usize, usize)]) -> Result<AdamState<F>> {
        let mut s = AdamState { step, m: vec![], v: vec![] };
        // an optimizer that never stepped has no moments yet
        if self.dir.as_slice().first().is_some_and(|e| e.name == format!("{prefix}.m.0")) {
            for (i, &(r, c)) in shapes.iter().enumerate() {
                s.m.push(self.next(&format!("{prefix}.m.{i}"), r, c)?);
                s.v.push(self.next(&format!("{prefix}.v.{i}"), r, c)?);
            }
        }
        Ok(s)
    }
}

fn head_shapes(projection: Option<&ProjectionHead>, head: Option<&RegressionHead>) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    if let Some(p) = projection {
        shapes.extend(p.params().iter().map(|(_, p)| p.value.dim()));
    }
    if let Some(h) = head {
        shapes.extend(h.params().iter().map(|(_, p)| p.value.dim()));
    }
    shapes
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.push_params("encoder", &self.encoder);
        if let Some(p) = &self.projection {
            w.push_params("projection", p);
        }
        if let Some(h) = &self.head {
            w.push("head.input_mean".into(), &h.input_mean.clone().insert_axis(ndarray::Axis(0)));
            w.push("head.input_std".into(), &h.input_std.clone().insert_axis(ndarray::Axis(0)));
            w.push_params("head", h);
        }
        if let Some(s) = &self.encoder_optim {
            w.push_adam("encoder_optim", s);
        }
        if let Some(s) = &self.head_optim {
            w.push_adam("head_optim", s);
        }
        let header = Header {
            kind: self.kind,
            epoch: self.epoch,
            seed: self.seed,
            train_config: self.train_config.clone(),
            encoder_config: self.encoder.config().clone(),
            projection: self.projection.as_ref().map(|p| (p.input_dim(), p.fc1.output_dim(), p.output_dim())),
            head: self.head.as_ref().map(|h| HeadMeta {
                input_dim: h.input_dim(),
                hidden: h.fc1.output_dim(),
                dropout: h.dropout,
                target_mean: h.target_mean,
                target_std: h.target_std,
            }),
            encoder_optim_step: self.encoder_optim.as_ref().map(|s| s.step),
            head_optim_step: self.head_optim.as_ref().map(|s| s.step),
            tensors: w.dir,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + w.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", origin.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::format(origin, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut r = Reader { origin, dir: header.tensors.into_iter(), data: &body[hlen..] };

        // shapes come from the config; values are overwritten below
        let mut scratch = RngStream::new(0, "checkpoint/shape");
        let mut encoder = VideoEncoder::<f32>::new(header.encoder_config.clone(), &mut scratch)?;
        r.fill_params("encoder", &mut encoder)?;

        let projection = match header.projection {
            Some((i, h, o)) => {
                let mut p = ProjectionHead { fc1: Linear::zeros(i, h), fc2: Linear::zeros(h, o) };
                r.fill_params("projection", &mut p)?;
                Some(p)
            }
            None => None,
        };

        let head = match &header.head {
            Some(meta) => {
                let mut h = RegressionHead::with_hidden(meta.input_dim, meta.hidden, meta.dropout, &mut scratch);
                h.input_mean = Array1::from(r.next::<f64>("head.input_mean", 1, meta.input_dim)?.into_raw_vec_and_offset().0);
                h.input_std = Array1::from(r.next::<f64>("head.input_std", 1, meta.input_dim)?.into_raw_vec_and_offset().0);
                r.fill_params("head", &mut h)?;
                h.target_mean = meta.target_mean;
                h.target_std = meta.target_std;
                Some(h)
            }
            None => None,
        };

        let encoder_shapes: Vec<_> = encoder.params().iter().map(|(_, p)| p.value.dim()).collect();
        let encoder_optim = header.encoder_optim_step.map(|s| r.adam("encoder_optim", s, &encoder_shapes)).transpose()?;
        let shapes = head_shapes(projection.as_ref(), head.as_ref());
        let head_optim = header.head_optim_step.map(|s| r.adam("head_optim", s, &shapes)).transpose()?;
        if r.dir.next().is_some() || !r.data.is_empty() {
            return Err(Error::format(origin, "trailing data after the last tensor"));
        }

        Ok(Self {
            kind: header.kind,
            epoch: header.epoch,
            seed: header.seed,
            train_config: header.train_config,
            encoder,
            projection,
            head,
            encoder_optim,
            head_optim,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and rejects a checkpoint whose encoder shape differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.encoder.config() != expected {
            return Err(Error::Checkpoint(format!(
                "encoder config mismatch: checkpoint has {:?}, expected {:?}",
                ckpt.encoder.config(),
                expected
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EncoderVariant;
    use crate::nn::Adam;

    fn small() -> EncoderConfig {
        EncoderConfig { variant: EncoderVariant::Tiny, tubelet_frames: 16, patch: 112, dim: 8, depth: 1, heads: 2, mlp_dim: 16 }
    }

    fn sample() -> Checkpoint {
        let mut rng = RngStream::new(1, "ckpt");
        let encoder = VideoEncoder::<f32>::new(small(), &mut rng).unwrap();
        let mut projection = ProjectionHead::with_widths(8, 8, 4, &mut rng);
        let mut head = RegressionHead::with_hidden(8, 5, 0.3, &mut rng);
        head.target_mean = 5.5;
        head.target_std = 2.25;
        head.input_mean[3] = 0.75;
        // one real optimizer step over projection + head so moments exist
        let mut opt = Adam::<f64>::new(0.0);
        {
            let mut params: Vec<_> = projection.params_mut().into_iter().chain(head.params_mut()).map(|(_, p)| p).collect();
            for p in params.iter_mut() {
                p.grad.fill(0.5);
            }
            opt.step(&mut params, 1e-3);
        }
        // gradients are scratch space and are not persisted
        projection.zero_grad();
        head.zero_grad();
        let enc_opt = AdamState::<f32>::default();
        Checkpoint {
            kind: CheckpointKind::Pretrain,
            epoch: 3,
            seed: 40,
            train_config: serde_json::json!({"stage": "pretrain"}),
            encoder,
            projection: Some(projection),
            head: Some(head),
            encoder_optim: Some(enc_opt),
            head_optim: Some(opt.state().clone()),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = sample();
        ck.head_optim = None;
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("m")), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
    }

    #[test]
    fn load_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut ck = sample();
        ck.head_optim = None;
        ck.save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, &small()).is_ok());
        let other = EncoderConfig { depth: 2, ..small() };
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(Error::Checkpoint(_))));
    }
}
