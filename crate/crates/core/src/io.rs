//! Binary containers for raw clips and preprocessed clip tensors.
//!
//! Raw clip (`.rawclip`), little-endian:
//!
//! ```text
//! magic "CSSLRAW1" | n u32 | h u32 | w u32 | channels u8 (1 or 3) | fps f64
//! | id_len u32 | id bytes | n·h·w·channels u8 intensities
//! ```
//!
//! Gray clips are stored with one channel and expanded to RGB on read.
//!
//! Clip tensor (`.clip`):
//!
//! ```text
//! magic "CSSLCLIP" | frames u32 | side u32 | has_label u8 | label f64
//! | id_len u32 | id bytes | frames·side·side f32
//! ```

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use sha2::{Digest, Sha256};

use crate::data::{Clip, RawClip};
use crate::error::{Error, Result};
use crate::{CLIP_FRAMES, CLIP_SIDE};

pub const RAW_MAGIC: &[u8; 8] = b"CSSLRAW1";
pub const CLIP_MAGIC: &[u8; 8] = b"CSSLCLIP";
/// File name of the per-directory content hash index.
pub const HASH_INDEX: &str = "hashes.tsv";

struct Cursor<'a> {
    bytes: &'a [u8],
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format(self.origin, "source id is not UTF-8"))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expected {
            return Err(Error::format(self.origin, "bad magic"));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::format(self.origin, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn is_gray(frames: &Array4<u8>) -> bool {
    frames.lanes(Axis(3)).into_iter().all(|px| px[0] == px[1] && px[1] == px[2])
}

pub fn encode_raw(clip: &RawClip) -> Vec<u8> {
    let frames = clip.frames();
    let (n, h, w, _) = frames.dim();
    let gray = is_gray(frames);
    let mut out = Vec::with_capacity(64 + n * h * w * if gray { 1 } else { 3 });
    out.extend_from_slice(RAW_MAGIC);
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(if gray { 1 } else { 3 });
    out.extend_from_slice(&clip.fps().to_le_bytes());
    put_str(&mut out, clip.source_id());
    if gray {
        out.extend(frames.index_axis(Axis(3), 0).iter());
    } else {
        out.extend(frames.iter());
    }
    out
}

pub fn decode_raw(bytes: &[u8], origin: &Path) -> Result<RawClip> {
    let mut c = Cursor { bytes, origin };
    c.magic(RAW_MAGIC)?;
    let (n, h, w) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let channels = c.u8()?;
    let fps = c.f64()?;
    let id = c.string()?;
    let clip = match channels {
        1 => {
            let data = c.take(n * h * w)?.to_vec();
            RawClip::from_gray(Array3::from_shape_vec((n, h, w), data).expect("length checked"), fps, id)?
        }
        3 => {
            let data = c.take(n * h * w * 3)?.to_vec();
            RawClip::new(Array4::from_shape_vec((n, h, w, 3), data).expect("length checked"), fps, id)?
        }
        other => return Err(Error::format(origin, format!("unsupported channel count {other}"))),
    };
    c.finish()?;
    Ok(clip)
}

pub fn write_raw(clip: &RawClip, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(clip))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<RawClip> {
    decode_raw(&std::fs::read(path)?, path)
}

pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let t = clip.tensor();
    let mut out = Vec::with_capacity(64 + t.len() * 4);
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&(CLIP_FRAMES as u32).to_le_bytes());
    out.extend_from_slice(&(CLIP_SIDE as u32).to_le_bytes());
    out.push(u8::from(clip.label.is_some()));
    out.extend_from_slice(&clip.label.unwrap_or(0.0).to_le_bytes());
    put_str(&mut out, &clip.source_id);
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_clip(bytes: &[u8], origin: &Path) -> Result<Clip> {
    let mut c = Cursor { bytes, origin };
    c.magic(CLIP_MAGIC)?;
    let (frames, side) = (c.u32()? as usize, c.u32()? as usize);
    if frames != CLIP_FRAMES || side != CLIP_SIDE {
        return Err(Error::format(origin, format!("clip is {frames}×{side}×{side}, expected {CLIP_FRAMES}×{CLIP_SIDE}×{CLIP_SIDE}")));
    }
    let has_label = c.u8()? != 0;
    let label = c.f64()?;
    let id = c.string()?;
    let data: Vec<f32> =
        c.take(frames * side * side * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    c.finish()?;
    let tensor = Array4::from_shape_vec((frames, side, side, 1), data).expect("length checked");
    Clip::new(tensor, id, has_label.then_some(label))
}

pub fn write_clip(clip: &Clip, path: &Path) -> Result<()> {
    std::fs::write(path, encode_clip(clip))?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    decode_clip(&std::fs::read(path)?, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the content hash index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashRecord {
    pub source_id: String,
    pub file: String,
    pub sha256: String,
}

pub fn write_hash_index(records: &[HashRecord], path: &Path) -> Result<()> {
    let mut text = String::from("source_id\tfile\tsha256\n");
    for r in records {
        text.push_str(&format!("{}\t{}\t{}\n", r.source_id, r.file, r.sha256));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_hash_index(path: &Path) -> Result<Vec<HashRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("source_id\tfile\tsha256") {
        return Err(Error::format(path, "missing hash index header"));
    }
    lines
        .map(|line| match line.split('\t').collect::<Vec<_>>()[..] {
            [id, file, hash] => Ok(HashRecord { source_id: id.into(), file: file.into(), sha256: hash.into() }),
            _ => Err(Error::format(path, format!("malformed line {line:?}"))),
        })
        .collect()
}

/// Stable file stem for a source id (ids may contain path separators).
pub fn file_stem(source_id: &str) -> String {
    source_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(base: &Path, entry_path: &Path) -> PathBuf {
    if entry_path.is_absolute() {
        entry_path.to_path_buf()
    } else {
        base.join(entry_path)
    }
}
