//! Sequence container.
//!
//! All integers little-endian.
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `ADSCSEQ\0` |
//! | 4     | format version (u32) |
//! | 8     | manifest length `n` (u64) |
//! | n     | UTF-8 JSON manifest: the [`SceneSequence`] without clouds, plus per-frame `cloud_len` and `has_pattern` |
//! | ...   | per frame, in order: `cloud_len` × (x, y, z as f64, beam as u32); then, if `has_pattern`, `h·w` bytes of 0/1 |
//! | 32    | SHA-256 of every preceding byte |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PointCloud, SceneSequence};
use crate::error::{CoreError, Result};
use crate::rangeimage::BeamPattern;

pub const SEQUENCE_MAGIC: &[u8; 8] = b"ADSCSEQ\0";
pub const SEQUENCE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FrameExtra {
    cloud_len: Option<usize>,
    has_pattern: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sequence: SceneSequence,
    extras: Vec<FrameExtra>,
}

pub fn save_sequence(seq: &SceneSequence, path: &Path) -> Result<()> {
    let extras = seq
        .frames
        .iter()
        .map(|f| FrameExtra { cloud_len: f.cloud.as_ref().map(PointCloud::len), has_pattern: f.pattern.is_some() })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { sequence: seq.clone(), extras })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(SEQUENCE_MAGIC);
    buf.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for f in &seq.frames {
        if let Some(c) = &f.cloud {
            for (p, b) in c.points.iter().zip(&c.beams) {
                for x in p {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
        if let Some(p) = &f.pattern {
            buf.extend(p.bits.iter().map(|&b| b as u8));
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CoreError::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_sequence(path: &Path) -> Result<SceneSequence> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(CoreError::Format("file too short".into()));
    }
    if &bytes[..8] != SEQUENCE_MAGIC {
        return Err(CoreError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SEQUENCE_VERSION {
        return Err(CoreError::Format(format!("unsupported version {version}, expected {SEQUENCE_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CoreError::Format("checksum mismatch (truncated or corrupt)".into()));
    }
    let mut cur = Cursor { buf: body, pos: 12 };
    let mlen = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(cur.take(mlen)?)?;
    let mut seq = manifest.sequence;
    if manifest.extras.len() != seq.frames.len() {
        return Err(CoreError::Format("manifest frame count mismatch".into()));
    }
    let beams = seq.grid.beams();
    for (f, e) in seq.frames.iter_mut().zip(&manifest.extras) {
        if let Some(n) = e.cloud_len {
            let mut c = PointCloud::default();
            for _ in 0..n {
                let p = [cur.f64()?, cur.f64()?, cur.f64()?];
                c.points.push(p);
                c.beams.push(cur.u32()?);
            }
            f.cloud = Some(c);
        }
        if e.has_pattern {
            let bits = cur.take(beams)?.iter().map(|&b| b != 0).collect();
            f.pattern = Some(BeamPattern { h: seq.grid.h, w: seq.grid.w, bits });
        }
    }
    if cur.pos != body.len() {
        return Err(CoreError::Format("trailing bytes after payload".into()));
    }
    Ok(seq)
}
