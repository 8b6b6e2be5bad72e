//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `PGBN`, version `u16`, variant tag `u8`, patch
//! size `u16`, nine `u32` widths (five encoder, four gate), init seed
//! `u64`, tensor count `u32`, then per tensor its rank `u8`, its extents as
//! `u32` and its values as `f32`, in declaration order.

use std::path::Path;

use pgbn_core::model::{ModelConfig, ModelState, Variant, Widths};
use pgbn_core::{Real, Tensor};

use crate::error::{invalid, io_err, FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGBN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint<T: Real>(state: &ModelState<T>) -> Vec<u8> {
    let cfg = state.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(cfg.variant.tag());
    out.extend_from_slice(&(cfg.patch_size as u16).to_le_bytes());
    for &w in cfg.widths.encoder.iter().chain(&cfg.widths.gate) {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&state.seed().to_le_bytes());
    out.extend_from_slice(&(state.params().len() as u32).to_le_bytes());
    for p in state.params() {
        out.push(p.shape().len() as u8);
        for &e in p.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&(v.to_f64_lossless() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated(what))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelState<T>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "PGBN",
            found: magic.to_vec(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let variant = Variant::from_tag(r.u8("variant")?)?;
    let patch = r.u16("patch size")? as usize;
    let mut widths = Widths {
        encoder: [0; 5],
        gate: [0; 4],
    };
    for w in widths.encoder.iter_mut().chain(widths.gate.iter_mut()) {
        *w = r.u32("widths")? as usize;
    }
    let seed = r.u64("seed")?;
    let count = r.u32("tensor count")? as usize;
    let config = ModelConfig::new(variant, patch, widths)?;
    let expected = config.layout().len();
    if count != expected {
        return Err(invalid(
            "checkpoint",
            format!("{count} tensors stored, architecture has {expected}"),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::ExtentOverflow(shape.iter().map(|&d| d as u64).collect()))?;
        let raw = r.take(n.checked_mul(4).ok_or(FormatError::Truncated("tensor data"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.at));
    }
    Ok(ModelState::from_parts(config, seed, params)?)
}

pub fn save_checkpoint<T: Real>(path: &Path, state: &ModelState<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, encode_checkpoint(state)).map_err(io_err(path))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelState<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}
