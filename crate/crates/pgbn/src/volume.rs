//! `VOL1` volume files: magic, four little-endian `u32` extents
//! (channels, depth, height, width), then little-endian `f32` voxels.

use std::path::Path;

use pgbn_core::{Real, Tensor};

use crate::error::{invalid, io_err, FormatError, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 16;

pub fn encode_volume<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.shape().len() != 4 {
        return Err(invalid("volume shape", format!("{:?} is not 4-D", t.shape())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| FormatError::ExtentOverflow(t.shape().iter().map(|&x| x as u64).collect()))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossless() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated("volume magic"));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "VOL1",
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated("volume header"));
    }
    let dims: Vec<u64> = bytes[4..HEADER_LEN]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as u64)
        .collect();
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| FormatError::ExtentOverflow(dims.clone()))?;
    let payload = &bytes[HEADER_LEN..];
    let want = count * 4;
    if payload.len() < want {
        return Err(FormatError::Truncated("volume payload"));
    }
    if payload.len() > want {
        return Err(FormatError::TrailingBytes(payload.len() - want));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok(Tensor::new(dims.iter().map(|&d| d as usize).collect(), data)?)
}

pub fn write_volume<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = encode_volume(t)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_volume(&bytes)
}
