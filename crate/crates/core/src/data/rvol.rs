//! RVOL volume files: 6-byte magic, dtype code, reserved byte, three u32
//! dims (L, W, H), then the little-endian payload with H fastest.

use std::fs;
use std::path::Path;

use crate::engine::{Shape5, Tensor5};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;

pub const RVOL_MAGIC: &[u8; 6] = b"RVOL1\0";
const HEADER_LEN: usize = 6 + 2 + 12;
const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    /// `(1, 1, L, W, H)` intensities.
    F32(Tensor5<f32>),
    Labels(LabelVolume),
}

impl Volume {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            Volume::F32(t) => t.shape().spatial(),
            Volume::Labels(l) => l.dims(),
        }
    }
}

pub fn encode_volume(vol: &Volume) -> Result<Vec<u8>> {
    let dims = vol.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + dims.iter().product::<usize>() * 4);
    out.extend_from_slice(RVOL_MAGIC);
    let code = match vol {
        Volume::F32(t) => {
            let s = t.shape();
            if s.batch() != 1 || s.channels() != 1 {
                return Err(Error::shape(
                    "write_volume",
                    format!("expected (1,1,L,W,H), got {s}"),
                ));
            }
            t.check_finite("write_volume")?;
            DTYPE_F32
        }
        Volume::Labels(_) => DTYPE_U16,
    };
    out.push(code);
    out.push(0);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::shape("write_volume", format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match vol {
        Volume::F32(t) => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Volume::Labels(l) => l
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != RVOL_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let code = bytes[6];
    let dim = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let dims = [dim(0), dim(1), dim(2)];
    let count: usize = dims.iter().product();
    let width = match code {
        DTYPE_F32 => 4,
        DTYPE_U16 => 2,
        other => {
            return Err(Error::DType {
                expected: "0 (f32) or 1 (u16)",
                found: other,
            })
        }
    };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * width {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: count * width,
            found: payload.len(),
        });
    }
    Ok(if code == DTYPE_F32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Volume::F32(Tensor5::from_vec(
            Shape5::new(1, 1, dims[0], dims[1], dims[2]),
            data,
        )?)
    } else {
        let data = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect();
        Volume::Labels(LabelVolume::new(dims, data)?)
    })
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(vol)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

/// Reads a float volume, rejecting label files.
pub fn read_intensity(path: impl AsRef<Path>) -> Result<Tensor5<f32>> {
    match read_volume(path)? {
        Volume::F32(t) => Ok(t),
        Volume::Labels(_) => Err(Error::DType {
            expected: "f32",
            found: DTYPE_U16,
        }),
    }
}

/// Reads a label volume, rejecting float files.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Labels(l) => Ok(l),
        Volume::F32(_) => Err(Error::DType {
            expected: "u16",
            found: DTYPE_F32,
        }),
    }
}
