//! The `.dmem` tensor-blob format.
//!
//! Layout, all integers little-endian:
//!
//! | field    | bytes                                   |
//! |----------|-----------------------------------------|
//! | magic    | `b"DMEM"`                               |
//! | version  | u32 (currently 1)                       |
//! | dtype    | u32, 0 = float32, 1 = float64           |
//! | rank     | u32                                     |
//! | dims     | u64 per axis                            |
//! | data     | row-major values                        |
//! | checksum | u64 FNV-1a over the data bytes          |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::fnv1a64;

pub const MAGIC: &[u8; 4] = b"DMEM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Dtype {
    #[serde(rename = "32")]
    F32,
    #[default]
    #[serde(rename = "64")]
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Dtype::F32),
            64 => Ok(Dtype::F64),
            other => Err(Error::Config(format!("float mode must be 32 or 64, got {other}"))),
        }
    }
}

pub fn payload_checksum(data: &[u8]) -> u64 {
    fnv1a64(0, data)
}

pub fn encode(tensor: &ArrayD<f64>, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * tensor.ndim() + 8 * tensor.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for d in tensor.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    let start = out.len();
    for v in tensor.as_standard_layout().iter() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let checksum = payload_checksum(&out[start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Dtype, ArrayD<f64>), String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let dtype = Dtype::from_code(cur.u32()?).ok_or("unknown dtype code")?;
    let rank = cur.u32()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(usize::try_from(cur.u64()?).map_err(|_| "dimension overflow")?);
    }
    let count: usize = dims.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let payload = cur.take(count.checked_mul(width).ok_or("size overflow")?)?;
    let stored = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    if stored != payload_checksum(payload) {
        return Err("checksum mismatch".into());
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| e.to_string())?;
    Ok((dtype, arr))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("size overflow")?;
        if end > self.bytes.len() {
            return Err("truncated".into());
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn save(path: &Path, tensor: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode(tensor, dtype))
}

pub fn load(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
        .map(|(_, t)| t)
        .map_err(|reason| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        })
}
