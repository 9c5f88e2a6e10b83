//! Flat binary parameter checkpoints and JSON sidecar files.
//!
//! A checkpoint holds named tensors in a simple container: the four magic
//! bytes `PFW1`, then one record per parameter. Each record is the name
//! length, the UTF-8 name bytes, the rank, and the dimensions, all as
//! little-endian `u32`, followed by the values as little-endian IEEE-754
//! `f32`. Records run to the end of the file; there is no count field and
//! no padding. Architecture descriptions and run metadata travel in JSON
//! files written next to the binary weights.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::tensor::{Tensor, TensorError};

/// Upper bound on a parameter name, to reject garbage length prefixes.
const MAX_NAME_LEN: u32 = 4096;
/// Upper bound on tensor rank, for the same reason.
const MAX_RANK: u32 = 8;
/// Upper bound on total element count per tensor (1 GiB of f32).
const MAX_NUMEL: u64 = 1 << 28;

const MAGIC: [u8; 4] = *b"PFW1";

/// Errors produced while reading or writing checkpoint files.
#[derive(Debug)]
pub enum CheckpointError {
    /// Underlying filesystem failure.
    Io(io::Error),
    /// The file does not start with the expected magic bytes.
    BadMagic { found: [u8; 4] },
    /// The file ended in the middle of the named field.
    Truncated { field: &'static str },
    /// A name length prefix exceeds the sanity cap.
    NameTooLong { len: u32 },
    /// A name field is not valid UTF-8.
    NameNotUtf8,
    /// A rank field exceeds the sanity cap.
    RankTooLarge { rank: u32 },
    /// The product of the dimension fields overflows the element cap.
    SizeOverflow,
    /// The stored values do not form a valid tensor (e.g. non-finite).
    InvalidTensor(TensorError),
    /// A JSON sidecar failed to serialize or deserialize.
    Json(serde_json::Error),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o error: {e}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "bad checkpoint magic {found:?}, expected {MAGIC:?}")
            }
            CheckpointError::Truncated { field } => {
                write!(f, "checkpoint truncated while reading {field}")
            }
            CheckpointError::NameTooLong { len } => {
                write!(f, "parameter name length {len} exceeds cap {MAX_NAME_LEN}")
            }
            CheckpointError::NameNotUtf8 => write!(f, "parameter name is not valid UTF-8"),
            CheckpointError::RankTooLarge { rank } => {
                write!(f, "tensor rank {rank} exceeds cap {MAX_RANK}")
            }
            CheckpointError::SizeOverflow => {
                write!(f, "tensor dimensions overflow the element cap")
            }
            CheckpointError::InvalidTensor(e) => write!(f, "stored tensor is invalid: {e}"),
            CheckpointError::Json(e) => write!(f, "sidecar JSON error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io(e) => Some(e),
            CheckpointError::InvalidTensor(e) => Some(e),
            CheckpointError::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<serde_json::Error> for CheckpointError {
    fn from(e: serde_json::Error) -> Self {
        CheckpointError::Json(e)
    }
}

/// Write named tensors to `path` in the flat binary container format.
///
/// Parameters are written in the order given; `load_params` returns them in
/// the same order, so save/load round-trips preserve ordering bit-exactly.
pub fn save_params(path: &Path, params: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        if name_bytes.len() as u64 > MAX_NAME_LEN as u64 {
            return Err(CheckpointError::NameTooLong {
                len: name_bytes.len() as u32,
            });
        }
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all named tensors from a checkpoint file, in file order.
pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }

    let mut out = Vec::new();
    loop {
        // Record boundary: a clean EOF here means the file is complete.
        let name_len = match read_u32_opt(&mut r)? {
            Some(n) => n,
            None => break,
        };
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::NameTooLong { len: name_len });
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact_or(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::NameNotUtf8)?;

        let rank = read_u32_field(&mut r, "rank")?;
        if rank > MAX_RANK {
            return Err(CheckpointError::RankTooLarge { rank });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let dim = read_u32_field(&mut r, "dims")?;
            numel = numel.saturating_mul(dim as u64);
            shape.push(dim as usize);
        }
        if numel > MAX_NUMEL {
            return Err(CheckpointError::SizeOverflow);
        }

        let mut values = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact_or(&mut r, &mut buf, "values")?;
            values.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::new(&shape, values).map_err(CheckpointError::InvalidTensor)?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Serialize `value` as pretty-printed JSON at `path`.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Deserialize a JSON file written by `save_json`.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CheckpointError> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    field: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { field }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32_field<R: Read>(r: &mut R, field: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact_or(r, &mut buf, field)?;
    Ok(u32::from_le_bytes(buf))
}

/// Read a u32 or report a clean EOF (None) if the stream ends exactly here.
fn read_u32_opt<R: Read>(r: &mut R) -> Result<Option<u32>, CheckpointError> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(CheckpointError::Truncated { field: "name_len" });
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}
