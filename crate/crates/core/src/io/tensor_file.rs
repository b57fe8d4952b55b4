//! `FLT1` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                         |
//! |------------|---------------------------------|
//! | 4          | magic `FLT1`                    |
//! | 1          | format version (currently 1)    |
//! | 4          | rank `r` as u32                 |
//! | 4·r        | extents as u32                  |
//! | 8·∏extents | values as IEEE-754 f64, row-major |
//!
//! A dataset is stored as `inputs.flt` (`[N, C, H, W]`) next to
//! `labels.txt` (one decimal class id per line, newline-terminated).

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fedavg::ClientDataset;
use crate::model::{Architecture, Parameters};

pub const MAGIC: &[u8; 4] = b"FLT1";
pub const VERSION: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |detail: String| Error::format(path, detail);
    if bytes.len() < 9 {
        return Err(err(format!("truncated header: expected at least 9 bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("bad magic {:?}, expected \"FLT1\"", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(err(format!("unsupported version {}, expected {VERSION}", bytes[4])));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = 9 + 4 * rank;
    if bytes.len() < header {
        return Err(err(format!("truncated header: expected {header} bytes for rank {rank}, found {}", bytes.len())));
    }
    let shape: Vec<usize> = bytes[9..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + 8 * count;
    if bytes.len() != expected {
        return Err(err(format!("expected {expected} bytes for shape {shape:?}, found {}", bytes.len())));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Parameters are stored as their rank-1 flat vector.
pub fn save_params(path: impl AsRef<Path>, params: &Parameters) -> Result<()> {
    save_tensor(path, &Tensor::from_vec(params.flatten()))
}

pub fn load_params(path: impl AsRef<Path>, arch: &Architecture) -> Result<Parameters> {
    let path = path.as_ref();
    let t = load_tensor(path)?;
    if t.rank() != 1 {
        return Err(Error::format(path, format!("parameter file must be rank 1, got shape {:?}", t.shape())));
    }
    Parameters::unflatten(arch, t.data()).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: `{l}` is not a class id", i + 1)))
        })
        .collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &ClientDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tensor(dir.join("inputs.flt"), data.inputs())?;
    save_labels(dir.join("labels.txt"), data.labels())
}

pub fn load_dataset(dir: impl AsRef<Path>, classes: usize) -> Result<ClientDataset> {
    let dir = dir.as_ref();
    let inputs = load_tensor(dir.join("inputs.flt"))?;
    let labels = load_labels(dir.join("labels.txt"))?;
    ClientDataset::new(inputs, labels, classes).map_err(|e| Error::format(dir, e.to_string()))
}
