//! Versioned binary checkpoint of named `f32` tensors.
//!
//! Layout, little endian: `b"STGN"`, `version: u32`, `input_dim: u32`,
//! `hidden_dim: u32`, `layers: u32`, `activation: u8`, `count: u32`, then per
//! tensor `name_len: u32`, name bytes, `ndims: u32`, dims as `u32`, `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{Activation, GnnConfig, GnnParams};
use super::GnnError;

const MAGIC: &[u8; 4] = b"STGN";
const VERSION: u32 = 1;

fn err(path: &Path, message: impl Into<String>) -> GnnError {
    GnnError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn save(params: &GnnParams, path: &Path) -> Result<(), GnnError> {
    let io = |e: std::io::Error| err(path, e.to_string());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let c = params.config;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.input_dim, c.hidden_dim, c.layers] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(c.activation.code());
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    w.write_all(&buf).map_err(io)?;
    for (name, shape, data) in tensors {
        let mut rec: Vec<u8> = Vec::with_capacity(16 + name.len() + 4 * data.len());
        rec.extend_from_slice(&(name.len() as u32).to_le_bytes());
        rec.extend_from_slice(name.as_bytes());
        rec.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            rec.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in data {
            rec.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

pub fn load(path: &Path) -> Result<GnnParams, GnnError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| err(path, e.to_string()))?)
        .read_to_end(&mut bytes)
        .map_err(|e| err(path, e.to_string()))?;
    let truncated = || err(path, "truncated file");
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4).ok_or_else(truncated)? != MAGIC {
        return Err(err(path, "not a guidance checkpoint"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(err(path, format!("unsupported version {version}")));
    }
    let input_dim = c.u32().ok_or_else(truncated)? as usize;
    let hidden_dim = c.u32().ok_or_else(truncated)? as usize;
    let layers = c.u32().ok_or_else(truncated)? as usize;
    let act = c.take(1).ok_or_else(truncated)?[0];
    let activation = Activation::from_code(act).ok_or_else(|| err(path, format!("unknown activation {act}")))?;
    let config = GnnConfig {
        input_dim,
        hidden_dim,
        layers,
        activation,
    };
    let mut params = GnnParams::zeros(config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let count = c.u32().ok_or_else(truncated)? as usize;
    if count != expected.len() {
        return Err(err(path, format!("{count} tensors, expected {}", expected.len())));
    }
    let mut slots = params.tensors_mut();
    for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let got = String::from_utf8_lossy(c.take(len).ok_or_else(truncated)?).to_string();
        if &got != name {
            return Err(err(path, format!("tensor `{got}`, expected `{name}`")));
        }
        let ndims = c.u32().ok_or_else(truncated)? as usize;
        let dims: Vec<usize> = (0..ndims)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(truncated)?;
        if &dims != shape {
            return Err(err(path, format!("tensor `{name}` has shape {dims:?}, expected {shape:?}")));
        }
        let data = c.take(4 * slot.len()).ok_or_else(truncated)?;
        for (dst, chunk) in slot.iter_mut().zip(data.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if c.pos != bytes.len() {
        return Err(err(path, "trailing bytes"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_matches_f32_rounded_params() {
        let cfg = GnnConfig {
            input_dim: 5,
            hidden_dim: 3,
            layers: 2,
            activation: Activation::Tanh,
        };
        let params = GnnParams::init(cfg, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gnn.ckpt");
        save(&params, &p).unwrap();
        let loaded = load(&p).unwrap();
        let mut rounded = params.clone();
        rounded.round_to_f32();
        assert_eq!(loaded, rounded);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = GnnConfig {
            input_dim: 2,
            hidden_dim: 2,
            layers: 1,
            activation: Activation::Relu,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gnn.ckpt");
        save(&GnnParams::init(cfg, 0), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&p), Err(GnnError::Checkpoint { .. })));
    }
}
