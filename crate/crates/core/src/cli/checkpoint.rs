//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FOND"                     4-byte magic
//! u32 version                currently 1
//! u32 n, n bytes             experiment config as UTF-8 TOML
//! u32 count                  number of tensors
//! count × {
//!   u16 n, n bytes           tensor name (UTF-8)
//!   u32 ndim, ndim × u64     shape
//!   f64 × Π shape            values, row-major
//! }
//! ```
//!
//! Model tensors use the names from [`GenerativeParams::named_tensors`];
//! a whitening descriptor, if any, is stored as `whiten.mean`,
//! `whiten.basis` and `whiten.scale`.

use std::path::Path;

use crate::cli::config::ExperimentConfig;
use crate::data::WhiteningDescriptor;
use crate::dynamics::ModelKind;
use crate::error::{FondError, Result};
use crate::model::GenerativeParams;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FOND";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: GenerativeParams,
    pub whitening: Option<WhiteningDescriptor>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.config.model.kind
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.config.to_toml()?;
        let mut tensors: Vec<(&str, &Tensor)> = self.params.named_tensors();
        if let Some(w) = &self.whitening {
            tensors.push(("whiten.mean", &w.mean));
            tensors.push(("whiten.basis", &w.basis));
            tensors.push(("whiten.scale", &w.scale));
        }
        let payload: usize = tensors.iter().map(|(n, t)| 6 + n.len() + 8 * (t.ndim() + t.len())).sum();
        let mut out = Vec::with_capacity(16 + cfg.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(cfg.len()).expect("config size").to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(FondError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FondError::format(path, format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| FondError::format(path, "config is not UTF-8"))?;
        let config = ExperimentConfig::parse(text)?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| FondError::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| FondError::format(path, "dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FondError::format(path, "tensor size overflow"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| FondError::format(path, "tensor size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            named.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(FondError::format(path, "trailing bytes after tensor table"));
        }
        let take = |key: &str| named.iter().find(|(n, _)| n == key).map(|(_, t)| t.clone());
        let whitening = match (take("whiten.mean"), take("whiten.basis"), take("whiten.scale")) {
            (Some(mean), Some(basis), Some(scale)) => Some(WhiteningDescriptor { mean, basis, scale }),
            (None, None, None) => None,
            _ => return Err(FondError::format(path, "incomplete whitening descriptor")),
        };
        let params = GenerativeParams::from_named(config.model.decoder_kind(), &named)?;
        Ok(Checkpoint {
            config,
            params,
            whitening,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FondError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes `bytes` next to `path` and renames into place, creating parent
/// directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FondError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| FondError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FondError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FondError::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
