//! The IDX container: big-endian magic `0x000008DD` (unsigned bytes, `DD`
//! dimensions), one big-endian `u32` per dimension, then the payload.

use super::{Dataset, DatasetMeta};
use crate::error::{FondError, Result};
use crate::numerics::Tensor;
use std::path::Path;

const UBYTE: u8 = 0x08;

/// Raw IDX contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(FondError::format(path, "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE {
        return Err(FondError::format(
            path,
            format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(FondError::format(path, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(FondError::format(
            path,
            format!("header needs {header} bytes, file has {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload != n {
        return Err(FondError::format(
            path,
            format!("payload has {payload} bytes, dimensions {dims:?} need {n}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FondError::io(path, e))?;
    parse_idx(&bytes, path)
}

pub fn encode_idx(arr: &IdxArray) -> Result<Vec<u8>> {
    let n: usize = arr.dims.iter().product();
    if n != arr.data.len() || arr.dims.is_empty() || arr.dims.len() > 255 {
        return Err(FondError::Shape(format!(
            "idx dims {:?} for {} bytes",
            arr.dims,
            arr.data.len()
        )));
    }
    let mut out = vec![0, 0, UBYTE, arr.dims.len() as u8];
    for &d in &arr.dims {
        let d = u32::try_from(d).map_err(|_| FondError::Shape(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, arr: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_idx(arr)?).map_err(|e| FondError::io(path, e))
}

/// Reads an IDX image file (3 dimensions) into `[N × rows·cols]` with pixels
/// scaled to `[0, 1]`, or a label file (1 dimension) into a `[N × 1]` tensor
/// of class indices.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let arr = read_idx(path)?;
    let source = path.display().to_string();
    match arr.dims.as_slice() {
        &[n, r, c] => Ok(Dataset {
            samples: Tensor::new(vec![n, r * c], arr.data.iter().map(|&b| b as f64 / 255.0).collect())?,
            labels: None,
            meta: DatasetMeta {
                source,
                side: (r == c).then_some(r),
                whitening: None,
            },
        }),
        &[n] => Ok(Dataset {
            samples: Tensor::zeros(&[n, 0]),
            labels: Some(arr.data.iter().map(|&b| b as usize).collect()),
            meta: DatasetMeta {
                source,
                ..DatasetMeta::default()
            },
        }),
        dims => Err(FondError::format(path, format!("unsupported dimensions {dims:?}"))),
    }
}

/// Images plus optional labels; the counts must agree.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let mut ds = load_idx(images.as_ref())?;
    if ds.samples.cols() == 0 {
        return Err(FondError::format(images.as_ref(), "expected an image file"));
    }
    if let Some(lp) = labels {
        let l = load_idx(lp)?
            .labels
            .ok_or_else(|| FondError::format(lp, "expected a label file"))?;
        if l.len() != ds.len() {
            return Err(FondError::format(
                lp,
                format!("{} labels for {} images", l.len(), ds.len()),
            ));
        }
        ds.labels = Some(l);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut bytes = vec![0, 0, 8, 3];
        for d in [2u32, 2, 3] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend((0..12).map(|i| i as u8 * 20));
        let a = parse_idx(&bytes, Path::new("x")).unwrap();
        assert_eq!(a.dims, vec![2, 2, 3]);
        assert_eq!(encode_idx(&a).unwrap(), bytes);

        let labels = [0u8, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        assert_eq!(parse_idx(&labels, Path::new("l")).unwrap().data, vec![7, 0, 9]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 5, 1, 2];
        let err = parse_idx(&bytes, Path::new("t")).unwrap_err().to_string();
        assert!(err.contains("payload has 2 bytes"), "{err}");
        bytes[2] = 0x0D;
        assert!(parse_idx(&bytes, Path::new("t")).unwrap_err().to_string().contains("bad magic"));
        assert!(parse_idx(&[0, 0], Path::new("t")).is_err());
    }
}
