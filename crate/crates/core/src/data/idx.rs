//! The idx format: a big-endian magic word `0x0000TTRR` (element type `TT`,
//! rank `RR`), `RR` big-endian u32 dimensions, then the payload.
//!
//! Images are read from unsigned bytes (`TT = 0x08`, scaled by 1/255) or
//! big-endian float32 (`TT = 0x0D`, read as-is). Ranks 3 (`N, H, W`, loaded
//! as one channel) and 4 (`N, C, H, W`) are accepted. Labels are rank 1 bytes.

use std::fs;
use std::path::Path;

use robustdistill_tensor::Tensor;

use super::{Dataset, Split};
use crate::error::{Error, Result};

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

/// Element encoding used by [`write_idx`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxEncoding {
    /// Rounds each value to the nearest multiple of 1/255.
    U8,
    /// Exact.
    F32,
}

struct IdxArray {
    kind: u8,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(err("bad idx magic".into()));
    }
    let (kind, rank) = (bytes[2], bytes[3] as usize);
    let width = match kind {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        other => return Err(err(format!("unsupported idx element type 0x{other:02X}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(format!("header truncated at {} bytes", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims.iter().product::<usize>() * width;
    let payload = bytes[header..].to_vec();
    if payload.len() != expected {
        return Err(err(format!(
            "dimensions {dims:?} need {expected} payload bytes, file has {}",
            payload.len()
        )));
    }
    Ok(IdxArray { kind, dims, payload })
}

/// Reads an image file and its label file. The class count is one more than
/// the largest label (at least 2).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let img = parse(ipath)?;
    let lab = parse(lpath)?;
    let ferr = |path: &Path, detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let shape = match img.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, c, h, w] => vec![n, c, h, w],
        other => return Err(ferr(ipath, format!("image file has rank {}, expected 3 or 4", other.len()))),
    };
    if lab.kind != TYPE_U8 || lab.dims.len() != 1 {
        return Err(ferr(lpath, "label file must be a rank-1 byte array".into()));
    }
    if lab.dims[0] != shape[0] {
        return Err(ferr(
            lpath,
            format!("{} labels for {} images", lab.dims[0], shape[0]),
        ));
    }
    let data: Vec<f32> = match img.kind {
        TYPE_U8 => img.payload.iter().map(|&b| b as f32 / 255.0).collect(),
        _ => img
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
            .collect(),
    };
    let labels: Vec<usize> = lab.payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(Tensor::new(shape, data)?, labels, num_classes, Split::Test).map_err(|e| ferr(ipath, e.to_string()))
}

/// Writes `dataset` as an idx image/label pair (rank-4 images).
pub fn write_idx(
    dataset: &Dataset,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    encoding: IdxEncoding,
) -> Result<()> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let mut shape = dataset.images().shape().to_vec();
    if shape.len() == 2 {
        shape = vec![shape[0], 1, 1, shape[1]];
    }
    if shape.len() != 4 {
        return Err(Error::Shape(format!("cannot write images of shape {shape:?} as idx")));
    }
    if dataset.num_classes() > 256 {
        return Err(Error::Parameter("idx labels hold at most 256 classes".into()));
    }
    let kind = match encoding {
        IdxEncoding::U8 => TYPE_U8,
        IdxEncoding::F32 => TYPE_F32,
    };
    let mut out = vec![0, 0, kind, 4];
    for d in &shape {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    for &v in dataset.images().data() {
        match encoding {
            IdxEncoding::U8 => out.push((v * 255.0).round().clamp(0.0, 255.0) as u8),
            IdxEncoding::F32 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    fs::write(ipath, out).map_err(|e| Error::io(ipath, e))?;
    let mut out = vec![0, 0, TYPE_U8, 1];
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend(dataset.labels().iter().map(|&l| l as u8));
    fs::write(lpath, out).map_err(|e| Error::io(lpath, e))
}
