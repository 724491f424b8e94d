use std::fs;
use std::path::Path;

use robustdistill_tensor::Tensor;

use super::{Dataset, Split};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 pixel bytes (R, G, B planes of 32x32).
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % RECORD != 0 {
            let offset = bytes.len() - bytes.len() % RECORD;
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "truncated record at byte offset {offset} ({} of {RECORD} bytes present)",
                    bytes.len() - offset
                ),
            });
        }
        for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("label {} at byte offset {}", rec[0], i * RECORD),
                });
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, Split::Train)
}
