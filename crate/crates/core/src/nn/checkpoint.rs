//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RDCKPT\r\n" | version u32 | spec digest u64 | spec json (u32 len + bytes)
//! role u8 | selection u8 | epoch u32
//! parameters: u32 count, then per tensor: name (u16 len + bytes), rank u8,
//!             dims u32 each, values f32 each
//! momentum buffers: same encoding as parameters
//! history: u32 count, then per record: epoch u32, wall_ms u64, five f64
//! FNV-1a 64 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use robustdistill_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::model::{ParameterSet, Role};
use super::spec::ModelSpec;
use crate::digest::fnv1a64;
use crate::error::{Error, Result};
use crate::train::EpochRecord;

const MAGIC: &[u8; 8] = b"RDCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Best,
    Last,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Best => "best",
            Selection::Last => "last",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f32>,
    pub epoch: usize,
    pub momentum: BTreeMap<String, Tensor<f32>>,
    pub history: Vec<EpochRecord>,
    pub selection: Selection,
}

impl Checkpoint {
    /// A checkpoint wrapping bare parameters, e.g. for a fresh model.
    pub fn from_params(params: ParameterSet<f32>, selection: Selection) -> Self {
        Self {
            params,
            epoch: 0,
            momentum: BTreeMap::new(),
            history: Vec::new(),
            selection,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let spec = self.params.spec();
        out.extend_from_slice(&spec.digest().to_le_bytes());
        let json = spec.canonical();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.push(match self.params.role() {
            Role::Student => 0,
            Role::Teacher => 1,
        });
        out.push(match self.selection {
            Selection::Best => 0,
            Selection::Last => 1,
        });
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        write_tensors(&mut out, self.params.tensors());
        write_tensors(&mut out, &self.momentum);
        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for r in &self.history {
            out.extend_from_slice(&(r.epoch as u32).to_le_bytes());
            out.extend_from_slice(&r.wall_ms.to_le_bytes());
            for v in [r.lr, r.train_loss, r.train_acc, r.val_clean_acc, r.val_robust_acc] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let integrity = |detail: String| Error::Integrity {
            path: path.to_path_buf(),
            detail,
        };
        let format = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
                return Err(integrity(format!("file truncated at {} bytes", bytes.len())));
            }
            return Err(format("not a checkpoint (bad magic bytes)".into()));
        }
        if bytes.len() < MAGIC.len() + 4 {
            return Err(integrity(format!("file truncated at {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        if bytes.len() < 12 + 8 {
            return Err(integrity(format!("file truncated at {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(integrity("checksum mismatch (truncated or corrupted file)".into()));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let run = |r: &mut Reader| -> std::result::Result<Checkpoint, String> {
            let digest = r.u64()?;
            let json_len = r.u32()? as usize;
            let json = std::str::from_utf8(r.take(json_len)?).map_err(|e| e.to_string())?;
            let spec: ModelSpec = serde_json::from_str(json).map_err(|e| format!("spec: {e}"))?;
            if spec.digest() != digest {
                return Err("stored spec digest does not match stored spec".into());
            }
            let role = match r.u8()? {
                0 => Role::Student,
                1 => Role::Teacher,
                other => return Err(format!("unknown role tag {other}")),
            };
            let selection = match r.u8()? {
                0 => Selection::Best,
                1 => Selection::Last,
                other => return Err(format!("unknown selection tag {other}")),
            };
            let epoch = r.u32()? as usize;
            let tensors = read_tensors(r)?;
            let momentum = read_tensors(r)?;
            let n = r.u32()? as usize;
            let mut history = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let epoch = r.u32()? as usize;
                let wall_ms = r.u64()?;
                let mut f = [0f64; 5];
                for v in &mut f {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                history.push(EpochRecord {
                    epoch,
                    lr: f[0],
                    train_loss: f[1],
                    train_acc: f[2],
                    val_clean_acc: f[3],
                    val_robust_acc: f[4],
                    wall_ms,
                });
            }
            if r.pos != r.buf.len() {
                return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
            }
            let params = ParameterSet::from_tensors(spec, role, tensors).map_err(|e| e.to_string())?;
            Ok(Checkpoint {
                params,
                epoch,
                momentum,
                history,
                selection,
            })
        };
        run(&mut r).map_err(integrity)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks that the checkpoint was saved for `spec`.
    pub fn load_expecting(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Self::load(path)?;
        let (expected, found) = (spec.digest(), ckpt.params.spec().digest());
        if expected != found {
            return Err(Error::SpecMismatch {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(ckpt)
    }
}

fn write_tensors(out: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor<f32>>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(r: &mut Reader) -> std::result::Result<BTreeMap<String, Tensor<f32>>, String> {
    let n = r.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        map.insert(name, t);
    }
    Ok(map)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("unexpected end of data at byte {} (needed {n} more)", self.pos)
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
