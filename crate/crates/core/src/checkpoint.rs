//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "HAMURCKP"
//! version     u32
//! config_hash 32 bytes SHA-256 of the config text
//! config_len  u64, then config_len bytes of TOML (the model config)
//! records     u32 count, then per record:
//!             u32 name_len, name bytes, u32 rank, rank × u64 dims,
//!             product(dims) × f64
//! ```
//!
//! Records hold every trainable parameter in store order followed by the
//! running mean and variance of every adapter.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HamurModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HAMURCKP";
pub const VERSION: u32 = 1;

pub fn config_text(config: &ModelConfig) -> String {
    toml::to_string(config).expect("model config serializes")
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(config: &ModelConfig) -> String {
    hex(&Sha256::digest(config_text(config).as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn records(model: &HamurModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    for (d, cells) in model.adapters.iter().enumerate() {
        for (cell, site) in cells.iter().zip(&model.config.adapter.sites) {
            let prefix = format!("adapter.d{}.site{site}", d + 1);
            out.push((format!("{prefix}.running_mean"), &cell.norm.running_mean));
            out.push((format!("{prefix}.running_var"), &cell.norm.running_var));
        }
    }
    out
}

pub fn to_bytes(model: &HamurModel) -> Vec<u8> {
    let text = config_text(&model.config);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(text.as_bytes()));
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    let recs = records(model);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in recs {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save(model: &HamurModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint. When `expected` is given, a checkpoint written for a
/// different model config is refused.
pub fn from_bytes(buf: &[u8], expected: Option<&ModelConfig>) -> Result<HamurModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let stored_hash = hex(r.take(32, "config hash")?);
    let len = r.u64("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let actual = hex(&Sha256::digest(text.as_bytes()));
    if actual != stored_hash {
        return Err(Error::Checkpoint("config text does not match its stored hash".into()));
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != stored_hash {
            return Err(Error::ConfigHash {
                found: stored_hash,
                expected: want,
            });
        }
    }
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = HamurModel::new(config, 0)?;
    let count = r.u32("record count")? as usize;
    let n_params = model.store.len();
    let n_stats: usize = model.adapters.iter().map(|c| 2 * c.len()).sum();
    if count != n_params + n_stats {
        return Err(Error::Checkpoint(format!(
            "{count} records, config implies {}",
            n_params + n_stats
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("record dim")? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: shape {shape:?} overflows")))?;
        let raw = r.take(bytes, "record data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let expected_names: Vec<(String, Vec<usize>)> =
        records(&model).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for ((name, t), (want, shape)) in tensors.iter().zip(&expected_names) {
        if name != want || t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "record `{name}` {:?} where `{want}` {shape:?} was expected",
                t.shape()
            )));
        }
    }
    let mut it = tensors.into_iter().map(|(_, t)| t);
    for id in model.store.ids().collect::<Vec<_>>() {
        *model.store.get_mut(id) = it.next().expect("count checked");
    }
    for cells in &mut model.adapters {
        for cell in cells {
            cell.norm.running_mean = it.next().expect("count checked");
            cell.norm.running_var = it.next().expect("count checked");
        }
    }
    Ok(model)
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<HamurModel> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&buf, expected)
}
