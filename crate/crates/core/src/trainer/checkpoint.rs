//! `TFCK` checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! "TFCK" u32 version
//! u32 n, n bytes   configuration JSON {"model":…,"train":…}
//! 32 bytes         SHA-256 of the canonical configuration JSON
//! u32 epoch, f64 validation loss
//! u32 P, then P × (u16 name length, name, u32 rows, u32 cols, f64 values)
//! u64 optimizer step, f64 weight decay, first moments, second moments
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Parameters<S>,
    pub optimizer: AdamW<S>,
    /// Completed epochs.
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    train: TrainConfig,
}

fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json maps are ordered by key, so this is independent of field order.
    let v = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(v.to_string())
}

fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Hex SHA-256 of the canonical JSON form of the two configurations.
pub fn config_fingerprint(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let json = canonical_json(&ConfigBlock {
        model: model.clone(),
        train: train.clone(),
    })?;
    Ok(digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn fingerprint(&self) -> Result<String> {
        config_fingerprint(&self.model, &self.train)
    }

    pub fn cast<T: Scalar>(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            params: self.params.cast(),
            optimizer: self.optimizer.cast(),
            epoch: self.epoch,
            val_loss: self.val_loss,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values<S: Scalar>(out: &mut Vec<u8>, m: &Matrix<S>) {
    for v in m.data() {
        out.extend_from_slice(&v.widen().to_le_bytes());
    }
}

pub fn write_checkpoint<S: Scalar>(ck: &Checkpoint<S>) -> Result<Vec<u8>> {
    let json = canonical_json(&ConfigBlock {
        model: ck.model.clone(),
        train: ck.train.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&digest(&json));
    put_u32(&mut out, ck.epoch)?;
    out.extend_from_slice(&ck.val_loss.to_le_bytes());
    put_u32(&mut out, ck.params.len())?;
    for (name, m) in ck.params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Validation(format!("parameter name {name} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        put_values(&mut out, m);
    }
    out.extend_from_slice(&ck.optimizer.step.to_le_bytes());
    out.extend_from_slice(&ck.optimizer.weight_decay.to_le_bytes());
    for m in ck.optimizer.m.iter().chain(&ck.optimizer.v) {
        put_values(&mut out, m);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn matrix<S: Scalar>(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix<S>> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::parse(self.pos as u64, format!("{what} shape {rows}x{cols} too large")))?;
        let bytes = self.take(8 * n, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn read_checkpoint<S: Scalar>(buf: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad magic, not a TFCK checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = r.u32("config length")?;
    let json_at = r.pos;
    let json = std::str::from_utf8(r.take(json_len, "config")?)
        .map_err(|e| Error::parse(json_at as u64, format!("config is not UTF-8: {e}")))?;
    let block: ConfigBlock = serde_json::from_str(json)
        .map_err(|e| Error::parse(json_at as u64, format!("config JSON: {e}")))?;
    let digest_at = r.pos;
    if r.take(32, "config digest")? != digest(json) {
        return Err(Error::parse(digest_at as u64, "config digest does not match"));
    }
    let epoch = r.u32("epoch")?;
    let val_loss = r.f64("validation loss")?;
    let count = r.u32("parameter count")?;
    let mut named = Vec::new();
    for _ in 0..count.min(1 << 20) {
        let len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(name_at as u64, "parameter name is not UTF-8"))?
            .to_string();
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let m = r.matrix::<S>(rows, cols, &name)?;
        named.push((name, m));
    }
    let params = Parameters::from_named(named)?;
    params
        .check_config(&block.model)
        .map_err(|e| Error::parse(r.pos as u64, format!("parameters do not fit config: {e}")))?;
    let step = r.u64("optimizer step")?;
    let weight_decay = r.f64("weight decay")?;
    let mut moments = Vec::with_capacity(2 * params.len());
    for _ in 0..2 {
        for (name, p) in params.iter() {
            moments.push(r.matrix::<S>(p.rows(), p.cols(), name)?);
        }
    }
    if r.pos != buf.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after checkpoint"));
    }
    let v = moments.split_off(params.len());
    Ok(Checkpoint {
        model: block.model,
        train: block.train,
        params,
        optimizer: AdamW {
            weight_decay,
            step,
            m: moments,
            v,
        },
        epoch,
        val_loss,
    })
}

pub fn save_checkpoint<S: Scalar>(path: &Path, ck: &Checkpoint<S>) -> Result<()> {
    std::fs::write(path, write_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Loads a checkpoint that must have been produced under the configuration
/// with the given fingerprint.
pub fn load_checkpoint_checked<S: Scalar>(path: &Path, fingerprint: &str) -> Result<Checkpoint<S>> {
    let ck = load_checkpoint(path)?;
    let found = ck.fingerprint()?;
    if found != fingerprint {
        return Err(Error::Version(format!(
            "{}: configuration fingerprint {found} does not match {fingerprint}",
            path.display()
        )));
    }
    Ok(ck)
}
