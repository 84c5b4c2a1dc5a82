//! Activation batches and the `SAEA` activation file format.
//!
//! ```text
//! offset          size  field
//!      0             4  magic "SAEA"
//!      4             4  version (u32, = 1)
//!      8             8  n_tokens (u64)
//!     16             4  d_model (u32)
//!     20             4  flags (u32, bit 0 = labels present; other bits must be 0)
//!     24   4·n·d_model  activations, little-endian f32, row-major
//!      …             …  if labels: per token, u32 byte length + UTF-8 bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTIVATION_MAGIC: &[u8; 4] = b"SAEA";
pub const ACTIVATION_VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;
const HEADER_LEN: u64 = 24;

/// `n_tokens × d_model` activations, row-major, held at 64-bit precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationBatch {
    pub d_model: usize,
    pub data: Vec<f64>,
    pub labels: Option<Vec<String>>,
}

impl ActivationBatch {
    pub fn new(d_model: usize, data: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        if d_model == 0 || data.len() % d_model != 0 {
            return Err(Error::ShapeMismatch {
                op: "ActivationBatch::new",
                left: (0, d_model),
                right: (data.len(), 1),
            });
        }
        if let Some(l) = &labels {
            if l.len() != data.len() / d_model {
                return Err(Error::ShapeMismatch {
                    op: "ActivationBatch::new labels",
                    left: (data.len() / d_model, 1),
                    right: (l.len(), 1),
                });
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite activation".into()));
        }
        Ok(Self { d_model, data, labels })
    }

    pub fn n_tokens(&self) -> usize {
        self.data.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d_model)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d_model];
        for x in self.tokens() {
            for (a, b) in m.iter_mut().zip(x) {
                *a += b;
            }
        }
        let n = self.n_tokens().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Rows `range`, labels included.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ActivationBatch {
        ActivationBatch {
            d_model: self.d_model,
            data: self.data[range.start * self.d_model..range.end * self.d_model].to_vec(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }

    /// Keeps the tokens whose label satisfies `keep`, in order.
    pub fn token_subset(&self, keep: impl Fn(&str) -> bool) -> Result<ActivationBatch> {
        let labels = self.labels.as_ref().ok_or(Error::NoLabels)?;
        let mut data = Vec::new();
        let mut kept = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            if keep(label) {
                data.extend_from_slice(self.token(i));
                kept.push(label.clone());
            }
        }
        Ok(ActivationBatch {
            d_model: self.d_model,
            data,
            labels: Some(kept),
        })
    }

    /// Values quantized to `f32`, the on-disk precision.
    pub fn quantized(&self) -> ActivationBatch {
        ActivationBatch {
            d_model: self.d_model,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            labels: self.labels.clone(),
        }
    }
}

pub fn encode_activations(batch: &ActivationBatch) -> Result<Vec<u8>> {
    let d = u32::try_from(batch.d_model)
        .map_err(|_| Error::InvalidModel(format!("d_model {} exceeds u32", batch.d_model)))?;
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 4 * batch.data.len());
    buf.extend_from_slice(ACTIVATION_MAGIC);
    buf.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
    buf.extend_from_slice(&(batch.n_tokens() as u64).to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    let flags = if batch.labels.is_some() { FLAG_LABELS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for &v in &batch.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = &batch.labels {
        for l in labels {
            let len =
                u32::try_from(l.len()).map_err(|_| Error::InvalidModel("label longer than u32::MAX bytes".into()))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(l.as_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {avail} available"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_activations(bytes: &[u8]) -> Result<ActivationBatch> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != ACTIVATION_MAGIC {
        return Err(Error::parse(0, "bad magic, expected SAEA"));
    }
    let version = r.u32("version")?;
    if version != ACTIVATION_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let n_tokens = u64::from_le_bytes(r.take(8, "n_tokens")?.try_into().unwrap());
    let d_model = r.u32("d_model")? as usize;
    let flags = r.u32("flags")?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::parse(20, format!("unknown flag bits {flags:#x}")));
    }
    if d_model == 0 {
        return Err(Error::parse(16, "d_model is zero"));
    }
    let count = usize::try_from(n_tokens)
        .ok()
        .and_then(|n| n.checked_mul(d_model))
        .and_then(|c| c.checked_mul(4).map(|_| c))
        .ok_or_else(|| Error::parse(8, format!("implausible n_tokens {n_tokens}")))?;
    let raw = r.take(4 * count, "activations")?;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(HEADER_LEN + 4 * i as u64, "non-finite activation"));
        }
        data.push(v as f64);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let mut out = Vec::with_capacity(n_tokens as usize);
        for _ in 0..n_tokens {
            let len = r.u32("label length")? as usize;
            let at = r.pos as u64;
            let s = std::str::from_utf8(r.take(len, "label")?)
                .map_err(|e| Error::parse(at, format!("label is not UTF-8: {e}")))?;
            out.push(s.to_string());
        }
        Some(out)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::parse(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(ActivationBatch { d_model, data, labels })
}

pub fn write_activations(batch: &ActivationBatch, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_activations(batch)?)?;
    Ok(())
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    decode_activations(&fs::read(path)?)
}
