//! Binary checkpoint format (`SAEC`).
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SAEC"
//!      4     4  format version (u32, currently 1)
//!      8     4  architecture tag (u32: 0 dense, 1 switch, 2 scale)
//!     12     4  scaling mode (u32: 0 off, 1 mean, 2 identity, 3 learned)
//!     16     4  flags (u32, bit 0 = b_pre added to the reconstruction)
//!     20     8  d_model (u64)
//!     28     8  n_experts (u64, 1 for dense)
//!     36     8  expert_width (u64, n_features for dense)
//!     44     8  e_active (u64, 1 for dense)
//!     52     8  k (u64)
//!     60     -  parameter tensors, little-endian f64, row-major, in the
//!               order of `SaeModel::tensors`
//! ```
//!
//! Dense tensors: `w_enc (n×d)`, `w_dec (d×n)`, `b_pre (d)`.
//! Routed tensors: `w_router (N×d)`, `b_router (d)`, `w_enc[i] (n×d)` for
//! each expert, `w_dec[i] (d×n)` for each expert, `b_pre (d)`, `omega (1)`,
//! then `a_lp[i] (n×d)` for each expert when the scaling mode is learned.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Architecture, DenseTopKSae, SaeModel, ScaleSae, ScaleShape, ScalingMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 60;
const FLAG_OUTPUT_BIAS: u32 = 1;

pub fn encode_checkpoint(model: &SaeModel) -> Vec<u8> {
    let total: usize = model.tensors().iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.architecture().tag().to_le_bytes());
    buf.extend_from_slice(&model.scaling_mode().tag().to_le_bytes());
    let output_bias = model.routed().map_or(true, |m| m.output_bias);
    let flags = if output_bias { FLAG_OUTPUT_BIAS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for dim in [
        model.d_model(),
        model.n_experts(),
        model.expert_width(),
        model.e_active(),
        model.k(),
    ] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for tensor in model.tensors() {
        for v in tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!(
                    "truncated: expected {n} bytes for {what}, {} available",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn dim(value: u64, offset: usize, what: &str) -> Result<usize> {
    usize::try_from(value)
        .ok()
        .filter(|&v| v <= 1 << 32)
        .ok_or_else(|| Error::parse(offset as u64, format!("implausible {what} {value}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SaeModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad magic, expected SAEC"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let arch_tag = cur.u32("architecture")?;
    let arch = Architecture::from_tag(arch_tag)
        .ok_or_else(|| Error::parse(8, format!("unknown architecture tag {arch_tag}")))?;
    let mode_tag = cur.u32("scaling mode")?;
    let mode = ScalingMode::from_tag(mode_tag)
        .ok_or_else(|| Error::parse(12, format!("unknown scaling mode tag {mode_tag}")))?;
    let flags = cur.u32("flags")?;
    if flags & !FLAG_OUTPUT_BIAS != 0 {
        return Err(Error::parse(16, format!("unknown flag bits {flags:#x}")));
    }
    let mut dims = [0usize; 5];
    for (i, (slot, name)) in dims
        .iter_mut()
        .zip(["d_model", "n_experts", "expert_width", "e_active", "k"])
        .enumerate()
    {
        let at = 20 + 8 * i;
        *slot = dim(cur.u64(name)?, at, name)?;
    }
    let [d_model, n_experts, expert_width, e_active, k] = dims;

    let mut model = match arch {
        Architecture::DenseTopK => {
            if n_experts != 1 || e_active != 1 || mode != ScalingMode::Off {
                return Err(Error::parse(28, "dense checkpoint with expert fields set"));
            }
            SaeModel::Dense(DenseTopKSae {
                w_enc: Matrix::zeros(expert_width, d_model),
                w_dec: Matrix::zeros(d_model, expert_width),
                b_pre: vec![0.0; d_model],
                k,
            })
        }
        Architecture::Switch | Architecture::Scale => {
            let shape = ScaleShape {
                d_model,
                n_experts,
                expert_width,
                e_active,
                k,
                scaling_mode: mode,
                output_bias: flags & FLAG_OUTPUT_BIAS != 0,
            };
            let m = ScaleSae::zeros(shape);
            if arch == Architecture::Switch {
                SaeModel::Switch(m)
            } else {
                SaeModel::Scale(m)
            }
        }
    };
    let names = model.tensor_names();
    for (tensor, name) in model.tensors_mut().into_iter().zip(names) {
        let raw = cur.take(8 * tensor.len(), &name)?;
        for (v, chunk) in tensor.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            cur.pos as u64,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    model
        .validate()
        .map_err(|e| Error::parse(HEADER_LEN as u64, e.to_string()))?;
    Ok(model)
}

pub fn write_checkpoint(model: &SaeModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<SaeModel> {
    decode_checkpoint(&fs::read(path)?)
}
