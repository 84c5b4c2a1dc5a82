//! Synthetic superposition data with a known dictionary.
//!
//! Each token draws a sparse nonnegative code over `n_true_features`
//! unit-norm atoms living in `d_model < n_true_features` dimensions and sums
//! the weighted atoms, plus isotropic Gaussian noise.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::activations::ActivationBatch;
use crate::error::{Error, Result};
use crate::linalg::{axpy, norm, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDistribution {
    /// Uniform on `(0, 1]`.
    UniformUnit,
    /// Exponential with unit mean.
    Exponential,
}

impl FromStr for ValueDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "uniform_unit" => Ok(ValueDistribution::UniformUnit),
            "exponential" | "exp" => Ok(ValueDistribution::Exponential),
            other => Err(Error::Config(format!("unknown value distribution '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d_model: usize,
    pub n_true_features: usize,
    /// Expected number of active atoms per token.
    pub feature_sparsity: f64,
    pub value_distribution: ValueDistribution,
    pub noise_std: f64,
    pub n_tokens: usize,
    pub seed: u64,
    /// When nonzero, atoms are split into this many contiguous groups; each
    /// token picks one group and draws its atoms from it only. Tokens are
    /// labelled `g<group>`.
    pub concept_groups: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_true_features: 128,
            feature_sparsity: 4.0,
            value_distribution: ValueDistribution::UniformUnit,
            noise_std: 0.01,
            n_tokens: 50_000,
            seed: 0,
            concept_groups: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_true_features == 0 {
            return bad("d_model and n_true_features must be >= 1".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        let pool = if self.concept_groups > 0 {
            if self.n_true_features % self.concept_groups != 0 {
                return bad("concept_groups must divide n_true_features".into());
            }
            self.n_true_features / self.concept_groups
        } else {
            self.n_true_features
        };
        if !(self.feature_sparsity >= 0.0) || self.feature_sparsity > pool as f64 {
            return bad(format!(
                "feature_sparsity {} outside [0, {pool}]",
                self.feature_sparsity
            ));
        }
        Ok(())
    }

    /// Bernoulli rate per eligible atom.
    pub fn activation_probability(&self) -> f64 {
        let pool = if self.concept_groups > 0 {
            self.n_true_features / self.concept_groups
        } else {
            self.n_true_features
        };
        self.feature_sparsity / pool as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `n_true_features × d_model`, unit-norm rows.
    pub dictionary: Matrix,
    /// Per token, `(atom, coefficient)` with positive coefficients in
    /// ascending atom order.
    pub codes: Vec<Vec<(usize, f64)>>,
}

/// Dictionary with isotropic unit-norm rows.
pub fn random_dictionary(n: usize, d: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for r in 0..n {
        loop {
            let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let len = norm(&row);
            if len > 1e-12 {
                m.row_mut(r).iter_mut().zip(&row).for_each(|(o, v)| *o = v / len);
                break;
            }
        }
    }
    m
}

/// `Σ c_j · dictionary_j` for one sparse code.
pub fn compose(dictionary: &Matrix, code: &[(usize, f64)]) -> Vec<f64> {
    let mut x = vec![0.0; dictionary.cols()];
    for &(j, c) in code {
        axpy(c, dictionary.row(j), &mut x);
    }
    x
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(ActivationBatch, GroundTruth)> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut dict_rng = root.fork(0);
    let mut code_rng = root.fork(1);
    let mut noise_rng = root.fork(2);

    let dictionary = random_dictionary(spec.n_true_features, spec.d_model, &mut dict_rng);
    let p = spec.activation_probability();
    let group_size = if spec.concept_groups > 0 {
        spec.n_true_features / spec.concept_groups
    } else {
        spec.n_true_features
    };

    let mut data = Vec::with_capacity(spec.n_tokens * spec.d_model);
    let mut codes = Vec::with_capacity(spec.n_tokens);
    let mut labels = (spec.concept_groups > 0).then(|| Vec::with_capacity(spec.n_tokens));
    for _ in 0..spec.n_tokens {
        let group = if spec.concept_groups > 0 {
            code_rng.below(spec.concept_groups as u64) as usize
        } else {
            0
        };
        let mut code = Vec::new();
        for j in group * group_size..(group + 1) * group_size {
            if code_rng.uniform() < p {
                let c = match spec.value_distribution {
                    ValueDistribution::UniformUnit => code_rng.uniform_open0(),
                    ValueDistribution::Exponential => code_rng.exponential(),
                };
                code.push((j, c));
            }
        }
        let mut x = compose(&dictionary, &code);
        if spec.noise_std > 0.0 {
            x.iter_mut().for_each(|v| *v += spec.noise_std * noise_rng.normal());
        }
        data.extend_from_slice(&x);
        codes.push(code);
        if let Some(l) = labels.as_mut() {
            l.push(format!("g{group}"));
        }
    }
    let batch = ActivationBatch::new(spec.d_model, data, labels)?;
    Ok((batch, GroundTruth { dictionary, codes }))
}

/// Ground-truth file (`SAEG`): magic, u32 version, u64 n_true_features,
/// u64 d_model, dictionary as little-endian f64 row-major, u64 n_tokens, then
/// per token a u32 count followed by `(u32 atom, f64 coefficient)` pairs.
pub const TRUTH_MAGIC: &[u8; 4] = b"SAEG";

pub fn encode_truth(truth: &GroundTruth) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRUTH_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(truth.dictionary.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(truth.dictionary.cols() as u64).to_le_bytes());
    for v in truth.dictionary.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(truth.codes.len() as u64).to_le_bytes());
    for code in &truth.codes {
        buf.extend_from_slice(&(code.len() as u32).to_le_bytes());
        for &(j, c) in code {
            buf.extend_from_slice(&(j as u32).to_le_bytes());
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf
}

pub fn decode_truth(bytes: &[u8]) -> Result<GroundTruth> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::parse(pos as u64, format!("truncated: need {n} bytes")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != TRUTH_MAGIC {
        return Err(Error::parse(0, "bad magic, expected SAEG"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != 1 {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| Error::parse(8, "implausible dictionary shape"))?;
    let dict: Vec<f64> = take(8 * count)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let n_tokens = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut codes = Vec::with_capacity(n_tokens.min(bytes.len()));
    for _ in 0..n_tokens {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut code = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let j = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let c = f64::from_le_bytes(take(8)?.try_into().unwrap());
            code.push((j, c));
        }
        codes.push(code);
    }
    if pos != bytes.len() {
        return Err(Error::parse(pos as u64, "trailing bytes"));
    }
    Ok(GroundTruth {
        dictionary: Matrix::from_vec(rows, cols, dict)?,
        codes,
    })
}

pub fn write_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_truth(truth))?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    decode_truth(&fs::read(path)?)
}
