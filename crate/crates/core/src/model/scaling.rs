//! Feature scaling of expert encoders.
//!
//! Every mode splits an encoder `M` into a low-frequency part `L` and the
//! residual `M - L`, then amplifies the residual:
//!
//! ```text
//! M_hat = L + (1 + omega) * (M - L)
//! ```
//!
//! with `L` the broadcast row mean (`MeanBased`), the identity
//! (`IdentityBased`), or a trainable matrix (`Learned`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    Off,
    MeanBased,
    IdentityBased,
    Learned,
}

impl ScalingMode {
    pub const ALL: [ScalingMode; 4] = [
        ScalingMode::Off,
        ScalingMode::MeanBased,
        ScalingMode::IdentityBased,
        ScalingMode::Learned,
    ];

    pub fn tag(self) -> u32 {
        match self {
            ScalingMode::Off => 0,
            ScalingMode::MeanBased => 1,
            ScalingMode::IdentityBased => 2,
            ScalingMode::Learned => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMode::Off => "off",
            ScalingMode::MeanBased => "mean",
            ScalingMode::IdentityBased => "identity",
            ScalingMode::Learned => "learned",
        })
    }
}

impl FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(ScalingMode::Off),
            "mean" | "mean_based" => Ok(ScalingMode::MeanBased),
            "identity" | "identity_based" => Ok(ScalingMode::IdentityBased),
            "learned" | "learning_based" => Ok(ScalingMode::Learned),
            other => Err(Error::Config(format!("unknown scaling_mode '{other}'"))),
        }
    }
}

/// Effective encoder for one expert under the given scaling mode.
pub fn scaled_encoder(w_enc: &Matrix, omega: f64, mode: ScalingMode, a_lp: Option<&Matrix>) -> Result<Matrix> {
    let scale = 1.0 + omega;
    match mode {
        ScalingMode::Off => Ok(w_enc.clone()),
        ScalingMode::MeanBased => {
            let mean = w_enc.row_mean();
            let mut out = w_enc.clone();
            for r in 0..out.rows() {
                for (v, m) in out.row_mut(r).iter_mut().zip(&mean) {
                    *v = m + scale * (*v - m);
                }
            }
            Ok(out)
        }
        ScalingMode::IdentityBased => {
            if w_enc.rows() != w_enc.cols() {
                return Err(Error::IdentityRequiresSquare);
            }
            let n = w_enc.rows();
            Ok(Matrix::from_fn(n, n, |r, c| {
                let id = if r == c { 1.0 } else { 0.0 };
                id + scale * (w_enc.get(r, c) - id)
            }))
        }
        ScalingMode::Learned => {
            let a = a_lp.ok_or_else(|| Error::InvalidModel("learned scaling requires a low-pass matrix".into()))?;
            if a.shape() != w_enc.shape() {
                return Err(Error::ShapeMismatch {
                    op: "scaled_encoder",
                    left: w_enc.shape(),
                    right: a.shape(),
                });
            }
            let data = w_enc
                .data()
                .iter()
                .zip(a.data())
                .map(|(w, l)| l + scale * (w - l))
                .collect();
            Matrix::from_vec(w_enc.rows(), w_enc.cols(), data)
        }
    }
}

/// Pulls a gradient on the effective encoder back onto its inputs.
///
/// Returns `(d_w_enc, d_omega, d_a_lp)`.
pub(crate) fn scaled_encoder_backward(
    w_enc: &Matrix,
    omega: f64,
    mode: ScalingMode,
    a_lp: Option<&Matrix>,
    d_hat: &Matrix,
) -> (Matrix, f64, Option<Matrix>) {
    let scale = 1.0 + omega;
    match mode {
        ScalingMode::Off => (d_hat.clone(), 0.0, None),
        ScalingMode::MeanBased => {
            // M_hat_j = (1 + w) M_j - w * mean(M)
            let mean = w_enc.row_mean();
            let d_sum = d_hat.row_mean();
            let mut d_w = Matrix::zeros(w_enc.rows(), w_enc.cols());
            let mut d_omega = 0.0;
            for r in 0..w_enc.rows() {
                let src = d_hat.row(r);
                let w = w_enc.row(r);
                for c in 0..w_enc.cols() {
                    d_omega += src[c] * (w[c] - mean[c]);
                }
                for (c, dst) in d_w.row_mut(r).iter_mut().enumerate() {
                    *dst = scale * src[c] - omega * d_sum[c];
                }
            }
            (d_w, d_omega, None)
        }
        ScalingMode::IdentityBased => {
            let mut d_omega = 0.0;
            let mut d_w = d_hat.clone();
            for r in 0..w_enc.rows() {
                for c in 0..w_enc.cols() {
                    let id = if r == c { 1.0 } else { 0.0 };
                    d_omega += d_hat.get(r, c) * (w_enc.get(r, c) - id);
                }
            }
            d_w.data_mut().iter_mut().for_each(|v| *v *= scale);
            (d_w, d_omega, None)
        }
        ScalingMode::Learned => {
            let a = a_lp.expect("learned scaling without low-pass matrix");
            let mut d_omega = 0.0;
            let mut d_w = d_hat.clone();
            let mut d_a = d_hat.clone();
            for ((g, w), l) in d_hat.data().iter().zip(w_enc.data()).zip(a.data()) {
                d_omega += g * (w - l);
            }
            d_w.data_mut().iter_mut().for_each(|v| *v *= scale);
            d_a.data_mut().iter_mut().for_each(|v| *v *= -omega);
            (d_w, d_omega, Some(d_a))
        }
    }
}
