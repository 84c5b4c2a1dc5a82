//! Parameter containers and forward passes for the dense TopK, Switch and
//! Scale sparse autoencoders.
//!
//! All three architectures subtract `b_pre` before encoding and add it back
//! after decoding. A routed model computes
//!
//! ```text
//! p      = softmax(W_router (x - b_router))
//! T      = argtopk(W_router (x - b_router), e)
//! f_i    = W_hat_enc_i (x - b_pre)                  for i in T
//! z      = global TopK over the concatenation of f_i, positive values only
//! x_hat  = sum_{i in T} p_i W_dec_i z_i + b_pre
//! ```

pub mod checkpoint;
pub mod scaling;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, softmax, topk_select, Matrix};
use crate::rng::Rng;

pub use scaling::{scaled_encoder, ScalingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DenseTopK,
    Switch,
    Scale,
}

impl Architecture {
    pub fn tag(self) -> u32 {
        match self {
            Architecture::DenseTopK => 0,
            Architecture::Switch => 1,
            Architecture::Scale => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Architecture::DenseTopK),
            1 => Some(Architecture::Switch),
            2 => Some(Architecture::Scale),
            _ => None,
        }
    }

    pub fn is_routed(self) -> bool {
        !matches!(self, Architecture::DenseTopK)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::DenseTopK => "dense",
            Architecture::Switch => "switch",
            Architecture::Scale => "scale",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" | "topk" | "dense_topk" => Ok(Architecture::DenseTopK),
            "switch" => Ok(Architecture::Switch),
            "scale" => Ok(Architecture::Scale),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// One active latent: which expert it lives in, its index inside that
/// expert, and its (unmodified) pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub expert: usize,
    pub feature: usize,
    pub value: f64,
}

/// Active latents of a single token, ordered by global feature id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub entries: Vec<CodeEntry>,
}

impl SparseCode {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Global feature ids, `expert * expert_width + feature`.
    pub fn global_ids(&self, expert_width: usize) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| e.expert * expert_width + e.feature)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub selected_experts: Vec<usize>,
    pub router_probs: Vec<f64>,
    pub sparse_code: SparseCode,
    pub reconstruction: Vec<f64>,
}

/// Keeps the `k` largest strictly positive values.
fn positive_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut keep = topk_select(values, k);
    keep.retain(|&i| values[i] > 0.0);
    keep
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn check_len(op: &'static str, x: &[f64], d_model: usize) -> Result<()> {
    if x.len() != d_model {
        return Err(Error::ShapeMismatch {
            op,
            left: (d_model, 1),
            right: (x.len(), 1),
        });
    }
    Ok(())
}

/// `W_dec z` for a sparse `z` given as `(column, value)` pairs.
pub(crate) fn decode_sparse(w_dec: &Matrix, code: impl Iterator<Item = (usize, f64)>, out: &mut [f64]) {
    let n = w_dec.cols();
    let data = w_dec.data();
    for (col, value) in code {
        for (r, o) in out.iter_mut().enumerate() {
            *o += value * data[r * n + col];
        }
    }
}

fn isotropic(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal() * scale)
}

fn encoder_and_decoder(rng: &mut Rng, width: usize, d_model: usize) -> (Matrix, Matrix) {
    let w_enc = isotropic(rng, width, d_model, 1.0 / (d_model as f64).sqrt());
    let mut w_dec = w_enc.transpose();
    w_dec.normalize_columns();
    (w_enc, w_dec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTopKSae {
    /// `n_features × d_model`
    pub w_enc: Matrix,
    /// `d_model × n_features`
    pub w_dec: Matrix,
    pub b_pre: Vec<f64>,
    pub k: usize,
}

impl DenseTopKSae {
    pub fn init(d_model: usize, n_features: usize, k: usize, data_mean: &[f64], rng: &mut Rng) -> Result<Self> {
        check_len("init", data_mean, d_model)?;
        let (w_enc, w_dec) = encoder_and_decoder(rng, n_features, d_model);
        let model = Self {
            w_enc,
            w_dec,
            b_pre: data_mean.to_vec(),
            k,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn d_model(&self) -> usize {
        self.b_pre.len()
    }

    pub fn n_features(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n_features(), self.d_model());
        if self.w_enc.shape() != (n, d) || self.w_dec.shape() != (d, n) {
            return Err(Error::InvalidModel(format!(
                "dense shapes: w_enc {:?}, w_dec {:?}, d_model {d}",
                self.w_enc.shape(),
                self.w_dec.shape()
            )));
        }
        if self.k > n {
            return Err(Error::InvalidModel(format!("k = {} exceeds width {n}", self.k)));
        }
        Ok(())
    }

    /// `z = TopK(W_enc (x - b_pre))`, `x_hat = W_dec z + b_pre`.
    pub fn forward(&self, x: &[f64]) -> Result<(SparseCode, Vec<f64>)> {
        check_len("forward_dense", x, self.d_model())?;
        let u = sub(x, &self.b_pre);
        let pre = self.w_enc.matvec(&u)?;
        let entries: Vec<CodeEntry> = positive_topk(&pre, self.k)
            .into_iter()
            .map(|j| CodeEntry {
                expert: 0,
                feature: j,
                value: pre[j],
            })
            .collect();
        let mut x_hat = vec![0.0; self.d_model()];
        decode_sparse(&self.w_dec, entries.iter().map(|e| (e.feature, e.value)), &mut x_hat);
        axpy(1.0, &self.b_pre, &mut x_hat);
        Ok((SparseCode { entries }, x_hat))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSae {
    pub n_experts: usize,
    pub expert_width: usize,
    pub e_active: usize,
    pub k: usize,
    pub d_model: usize,
    /// `n_experts × d_model`
    pub w_router: Matrix,
    pub b_router: Vec<f64>,
    /// Per expert, `expert_width × d_model`.
    pub w_enc: Vec<Matrix>,
    /// Per expert, `d_model × expert_width`.
    pub w_dec: Vec<Matrix>,
    pub b_pre: Vec<f64>,
    pub omega: f64,
    pub scaling_mode: ScalingMode,
    /// Per-expert low-pass matrices; present iff `scaling_mode` is `Learned`.
    pub a_lp: Option<Vec<Matrix>>,
    /// Whether `b_pre` is added back after the weighted expert sum.
    pub output_bias: bool,
}

/// Dimensions and mode flags needed to build a routed model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleShape {
    pub d_model: usize,
    pub n_experts: usize,
    pub expert_width: usize,
    pub e_active: usize,
    pub k: usize,
    pub scaling_mode: ScalingMode,
    pub output_bias: bool,
}

impl ScaleSae {
    /// All-zero parameters with the given shape.
    pub fn zeros(shape: ScaleShape) -> Self {
        let ScaleShape {
            d_model: d,
            n_experts: n_exp,
            expert_width: w,
            ..
        } = shape;
        Self {
            n_experts: n_exp,
            expert_width: w,
            e_active: shape.e_active,
            k: shape.k,
            d_model: d,
            w_router: Matrix::zeros(n_exp, d),
            b_router: vec![0.0; d],
            w_enc: vec![Matrix::zeros(w, d); n_exp],
            w_dec: vec![Matrix::zeros(d, w); n_exp],
            b_pre: vec![0.0; d],
            omega: 0.0,
            scaling_mode: shape.scaling_mode,
            a_lp: (shape.scaling_mode == ScalingMode::Learned).then(|| vec![Matrix::zeros(w, d); n_exp]),
            output_bias: shape.output_bias,
        }
    }

    /// Standard initialization: isotropic encoders with scale `1/sqrt(d)`,
    /// decoders as column-normalized encoder transposes, both biases at the
    /// data mean, `omega = 0`, and learned low-pass matrices starting at the
    /// broadcast row mean of their encoder.
    pub fn init(shape: ScaleShape, data_mean: &[f64], rng: &mut Rng) -> Result<Self> {
        check_len("init", data_mean, shape.d_model)?;
        let mut m = Self::zeros(shape);
        let scale = 1.0 / (shape.d_model as f64).sqrt();
        m.w_router = isotropic(rng, shape.n_experts, shape.d_model, scale);
        m.b_router = data_mean.to_vec();
        m.b_pre = data_mean.to_vec();
        for i in 0..shape.n_experts {
            let (enc, dec) = encoder_and_decoder(rng, shape.expert_width, shape.d_model);
            m.w_enc[i] = enc;
            m.w_dec[i] = dec;
        }
        if let Some(a_lp) = m.a_lp.as_mut() {
            for (a, enc) in a_lp.iter_mut().zip(&m.w_enc) {
                let mean = enc.row_mean();
                *a = Matrix::from_fn(enc.rows(), enc.cols(), |_, c| mean[c]);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn shape(&self) -> ScaleShape {
        ScaleShape {
            d_model: self.d_model,
            n_experts: self.n_experts,
            expert_width: self.expert_width,
            e_active: self.e_active,
            k: self.k,
            scaling_mode: self.scaling_mode,
            output_bias: self.output_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n_exp, w) = (self.d_model, self.n_experts, self.expert_width);
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if n_exp == 0 || w == 0 || d == 0 {
            return bad(format!(
                "zero dimension: d_model {d}, n_experts {n_exp}, expert_width {w}"
            ));
        }
        if self.e_active < 1 || self.e_active > n_exp {
            return bad(format!("e_active = {} outside 1..={n_exp}", self.e_active));
        }
        if self.k > self.e_active * w {
            return bad(format!(
                "k = {} exceeds e_active × expert_width = {}",
                self.k,
                self.e_active * w
            ));
        }
        if self.w_router.shape() != (n_exp, d) || self.b_router.len() != d || self.b_pre.len() != d {
            return bad("router or bias shape mismatch".into());
        }
        if self.w_enc.len() != n_exp || self.w_dec.len() != n_exp {
            return bad("expert count mismatch".into());
        }
        if self.w_enc.iter().any(|m| m.shape() != (w, d)) || self.w_dec.iter().any(|m| m.shape() != (d, w)) {
            return bad("expert weight shape mismatch".into());
        }
        match (&self.a_lp, self.scaling_mode) {
            (Some(a), ScalingMode::Learned) => {
                if a.len() != n_exp || a.iter().any(|m| m.shape() != (w, d)) {
                    return bad("low-pass matrix shape mismatch".into());
                }
            }
            (None, ScalingMode::Learned) => return bad("learned scaling requires low-pass matrices".into()),
            (Some(_), _) => return bad("low-pass matrices present without learned scaling".into()),
            (None, _) => {}
        }
        if self.scaling_mode == ScalingMode::IdentityBased && w != d {
            return Err(Error::IdentityRequiresSquare);
        }
        Ok(())
    }

    /// Effective (scaled) encoder of one expert.
    pub fn effective_encoder(&self, expert: usize) -> Result<Cow<'_, Matrix>> {
        if self.scaling_mode == ScalingMode::Off {
            return Ok(Cow::Borrowed(&self.w_enc[expert]));
        }
        let a = self.a_lp.as_ref().map(|a| &a[expert]);
        scaled_encoder(&self.w_enc[expert], self.omega, self.scaling_mode, a).map(Cow::Owned)
    }

    pub fn effective_encoders(&self) -> Result<Vec<Cow<'_, Matrix>>> {
        (0..self.n_experts).map(|i| self.effective_encoder(i)).collect()
    }

    /// Router probabilities over all experts and the selected set `T`
    /// (ascending expert index).
    pub fn route(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        check_len("route", x, self.d_model)?;
        let logits = self.w_router.matvec(&sub(x, &self.b_router))?;
        let p = softmax(&logits)?;
        Ok((topk_select(&logits, self.e_active), p))
    }

    /// Global Top-K across the selected experts' pre-activations.
    pub fn encode_global_topk(&self, x: &[f64], selected: &[usize]) -> Result<SparseCode> {
        check_len("encode_global_topk", x, self.d_model)?;
        let encoders = selected
            .iter()
            .map(|&i| self.effective_encoder(i))
            .collect::<Result<Vec<_>>>()?;
        let u = sub(x, &self.b_pre);
        Ok(self.global_topk(selected, |slot| encoders[slot].as_ref(), &u))
    }

    fn global_topk<'m>(
        &self,
        selected: &[usize],
        encoder_of_slot: impl Fn(usize) -> &'m Matrix,
        u: &[f64],
    ) -> SparseCode {
        let w = self.expert_width;
        let mut pre = Vec::with_capacity(selected.len() * w);
        for slot in 0..selected.len() {
            let enc = encoder_of_slot(slot);
            pre.extend((0..w).map(|j| crate::linalg::dot(enc.row(j), u)));
        }
        let entries = positive_topk(&pre, self.k)
            .into_iter()
            .map(|flat| CodeEntry {
                expert: selected[flat / w],
                feature: flat % w,
                value: pre[flat],
            })
            .collect();
        SparseCode { entries }
    }

    fn forward_prepared(&self, encoders: &[Cow<'_, Matrix>], x: &[f64]) -> Result<ForwardTrace> {
        let (selected, probs) = self.route(x)?;
        let u = sub(x, &self.b_pre);
        let code = self.global_topk(&selected, |slot| encoders[selected[slot]].as_ref(), &u);
        let x_hat = self.decode(&selected, &probs, &code);
        Ok(ForwardTrace {
            selected_experts: selected,
            router_probs: probs,
            sparse_code: code,
            reconstruction: x_hat,
        })
    }

    fn decode(&self, selected: &[usize], probs: &[f64], code: &SparseCode) -> Vec<f64> {
        let mut acc = vec![0.0; self.d_model];
        let mut y = vec![0.0; self.d_model];
        for &i in selected {
            y.iter_mut().for_each(|v| *v = 0.0);
            let entries = code.entries.iter().filter(|e| e.expert == i);
            decode_sparse(&self.w_dec[i], entries.map(|e| (e.feature, e.value)), &mut y);
            axpy(probs[i], &y, &mut acc);
        }
        if self.output_bias {
            axpy(1.0, &self.b_pre, &mut acc);
        }
        acc
    }

    /// Full forward pass for one token.
    pub fn reconstruct(&self, x: &[f64]) -> Result<ForwardTrace> {
        let (selected, probs) = self.route(x)?;
        let code = self.encode_global_topk(x, &selected)?;
        let x_hat = self.decode(&selected, &probs, &code);
        Ok(ForwardTrace {
            selected_experts: selected,
            router_probs: probs,
            sparse_code: code,
            reconstruction: x_hat,
        })
    }

    /// Single-expert forward: `x_hat = p_i* E_i*(x - b_pre) + b_pre`.
    pub fn forward_switch(&self, x: &[f64]) -> Result<ForwardTrace> {
        if self.e_active != 1 {
            return Err(Error::NotSingleExpert(self.e_active));
        }
        self.reconstruct(x)
    }

    /// Decoder columns of all experts as rows, in global feature order.
    pub fn decoder_features(&self) -> Matrix {
        let w = self.expert_width;
        let mut out = Matrix::zeros(self.n_experts * w, self.d_model);
        for (i, dec) in self.w_dec.iter().enumerate() {
            for j in 0..w {
                for r in 0..self.d_model {
                    out.set(i * w + j, r, dec.get(r, j));
                }
            }
        }
        out
    }
}

/// Any of the three architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum SaeModel {
    Dense(DenseTopKSae),
    Switch(ScaleSae),
    Scale(ScaleSae),
}

impl SaeModel {
    pub fn architecture(&self) -> Architecture {
        match self {
            SaeModel::Dense(_) => Architecture::DenseTopK,
            SaeModel::Switch(_) => Architecture::Switch,
            SaeModel::Scale(_) => Architecture::Scale,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            SaeModel::Dense(m) => m.d_model(),
            SaeModel::Switch(m) | SaeModel::Scale(m) => m.d_model,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            SaeModel::Dense(m) => m.k,
            SaeModel::Switch(m) | SaeModel::Scale(m) => m.k,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.routed().map_or(1, |m| m.n_experts)
    }

    pub fn expert_width(&self) -> usize {
        match self {
            SaeModel::Dense(m) => m.n_features(),
            SaeModel::Switch(m) | SaeModel::Scale(m) => m.expert_width,
        }
    }

    pub fn e_active(&self) -> usize {
        self.routed().map_or(1, |m| m.e_active)
    }

    pub fn total_width(&self) -> usize {
        self.n_experts() * self.expert_width()
    }

    pub fn omega(&self) -> f64 {
        self.routed().map_or(0.0, |m| m.omega)
    }

    pub fn scaling_mode(&self) -> ScalingMode {
        self.routed().map_or(ScalingMode::Off, |m| m.scaling_mode)
    }

    pub fn b_pre(&self) -> &[f64] {
        match self {
            SaeModel::Dense(m) => &m.b_pre,
            SaeModel::Switch(m) | SaeModel::Scale(m) => &m.b_pre,
        }
    }

    pub fn routed(&self) -> Option<&ScaleSae> {
        match self {
            SaeModel::Dense(_) => None,
            SaeModel::Switch(m) | SaeModel::Scale(m) => Some(m),
        }
    }

    pub fn routed_mut(&mut self) -> Option<&mut ScaleSae> {
        match self {
            SaeModel::Dense(_) => None,
            SaeModel::Switch(m) | SaeModel::Scale(m) => Some(m),
        }
    }

    /// Wraps a routed model under the given tag, enforcing the Switch
    /// constraints (single expert, no scaling).
    pub fn from_routed(arch: Architecture, model: ScaleSae) -> Result<Self> {
        model.validate()?;
        match arch {
            Architecture::Switch => {
                if model.e_active != 1 || model.scaling_mode != ScalingMode::Off {
                    return Err(Error::InvalidModel(
                        "switch requires e_active = 1 and scaling_mode = off".into(),
                    ));
                }
                Ok(SaeModel::Switch(model))
            }
            Architecture::Scale => Ok(SaeModel::Scale(model)),
            Architecture::DenseTopK => Err(Error::InvalidModel("dense model is not routed".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SaeModel::Dense(m) => m.validate(),
            SaeModel::Switch(m) => {
                if m.e_active != 1 || m.scaling_mode != ScalingMode::Off {
                    return Err(Error::InvalidModel(
                        "switch requires e_active = 1 and scaling_mode = off".into(),
                    ));
                }
                m.validate()
            }
            SaeModel::Scale(m) => m.validate(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        match self {
            SaeModel::Dense(m) => {
                let (code, x_hat) = m.forward(x)?;
                Ok(ForwardTrace {
                    selected_experts: vec![0],
                    router_probs: vec![1.0],
                    sparse_code: code,
                    reconstruction: x_hat,
                })
            }
            SaeModel::Switch(m) => m.forward_switch(x),
            SaeModel::Scale(m) => m.reconstruct(x),
        }
    }

    /// Forward pass over a row-major batch (`n_tokens × d_model`), parallel
    /// over tokens. Output order matches input order.
    pub fn forward_batch(&self, tokens: &[f64]) -> Result<Vec<ForwardTrace>> {
        let d = self.d_model();
        if d == 0 || tokens.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                left: (0, d),
                right: (tokens.len(), 1),
            });
        }
        match self {
            SaeModel::Dense(_) => tokens.par_chunks(d).map(|x| self.forward(x)).collect(),
            SaeModel::Switch(m) | SaeModel::Scale(m) => {
                let encoders = m.effective_encoders()?;
                tokens.par_chunks(d).map(|x| m.forward_prepared(&encoders, x)).collect()
            }
        }
    }

    /// Decoder directions, one row per latent, in global feature order.
    pub fn decoder_features(&self) -> Matrix {
        match self {
            SaeModel::Dense(m) => m.w_dec.transpose(),
            SaeModel::Switch(m) | SaeModel::Scale(m) => m.decoder_features(),
        }
    }

    /// Every trainable tensor, flattened, in declaration order:
    /// dense `w_enc, w_dec, b_pre`; routed `w_router, b_router, w_enc[..],
    /// w_dec[..], b_pre, omega, a_lp[..]`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            SaeModel::Dense(m) => vec![m.w_enc.data(), m.w_dec.data(), &m.b_pre],
            SaeModel::Switch(m) | SaeModel::Scale(m) => {
                let mut out: Vec<&[f64]> = vec![m.w_router.data(), &m.b_router];
                out.extend(m.w_enc.iter().map(|x| x.data()));
                out.extend(m.w_dec.iter().map(|x| x.data()));
                out.push(&m.b_pre);
                out.push(std::slice::from_ref(&m.omega));
                if let Some(a) = &m.a_lp {
                    out.extend(a.iter().map(|x| x.data()));
                }
                out
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            SaeModel::Dense(m) => vec![m.w_enc.data_mut(), m.w_dec.data_mut(), &mut m.b_pre],
            SaeModel::Switch(m) | SaeModel::Scale(m) => {
                let mut out: Vec<&mut [f64]> = vec![m.w_router.data_mut(), &mut m.b_router];
                out.extend(m.w_enc.iter_mut().map(|x| x.data_mut()));
                out.extend(m.w_dec.iter_mut().map(|x| x.data_mut()));
                out.push(&mut m.b_pre);
                out.push(std::slice::from_mut(&mut m.omega));
                if let Some(a) = &mut m.a_lp {
                    out.extend(a.iter_mut().map(|x| x.data_mut()));
                }
                out
            }
        }
    }

    /// Names matching [`SaeModel::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        match self {
            SaeModel::Dense(_) => vec!["w_enc".into(), "w_dec".into(), "b_pre".into()],
            SaeModel::Switch(m) | SaeModel::Scale(m) => {
                let mut out = vec!["w_router".to_string(), "b_router".to_string()];
                out.extend((0..m.n_experts).map(|i| format!("w_enc[{i}]")));
                out.extend((0..m.n_experts).map(|i| format!("w_dec[{i}]")));
                out.push("b_pre".into());
                out.push("omega".into());
                if m.a_lp.is_some() {
                    out.extend((0..m.n_experts).map(|i| format!("a_lp[{i}]")));
                }
                out
            }
        }
    }

    pub fn decoders_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            SaeModel::Dense(m) => vec![&mut m.w_dec],
            SaeModel::Switch(m) | SaeModel::Scale(m) => m.w_dec.iter_mut().collect(),
        }
    }

    pub fn decoders(&self) -> Vec<&Matrix> {
        match self {
            SaeModel::Dense(m) => vec![&m.w_dec],
            SaeModel::Switch(m) | SaeModel::Scale(m) => m.w_dec.iter().collect(),
        }
    }

    pub fn renormalize_decoders(&mut self) {
        for dec in self.decoders_mut() {
            dec.normalize_columns();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
