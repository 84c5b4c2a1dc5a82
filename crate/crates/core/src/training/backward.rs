//! Exact gradients of `L = recon + alpha · aux` for every trainable tensor.
//!
//! Differentiation conventions: the Top-K mask and the expert set `T` are
//! constants (gradient flows through the active latents only), router
//! gradients enter through the `p_i` multipliers of the reconstruction and
//! through the batch-mean probabilities of the auxiliary term, while the
//! selection fractions `f_i` are constants. `omega` and the learned low-pass
//! matrices receive gradient through every effective encoder row that
//! produced an active latent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::model::scaling::scaled_encoder_backward;
use crate::model::{ForwardTrace, SaeModel, ScaleSae};
use crate::training::loss::{aux_loss, routing_stats, RoutingStats};

/// Tokens per reduction chunk. Fixed so the summation order, and therefore
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 64;

/// Gradients with exactly the parameter layout of the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(SaeModel);

impl GradientSet {
    pub fn zeros_like(model: &SaeModel) -> Self {
        let mut g = model.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        GradientSet(g)
    }

    /// Same order as [`SaeModel::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.tensors_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.tensor_names()
    }

    /// The gradient container viewed as a model-shaped value.
    pub fn as_model(&self) -> &SaeModel {
        &self.0
    }

    pub fn omega(&self) -> f64 {
        self.0.omega()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    /// Removes the radial component of every decoder-column gradient, so a
    /// step moves each unit-norm column along the sphere.
    pub fn project_decoder_tangent(&mut self, model: &SaeModel) {
        for (g, w) in self.0.decoders_mut().into_iter().zip(model.decoders()) {
            let (rows, cols) = w.shape();
            for c in 0..cols {
                let mut gw = 0.0;
                let mut ww = 0.0;
                for r in 0..rows {
                    gw += g.get(r, c) * w.get(r, c);
                    ww += w.get(r, c) * w.get(r, c);
                }
                if ww == 0.0 {
                    continue;
                }
                let s = gw / ww;
                for r in 0..rows {
                    g.set(r, c, g.get(r, c) - s * w.get(r, c));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub aux: f64,
    pub total: f64,
    pub mean_l0: f64,
    /// `None` for dense models.
    pub routing: Option<RoutingStats>,
}

fn check_traces(model: &SaeModel, tokens: &[f64], traces: &[ForwardTrace]) -> Result<usize> {
    let d = model.d_model();
    if tokens.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if tokens.len() % d != 0 {
        return Err(Error::TraceMismatch(format!(
            "batch length {} is not a multiple of d_model {d}",
            tokens.len()
        )));
    }
    let n = tokens.len() / d;
    if traces.len() != n {
        return Err(Error::TraceMismatch(format!("{} traces for {n} tokens", traces.len())));
    }
    if let Some(bad) = traces.iter().position(|t| t.reconstruction.len() != d) {
        return Err(Error::TraceMismatch(format!(
            "trace {bad} has wrong reconstruction length"
        )));
    }
    Ok(n)
}

/// Loss of a batch given its forward traces.
pub fn batch_loss(model: &SaeModel, tokens: &[f64], traces: &[ForwardTrace], alpha: f64) -> Result<LossBreakdown> {
    let n = check_traces(model, tokens, traces)?;
    let d = model.d_model();
    let mut sse = 0.0;
    for (x, t) in tokens.chunks(d).zip(traces) {
        sse += x
            .iter()
            .zip(&t.reconstruction)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let recon = sse / (n * d) as f64;
    let mean_l0 = traces.iter().map(|t| t.sparse_code.len()).sum::<usize>() as f64 / n as f64;
    let (aux, routing) = match model.routed() {
        Some(m) => {
            let stats = routing_stats(traces, m.n_experts, m.e_active)?;
            (aux_loss(&stats.f, &stats.mean_probs, m.n_experts)?, Some(stats))
        }
        None => (0.0, None),
    };
    Ok(LossBreakdown {
        recon,
        aux,
        total: recon + alpha * aux,
        mean_l0,
        routing,
    })
}

/// Gradients of the batch loss. `traces` must come from `model.forward_batch`
/// on exactly these tokens.
pub fn backward(
    model: &SaeModel,
    tokens: &[f64],
    traces: &[ForwardTrace],
    alpha: f64,
) -> Result<(GradientSet, LossBreakdown)> {
    let loss = batch_loss(model, tokens, traces, alpha)?;
    let grads = match model {
        SaeModel::Dense(m) => dense_backward(m, tokens, traces),
        SaeModel::Switch(m) | SaeModel::Scale(m) => {
            let f = &loss.routing.as_ref().expect("routed model has stats").f;
            routed_backward(m, tokens, traces, alpha, f)?
        }
    };
    let mut out = GradientSet::zeros_like(model);
    match (&mut out.0, grads) {
        (SaeModel::Dense(g), Grads::Dense(w_enc, w_dec, b_pre)) => {
            g.w_enc = w_enc;
            g.w_dec = w_dec;
            g.b_pre = b_pre;
        }
        (SaeModel::Switch(g) | SaeModel::Scale(g), Grads::Routed(r)) => {
            g.w_router = r.w_router;
            g.b_router = r.b_router;
            g.w_enc = r.w_enc;
            g.w_dec = r.w_dec;
            g.b_pre = r.b_pre;
            g.omega = r.omega;
            g.a_lp = r.a_lp;
        }
        _ => unreachable!("gradient layout follows the model"),
    }
    Ok((out, loss))
}

enum Grads {
    Dense(Matrix, Matrix, Vec<f64>),
    Routed(RoutedGrads),
}

struct RoutedGrads {
    w_router: Matrix,
    b_router: Vec<f64>,
    w_enc: Vec<Matrix>,
    w_dec: Vec<Matrix>,
    b_pre: Vec<f64>,
    omega: f64,
    a_lp: Option<Vec<Matrix>>,
}

/// Reduces per-chunk accumulators in chunk order.
fn chunked<A: Send>(
    n_tokens: usize,
    make: impl Fn() -> A + Sync,
    token: impl Fn(&mut A, usize) + Sync,
    merge: impl Fn(&mut A, A),
) -> A {
    let n_chunks = n_tokens.div_ceil(CHUNK);
    let parts: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = make();
            for t in c * CHUNK..((c + 1) * CHUNK).min(n_tokens) {
                token(&mut acc, t);
            }
            acc
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut total = iter.next().unwrap_or_else(&make);
    for p in iter {
        merge(&mut total, p);
    }
    total
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    axpy(1.0, src, dst);
}

fn dense_backward(m: &crate::model::DenseTopKSae, tokens: &[f64], traces: &[ForwardTrace]) -> Grads {
    let d = m.d_model();
    let n_feat = m.n_features();
    let n_tokens = traces.len();
    let scale = 2.0 / (n_tokens * d) as f64;

    struct Acc {
        w_enc: Matrix,
        w_dec: Matrix,
        b_pre: Vec<f64>,
    }
    let acc = chunked(
        n_tokens,
        || Acc {
            w_enc: Matrix::zeros(n_feat, d),
            w_dec: Matrix::zeros(d, n_feat),
            b_pre: vec![0.0; d],
        },
        |acc, t| {
            let x = &tokens[t * d..(t + 1) * d];
            let trace = &traces[t];
            let g: Vec<f64> = trace
                .reconstruction
                .iter()
                .zip(x)
                .map(|(xh, xi)| scale * (xh - xi))
                .collect();
            let u: Vec<f64> = x.iter().zip(&m.b_pre).map(|(a, b)| a - b).collect();
            add_into(&mut acc.b_pre, &g);
            for e in &trace.sparse_code.entries {
                let j = e.feature;
                let mut dz = 0.0;
                for r in 0..d {
                    dz += m.w_dec.get(r, j) * g[r];
                    let cur = acc.w_dec.get(r, j);
                    acc.w_dec.set(r, j, cur + e.value * g[r]);
                }
                axpy(dz, &u, acc.w_enc.row_mut(j));
                axpy(-dz, m.w_enc.row(j), &mut acc.b_pre);
            }
        },
        |a, b| {
            add_into(a.w_enc.data_mut(), b.w_enc.data());
            add_into(a.w_dec.data_mut(), b.w_dec.data());
            add_into(&mut a.b_pre, &b.b_pre);
        },
    );
    Grads::Dense(acc.w_enc, acc.w_dec, acc.b_pre)
}

fn routed_backward(m: &ScaleSae, tokens: &[f64], traces: &[ForwardTrace], alpha: f64, f: &[f64]) -> Result<Grads> {
    let d = m.d_model;
    let w = m.expert_width;
    let n_exp = m.n_experts;
    let n_tokens = traces.len();
    let scale = 2.0 / (n_tokens * d) as f64;
    let encoders = m.effective_encoders()?;
    // d aux / d p_i(x_t) for every token.
    let aux_dp: Vec<f64> = f.iter().map(|fi| alpha * n_exp as f64 * fi / n_tokens as f64).collect();

    struct Acc {
        w_router: Matrix,
        b_router: Vec<f64>,
        enc_hat: Vec<Matrix>,
        w_dec: Vec<Matrix>,
        b_pre: Vec<f64>,
    }
    let acc = chunked(
        n_tokens,
        || Acc {
            w_router: Matrix::zeros(n_exp, d),
            b_router: vec![0.0; d],
            enc_hat: vec![Matrix::zeros(w, d); n_exp],
            w_dec: vec![Matrix::zeros(d, w); n_exp],
            b_pre: vec![0.0; d],
        },
        |acc, t| {
            let x = &tokens[t * d..(t + 1) * d];
            let trace = &traces[t];
            let p = &trace.router_probs;
            let g: Vec<f64> = trace
                .reconstruction
                .iter()
                .zip(x)
                .map(|(xh, xi)| scale * (xh - xi))
                .collect();
            let u: Vec<f64> = x.iter().zip(&m.b_pre).map(|(a, b)| a - b).collect();
            let mut dp = aux_dp.clone();
            if m.output_bias {
                add_into(&mut acc.b_pre, &g);
            }
            for &i in &trace.selected_experts {
                let dec = &m.w_dec[i];
                let enc = encoders[i].as_ref();
                let mut gy = 0.0;
                for e in trace.sparse_code.entries.iter().filter(|e| e.expert == i) {
                    let j = e.feature;
                    let mut col_g = 0.0;
                    for r in 0..d {
                        col_g += dec.get(r, j) * g[r];
                        let cur = acc.w_dec[i].get(r, j);
                        acc.w_dec[i].set(r, j, cur + p[i] * e.value * g[r]);
                    }
                    // g · y_i, with y_i = W_dec_i z_i
                    gy += e.value * col_g;
                    let dz = p[i] * col_g;
                    axpy(dz, &u, acc.enc_hat[i].row_mut(j));
                    axpy(-dz, enc.row(j), &mut acc.b_pre);
                }
                dp[i] += gy;
            }
            // Softmax Jacobian, then the router's affine map.
            let s = dot(p, &dp);
            let v: Vec<f64> = x.iter().zip(&m.b_router).map(|(a, b)| a - b).collect();
            for k in 0..n_exp {
                let dl = p[k] * (dp[k] - s);
                if dl == 0.0 {
                    continue;
                }
                axpy(dl, &v, acc.w_router.row_mut(k));
                axpy(-dl, m.w_router.row(k), &mut acc.b_router);
            }
        },
        |a, b| {
            add_into(a.w_router.data_mut(), b.w_router.data());
            add_into(&mut a.b_router, &b.b_router);
            for i in 0..n_exp {
                add_into(a.enc_hat[i].data_mut(), b.enc_hat[i].data());
                add_into(a.w_dec[i].data_mut(), b.w_dec[i].data());
            }
            add_into(&mut a.b_pre, &b.b_pre);
        },
    );

    let mut w_enc = Vec::with_capacity(n_exp);
    let mut a_lp = m.a_lp.as_ref().map(|_| Vec::with_capacity(n_exp));
    let mut omega = 0.0;
    for (i, d_hat) in acc.enc_hat.iter().enumerate() {
        let a = m.a_lp.as_ref().map(|a| &a[i]);
        let (dw, dom, da) = scaled_encoder_backward(&m.w_enc[i], m.omega, m.scaling_mode, a, d_hat);
        w_enc.push(dw);
        omega += dom;
        if let (Some(out), Some(da)) = (a_lp.as_mut(), da) {
            out.push(da);
        }
    }
    Ok(Grads::Routed(RoutedGrads {
        w_router: acc.w_router,
        b_router: acc.b_router,
        w_enc,
        w_dec: acc.w_dec,
        b_pre: acc.b_pre,
        omega,
        a_lp,
    }))
}
