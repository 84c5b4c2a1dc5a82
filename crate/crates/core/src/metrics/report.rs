use serde::{Deserialize, Serialize};

use crate::datagen::ActivationBatch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    activation_similarity, code_sets, dictionary_recovery, intra_inter_similarity, loss_recovered, measured_l0,
    redundancy_fraction, DEFAULT_INTER_SAMPLES, REDUNDANCY_THRESHOLD,
};
use crate::model::SaeModel;
use crate::rng::Rng;
use crate::training::loss::recon_loss;

/// Language-model losses from three forward passes: untouched, with the
/// layer replaced by reconstructions, and with the layer zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l_orig: f64,
    pub l_recon: f64,
    pub l_zero: f64,
}

impl LossTriple {
    pub fn loss_recovered(&self) -> Result<f64> {
        loss_recovered(self.l_zero, self.l_recon, self.l_orig)
    }
}

/// Parses a loss-triple record.
///
/// Either three `key=value` pairs (`l_orig`, `l_recon`, `l_zero`, any order)
/// or three bare numbers in the order `l_orig l_recon l_zero`. Separators are
/// whitespace or commas; `#` starts a comment.
pub fn parse_loss_triple(text: &str) -> Result<LossTriple> {
    let mut fields: Vec<(u64, &str)> = Vec::new();
    let mut line_start = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("");
        let mut pos = 0;
        for piece in body.split(|c: char| c.is_whitespace() || c == ',') {
            if !piece.is_empty() {
                fields.push((line_start + pos as u64, piece));
            }
            pos += piece.len() + 1;
        }
        line_start += line.len() as u64;
    }
    // `key = value` written with spaces splits into three pieces; rejoin.
    let mut joined: Vec<(u64, String)> = Vec::new();
    let mut i = 0;
    while i < fields.len() {
        let (at, f) = fields[i];
        if i + 2 < fields.len() && fields[i + 1].1 == "=" {
            joined.push((at, format!("{f}={}", fields[i + 2].1)));
            i += 3;
        } else {
            joined.push((at, f.to_string()));
            i += 1;
        }
    }
    if joined.len() != 3 {
        return Err(Error::parse(
            0,
            format!("expected 3 loss values, found {}", joined.len()),
        ));
    }
    let number = |at: u64, s: &str| -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| Error::parse(at, format!("not a number: {s:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(at, format!("non-finite loss {s:?}")));
        }
        Ok(v)
    };
    let keyed = joined.iter().filter(|(_, f)| f.contains('=')).count();
    if keyed == 0 {
        return Ok(LossTriple {
            l_orig: number(joined[0].0, &joined[0].1)?,
            l_recon: number(joined[1].0, &joined[1].1)?,
            l_zero: number(joined[2].0, &joined[2].1)?,
        });
    }
    let mut slots = [None; 3];
    for (at, f) in &joined {
        let (key, value) = f
            .split_once('=')
            .ok_or_else(|| Error::parse(*at, "cannot mix keyed and bare values"))?;
        let slot = match key.trim() {
            "l_orig" => 0,
            "l_recon" => 1,
            "l_zero" => 2,
            other => return Err(Error::parse(*at, format!("unknown key {other:?}"))),
        };
        if slots[slot].is_some() {
            return Err(Error::parse(*at, format!("duplicate key {key:?}")));
        }
        slots[slot] = Some(number(*at, value.trim())?);
    }
    Ok(LossTriple {
        l_orig: slots[0].unwrap(),
        l_recon: slots[1].unwrap(),
        l_zero: slots[2].unwrap(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_tokens: usize,
    pub mse: f64,
    pub measured_l0: f64,
    pub loss_recovered: Option<f64>,
    pub redundancy_fraction: f64,
    /// Absent for models without experts.
    pub intra_expert_sim: Option<f64>,
    pub inter_expert_sim: Option<f64>,
    pub activation_similarity: f64,
    pub dictionary_recovery: Option<f64>,
}

impl MetricsReport {
    /// Present metrics in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("n_tokens", self.n_tokens as f64),
            ("mse", self.mse),
            ("measured_l0", self.measured_l0),
        ];
        let optional = [
            ("loss_recovered", self.loss_recovered),
            ("redundancy_fraction", Some(self.redundancy_fraction)),
            ("intra_expert_sim", self.intra_expert_sim),
            ("inter_expert_sim", self.inter_expert_sim),
            ("activation_similarity", Some(self.activation_similarity)),
            ("dictionary_recovery", self.dictionary_recovery),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes") + "\n"
    }

    /// One `metric<TAB>value` row per present metric.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub inter_samples: usize,
    pub redundancy_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            inter_samples: DEFAULT_INTER_SAMPLES,
            redundancy_threshold: REDUNDANCY_THRESHOLD,
        }
    }
}

/// Full metric suite for one model on one batch.
pub fn evaluate(
    model: &SaeModel,
    batch: &ActivationBatch,
    truth: Option<&Matrix>,
    losses: Option<LossTriple>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if batch.d_model != model.d_model() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            left: (model.d_model(), 1),
            right: (batch.d_model, 1),
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let traces = model.forward_batch(&batch.data)?;
    let x_hat: Vec<f64> = traces.iter().flat_map(|t| t.reconstruction.iter().copied()).collect();
    let mse = recon_loss(&batch.data, &x_hat, batch.d_model)?;
    let codes = code_sets(&traces, model.expert_width());
    let features = model.decoder_features();
    let (intra, inter) = match model.routed() {
        Some(m) if m.n_experts >= 2 && m.expert_width >= 2 => {
            let r = intra_inter_similarity(m, opts.inter_samples, &mut Rng::new(opts.seed))?;
            (Some(r.intra), Some(r.inter))
        }
        _ => (None, None),
    };
    let activation_similarity = if codes.len() >= 2 {
        activation_similarity(&codes, model.k())?
    } else {
        0.0
    };
    Ok(MetricsReport {
        n_tokens: batch.n_tokens(),
        mse,
        measured_l0: measured_l0(&codes),
        loss_recovered: losses.map(|l| l.loss_recovered()).transpose()?,
        redundancy_fraction: redundancy_fraction(&features, opts.redundancy_threshold)?.fraction,
        intra_expert_sim: intra,
        inter_expert_sim: inter,
        activation_similarity,
        dictionary_recovery: truth.map(|t| dictionary_recovery(&features, t)).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b − a`
    pub abs_delta: f64,
    /// `(b − a) / |a|`, absent when `a = 0`.
    pub rel_delta: Option<f64>,
}

/// Per-metric differences for metrics present in both reports.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Vec<MetricDelta> {
    let eb = b.entries();
    a.entries()
        .into_iter()
        .filter_map(|(k, va)| {
            let vb = eb.iter().find(|(kb, _)| *kb == k)?.1;
            Some(MetricDelta {
                metric: k.to_string(),
                a: va,
                b: vb,
                abs_delta: vb - va,
                rel_delta: (va != 0.0).then(|| (vb - va) / va.abs()),
            })
        })
        .collect()
}
