use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;

/// Mean over tokens of the per-dimension squared error.
pub fn recon_loss(x: &[f64], x_hat: &[f64], d_model: usize) -> Result<f64> {
    if x.len() != x_hat.len() || d_model == 0 || x.len() % d_model != 0 {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            left: (x.len(), 1),
            right: (x_hat.len(), 1),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_tokens = x.len() / d_model;
    let sse: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / (d_model * n_tokens) as f64)
}

/// Load-balancing term `N · Σ f_i P_i`.
pub fn aux_loss(f: &[f64], p: &[f64], n_experts: usize) -> Result<f64> {
    if f.len() != p.len() || f.len() != n_experts {
        return Err(Error::ShapeMismatch {
            op: "aux_loss",
            left: (f.len(), 1),
            right: (p.len(), n_experts),
        });
    }
    Ok(n_experts as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

/// Per-batch routing statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Tokens that selected each expert.
    pub selections: Vec<usize>,
    /// `selections / batch_size`; sums to `e_active`.
    pub load: Vec<f64>,
    /// `selections / (batch_size · e_active)`; sums to 1. This is the `f`
    /// of the auxiliary loss.
    pub f: Vec<f64>,
    /// Batch-mean router probabilities; sums to 1.
    pub mean_probs: Vec<f64>,
}

pub fn routing_stats(traces: &[ForwardTrace], n_experts: usize, e_active: usize) -> Result<RoutingStats> {
    if traces.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut selections = vec![0usize; n_experts];
    let mut mean_probs = vec![0.0; n_experts];
    for t in traces {
        if t.router_probs.len() != n_experts {
            return Err(Error::TraceMismatch(format!(
                "trace has {} router probabilities, model has {n_experts} experts",
                t.router_probs.len()
            )));
        }
        for &i in &t.selected_experts {
            selections[i] += 1;
        }
        for (m, p) in mean_probs.iter_mut().zip(&t.router_probs) {
            *m += p;
        }
    }
    let b = traces.len() as f64;
    mean_probs.iter_mut().for_each(|m| *m /= b);
    let load = selections.iter().map(|&s| s as f64 / b).collect();
    let f = selections.iter().map(|&s| s as f64 / (b * e_active as f64)).collect();
    Ok(RoutingStats {
        selections,
        load,
        f,
        mean_probs,
    })
}
