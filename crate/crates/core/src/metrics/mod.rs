//! Evaluation metrics and feature-geometry analyses.
//!
//! Feature vectors are decoder directions, one per latent. Pairwise work is
//! parallelised with rayon but every reduction is either integer-valued or
//! folded in a fixed order, so results do not depend on the thread count.

mod report;

pub use report::{compare_reports, evaluate, parse_loss_triple, EvalOptions, LossTriple, MetricDelta, MetricsReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::ActivationBatch;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{ForwardTrace, SaeModel, ScaleSae};
use crate::rng::Rng;

pub const REDUNDANCY_THRESHOLD: f64 = 0.9;
pub const DEFAULT_INTER_SAMPLES: usize = 32;

/// `(l_zero − l_recon) / (l_zero − l_orig)`.
pub fn loss_recovered(l_zero: f64, l_recon: f64, l_orig: f64) -> Result<f64> {
    if l_zero == l_orig {
        return Err(Error::DegenerateBaseline);
    }
    Ok((l_zero - l_recon) / (l_zero - l_orig))
}

/// Mean number of active latents per token.
pub fn measured_l0(codes: &[Vec<usize>]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes.iter().map(Vec::len).sum::<usize>() as f64 / codes.len() as f64
}

/// Sorted global feature ids of each token's sparse code.
pub fn code_sets(traces: &[ForwardTrace], expert_width: usize) -> Vec<Vec<usize>> {
    traces
        .iter()
        .map(|t| {
            let mut ids = t.sparse_code.global_ids(expert_width);
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect()
}

/// Cosine similarities computed from precomputed norms. Bitwise identical to
/// [`crate::linalg::cosine_similarity`] on the same pair.
struct Cosines<'a> {
    features: &'a Matrix,
    norms: Vec<f64>,
}

impl<'a> Cosines<'a> {
    fn new(features: &'a Matrix) -> Self {
        let norms = (0..features.rows()).map(|r| norm(features.row(r))).collect();
        Self { features, norms }
    }

    fn require_nonzero(&self, rows: impl IntoIterator<Item = usize>) -> Result<()> {
        for r in rows {
            if self.norms[r] == 0.0 {
                return Err(Error::DegenerateFeature);
            }
        }
        Ok(())
    }

    #[inline]
    fn sim(&self, i: usize, j: usize) -> f64 {
        (dot(self.features.row(i), self.features.row(j)) / (self.norms[i] * self.norms[j])).clamp(-1.0, 1.0)
    }

    /// Mean over unordered pairs of `set`, summed in `(i < j)` order.
    fn mean_pairwise(&self, set: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in set.iter().enumerate() {
            for &j in &set[a + 1..] {
                sum += self.sim(i, j);
                pairs += 1;
            }
        }
        sum / pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    pub fraction: f64,
    /// Zero-norm rows left out of the analysis.
    pub excluded: usize,
    /// Per analysed row, the largest cosine similarity to any other analysed row.
    pub max_similarity: Vec<f64>,
}

const BLOCK: usize = 64;

/// Share of rows whose largest cosine similarity to another row exceeds
/// `threshold`. Zero-norm rows are excluded and counted.
pub fn redundancy_fraction(features: &Matrix, threshold: f64) -> Result<Redundancy> {
    let cos = Cosines::new(features);
    let live: Vec<usize> = (0..features.rows()).filter(|&r| cos.norms[r] > 0.0).collect();
    let excluded = features.rows() - live.len();
    if live.len() < 2 {
        return Err(Error::Precondition(format!(
            "redundancy needs at least 2 nonzero features, got {}",
            live.len()
        )));
    }
    let max_similarity: Vec<f64> = live
        .par_iter()
        .map(|&i| {
            let mut best = f64::NEG_INFINITY;
            for block in live.chunks(BLOCK) {
                for &j in block {
                    if j != i {
                        best = best.max(cos.sim(i, j));
                    }
                }
            }
            best
        })
        .collect();
    let hits = max_similarity.iter().filter(|&&m| m > threshold).count();
    Ok(Redundancy {
        fraction: hits as f64 / live.len() as f64,
        excluded,
        max_similarity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraInter {
    pub intra: f64,
    pub inter: f64,
    /// Per expert mean pairwise similarity.
    pub per_expert: Vec<f64>,
    /// The sampled cross-expert feature sets (global ids, sorted).
    pub samples: Vec<Vec<usize>>,
}

/// Intra-expert similarity against the similarity of random same-size feature
/// sets pooled across experts.
///
/// Each of the `sample_size` sets draws `expert_width` distinct global features
/// uniformly from all `n_experts · expert_width` of them.
pub fn intra_inter_similarity(model: &ScaleSae, sample_size: usize, rng: &mut Rng) -> Result<IntraInter> {
    if model.n_experts < 2 {
        return Err(Error::Precondition(format!(
            "intra/inter similarity needs at least 2 experts, got {}",
            model.n_experts
        )));
    }
    let w = model.expert_width;
    if w < 2 {
        return Err(Error::Precondition(format!(
            "intra-expert similarity needs expert_width >= 2, got {w}"
        )));
    }
    if sample_size == 0 {
        return Err(Error::Precondition("sample_size must be positive".into()));
    }
    let features = model.decoder_features();
    let cos = Cosines::new(&features);
    cos.require_nonzero(0..features.rows())?;

    let per_expert: Vec<f64> = (0..model.n_experts)
        .into_par_iter()
        .map(|e| cos.mean_pairwise(&(e * w..(e + 1) * w).collect::<Vec<_>>()))
        .collect();
    let intra = per_expert.iter().sum::<f64>() / per_expert.len() as f64;

    let samples: Vec<Vec<usize>> = (0..sample_size)
        .map(|_| {
            let mut s = rng.sample_without_replacement(features.rows(), w);
            s.sort_unstable();
            s
        })
        .collect();
    let sample_means: Vec<f64> = samples.par_iter().map(|s| cos.mean_pairwise(s)).collect();
    let inter = sample_means.iter().sum::<f64>() / sample_means.len() as f64;
    Ok(IntraInter {
        intra,
        inter,
        per_expert,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertActivationCdf {
    /// `(expert, count)` sorted by descending count, ties by expert index.
    pub ranked: Vec<(usize, u64)>,
    /// Cumulative share of all selections up to and including each rank.
    pub cumulative: Vec<f64>,
}

impl ExpertActivationCdf {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut ranked: Vec<(usize, u64)> = counts.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut acc = 0u64;
        let cumulative = ranked
            .iter()
            .map(|&(_, c)| {
                acc += c;
                acc as f64 / total as f64
            })
            .collect();
        Ok(Self { ranked, cumulative })
    }

    /// Two-column table: rank (from 1) and cumulative fraction.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tcumulative_fraction\n");
        for (r, c) in self.cumulative.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", r + 1, c));
        }
        out
    }
}

/// Per-expert selection counts over the batch.
pub fn expert_counts(model: &SaeModel, batch: &ActivationBatch) -> Result<Vec<u64>> {
    let routed = model.routed().ok_or(Error::NoExperts)?;
    if batch.d_model != routed.d_model {
        return Err(Error::ShapeMismatch {
            op: "expert_counts",
            left: (routed.d_model, 1),
            right: (batch.d_model, 1),
        });
    }
    let per_token: Vec<Vec<usize>> = batch
        .data
        .par_chunks(batch.d_model)
        .map(|x| routed.route(x).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; routed.n_experts];
    for t in per_token {
        for e in t {
            counts[e] += 1;
        }
    }
    Ok(counts)
}

pub fn expert_activation_cdf(model: &SaeModel, batch: &ActivationBatch) -> Result<ExpertActivationCdf> {
    ExpertActivationCdf::from_counts(&expert_counts(model, batch)?)
}

fn require_tokens(codes: &[Vec<usize>]) -> Result<()> {
    if codes.len() < 2 {
        return Err(Error::Precondition(format!(
            "pairwise overlap needs at least 2 tokens, got {}",
            codes.len()
        )));
    }
    Ok(())
}

fn sorted_sets(codes: &[Vec<usize>]) -> Vec<Vec<usize>> {
    codes
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect()
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `Σ_{i≠j} |S_i ∩ S_j| / (N (N−1) K_total)` over ordered token pairs.
///
/// Computed exactly from per-feature token counts: a feature active on `c`
/// tokens contributes `c (c − 1)` ordered pairs.
pub fn activation_similarity(codes: &[Vec<usize>], k_total: usize) -> Result<f64> {
    require_tokens(codes)?;
    if k_total == 0 {
        return Err(Error::Precondition("k_total must be positive".into()));
    }
    let mut ids: Vec<usize> = sorted_sets(codes).into_iter().flatten().collect();
    ids.sort_unstable();
    let mut ordered_pairs: u128 = 0;
    for run in ids.chunk_by(|a, b| a == b) {
        let c = run.len() as u128;
        ordered_pairs += c * (c - 1);
    }
    let n = codes.len() as f64;
    Ok(ordered_pairs as f64 / (n * (n - 1.0) * k_total as f64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapHistogram {
    /// `counts[k]` = number of unordered token pairs sharing exactly `k` features.
    pub counts: Vec<u64>,
}

impl OverlapHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Activation similarity implied by the histogram.
    pub fn implied_similarity(&self, n_tokens: usize, k_total: usize) -> f64 {
        let weighted: u128 = self
            .counts
            .iter()
            .enumerate()
            .map(|(k, &c)| k as u128 * c as u128)
            .sum();
        let n = n_tokens as f64;
        2.0 * weighted as f64 / (n * (n - 1.0) * k_total as f64)
    }

    /// Two-column table: overlap size and pair count.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k_ij\tcount\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{k}\t{c}\n"));
        }
        out
    }
}

/// Histogram of `|S_i ∩ S_j|` over unordered token pairs, bins `0..=k_total`.
pub fn overlap_histogram(codes: &[Vec<usize>], k_total: usize) -> Result<OverlapHistogram> {
    require_tokens(codes)?;
    let sets = sorted_sets(codes);
    if let Some(big) = sets.iter().find(|s| s.len() > k_total) {
        return Err(Error::Precondition(format!(
            "code of size {} exceeds k_total {k_total}",
            big.len()
        )));
    }
    let counts = (0..sets.len())
        .into_par_iter()
        .map(|i| {
            let mut local = vec![0u64; k_total + 1];
            for j in i + 1..sets.len() {
                local[intersection_size(&sets[i], &sets[j])] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; k_total + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(OverlapHistogram { counts })
}

/// Mean over true dictionary rows of the best cosine similarity to any
/// learned feature row. Zero-norm learned rows never match.
pub fn dictionary_recovery(learned: &Matrix, truth: &Matrix) -> Result<f64> {
    if learned.rows() == 0 || truth.rows() == 0 {
        return Err(Error::Precondition(
            "dictionary recovery needs nonempty dictionaries".into(),
        ));
    }
    if learned.cols() != truth.cols() {
        return Err(Error::ShapeMismatch {
            op: "dictionary_recovery",
            left: learned.shape(),
            right: truth.shape(),
        });
    }
    let learned_norms: Vec<f64> = (0..learned.rows()).map(|r| norm(learned.row(r))).collect();
    let best: Vec<f64> = (0..truth.rows())
        .into_par_iter()
        .map(|t| {
            let row = truth.row(t);
            let nt = norm(row);
            if nt == 0.0 {
                return Err(Error::DegenerateFeature);
            }
            let mut best = f64::NEG_INFINITY;
            for (l, &nl) in learned_norms.iter().enumerate() {
                let s = if nl == 0.0 {
                    0.0
                } else {
                    (dot(row, learned.row(l)) / (nt * nl)).clamp(-1.0, 1.0)
                };
                best = best.max(s);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}
