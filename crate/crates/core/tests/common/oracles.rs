//! Brute-force reference implementations used by several test targets.

use std::collections::BTreeSet;

use saelab::linalg::{cosine_similarity, Matrix};
use saelab::model::{ScaleShape, SparseCode};
use saelab::{Rng, ScaleSae, ScalingMode};

/// Max-sum subset of size `min(k, #positive)` among strictly positive
/// entries, found by trying every subset. Returns indices in ascending order.
pub fn brute_force_topk(values: &[f64], k: usize) -> Vec<usize> {
    assert!(values.len() <= 20, "exhaustive search only for tiny inputs");
    let positive = values.iter().filter(|v| **v > 0.0).count();
    let size = k.min(positive);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << values.len()) {
        if mask.count_ones() as usize != size {
            continue;
        }
        let idx: Vec<usize> = (0..values.len()).filter(|i| mask >> i & 1 == 1).collect();
        if idx.iter().any(|&i| values[i] <= 0.0) {
            continue;
        }
        let sum: f64 = idx.iter().map(|&i| values[i]).sum();
        if best.as_ref().is_none_or(|(s, _)| sum > *s) {
            best = Some((sum, idx));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Effective encoder written out directly from the scaling definitions.
pub fn effective_encoder(m: &ScaleSae, expert: usize) -> Matrix {
    let w = &m.w_enc[expert];
    let (rows, cols) = w.shape();
    let low = |r: usize, c: usize| -> f64 {
        match m.scaling_mode {
            ScalingMode::Off => 0.0,
            ScalingMode::MeanBased => (0..rows).map(|i| w.get(i, c)).sum::<f64>() / rows as f64,
            ScalingMode::IdentityBased => (r == c) as u8 as f64,
            ScalingMode::Learned => m.a_lp.as_ref().unwrap()[expert].get(r, c),
        }
    };
    if m.scaling_mode == ScalingMode::Off {
        return w.clone();
    }
    Matrix::from_fn(rows, cols, |r, c| {
        low(r, c) + (1.0 + m.omega) * (w.get(r, c) - low(r, c))
    })
}

/// Pre-activations `Ŵ_i (x − b_pre)` of one expert.
pub fn pre_activations(m: &ScaleSae, expert: usize, x: &[f64]) -> Vec<f64> {
    let enc = effective_encoder(m, expert);
    (0..m.expert_width)
        .map(|j| (0..m.d_model).map(|c| enc.get(j, c) * (x[c] - m.b_pre[c])).sum())
        .collect()
}

/// Random Scale model with perturbed biases and a nonzero `omega`.
pub fn random_scale(shape: ScaleShape, rng: &mut Rng) -> ScaleSae {
    let mut m = ScaleSae::init(shape, &vec![0.0; shape.d_model], rng).unwrap();
    m.b_pre = (0..shape.d_model).map(|_| 0.2 * rng.normal()).collect();
    m.b_router = (0..shape.d_model).map(|_| 0.2 * rng.normal()).collect();
    if shape.scaling_mode != ScalingMode::Off {
        m.omega = 0.5 * rng.normal();
    }
    if let Some(a) = m.a_lp.as_mut() {
        for mat in a.iter_mut() {
            mat.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        }
    }
    m
}

/// Checks the global Top-K contract for one token; returns a description of
/// the first violation.
pub fn check_global_topk(m: &ScaleSae, x: &[f64], selected: &[usize], code: &SparseCode) -> Result<(), String> {
    let mut candidates = Vec::new();
    for &e in selected {
        for (j, v) in pre_activations(m, e, x).into_iter().enumerate() {
            candidates.push((e, j, v));
        }
    }
    let positive = candidates.iter().filter(|c| c.2 > 0.0).count();
    if code.len() != m.k.min(positive) {
        return Err(format!("{} active, expected min({}, {positive})", code.len(), m.k));
    }
    let kept: BTreeSet<(usize, usize)> = code.entries.iter().map(|e| (e.expert, e.feature)).collect();
    for e in &code.entries {
        if !selected.contains(&e.expert) {
            return Err(format!("entry from unselected expert {}", e.expert));
        }
        let want = candidates
            .iter()
            .find(|c| c.0 == e.expert && c.1 == e.feature)
            .unwrap()
            .2;
        if (e.value - want).abs() > 1e-12 * want.abs().max(1.0) || e.value <= 0.0 {
            return Err(format!("value {} differs from pre-activation {want}", e.value));
        }
    }
    let min_kept = code.entries.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    for c in &candidates {
        if c.2 > 0.0 && !kept.contains(&(c.0, c.1)) && c.2 > min_kept {
            return Err(format!("dropped positive {} exceeds kept {min_kept}", c.2));
        }
    }
    if candidates.len() <= 20 {
        let values: Vec<f64> = candidates.iter().map(|c| c.2).collect();
        let oracle: BTreeSet<(usize, usize)> = brute_force_topk(&values, m.k)
            .into_iter()
            .map(|i| (candidates[i].0, candidates[i].1))
            .collect();
        if oracle != kept {
            return Err(format!("brute force picked {oracle:?}, model kept {kept:?}"));
        }
    }
    Ok(())
}

/// Ordered-pair overlap sum, pair by pair.
pub fn activation_similarity(codes: &[Vec<usize>], k_total: usize) -> f64 {
    let sets: Vec<BTreeSet<usize>> = codes.iter().map(|c| c.iter().copied().collect()).collect();
    let mut sum = 0u64;
    for i in 0..sets.len() {
        for j in 0..sets.len() {
            if i != j {
                sum += sets[i].intersection(&sets[j]).count() as u64;
            }
        }
    }
    let n = codes.len() as f64;
    sum as f64 / (n * (n - 1.0) * k_total as f64)
}

pub fn overlap_histogram(codes: &[Vec<usize>], k_total: usize) -> Vec<u64> {
    let sets: Vec<BTreeSet<usize>> = codes.iter().map(|c| c.iter().copied().collect()).collect();
    let mut counts = vec![0u64; k_total + 1];
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            counts[sets[i].intersection(&sets[j]).count()] += 1;
        }
    }
    counts
}

/// Fraction of nonzero rows whose best cosine partner exceeds `threshold`.
pub fn redundancy_fraction(features: &Matrix, threshold: f64) -> f64 {
    let rows: Vec<&[f64]> = (0..features.rows())
        .map(|r| features.row(r))
        .filter(|r| r.iter().any(|v| *v != 0.0))
        .collect();
    let mut hits = 0;
    for (i, a) in rows.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (j, b) in rows.iter().enumerate() {
            if i != j {
                best = best.max(cosine_similarity(a, b).unwrap());
            }
        }
        if best > threshold {
            hits += 1;
        }
    }
    hits as f64 / rows.len() as f64
}

/// Decoder column `j` of expert `e`, read straight from the decoder matrix.
fn column(m: &ScaleSae, e: usize, j: usize) -> Vec<f64> {
    (0..m.d_model).map(|r| m.w_dec[e].get(r, j)).collect()
}

fn mean_pairwise(vectors: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            sum += cosine_similarity(&vectors[i], &vectors[j]).unwrap();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Exhaustive-pair intra and inter similarity. The random sets are redrawn
/// from a fresh stream with the given seed.
pub fn intra_inter(m: &ScaleSae, samples: usize, seed: u64) -> (f64, f64, Vec<Vec<usize>>) {
    let w = m.expert_width;
    let intra = (0..m.n_experts)
        .map(|e| mean_pairwise(&(0..w).map(|j| column(m, e, j)).collect::<Vec<_>>()))
        .sum::<f64>()
        / m.n_experts as f64;
    let mut rng = Rng::new(seed);
    let mut sets = Vec::new();
    let mut inter = 0.0;
    for _ in 0..samples {
        let mut s = rng.sample_without_replacement(m.n_experts * w, w);
        s.sort_unstable();
        inter += mean_pairwise(&s.iter().map(|&g| column(m, g / w, g % w)).collect::<Vec<_>>());
        sets.push(s);
    }
    (intra, inter / samples as f64, sets)
}

/// Random sparse codes: `n` tokens, sizes up to `k_total`, ids below `vocab`.
pub fn random_codes(n: usize, k_total: usize, vocab: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let size = rng.below(k_total as u64 + 1) as usize;
            let mut c = rng.sample_without_replacement(vocab, size.min(vocab));
            c.sort_unstable();
            c
        })
        .collect()
}
