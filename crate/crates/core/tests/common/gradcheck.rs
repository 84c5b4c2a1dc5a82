//! Central finite differences of the full loss against `backward`.

use saelab::model::{DenseTopKSae, ScaleShape};
use saelab::training::{backward, batch_loss};
use saelab::{Architecture, Rng, SaeModel, ScaleSae, ScalingMode};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;
pub const TOKENS: usize = 8;
pub const ALPHA: f64 = 0.1;

fn loss(model: &SaeModel, tokens: &[f64]) -> f64 {
    let traces = model.forward_batch(tokens).unwrap();
    batch_loss(model, tokens, &traces, ALPHA).unwrap().total
}

/// Selection pattern of every token, used to spot coordinates where a
/// perturbation crosses a Top-K or routing boundary.
fn selection(model: &SaeModel, tokens: &[f64]) -> Vec<(Vec<usize>, Vec<(usize, usize)>)> {
    model
        .forward_batch(tokens)
        .unwrap()
        .into_iter()
        .map(|t| {
            let code = t.sparse_code.entries.iter().map(|e| (e.expert, e.feature)).collect();
            (t.selected_experts, code)
        })
        .collect()
}

fn randomize(model: &mut SaeModel, rng: &mut Rng) {
    let names = model.tensor_names();
    for (name, t) in names.iter().zip(model.tensors_mut()) {
        for v in t.iter_mut() {
            *v = if name == "omega" {
                0.2 + 0.6 * rng.uniform()
            } else {
                0.7 * rng.normal()
            };
        }
    }
}

fn routed(arch: Architecture, n: usize, w: usize, e: usize, mode: ScalingMode, rng: &mut Rng) -> SaeModel {
    let shape = ScaleShape {
        d_model: 4,
        n_experts: n,
        expert_width: w,
        e_active: e,
        k: 2,
        scaling_mode: mode,
        output_bias: true,
    };
    let mut m = SaeModel::from_routed(arch, ScaleSae::init(shape, &[0.0; 4], rng).unwrap()).unwrap();
    randomize(&mut m, rng);
    if mode == ScalingMode::Off {
        m.routed_mut().unwrap().omega = 0.0;
    }
    m
}

pub struct Outcome {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn check(model: &SaeModel, tokens: &[f64]) -> Outcome {
    let traces = model.forward_batch(tokens).unwrap();
    let (grads, _) = backward(model, tokens, &traces, ALPHA).unwrap();
    let base_sel = selection(model, tokens);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut out = Outcome {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (ti, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][i] += H;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][i] -= H;
            if selection(&plus, tokens) != base_sel || selection(&minus, tokens) != base_sel {
                out.skipped += 1;
                continue;
            }
            let numeric = (loss(&plus, tokens) - loss(&minus, tokens)) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.max_rel = out.max_rel.max(rel);
            out.checked += 1;
        }
    }
    out
}

pub fn cases(seed: u64) -> Vec<(String, SaeModel, Vec<f64>)> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut dense = SaeModel::Dense(DenseTopKSae::init(4, 3, 2, &[0.0; 4], &mut rng).unwrap());
    randomize(&mut dense, &mut rng);
    out.push(("dense/off".to_string(), dense));
    for mode in ScalingMode::ALL {
        // Identity scaling needs square expert encoders.
        let w = if mode == ScalingMode::IdentityBased { 4 } else { 3 };
        let switch_arch = if mode == ScalingMode::Off {
            Architecture::Switch
        } else {
            Architecture::Scale
        };
        out.push((format!("switch/{mode}"), routed(switch_arch, 2, w, 1, mode, &mut rng)));
        out.push((
            format!("scale-e2/{mode}"),
            routed(Architecture::Scale, 2, w, 2, mode, &mut rng),
        ));
        out.push((
            format!("scale-e2of3/{mode}"),
            routed(Architecture::Scale, 3, w, 2, mode, &mut rng),
        ));
    }
    out.into_iter()
        .map(|(name, m)| {
            let tokens: Vec<f64> = (0..TOKENS * 4).map(|_| rng.normal()).collect();
            (name, m, tokens)
        })
        .collect()
}

pub struct CaseSummary {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CaseSummary {
    /// A boundary crossing makes the loss non-differentiable at that
    /// coordinate; such skips must stay rare or the check would be vacuous.
    pub fn passed(&self) -> bool {
        self.max_rel < TOL && self.skipped * 100 <= self.checked
    }
}

/// Worst relative error per architecture/scaling case over all seeds.
pub fn run_all() -> Vec<CaseSummary> {
    let mut worst: std::collections::BTreeMap<String, CaseSummary> = Default::default();
    for seed in 0..SEEDS {
        for (name, model, tokens) in cases(seed) {
            let o = check(&model, &tokens);
            let e = worst.entry(name.clone()).or_insert(CaseSummary {
                name,
                max_rel: 0.0,
                checked: 0,
                skipped: 0,
            });
            e.max_rel = e.max_rel.max(o.max_rel);
            e.checked += o.checked;
            e.skipped += o.skipped;
        }
    }
    worst.into_values().collect()
}
