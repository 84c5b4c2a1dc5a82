//! Flat `key = value` training configuration and the shipped presets.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ScalingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub d_model: usize,
    /// 1 for dense models.
    pub n_experts: usize,
    /// Latents per expert; the full latent width for dense models.
    pub expert_width: usize,
    pub e_active: usize,
    pub k: usize,
    pub alpha: f64,
    pub scaling_mode: ScalingMode,
    pub learn_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub decoder_renorm: bool,
    /// Add `b_pre` back after decoding.
    pub output_bias: bool,
    /// Emit a step report every this many steps (and always on the last step).
    pub log_every: usize,
}

/// Keys in canonical order; `to_text` writes them in this order.
pub const CONFIG_KEYS: [&str; 18] = [
    "architecture",
    "d_model",
    "n_experts",
    "expert_width",
    "e_active",
    "k",
    "alpha",
    "scaling_mode",
    "learn_rate",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "n_steps",
    "seed",
    "decoder_renorm",
    "output_bias",
    "log_every",
];

const REQUIRED: [&str; 5] = ["architecture", "d_model", "expert_width", "k", "alpha"];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value for {key}: '{value}'"))),
    }
}

impl TrainConfig {
    fn with_defaults(architecture: Architecture, d_model: usize, expert_width: usize, k: usize, alpha: f64) -> Self {
        Self {
            architecture,
            d_model,
            n_experts: 1,
            expert_width,
            e_active: 1,
            k,
            alpha,
            scaling_mode: ScalingMode::Off,
            learn_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            n_steps: 2000,
            seed: 0,
            decoder_renorm: true,
            output_bias: true,
            log_every: 100,
        }
    }

    /// Parses `key = value` lines. `#` starts a comment. Unknown keys are an
    /// error, and so is any missing required key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_string();
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            pairs.retain(|(k, _)| *k != key);
            pairs.push((key, value.trim().to_string()));
        }
        for req in REQUIRED {
            if !pairs.iter().any(|(k, _)| k == req) {
                return Err(Error::Config(format!("{req} required")));
            }
        }
        let mut cfg = Self::with_defaults(Architecture::DenseTopK, 0, 0, 0, 0.0);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one key. Does not re-validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "architecture" => self.architecture = value.parse()?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "n_experts" => self.n_experts = parse_num(key, value)?,
            "expert_width" => self.expert_width = parse_num(key, value)?,
            "e_active" => self.e_active = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "scaling_mode" => self.scaling_mode = value.parse()?,
            "learn_rate" => self.learn_rate = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "n_steps" => self.n_steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "decoder_renorm" => self.decoder_renorm = parse_bool(key, value)?,
            "output_bias" => self.output_bias = parse_bool(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.learn_rate > 0.0) || !self.learn_rate.is_finite() {
            return bad(format!("learn_rate must be > 0, got {}", self.learn_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.d_model == 0 || self.expert_width == 0 || self.n_experts == 0 {
            return bad("d_model, n_experts and expert_width must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        match self.architecture {
            Architecture::DenseTopK => {
                if self.n_experts != 1 || self.e_active != 1 || self.scaling_mode != ScalingMode::Off {
                    return bad("dense requires n_experts = 1, e_active = 1, scaling_mode = off".into());
                }
            }
            Architecture::Switch => {
                if self.e_active != 1 || self.scaling_mode != ScalingMode::Off {
                    return bad("switch requires e_active = 1 and scaling_mode = off".into());
                }
            }
            Architecture::Scale => {}
        }
        if self.e_active < 1 || self.e_active > self.n_experts {
            return bad(format!("e_active {} outside 1..={}", self.e_active, self.n_experts));
        }
        if self.k < 1 || self.k > self.e_active * self.expert_width {
            return bad(format!(
                "k {} outside 1..={} (e_active × expert_width)",
                self.k,
                self.e_active * self.expert_width
            ));
        }
        if self.scaling_mode == ScalingMode::IdentityBased && self.expert_width != self.d_model {
            return bad("identity decomposition requires expert_width = d_model".into());
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let value = match key {
                "architecture" => self.architecture.to_string(),
                "d_model" => self.d_model.to_string(),
                "n_experts" => self.n_experts.to_string(),
                "expert_width" => self.expert_width.to_string(),
                "e_active" => self.e_active.to_string(),
                "k" => self.k.to_string(),
                "alpha" => format!("{:?}", self.alpha),
                "scaling_mode" => self.scaling_mode.to_string(),
                "learn_rate" => format!("{:?}", self.learn_rate),
                "beta1" => format!("{:?}", self.beta1),
                "beta2" => format!("{:?}", self.beta2),
                "eps" => format!("{:?}", self.eps),
                "batch_size" => self.batch_size.to_string(),
                "n_steps" => self.n_steps.to_string(),
                "seed" => self.seed.to_string(),
                "decoder_renorm" => self.decoder_renorm.to_string(),
                "output_bias" => self.output_bias.to_string(),
                "log_every" => self.log_every.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    /// Largest K the routed capacity allows.
    pub fn capacity(&self) -> usize {
        self.e_active * self.expert_width
    }
}

/// Presets: the FLOPS-matched grid scaled down 32×, so total width 768 is
/// split as 24 experts × 32 latents on 32-dim activations and a dense model
/// of width 32 matches one expert's compute.
pub const PRESET_NAMES: [&str; 9] = [
    "dense",
    "dense_wide",
    "switch",
    "scale_e1",
    "scale_e2",
    "scale_e4",
    "scale_e8",
    "scale_e16",
    "scale_e2_off",
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "dense" => include_str!("../../presets/dense.cfg"),
        "dense_wide" => include_str!("../../presets/dense_wide.cfg"),
        "switch" => include_str!("../../presets/switch.cfg"),
        "scale_e1" => include_str!("../../presets/scale_e1.cfg"),
        "scale_e2" => include_str!("../../presets/scale_e2.cfg"),
        "scale_e4" => include_str!("../../presets/scale_e4.cfg"),
        "scale_e8" => include_str!("../../presets/scale_e8.cfg"),
        "scale_e16" => include_str!("../../presets/scale_e16.cfg"),
        "scale_e2_off" => include_str!("../../presets/scale_e2_off.cfg"),
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<TrainConfig> {
    let text = preset_text(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset '{name}', expected one of {}",
            PRESET_NAMES.join(", ")
        ))
    })?;
    TrainConfig::parse(text)
}
