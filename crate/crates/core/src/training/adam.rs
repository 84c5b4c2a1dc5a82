use crate::error::{Error, Result};
use crate::model::SaeModel;
use crate::training::backward::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learn_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learn_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, tensor_lens: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(cfg: AdamConfig, model: &SaeModel) -> Self {
        let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(cfg, &lens)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count changed");
        self.t += 1;
        let AdamConfig {
            learn_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= learn_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One optimizer step on a model, followed by decoder renormalization when
/// requested. Non-finite gradients abort with [`Error::Diverged`].
pub fn adam_step(
    model: &mut SaeModel,
    grads: &GradientSet,
    adam: &mut Adam,
    step: usize,
    decoder_renorm: bool,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged {
            step,
            last_finite: None,
        });
    }
    adam.update(model.tensors_mut(), grads.tensors());
    if decoder_renorm {
        model.renormalize_decoders();
    }
    if !model.is_finite() {
        return Err(Error::Diverged {
            step,
            last_finite: None,
        });
    }
    Ok(())
}
