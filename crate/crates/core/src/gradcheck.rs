//! Central finite-difference check of the full training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::sample_gradient;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Coordinates to sample; every parameter tensor gets at least one.
    pub coordinates: usize,
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates
    /// whose true gradient is ~0 are compared on an absolute scale.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coordinates: 200,
            step: 1e-5,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Moves every constant-initialised tensor (block scales and shifts, head
/// bias) off its initial value. At initialisation a shift of exactly 0 can
/// meet a conv output of exactly 0 where all inputs are dead ReLUs, which
/// puts a kink right at the evaluation point.
pub fn generic_point(params: &mut ModelParams, seed: u64, spread: f64) {
    let mut rng = Rng::new(seed).derive(&[crate::rng::key_of("generic-point")]);
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".scale") || name.ends_with(".shift") || name.ends_with(".bias") {
            for v in t.data_mut() {
                *v += spread * rng.normal();
            }
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Picks coordinates: a share proportional to tensor size, with at least
/// one per tensor, without repeats inside a tensor.
fn sample_coordinates(params: &ModelParams, total: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.tensors().iter().map(Tensor::numel).collect();
    let all: usize = sizes.iter().sum();
    let mut out = Vec::new();
    for (p, &n) in sizes.iter().enumerate() {
        let share = ((total as f64 * n as f64 / all as f64).ceil() as usize).clamp(1, n);
        for i in rng.permutation(n).into_iter().take(share) {
            out.push((p, i));
        }
    }
    out
}

/// Compares analytic gradients of `weight · CE + λ_F · penalty` on one
/// video with central differences, in inference mode.
pub fn check_video(
    model: &Model,
    frames: &[Tensor],
    label: usize,
    weight: f64,
    lambda_f: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    let analytic = sample_gradient(model, &model.params, frames, label, weight, lambda_f, None)?;
    let loss_at = |params: &ModelParams| -> Result<f64> {
        Ok(sample_gradient(model, params, frames, label, weight, lambda_f, None)?.loss)
    };
    let mut rng = Rng::new(cfg.seed);
    let mut params = model.params.clone();
    let mut checked = Vec::new();
    for (p, i) in sample_coordinates(&model.params, cfg.coordinates, &mut rng) {
        let orig = params.tensors()[p].data()[i];
        params.tensors_mut()[p].data_mut()[i] = orig + cfg.step;
        let up = loss_at(&params)?;
        params.tensors_mut()[p].data_mut()[i] = orig - cfg.step;
        let down = loss_at(&params)?;
        params.tensors_mut()[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic.grads[p][i];
        checked.push(CoordinateCheck {
            param: model.params.names()[p].clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.denominator_floor),
        });
    }
    let max_rel_error = checked.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checked,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn every_tensor_is_sampled() {
        let model = Model::new(ModelConfig::desk(), 1).unwrap();
        let coords = sample_coordinates(&model.params, 100, &mut Rng::new(2));
        assert!(coords.len() >= 100);
        for p in 0..model.params.len() {
            assert!(coords.iter().any(|&(q, _)| q == p));
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }
}
