//! Central-difference gradient check in f64.

use rand::Rng;

use super::encoder::{mlm_loss_and_grad, mlm_loss_value, Batch, Encoder};
use super::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::rng;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub eps: f64,
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `sample_size` parameters (at least one), spread round-robin over
/// tensors with a random element inside each.
pub fn finite_difference_check(
    ckpt: &ModelCheckpoint,
    batch: &Batch,
    targets: &[u32],
    loss_mask: &[bool],
    eps: f64,
    sample_size: usize,
    seed: u64,
) -> Result<GradCheck> {
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-5, 1e-3]")));
    }
    let mut params: Vec<f64> = ckpt.params.iter().map(|&v| v as f64).collect();
    let (_, grads) = {
        let enc = Encoder::new(&ckpt.config, &ckpt.layout, &params);
        mlm_loss_and_grad(&enc, batch, targets, loss_mask)?
    };

    let entries = ckpt.layout.entries();
    let mut r = rng::seeded(seed);
    let mut samples = Vec::new();
    for i in 0..sample_size.max(1) {
        let e = &entries[i % entries.len()];
        let idx = e.range.start + r.random_range(0..e.range.len());
        let orig = params[idx];
        params[idx] = orig + eps;
        let plus = mlm_loss_value(&Encoder::new(&ckpt.config, &ckpt.layout, &params), batch, targets, loss_mask)?;
        params[idx] = orig - eps;
        let minus = mlm_loss_value(&Encoder::new(&ckpt.config, &ckpt.layout, &params), batch, targets, loss_mask)?;
        params[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        samples.push(GradSample {
            tensor: e.name.clone(),
            index: idx - e.range.start,
            analytic: grads[idx],
            numeric,
            rel_error: relative_error(grads[idx], numeric),
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheck {
        eps,
        max_rel_error,
        samples,
    })
}
