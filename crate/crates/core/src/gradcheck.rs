//! Finite-difference verification of analytic gradients.
//!
//! For each selected tensor, a few coordinates are sampled, perturbed by
//! `+-step`, and the central difference of the adaptation loss is compared
//! against the analytic gradient from the tape. Relative error uses the
//! larger magnitude as the denominator, floored to dodge 0/0.

use std::collections::BTreeMap;

use rand::Rng;

use crate::backbone::{Backbone, BnMode};
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::peft::{adaptation_grads, adaptation_loss, LinearHead};
use crate::rng::named_rng;

/// Outcome for one tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensor: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Coordinates where both the finite difference and the analytic value sit
/// below this magnitude count as agreeing: some parameters are structurally
/// gradient-free (a key bias cancels inside softmax, a conv bias inside
/// batch-norm mean subtraction), and there a relative error would compare
/// rounding noise against rounding noise.
const ZERO_TOL: f64 = 1e-7;

/// Check `coords_per_tensor` random coordinates of every listed tensor (the
/// names `head.w` / `head.b` select the temporary classifier). Returns one
/// report per tensor; callers assert on `max_rel_err`.
#[allow(clippy::too_many_arguments)]
pub fn check_adaptation_grads(
    model: &Backbone,
    head: &LinearHead,
    data: &[LabeledExample],
    label_map: &BTreeMap<usize, usize>,
    tensors: &[String],
    bn_mode: BnMode,
    step: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    if model.frozen() {
        return Err(Error::config("gradient check needs a mutable model copy"));
    }
    let (_, grads) = adaptation_grads(model, head, data, label_map, bn_mode)?;
    let mut rng = named_rng(seed, "gradcheck");
    let mut reports = Vec::with_capacity(tensors.len());

    for name in tensors {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("no gradient recorded for tensor '{name}'")))?
            .clone();
        let len = analytic.len();
        let coords: Vec<usize> = (0..coords_per_tensor.min(len)).map(|_| rng.gen_range(0..len)).collect();

        let mut max_rel = 0.0f64;
        for &idx in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut h = head.clone();
                match name.as_str() {
                    "head.w" => h.w.as_slice_mut().unwrap()[idx] += delta,
                    "head.b" => h.b.as_slice_mut().unwrap()[idx] += delta,
                    _ => m.params_mut()?.get_mut(name).as_slice_mut().unwrap()[idx] += delta,
                }
                adaptation_loss(&m, &h, data, label_map, bn_mode)
            };
            let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[idx];
            if fd.abs() < ZERO_TOL && an.abs() < ZERO_TOL {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        reports.push(GradCheckReport {
            tensor: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}
