use rand::Rng;

use super::model::{predict, VelocityModel};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// `v_u + w·(v_c − v_u)`.
///
/// `w = 1` evaluates only the conditional branch and `w = 0` only the
/// unconditional one, so those cases are exact and skip a forward.
pub fn cfg_velocity<M: VelocityModel>(model: &M, x: &Tensor, t: &[f64], conds: &[&M::Cond], w: f64) -> Result<Tensor> {
    if !(w >= 0.0) {
        return contract_err("cfg_velocity", format!("guidance scale {w} must be >= 0"));
    }
    let b = conds.len();
    if w == 1.0 {
        return predict(model, x, t, conds, &vec![false; b]);
    }
    if w == 0.0 {
        return predict(model, x, t, conds, &vec![true; b]);
    }
    let vc = predict(model, x, t, conds, &vec![false; b])?;
    let vu = predict(model, x, t, conds, &vec![true; b])?;
    combine_cfg(&vc, &vu, w)
}

pub fn combine_cfg(vc: &Tensor, vu: &Tensor, w: f64) -> Result<Tensor> {
    vu.zip(vc, |u, c| u + w * (c - u))
}

/// Uniform descending grid `1 = t_0 > t_1 > … > t_N = 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

/// Standard-normal starting noise for `b` samples of the model's shape.
pub fn initial_noise<M: VelocityModel, R: Rng>(model: &M, b: usize, rng: &mut R) -> Tensor {
    let mut shape = vec![b];
    shape.extend(model.sample_shape());
    Tensor::randn(&shape, 1.0, rng)
}

/// Euler integration `x ← x − Δt·v` from `x_init` at t = 1 down to t = 0.
pub fn euler_from<M: VelocityModel>(model: &M, x_init: Tensor, conds: &[&M::Cond], steps: usize, w: f64) -> Result<Tensor> {
    if steps == 0 {
        return contract_err("euler_sample", "steps must be >= 1");
    }
    let grid = time_grid(steps);
    let b = conds.len();
    let mut x = x_init;
    for k in 0..steps {
        let (t, t_next) = (grid[k], grid[k + 1]);
        let v = cfg_velocity(model, &x, &vec![t; b], conds, w)?;
        let dt = t - t_next;
        x = x.zip(&v, |xv, vv| xv - dt * vv)?;
    }
    Ok(x)
}

/// Draws `ξ ~ N(0, I)` and integrates it to a sample per condition.
pub fn euler_sample<M: VelocityModel, R: Rng>(model: &M, conds: &[&M::Cond], steps: usize, w: f64, rng: &mut R) -> Result<Tensor> {
    if steps == 0 {
        return contract_err("euler_sample", "steps must be >= 1");
    }
    let x = initial_noise(model, conds.len(), rng);
    euler_from(model, x, conds, steps, w)
}
