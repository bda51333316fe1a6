//! Flow-matching training and sampling.
//!
//! Paths interpolate linearly with noise at `t = 1`:
//! `x_t = (1−t)·x0 + t·ξ`, so the regression target is `ξ − x0`.
//! Samplers integrate `v` with Euler steps on a uniform descending grid,
//! optionally with classifier-free guidance.

mod model;
mod sampling;
mod stages;

use rand::Rng;
use rand_distr::StandardNormal;

pub use model::{batch_of, predict, ClassCond, FlowMlp, FlowMlpConfig, ForwardCounter, GaussianOracle, PointMass, VelocityModel};
pub use sampling::{cfg_velocity, combine_cfg, euler_from, euler_sample, initial_noise, time_grid};
pub use stages::{plan_stage, run_stage, table2_stages, validate_schedule, Example, StageConfig, StageData, StageName, StepRecord, Task};

use crate::error::{contract_err, dim_err, Result};
use crate::mmdit::{Mmdit, TokenStream};
use crate::tensor::{clip_grad_norm, Adam, Graph, Tensor, Var};
use crate::vae::LatentImage;

/// `(1−t)·x0 + t·ξ`.
pub fn interpolate(x0: &Tensor, xi: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return contract_err("interpolate", format!("t = {t} outside [0, 1]"));
    }
    if x0.shape() != xi.shape() {
        return dim_err("interpolate", format!("{:?} vs {:?}", x0.shape(), xi.shape()));
    }
    x0.zip(xi, |a, b| (1.0 - t) * a + t * b)
}

/// Distribution of training times, always strictly inside (0, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSampler {
    Uniform,
    LogitNormal { mu: f64, sigma: f64 },
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self::LogitNormal { mu: 0.0, sigma: 1.0 }
    }
}

impl TimeSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let t = match *self {
                Self::Uniform => rng.gen::<f64>(),
                Self::LogitNormal { mu, sigma } => {
                    let z: f64 = rng.sample(StandardNormal);
                    1.0 / (1.0 + (-(mu + sigma * z)).exp())
                }
            };
            if t > 0.0 && t < 1.0 {
                return t;
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "logit_normal" => Ok(Self::default()),
            other => Err(crate::Error::Config(format!("unknown time sampler `{other}`"))),
        }
    }
}

/// Mean squared error between `v_θ(x_t, t, c)` and `ξ − x0` for given
/// noise, times and dropout decisions.
pub fn fm_loss_with<M: VelocityModel>(model: &M, g: &mut Graph, x0: &Tensor, xi: &Tensor, t: &[f64], conds: &[&M::Cond], dropped: &[bool]) -> Result<Var> {
    if x0.shape() != xi.shape() || x0.shape()[0] != t.len() {
        return dim_err("fm_loss", format!("x0 {:?}, noise {:?}, {} times", x0.shape(), xi.shape(), t.len()));
    }
    let per = x0.numel() / t.len();
    let mut xt = x0.clone();
    for (i, chunk) in xt.data_mut().chunks_mut(per).enumerate() {
        let ti = t[i];
        for (v, &n) in chunk.iter_mut().zip(&xi.data()[i * per..(i + 1) * per]) {
            *v = (1.0 - ti) * *v + ti * n;
        }
    }
    let target = xi.zip(x0, |n, x| n - x)?;
    let xv = g.constant(xt);
    let v = model.velocity(g, xv, t, conds, dropped)?;
    let tv = g.constant(target);
    let d = g.sub(v, tv)?;
    let d = g.square(d)?;
    g.mean(d)
}

/// Flow-matching loss on a batch with sampled times, noise and dropout.
pub fn fm_loss<M: VelocityModel, R: Rng>(model: &M, g: &mut Graph, x0: &[&Tensor], conds: &[&M::Cond], sampler: &TimeSampler, dropout_p: f64, rng: &mut R) -> Result<Var> {
    let x0 = batch_of(x0)?;
    let xi = Tensor::randn(x0.shape(), 1.0, rng);
    let t: Vec<f64> = (0..conds.len()).map(|_| sampler.sample(rng)).collect();
    let dropped: Vec<bool> = (0..conds.len()).map(|_| rng.gen_bool(dropout_p.clamp(0.0, 1.0))).collect();
    fm_loss_with(model, g, &x0, &xi, &t, conds, &dropped)
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One optimizer step of flow matching with global-norm clipping.
#[allow(clippy::too_many_arguments)]
pub fn fm_train_step<M: VelocityModel, R: Rng>(
    model: &mut M,
    adam: &mut Adam,
    grad_clip: f64,
    x0: &[&Tensor],
    conds: &[&M::Cond],
    sampler: &TimeSampler,
    dropout_p: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let loss = fm_loss(model, &mut g, x0, conds, sampler, dropout_p, rng)?;
    let grads = g.backward(loss)?;
    let mut gs = model.params().grads(&g, &grads);
    let (grad_norm, clipped_norm) = clip_grad_norm(&mut gs, grad_clip);
    adam.step(model.params_mut(), &gs);
    Ok(StepOutcome {
        loss: g.value(loss).data()[0],
        grad_norm,
        clipped_norm,
    })
}

/// TI2I stream: `[noisy target][clean sources][text]`. With no sources it
/// is the T2I stream.
pub fn ti2i_forward_packing(model: &Mmdit, sources: &[&LatentImage], target: &LatentImage, text: &str) -> Result<TokenStream> {
    let emb = model.embed_text(text)?;
    model.build_stream(Some(&emb), Some(target), sources)
}

#[cfg(test)]
mod tests;
