//! Group-relative policy optimization over the flow sampler.
//!
//! Rollouts use a stochastic Euler sampler, `x' = x − Δt·v̄ + σ·√Δt·z`,
//! where `v̄ = v_u + w·(v_c − v_u)` is the guided velocity. The rollout
//! stores `v_u`; the objective recomputes only `v_c` and treats the stored
//! null-text velocity as a constant, so the objective never runs the
//! unconditional branch and the ratio is exactly 1 on-policy.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::evalkit::classify::shape_probabilities;
use crate::evalkit::corpus::portrait_face_region;
use crate::flowmatch::{combine_cfg, predict, time_grid, VelocityModel};
use crate::tensor::{clip_grad_norm, Adam, Graph, Tensor, Var};

/// Added to the group standard deviation before dividing.
pub const ADV_EPS: f64 = 1e-6;
/// Groups with a smaller standard deviation get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub steps: usize,
    pub w_cfg: f64,
    pub sde_sigma: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            w_cfg: 2.0,
            sde_sigma: 0.3,
        }
    }
}

/// One stochastic sampler trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub seed: u64,
    /// `steps + 1` states from pure noise to the final sample.
    pub states: Vec<Tensor>,
    /// Standard-normal draws `z` per step.
    pub noises: Vec<Tensor>,
    /// Step log-likelihoods under the rollout policy.
    pub logp_old: Vec<f64>,
    /// Null-text velocity per step; empty when `w_cfg == 1`.
    pub v_uncond: Vec<Tensor>,
    pub reward: f64,
    pub advantage: f64,
}

impl Trajectory {
    pub fn final_sample(&self) -> &Tensor {
        self.states.last().expect("at least one state")
    }
}

/// `G` trajectories sharing one condition.
#[derive(Clone, Debug)]
pub struct RolloutGroup<C> {
    pub cond: C,
    pub cfg: RolloutConfig,
    pub times: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

fn gaussian_logp(x_next: &[f64], mean: &[f64], var: f64) -> f64 {
    x_next.iter().zip(mean).map(|(x, m)| -(x - m).powi(2) / (2.0 * var)).sum()
}

/// Runs `seeds.len()` trajectories for `cond`, one rng per seed.
pub fn rollout<M: VelocityModel>(model: &M, cond: &M::Cond, seeds: &[u64], cfg: &RolloutConfig) -> Result<RolloutGroup<M::Cond>>
where
    M::Cond: Clone,
{
    let g = seeds.len();
    if g < 2 {
        return contract_err("rollout", format!("group size {g} < 2"));
    }
    if cfg.steps == 0 || !(cfg.w_cfg >= 0.0) || !(cfg.sde_sigma >= 0.0) {
        return contract_err("rollout", "need steps >= 1, w_cfg >= 0, sde_sigma >= 0");
    }
    let shape = model.sample_shape();
    let n: usize = shape.iter().product();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut batch_shape = vec![g];
    batch_shape.extend(&shape);
    let mut x_data = Vec::with_capacity(g * n);
    for r in rngs.iter_mut() {
        x_data.extend(Tensor::randn(&shape, 1.0, r).into_data());
    }
    let mut x = Tensor::new(batch_shape.clone(), x_data)?;
    let times = time_grid(cfg.steps);
    let conds = vec![cond; g];
    let mut trajs: Vec<Trajectory> = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| Trajectory {
            seed,
            states: vec![x.index0(i)],
            noises: Vec::new(),
            logp_old: Vec::new(),
            v_uncond: Vec::new(),
            reward: 0.0,
            advantage: 0.0,
        })
        .collect();
    for k in 0..cfg.steps {
        let (t, dt) = (times[k], times[k] - times[k + 1]);
        let tv = vec![t; g];
        let vc = predict(model, &x, &tv, &conds, &vec![false; g])?;
        let vu = if cfg.w_cfg == 1.0 { None } else { Some(predict(model, &x, &tv, &conds, &vec![true; g])?) };
        let v = match &vu {
            None => vc,
            Some(vu) => combine_cfg(&vc, vu, cfg.w_cfg)?,
        };
        let std = cfg.sde_sigma * dt.sqrt();
        let mut next = Vec::with_capacity(g * n);
        for (i, traj) in trajs.iter_mut().enumerate() {
            let z = Tensor::randn(&shape, 1.0, &mut rngs[i]);
            let xi = &x.data()[i * n..(i + 1) * n];
            let row: Vec<f64> = (0..n).map(|j| xi[j] - dt * v.data()[i * n + j] + std * z.data()[j]).collect();
            let mean: Vec<f64> = (0..n).map(|j| xi[j] - dt * v.data()[i * n + j]).collect();
            traj.logp_old.push(if std > 0.0 { gaussian_logp(&row, &mean, std * std) } else { 0.0 });
            if let Some(vu) = &vu {
                traj.v_uncond.push(vu.index0(i));
            }
            traj.states.push(Tensor::new(shape.clone(), row.clone())?);
            traj.noises.push(z);
            next.extend(row);
        }
        x = Tensor::new(batch_shape.clone(), next)?;
    }
    Ok(RolloutGroup {
        cond: cond.clone(),
        cfg: cfg.clone(),
        times,
        trajectories: trajs,
    })
}

/// Guided transition mean of step `k`, recomputed from stored inputs.
pub fn replay_step<M: VelocityModel>(model: &M, group: &RolloutGroup<M::Cond>, k: usize) -> Result<Tensor> {
    let g = group.trajectories.len();
    let xs: Vec<Tensor> = group.trajectories.iter().map(|t| t.states[k].clone()).collect();
    let x = Tensor::stack(&xs)?;
    let conds = vec![&group.cond; g];
    let tv = vec![group.times[k]; g];
    let vc = predict(model, &x, &tv, &conds, &vec![false; g])?;
    let v = if group.cfg.w_cfg == 1.0 {
        vc
    } else {
        let vu = predict(model, &x, &tv, &conds, &vec![true; g])?;
        combine_cfg(&vc, &vu, group.cfg.w_cfg)?
    };
    let dt = group.times[k] - group.times[k + 1];
    let std = group.cfg.sde_sigma * dt.sqrt();
    let mut out = x.zip(&v, |a, b| a - dt * b)?;
    for (i, traj) in group.trajectories.iter().enumerate() {
        let n = traj.noises[k].numel();
        for (o, z) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(traj.noises[k].data()) {
            *o += std * z;
        }
    }
    Ok(out)
}

/// `(r − mean)/(std + 1e-6)` with population std; all zeros when the
/// group is degenerate.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return contract_err("compute_advantages", format!("group size {} < 2", rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
}

/// Per-term value of `min(ρ·a, clip(ρ, 1−ε, 1+ε)·a)`.
pub fn clipped_term(rho: f64, a: f64, eps: f64) -> f64 {
    (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a)
}

fn is_clipped(rho: f64, a: f64, eps: f64) -> bool {
    (a > 0.0 && rho > 1.0 + eps) || (a < 0.0 && rho < 1.0 - eps)
}

/// Negated clipped-ratio objective, averaged over steps and trajectories.
/// Only conditional forwards are evaluated.
pub fn policy_loss<M: VelocityModel>(g: &mut Graph, model: &M, group: &RolloutGroup<M::Cond>, clip_eps: f64) -> Result<Var> {
    let steps = group.cfg.steps;
    let gs = group.trajectories.len();
    if group.cfg.sde_sigma <= 0.0 {
        return contract_err("policy_loss", "step likelihoods need sde_sigma > 0");
    }
    for tr in &group.trajectories {
        let vu_ok = if group.cfg.w_cfg == 1.0 { tr.v_uncond.is_empty() } else { tr.v_uncond.len() == steps };
        if tr.noises.len() != steps || tr.states.len() != steps + 1 || tr.logp_old.len() != steps || !vu_ok {
            return contract_err("policy_loss", format!("trajectory {} is missing stored noises or states", tr.seed));
        }
    }
    let shape = model.sample_shape();
    let n: usize = shape.iter().product();
    let adv: Vec<f64> = group.trajectories.iter().map(|t| t.advantage).collect();
    let conds = vec![&group.cond; gs];
    let mut terms = Vec::with_capacity(steps);
    for k in 0..steps {
        let dt = group.times[k] - group.times[k + 1];
        let var = group.cfg.sde_sigma.powi(2) * dt;
        let xs: Vec<Tensor> = group.trajectories.iter().map(|t| t.states[k].clone()).collect();
        let nexts: Vec<Tensor> = group.trajectories.iter().map(|t| t.states[k + 1].clone()).collect();
        let x = g.constant(Tensor::stack(&xs)?);
        let vc = model.velocity(g, x, &vec![group.times[k]; gs], &conds, &vec![false; gs])?;
        let v = if group.cfg.w_cfg == 1.0 {
            vc
        } else {
            let w = group.cfg.w_cfg;
            let vus: Vec<Tensor> = group.trajectories.iter().map(|t| t.v_uncond[k].clone()).collect();
            let vu = g.constant(Tensor::stack(&vus)?.map(|u| (1.0 - w) * u));
            let vc = g.scale(vc, w)?;
            g.add(vc, vu)?
        };
        let step = g.scale(v, dt)?;
        let mean = g.sub(x, step)?;
        let target = g.constant(Tensor::stack(&nexts)?);
        let d = g.sub(target, mean)?;
        let d = g.square(d)?;
        let d = g.reshape(d, &[gs, n])?;
        let sq = g.sum_axis(d, 1)?;
        let logp = g.scale(sq, -1.0 / (2.0 * var))?;
        let old = g.constant(Tensor::new(vec![gs], group.trajectories.iter().map(|t| t.logp_old[k]).collect())?);
        let log_ratio = g.sub(logp, old)?;
        let lr_val = g.value(log_ratio).clone();
        let rho_val: Vec<f64> = lr_val.data().iter().map(|l| l.exp()).collect();
        let mask: Vec<f64> = (0..gs).map(|i| if is_clipped(rho_val[i], adv[i], clip_eps) { 0.0 } else { 1.0 }).collect();
        let mask_v = g_const(g, &mask)?;
        let masked_lr = g.mul(log_ratio, mask_v)?;
        let rho = g.exp(masked_lr)?;
        let coef: Vec<f64> = (0..gs).map(|i| adv[i] * mask[i]).collect();
        let coef_v = g_const(g, &coef)?;
        let live = g.mul(rho, coef_v)?;
        let fixed: Vec<f64> = (0..gs).map(|i| (1.0 - mask[i]) * clipped_term(rho_val[i], adv[i], clip_eps)).collect();
        let fixed_v = g_const(g, &fixed)?;
        let term = g.add(live, fixed_v)?;
        terms.push(term);
    }
    let all = g.concat(&terms, 0)?;
    let m = g.mean(all)?;
    g.scale(m, -1.0)
}

fn g_const(g: &mut Graph, v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(vec![v.len()], v.to_vec())?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub rollout: RolloutConfig,
    pub clip_eps: f64,
    pub lr: f64,
    pub grad_clip: f64,
    /// Policy updates per batch of rollouts.
    pub inner_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            rollout: RolloutConfig::default(),
            clip_eps: 0.2,
            lr: 1e-4,
            grad_clip: 1.0,
            inner_steps: 1,
        }
    }
}

/// One GRPO iteration's log line.
#[derive(Clone, Debug, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Null-condition forwards made while evaluating the objective.
    pub objective_uncond_forwards: usize,
    pub rollout_uncond_forwards: usize,
}

/// Rollouts, rewards, advantages and policy updates.
pub struct GrpoTrainer {
    pub cfg: GrpoConfig,
    adam: Adam,
    iteration: usize,
    seed_counter: u64,
}

impl GrpoTrainer {
    pub fn new(cfg: GrpoConfig, seed: u64) -> Result<Self> {
        if cfg.group_size < 2 || cfg.inner_steps == 0 || !(cfg.clip_eps > 0.0) || !(cfg.lr > 0.0) {
            return Err(Error::Config("rlhf needs group_size >= 2, inner_steps >= 1, positive clip_eps and lr".into()));
        }
        Ok(Self {
            adam: Adam::new(cfg.lr),
            cfg,
            iteration: 0,
            seed_counter: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        })
    }

    /// One iteration over `conds`; `reward` scores a final sample.
    pub fn iterate<M, F>(&mut self, model: &mut M, conds: &[M::Cond], mut reward: F) -> Result<IterationLog>
    where
        M: VelocityModel,
        M::Cond: Clone,
        F: FnMut(&Tensor, &M::Cond) -> Result<f64>,
    {
        let (_, u0) = model.counter().snapshot();
        let mut groups = Vec::with_capacity(conds.len());
        let mut total = 0.0;
        for cond in conds {
            let seeds: Vec<u64> = (0..self.cfg.group_size)
                .map(|_| {
                    self.seed_counter = self.seed_counter.wrapping_add(1);
                    self.seed_counter
                })
                .collect();
            let mut group = rollout(model, cond, &seeds, &self.cfg.rollout)?;
            let rewards = group.trajectories.iter().map(|t| reward(t.final_sample(), cond)).collect::<Result<Vec<f64>>>()?;
            total += rewards.iter().sum::<f64>();
            for (t, (r, a)) in group.trajectories.iter_mut().zip(rewards.iter().zip(compute_advantages(&rewards)?)) {
                t.reward = *r;
                t.advantage = a;
            }
            groups.push(group);
        }
        let (_, u1) = model.counter().snapshot();
        let (mut loss_val, mut norm) = (0.0, 0.0);
        for _ in 0..self.cfg.inner_steps {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(groups.len());
            for group in &groups {
                losses.push(policy_loss(&mut g, model, group, self.cfg.clip_eps)?);
            }
            let all = g.concat(&losses, 0)?;
            let loss = g.mean(all)?;
            loss_val = g.value(loss).data()[0];
            let back = g.backward(loss)?;
            let mut grads = model.params().grads(&g, &back);
            norm = clip_grad_norm(&mut grads, self.cfg.grad_clip).0;
            self.adam.step(model.params_mut(), &grads);
        }
        let (_, u2) = model.counter().snapshot();
        self.iteration += 1;
        Ok(IterationLog {
            iteration: self.iteration,
            mean_reward: total / (conds.len() * self.cfg.group_size) as f64,
            loss: loss_val,
            grad_norm: norm,
            objective_uncond_forwards: u2 - u1,
            rollout_uncond_forwards: u1 - u0,
        })
    }
}

/// Reward dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardDim {
    Aesthetic,
    Alignment,
    Portrait,
    InstructionFollowing,
    VisualConsistency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTask {
    T2i,
    Ti2i,
}

impl RewardTask {
    pub fn dims(&self) -> &'static [RewardDim] {
        match self {
            Self::T2i => &[RewardDim::Aesthetic, RewardDim::Alignment, RewardDim::Portrait],
            Self::Ti2i => &[RewardDim::InstructionFollowing, RewardDim::VisualConsistency],
        }
    }
}

impl RewardDim {
    pub const ALL: [RewardDim; 5] = [Self::Aesthetic, Self::Alignment, Self::Portrait, Self::InstructionFollowing, Self::VisualConsistency];
}

/// Inputs for the toy scorers. Images are `[3, H, W]` in `[−1, 1]`.
#[derive(Clone, Debug)]
pub enum RewardInput<'a> {
    T2i {
        image: &'a Tensor,
        /// Shape class named by the prompt.
        label: usize,
        classes: usize,
    },
    Ti2i {
        source: &'a Tensor,
        edited: &'a Tensor,
        target_label: usize,
        classes: usize,
        /// `[H, W]` with 1 on pixels the edit must leave unchanged.
        unedited_mask: Option<&'a Tensor>,
    },
}

fn rgb(img: &Tensor) -> Result<(usize, usize, &[f64])> {
    match *img.shape() {
        [3, h, w] => Ok((h, w, img.data())),
        _ => dim_err("reward", format!("expected [3, H, W], got {:?}", img.shape())),
    }
}

/// Contrast and saturation proxy in `[0, 1]`.
pub fn aesthetic_score(img: &Tensor) -> Result<f64> {
    let (h, w, d) = rgb(img)?;
    let n = h * w;
    let to01 = |v: f64| ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    let lum: Vec<f64> = (0..n).map(|i| to01(0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])).collect();
    let mean = lum.iter().sum::<f64>() / n as f64;
    let std = (lum.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let sat = (0..n)
        .map(|i| {
            let c = [to01(d[i]), to01(d[n + i]), to01(d[2 * n + i])];
            c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min)
        })
        .sum::<f64>()
        / n as f64;
    Ok((0.5 * (2.0 * std).min(1.0) + 0.5 * sat).clamp(0.0, 1.0))
}

/// Left–right symmetry of the face region, `1 − mean|p − mirror(p)|/2`.
pub fn portrait_score(img: &Tensor) -> Result<f64> {
    let (h, w, d) = rgb(img)?;
    if h != w {
        return dim_err("portrait_reward", format!("portraits are square, got {h}×{w}"));
    }
    let (x0, y0, rw, rh) = portrait_face_region(h);
    let mut acc = 0.0;
    let mut count = 0.0f64;
    for c in 0..3 {
        for y in y0..(y0 + rh).min(h) {
            for dx in 0..rw {
                let (xa, xb) = (x0 + dx, x0 + rw - 1 - dx);
                if xb >= w || xa >= w {
                    continue;
                }
                acc += (d[c * h * w + y * w + xa] - d[c * h * w + y * w + xb]).abs();
                count += 1.0;
            }
        }
    }
    Ok((1.0 - acc / count.max(1.0) / 2.0).clamp(0.0, 1.0))
}

/// `1 − RMS(edited − source)/2` over the unedited mask.
pub fn consistency_score(source: &Tensor, edited: &Tensor, mask: &Tensor) -> Result<f64> {
    let (h, w, s) = rgb(source)?;
    let (_, _, e) = rgb(edited)?;
    if edited.shape() != source.shape() || mask.shape() != [h, w] {
        return dim_err("visual_consistency", format!("{:?}, {:?}, mask {:?}", source.shape(), edited.shape(), mask.shape()));
    }
    let (mut acc, mut count) = (0.0, 0.0);
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m > 0.5 {
                acc += (e[c * h * w + i] - s[c * h * w + i]).powi(2);
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - (acc / count).sqrt() / 2.0).clamp(0.0, 1.0))
}

/// Mean pixel brightness in `[0, 1]`.
pub fn brightness_score(img: &Tensor) -> Result<f64> {
    Ok(img.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).sum::<f64>() / img.numel().max(1) as f64)
}

/// Raw toy scores for every dimension the input's task covers.
pub fn toy_reward_suite(input: &RewardInput) -> Result<BTreeMap<RewardDim, f64>> {
    let mut out = BTreeMap::new();
    match *input {
        RewardInput::T2i { image, label, classes } => {
            out.insert(RewardDim::Aesthetic, aesthetic_score(image)?);
            out.insert(RewardDim::Alignment, shape_probabilities(image, classes)?.get(label).copied().unwrap_or(0.0));
            out.insert(RewardDim::Portrait, portrait_score(image)?);
        }
        RewardInput::Ti2i { source, edited, target_label, classes, unedited_mask } => {
            let Some(mask) = unedited_mask else {
                return contract_err("toy_reward_suite", "TI2I reward needs an unedited-region mask");
            };
            out.insert(RewardDim::InstructionFollowing, shape_probabilities(edited, classes)?.get(target_label).copied().unwrap_or(0.0));
            out.insert(RewardDim::VisualConsistency, consistency_score(source, edited, mask)?);
        }
    }
    Ok(out)
}

/// Named scalar scorers.
#[derive(Default)]
pub struct RewardRegistry {
    scorers: BTreeMap<String, Box<dyn Fn(&Tensor) -> Result<f64> + Send + Sync>>,
}

impl RewardRegistry {
    /// Registry with `aesthetic`, `portrait` and `brightness`.
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register("aesthetic", aesthetic_score);
        r.register("portrait", portrait_score);
        r.register("brightness", brightness_score);
        r
    }

    pub fn register(&mut self, name: &str, f: impl Fn(&Tensor) -> Result<f64> + Send + Sync + 'static) {
        self.scorers.insert(name.to_string(), Box::new(f));
    }

    pub fn score(&self, name: &str, img: &Tensor) -> Result<f64> {
        match self.scorers.get(name) {
            Some(f) => f(img),
            None => Err(Error::Config(format!("unknown reward `{name}`"))),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.scorers.keys().map(String::as_str).collect()
    }
}

/// Min–max rescaling with running extremes per dimension.
#[derive(Clone, Debug, Default)]
pub struct Calibrator {
    ranges: BTreeMap<RewardDim, (f64, f64)>,
}

impl Calibrator {
    pub fn observe(&mut self, dim: RewardDim, raw: f64) {
        let e = self.ranges.entry(dim).or_insert((raw, raw));
        e.0 = e.0.min(raw);
        e.1 = e.1.max(raw);
    }

    /// Rescaled score in `[0, 1]`; the raw value clamped until a range exists.
    pub fn calibrate(&self, dim: RewardDim, raw: f64) -> f64 {
        match self.ranges.get(&dim) {
            Some(&(lo, hi)) if hi - lo > 1e-12 => ((raw - lo) / (hi - lo)).clamp(0.0, 1.0),
            _ => raw.clamp(0.0, 1.0),
        }
    }
}

/// Calibrated scores with their weights for one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardVector {
    pub task: RewardTask,
    pub scores: BTreeMap<RewardDim, f64>,
    pub weights: BTreeMap<RewardDim, f64>,
}

impl RewardVector {
    /// Builds a vector for `task`, rejecting scores outside its dimensions.
    pub fn new(task: RewardTask, raw: &BTreeMap<RewardDim, f64>, cal: &mut Calibrator, weights: &BTreeMap<RewardDim, f64>) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (&dim, &v) in raw {
            if !task.dims().contains(&dim) {
                return contract_err("reward_vector", format!("{dim:?} is not scored for {task:?}"));
            }
            cal.observe(dim, v);
            scores.insert(dim, cal.calibrate(dim, v));
        }
        let weights = task.dims().iter().map(|d| (*d, weights.get(d).copied().unwrap_or(0.0))).collect();
        Ok(Self { task, scores, weights })
    }

    /// Weighted mean over the task's dimensions, in `[0, 1]`.
    pub fn total(&self) -> f64 {
        let wsum: f64 = self.weights.values().sum();
        if wsum <= 0.0 {
            return 0.0;
        }
        self.weights.iter().map(|(d, w)| w * self.scores.get(d).copied().unwrap_or(0.0)).sum::<f64>() / wsum
    }
}

/// Uniform weights over every dimension.
pub fn uniform_weights() -> BTreeMap<RewardDim, f64> {
    RewardDim::ALL.iter().map(|d| (*d, 1.0 / RewardDim::ALL.len() as f64)).collect()
}

/// Multiplies the weight of the dimension with the highest gain by `gamma`
/// and renormalizes. Ties leave the weights as they are.
pub fn reweight(weights: &BTreeMap<RewardDim, f64>, gains: &BTreeMap<RewardDim, f64>, gamma: f64) -> Result<BTreeMap<RewardDim, f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return contract_err("reweight", format!("decay {gamma} outside (0, 1)"));
    }
    let mut out = weights.clone();
    let top = gains.iter().filter(|(d, _)| weights.contains_key(d)).max_by(|a, b| a.1.total_cmp(b.1));
    let lo = gains.values().cloned().fold(f64::INFINITY, f64::min);
    if let Some((dim, &g)) = top {
        if g - lo > 1e-12 {
            *out.get_mut(dim).expect("filtered") *= gamma;
        }
    }
    let s: f64 = out.values().sum();
    if s <= 0.0 {
        return contract_err("reweight", "weights sum to zero");
    }
    out.values_mut().for_each(|w| *w /= s);
    Ok(out)
}

/// Exponential moving averages of per-dimension scores and their changes.
#[derive(Clone, Debug)]
pub struct RewardTracker {
    pub decay: f64,
    mean: BTreeMap<RewardDim, f64>,
    gain: BTreeMap<RewardDim, f64>,
}

impl RewardTracker {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            mean: BTreeMap::new(),
            gain: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, scores: &BTreeMap<RewardDim, f64>) {
        for (&d, &v) in scores {
            match self.mean.get(&d).copied() {
                Some(m) => {
                    let next = self.decay * m + (1.0 - self.decay) * v;
                    let g = self.gain.entry(d).or_insert(0.0);
                    *g = self.decay * *g + (1.0 - self.decay) * (next - m);
                    self.mean.insert(d, next);
                }
                None => {
                    self.mean.insert(d, v);
                    self.gain.insert(d, 0.0);
                }
            }
        }
    }

    pub fn gains(&self) -> &BTreeMap<RewardDim, f64> {
        &self.gain
    }

    pub fn means(&self) -> &BTreeMap<RewardDim, f64> {
        &self.mean
    }
}

/// Per-task prompt sampling weights `∝ exp(−β·mean reward)`, floored so no
/// task is starved.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub t2i: f64,
    pub ti2i: f64,
}

impl TaskWeights {
    pub const FLOOR: f64 = 0.1;

    pub fn update(t2i_mean: f64, ti2i_mean: f64, beta: f64) -> Self {
        let (a, b) = ((-beta * t2i_mean).exp(), (-beta * ti2i_mean).exp());
        let t2i = (a / (a + b)).clamp(Self::FLOOR, 1.0 - Self::FLOOR);
        Self { t2i, ti2i: 1.0 - t2i }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> RewardTask {
        if rng.gen_bool(self.t2i) {
            RewardTask::T2i
        } else {
            RewardTask::Ti2i
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::{ClassCond, FlowMlp, FlowMlpConfig};

    fn mlp() -> FlowMlp {
        FlowMlp::new(FlowMlpConfig { hidden: 16, layers: 2, ..Default::default() }, 1)
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[0.3; 5]).unwrap(), vec![0.0; 5]);
        let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        for (x, e) in a.iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((x - e).abs() < 1e-5);
        }
        assert!(compute_advantages(&[1.0]).is_err());
    }

    #[test]
    fn deterministic_limit_gives_identical_trajectories() {
        let m = mlp();
        let cfg = RolloutConfig { steps: 5, w_cfg: 2.0, sde_sigma: 0.0 };
        let g = rollout(&m, &ClassCond(0), &[7, 7, 7], &cfg).unwrap();
        let f = g.trajectories[0].final_sample();
        assert!(g.trajectories.iter().all(|t| t.final_sample() == f));
        assert!(rollout(&m, &ClassCond(0), &[7], &cfg).is_err());
    }

    #[test]
    fn replay_reproduces_states() {
        let m = mlp();
        let cfg = RolloutConfig { steps: 4, ..Default::default() };
        let g = rollout(&m, &ClassCond(1), &[1, 2, 3, 4], &cfg).unwrap();
        for k in 0..4 {
            let next = replay_step(&m, &g, k).unwrap();
            for (i, t) in g.trajectories.iter().enumerate() {
                assert!(next.index0(i).max_abs_diff(&t.states[k + 1]) < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_uses_one_uncond_forward_per_step_and_objective_none() {
        let m = mlp();
        let cfg = RolloutConfig { steps: 6, w_cfg: 2.0, sde_sigma: 0.3 };
        let mut g = rollout(&m, &ClassCond(0), &[1, 2, 3], &cfg).unwrap();
        assert_eq!(m.counter().snapshot(), (18, 18));
        for (t, a) in g.trajectories.iter_mut().zip([1.0, -0.5, -0.5]) {
            t.advantage = a;
        }
        let mut graph = Graph::new();
        let loss = policy_loss(&mut graph, &m, &g, 0.2).unwrap();
        assert_eq!(m.counter().snapshot(), (36, 18));
        // On-policy: ρ = 1, so the loss is −mean(a) = 0.
        assert!(graph.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn missing_noises_are_rejected() {
        let m = mlp();
        let mut g = rollout(&m, &ClassCond(0), &[1, 2], &RolloutConfig { steps: 3, ..Default::default() }).unwrap();
        g.trajectories[1].noises.pop();
        let mut graph = Graph::new();
        assert!(matches!(policy_loss(&mut graph, &m, &g, 0.2), Err(Error::Contract { .. })));
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_term(2.0, 1.0, 0.2), 1.2);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_term(2.0, -1.0, 0.2), -2.0);
        assert_eq!(clipped_term(1.1, 1.0, 0.2), 1.1);
    }

    #[test]
    fn off_policy_loss_matches_scalar_oracle() {
        let m = mlp();
        let cfg = RolloutConfig { steps: 3, w_cfg: 1.0, sde_sigma: 0.3 };
        let mut g = rollout(&m, &ClassCond(0), &[5, 6, 7, 8], &cfg).unwrap();
        let adv = [1.0, -1.0, 0.5, -0.5];
        for (t, a) in g.trajectories.iter_mut().zip(adv) {
            t.advantage = a;
            // Shift the stored likelihoods so ratios leave the clip band.
            for (k, l) in t.logp_old.iter_mut().enumerate() {
                *l -= 0.3 * (k as f64 - 1.0) * a;
            }
        }
        let mut graph = Graph::new();
        let lv = policy_loss(&mut graph, &m, &g, 0.2).unwrap();
        let loss = graph.value(lv).data()[0];
        let mut expect = 0.0;
        for t in &g.trajectories {
            for k in 0..3 {
                let rho = (0.3 * (k as f64 - 1.0) * t.advantage).exp();
                expect += clipped_term(rho, t.advantage, 0.2);
            }
        }
        expect = -expect / 12.0;
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn reward_suite_examples() {
        let gray = Tensor::zeros(&[3, 16, 16]);
        assert_eq!(aesthetic_score(&gray).unwrap(), 0.0);
        let mask = Tensor::ones(&[16, 16]);
        let img = Tensor::randn(&[3, 16, 16], 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(consistency_score(&img, &img, &mask).unwrap(), 1.0);
        let bad = RewardInput::Ti2i { source: &img, edited: &img, target_label: 0, classes: 4, unedited_mask: None };
        assert!(matches!(toy_reward_suite(&bad), Err(Error::Contract { .. })));
        let t2i = toy_reward_suite(&RewardInput::T2i { image: &img, label: 1, classes: 4 }).unwrap();
        assert_eq!(t2i.keys().copied().collect::<Vec<_>>(), RewardTask::T2i.dims());
        assert!(t2i.values().all(|v| (0.0..=1.0).contains(v)));
        let sym = Tensor::filled(&[3, 16, 16], 0.2);
        assert_eq!(portrait_score(&sym).unwrap(), 1.0);
        assert!(RewardRegistry::with_defaults().score("nope", &img).is_err());
    }

    #[test]
    fn reward_vector_respects_task_dims() {
        let mut cal = Calibrator::default();
        let mut raw = BTreeMap::new();
        raw.insert(RewardDim::Aesthetic, 0.4);
        raw.insert(RewardDim::VisualConsistency, 0.9);
        assert!(RewardVector::new(RewardTask::T2i, &raw, &mut cal, &uniform_weights()).is_err());
        raw.remove(&RewardDim::VisualConsistency);
        raw.insert(RewardDim::Alignment, 3.0);
        let v = RewardVector::new(RewardTask::T2i, &raw, &mut cal, &uniform_weights()).unwrap();
        assert!((0.0..=1.0).contains(&v.total()));
        assert!(v.scores.values().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn reweight_examples() {
        let w = uniform_weights();
        let equal: BTreeMap<_, _> = RewardDim::ALL.iter().map(|d| (*d, 0.1)).collect();
        assert_eq!(reweight(&w, &equal, 0.9).unwrap(), w);
        let mut gains = equal.clone();
        gains.insert(RewardDim::Portrait, 1.0);
        let mut cur = w;
        let mut prev = cur[&RewardDim::Portrait];
        for _ in 0..5 {
            cur = reweight(&cur, &gains, 0.9).unwrap();
            assert!((cur.values().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(cur[&RewardDim::Portrait] < prev);
            prev = cur[&RewardDim::Portrait];
        }
    }

    #[test]
    fn task_weights_favor_weaker_task() {
        let w = TaskWeights::update(0.9, 0.2, 4.0);
        assert!(w.ti2i > w.t2i);
        assert!((w.t2i + w.ti2i - 1.0).abs() < 1e-12);
        let w = TaskWeights::update(0.0, 100.0, 4.0);
        assert!((w.ti2i - TaskWeights::FLOOR).abs() < 1e-12);
    }

    #[test]
    fn grpo_iteration_on_mlp() {
        let mut m = mlp();
        let mut tr = GrpoTrainer::new(GrpoConfig { group_size: 4, rollout: RolloutConfig { steps: 4, ..Default::default() }, ..Default::default() }, 3).unwrap();
        let log = tr.iterate(&mut m, &[ClassCond(0), ClassCond(1)], |x, _| Ok(x.data()[0])).unwrap();
        assert_eq!(log.objective_uncond_forwards, 0);
        assert_eq!(log.rollout_uncond_forwards, 2 * 4 * 4);
        assert!(log.grad_norm > 0.0);
    }
}
