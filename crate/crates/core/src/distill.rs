//! Distribution-matching distillation of a many-step teacher into a
//! few-step student.
//!
//! Scores come from velocity predictions. Under `x_t = (1−t)·x0 + t·ξ`,
//! the clean estimate is `x̂0 = x_t − t·v` and the noise estimate is
//! `ξ̂ = x̂0 + v`, so the score of the noised marginal is
//! `−ξ̂/t = −(x_t − (1−t)·x̂0)/t²`.
//!
//! Each student update backpropagates the multiplier `s_fake − s_real`,
//! divided per sample by its mean absolute value, through the student's
//! sample.
//! The fake model tracks the student's distribution with flow matching.

use rand::Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::flowmatch::{batch_of, cfg_velocity, fm_train_step, predict, time_grid, TimeSampler, VelocityModel};
use crate::tensor::{checkpoint, clip_grad_norm, Adam, Graph, Tensor, Var};

/// Smallest time at which scores are evaluated.
pub const T_MIN: f64 = 1e-3;
/// Added to the mean absolute multiplier before dividing.
pub const MULTIPLIER_EPS: f64 = 1e-8;
/// Step counts the student supports.
pub const SUPPORTED_NFE: [usize; 3] = [1, 2, 4];

fn per_sample(x: &Tensor, t: &[f64], op: &'static str) -> Result<usize> {
    if x.rank() == 0 || x.shape()[0] != t.len() || t.is_empty() {
        return dim_err(op, format!("{:?} with {} times", x.shape(), t.len()));
    }
    Ok(x.numel() / t.len())
}

/// `x̂0 = x_t − t·v`, per sample along the leading axis.
pub fn clean_estimate(v: &Tensor, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
    let n = per_sample(x_t, t, "clean_estimate")?;
    if v.shape() != x_t.shape() {
        return dim_err("clean_estimate", format!("{:?} vs {:?}", v.shape(), x_t.shape()));
    }
    let data = x_t.data().iter().zip(v.data()).enumerate().map(|(i, (x, v))| x - t[i / n] * v).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// `ξ̂ = x̂0 + v`.
pub fn noise_estimate(v: &Tensor, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
    clean_estimate(v, x_t, t)?.zip(v, |a, b| a + b)
}

/// Score `−(x_t − (1−t)·x̂0)/t²` from a velocity prediction.
pub fn score_from_velocity(v: &Tensor, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
    if let Some(bad) = t.iter().find(|&&tv| !(T_MIN..=1.0).contains(&tv)) {
        return contract_err("score_from_velocity", format!("t = {bad} outside [{T_MIN}, 1]"));
    }
    let x0 = clean_estimate(v, x_t, t)?;
    let n = x_t.numel() / t.len();
    let data = x_t
        .data()
        .iter()
        .zip(x0.data())
        .enumerate()
        .map(|(i, (x, c))| {
            let tv = t[i / n];
            -(x - (1.0 - tv) * c) / (tv * tv)
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

fn check_nfe(nfe: usize) -> Result<()> {
    if !SUPPORTED_NFE.contains(&nfe) {
        return contract_err("student_generate", format!("nfe {nfe} not in {SUPPORTED_NFE:?}"));
    }
    Ok(())
}

/// Which state of the student rollout is treated as its sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RolloutTarget {
    /// Output of the full few-step trajectory.
    #[default]
    Final,
    /// Clean estimate after this many steps.
    Intermediate(usize),
}

/// Differentiable few-step Euler rollout of the student from `eps`.
pub fn student_rollout<M: VelocityModel>(g: &mut Graph, student: &M, eps: &Tensor, conds: &[&M::Cond], nfe: usize, target: RolloutTarget) -> Result<Var> {
    check_nfe(nfe)?;
    let grid = time_grid(nfe);
    let b = conds.len();
    let stop = match target {
        RolloutTarget::Final => nfe,
        RolloutTarget::Intermediate(k) if k < nfe => k,
        RolloutTarget::Intermediate(k) => return contract_err("student_generate", format!("intermediate step {k} >= nfe {nfe}")),
    };
    let mut x = g.constant(eps.clone());
    for k in 0..stop {
        let v = student.velocity(g, x, &vec![grid[k]; b], conds, &vec![false; b])?;
        let step = g.scale(v, grid[k] - grid[k + 1])?;
        x = g.sub(x, step)?;
    }
    if stop < nfe {
        let t = grid[stop];
        let v = student.velocity(g, x, &vec![t; b], conds, &vec![false; b])?;
        let tv = g.scale(v, t)?;
        x = g.sub(x, tv)?;
    }
    Ok(x)
}

/// Few-step student sample `x_θ = G_θ(ε, c)`.
pub fn student_generate<M: VelocityModel>(student: &M, eps: &Tensor, conds: &[&M::Cond], nfe: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = student_rollout(&mut g, student, eps, conds, nfe, RolloutTarget::Final)?;
    Ok(g.value(x).clone())
}

/// Multiplier `s_fake − s_real`, normalized per sample by its mean
/// absolute value plus [`MULTIPLIER_EPS`]. Also returns the mean absolute
/// value over the whole batch before normalization.
pub fn dmd_multiplier(s_fake: &Tensor, s_real: &Tensor) -> Result<(Tensor, f64)> {
    let mut m = s_fake.zip(s_real, |f, r| f - r)?;
    let scale = m.data().iter().map(|v| v.abs()).sum::<f64>() / m.numel() as f64;
    let n = m.numel() / m.shape().first().copied().unwrap_or(1).max(1);
    for row in m.data_mut().chunks_mut(n.max(1)) {
        let s = row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v /= s + MULTIPLIER_EPS);
    }
    Ok((m, scale))
}

/// Loss whose gradient is `Σ multiplier ⊙ ∂x_θ/∂θ / B`. The multiplier is
/// a constant on the tape.
pub fn dmd_rule_loss(g: &mut Graph, x_theta: Var, multiplier: &Tensor) -> Result<Var> {
    let b = g.shape(x_theta)[0] as f64;
    let m = g.constant(multiplier.clone());
    let prod = g.mul(x_theta, m)?;
    let s = g.sum(prod)?;
    g.scale(s, 1.0 / b)
}

/// Scores of the real (teacher) and fake models at noised student samples.
#[derive(Clone, Debug)]
pub struct ScorePair {
    pub x_t: Tensor,
    pub t: Vec<f64>,
    pub s_real: Tensor,
    pub s_fake: Tensor,
}

/// Noises `x_theta` at sampled times and evaluates both scores. The
/// teacher runs with guidance `teacher_cfg` when set, else conditional only.
#[allow(clippy::too_many_arguments)]
pub fn noised_scores<M: VelocityModel, R: Rng>(
    teacher: &M,
    fake: &M,
    x_theta: &Tensor,
    conds: &[&M::Cond],
    sampler: &TimeSampler,
    teacher_cfg: Option<f64>,
    rng: &mut R,
) -> Result<ScorePair> {
    let b = conds.len();
    let t: Vec<f64> = (0..b).map(|_| sampler.sample(rng).clamp(T_MIN, 1.0 - T_MIN)).collect();
    let xi = Tensor::randn(x_theta.shape(), 1.0, rng);
    let n = per_sample(x_theta, &t, "dmd_student_grad")?;
    let data = x_theta.data().iter().zip(xi.data()).enumerate().map(|(i, (x, e))| (1.0 - t[i / n]) * x + t[i / n] * e).collect();
    let x_t = Tensor::new(x_theta.shape().to_vec(), data)?;
    let v_real = cfg_velocity(teacher, &x_t, &t, conds, teacher_cfg.unwrap_or(1.0))?;
    let v_fake = predict(fake, &x_t, &t, conds, &vec![false; b])?;
    Ok(ScorePair {
        s_real: score_from_velocity(&v_real, &x_t, &t)?,
        s_fake: score_from_velocity(&v_fake, &x_t, &t)?,
        x_t,
        t,
    })
}

#[derive(Clone, Debug)]
pub struct DmdGrad {
    /// One gradient vector per student parameter.
    pub grads: Vec<Vec<f64>>,
    /// Mean absolute multiplier before normalization.
    pub multiplier_scale: f64,
}

/// DMD gradient for the student on one batch of noise.
#[allow(clippy::too_many_arguments)]
pub fn dmd_student_grad<M: VelocityModel, R: Rng>(
    student: &M,
    teacher: &M,
    fake: &M,
    eps: &Tensor,
    conds: &[&M::Cond],
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<DmdGrad> {
    let mut g = Graph::new();
    let x = student_rollout(&mut g, student, eps, conds, cfg.nfe, cfg.target)?;
    let x_val = g.value(x).clone();
    let pair = noised_scores(teacher, fake, &x_val, conds, &cfg.time_sampler, cfg.teacher_cfg, rng)?;
    let (m, scale) = dmd_multiplier(&pair.s_fake, &pair.s_real)?;
    let loss = dmd_rule_loss(&mut g, x, &m)?;
    let grads = g.backward(loss)?;
    Ok(DmdGrad {
        grads: student.params().grads(&g, &grads),
        multiplier_scale: scale,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub nfe: usize,
    /// Fake-model updates per student update.
    pub fake_updates: usize,
    pub student_lr: f64,
    pub fake_lr: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub time_sampler: TimeSampler,
    pub target: RolloutTarget,
    /// Guidance folded into the teacher score; off by default.
    pub teacher_cfg: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            nfe: 4,
            fake_updates: 5,
            student_lr: 1e-4,
            fake_lr: 1e-4,
            grad_clip: 1.0,
            batch: 64,
            time_sampler: TimeSampler::default(),
            target: RolloutTarget::Final,
            teacher_cfg: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_nfe(self.nfe).map_err(|e| Error::Config(e.to_string()))?;
        if self.fake_updates == 0 || self.batch == 0 {
            return Err(Error::Config("distill.fake_updates and distill.batch must be positive".into()));
        }
        if !(self.student_lr > 0.0 && self.fake_lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("distill learning rates and clip must be positive".into()));
        }
        if self.teacher_cfg.is_some_and(|w| !(w >= 0.0)) {
            return Err(Error::Config("distill.teacher_cfg must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillStats {
    pub student_steps: usize,
    pub fake_steps: usize,
    pub fake_loss: f64,
    pub multiplier_scale: f64,
    pub grad_norm: f64,
}

/// Student, fake model and a borrowed frozen teacher.
pub struct DistillState<'a, M: VelocityModel> {
    pub cfg: DistillConfig,
    pub student: M,
    pub fake: M,
    teacher: &'a M,
    teacher_checksum: String,
    student_opt: Adam,
    fake_opt: Adam,
    pub stats: DistillStats,
}

impl<'a, M: VelocityModel + Clone> DistillState<'a, M> {
    /// Student and fake model both start as copies of the teacher.
    pub fn new(teacher: &'a M, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            student_opt: Adam::new(cfg.student_lr),
            fake_opt: Adam::new(cfg.fake_lr),
            student: teacher.clone(),
            fake: teacher.clone(),
            teacher_checksum: checkpoint::checksum(teacher.params()),
            teacher,
            cfg,
            stats: DistillStats::default(),
        })
    }
}

impl<M: VelocityModel> DistillState<'_, M> {
    pub fn teacher(&self) -> &M {
        self.teacher
    }

    /// Errors if the teacher's parameters changed since construction.
    pub fn verify_teacher(&self) -> Result<()> {
        if checkpoint::checksum(self.teacher.params()) != self.teacher_checksum {
            return contract_err("distill", "teacher checkpoint changed");
        }
        Ok(())
    }

    /// One flow-matching step of the fake model on detached student samples.
    pub fn fake_score_update<R: Rng>(&mut self, x_theta: &Tensor, conds: &[&M::Cond], rng: &mut R) -> Result<f64> {
        let items: Vec<Tensor> = (0..conds.len()).map(|i| x_theta.index0(i)).collect();
        let refs: Vec<&Tensor> = items.iter().collect();
        let out = fm_train_step(&mut self.fake, &mut self.fake_opt, self.cfg.grad_clip, &refs, conds, &self.cfg.time_sampler, 0.0, rng)?;
        self.stats.fake_steps += 1;
        Ok(out.loss)
    }

    /// `fake_updates` fake steps followed by one student step.
    pub fn step<R: Rng>(&mut self, conds: &[&M::Cond], rng: &mut R) -> Result<DistillStats> {
        let mut shape = vec![conds.len()];
        shape.extend(self.student.sample_shape());
        let mut fake_loss = 0.0;
        for _ in 0..self.cfg.fake_updates {
            let eps = Tensor::randn(&shape, 1.0, rng);
            let x = student_generate(&self.student, &eps, conds, self.cfg.nfe)?;
            fake_loss += self.fake_score_update(&x, conds, rng)?;
        }
        let eps = Tensor::randn(&shape, 1.0, rng);
        let mut grad = dmd_student_grad(&self.student, self.teacher, &self.fake, &eps, conds, &self.cfg, rng)?;
        let (norm, _) = clip_grad_norm(&mut grad.grads, self.cfg.grad_clip);
        self.student_opt.step(self.student.params_mut(), &grad.grads);
        self.stats.student_steps += 1;
        self.stats.fake_loss = fake_loss / self.cfg.fake_updates as f64;
        self.stats.multiplier_scale = grad.multiplier_scale;
        self.stats.grad_norm = norm;
        Ok(self.stats)
    }
}

/// Stacks per-sample tensors for sampling helpers.
pub fn stack_samples(items: &[&Tensor]) -> Result<Tensor> {
    batch_of(items)
}
