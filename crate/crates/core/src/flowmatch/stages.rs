use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::VelocityModel;
use super::{fm_train_step, TimeSampler};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Pretrain,
    Continual,
    Sft,
}

impl StageName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "continual" => Ok(Self::Continual),
            "sft" => Ok(Self::Sft),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Continual => "continual",
            Self::Sft => "sft",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    T2i,
    Ti2i,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: StageName,
    pub steps: usize,
    pub resolutions: Vec<usize>,
    /// One batch size per resolution.
    pub batch_sizes: Vec<usize>,
    /// Fraction of T2I steps; the rest are TI2I.
    pub t2i_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub uncond_dropout: f64,
    pub time_sampler: TimeSampler,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("stage {}: {m}", self.name.as_str())));
        if self.resolutions.is_empty() || self.resolutions.len() != self.batch_sizes.len() {
            return err("need one batch size per resolution".into());
        }
        if self.batch_sizes.contains(&0) || self.resolutions.contains(&0) {
            return err("resolutions and batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.t2i_ratio) || !(0.0..=1.0).contains(&self.uncond_dropout) {
            return err("ratio and dropout must lie in [0, 1]".into());
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return err("lr and grad_clip must be positive, weight decay non-negative".into());
        }
        Ok(())
    }
}

/// The three stages with the published hyperparameters. Batch sizes and
/// step counts are divided by `batch_divisor`, resolutions by `res_divisor`.
pub fn table2_stages(batch_divisor: usize, res_divisor: usize) -> Vec<StageConfig> {
    let scale_b = |k: usize| (k * 1000 / batch_divisor.max(1)).max(1);
    let scale_r = |r: usize| (r / res_divisor.max(1)).max(1);
    let stage = |name, steps_k: usize, res: &[usize], batch_k: &[usize], ratio: f64, lr: f64| StageConfig {
        name,
        steps: scale_b(steps_k),
        resolutions: res.iter().map(|&r| scale_r(r)).collect(),
        batch_sizes: batch_k.iter().map(|&b| scale_b(b)).collect(),
        t2i_ratio: ratio,
        lr,
        weight_decay: 0.001,
        grad_clip: 1.0,
        uncond_dropout: 0.1,
        time_sampler: TimeSampler::default(),
    };
    vec![
        stage(StageName::Pretrain, 700, &[256, 512], &[32, 16], 0.9, 1e-4),
        stage(StageName::Continual, 250, &[512, 1024, 2048], &[16, 8, 4], 0.7, 2e-5),
        stage(StageName::Sft, 10, &[512, 1024, 2048], &[16, 8, 4], 0.7, 1e-5),
    ]
}

/// Stages must run pretrain → continual → sft with strictly decreasing lr.
pub fn validate_schedule(stages: &[StageConfig]) -> Result<()> {
    for s in stages {
        s.validate()?;
    }
    for pair in stages.windows(2) {
        if pair[1].name as u8 <= pair[0].name as u8 {
            return Err(Error::Config("stages out of order".into()));
        }
        if !(pair[1].lr < pair[0].lr) {
            return Err(Error::Config("stage learning rates must strictly decrease".into()));
        }
    }
    Ok(())
}

/// Draws `(resolution, task)` for `steps` steps: resolution uniform over
/// the stage list, task T2I with probability `t2i_ratio`.
pub fn plan_stage<R: Rng>(stage: &StageConfig, steps: usize, rng: &mut R) -> Vec<(usize, Task)> {
    (0..steps)
        .map(|_| {
            let res = stage.resolutions[rng.gen_range(0..stage.resolutions.len())];
            let task = if rng.gen_bool(stage.t2i_ratio) { Task::T2i } else { Task::Ti2i };
            (res, task)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Example<C> {
    pub x0: Tensor,
    pub cond: C,
}

/// Training examples keyed by resolution, split by task.
#[derive(Clone, Debug)]
pub struct StageData<C> {
    pub pools: BTreeMap<usize, (Vec<Example<C>>, Vec<Example<C>>)>,
}

impl<C> Default for StageData<C> {
    fn default() -> Self {
        Self { pools: BTreeMap::new() }
    }
}

impl<C> StageData<C> {
    pub fn push(&mut self, resolution: usize, task: Task, ex: Example<C>) {
        let pool = self.pools.entry(resolution).or_insert_with(|| (Vec::new(), Vec::new()));
        match task {
            Task::T2i => pool.0.push(ex),
            Task::Ti2i => pool.1.push(ex),
        }
    }

    fn pool(&self, resolution: usize, task: Task) -> &[Example<C>] {
        match (self.pools.get(&resolution), task) {
            (Some(p), Task::T2i) => &p.0,
            (Some(p), Task::Ti2i) => &p.1,
            (None, _) => &[],
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: StageName,
    pub resolution: usize,
    pub task: Task,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// Runs one stage with a fresh Adam at the stage learning rate.
pub fn run_stage<M, R, F>(stage: &StageConfig, data: &StageData<M::Cond>, model: &mut M, rng: &mut R, mut on_step: F) -> Result<Vec<StepRecord>>
where
    M: VelocityModel,
    R: Rng,
    F: FnMut(&StepRecord),
{
    stage.validate()?;
    for &res in &stage.resolutions {
        if stage.t2i_ratio > 0.0 && data.pool(res, Task::T2i).is_empty() {
            return Err(Error::Config(format!("no T2I data at resolution {res}")));
        }
        if stage.t2i_ratio < 1.0 && data.pool(res, Task::Ti2i).is_empty() {
            return Err(Error::Config(format!("no TI2I data at resolution {res}")));
        }
    }
    let mut adam = Adam::new(stage.lr).with_weight_decay(stage.weight_decay);
    let plan = plan_stage(stage, stage.steps, rng);
    let mut records = Vec::with_capacity(plan.len());
    for (step, (res, task)) in plan.into_iter().enumerate() {
        let bi = stage.resolutions.iter().position(|&r| r == res).expect("planned from list");
        let pool = data.pool(res, task);
        let picks: Vec<&Example<M::Cond>> = (0..stage.batch_sizes[bi]).map(|_| &pool[rng.gen_range(0..pool.len())]).collect();
        let x0: Vec<&Tensor> = picks.iter().map(|e| &e.x0).collect();
        let conds: Vec<&M::Cond> = picks.iter().map(|e| &e.cond).collect();
        let out = fm_train_step(model, &mut adam, stage.grad_clip, &x0, &conds, &stage.time_sampler, stage.uncond_dropout, rng)?;
        let rec = StepRecord {
            step,
            stage: stage.name,
            resolution: res,
            task,
            loss: out.loss,
            grad_norm: out.grad_norm,
            clipped_norm: out.clipped_norm,
            lr: adam.lr,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}
