use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::mmdit::timestep_encoding;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Per-sample forward counts, split by whether the condition was dropped.
#[derive(Debug, Default)]
pub struct ForwardCounter {
    cond: AtomicUsize,
    uncond: AtomicUsize,
}

impl ForwardCounter {
    pub fn record(&self, dropped: bool) {
        let c = if dropped { &self.uncond } else { &self.cond };
        c.fetch_add(1, Ordering::Relaxed);
    }

    /// `(conditional, unconditional)` sample forwards so far.
    pub fn snapshot(&self) -> (usize, usize) {
        (self.cond.load(Ordering::Relaxed), self.uncond.load(Ordering::Relaxed))
    }

    pub fn reset(&self) {
        self.cond.store(0, Ordering::Relaxed);
        self.uncond.store(0, Ordering::Relaxed);
    }
}

/// A network predicting the flow velocity `v(x_t, t, c)` over a batch.
pub trait VelocityModel {
    type Cond;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Shape of one sample, without the batch axis.
    fn sample_shape(&self) -> Vec<usize>;
    /// `x` is `[B, sample_shape…]`; `dropped[i]` swaps sample `i`'s
    /// condition for the null condition.
    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], conds: &[&Self::Cond], dropped: &[bool]) -> Result<Var>;
    fn counter(&self) -> &ForwardCounter;
}

/// Evaluates the velocity outside of training.
pub fn predict<M: VelocityModel>(model: &M, x: &Tensor, t: &[f64], conds: &[&M::Cond], dropped: &[bool]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let v = model.velocity(&mut g, xv, t, conds, dropped)?;
    Ok(g.value(v).clone())
}

/// Stacks one condition per sample: `[B, shape…]` from `B` tensors.
pub fn batch_of(items: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(&items.iter().map(|t| (*t).clone()).collect::<Vec<_>>())
}

/// Class label for the toy vector models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCond(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMlpConfig {
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_freqs: usize,
    pub class_dim: usize,
}

impl Default for FlowMlpConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 2,
            hidden: 128,
            layers: 3,
            time_freqs: 16,
            class_dim: 8,
        }
    }
}

/// MLP velocity field over `dim`-vectors: `[x, time encoding, class
/// embedding] → hidden layers (SiLU) → dim`. Row `classes` of the class
/// table is the null condition.
#[derive(Debug)]
pub struct FlowMlp {
    cfg: FlowMlpConfig,
    params: ParamStore,
    class_table: ParamId,
    layers: Vec<(ParamId, ParamId)>,
    counter: ForwardCounter,
}

impl Clone for FlowMlp {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            class_table: self.class_table,
            layers: self.layers.clone(),
            counter: ForwardCounter::default(),
        }
    }
}

impl FlowMlp {
    pub fn new(cfg: FlowMlpConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let class_table = p.add("class.table", Tensor::randn(&[cfg.classes + 1, cfg.class_dim], 1.0, &mut rng));
        let mut layers = Vec::new();
        let mut fan_in = cfg.dim + cfg.time_freqs + cfg.class_dim;
        for i in 0..cfg.layers {
            let w = p.add_init(&format!("mlp.{i}.weight"), &[fan_in, cfg.hidden], fan_in, &mut rng);
            let b = p.add_zeros(&format!("mlp.{i}.bias"), &[cfg.hidden]);
            layers.push((w, b));
            fan_in = cfg.hidden;
        }
        let w = p.add_init("mlp.out.weight", &[fan_in, cfg.dim], fan_in, &mut rng);
        let b = p.add_zeros("mlp.out.bias", &[cfg.dim]);
        layers.push((w, b));
        Self {
            cfg,
            params: p,
            class_table,
            layers,
            counter: ForwardCounter::default(),
        }
    }

    pub fn config(&self) -> &FlowMlpConfig {
        &self.cfg
    }
}

impl VelocityModel for FlowMlp {
    type Cond = ClassCond;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.cfg.dim]
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], conds: &[&ClassCond], dropped: &[bool]) -> Result<Var> {
        let b = t.len();
        if g.shape(x) != [b, self.cfg.dim] || conds.len() != b || dropped.len() != b {
            return dim_err("flow_mlp", format!("x {:?} with batch {b}", g.shape(x)));
        }
        if let Some(c) = conds.iter().find(|c| c.0 >= self.cfg.classes) {
            return dim_err("flow_mlp", format!("class {} outside {}", c.0, self.cfg.classes));
        }
        if let Some(bad) = t.iter().find(|tv| !(0.0..=1.0).contains(*tv)) {
            return crate::error::contract_err("forward", format!("t = {bad} outside [0, 1]"));
        }
        let idx: Vec<usize> = conds
            .iter()
            .zip(dropped)
            .map(|(c, &d)| if d { self.cfg.classes } else { c.0 })
            .collect();
        for &d in dropped {
            self.counter.record(d);
        }
        let table = self.params.var(g, self.class_table);
        let emb = g.gather_rows(table, &idx)?;
        let te = g.constant(timestep_encoding(t, self.cfg.time_freqs));
        let mut h = g.concat(&[x, te, emb], 1)?;
        let last = self.layers.len() - 1;
        for (i, &(w, bias)) in self.layers.iter().enumerate() {
            let (w, bias) = (self.params.var(g, w), self.params.var(g, bias));
            h = g.linear(h, w, Some(bias))?;
            if i < last {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}

/// Exact velocity field whose data distribution is a single point.
///
/// Along `x_t = (1−t)·x0 + t·ξ`, `v = (x_t − x0)/t = ξ − x0`.
#[derive(Debug)]
pub struct PointMass {
    pub target: Tensor,
    params: ParamStore,
    counter: ForwardCounter,
}

impl PointMass {
    pub fn new(target: Tensor) -> Self {
        Self {
            target,
            params: ParamStore::new(),
            counter: ForwardCounter::default(),
        }
    }
}

impl VelocityModel for PointMass {
    type Cond = ();

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.target.shape().to_vec()
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], _: &[&()], dropped: &[bool]) -> Result<Var> {
        let xs = g.value(x).clone();
        let n = self.target.numel();
        let mut out = xs.data().to_vec();
        for (i, chunk) in out.chunks_mut(n).enumerate() {
            self.counter.record(dropped.get(i).copied().unwrap_or(false));
            for (v, &x0) in chunk.iter_mut().zip(self.target.data()) {
                *v = if t[i] > 0.0 { (*v - x0) / t[i] } else { 0.0 };
            }
        }
        Ok(g.constant(Tensor::new(xs.shape().to_vec(), out)?))
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}

/// Exact velocity field for isotropic Gaussian data `N(mean, var·I)`.
#[derive(Debug)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub var: f64,
    params: ParamStore,
    counter: ForwardCounter,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: f64) -> Self {
        Self {
            mean,
            var,
            params: ParamStore::new(),
            counter: ForwardCounter::default(),
        }
    }

    /// `E[ξ − x0 | x_t]` for one coordinate.
    pub fn velocity_at(&self, x_t: f64, t: f64, mean: f64) -> f64 {
        let s2 = self.var;
        let var_t = (1.0 - t).powi(2) * s2 + t * t;
        let r = x_t - (1.0 - t) * mean;
        let e_x0 = mean + (1.0 - t) * s2 / var_t * r;
        let e_xi = t / var_t * r;
        e_xi - e_x0
    }

    /// Score `∇ log p_t(x_t)` for one coordinate.
    pub fn score_at(&self, x_t: f64, t: f64, mean: f64) -> f64 {
        let var_t = (1.0 - t).powi(2) * self.var + t * t;
        -(x_t - (1.0 - t) * mean) / var_t
    }
}

impl VelocityModel for GaussianOracle {
    type Cond = ();

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.mean.len()]
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], _: &[&()], dropped: &[bool]) -> Result<Var> {
        let xs = g.value(x).clone();
        let d = self.mean.len();
        let mut out = xs.data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            self.counter.record(dropped.get(i).copied().unwrap_or(false));
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.velocity_at(*v, t[i], self.mean[j]);
            }
        }
        Ok(g.constant(Tensor::new(xs.shape().to_vec(), out)?))
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}
