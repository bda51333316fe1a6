//! End-to-end runs driven by a [`RunConfig`].
//!
//! Every random stream is derived from `run.seed` and a fixed stream id, so
//! a run is a pure function of its configuration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::distill::{student_generate, DistillConfig, DistillState, DistillStats};
use crate::error::{contract_err, Error, Result};
use crate::evalkit::{self, shape_caption, Corpus, CorpusKind, ToyCorpusSpec};
use crate::flowmatch::{euler_sample, fm_train_step, ClassCond, FlowMlp, FlowMlpConfig, StepOutcome, TimeSampler, VelocityModel};
use crate::mmdit::{DitCond, Mmdit};
use crate::rlhf::{toy_reward_suite, Calibrator, GrpoConfig, GrpoTrainer, IterationLog, RewardInput, RewardRegistry, RewardTask, RewardVector, RolloutConfig};
use crate::tensor::{Adam, Tensor};
use crate::vae::{Vae, VaeStepStats, VaeTrainer};

/// Stream ids under `run.seed`.
pub mod stream {
    pub const VAE_INIT: u64 = 0;
    pub const VAE_CORPUS: u64 = 1;
    pub const DIT_CORPUS: u64 = 2;
    pub const DIT_INIT: u64 = 3;
    pub const DIT_TRAIN: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const TOY_CORPUS: u64 = 6;
    pub const TEACHER_INIT: u64 = 7;
    pub const TEACHER_TRAIN: u64 = 8;
    pub const GRPO: u64 = 9;
    pub const DISTILL: u64 = 10;
    pub const EVAL: u64 = 11;
}

/// Seed of stream `id` under `seed`; seed 0 maps stream `id` to `id`.
pub fn stream_seed(seed: u64, id: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id)
}

pub fn stream_rng(cfg: &RunConfig, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, id))
}

/// Global affine normalization of latents to zero mean and unit variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
}

impl LatentStats {
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let n = latents.numel() as f64;
        if n == 0.0 {
            return contract_err("latent_stats", "no latents");
        }
        let mean = latents.data().iter().sum::<f64>() / n;
        let std = (latents.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return contract_err("latent_stats", "latents have zero spread");
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, z: &Tensor) -> Tensor {
        z.map(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        z.map(|v| v * self.std + self.mean)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The image corpus named by `kind` at the configured size.
pub fn image_corpus(cfg: &RunConfig, kind: &str, stream_id: u64) -> Result<Corpus> {
    let kind = match CorpusKind::named(kind, cfg.data_size)? {
        CorpusKind::Shapes { size, .. } => CorpusKind::Shapes { classes: cfg.data_classes, size },
        k => k,
    };
    evalkit::generate(&ToyCorpusSpec { kind, count: cfg.data_count, seed: stream_seed(cfg.seed, stream_id) })
}

pub fn new_vae(cfg: &RunConfig) -> Result<Vae> {
    Vae::new(cfg.vae_config(), stream_seed(cfg.seed, stream::VAE_INIT))
}

/// Trains the autoencoder on `vae.corpus`, visiting images in corpus order.
pub fn train_vae(cfg: &RunConfig, mut on_step: impl FnMut(&VaeStepStats)) -> Result<Vae> {
    let corpus = image_corpus(cfg, &cfg.vae_corpus, stream::VAE_CORPUS)?;
    let imgs = corpus.images();
    if imgs.is_empty() {
        return contract_err("train_vae", format!("corpus `{}` has no images", cfg.vae_corpus));
    }
    let mut vae = new_vae(cfg)?;
    let mut tr = VaeTrainer::new(cfg.vae_lr, cfg.vae_grad_clip);
    for s in 0..cfg.vae_steps {
        let batch: Vec<&Tensor> = (0..cfg.vae_batch).map(|i| imgs[(s * cfg.vae_batch + i) % imgs.len()]).collect();
        let st = tr.train_step(&mut vae, &batch)?;
        if !st.total.is_finite() {
            return Err(Error::NonFinite { op: "train_vae" });
        }
        on_step(&st);
    }
    Ok(vae)
}

/// Mean reconstruction PSNR and SSIM (8-px window) over `images`.
pub fn reconstruction_metrics(vae: &Vae, images: &[&Tensor]) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for chunk in images.chunks(50) {
        let z = vae.encode_batch(chunk)?;
        let zs: Vec<Tensor> = (0..chunk.len()).map(|i| z.index0(i)).collect();
        let rec = vae.decode_batch(&zs.iter().collect::<Vec<_>>())?;
        for (i, img) in chunk.iter().enumerate() {
            let r = rec.index0(i);
            p += evalkit::psnr(img, &r, 2.0)?;
            s += evalkit::ssim_signed(img, &r, 8)?;
        }
    }
    let n = images.len().max(1) as f64;
    Ok((p / n, s / n))
}

/// Held-out images of `vae.corpus` for reconstruction metrics.
pub fn vae_eval_images(cfg: &RunConfig) -> Result<Corpus> {
    let mut c = cfg.clone();
    c.data_count = cfg.vae_eval_count;
    image_corpus(&c, &cfg.vae_corpus, stream::EVAL)
}

pub fn new_dit(cfg: &RunConfig) -> Result<Mmdit> {
    let side = cfg.data_size / cfg.vae_factor;
    Mmdit::new(cfg.mmdit_config(), (side, side), stream_seed(cfg.seed, stream::DIT_INIT))
}

pub fn dit_cond(cfg: &RunConfig, prompt: &str) -> DitCond {
    DitCond::prompt(prompt, cfg.dit_vocab)
}

/// Encodes `data.kind` through the frozen autoencoder and trains the
/// transformer by flow matching on the normalized latents.
pub fn train_dit(cfg: &RunConfig, vae: &Vae, mut on_step: impl FnMut(usize, &StepOutcome)) -> Result<(Mmdit, LatentStats)> {
    let corpus = image_corpus(cfg, &cfg.data_kind, stream::DIT_CORPUS)?;
    let imgs = corpus.images();
    if imgs.len() != corpus.items.len() || imgs.is_empty() {
        return contract_err("train_dit", format!("corpus `{}` is not an image corpus", cfg.data_kind));
    }
    let mut zs = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(100) {
        let z = vae.encode_batch(chunk)?;
        zs.extend((0..chunk.len()).map(|i| z.index0(i)));
    }
    let stats = LatentStats::fit(&Tensor::stack(&zs)?)?;
    let zn: Vec<Tensor> = zs.iter().map(|z| stats.normalize(z)).collect();
    let conds: Vec<DitCond> = corpus.items.iter().map(|it| dit_cond(cfg, &it.caption)).collect();
    let sampler = cfg.time_sampler()?;
    let mut model = new_dit(cfg)?;
    let mut adam = Adam::new(cfg.dit_lr);
    let mut rng = stream_rng(cfg, stream::DIT_TRAIN);
    for s in 0..cfg.dit_steps {
        let idx: Vec<usize> = (0..cfg.dit_batch).map(|_| rng.gen_range(0..zn.len())).collect();
        let x0: Vec<&Tensor> = idx.iter().map(|&i| &zn[i]).collect();
        let c: Vec<&DitCond> = idx.iter().map(|&i| &conds[i]).collect();
        let out = fm_train_step(&mut model, &mut adam, cfg.dit_grad_clip, &x0, &c, &sampler, cfg.dit_uncond_dropout, &mut rng)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite { op: "train_dit" });
        }
        on_step(s, &out);
    }
    Ok((model, stats))
}

/// How latents are integrated from noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    /// Euler with classifier-free guidance.
    Euler { steps: usize, cfg: f64 },
    /// Few-step student rollout on a uniform grid, no guidance.
    Student { nfe: usize },
}

/// Samples latents for `prompts` and decodes them to images.
pub fn sample_images<R: Rng>(cfg: &RunConfig, vae: &Vae, dit: &Mmdit, stats: &LatentStats, prompts: &[String], sampler: Sampler, rng: &mut R) -> Result<Vec<Tensor>> {
    let conds: Vec<DitCond> = prompts.iter().map(|p| dit_cond(cfg, p)).collect();
    let refs: Vec<&DitCond> = conds.iter().collect();
    let x = match sampler {
        Sampler::Euler { steps, cfg: w } => euler_sample(dit, &refs, steps, w, rng)?,
        Sampler::Student { nfe } => {
            let mut shape = vec![refs.len()];
            shape.extend(dit.sample_shape());
            let eps = Tensor::randn(&shape, 1.0, rng);
            student_generate(dit, &eps, &refs, nfe)?
        }
    };
    let lat: Vec<Tensor> = (0..prompts.len()).map(|i| stats.denormalize(&x.index0(i))).collect();
    let img = vae.decode_batch(&lat.iter().collect::<Vec<_>>())?;
    Ok((0..prompts.len()).map(|i| img.index0(i)).collect())
}

/// Toy teacher: a flow MLP on the two-Gaussian mixture.
pub fn train_toy_teacher(cfg: &RunConfig, mut on_step: impl FnMut(usize, &StepOutcome)) -> Result<FlowMlp> {
    let corpus = evalkit::generate(&ToyCorpusSpec { kind: CorpusKind::two_gaussians(), count: 20_000, seed: stream_seed(cfg.seed, stream::TOY_CORPUS) })?;
    let pts: Vec<Tensor> = corpus.points().into_iter().map(|p| Tensor::new(vec![2], p)).collect::<Result<_>>()?;
    let mut teacher = toy_flow_model(cfg);
    let mut rng = stream_rng(cfg, stream::TEACHER_TRAIN);
    let mut adam = Adam::new(cfg.distill_teacher_lr);
    let c0 = ClassCond(0);
    let conds = vec![&c0; cfg.distill_batch];
    for s in 0..cfg.distill_teacher_steps {
        let x0: Vec<&Tensor> = (0..cfg.distill_batch).map(|_| &pts[rng.gen_range(0..pts.len())]).collect();
        let out = fm_train_step(&mut teacher, &mut adam, 1.0, &x0, &conds, &TimeSampler::Uniform, 0.0, &mut rng)?;
        on_step(s, &out);
    }
    Ok(teacher)
}

/// Untrained flow MLP with the toy architecture; the shape every toy
/// checkpoint loads into.
pub fn toy_flow_model(cfg: &RunConfig) -> FlowMlp {
    FlowMlp::new(FlowMlpConfig { classes: 1, ..Default::default() }, stream_seed(cfg.seed, stream::TEACHER_INIT))
}

pub fn distill_config(cfg: &RunConfig) -> DistillConfig {
    DistillConfig {
        nfe: cfg.distill_nfe,
        fake_updates: cfg.distill_fake_updates,
        student_lr: cfg.distill_student_lr,
        fake_lr: cfg.distill_fake_lr,
        batch: cfg.distill_batch,
        ..Default::default()
    }
}

/// Distribution-matching distillation of `teacher` into a few-step student.
pub fn distill_toy(cfg: &RunConfig, teacher: &FlowMlp, mut on_step: impl FnMut(usize, &DistillStats)) -> Result<FlowMlp> {
    let mut st = DistillState::new(teacher, distill_config(cfg))?;
    let mut rng = stream_rng(cfg, stream::DISTILL);
    let c0 = ClassCond(0);
    let conds = vec![&c0; cfg.distill_batch];
    for s in 0..cfg.distill_steps {
        let stats = st.step(&conds, &mut rng)?;
        on_step(s, &stats);
    }
    st.verify_teacher()?;
    Ok(st.student)
}

/// `n` teacher samples (Euler, `teacher_steps`) and `n` student samples
/// (`distill.nfe`), as rows of 2-vectors.
pub fn toy_sample_pair(cfg: &RunConfig, teacher: &FlowMlp, student: &FlowMlp, teacher_steps: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut rng = stream_rng(cfg, stream::SAMPLE);
    let c0 = ClassCond(0);
    let conds = vec![&c0; cfg.distill_samples];
    let t = euler_sample(teacher, &conds, teacher_steps, 1.0, &mut rng)?;
    let eps = Tensor::randn(&[cfg.distill_samples, 2], 1.0, &mut rng);
    let s = student_generate(student, &eps, &conds, cfg.distill_nfe)?;
    let rows = |x: &Tensor| x.data().chunks(2).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok((rows(&t), rows(&s)))
}

pub fn grpo_config(cfg: &RunConfig) -> GrpoConfig {
    GrpoConfig {
        group_size: cfg.rlhf_group_size,
        rollout: RolloutConfig { steps: cfg.rlhf_rollout_steps, w_cfg: cfg.rlhf_w_cfg, sde_sigma: cfg.rlhf_sde_sigma },
        clip_eps: cfg.rlhf_clip_eps,
        lr: cfg.rlhf_lr,
        ..Default::default()
    }
}

/// GRPO over shape prompts, cycling through the classes. `rlhf.reward`
/// names a registered scorer or `composite`, the weighted calibrated toy
/// suite.
pub fn run_grpo(cfg: &RunConfig, vae: &Vae, dit: &mut Mmdit, stats: &LatentStats, mut on_iter: impl FnMut(&IterationLog)) -> Result<Vec<IterationLog>> {
    let registry = RewardRegistry::with_defaults();
    let composite = cfg.rlhf_reward == "composite";
    if !composite && !registry.names().contains(&cfg.rlhf_reward.as_str()) {
        return Err(Error::Config(format!("unknown reward `{}`; known: composite, {}", cfg.rlhf_reward, registry.names().join(", "))));
    }
    let weights = cfg.reward_weights();
    let mut cal = Calibrator::default();
    let mut trainer = GrpoTrainer::new(grpo_config(cfg), stream_seed(cfg.seed, stream::GRPO))?;
    let classes = cfg.data_classes;
    let mut logs = Vec::with_capacity(cfg.rlhf_iterations);
    for it in 0..cfg.rlhf_iterations {
        let labels: Vec<usize> = (0..cfg.rlhf_prompts).map(|p| (it * cfg.rlhf_prompts + p) % classes).collect();
        let conds: Vec<DitCond> = labels.iter().map(|&l| dit_cond(cfg, &shape_caption(l))).collect();
        let log = trainer.iterate(dit, &conds, |x, cond| {
            let img = vae.decode_batch(&[&stats.denormalize(x)])?.index0(0);
            if !composite {
                return registry.score(&cfg.rlhf_reward, &img);
            }
            let label = conds.iter().position(|c| c == cond).map(|i| labels[i]).unwrap_or(0);
            let raw = toy_reward_suite(&RewardInput::T2i { image: &img, label, classes })?;
            Ok(RewardVector::new(RewardTask::T2i, &raw, &mut cal, &weights)?.total())
        })?;
        on_iter(&log);
        logs.push(log);
    }
    Ok(logs)
}
