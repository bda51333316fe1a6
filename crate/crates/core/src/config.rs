//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key, so the resolved copy
//! re-parses to an equal value. The only environment override is
//! `QI2_THREADS`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datapipe::{PipelineConfig, RouterThresholds};
use crate::error::{Error, Result};
use crate::flowmatch::TimeSampler;
use crate::mmdit::MmditConfig;
use crate::rlhf::RewardDim;
use crate::vae::VaeConfig;

/// Conversion between config values and text.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, u32, f64, bool);

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $key:literal, $default:expr;)*) => {
        /// Every tunable of a run, keyed by `section.key`.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            /// All keys in file order.
            pub const KEYS: &'static [&'static str] = &[$($key,)*];

            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Every key with its current value, one `key = value` per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", $key, self.$field.render()));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = "run.seed", 0;

    data_kind: String = "data.kind", "shapes".into();
    data_count: usize = "data.count", 2000;
    data_size: usize = "data.size", 32;
    data_classes: usize = "data.classes", 4;

    vae_corpus: String = "vae.corpus", "glyphs".into();
    vae_eval_count: usize = "vae.eval_count", 200;
    vae_factor: usize = "vae.factor", 4;
    vae_channels: usize = "vae.channels", 4;
    vae_widths: Vec<usize> = "vae.widths", vec![16, 32, 32];
    vae_preserve_bottleneck: bool = "vae.preserve_bottleneck", true;
    vae_perceptual_weight: f64 = "vae.perceptual_weight", 0.1;
    vae_steps: usize = "vae.steps", 5000;
    vae_batch: usize = "vae.batch", 8;
    vae_lr: f64 = "vae.lr", 2e-3;
    vae_grad_clip: f64 = "vae.grad_clip", 1.0;

    dit_d: usize = "dit.d", 64;
    dit_blocks: usize = "dit.blocks", 4;
    dit_heads: usize = "dit.heads", 4;
    dit_mlp_hidden: usize = "dit.mlp_hidden", 128;
    dit_patch: usize = "dit.patch", 2;
    dit_vocab: usize = "dit.vocab", 512;
    dit_steps: usize = "dit.steps", 5000;
    dit_batch: usize = "dit.batch", 16;
    dit_lr: f64 = "dit.lr", 1e-3;
    dit_grad_clip: f64 = "dit.grad_clip", 1.0;
    dit_uncond_dropout: f64 = "dit.uncond_dropout", 0.1;
    dit_time_sampler: String = "dit.time_sampler", "logit_normal".into();

    sample_steps: usize = "sample.steps", 50;
    sample_cfg: f64 = "sample.cfg", 3.0;
    sample_nfe: usize = "sample.nfe", 4;
    sample_count: usize = "sample.count", 8;

    distill_teacher_steps: usize = "distill.teacher_steps", 4000;
    distill_teacher_lr: f64 = "distill.teacher_lr", 1e-3;
    distill_steps: usize = "distill.steps", 1500;
    distill_nfe: usize = "distill.nfe", 4;
    distill_fake_updates: usize = "distill.fake_updates", 5;
    distill_student_lr: f64 = "distill.student_lr", 3e-5;
    distill_fake_lr: f64 = "distill.fake_lr", 1e-3;
    distill_batch: usize = "distill.batch", 256;
    distill_samples: usize = "distill.samples", 10000;

    rlhf_iterations: usize = "rlhf.iterations", 50;
    rlhf_group_size: usize = "rlhf.group_size", 8;
    rlhf_prompts: usize = "rlhf.prompts", 4;
    rlhf_rollout_steps: usize = "rlhf.rollout_steps", 10;
    rlhf_w_cfg: f64 = "rlhf.w_cfg", 2.0;
    rlhf_sde_sigma: f64 = "rlhf.sde_sigma", 0.3;
    rlhf_clip_eps: f64 = "rlhf.clip_eps", 0.2;
    rlhf_lr: f64 = "rlhf.lr", 1e-3;
    rlhf_reward: String = "rlhf.reward", "brightness".into();

    reward_aesthetic: f64 = "reward.aesthetic", 0.2;
    reward_alignment: f64 = "reward.alignment", 0.2;
    reward_portrait: f64 = "reward.portrait", 0.2;
    reward_instruction_following: f64 = "reward.instruction_following", 0.2;
    reward_visual_consistency: f64 = "reward.visual_consistency", 0.2;

    promptforge_count: usize = "promptforge.count", 100;

    pipeline_toy_seed: u64 = "pipeline.toy_seed", crate::datapipe::toy::TOY_PIPELINE_SEED;
    pipeline_min_side: u32 = "pipeline.min_side", 256;
    pipeline_high_min_side: u32 = "pipeline.high_min_side", 2048;
    pipeline_dedup_hamming: u32 = "pipeline.dedup_hamming", 4;
    pipeline_nsfw_max: f64 = "pipeline.nsfw_max", 0.5;
    pipeline_entropy_lo: f64 = "pipeline.entropy_lo", 1.0;
    pipeline_entropy_hi: f64 = "pipeline.entropy_hi", 7.9;
    pipeline_clip_min: f64 = "pipeline.clip_min", 0.3;
    pipeline_tokens_min: usize = "pipeline.tokens_min", 4;
    pipeline_tokens_max: usize = "pipeline.tokens_max", 1024;
    pipeline_quality_min: f64 = "pipeline.quality_min", 0.3;
    pipeline_aesthetic_min: f64 = "pipeline.aesthetic_min", 0.12;
    pipeline_compression_min: f64 = "pipeline.compression_min", 0.5;
    pipeline_strict_entropy_lo: f64 = "pipeline.strict_entropy_lo", 1.5;
    pipeline_strict_entropy_hi: f64 = "pipeline.strict_entropy_hi", 7.7;
    pipeline_strict_clip_min: f64 = "pipeline.strict_clip_min", 0.5;
    pipeline_strict_tokens_min: usize = "pipeline.strict_tokens_min", 6;
    pipeline_strict_tokens_max: usize = "pipeline.strict_tokens_max", 512;
    pipeline_strict_quality_min: f64 = "pipeline.strict_quality_min", 0.4;
    pipeline_strict_aesthetic_min: f64 = "pipeline.strict_aesthetic_min", 0.15;
    pipeline_strict_compression_min: f64 = "pipeline.strict_compression_min", 0.6;

    router_pe_gain: f64 = "router.pe_gain", 0.1;
    router_nn_density: f64 = "router.nn_density", 0.05;

    eval_projections: usize = "eval.projections", 128;
    gradcheck_points: usize = "gradcheck.points", 10;
    gradcheck_eps: f64 = "gradcheck.eps", 1e-5;
    gradcheck_tol: f64 = "gradcheck.tol", 1e-4;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key `{k}` repeated", n + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Writes the resolved configuration as `dir/resolved.cfg`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved.cfg"), self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.vae_config().validate()?;
        self.mmdit_config().validate()?;
        self.pipeline_config().validate()?;
        self.time_sampler()?;
        if self.rlhf_group_size < 2 {
            return Err(Error::Config("rlhf.group_size must be at least 2".into()));
        }
        if self.reward_weights().values().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        if self.data_size % self.vae_factor != 0 || self.data_size / self.vae_factor % self.dit_patch != 0 {
            return Err(Error::Config("data.size must be divisible by vae.factor * dit.patch".into()));
        }
        Ok(())
    }

    pub fn vae_config(&self) -> VaeConfig {
        let mut c = VaeConfig::new(self.vae_factor, self.vae_channels);
        c.widths = self.vae_widths.clone();
        c.preserve_bottleneck = self.vae_preserve_bottleneck;
        c.perceptual_weight = self.vae_perceptual_weight;
        c
    }

    pub fn mmdit_config(&self) -> MmditConfig {
        MmditConfig {
            latent_c: self.vae_channels,
            patch: self.dit_patch,
            d: self.dit_d,
            blocks: self.dit_blocks,
            heads: self.dit_heads,
            mlp_hidden: self.dit_mlp_hidden,
            vocab: self.dit_vocab,
            ..Default::default()
        }
    }

    pub fn time_sampler(&self) -> Result<TimeSampler> {
        TimeSampler::parse(&self.dit_time_sampler)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            min_side: self.pipeline_min_side,
            high_min_side: self.pipeline_high_min_side,
            dedup_hamming: self.pipeline_dedup_hamming,
            nsfw_max: self.pipeline_nsfw_max,
            entropy_lo: self.pipeline_entropy_lo,
            entropy_hi: self.pipeline_entropy_hi,
            clip_min: self.pipeline_clip_min,
            tokens_min: self.pipeline_tokens_min,
            tokens_max: self.pipeline_tokens_max,
            quality_min: self.pipeline_quality_min,
            aesthetic_min: self.pipeline_aesthetic_min,
            compression_min: self.pipeline_compression_min,
            strict_entropy_lo: self.pipeline_strict_entropy_lo,
            strict_entropy_hi: self.pipeline_strict_entropy_hi,
            strict_clip_min: self.pipeline_strict_clip_min,
            strict_tokens_min: self.pipeline_strict_tokens_min,
            strict_tokens_max: self.pipeline_strict_tokens_max,
            strict_quality_min: self.pipeline_strict_quality_min,
            strict_aesthetic_min: self.pipeline_strict_aesthetic_min,
            strict_compression_min: self.pipeline_strict_compression_min,
        }
    }

    pub fn reward_weights(&self) -> BTreeMap<RewardDim, f64> {
        BTreeMap::from([
            (RewardDim::Aesthetic, self.reward_aesthetic),
            (RewardDim::Alignment, self.reward_alignment),
            (RewardDim::Portrait, self.reward_portrait),
            (RewardDim::InstructionFollowing, self.reward_instruction_following),
            (RewardDim::VisualConsistency, self.reward_visual_consistency),
        ])
    }

    pub fn router_thresholds(&self) -> RouterThresholds {
        RouterThresholds { pe_gain: self.router_pe_gain, nn_density: self.router_nn_density }
    }
}

/// Intra-op parallelism width from `QI2_THREADS`, default 1.
pub fn threads() -> Result<usize> {
    match std::env::var("QI2_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("QI2_THREADS = `{v}` is not a positive integer"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.pipeline_config(), PipelineConfig::default());
        assert_eq!(c.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = RunConfig::parse("# tiny\nrun.seed = 7\n\ndit.d = 32   # narrower\nvae.widths = 8, 16, 16\nsample.cfg = 2.5\n").unwrap();
        assert_eq!((c.seed, c.dit_d, c.sample_cfg), (7, 32, 2.5));
        assert_eq!(c.vae_widths, vec![8, 16, 16]);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        for bad in ["dit.depth = 3", "run.seed = 1\nrun.seed = 2", "run.seed 1", "run.seed = x", "vae.factor = 3", "rlhf.group_size = 1"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_)) | Err(Error::Contract { .. })), "{bad}");
        }
    }
}
