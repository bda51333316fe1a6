//! Residual convolutional autoencoder.
//!
//! Each downsampling stage adds a non-parametric shortcut (space-to-depth
//! followed by channel-group averaging) to its convolutional output; the
//! decoder mirrors it with channel repetition followed by depth-to-space.
//! Training combines L1 reconstruction, a perceptual feature distance and a
//! scheduled semantic-alignment term. There is no adversarial branch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{clip_grad_norm, Adam, Graph, ParamId, ParamStore, Tensor, Var};

/// Seed of the frozen embedder; fixed so every checkpoint sees the same one.
const EMBEDDER_SEED: u64 = 0x00E3_B0DD;
const EMBED_STEM: usize = 8;
const EMBED_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// Spatial downsampling factor, a power of two ≥ 2.
    pub f: usize,
    /// Latent channels.
    pub c: usize,
    /// Channel width at each resolution level, full resolution first;
    /// `log2(f) + 1` entries.
    pub widths: Vec<usize>,
    /// `(step, weight)` breakpoints of the alignment weight, non-increasing.
    pub align_schedule: Vec<(u64, f64)>,
    /// Enforce `c == f²/4`.
    pub preserve_bottleneck: bool,
    pub perceptual_weight: f64,
}

impl VaeConfig {
    pub fn new(f: usize, c: usize) -> Self {
        let levels = f.max(1).trailing_zeros() as usize;
        Self {
            f,
            c,
            widths: (0..=levels).map(|k| (16usize << k).min(64)).collect(),
            align_schedule: vec![(0, 1.0), (5000, 0.1)],
            preserve_bottleneck: false,
            perceptual_weight: 0.1,
        }
    }

    /// Config with the channel count fixed by `c = f²/4`.
    pub fn bottleneck_preserving(f: usize) -> Self {
        Self {
            preserve_bottleneck: true,
            ..Self::new(f, f * f / 4)
        }
    }

    pub fn levels(&self) -> usize {
        self.f.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.f < 2 || !self.f.is_power_of_two() {
            return Err(Error::Config(format!("vae.f must be a power of two >= 2, got {}", self.f)));
        }
        if self.c == 0 {
            return Err(Error::Config("vae.c must be positive".into()));
        }
        if self.preserve_bottleneck && self.c * 4 != self.f * self.f {
            return Err(Error::Config(format!(
                "bottleneck preservation requires c = f^2/4 = {}, got c = {}",
                self.f * self.f / 4,
                self.c
            )));
        }
        if self.widths.len() != self.levels() + 1 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "vae.widths needs {} positive entries, got {:?}",
                self.levels() + 1,
                self.widths
            )));
        }
        for k in 1..self.widths.len() {
            check_resample(4 * self.widths[k - 1], self.widths[k])?;
        }
        check_resample(*self.widths.last().expect("non-empty"), self.c)?;
        if self.align_schedule.is_empty() {
            return Err(Error::Config("vae.align_schedule is empty".into()));
        }
        for pair in self.align_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 || pair[1].1 > pair[0].1 {
                return Err(Error::Config(
                    "vae.align_schedule steps must increase and weights must not increase".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_resample(from: usize, to: usize) -> Result<()> {
    if from % to == 0 || to % from == 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("cannot resample {from} channels to {to}")))
    }
}

/// Piecewise-linear weight through `schedule`, clamped outside it.
pub fn align_weight(schedule: &[(u64, f64)], step: i64) -> Result<f64> {
    if step < 0 {
        return contract_err("vae_loss", format!("negative step {step}"));
    }
    let step = step as u64;
    let Some(&(s0, w0)) = schedule.first() else {
        return contract_err("vae_loss", "empty alignment schedule");
    };
    if step <= s0 {
        return Ok(w0);
    }
    for pair in schedule.windows(2) {
        let ((a, wa), (b, wb)) = (pair[0], pair[1]);
        if step <= b {
            let t = (step - a) as f64 / (b - a) as f64;
            return Ok(wa + (wb - wa) * t);
        }
    }
    Ok(schedule.last().expect("non-empty").1)
}

/// A latent grid with the autoencoder geometry it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    /// `[c, H/f, W/f]`.
    pub data: Tensor,
    pub f: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_init(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let b = bias.then(|| store.add_zeros(&format!("{name}.bias"), &[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(g, self.w);
        let b = self.b.map(|b| store.var(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Averages consecutive channel groups (`from > to`) or repeats each
/// channel (`from < to`).
fn resample_channels(g: &mut Graph, x: Var, to: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let from = s[1];
    if from == to {
        Ok(x)
    } else if from % to == 0 {
        let r = g.reshape(x, &[s[0], to, from / to, s[2], s[3]])?;
        g.mean_axis(r, 2)
    } else if to % from == 0 {
        g.repeat_interleave(x, 1, to / from)
    } else {
        dim_err("resample_channels", format!("{from} -> {to}"))
    }
}

pub fn space_to_depth(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return dim_err("space_to_depth", format!("{s:?}"));
    }
    let r = g.reshape(x, &[s[0], s[1], s[2] / 2, 2, s[3] / 2, 2])?;
    let p = g.permute(r, &[0, 1, 3, 5, 2, 4])?;
    g.reshape(p, &[s[0], s[1] * 4, s[2] / 2, s[3] / 2])
}

pub fn depth_to_space(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] % 4 != 0 {
        return dim_err("depth_to_space", format!("{s:?}"));
    }
    let r = g.reshape(x, &[s[0], s[1] / 4, 2, 2, s[2], s[3]])?;
    let p = g.permute(r, &[0, 1, 4, 2, 5, 3])?;
    g.reshape(p, &[s[0], s[1] / 4, s[2] * 2, s[3] * 2])
}

/// Frozen random convolutional stack standing in for a semantic encoder.
#[derive(Clone, Debug)]
struct Embedder {
    store: ParamStore,
    layers: Vec<Conv>,
}

impl Embedder {
    fn new(levels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDER_SEED);
        let mut store = ParamStore::new();
        let mut layers = vec![Conv::new(&mut store, "embed.stem", 3, EMBED_STEM, 3, 1, true, &mut rng)];
        let mut cin = EMBED_STEM;
        for k in 1..=levels {
            layers.push(Conv::new(&mut store, &format!("embed.down{k}"), cin, EMBED_WIDTH, 3, 2, true, &mut rng));
            cin = EMBED_WIDTH;
        }
        store.set_trainable(false);
        Self { store, layers }
    }

    /// Activations after every layer; the last lies on the latent grid.
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let y = layer.apply(g, &self.store, h)?;
            h = g.silu(y)?;
            out.push(h);
        }
        Ok(out)
    }
}

struct Stage {
    conv1: Conv,
    conv2: Conv,
}

/// The autoencoder with its parameters and the frozen embedder.
pub struct Vae {
    cfg: VaeConfig,
    params: ParamStore,
    embedder: Embedder,
    enc_stem: Conv,
    enc_stages: Vec<Stage>,
    enc_head: Conv,
    dec_head: Conv,
    dec_stages: Vec<Stage>,
    dec_out: Conv,
    align_proj: ParamId,
}

/// Scalar values of the three loss terms, keyed `recon`, `perceptual`, `align`.
pub type LossParts = BTreeMap<String, f64>;

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = cfg.widths.clone();
        let levels = cfg.levels();
        let enc_stem = Conv::new(&mut p, "enc.stem", 3, w[0], 3, 1, true, &mut rng);
        let enc_stages = (1..=levels)
            .map(|k| Stage {
                conv1: Conv::new(&mut p, &format!("enc.down{k}.conv1"), w[k - 1], w[k], 3, 2, true, &mut rng),
                conv2: Conv::new(&mut p, &format!("enc.down{k}.conv2"), w[k], w[k], 3, 1, true, &mut rng),
            })
            .collect();
        let enc_head = Conv::new(&mut p, "enc.head", w[levels], cfg.c, 3, 1, true, &mut rng);
        let dec_head = Conv::new(&mut p, "dec.head", cfg.c, w[levels], 3, 1, true, &mut rng);
        let dec_stages = (1..=levels)
            .rev()
            .map(|k| Stage {
                conv1: Conv::new(&mut p, &format!("dec.up{k}.conv1"), w[k], w[k], 3, 1, true, &mut rng),
                conv2: Conv::new(&mut p, &format!("dec.up{k}.conv2"), w[k], 4 * w[k - 1], 3, 1, true, &mut rng),
            })
            .collect();
        let dec_out = Conv::new(&mut p, "dec.out", w[0], 3, 3, 1, true, &mut rng);
        let align_proj = p.add_init("align.proj.weight", &[EMBED_WIDTH, cfg.c, 1, 1], cfg.c, &mut rng);
        Ok(Self {
            embedder: Embedder::new(levels),
            cfg,
            params: p,
            enc_stem,
            enc_stages,
            enc_head,
            dec_head,
            dec_stages,
            dec_out,
            align_proj,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Encoder graph over `[B, 3, H, W]`.
    pub fn encode_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return dim_err("encode", format!("expected [B, 3, H, W], got {s:?}"));
        }
        if s[2] % self.cfg.f != 0 || s[3] % self.cfg.f != 0 {
            return dim_err("encode", format!("{}x{} not divisible by f = {}", s[2], s[3], self.cfg.f));
        }
        let p = &self.params;
        let mut h = self.enc_stem.apply(g, p, x)?;
        for (k, st) in self.enc_stages.iter().enumerate() {
            let a = g.silu(h)?;
            let a = st.conv1.apply(g, p, a)?;
            let a = g.silu(a)?;
            let a = st.conv2.apply(g, p, a)?;
            let sc = space_to_depth(g, h)?;
            let sc = resample_channels(g, sc, self.cfg.widths[k + 1])?;
            h = g.add(a, sc)?;
        }
        let a = g.silu(h)?;
        let a = self.enc_head.apply(g, p, a)?;
        let sc = resample_channels(g, h, self.cfg.c)?;
        g.add(a, sc)
    }

    /// Decoder graph over `[B, c, h, w]`; output in [−1, 1].
    pub fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.cfg.c {
            return dim_err("decode", format!("expected [B, {}, h, w], got {s:?}", self.cfg.c));
        }
        let p = &self.params;
        let levels = self.cfg.levels();
        let a = self.dec_head.apply(g, p, z)?;
        let sc = resample_channels(g, z, self.cfg.widths[levels])?;
        let mut h = g.add(a, sc)?;
        for (i, st) in self.dec_stages.iter().enumerate() {
            let k = levels - i;
            let a = g.silu(h)?;
            let a = st.conv1.apply(g, p, a)?;
            let a = g.silu(a)?;
            let a = st.conv2.apply(g, p, a)?;
            let sc = resample_channels(g, h, 4 * self.cfg.widths[k - 1])?;
            let sum = g.add(a, sc)?;
            h = depth_to_space(g, sum)?;
        }
        let a = g.silu(h)?;
        let a = self.dec_out.apply(g, p, a)?;
        g.tanh(a)
    }

    fn batch_var(g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        let stacked = Tensor::stack(&images.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
        Ok(g.constant(stacked))
    }

    pub fn encode(&self, image: &Tensor) -> Result<LatentImage> {
        let z = self.encode_batch(&[image])?;
        Ok(LatentImage {
            data: z.index0(0),
            f: self.cfg.f,
            c: self.cfg.c,
        })
    }

    /// `[B, c, h, w]` latents of `[3, H, W]` images.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        if let Some(bad) = images.iter().find(|t| t.rank() != 3) {
            return dim_err("encode", format!("expected [3, H, W], got {:?}", bad.shape()));
        }
        let mut g = Graph::new();
        let x = Self::batch_var(&mut g, images)?;
        let z = self.encode_var(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Tensor> {
        if latent.c != self.cfg.c || latent.f != self.cfg.f {
            return dim_err("decode", format!("latent f{}c{} vs model f{}c{}", latent.f, latent.c, self.cfg.f, self.cfg.c));
        }
        Ok(self.decode_batch(&[&latent.data])?.index0(0))
    }

    /// `[B, 3, H, W]` images of `[c, h, w]` latents.
    pub fn decode_batch(&self, latents: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = Self::batch_var(&mut g, latents)?;
        let x = self.decode_var(&mut g, z)?;
        Ok(g.value(x).clone())
    }

    /// Frozen-embedder features of `x` on the latent grid, as a constant.
    pub fn align_target(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let feats = self.embedder.features(g, x)?;
        Ok(g.detach(*feats.last().expect("at least the stem")))
    }

    /// Learned 1×1 projection of latent channels onto embedder channels.
    pub fn project_latent(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let w = self.params.var(g, self.align_proj);
        g.conv2d(z, w, None, 1, 0)
    }

    /// `L1(x, x̂) + λ_p·perceptual(x, x̂) + w(step)·(1 − mean cos(proj(z), target))`.
    ///
    /// `latent` and `align_target` are `[B, ·, h, w]` on the same grid.
    pub fn vae_loss(&self, g: &mut Graph, x: Var, x_hat: Var, latent: Var, align_target: Var, step: i64) -> Result<(Var, LossParts)> {
        let w_align = align_weight(&self.cfg.align_schedule, step)?;
        if g.shape(x) != g.shape(x_hat) {
            return dim_err("vae_loss", format!("{:?} vs {:?}", g.shape(x), g.shape(x_hat)));
        }
        let d = g.sub(x, x_hat)?;
        let d = g.abs(d)?;
        let recon = g.mean(d)?;

        let fx = self.embedder.features(g, x)?;
        let fy = self.embedder.features(g, x_hat)?;
        let mut perceptual: Option<Var> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let a = g.detach(a);
            let d = g.sub(a, b)?;
            let d = g.square(d)?;
            let m = g.mean(d)?;
            perceptual = Some(match perceptual {
                Some(p) => g.add(p, m)?,
                None => m,
            });
        }
        let perceptual = perceptual.expect("embedder has layers");

        let proj = self.project_latent(g, latent)?;
        if g.shape(proj) != g.shape(align_target) {
            return dim_err("vae_loss", format!("projection {:?} vs target {:?}", g.shape(proj), g.shape(align_target)));
        }
        let cos = g.cosine_similarity(proj, align_target, 1)?;
        let cos = g.mean(cos)?;
        let neg = g.scale(cos, -1.0)?;
        let align = g.add_scalar(neg, 1.0)?;

        let wp = g.scale(perceptual, self.cfg.perceptual_weight)?;
        let wa = g.scale(align, w_align)?;
        let total = g.add(recon, wp)?;
        let total = g.add(total, wa)?;
        let mut parts = LossParts::new();
        parts.insert("recon".into(), g.value(recon).data()[0]);
        parts.insert("perceptual".into(), g.value(perceptual).data()[0]);
        parts.insert("align".into(), g.value(align).data()[0]);
        Ok((total, parts))
    }

    /// Full training loss on a batch of images.
    pub fn training_loss(&self, g: &mut Graph, images: &[&Tensor], step: i64) -> Result<(Var, LossParts)> {
        let x = Self::batch_var(g, images)?;
        let z = self.encode_var(g, x)?;
        let x_hat = self.decode_var(g, z)?;
        let target = self.align_target(g, x)?;
        self.vae_loss(g, x, x_hat, z, target, step)
    }

    /// Composes the three weighted parts exactly as [`Self::vae_loss`] does.
    pub fn total_from_parts(&self, parts: &LossParts, step: i64) -> Result<f64> {
        let w = align_weight(&self.cfg.align_schedule, step)?;
        Ok(parts["recon"] + parts["perceptual"] * self.cfg.perceptual_weight + parts["align"] * w)
    }
}

#[derive(Clone, Debug)]
pub struct VaeStepStats {
    pub step: u64,
    pub total: f64,
    pub parts: LossParts,
    pub grad_norm: f64,
}

/// Adam + gradient clipping over the autoencoder parameters.
pub struct VaeTrainer {
    pub adam: Adam,
    pub grad_clip: f64,
    step: u64,
}

impl VaeTrainer {
    pub fn new(lr: f64, grad_clip: f64) -> Self {
        Self {
            adam: Adam::new(lr),
            grad_clip,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_step(&mut self, vae: &mut Vae, images: &[&Tensor]) -> Result<VaeStepStats> {
        let mut g = Graph::new();
        let (loss, parts) = vae.training_loss(&mut g, images, self.step as i64)?;
        let grads = g.backward(loss)?;
        let mut gs = vae.params.grads(&g, &grads);
        let (norm, _) = clip_grad_norm(&mut gs, self.grad_clip);
        self.adam.step(&mut vae.params, &gs);
        let stats = VaeStepStats {
            step: self.step,
            total: g.value(loss).data()[0],
            parts,
            grad_norm: norm,
        };
        self.step += 1;
        Ok(stats)
    }
}
