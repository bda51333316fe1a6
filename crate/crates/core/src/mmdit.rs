//! Joint text–image diffusion transformer.
//!
//! Image latents are patchified into tokens and concatenated with text
//! tokens into one stream processed by shared blocks:
//!
//! ```text
//! h ← h + Attn(LN(α₁ ⊙ h))      α = 1 + Linear(t_emb), no bias
//! h ← h + SwiGLU(LN(α₂ ⊙ h))
//! ```
//!
//! Q and K pass through per-head RMSNorm with a learned gain, then MSRoPE:
//! image tokens rotate by their (row, col) grid position, text tokens by
//! positions continuing along the grid diagonal. The output head reads the
//! target image span only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::flowmatch::{fm_loss_with, ForwardCounter, VelocityModel};
use crate::tensor::{grad_check_owner, Graph, ParamCheck, ParamId, ParamStore, Tensor, Var};
use crate::text::{token_ids, VOCAB_SIZE};
use crate::vae::LatentImage;

const TEXT_PROJ_SEED: u64 = 0x7E47_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct MmditConfig {
    pub latent_c: usize,
    pub patch: usize,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    /// Width of the sinusoidal timestep encoding.
    pub time_freqs: usize,
    pub rope_base: f64,
}

impl Default for MmditConfig {
    fn default() -> Self {
        Self {
            latent_c: 4,
            patch: 1,
            d: 64,
            blocks: 4,
            heads: 4,
            mlp_hidden: 128,
            vocab: VOCAB_SIZE,
            time_freqs: 32,
            rope_base: 100.0,
        }
    }
}

impl MmditConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        if self.latent_c == 0 || self.patch == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return bad("mmdit extents must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("mmdit.d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.vocab < 2 || self.time_freqs < 2 || self.time_freqs % 2 != 0 {
            return bad("mmdit.vocab >= 2 and even mmdit.time_freqs >= 2 required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Token bookkeeping of one stream: `[target image][source images][text]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamLayout {
    pub modality: Vec<Modality>,
    pub positions: Vec<(i64, i64)>,
    /// `(offset, length)` of the target image tokens.
    pub image_span: (usize, usize),
    pub source_spans: Vec<(usize, usize)>,
    pub text_span: (usize, usize),
}

impl StreamLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Layout for a target grid, source grids and `text_len` text tokens.
///
/// Target cells take `(row, col)`. Each further span starts on the diagonal
/// at `(o, o)`, where `o` is the sum of `max(h, w)` over previous spans;
/// text tokens then step along the diagonal one cell at a time.
pub fn stream_layout(target: Option<(usize, usize)>, sources: &[(usize, usize)], text_len: usize) -> Result<StreamLayout> {
    if target.is_none() && sources.is_empty() && text_len == 0 {
        return contract_err("build_stream", "empty text and empty image");
    }
    let mut modality = Vec::new();
    let mut positions = Vec::new();
    let grid = |h: usize, w: usize, o: i64, pos: &mut Vec<(i64, i64)>, m: &mut Vec<Modality>| {
        for r in 0..h {
            for c in 0..w {
                pos.push((o + r as i64, o + c as i64));
                m.push(Modality::Image);
            }
        }
    };
    let mut offset = 0i64;
    let image_span = match target {
        Some((h, w)) => {
            grid(h, w, 0, &mut positions, &mut modality);
            offset = h.max(w) as i64;
            (0, h * w)
        }
        None => (0, 0),
    };
    let mut source_spans = Vec::new();
    for &(h, w) in sources {
        let start = positions.len();
        grid(h, w, offset, &mut positions, &mut modality);
        source_spans.push((start, h * w));
        offset += h.max(w) as i64;
    }
    let text_start = positions.len();
    for i in 0..text_len {
        positions.push((offset + i as i64, offset + i as i64));
        modality.push(Modality::Text);
    }
    Ok(StreamLayout {
        modality,
        positions,
        image_span,
        source_spans,
        text_span: (text_start, text_len),
    })
}

/// A built stream: `[L, d]` tokens plus layout.
#[derive(Clone, Debug)]
pub struct TokenStream {
    pub tokens: Tensor,
    pub layout: StreamLayout,
}

/// Rotation angles `[L · dh/2]` for MSRoPE: the first half of the rotary
/// pairs rotate with the row index, the second half with the column.
pub fn msrope_angles(positions: &[(i64, i64)], head_dim: usize, base: f64) -> Result<Vec<f64>> {
    if head_dim % 2 != 0 || head_dim == 0 {
        return dim_err("msrope_apply", format!("head dim {head_dim} must be even"));
    }
    let pairs = head_dim / 2;
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    let freq = |j: usize, n: usize| base.powf(-(j as f64) / n.max(1) as f64);
    let mut out = Vec::with_capacity(positions.len() * pairs);
    for &(r, c) in positions {
        for j in 0..row_pairs {
            out.push(r as f64 * freq(j, row_pairs));
        }
        for j in 0..col_pairs {
            out.push(c as f64 * freq(j, col_pairs));
        }
    }
    Ok(out)
}

/// Rotates `[L, H, dh]` queries or keys by their stream positions.
pub fn msrope_apply(g: &mut Graph, x: Var, positions: &[(i64, i64)], base: f64) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != positions.len() {
        return dim_err("msrope_apply", format!("{s:?} with {} positions", positions.len()));
    }
    let angles = msrope_angles(positions, s[2], base)?;
    g.rotary(x, &angles)
}

/// `α ⊙ h` with `α` broadcast over rows; no additive term.
pub fn modulate(g: &mut Graph, h: Var, alpha: Var) -> Result<Var> {
    g.mul(h, alpha)
}

/// `Φ₁(x) ⊙ SiLU(Φ₂(x))`.
pub fn swiglu(g: &mut Graph, x: Var, phi1: Var, phi2: Var) -> Result<Var> {
    let a = g.matmul(x, phi1)?;
    let b = g.matmul(x, phi2)?;
    let b = g.silu(b)?;
    g.mul(a, b)
}

/// Prompt conditioning: text token ids plus clean source latents for
/// image-to-image tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct DitCond {
    pub text_ids: Vec<usize>,
    pub sources: Vec<Tensor>,
}

impl DitCond {
    pub fn prompt(text: &str, vocab: usize) -> Self {
        Self {
            text_ids: token_ids(text, vocab),
            sources: Vec::new(),
        }
    }

    pub fn with_sources(mut self, sources: Vec<Tensor>) -> Self {
        self.sources = sources;
        self
    }
}

#[derive(Clone, Debug)]
struct Block {
    mod1: ParamId,
    mod2: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    q_gain: ParamId,
    k_gain: ParamId,
    phi1: ParamId,
    phi2: ParamId,
    w_out: ParamId,
}

#[derive(Debug)]
pub struct Mmdit {
    cfg: MmditConfig,
    params: ParamStore,
    text_proj: Tensor,
    text_table: ParamId,
    null_text: ParamId,
    img_in_w: ParamId,
    img_in_b: ParamId,
    time_fc1_w: ParamId,
    time_fc1_b: ParamId,
    time_fc2_w: ParamId,
    time_fc2_b: ParamId,
    blocks: Vec<Block>,
    final_w: ParamId,
    final_b: ParamId,
    counter: ForwardCounter,
    /// Latent spatial extents the model samples at.
    grid: (usize, usize),
}

impl Clone for Mmdit {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            text_proj: self.text_proj.clone(),
            text_table: self.text_table,
            null_text: self.null_text,
            img_in_w: self.img_in_w,
            img_in_b: self.img_in_b,
            time_fc1_w: self.time_fc1_w,
            time_fc1_b: self.time_fc1_b,
            time_fc2_w: self.time_fc2_w,
            time_fc2_b: self.time_fc2_b,
            blocks: self.blocks.clone(),
            final_w: self.final_w,
            final_b: self.final_b,
            counter: ForwardCounter::default(),
            grid: self.grid,
        }
    }
}

fn patchify(g: &mut Graph, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = g.reshape(x, &[b, c, h / p, p, w / p, p])?;
    let r = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(r, &[b * (h / p) * (w / p), c * p * p])
}

fn unpatchify(g: &mut Graph, tokens: Var, b: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let r = g.reshape(tokens, &[b, h / p, w / p, c, p, p])?;
    let r = g.permute(r, &[0, 3, 1, 4, 2, 5])?;
    g.reshape(r, &[b, c, h, w])
}

/// Sinusoidal encoding of `t·1000` with geometric frequencies.
pub fn timestep_encoding(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((tv * 1000.0 * freq).cos());
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((tv * 1000.0 * freq).sin());
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("encoding shape")
}

impl Mmdit {
    /// Fresh model sampling `[latent_c, grid.0, grid.1]` latents.
    pub fn new(cfg: MmditConfig, grid: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        if grid.0 % cfg.patch != 0 || grid.1 % cfg.patch != 0 || grid.0 == 0 || grid.1 == 0 {
            return Err(crate::Error::Config(format!("latent grid {grid:?} not divisible by patch {}", cfg.patch)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, hid, dh) = (cfg.d, cfg.mlp_hidden, cfg.head_dim());
        let pin = cfg.latent_c * cfg.patch * cfg.patch;
        let text_table = p.add("text.table", Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng));
        let null_text = p.add("text.null", Tensor::randn(&[1, d], 1.0, &mut rng));
        let img_in_w = p.add_init("img_in.weight", &[pin, d], pin, &mut rng);
        let img_in_b = p.add_zeros("img_in.bias", &[d]);
        let time_fc1_w = p.add_init("time.fc1.weight", &[cfg.time_freqs, d], cfg.time_freqs, &mut rng);
        let time_fc1_b = p.add_zeros("time.fc1.bias", &[d]);
        let time_fc2_w = p.add_init("time.fc2.weight", &[d, d], d, &mut rng);
        let time_fc2_b = p.add_zeros("time.fc2.bias", &[d]);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = |s: &str| format!("blocks.{i}.{s}");
                Block {
                    mod1: p.add_zeros(&n("mod1.weight"), &[d, d]),
                    mod2: p.add_zeros(&n("mod2.weight"), &[d, d]),
                    wq: p.add_init(&n("attn.q.weight"), &[d, d], d, &mut rng),
                    wk: p.add_init(&n("attn.k.weight"), &[d, d], d, &mut rng),
                    wv: p.add_init(&n("attn.v.weight"), &[d, d], d, &mut rng),
                    wo: p.add_init(&n("attn.out.weight"), &[d, d], d, &mut rng),
                    q_gain: p.add_ones(&n("attn.q_norm.gain"), &[dh]),
                    k_gain: p.add_ones(&n("attn.k_norm.gain"), &[dh]),
                    phi1: p.add_init(&n("mlp.phi1.weight"), &[d, hid], d, &mut rng),
                    phi2: p.add_init(&n("mlp.phi2.weight"), &[d, hid], d, &mut rng),
                    w_out: p.add_init(&n("mlp.out.weight"), &[hid, d], hid, &mut rng),
                }
            })
            .collect();
        let final_w = p.add_zeros("final.weight", &[d, pin]);
        let final_b = p.add_zeros("final.bias", &[pin]);
        let mut proj_rng = ChaCha8Rng::seed_from_u64(TEXT_PROJ_SEED);
        let text_proj = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut proj_rng);
        Ok(Self {
            cfg,
            params: p,
            text_proj,
            text_table,
            null_text,
            img_in_w,
            img_in_b,
            time_fc1_w,
            time_fc1_b,
            time_fc2_w,
            time_fc2_b,
            blocks,
            final_w,
            final_b,
            counter: ForwardCounter::default(),
            grid,
        })
    }

    pub fn config(&self) -> &MmditConfig {
        &self.cfg
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Names of every parameter on a modulation path.
    pub fn modulation_params(&self) -> Vec<&str> {
        self.params.names().iter().filter(|n| n.contains(".mod")).map(String::as_str).collect()
    }

    /// Text embeddings `[T, d]` for token ids: learned table rows through
    /// the frozen projection.
    fn text_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab) {
            return dim_err("text_embed", format!("token id {bad} outside vocab {}", self.cfg.vocab));
        }
        let table = self.params.var(g, self.text_table);
        let rows = g.gather_rows(table, ids)?;
        let proj = g.constant(self.text_proj.clone());
        g.matmul(rows, proj)
    }

    /// Text embedding of a prompt, evaluated outside training.
    pub fn embed_text(&self, text: &str) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.text_tokens(&mut g, &token_ids(text, self.cfg.vocab))?;
        Ok(g.value(v).clone())
    }

    /// Packs the target `latent`, clean `sources` and `text_emb` into one
    /// stream, in that order.
    pub fn build_stream(&self, text_emb: Option<&Tensor>, latent: Option<&LatentImage>, sources: &[&LatentImage]) -> Result<TokenStream> {
        let p = self.cfg.patch;
        let grid = |l: &LatentImage| (l.data.shape()[1] / p, l.data.shape()[2] / p);
        let target = latent.map(grid);
        let source_grids: Vec<_> = sources.iter().map(|l| grid(l)).collect();
        let text_len = text_emb.map_or(0, |t| t.shape()[0]);
        let layout = stream_layout(target, &source_grids, text_len)?;
        let mut g = Graph::new();
        let mut parts = Vec::new();
        for l in latent.into_iter().chain(sources.iter().copied()) {
            if l.c != self.cfg.latent_c || l.data.rank() != 3 {
                return dim_err("build_stream", format!("latent {:?} vs model c = {}", l.data.shape(), self.cfg.latent_c));
            }
            let x = g.constant(l.data.clone().reshape(&[1, l.c, l.data.shape()[1], l.data.shape()[2]])?);
            parts.push(self.image_tokens(&mut g, x)?);
        }
        if let Some(t) = text_emb {
            if t.rank() != 2 || t.shape()[1] != self.cfg.d {
                return dim_err("build_stream", format!("text embedding {:?} vs width {}", t.shape(), self.cfg.d));
            }
            parts.push(g.constant(t.clone()));
        }
        let tokens = g.concat(&parts, 0)?;
        Ok(TokenStream {
            tokens: g.value(tokens).clone(),
            layout,
        })
    }

    fn image_tokens(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let p = self.cfg.patch;
        if s.len() != 4 || s[1] != self.cfg.latent_c || s[2] % p != 0 || s[3] % p != 0 {
            return dim_err("image_tokens", format!("latent batch {s:?} vs c = {}, patch {p}", self.cfg.latent_c));
        }
        let patches = patchify(g, x, p)?;
        let w = self.params.var(g, self.img_in_w);
        let b = self.params.var(g, self.img_in_b);
        g.linear(patches, w, Some(b))
    }

    fn time_embedding(&self, g: &mut Graph, t: &[f64]) -> Result<Var> {
        let enc = g.constant(timestep_encoding(t, self.cfg.time_freqs));
        let (w1, b1) = (self.params.var(g, self.time_fc1_w), self.params.var(g, self.time_fc1_b));
        let (w2, b2) = (self.params.var(g, self.time_fc2_w), self.params.var(g, self.time_fc2_b));
        let h = g.linear(enc, w1, Some(b1))?;
        let h = g.silu(h)?;
        g.linear(h, w2, Some(b2))
    }

    /// `1 + t_emb · W` per sample, expanded to one row per token.
    fn alpha(&self, g: &mut Graph, t_emb: Var, w: ParamId, token_sample: &[usize]) -> Result<Var> {
        let w = self.params.var(g, w);
        let a = g.matmul(t_emb, w)?;
        let a = g.add_scalar(a, 1.0)?;
        g.gather_rows(a, token_sample)
    }

    fn block(&self, g: &mut Graph, blk: &Block, h: Var, t_emb: Var, token_sample: &[usize], angles: &[f64], segments: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = (g.shape(h)[0], self.cfg.d);
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let p = &self.params;

        let a1 = self.alpha(g, t_emb, blk.mod1, token_sample)?;
        let x = modulate(g, h, a1)?;
        let x = g.layer_norm(x, 1)?;
        let (wq, wk, wv, wo) = (p.var(g, blk.wq), p.var(g, blk.wk), p.var(g, blk.wv), p.var(g, blk.wo));
        let q = g.matmul(x, wq)?;
        let q = g.reshape(q, &[n, heads, dh])?;
        let qg = p.var(g, blk.q_gain);
        let q = g.rms_norm(q, 2, Some(qg))?;
        let q = g.rotary(q, angles)?;
        let k = g.matmul(x, wk)?;
        let k = g.reshape(k, &[n, heads, dh])?;
        let kg = p.var(g, blk.k_gain);
        let k = g.rms_norm(k, 2, Some(kg))?;
        let k = g.rotary(k, angles)?;
        let v = g.matmul(x, wv)?;
        let v = g.reshape(v, &[n, heads, dh])?;
        let o = g.attention(q, k, v, segments)?;
        let o = g.reshape(o, &[n, d])?;
        let o = g.matmul(o, wo)?;
        let h = g.add(h, o)?;

        let a2 = self.alpha(g, t_emb, blk.mod2, token_sample)?;
        let x = modulate(g, h, a2)?;
        let x = g.layer_norm(x, 1)?;
        let (phi1, phi2, w_out) = (p.var(g, blk.phi1), p.var(g, blk.phi2), p.var(g, blk.w_out));
        let m = swiglu(g, x, phi1, phi2)?;
        let m = g.matmul(m, w_out)?;
        g.add(h, m)
    }

    /// Velocity for a batch of noisy latents `x [B, c, H, W]` at times `t`.
    ///
    /// A dropped condition replaces every text token with the learned null
    /// embedding; source images are kept.
    pub fn velocity_batch(&self, g: &mut Graph, x: Var, t: &[f64], conds: &[&DitCond], dropped: &[bool]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err("forward", format!("expected [B, c, H, W], got {s:?}"));
        }
        let b = s[0];
        if t.len() != b || conds.len() != b || dropped.len() != b {
            return dim_err("forward", format!("batch {b} with {} times, {} conditions", t.len(), conds.len()));
        }
        if let Some(bad) = t.iter().find(|tv| !(0.0..=1.0).contains(*tv)) {
            return contract_err("forward", format!("t = {bad} outside [0, 1]"));
        }
        let pch = self.cfg.patch;
        let (gh, gw) = (s[2] / pch, s[3] / pch);
        let n_img = gh * gw;

        // Token table: [image tokens of all samples][source tokens][text][null].
        let mut pieces = vec![self.image_tokens(g, x)?];
        let mut cursor = b * n_img;
        let mut source_rows: Vec<Vec<(usize, (usize, usize))>> = Vec::with_capacity(b);
        for cond in conds {
            let mut rows = Vec::new();
            for src in &cond.sources {
                let [c, h, w] = *src.shape() else {
                    return dim_err("forward", format!("source latent {:?}", src.shape()));
                };
                let sv = g.constant(src.clone().reshape(&[1, c, h, w])?);
                let tok = self.image_tokens(g, sv)?;
                rows.push((cursor, (h / pch, w / pch)));
                cursor += (h / pch) * (w / pch);
                pieces.push(tok);
            }
            source_rows.push(rows);
        }
        let kept_ids: Vec<usize> = conds
            .iter()
            .zip(dropped)
            .filter(|(_, &d)| !d)
            .flat_map(|(c, _)| c.text_ids.iter().copied())
            .collect();
        let text_base = cursor;
        if !kept_ids.is_empty() {
            pieces.push(self.text_tokens(g, &kept_ids)?);
            cursor += kept_ids.len();
        }
        let null_row = cursor;
        if dropped.iter().any(|&d| d) {
            pieces.push(self.params.var(g, self.null_text));
        }
        let table = if pieces.len() == 1 { pieces[0] } else { g.concat(&pieces, 0)? };

        let mut order = Vec::new();
        let mut positions = Vec::new();
        let mut token_sample = Vec::new();
        let mut segments = Vec::with_capacity(b);
        let mut target_rows = Vec::with_capacity(b * n_img);
        let mut text_cursor = text_base;
        for i in 0..b {
            let cond = conds[i];
            let grids: Vec<(usize, usize)> = source_rows[i].iter().map(|r| r.1).collect();
            let layout = stream_layout(Some((gh, gw)), &grids, cond.text_ids.len())?;
            let start = order.len();
            target_rows.extend(start..start + n_img);
            order.extend(i * n_img..(i + 1) * n_img);
            for &(row, (h, w)) in &source_rows[i] {
                order.extend(row..row + h * w);
            }
            for _ in 0..cond.text_ids.len() {
                if dropped[i] {
                    order.push(null_row);
                } else {
                    order.push(text_cursor);
                    text_cursor += 1;
                }
            }
            let len = layout.len();
            token_sample.extend(std::iter::repeat(i).take(len));
            positions.extend(layout.positions);
            segments.push((start, len));
            self.counter.record(dropped[i]);
        }
        let mut h = g.gather_rows(table, &order)?;
        let angles = msrope_angles(&positions, self.cfg.head_dim(), self.cfg.rope_base)?;
        let t_emb = self.time_embedding(g, t)?;
        for blk in &self.blocks {
            h = self.block(g, blk, h, t_emb, &token_sample, &angles, &segments)?;
        }
        let out = g.gather_rows(h, &target_rows)?;
        let out = g.layer_norm(out, 1)?;
        let (fw, fb) = (self.params.var(g, self.final_w), self.params.var(g, self.final_b));
        let out = g.linear(out, fw, Some(fb))?;
        unpatchify(g, out, b, self.cfg.latent_c, s[2], s[3], pch)
    }

    /// Velocity prediction for one latent `[c, H, W]`.
    pub fn forward(&self, x_t: &Tensor, t: f64, cond: &DitCond, cond_dropped: bool) -> Result<Tensor> {
        let [c, h, w] = *x_t.shape() else {
            return dim_err("forward", format!("expected [c, H, W], got {:?}", x_t.shape()));
        };
        let mut g = Graph::new();
        let x = g.constant(x_t.clone().reshape(&[1, c, h, w])?);
        let v = self.velocity_batch(&mut g, x, &[t], &[cond], &[cond_dropped])?;
        g.value(v).clone().reshape(&[c, h, w])
    }
}

impl VelocityModel for Mmdit {
    type Cond = DitCond;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.cfg.latent_c, self.grid.0, self.grid.1]
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], conds: &[&DitCond], dropped: &[bool]) -> Result<Var> {
        self.velocity_batch(g, x, t, conds, dropped)
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}

/// Finite-difference check of the full flow-matching loss of a 2-block
/// model with perturbed weights, over every parameter coordinate, with one
/// image-to-image sample and one dropped condition in the batch.
pub fn loss_grad_check(seed: u64, eps: f64) -> Result<ParamCheck> {
    let cfg = MmditConfig { d: 16, blocks: 2, heads: 2, mlp_hidden: 16, vocab: 16, time_freqs: 8, ..Default::default() };
    let mut model = Mmdit::new(cfg, (2, 2), seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let t = model.params.get_mut(id);
        let fresh = Tensor::randn(t.shape(), 0.3, &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(fresh.data()) {
            *v += n;
        }
    }
    let x0 = Tensor::randn(&[2, 4, 2, 2], 1.0, &mut r);
    let xi = Tensor::randn(&[2, 4, 2, 2], 1.0, &mut r);
    let c0 = DitCond { text_ids: vec![1, 7], sources: vec![] };
    let c1 = DitCond { text_ids: vec![2, 3, 4], sources: vec![Tensor::randn(&[4, 2, 2], 1.0, &mut r)] };
    grad_check_owner(&mut model, |m| &m.params, |m| &mut m.params, |g, m| fm_loss_with(m, g, &x0, &xi, &[0.3, 0.7], &[&c0, &c1], &[false, true]), eps, 1)
}
