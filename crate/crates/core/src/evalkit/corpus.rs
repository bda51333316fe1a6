//! Deterministic toy corpora: shapes, glyphs, 2D Gaussian mixtures, portraits.
//!
//! Every generator is a pure function of its [`ToyCorpusSpec`]; images are
//! `[3, size, size]` tensors in [−1, 1].

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::image_io;
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "cross", "diamond", "ring"];

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusKind {
    Shapes { classes: usize, size: usize },
    Glyphs { charset: String, size: usize },
    Gaussians2d { means: Vec<[f64; 2]>, covs: Vec<[[f64; 2]; 2]> },
    Portraits { size: usize },
}

impl CorpusKind {
    /// Kind by name with default parameters at the given image size.
    pub fn named(name: &str, size: usize) -> Result<Self> {
        Ok(match name {
            "shapes" => Self::Shapes { classes: 4, size },
            "glyphs" => Self::Glyphs {
                charset: "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".into(),
                size,
            },
            "gaussians2d" => Self::two_gaussians(),
            "portraits" => Self::Portraits { size },
            other => return contract_err("generate_corpus", format!("unknown corpus kind `{other}`")),
        })
    }

    /// The two-component mixture used by the 2D flow and distillation runs.
    pub fn two_gaussians() -> Self {
        Self::Gaussians2d {
            means: vec![[-1.5, 0.0], [1.5, 0.5]],
            covs: vec![[[0.09, 0.0], [0.0, 0.09]], [[0.09, 0.03], [0.03, 0.06]]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub kind: CorpusKind,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub id: String,
    pub image: Option<Tensor>,
    pub point: Option<[f64; 2]>,
    pub label: usize,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: ToyCorpusSpec,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn images(&self) -> Vec<&Tensor> {
        self.items.iter().filter_map(|i| i.image.as_ref()).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.items.iter().filter_map(|i| i.point.map(|p| p.to_vec())).collect()
    }
}

fn validate(spec: &ToyCorpusSpec) -> Result<()> {
    match &spec.kind {
        CorpusKind::Shapes { classes, size } => {
            if *classes == 0 || *classes > SHAPE_NAMES.len() {
                return contract_err("generate_corpus", format!("shapes supports 1..={} classes", SHAPE_NAMES.len()));
            }
            check_size(*size)
        }
        CorpusKind::Glyphs { charset, size } => {
            if charset.is_empty() {
                return contract_err("generate_corpus", "empty charset");
            }
            if let Some(c) = charset.chars().find(|&c| glyph_bits(c).is_none()) {
                return contract_err("generate_corpus", format!("no glyph for {c:?}"));
            }
            check_size(*size)
        }
        CorpusKind::Gaussians2d { means, covs } => {
            if means.is_empty() || means.len() != covs.len() {
                return contract_err("generate_corpus", "need one covariance per mean");
            }
            for c in covs {
                let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
                if c[0][0] <= 0.0 || det <= 0.0 || c[0][1] != c[1][0] {
                    return contract_err("generate_corpus", "covariances must be symmetric positive definite");
                }
            }
            Ok(())
        }
        CorpusKind::Portraits { size } => check_size(*size),
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 {
        return contract_err("generate_corpus", format!("image size {size} below 16"));
    }
    Ok(())
}

pub fn generate(spec: &ToyCorpusSpec) -> Result<Corpus> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let id = format!("{i:06}");
        let item = match &spec.kind {
            CorpusKind::Shapes { classes, size } => {
                let label = rng.gen_range(0..*classes);
                let image = render_shape_sample(label, *size, &mut rng);
                CorpusItem {
                    id,
                    image: Some(image),
                    point: None,
                    label,
                    caption: shape_caption(label),
                }
            }
            CorpusKind::Glyphs { charset, size } => {
                let chars: Vec<char> = charset.chars().collect();
                let label = rng.gen_range(0..chars.len());
                let image = render_glyph_sample(chars[label], *size, &mut rng);
                let caption = if chars[label].is_ascii_digit() {
                    format!("the digit {}", chars[label])
                } else {
                    format!("the letter {}", chars[label])
                };
                CorpusItem {
                    id,
                    image: Some(image),
                    point: None,
                    label,
                    caption,
                }
            }
            CorpusKind::Gaussians2d { means, covs } => {
                let label = rng.gen_range(0..means.len());
                let point = sample_gaussian(means[label], covs[label], &mut rng);
                CorpusItem {
                    id,
                    image: None,
                    point: Some(point),
                    label,
                    caption: format!("component {label}"),
                }
            }
            CorpusKind::Portraits { size } => CorpusItem {
                id,
                image: Some(render_portrait(*size, &mut rng)),
                point: None,
                label: 0,
                caption: "a portrait of a person".into(),
            },
        };
        items.push(item);
    }
    Ok(Corpus {
        spec: spec.clone(),
        items,
    })
}

pub fn shape_caption(label: usize) -> String {
    format!("a {}", SHAPE_NAMES[label])
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    id: &'a str,
    label: usize,
    caption: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    point: Option<[f64; 2]>,
}

/// Writes `manifest.jsonl` plus one PNG per image under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut lines = String::new();
    for item in &corpus.items {
        let mut line = ManifestLine {
            id: &item.id,
            label: item.label,
            caption: &item.caption,
            path: None,
            width: None,
            height: None,
            point: item.point,
        };
        if let Some(img) = &item.image {
            let rel = format!("images/{}.png", item.id);
            image_io::save_png(img, &dir.join(&rel))?;
            line.path = Some(rel);
            line.height = Some(img.shape()[1]);
            line.width = Some(img.shape()[2]);
        }
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, lines)?;
    Ok(manifest)
}

fn sample_gaussian<R: Rng>(mean: [f64; 2], cov: [[f64; 2]; 2], rng: &mut R) -> [f64; 2] {
    let l00 = cov[0][0].sqrt();
    let l10 = cov[1][0] / l00;
    let l11 = (cov[1][1] - l10 * l10).sqrt();
    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    [mean[0] + l00 * z0, mean[1] + l10 * z0 + l11 * z1]
}

/// RGB canvas in [0, 1] with painter-style compositing.
struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize, bg: [f64; 3]) -> Self {
        Self {
            size,
            rgb: vec![bg; size * size],
        }
    }

    /// Blends `color` with per-pixel coverage from a 4×4 supersampled predicate.
    fn paint(&mut self, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let cov = coverage(self.size, inside);
        for (px, &a) in self.rgb.iter_mut().zip(&cov) {
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + color[c] * a;
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let n = self.size * self.size;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] * 2.0 - 1.0;
            }
        }
        Tensor::new(vec![3, self.size, self.size], data).expect("canvas shape")
    }
}

fn coverage(size: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    const SS: usize = 4;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(px, py) {
                        hits += 1;
                    }
                }
            }
            out[y * size + x] = hits as f64 / (SS * SS) as f64;
        }
    }
    out
}

/// Point-in-shape predicate for class `label` centered at `(cx, cy)` with
/// nominal radius `r`. Every shape has its centroid at the center.
pub fn shape_contains(label: usize, cx: f64, cy: f64, r: f64) -> impl Fn(f64, f64) -> bool {
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        match label {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            2 => {
                let big = 1.25 * r;
                let (s, c) = (3f64.sqrt() / 2.0, 0.5);
                // Three half-planes of an upward equilateral triangle.
                dy <= c * big && (s * dx - c * dy) <= c * big && (-s * dx - c * dy) <= c * big
            }
            3 => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
            4 => dx.abs() + dy.abs() <= 1.2 * r,
            _ => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

/// Anti-aliased coverage mask of a shape template on a `size`² grid.
pub fn shape_mask(label: usize, size: usize, cx: f64, cy: f64, r: f64) -> Vec<f64> {
    coverage(size, shape_contains(label, cx, cy, r))
}

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.45, 0.95],
    [0.95, 0.85, 0.2],
    [0.9, 0.4, 0.85],
    [0.2, 0.85, 0.9],
    [0.95, 0.6, 0.2],
    [0.9, 0.9, 0.9],
];

fn jitter<R: Rng>(c: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

fn dark_background<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)]
}

pub fn render_shape_sample<R: Rng>(label: usize, size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let bg = dark_background(rng);
    let fg = jitter(PALETTE[rng.gen_range(0..PALETTE.len())], 0.05, rng);
    let cx = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let cy = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let r = s * rng.gen_range(0.24..0.32);
    let mut canvas = Canvas::new(size, bg);
    canvas.paint(fg, shape_contains(label, cx, cy, r));
    canvas.into_tensor()
}

/// 5×7 bitmap rows (low five bits, MSB leftmost) for `0-9` and `A-Z`.
pub fn glyph_bits(c: char) -> Option<[u8; 7]> {
    const DIGITS: [[u8; 7]; 10] = [
        [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
    ];
    const LETTERS: [[u8; 7]; 26] = [
        [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
    ];
    match c {
        '0'..='9' => Some(DIGITS[c as usize - '0' as usize]),
        'A'..='Z' => Some(LETTERS[c as usize - 'A' as usize]),
        _ => None,
    }
}

/// One character in the fixed 5×7 font, scaled and placed on a solid or
/// gradient background.
pub fn render_glyph_sample<R: Rng>(c: char, size: usize, rng: &mut R) -> Tensor {
    let bits = glyph_bits(c).expect("validated charset");
    let s = size as f64;
    let cell = s * rng.gen_range(0.09..0.12);
    let (gw, gh) = (5.0 * cell, 7.0 * cell);
    let x0 = rng.gen_range(0.0..(s - gw).max(0.01));
    let y0 = rng.gen_range(0.0..(s - gh).max(0.01));

    let light_text = rng.gen_bool(0.5);
    let (bg_a, fg) = if light_text {
        (dark_background(rng), jitter(PALETTE[rng.gen_range(0..PALETTE.len())], 0.05, rng))
    } else {
        let fg = [rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25)];
        (jitter(PALETTE[rng.gen_range(0..PALETTE.len())], 0.05, rng), fg)
    };
    let bg_b = if rng.gen_bool(0.5) { jitter(bg_a, 0.15, rng) } else { bg_a };

    let mut canvas = Canvas::new(size, bg_a);
    for y in 0..size {
        let t = y as f64 / (s - 1.0);
        for x in 0..size {
            let px = &mut canvas.rgb[y * size + x];
            for k in 0..3 {
                px[k] = bg_a[k] * (1.0 - t) + bg_b[k] * t;
            }
        }
    }
    canvas.paint(fg, move |x, y| {
        let (gx, gy) = ((x - x0) / cell, (y - y0) / cell);
        if gx < 0.0 || gy < 0.0 || gx >= 5.0 || gy >= 7.0 {
            return false;
        }
        bits[gy as usize] >> (4 - gx as usize) & 1 == 1
    });
    canvas.into_tensor()
}

/// The fixed central box `(x0, y0, w, h)` holding the face in a portrait.
pub fn portrait_face_region(size: usize) -> (usize, usize, usize, usize) {
    (size / 4, size / 8, size / 2, size * 3 / 4)
}

/// Stylized face: head ellipse, hair cap, two eyes with random offsets
/// (the source of asymmetry) and a mouth bar. The face is horizontally
/// centered in [`portrait_face_region`].
pub fn render_portrait<R: Rng>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let bg = jitter([0.55, 0.65, 0.75], 0.2, rng);
    let skin = jitter([0.85, 0.65, 0.5], 0.08, rng);
    let hair = jitter([0.2, 0.12, 0.05], 0.05, rng);
    let (cx, cy) = (s / 2.0, s / 2.0 + 0.03 * s);
    let (rx, ry) = (0.22 * s, 0.3 * s);
    let mut canvas = Canvas::new(size, bg);
    canvas.paint(skin, move |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0);
    canvas.paint(hair, move |x, y| {
        y < cy - 0.45 * ry && ((x - cx) / (rx * 1.05)).powi(2) + ((y - cy) / (ry * 1.05)).powi(2) <= 1.0
    });
    let asym = 0.07 * s;
    let eyes = [
        (cx - 0.1 * s + rng.gen_range(-asym..asym), cy - 0.06 * s + rng.gen_range(-asym..asym) * 0.5),
        (cx + 0.1 * s + rng.gen_range(-asym..asym), cy - 0.06 * s + rng.gen_range(-asym..asym) * 0.5),
    ];
    let er = 0.045 * s;
    for (ex, ey) in eyes {
        canvas.paint([0.08, 0.08, 0.1], move |x, y| (x - ex).powi(2) + (y - ey).powi(2) <= er * er);
    }
    let (mw, my) = (0.09 * s, cy + 0.14 * s);
    canvas.paint([0.6, 0.2, 0.2], move |x, y| (x - cx).abs() <= mw && (y - my).abs() <= 0.025 * s + 0.5);
    canvas.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: CorpusKind, count: usize) -> ToyCorpusSpec {
        ToyCorpusSpec { kind, count, seed: 42 }
    }

    #[test]
    fn same_spec_gives_byte_identical_corpora() {
        let s = spec(CorpusKind::Shapes { classes: 4, size: 32 }, 12);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(&generate(&s).unwrap(), a.path()).unwrap();
        write_corpus(&generate(&s).unwrap(), b.path()).unwrap();
        for rel in ["manifest.jsonl", "images/000000.png", "images/000011.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn shapes_counts_per_class() {
        let c = generate(&spec(CorpusKind::Shapes { classes: 4, size: 32 }, 1000)).unwrap();
        assert_eq!(c.items.len(), 1000);
        let mut counts = [0usize; 4];
        for item in &c.items {
            assert_eq!(item.image.as_ref().unwrap().shape(), &[3, 32, 32]);
            counts[item.label] += 1;
        }
        assert!(counts.iter().all(|&n| (200..=300).contains(&n)), "{counts:?}");
    }

    #[test]
    fn gaussian_means_within_three_standard_errors() {
        let c = generate(&spec(CorpusKind::two_gaussians(), 4000)).unwrap();
        let CorpusKind::Gaussians2d { means, covs } = CorpusKind::two_gaussians() else { unreachable!() };
        for k in 0..2 {
            let pts: Vec<[f64; 2]> = c.items.iter().filter(|i| i.label == k).map(|i| i.point.unwrap()).collect();
            let n = pts.len() as f64;
            for d in 0..2 {
                let m = pts.iter().map(|p| p[d]).sum::<f64>() / n;
                let se = covs[k][d][d].sqrt() / n.sqrt();
                assert!((m - means[k][d]).abs() < 3.0 * se, "component {k} dim {d}: {m}");
            }
        }
    }

    #[test]
    fn unknown_kind_and_bad_specs_are_contract_errors() {
        assert!(CorpusKind::named("clouds", 32).is_err());
        assert!(generate(&spec(CorpusKind::Shapes { classes: 9, size: 32 }, 1)).is_err());
        assert!(generate(&spec(
            CorpusKind::Glyphs {
                charset: "a".into(),
                size: 32
            },
            1
        ))
        .is_err());
    }

    #[test]
    fn glyphs_and_portraits_are_in_range() {
        for kind in [CorpusKind::named("glyphs", 32).unwrap(), CorpusKind::Portraits { size: 32 }] {
            for item in generate(&spec(kind, 20)).unwrap().items {
                let img = item.image.unwrap();
                assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                let spread = img.data().iter().cloned().fold(f64::MIN, f64::max)
                    - img.data().iter().cloned().fold(f64::MAX, f64::min);
                assert!(spread > 0.3);
            }
        }
    }
}
