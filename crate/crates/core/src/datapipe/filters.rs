//! The filter bank. Every filter except dedup is a pure function of the
//! record and its decoded image.

use std::collections::HashSet;

use image::imageops::{resize, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SampleRecord;
use crate::text::{token_count, words};

/// Outcome of one filter on one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: String,
    pub score: Option<f64>,
}

impl FilterDecision {
    pub fn keep(score: Option<f64>) -> Self {
        Self { keep: true, reason: String::new(), score }
    }

    pub fn drop(reason: impl Into<String>, score: Option<f64>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        Self { keep: false, reason, score }
    }
}

/// Scores an image, optionally against its caption.
pub trait Scorer: Send + Sync {
    fn score(&self, img: &RgbImage, caption: &str) -> f64;
}

impl<F: Fn(&RgbImage, &str) -> f64 + Send + Sync> Scorer for F {
    fn score(&self, img: &RgbImage, caption: &str) -> f64 {
        self(img, caption)
    }
}

/// Injected scorers; `Default` ships the deterministic toy heuristics.
pub struct Scorers {
    pub nsfw: Box<dyn Scorer>,
    pub clip: Box<dyn Scorer>,
    pub quality: Box<dyn Scorer>,
    pub aesthetic: Box<dyn Scorer>,
}

impl Default for Scorers {
    fn default() -> Self {
        Self {
            nsfw: Box::new(|img: &RgbImage, _: &str| skin_fraction(img)),
            clip: Box::new(|img: &RgbImage, cap: &str| color_agreement(img, cap)),
            quality: Box::new(|img: &RgbImage, _: &str| sharpness(img)),
            aesthetic: Box::new(|img: &RgbImage, _: &str| toy_aesthetic(img)),
        }
    }
}

pub fn luma(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let l = (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000;
        image::Luma([l as u8])
    })
}

/// Shannon entropy in bits of the 8-bit grayscale histogram.
pub fn gray_entropy(img: &RgbImage) -> f64 {
    let g = luma(img);
    let mut hist = [0usize; 256];
    for p in g.pixels() {
        hist[p[0] as usize] += 1;
    }
    let n = (g.width() * g.height()).max(1) as f64;
    hist.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.log2()
    }).sum()
}

/// 64-bit difference hash over a 9×8 grayscale thumbnail.
pub fn dhash(img: &RgbImage) -> u64 {
    let small = resize(&luma(img), 9, 8, FilterType::Triangle);
    let mut h = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            h = (h << 1) | (small.get_pixel(x, y)[0] < small.get_pixel(x + 1, y)[0]) as u64;
        }
    }
    h
}

/// Fraction of pixels in a common skin-tone box.
pub fn skin_fraction(img: &RgbImage) -> f64 {
    let n = (img.width() * img.height()).max(1) as f64;
    img.pixels()
        .filter(|p| {
            let (r, g, b) = (p[0] as i32, p[1] as i32, p[2] as i32);
            r > 95 && g > 40 && b > 20 && r > g && r > b && r - g.min(b) > 15 && (r - g).abs() > 15 && r < 250
        })
        .count() as f64
        / n
}

/// Named colors understood by the toy caption–image agreement score.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [230, 210, 40]),
    ("purple", [140, 50, 170]),
    ("orange", [240, 140, 30]),
    ("white", [240, 240, 240]),
    ("black", [20, 20, 20]),
];

fn nearest_palette(p: &image::Rgb<u8>) -> Option<usize> {
    let mut best = (f64::INFINITY, 0);
    for (i, (_, c)) in PALETTE.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (p[k] as f64 - c[k] as f64).powi(2)).sum::<f64>().sqrt();
        if d < best.0 {
            best = (d, i);
        }
    }
    (best.0 < 70.0).then_some(best.1)
}

/// Best presence over the palette colors the caption names: a color counts
/// as present at full strength once it covers 5% of the image. Captions
/// without color words score a neutral 0.5.
pub fn color_agreement(img: &RgbImage, caption: &str) -> f64 {
    let named: Vec<usize> = words(caption).iter().filter_map(|w| PALETTE.iter().position(|(n, _)| n == w)).collect();
    if named.is_empty() {
        return 0.5;
    }
    let mut counts = [0usize; PALETTE.len()];
    for p in img.pixels() {
        if let Some(i) = nearest_palette(p) {
            counts[i] += 1;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    named.iter().map(|&i| (counts[i] as f64 / n / 0.05).min(1.0)).fold(0.0, f64::max)
}

/// Mean absolute 4-neighbour Laplacian of luma, scaled so that fine
/// texture saturates at 1.
pub fn sharpness(img: &RgbImage) -> f64 {
    let g = luma(img);
    let (w, h) = (g.width(), g.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let px = |x: u32, y: u32| g.get_pixel(x, y)[0] as f64;
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            acc += (4.0 * px(x, y) - px(x - 1, y) - px(x + 1, y) - px(x, y - 1) - px(x, y + 1)).abs();
        }
    }
    (acc / ((w - 2) * (h - 2)) as f64 / 8.0).min(1.0)
}

/// Luma contrast and mean saturation, each weighted one half.
pub fn toy_aesthetic(img: &RgbImage) -> f64 {
    let g = luma(img);
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = g.pixels().map(|p| p[0] as f64).sum::<f64>() / n;
    let std = (g.pixels().map(|p| (p[0] as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sat = img.pixels().map(|p| (*p.0.iter().max().unwrap() - *p.0.iter().min().unwrap()) as f64 / 255.0).sum::<f64>() / n;
    0.5 * (std / 64.0).min(1.0) + 0.5 * sat
}

/// Ratio of horizontal gradient inside 8-pixel blocks to gradient across
/// block boundaries; block-coded artifacts push it toward 0.
pub fn compression_score(img: &RgbImage) -> f64 {
    let g = luma(img);
    let (mut inner, mut ni, mut edge, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..g.height() {
        for x in 0..g.width().saturating_sub(1) {
            let d = (g.get_pixel(x, y)[0] as f64 - g.get_pixel(x + 1, y)[0] as f64).abs();
            if x % 8 == 7 {
                edge += d;
                ne += 1;
            } else {
                inner += d;
                ni += 1;
            }
        }
    }
    if ne == 0 || ni == 0 {
        return 1.0;
    }
    let (inner, edge) = (inner / ni as f64, edge / ne as f64);
    if edge <= 1e-9 {
        return 1.0;
    }
    (inner / edge).min(1.0)
}

/// Stateful deduplication over a stream: exact SHA-256 of the file bytes
/// plus perceptual hashes of everything kept so far.
#[derive(Clone, Debug, Default)]
pub struct DedupState {
    bytes: HashSet<[u8; 32]>,
    hashes: Vec<u64>,
}

impl DedupState {
    pub fn check(&mut self, file_bytes: &[u8], img: &RgbImage, max_hamming: u32) -> FilterDecision {
        let digest: [u8; 32] = Sha256::digest(file_bytes).into();
        if self.bytes.contains(&digest) {
            return FilterDecision::drop("byte-identical duplicate", Some(0.0));
        }
        let h = dhash(img);
        if let Some(d) = self.hashes.iter().map(|o| (o ^ h).count_ones()).min() {
            if d <= max_hamming {
                return FilterDecision::drop(format!("near duplicate (hamming {d})"), Some(d as f64));
            }
        }
        self.bytes.insert(digest);
        self.hashes.push(h);
        FilterDecision::keep(None)
    }
}

/// Threshold filters. `Distribution` reruns its members and drops on the
/// first failure.
#[derive(Clone, Debug, PartialEq)]
pub enum Filter {
    BrokenFiles,
    Resolution { min_side: u32 },
    HighResolution { min_side: u32 },
    Dedup { max_hamming: u32 },
    Nsfw { max_score: f64 },
    Rotation,
    Entropy { lo: f64, hi: f64 },
    ClipSim { min_sim: f64 },
    TokenLength { min: usize, max: usize },
    ImageQuality { min: f64 },
    Aesthetic { min: f64 },
    CompressionQuality { min: f64 },
    Distribution(Vec<Filter>),
}

impl Filter {
    pub fn name(&self) -> &'static str {
        match self {
            Self::BrokenFiles => "broken_files",
            Self::Resolution { .. } => "resolution",
            Self::HighResolution { .. } => "high_resolution",
            Self::Dedup { .. } => "dedup",
            Self::Nsfw { .. } => "nsfw",
            Self::Rotation => "rotation",
            Self::Entropy { .. } => "entropy",
            Self::ClipSim { .. } => "clip_sim",
            Self::TokenLength { .. } => "token_length",
            Self::ImageQuality { .. } => "image_quality",
            Self::Aesthetic { .. } => "aesthetic",
            Self::CompressionQuality { .. } => "compression_quality",
            Self::Distribution(_) => "distribution",
        }
    }

    /// Applies the filter. `img` is `None` when the file failed to decode;
    /// every filter then drops the record as broken.
    pub fn apply(&self, rec: &SampleRecord, file: Option<&[u8]>, img: Option<&RgbImage>, scorers: &Scorers, dedup: &mut DedupState) -> FilterDecision {
        if let Self::TokenLength { min, max } = *self {
            return token_length(&rec.caption, min, max);
        }
        if let Self::Rotation = self {
            return rotation(rec);
        }
        let (Some(img), Some(file)) = (img, file) else {
            return FilterDecision::drop("unreadable image", None);
        };
        match self {
            Self::BrokenFiles => FilterDecision::keep(None),
            Self::Resolution { min_side } | Self::HighResolution { min_side } => resolution(img.width(), img.height(), *min_side),
            Self::Dedup { max_hamming } => dedup.check(file, img, *max_hamming),
            Self::Nsfw { max_score } => max_threshold("nsfw score", scorers.nsfw.score(img, &rec.caption), *max_score),
            Self::Entropy { lo, hi } => entropy(img, *lo, *hi),
            Self::ClipSim { min_sim } => min_threshold("caption similarity", scorers.clip.score(img, &rec.caption), *min_sim),
            Self::ImageQuality { min } => min_threshold("image quality", scorers.quality.score(img, &rec.caption), *min),
            Self::Aesthetic { min } => min_threshold("aesthetic score", scorers.aesthetic.score(img, &rec.caption), *min),
            Self::CompressionQuality { min } => min_threshold("compression quality", compression_score(img), *min),
            Self::Distribution(inner) => {
                for f in inner {
                    let d = f.apply(rec, Some(file), Some(img), scorers, dedup);
                    if !d.keep {
                        return FilterDecision::drop(format!("{}: {}", f.name(), d.reason), d.score);
                    }
                }
                FilterDecision::keep(None)
            }
            Self::TokenLength { .. } | Self::Rotation => unreachable!("handled above"),
        }
    }
}

fn min_threshold(what: &str, s: f64, min: f64) -> FilterDecision {
    if s < min {
        FilterDecision::drop(format!("{what} {s:.4} below {min}"), Some(s))
    } else {
        FilterDecision::keep(Some(s))
    }
}

fn max_threshold(what: &str, s: f64, max: f64) -> FilterDecision {
    if s > max {
        FilterDecision::drop(format!("{what} {s:.4} above {max}"), Some(s))
    } else {
        FilterDecision::keep(Some(s))
    }
}

pub fn resolution(w: u32, h: u32, min_side: u32) -> FilterDecision {
    let side = w.min(h);
    if side < min_side {
        FilterDecision::drop(format!("{w}x{h} shorter than {min_side}"), Some(side as f64))
    } else {
        FilterDecision::keep(Some(side as f64))
    }
}

pub fn entropy(img: &RgbImage, lo: f64, hi: f64) -> FilterDecision {
    let e = gray_entropy(img);
    if e < lo {
        FilterDecision::drop(format!("abnormally low information content ({e:.3} bits)"), Some(e))
    } else if e > hi {
        FilterDecision::drop(format!("abnormally high information content ({e:.3} bits)"), Some(e))
    } else {
        FilterDecision::keep(Some(e))
    }
}

pub fn token_length(caption: &str, min: usize, max: usize) -> FilterDecision {
    let n = token_count(caption);
    if n < min || n > max {
        FilterDecision::drop(format!("{n} tokens outside [{min}, {max}]"), Some(n as f64))
    } else {
        FilterDecision::keep(Some(n as f64))
    }
}

/// EXIF-style orientation in `metadata["orientation"]`: absent passes,
/// 1 through 8 can be normalized, anything else is discarded.
pub fn rotation(rec: &SampleRecord) -> FilterDecision {
    match rec.metadata.get("orientation") {
        None => FilterDecision::keep(None),
        Some(v) => match v.parse::<u8>() {
            Ok(o @ 1..=8) => FilterDecision::keep(Some(o as f64)),
            _ => FilterDecision::drop(format!("invalid orientation `{v}`"), None),
        },
    }
}
