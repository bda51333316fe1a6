//! The bundled 200-record curation corpus, materialized from a seed.
//!
//! Every record carries at most one injected defect, so the expected drop
//! counts follow from the construction.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::blur;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, CaptionType, SampleRecord, PALETTE};
use crate::error::Result;
use crate::flowmatch::Task;

/// Seed of the bundled corpus.
pub const TOY_PIPELINE_SEED: u64 = 20_251;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    Clean,
    CorruptBytes,
    MissingFile,
    LowResolution,
    ByteDuplicate,
    NearDuplicate,
    Nsfw,
    BadOrientation,
    LowEntropy,
    HighEntropy,
    CaptionMismatch,
    ShortCaption,
    LongCaption,
    Blurry,
    Dull,
    Blocky,
    HighResolution,
}

const WEB_DEFECTS: [(Defect, usize); 15] = [
    (Defect::CorruptBytes, 4),
    (Defect::MissingFile, 2),
    (Defect::LowResolution, 8),
    (Defect::ByteDuplicate, 4),
    (Defect::NearDuplicate, 3),
    (Defect::Nsfw, 5),
    (Defect::BadOrientation, 4),
    (Defect::LowEntropy, 3),
    (Defect::HighEntropy, 3),
    (Defect::CaptionMismatch, 6),
    (Defect::ShortCaption, 3),
    (Defect::LongCaption, 2),
    (Defect::Blurry, 5),
    (Defect::Dull, 5),
    (Defect::Blocky, 5),
];
const WEB: usize = 150;
const EDIT: usize = 30;
const SYNTHETIC: usize = 20;
const HIGH_RES: usize = 3;
const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
/// Palette indices usable as backgrounds without tripping the skin-tone score.
const BACKGROUNDS: [usize; 5] = [1, 2, 4, 6, 7];

pub struct ToyPipelineCorpus {
    pub records: Vec<SampleRecord>,
    /// Injected defect per record, aligned with `records`.
    pub defects: Vec<Defect>,
}

struct Scene {
    w: u32,
    h: u32,
    bg: usize,
    fg: usize,
    shape: usize,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> Self {
        let bg = *BACKGROUNDS.choose(rng).expect("non-empty");
        let fg = loop {
            let c = rng.gen_range(0..PALETTE.len());
            if c != bg && !(bg == 6 && c == 3) {
                break c;
            }
        };
        Self { w: rng.gen_range(lo..=hi), h: rng.gen_range(lo..=hi), bg, fg, shape: rng.gen_range(0..SHAPES.len()) }
    }

    fn caption(&self, extra: &str) -> String {
        format!("a {} {} on a {} background{extra}", PALETTE[self.fg].0, SHAPES[self.shape], PALETTE[self.bg].0)
    }

    fn inside(&self, x: u32, y: u32, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            _ => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        }
    }

    /// Washed background, the shape, and per-pixel gray noise.
    fn render(&self, rng: &mut ChaCha8Rng, noise: i32) -> RgbImage {
        let (w, h) = (self.w, self.h);
        let r = w.min(h) as f64 * rng.gen_range(0.2..0.3);
        let cx = rng.gen_range(r..w as f64 - r);
        let cy = rng.gen_range(r..h as f64 - r);
        let field = wash(rng, w.max(h) as f64, 16.0);
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (base, g) = if self.inside(x, y, cx, cy, r) { (PALETTE[self.fg].1, 0.0) } else { (PALETTE[self.bg].1, field(x, y)) };
                let n = if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 };
                img.put_pixel(x, y, Rgb(base.map(|c| (c as f64 + g + n as f64).round().clamp(0.0, 255.0) as u8)));
            }
        }
        img
    }
}

/// Random low-frequency field of amplitude about `amp`; gives each image a
/// distinct perceptual hash.
fn wash(rng: &mut ChaCha8Rng, side: f64, amp: f64) -> impl Fn(u32, u32) -> f64 {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|k| {
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let lambda = side * rng.gen_range(0.25..0.7);
            let a = amp / (1.0 + k as f64 * 0.5);
            (th.cos() / lambda, th.sin() / lambda, rng.gen_range(0.0..std::f64::consts::TAU), a)
        })
        .collect();
    move |x, y| waves.iter().map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (x as f64 * fx + y as f64 * fy) + ph).sin()).sum()
}

fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

fn skin_image(rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (rng.gen_range(256..=320), rng.gen_range(256..=320));
    let field = wash(rng, w as f64, 10.0);
    RgbImage::from_fn(w, h, |x, y| {
        let n = rng.gen_range(-6..=6) + field(x, y).round() as i32;
        Rgb([(224 + n) as u8, (172 + n) as u8, (140 + n) as u8])
    })
}

fn low_entropy_image(rng: &mut ChaCha8Rng, k: usize) -> RgbImage {
    let (w, h) = (rng.gen_range(256..=320), rng.gen_range(256..=320));
    let c = PALETTE[BACKGROUNDS[k % BACKGROUNDS.len()]].1;
    if k == 0 {
        return RgbImage::from_pixel(w, h, Rgb(c));
    }
    // A single bar, in a different ninth of the width for each image.
    let x0 = w * (2 + 3 * k as u32) / 9;
    RgbImage::from_fn(w, h, |x, _| if x >= x0 && x < x0 + w / 12 { Rgb([255, 255, 255]) } else { Rgb(c) })
}

/// Sawtooth ramp plus wide noise, wrapped: near-uniform gray levels with
/// coarse structure.
fn noise_image(rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (rng.gen_range(256..=320), rng.gen_range(256..=320));
    let (a, b, ph) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0..256));
    RgbImage::from_fn(w, h, |x, y| {
        let v = ((a * x as f64 + b * y as f64) as i32 + ph + rng.gen_range(-40..=40)).rem_euclid(256) as u8;
        Rgb([v, v, v])
    })
}

fn dull_image(rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (rng.gen_range(256..=320), rng.gen_range(256..=320));
    let (cx, cy, r) = (w as f64 / 2.0, h as f64 / 2.0, w.min(h) as f64 * 0.25);
    let field = wash(rng, w as f64, 5.0);
    RgbImage::from_fn(w, h, |x, y| {
        let inside = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
        let v = if inside { 140 } else { 128 } + rng.gen_range(-4..=4) + field(x, y).round() as i32;
        Rgb([v as u8; 3])
    })
}

fn mosaic_image(rng: &mut ChaCha8Rng) -> (RgbImage, [usize; 2]) {
    let (w, h) = (rng.gen_range(32..=40) * 8, rng.gen_range(32..=40) * 8);
    let colors = [0usize, 1, 2, 4, 6, 7];
    let (bw, bh) = ((w / 8) as usize, (h / 8) as usize);
    let blocks: Vec<[u8; 3]> = (0..bw * bh)
        .map(|_| {
            let c = PALETTE[*colors.choose(rng).expect("non-empty")].1;
            let j = rng.gen_range(-20..=20);
            c.map(|v| (v as i32 + j).clamp(0, 255) as u8)
        })
        .collect();
    let img = RgbImage::from_fn(w, h, |x, y| {
        let b = blocks[(y / 8) as usize * bw + (x / 8) as usize];
        let n = rng.gen_range(-3..=3);
        Rgb(b.map(|v| (v as i32 + n).clamp(0, 255) as u8))
    });
    (img, [0, 2])
}

/// Large image whose fine texture repeats along each row, so it stays
/// small on disk.
fn high_res_image(rng: &mut ChaCha8Rng, side: u32) -> (RgbImage, Scene) {
    let scene = Scene { w: side, h: side, bg: BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())], fg: 0, shape: 1 };
    let tile: Vec<i32> = (0..16).map(|_| rng.gen_range(-8..=8)).collect();
    let field = wash(rng, side as f64, 16.0);
    let img = RgbImage::from_fn(side, side, |x, y| {
        let inside = (x as f64 - side as f64 / 2.0).abs() < side as f64 * 0.2 && (y as f64 - side as f64 / 2.0).abs() < side as f64 * 0.2;
        let base = if inside { PALETTE[scene.fg].1 } else { PALETTE[scene.bg].1 };
        let t = tile[(x % 16) as usize] + if y % 2 == 0 { 0 } else { -tile[(x % 16) as usize] / 2 } + if inside { 0 } else { field(x, y).round() as i32 };
        Rgb(base.map(|c| (c as i32 + t).clamp(0, 255) as u8))
    });
    (img, scene)
}

fn caption_type(rng: &mut ChaCha8Rng) -> CaptionType {
    [CaptionType::General, CaptionType::Text, CaptionType::Knowledge, CaptionType::Structured][rng.gen_range(0..4)]
}

fn caption_extra(ty: CaptionType, rng: &mut ChaCha8Rng) -> String {
    match ty {
        CaptionType::General => String::new(),
        CaptionType::Text => format!(" with the word \"{}\" printed below", ["SALE", "OPEN", "HELLO", "EXIT"][rng.gen_range(0..4)]),
        CaptionType::Knowledge => " drawn as a textbook geometry figure".to_string(),
        CaptionType::Structured => " laid out as a single-panel diagram".to_string(),
    }
}

/// Writes the corpus images under `dir/images` and the manifest at
/// `dir/manifest.jsonl`.
pub fn write_toy_corpus(dir: &Path, seed: u64) -> Result<ToyPipelineCorpus> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut web: Vec<Defect> = WEB_DEFECTS.iter().flat_map(|&(d, n)| std::iter::repeat(d).take(n)).collect();
    web.resize(WEB, Defect::Clean);
    web.shuffle(&mut rng);
    // Duplicates need an earlier clean original.
    for i in 0..web.len() {
        if matches!(web[i], Defect::ByteDuplicate | Defect::NearDuplicate) && !web[..i].contains(&Defect::Clean) {
            let j = (i + 1..web.len()).find(|&j| web[j] == Defect::Clean).expect("clean records exist");
            web.swap(i, j);
        }
    }
    let mut edit = vec![Defect::Clean; EDIT];
    edit[3] = Defect::CorruptBytes;
    edit[11] = Defect::LowResolution;
    edit[19] = Defect::Blurry;
    let mut synth = vec![Defect::Clean; SYNTHETIC];
    for d in synth.iter_mut().take(HIGH_RES) {
        *d = Defect::HighResolution;
    }
    synth.shuffle(&mut rng);

    let mut slots: Vec<u8> = [vec![0u8; WEB], vec![1; EDIT], vec![2; SYNTHETIC]].concat();
    slots.shuffle(&mut rng);
    let (mut wi, mut ei, mut si) = (0, 0, 0);
    let mut clean_files: Vec<(String, Vec<u8>, RgbImage, String)> = Vec::new();
    let mut records = Vec::with_capacity(slots.len());
    let mut defects = Vec::with_capacity(slots.len());
    for (n, slot) in slots.into_iter().enumerate() {
        let (defect, source, task) = match slot {
            0 => {
                wi += 1;
                (web[wi - 1], "web", Task::T2i)
            }
            1 => {
                ei += 1;
                (edit[ei - 1], "edit", Task::Ti2i)
            }
            _ => {
                si += 1;
                (synth[si - 1], "synthetic", Task::T2i)
            }
        };
        let id = format!("rec-{n:03}");
        let file = format!("images/{id}.png");
        let ty = caption_type(&mut rng);
        let extra = caption_extra(ty, &mut rng);
        let mut metadata = BTreeMap::new();
        let (bytes, img, caption): (Option<Vec<u8>>, Option<RgbImage>, String) = match defect {
            Defect::Clean | Defect::LowResolution | Defect::CaptionMismatch | Defect::ShortCaption | Defect::LongCaption | Defect::Blurry | Defect::BadOrientation => {
                let (lo, hi) = if defect == Defect::LowResolution { (160, 250) } else { (256, 320) };
                let mut scene = Scene::random(&mut rng, lo, hi);
                if defect == Defect::LowResolution {
                    scene.w = scene.w.max(300);
                }
                let mut img = scene.render(&mut rng, 6);
                if defect == Defect::Blurry {
                    img = blur(&img, 3.0);
                }
                let caption = match defect {
                    Defect::CaptionMismatch => {
                        let absent: Vec<&str> = (0..PALETTE.len()).filter(|&c| c != scene.bg && c != scene.fg).map(|c| PALETTE[c].0).collect();
                        format!("a {} {} on a {} background", absent[0], SHAPES[(scene.shape + 1) % 3], absent[1])
                    }
                    Defect::ShortCaption => format!("{} {}", PALETTE[scene.fg].0, SHAPES[scene.shape]),
                    Defect::LongCaption => {
                        let mut s = scene.caption(&extra);
                        while crate::text::token_count(&s) <= 1100 {
                            s.push_str(" and another detail");
                        }
                        s
                    }
                    _ if task == Task::Ti2i => {
                        format!("turn the {} {} into a {} one and keep the {} background", PALETTE[scene.fg].0, SHAPES[scene.shape], PALETTE[(scene.fg + 3) % PALETTE.len()].0, PALETTE[scene.bg].0)
                    }
                    _ => scene.caption(&extra),
                };
                if defect == Defect::BadOrientation {
                    metadata.insert("orientation".into(), ["9", "0", "sideways", "12"][rng.gen_range(0..4)].into());
                } else if rng.gen_bool(0.2) {
                    metadata.insert("orientation".into(), ["1", "3", "6", "8"][rng.gen_range(0..4)].into());
                }
                let b = png(&img);
                if defect == Defect::Clean && source == "web" {
                    clean_files.push((id.clone(), b.clone(), img.clone(), caption.clone()));
                }
                (Some(b), Some(img), caption)
            }
            Defect::CorruptBytes => {
                let junk: Vec<u8> = (0..512).map(|_| rng.gen()).collect();
                (Some(junk), None, "a red circle on a white background".into())
            }
            Defect::MissingFile => (None, None, "a blue square on a black background".into()),
            Defect::ByteDuplicate | Defect::NearDuplicate => {
                let (_, b, img, cap) = clean_files.choose(&mut rng).expect("earlier clean record").clone();
                if defect == Defect::ByteDuplicate {
                    (Some(b), Some(img), cap)
                } else {
                    let mut img = img;
                    for _ in 0..20 {
                        let (x, y) = (rng.gen_range(0..img.width()), rng.gen_range(0..img.height()));
                        img.get_pixel_mut(x, y).0[0] ^= 0x10;
                    }
                    (Some(png(&img)), Some(img), cap)
                }
            }
            Defect::Nsfw => (None, Some(skin_image(&mut rng)), "a person standing on a sunny beach".into()),
            Defect::LowEntropy => {
                let k = defects.iter().filter(|&&d| d == Defect::LowEntropy).count();
                (None, Some(low_entropy_image(&mut rng, k)), "a plain white black green banner".into())
            }
            Defect::HighEntropy => (None, Some(noise_image(&mut rng)), "a white and black static pattern".into()),
            Defect::Dull => (None, Some(dull_image(&mut rng)), "a gray circle on a gray background".into()),
            Defect::Blocky => {
                let (img, named) = mosaic_image(&mut rng);
                (None, Some(img), format!("a mosaic of {} and {} tiles", PALETTE[named[0]].0, PALETTE[named[1]].0))
            }
            Defect::HighResolution => {
                let (img, scene) = high_res_image(&mut rng, 2048);
                let c = scene.caption("");
                (None, Some(img), c)
            }
        };
        let bytes = match (&bytes, &img) {
            (Some(b), _) => Some(b.clone()),
            (None, Some(i)) => Some(png(i)),
            (None, None) => None,
        };
        if let Some(b) = &bytes {
            std::fs::write(dir.join(&file), b)?;
        }
        let (width, height) = img.as_ref().map(|i| (i.width(), i.height())).unwrap_or((0, 0));
        records.push(SampleRecord {
            id,
            image: file,
            width,
            height,
            caption,
            caption_type: ty,
            task,
            source: source.to_string(),
            metadata,
            audit: Vec::new(),
        });
        defects.push(defect);
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(ToyPipelineCorpus { records, defects })
}
