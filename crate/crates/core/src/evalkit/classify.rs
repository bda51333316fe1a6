//! Template-matching shape classifier used as the sampling-accuracy oracle
//! and by the alignment reward.

use super::corpus::shape_mask;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeGuess {
    /// `None` when no foreground separates from the background.
    pub label: Option<usize>,
    /// IoU of the foreground mask with each class template.
    pub ious: Vec<f64>,
}

fn otsu(values: &[f64], max: f64) -> f64 {
    const BINS: usize = 64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[((v / max) * (BINS - 1) as f64).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / (BINS - 1) as f64 * max
}

/// Foreground mask: pixels whose color distance from the median border
/// color exceeds an Otsu threshold. Returns `None` for flat images.
pub fn foreground_mask(img: &Tensor) -> Result<Option<Vec<bool>>> {
    let [3, h, w] = *img.shape() else {
        return dim_err("foreground_mask", format!("expected [3, H, W], got {:?}", img.shape()));
    };
    let d = img.data();
    let n = h * w;
    let mut bg = [0.0; 3];
    for (c, b) in bg.iter_mut().enumerate() {
        let mut border: Vec<f64> = (0..n)
            .filter(|i| i / w == 0 || i / w == h - 1 || i % w == 0 || i % w == w - 1)
            .map(|i| d[c * n + i])
            .collect();
        border.sort_by(f64::total_cmp);
        *b = border[border.len() / 2];
    }
    let dist: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|c| (d[c * n + i] - bg[c]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let max = dist.iter().cloned().fold(0.0, f64::max);
    if max < 0.2 {
        return Ok(None);
    }
    let thr = otsu(&dist, max);
    Ok(Some(dist.iter().map(|&v| v > thr).collect()))
}

/// Classifies a `[3, S, S]` image among the first `classes` shapes by IoU
/// with area- and centroid-matched templates.
pub fn classify_shape(img: &Tensor, classes: usize) -> Result<ShapeGuess> {
    let Some(mask) = foreground_mask(img)? else {
        return Ok(ShapeGuess {
            label: None,
            ious: vec![0.0; classes],
        });
    };
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let area = mask.iter().filter(|&&m| m).count() as f64;
    if area < 4.0 || h != w {
        return Ok(ShapeGuess {
            label: None,
            ious: vec![0.0; classes],
        });
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % w) as f64 + 0.5;
        sy += (i / w) as f64 + 0.5;
    }
    let (cx, cy) = (sx / area, sy / area);
    let r_ref = w as f64 * 0.3;
    let mut ious = Vec::with_capacity(classes);
    for label in 0..classes {
        let ref_area: f64 = shape_mask(label, w, w as f64 / 2.0, h as f64 / 2.0, r_ref).iter().sum();
        let r = r_ref * (area / ref_area).sqrt();
        let tmpl = shape_mask(label, w, cx, cy, r);
        let (mut inter, mut union) = (0.0f64, 0.0f64);
        for (&m, &t) in mask.iter().zip(&tmpl) {
            let t = t >= 0.5;
            if m && t {
                inter += 1.0;
            }
            if m || t {
                union += 1.0;
            }
        }
        ious.push(inter / union);
    }
    let label = (0..classes).max_by(|&a, &b| ious[a].total_cmp(&ious[b]));
    Ok(ShapeGuess { label, ious })
}

/// Softmax over template IoUs with temperature 1/20: a match probability per class.
pub fn shape_probabilities(img: &Tensor, classes: usize) -> Result<Vec<f64>> {
    let guess = classify_shape(img, classes)?;
    let m = guess.ious.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = guess.ious.iter().map(|v| ((v - m) * 20.0).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::corpus::{generate, CorpusKind, ToyCorpusSpec};

    #[test]
    fn oracle_classifies_generated_shapes() {
        for classes in [4, 6] {
            let c = generate(&ToyCorpusSpec {
                kind: CorpusKind::Shapes { classes, size: 32 },
                count: 300,
                seed: 5,
            })
            .unwrap();
            let correct = c
                .items
                .iter()
                .filter(|i| classify_shape(i.image.as_ref().unwrap(), classes).unwrap().label == Some(i.label))
                .count();
            assert!(correct >= 297, "{classes} classes: {correct}/300");
        }
    }

    #[test]
    fn flat_image_has_no_label() {
        let g = classify_shape(&Tensor::filled(&[3, 32, 32], 0.1), 4).unwrap();
        assert_eq!(g.label, None);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let c = generate(&ToyCorpusSpec {
            kind: CorpusKind::Shapes { classes: 4, size: 32 },
            count: 5,
            seed: 1,
        })
        .unwrap();
        for item in &c.items {
            let p = shape_probabilities(item.image.as_ref().unwrap(), 4).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p[item.label] > 0.5);
        }
    }
}
