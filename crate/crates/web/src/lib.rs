//! Browser bindings for three small operations: noising and scoring a toy
//! shape, degrading a fine prompt into a triplet, and routing a failure case.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use qi2::datapipe::{route_failure, FailureEvidence, RouterThresholds};
use qi2::evalkit::{self, classify_shape, render_shape_sample, SHAPE_NAMES};
use qi2::tensor::Tensor;

/// Side of the demo images.
pub const SIZE: usize = 32;
const CLASSES: usize = 4;

/// A clean toy shape and a copy with Gaussian pixel noise, both in `[-1, 1]`.
pub fn noisy_pair(label: usize, seed: u32, sigma: f64) -> qi2::Result<(Tensor, Tensor)> {
    if label >= CLASSES {
        return Err(qi2::Error::Config(format!("label must be below {CLASSES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let clean = render_shape_sample(label, SIZE, &mut rng);
    let noise = Tensor::randn(clean.shape(), sigma.max(0.0), &mut rng);
    let noisy = clean.zip(&noise, |c, n| (c + n).clamp(-1.0, 1.0))?;
    Ok((evalkit::quantize(&clean), evalkit::quantize(&noisy)))
}

/// PSNR, SSIM and the oracle classifier's guess for the noisy copy.
pub fn shape_report(label: usize, seed: u32, sigma: f64) -> qi2::Result<String> {
    let (clean, noisy) = noisy_pair(label, seed, sigma)?;
    let psnr = evalkit::psnr(&clean, &noisy, 2.0)?;
    let ssim = evalkit::ssim_signed(&clean, &noisy, 8)?;
    let guess = classify_shape(&noisy, CLASSES)?.label.map(|l| SHAPE_NAMES[l]);
    Ok(serde_json::json!({
        "shape": SHAPE_NAMES[label],
        "psnr_db": if psnr.is_finite() { Some(psnr) } else { None },
        "ssim": ssim,
        "classified_as": guess,
    })
    .to_string())
}

fn rgba(img: &Tensor) -> Vec<u8> {
    let hw = SIZE * SIZE;
    let d = img.data();
    (0..hw).flat_map(|p| [evalkit::to_u8(d[p]), evalkit::to_u8(d[hw + p]), evalkit::to_u8(d[2 * hw + p]), 255]).collect()
}

fn js_err(e: qi2::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes (`SIZE × SIZE`) of the noisy shape.
#[wasm_bindgen]
pub fn noisy_shape_rgba(label: u32, seed: u32, sigma: f64) -> Result<Vec<u8>, JsError> {
    noisy_pair(label as usize, seed, sigma).map(|(_, n)| rgba(&n)).map_err(js_err)
}

/// JSON `{shape, psnr_db, ssim, classified_as}` for the noisy shape.
#[wasm_bindgen]
pub fn noisy_shape_report(label: u32, seed: u32, sigma: f64) -> Result<String, JsError> {
    shape_report(label as usize, seed, sigma).map_err(js_err)
}

/// The triplet built from `p_fine`, as JSON.
#[wasm_bindgen]
pub fn degrade_prompt(p_fine: &str, seed: u32) -> Result<String, JsError> {
    let t = qi2::promptforge::build_triplet(p_fine, seed as u64).map_err(js_err)?;
    serde_json::to_string(&t).map_err(|e| JsError::new(&e.to_string()))
}

/// Track name (`rl`, `pretrain` or `prompt_engineering`) for one failure.
#[wasm_bindgen]
pub fn route(reward_score: f64, nn_density: f64, pe_gain: f64) -> Result<String, JsError> {
    let ev = FailureEvidence {
        prompt: String::new(),
        output: String::new(),
        reward_score: Some(reward_score),
        nn_density: Some(nn_density),
        pe_gain: Some(pe_gain),
    };
    let case = route_failure(&ev, &RouterThresholds::default()).map_err(js_err)?;
    serde_json::to_value(case.track).map(|v| v.as_str().unwrap_or_default().to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_lossless_and_classified() {
        let r: serde_json::Value = serde_json::from_str(&shape_report(2, 5, 0.0).unwrap()).unwrap();
        assert!(r["psnr_db"].is_null());
        assert_eq!(r["ssim"], 1.0);
        assert_eq!(r["classified_as"], "triangle");
    }

    #[test]
    fn more_noise_lowers_psnr() {
        let p = |s| {
            let (c, n) = noisy_pair(0, 9, s).unwrap();
            evalkit::psnr(&c, &n, 2.0).unwrap()
        };
        assert!(p(0.05) > p(0.3));
        assert_eq!(rgba(&noisy_pair(1, 1, 0.1).unwrap().1).len(), SIZE * SIZE * 4);
    }

    #[test]
    fn rejects_unknown_label() {
        assert!(noisy_pair(CLASSES, 0, 0.1).is_err());
    }

    #[test]
    fn triplet_and_route() {
        let t: qi2::promptforge::Triplet = serde_json::from_str(&degrade_prompt("a red fox in the snow, soft morning light, watercolor style", 3).unwrap()).unwrap();
        qi2::promptforge::verify_triplet(&t).unwrap();
        assert_eq!(route(0.2, 0.01, 0.0).unwrap(), "pretrain");
        assert_eq!(route(0.2, 0.3, 0.5).unwrap(), "prompt_engineering");
    }
}
