use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB; `+∞` for identical inputs.
///
/// `peak` is the value range: 255 for 8-bit data, 2 for images in [−1, 1].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err("psnr", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over non-overlapping `window`×`window` tiles of each channel.
///
/// Inputs are [H, W] or [C, H, W]; constants are `c1 = (0.01·peak)²`,
/// `c2 = (0.03·peak)²`, statistics use population variance.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err("ssim", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return dim_err("ssim", format!("expected [H, W] or [C, H, W], got {s:?}")),
    };
    if window == 0 || h < window || w < window {
        return contract_err("ssim", format!("image {h}x{w} smaller than window {window}"));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for ty in 0..h / window {
            for tx in 0..w / window {
                let idx = |y: usize, x: usize| (ch * h + ty * window + y) * w + tx * window + x;
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in 0..window {
                    for x in 0..window {
                        sa += ad[idx(y, x)];
                        sb += bd[idx(y, x)];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..window {
                    for x in 0..window {
                        let (da, db) = (ad[idx(y, x)] - ma, bd[idx(y, x)] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM of images in `[−1, 1]`, evaluated on `[0, 1]`: the luminance term
/// is not shift invariant, so the signed range would distort it.
pub fn ssim_signed(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    let unit = |t: &Tensor| t.map(|v| (v + 1.0) / 2.0);
    ssim(&unit(a), &unit(b), window, 1.0)
}

/// W1 distance between two 1D empirical distributions (any sizes).
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> f64 {
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    if n == m {
        return xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    }
    // Integrate |F⁻¹(u) − G⁻¹(u)| over the merged quantile breakpoints.
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_x = (i + 1) as f64 / n as f64;
        let next_y = (j + 1) as f64 / m as f64;
        let next = next_x.min(next_y);
        total += (next - u) * (xs[i] - ys[j]).abs();
        u = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    total
}

/// Mean over `projections` random unit directions of the 1D W1 distance
/// between projected samples. Rows of `x` and `y` are samples.
pub fn sliced_wasserstein(x: &[Vec<f64>], y: &[Vec<f64>], projections: usize, seed: u64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return contract_err("sliced_wasserstein", "empty sample set");
    }
    if projections < 64 {
        return contract_err("sliced_wasserstein", format!("need at least 64 projections, got {projections}"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().chain(y).any(|r| r.len() != d) {
        return dim_err("sliced_wasserstein", "samples must share one positive dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |s: &[Vec<f64>]| -> Vec<f64> {
            s.iter().map(|r| r.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect()
        };
        total += wasserstein_1d(&proj(x), &proj(y));
    }
    Ok(total / projections as f64)
}
