//! Conversion between [−1, 1] image tensors and 8-bit files.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Maps a [−1, 1] value to the nearest 8-bit level.
pub fn to_u8(v: f64) -> u8 {
    (((v + 1.0) * 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

/// `[3, H, W]` tensor in [−1, 1] to an RGB buffer.
pub fn to_rgb8(img: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = *img.shape() else {
        return dim_err("to_rgb8", format!("expected [3, H, W], got {:?}", img.shape()));
    };
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = from_u8(p[c]);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches buffer")
}

pub fn png_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(img)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, png_bytes(img)?)?;
    Ok(())
}

/// Loads an 8-bit PNG or PPM as a `[3, H, W]` tensor in [−1, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(from_rgb8(&image::open(path)?.to_rgb8()))
}

/// Rounds every value to the nearest 8-bit level, as a save/load would.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| from_u8(to_u8(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| from_u8((i * 37 % 256) as u8)).collect();
        let img = Tensor::new(vec![3, 4, 5], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn rejects_non_rgb_shape() {
        assert!(to_rgb8(&Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
