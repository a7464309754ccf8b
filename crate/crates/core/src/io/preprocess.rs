// SPDX-License-Identifier: MIT OR Apache-2.0

use super::image::Image;
use crate::tensor::Tensor;
use crate::vit::ModelConfig;
use crate::{Error, Result};

/// Bilinear resize with half-pixel centers, edge-clamped.
///
/// Returns interleaved RGB in `0.0..=255.0`, not rounded, so a resize to the
/// same size is exact.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Vec<f32>> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Decode(format!("resize target {out_w}×{out_h}")));
    }
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_w, img.width);
    let ys = taps(out_h, img.height);
    let at = |x: usize, y: usize, c: usize| img.data[(y * img.width + x) * 3 + c] as f64;
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
                let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(out)
}

/// Shorter-side resize to `config.image_size`, center crop, then
/// `(x / 255 − mean) / std` per channel. Returns `[3 × S × S]`.
pub fn preprocess(img: &Image, config: &ModelConfig) -> Result<Tensor> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Decode("zero-dimension image".into()));
    }
    let s = config.image_size;
    let (w, h) = if img.width <= img.height {
        (s, ((img.height * s) as f64 / img.width as f64).round().max(s as f64) as usize)
    } else {
        (((img.width * s) as f64 / img.height as f64).round().max(s as f64) as usize, s)
    };
    let resized = resize_bilinear(img, w, h)?;
    let (ox, oy) = ((w - s) / 2, (h - s) / 2);
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let src = ((y + oy) * w + x + ox) * 3;
            for c in 0..3 {
                data[c * s * s + y * s + x] = (resized[src + c] / 255.0 - config.preprocess_mean[c])
                    / config.preprocess_std[c];
            }
        }
    }
    Ok(Tensor::new(vec![3, s, s], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_constant() {
        let img = Image::new(3, 2, (0..18).map(|i| (i * 13) as u8).collect()).unwrap();
        let same = resize_bilinear(&img, 3, 2).unwrap();
        assert!(same.iter().zip(&img.data).all(|(a, &b)| *a == b as f32));

        let flat = Image::filled(8, 8, [10, 20, 30]).unwrap();
        let half = resize_bilinear(&flat, 4, 4).unwrap();
        assert!(half.chunks(3).all(|p| p == [10.0, 20.0, 30.0]));
    }

    #[test]
    fn two_by_two_block_means() {
        let mut img = Image::filled(4, 4, [0, 0, 0]).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let v = (y * 4 + x) as u8 * 10;
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let out = resize_bilinear(&img, 2, 2).unwrap();
        // Half-pixel centers land between source pixels 2j and 2j+1.
        let block = |bx: usize, by: usize| {
            let mut s = 0f32;
            for y in 2 * by..2 * by + 2 {
                for x in 2 * bx..2 * bx + 2 {
                    s += img.pixel(x, y)[0] as f32;
                }
            }
            s / 4.0
        };
        for by in 0..2 {
            for bx in 0..2 {
                assert_eq!(out[(by * 2 + bx) * 3], block(bx, by));
            }
        }
    }
}
