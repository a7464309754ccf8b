// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::image::{GrayImage, Image};
use crate::tensor::{Tensor, TensorError};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatScale {
    #[default]
    Linear,
    /// `ln(1 + v − min)` before normalizing; keeps outliers from flattening
    /// everything else to black.
    Log,
}

/// Min-max normalizes a `[h × w]` grid to `0..=255`. A constant grid renders
/// as uniform 128.
pub fn render_heatmap(grid: &Tensor, scale: HeatScale) -> Result<GrayImage> {
    let (h, w) = grid.dims2("render_heatmap")?;
    grid.check_finite("render_heatmap")?;
    let lo = grid.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let t = |v: f32| match scale {
        HeatScale::Linear => v as f64,
        HeatScale::Log => (v as f64 - lo).ln_1p(),
    };
    let vals: Vec<f64> = grid.data().iter().map(|&v| t(v)).collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if max > min {
        vals.iter()
            .map(|v| (255.0 * (v - min) / (max - min)).round() as u8)
            .collect()
    } else {
        vec![128; h * w]
    };
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

/// Nearest-neighbor upscale.
pub fn upscale(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = y * img.height / height;
        for x in 0..width {
            data.push(img.get(x * img.width / width, sy));
        }
    }
    GrayImage {
        width,
        height,
        data,
    }
}

/// Black to red to yellow to white.
fn hot(v: u8) -> [u8; 3] {
    let v = v as u32 * 3;
    [v.min(255) as u8, v.saturating_sub(255).min(255) as u8, v.saturating_sub(510).min(255) as u8]
}

/// Blends a linear heatmap of `grid` over `img` with weight `alpha`.
pub fn overlay(img: &Image, grid: &Tensor, alpha: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::Dimension {
            op: "overlay",
            detail: format!("alpha {alpha} outside [0, 1]"),
        }
        .into());
    }
    let heat = upscale(&render_heatmap(grid, HeatScale::Linear)?, img.width, img.height);
    let mut out = img.clone();
    for (i, px) in out.data.chunks_mut(3).enumerate() {
        let c = hot(heat.data[i]);
        for (p, h) in px.iter_mut().zip(c) {
            *p = ((1.0 - alpha) * *p as f32 + alpha * h as f32).round() as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_one_hot() {
        let g = Tensor::full(&[3, 3], 2.5);
        assert!(render_heatmap(&g, HeatScale::Linear).unwrap().data.iter().all(|&v| v == 128));
        let mut g = Tensor::zeros(&[2, 2]);
        g.data_mut()[3] = 1.0;
        let img = render_heatmap(&g, HeatScale::Log).unwrap();
        assert_eq!(img.data, vec![0, 0, 0, 255]);
        let big = upscale(&img, 4, 4);
        assert_eq!(big.get(3, 3), 255);
        assert_eq!(big.get(2, 2), 255);
        assert_eq!(big.get(1, 2), 0);
    }

    #[test]
    fn rejects_non_finite() {
        let g = Tensor::new(vec![1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(render_heatmap(&g, HeatScale::Linear).unwrap_err().is_numeric_fault());
    }
}
