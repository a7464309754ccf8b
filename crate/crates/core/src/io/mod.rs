// SPDX-License-Identifier: MIT OR Apache-2.0

//! Images in and out, preprocessing, heatmaps and JSON reports.

pub mod heatmap;
pub mod image;
pub mod preprocess;
pub mod report;

pub use heatmap::{overlay, render_heatmap, upscale, HeatScale};
pub use image::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, GrayImage, Image};
pub use preprocess::{preprocess, resize_bilinear};
pub use report::{read_json, write_json, Report, RunManifest};
