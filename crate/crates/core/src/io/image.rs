// SPDX-License-Identifier: MIT OR Apache-2.0

//! 8-bit RGB images and the netpbm formats (binary PPM in, PPM/PGM out).

use std::path::Path;

use crate::{Error, Result};

/// Packed 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Decode(format!("image has zero dimension {width}×{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Decode(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Solid color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Loads a PPM, or a PNG when built with the `png` feature.
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"P6") {
            return decode_ppm(&bytes);
        }
        #[cfg(feature = "png")]
        if bytes.starts_with(b"\x89PNG") {
            return decode_png(&bytes);
        }
        Err(Error::Decode(format!(
            "{}: not a binary PPM{}",
            path.display(),
            if cfg!(feature = "png") { " or PNG" } else { "" }
        )))
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_ppm(self))?;
        Ok(())
    }
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_pgm(self))?;
        Ok(())
    }
}

/// Reads netpbm header tokens, skipping `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Decode("truncated netpbm header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Decode("non-ASCII netpbm header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| Error::Decode(format!("bad netpbm {what} `{t}`")))
    }

    /// Width, height, and offset of the raster.
    fn read(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
        let mut h = Header { bytes, pos: 0 };
        let m = h.token()?;
        if m != magic {
            return Err(Error::Decode(format!("expected {magic}, found `{m}`")));
        }
        let w = h.number("width")?;
        let ht = h.number("height")?;
        let maxval = h.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Decode(format!("only maxval 255 is supported, got {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        Ok((w, ht, h.pos + 1))
    }
}

fn raster(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Decode(format!("raster truncated: need {len} bytes")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, start) = Header::read(bytes, "P6")?;
    if w == 0 || h == 0 {
        return Err(Error::Decode(format!("image has zero dimension {w}×{h}")));
    }
    Image::new(w, h, raster(bytes, start, w * h * 3)?.to_vec())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, start) = Header::read(bytes, "P5")?;
    if w == 0 || h == 0 {
        return Err(Error::Decode(format!("image has zero dimension {w}×{h}")));
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data: raster(bytes, start, w * h)?.to_vec(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(w as usize, h as usize, img.into_raw())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = Image::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&img.data);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(decode_ppm(b"P6\n0 4\n255\n"), Err(Error::Decode(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\nabc"), Err(Error::Decode(_))));
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Decode(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n"), Err(Error::Decode(_))));
        assert!(Image::new(0, 3, vec![]).is_err());
    }
}
