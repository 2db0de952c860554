//! Binary PPM (P6) / PGM (P5) decoding and bilinear resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// 8-bit RGB pixel grid, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_netpbm(&bytes, path)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Decodes an in-memory P6 or P5 image; grayscale is expanded to three
/// identical channels. Only maxval 255 is accepted.
pub fn parse_netpbm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let fail = |reason: String| Error::ImageFormat {
        path: path.to_path_buf(),
        reason,
    };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(fail("expected P6 or P5 magic".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().filter(|&v| v > 0).ok_or_else(|| fail("bad width".into()))?;
    let height = h.number().filter(|&v| v > 0).ok_or_else(|| fail("bad height".into()))?;
    let maxval = h.number().ok_or_else(|| fail("bad maxval".into()))?;
    if maxval != 255 {
        return Err(fail(format!("maxval {maxval} unsupported, need 255")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("missing whitespace after header".into()));
    }
    let start = h.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| fail("dimensions overflow".into()))?;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(fail(format!(
            "truncated payload: {} bytes, expected {need}",
            payload.len()
        )));
    }
    let payload = &payload[..need];
    let data = if channels == 3 {
        payload.to_vec()
    } else {
        payload.iter().flat_map(|&g| [g, g, g]).collect()
    };
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Source coordinate bracket for output index `i` under half-pixel
/// center alignment.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize to `(height, width)`; returns `height * width * 3`
/// values on the original 0..=255 scale.
pub fn resize_bilinear(img: &RgbImage, size: (usize, usize)) -> Vec<f64> {
    let (oh, ow) = size;
    let cols: Vec<_> = (0..ow).map(|x| source_coord(x, img.width, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        let (y0, y1, fy) = source_coord(y, img.height, oh);
        for &(x0, x1, fx) in &cols {
            let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..3 {
                let lerp = |a: u8, b: u8, t: f64| a as f64 + (b as f64 - a as f64) * t;
                let top = lerp(p00[c], p01[c], fx);
                let bottom = lerp(p10[c], p11[c], fx);
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

/// Resizes to `size` and scales pixel values into `[0, 1]` by dividing
/// by 255. Returns a `(1, H, W, 3)` tensor.
pub fn preprocess(img: &RgbImage, size: (usize, usize)) -> Result<Tensor> {
    let shape = Shape4::new(1, size.0, size.1, 3)?;
    let values = resize_bilinear(img, size).into_iter().map(|v| v / 255.0).collect();
    Tensor::new(shape, values)
}
