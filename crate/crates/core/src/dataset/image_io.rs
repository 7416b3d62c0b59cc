use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Any PNG to a `(1,3,H,W)` tensor in `[0,1]`.
pub fn decode_rgb_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

/// First batch item of a `(N,3,H,W)` tensor as 8-bit RGB PNG. Values are
/// clamped to `[0,1]` and rounded.
pub fn encode_rgb_png(t: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.shape();
    if n == 0 || c != 3 {
        return Err(Error::invalid(format!("cannot encode {:?} as RGB", t.shape())));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (t.at([0, ch, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb_png(&bytes)
}

pub fn save_rgb(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_rgb_png(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_round_trip() {
        let t = Tensor::from_fn([1, 3, 5, 7], |[_, c, y, x]| ((c * 35 + y * 7 + x) % 256) as f32 / 255.0);
        let back = decode_rgb_png(&encode_rgb_png(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
