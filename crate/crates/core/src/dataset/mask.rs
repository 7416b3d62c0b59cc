use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ColorType, GrayImage, ImageFormat};

use super::SizeCategory;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an 8-bit grayscale PNG holding only 0 and 255 into a
/// `(1,1,H,W)` tensor of 0/1.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Image(format!(
            "mask must be 8-bit grayscale, got {:?}",
            img.color()
        )));
    }
    let g = img.into_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for &v in g.as_raw() {
        data.push(match v {
            0 => 0.0,
            255 => 1.0,
            _ => return Err(Error::invalid("mask not binary")),
        });
    }
    Tensor::new([1, 1, h, w], data)
}

pub fn encode_mask_png(mask: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = mask.shape();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!("mask must be (1,1,H,W), got {:?}", mask.shape())));
    }
    check_binary(mask)?;
    let raw = mask.data().iter().map(|&v| if v == 0.0 { 0 } else { 255 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches extents");
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_png(&bytes)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_mask_png(mask)?)
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask not binary"));
    }
    Ok(())
}

/// Share of blurred (zero) pixels.
pub fn blur_area_fraction(mask: &Tensor) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    check_binary(mask)?;
    let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
    Ok(zeros as f64 / mask.len() as f64)
}

/// Small below 0.45, large above 0.55, medium on the closed interval between.
pub fn size_category(fraction: f64) -> SizeCategory {
    if fraction < 0.45 {
        SizeCategory::Small
    } else if fraction <= 0.55 {
        SizeCategory::Medium
    } else {
        SizeCategory::Large
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterRole {
    BlurSpecific,
    GeneralSr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(String),
}

/// Collection rules. Blur-specific data must exceed 512 pixels on its short
/// side and be under 80% blur; general data needs at least 5% blur.
pub fn filter_sample(mask: &Tensor, role: FilterRole) -> Result<FilterDecision> {
    let fraction = blur_area_fraction(mask)?;
    let [_, _, h, w] = mask.shape();
    Ok(match role {
        FilterRole::BlurSpecific if h.min(w) <= 512 => FilterDecision::Reject("size<=512".into()),
        FilterRole::BlurSpecific if fraction >= 0.80 => FilterDecision::Reject("blur>80%".into()),
        FilterRole::GeneralSr if fraction < 0.05 => FilterDecision::Reject("blur<5%".into()),
        _ => FilterDecision::Accept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with_zeros(h: usize, w: usize, zeros: usize) -> Tensor {
        Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| if y * w + x < zeros { 0.0 } else { 1.0 })
    }

    #[test]
    fn fractions() {
        assert_eq!(blur_area_fraction(&Tensor::zeros([1, 1, 4, 4])).unwrap(), 1.0);
        assert_eq!(blur_area_fraction(&Tensor::full([1, 1, 4, 4], 1.0)).unwrap(), 0.0);
        assert_eq!(blur_area_fraction(&mask_with_zeros(60, 100, 2700)).unwrap(), 0.45);
        assert!(blur_area_fraction(&Tensor::full([1, 1, 2, 2], 0.5)).is_err());
    }

    #[test]
    fn png_round_trip_and_validation() {
        let m = mask_with_zeros(9, 13, 50);
        let bytes = encode_mask_png(&m).unwrap();
        assert_eq!(decode_mask_png(&bytes).unwrap(), m);

        let gray = GrayImage::from_fn(3, 3, |x, _| image::Luma([if x == 1 { 128 } else { 255 }]));
        let mut buf = Vec::new();
        gray.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png).unwrap();
        assert!(matches!(decode_mask_png(&buf), Err(Error::InvalidArgument(_))));
        assert!(decode_mask_png(b"not a png").is_err());
    }

    #[test]
    fn filter_rules() {
        let ok = mask_with_zeros(600, 600, 180_000);
        assert_eq!(filter_sample(&ok, FilterRole::BlurSpecific).unwrap(), FilterDecision::Accept);
        let heavy = mask_with_zeros(600, 600, 306_000);
        assert_eq!(
            filter_sample(&heavy, FilterRole::BlurSpecific).unwrap(),
            FilterDecision::Reject("blur>80%".into())
        );
        let small = mask_with_zeros(512, 600, 10);
        assert_eq!(
            filter_sample(&small, FilterRole::BlurSpecific).unwrap(),
            FilterDecision::Reject("size<=512".into())
        );
        let light = mask_with_zeros(10, 10, 3);
        assert_eq!(
            filter_sample(&light, FilterRole::GeneralSr).unwrap(),
            FilterDecision::Reject("blur<5%".into())
        );
        let five = mask_with_zeros(10, 10, 5);
        assert_eq!(filter_sample(&five, FilterRole::GeneralSr).unwrap(), FilterDecision::Accept);
    }
}
