//! Mutations applied to one manifest sample: replacing its mask, relabelling
//! it, or re-running the automatic blur-map estimate. Each writes files
//! atomically and bumps the sample's revision; saving the manifest itself is
//! left to the caller.

use serde::Deserialize;

use super::{
    blur_area_fraction, decode_mask_png, encode_mask_png, estimate_blur_map, load_rgb, BlurType, Intensity, Manifest,
    ReviewState,
};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Optional label changes; absent fields are left alone.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelUpdate {
    pub blur_type: Option<BlurType>,
    pub intensity: Option<Intensity>,
    pub review_state: Option<ReviewState>,
}

fn index_of(m: &Manifest, id: &str) -> Result<usize> {
    m.samples
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| Error::invalid(format!("unknown sample `{id}`")))
}

fn image_extent(m: &Manifest, i: usize) -> Result<(usize, usize)> {
    let path = m.hr_path(&m.samples[i]);
    let (w, h) = image::image_dimensions(&path)?;
    Ok((h as usize, w as usize))
}

/// Validates a mask PNG against the sample's image and stores the bytes
/// exactly as given. Marks the sample human-verified.
pub fn replace_mask(m: &mut Manifest, id: &str, png: &[u8]) -> Result<Tensor> {
    let i = index_of(m, id)?;
    let mask = decode_mask_png(png)?;
    let [_, _, h, w] = mask.shape();
    let (ih, iw) = image_extent(m, i)?;
    if (h, w) != (ih, iw) {
        return Err(Error::invalid(format!("mask is {h}x{w} but the image is {ih}x{iw}")));
    }
    let fraction = blur_area_fraction(&mask)?;
    write_atomic(&m.mask_path(&m.samples[i]), png)?;
    let s = &mut m.samples[i];
    s.blur_fraction = Some(fraction);
    s.review_state = ReviewState::HumanVerified;
    s.revision += 1;
    Ok(mask)
}

pub fn apply_labels(m: &mut Manifest, id: &str, update: &LabelUpdate) -> Result<()> {
    let i = index_of(m, id)?;
    let s = &mut m.samples[i];
    if let Some(t) = update.blur_type {
        s.blur_type = t;
    }
    if let Some(v) = update.intensity {
        s.intensity = v;
    }
    if let Some(r) = update.review_state {
        s.review_state = r;
    }
    s.revision += 1;
    Ok(())
}

/// Recomputes the automatic mask from the sample's image, writes it and
/// returns it. The sample goes back to `auto`.
pub fn reestimate(m: &mut Manifest, id: &str, window: usize, threshold: f32) -> Result<Tensor> {
    let i = index_of(m, id)?;
    let img = load_rgb(m.hr_path(&m.samples[i]))?;
    let est = estimate_blur_map(&img, window, threshold)?;
    write_atomic(&m.mask_path(&m.samples[i]), &encode_mask_png(&est.mask)?)?;
    let s = &mut m.samples[i];
    s.blur_fraction = Some(blur_area_fraction(&est.mask)?);
    s.review_state = ReviewState::Auto;
    s.revision += 1;
    Ok(est.mask)
}

/// Re-reads the mask from disk and refreshes the cached fraction.
pub fn refresh_fraction(m: &mut Manifest, id: &str) -> Result<f64> {
    let i = index_of(m, id)?;
    let mask = super::load_mask(m.mask_path(&m.samples[i]))?;
    let f = blur_area_fraction(&mask)?;
    m.samples[i].blur_fraction = Some(f);
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{toy_set, write_toy_dataset};

    fn setup() -> (tempfile::TempDir, Manifest) {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(2, 0, 16, 0).unwrap();
        let paths = write_toy_dataset(dir.path(), &set).unwrap();
        let m = Manifest::load(&paths.blur).unwrap();
        (dir, m)
    }

    #[test]
    fn replace_mask_keeps_bytes() {
        let (_dir, mut m) = setup();
        let mask = Tensor::from_fn([1, 1, 16, 16], |[_, _, y, _]| if y < 4 { 0.0 } else { 1.0 });
        let png = encode_mask_png(&mask).unwrap();
        replace_mask(&mut m, "blur-0000", &png).unwrap();
        let s = m.get("blur-0000").unwrap();
        assert_eq!(s.blur_fraction, Some(0.25));
        assert_eq!(s.review_state, ReviewState::HumanVerified);
        assert_eq!(s.revision, 1);
        assert_eq!(std::fs::read(m.mask_path(s)).unwrap(), png);
    }

    #[test]
    fn replace_mask_rejects_bad_input() {
        let (_dir, mut m) = setup();
        let small = encode_mask_png(&Tensor::full([1, 1, 8, 16], 1.0)).unwrap();
        assert!(replace_mask(&mut m, "blur-0000", &small).is_err());
        assert!(replace_mask(&mut m, "nope", &small).is_err());
        assert_eq!(m.get("blur-0000").unwrap().revision, 0);
    }

    #[test]
    fn labels_and_estimate() {
        let (_dir, mut m) = setup();
        let up = LabelUpdate { intensity: Some(Intensity::Heavy), ..Default::default() };
        apply_labels(&mut m, "blur-0001", &up).unwrap();
        assert_eq!(m.get("blur-0001").unwrap().intensity, Intensity::Heavy);
        let mask = reestimate(&mut m, "blur-0001", 4, 0.5).unwrap();
        assert_eq!(mask.shape(), [1, 1, 16, 16]);
        let s = m.get("blur-0001").unwrap();
        assert_eq!(s.revision, 2);
        assert_eq!(s.review_state, ReviewState::Auto);
    }
}
