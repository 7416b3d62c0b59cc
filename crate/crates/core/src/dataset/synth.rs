//! Procedural toy data: textured HR images, optionally with one half
//! defocused (Gaussian blurred) and masked as blur.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::{DataSplits, encode_mask_png, encode_rgb_png, BlurSample, BlurType, Intensity, Manifest, ReviewState, Source};
use crate::checkpoint::write_atomic;
use crate::degrade::{blur, gaussian_kernel};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Gratings over a colour gradient with a few hard-edged shapes on top.
pub fn texture(size: usize, r: &mut Rng) -> Tensor {
    let base: [f32; 3] = [r.random_range(0.2..0.6), r.random_range(0.2..0.6), r.random_range(0.2..0.6)];
    let tilt: [f32; 2] = [r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)];
    let gratings: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let period = r.random_range(5.0..20.0f32);
            let angle = r.random_range(0.0..std::f32::consts::PI);
            let phase = r.random_range(0.0..std::f32::consts::TAU);
            let amp = r.random_range(0.05..0.15f32);
            let tint = [r.random_range(0.5..1.0), r.random_range(0.5..1.0), r.random_range(0.5..1.0)];
            (std::f32::consts::TAU / period, angle, phase, amp, tint)
        })
        .collect();
    let shapes: Vec<(bool, f32, f32, f32, f32, [f32; 3])> = (0..r.random_range(3..7))
        .map(|_| {
            let s = size as f32;
            (
                r.random_bool(0.5),
                r.random_range(0.0..s),
                r.random_range(0.0..s),
                r.random_range(0.05 * s..0.25 * s),
                r.random_range(0.05 * s..0.25 * s),
                [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)],
            )
        })
        .collect();
    let inv = 1.0 / size as f32;
    Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
        let (yf, xf) = (y as f32, x as f32);
        let mut v = base[c] + tilt[0] * yf * inv + tilt[1] * xf * inv;
        for &(k, a, p, amp, tint) in &gratings {
            v += amp * tint[c] * (k * (xf * a.cos() + yf * a.sin()) + p).sin();
        }
        for &(disk, cy, cx, ry, rx, col) in &shapes {
            let inside = if disk {
                ((yf - cy) / ry).powi(2) + ((xf - cx) / rx).powi(2) <= 1.0
            } else {
                (yf - cy).abs() <= ry && (xf - cx).abs() <= rx
            };
            if inside {
                v = 0.35 * v + 0.65 * col[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// Blurs one half (side chosen at random) with a Gaussian of sigma in
/// `[2, 3.5]`. Returns the composite and its mask (0 on the blurred half).
pub fn half_defocus(img: &Tensor, r: &mut Rng) -> Result<(Tensor, Tensor)> {
    let [_, _, h, w] = img.shape();
    let sigma = r.random_range(2.0..3.5f64);
    let size = 2 * (3.0 * sigma).ceil() as usize + 1;
    let blurred = blur(img, &gaussian_kernel(size, sigma, sigma, 0.0)?)?;
    let side = r.random_range(0..4u8);
    let in_blur = |y: usize, x: usize| match side {
        0 => x < w / 2,
        1 => x >= w / 2,
        2 => y < h / 2,
        _ => y >= h / 2,
    };
    let mask = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| if in_blur(y, x) { 0.0 } else { 1.0 });
    let out = Tensor::from_fn(img.shape(), |[n, c, y, x]| {
        if in_blur(y, x) {
            blurred.at([n, c, y, x])
        } else {
            img.at([n, c, y, x])
        }
    });
    Ok((out, mask))
}

/// Deterministic sample `index` of a toy set. Blur samples carry a half
/// mask; general samples are fully sharp with an all-ones mask.
pub fn toy_sample(size: usize, seed: u64, index: u64, blurred: bool) -> Result<(Tensor, Tensor)> {
    let tag = if blurred { "synth/blur" } else { "synth/general" };
    let mut r = rng::stream(seed, tag, index);
    let img = texture(size, &mut r);
    if blurred {
        half_defocus(&img, &mut r)
    } else {
        Ok((img, Tensor::full([1, 1, size, size], 1.0)))
    }
}

/// `count` general and `count` blur training images plus `heldout` blur
/// images drawn from a disjoint index range.
pub fn toy_set(count: usize, heldout: usize, size: usize, seed: u64) -> Result<DataSplits> {
    let gen = |range: std::ops::Range<usize>, blurred| -> Result<Vec<_>> {
        range.map(|i| toy_sample(size, seed, i as u64, blurred)).collect()
    };
    Ok(DataSplits {
        general: gen(0..count, false)?,
        blur: gen(0..count, true)?,
        heldout: gen(count..count + heldout, true)?,
    })
}

/// Paths of the manifests written by [`write_toy_dataset`].
#[derive(Clone, Debug)]
pub struct ToyManifests {
    pub general: PathBuf,
    pub blur: PathBuf,
    pub heldout: PathBuf,
}

fn write_split(dir: &Path, name: &str, items: &[(Tensor, Tensor)], blurred: bool) -> Result<PathBuf> {
    for sub in ["hr", "mask"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut samples = Vec::with_capacity(items.len());
    for (i, (hr, mask)) in items.iter().enumerate() {
        let id = format!("{name}-{i:04}");
        let hr_path = format!("hr/{id}.png");
        let mask_path = format!("mask/{id}.png");
        write_atomic(&dir.join(&hr_path), &encode_rgb_png(hr)?)?;
        write_atomic(&dir.join(&mask_path), &encode_mask_png(mask)?)?;
        samples.push(BlurSample {
            id,
            hr_path,
            mask_path,
            blur_type: if blurred { BlurType::Defocus } else { BlurType::None },
            intensity: Intensity::Unlabeled,
            source: Source::Synthetic,
            review_state: ReviewState::Auto,
            blur_fraction: Some(super::blur_area_fraction(mask)?),
            revision: 0,
        });
    }
    let path = dir.join(format!("{name}.jsonl"));
    Manifest::new(dir, samples).save(&path)?;
    Ok(path)
}

pub fn write_toy_dataset(dir: &Path, set: &DataSplits) -> Result<ToyManifests> {
    Ok(ToyManifests {
        general: write_split(dir, "general", &set.general, false)?,
        blur: write_split(dir, "blur", &set.blur, true)?,
        heldout: write_split(dir, "heldout", &set.heldout, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::blur_area_fraction;

    #[test]
    fn half_masks() {
        let (img, mask) = toy_sample(32, 5, 0, true).unwrap();
        assert_eq!(img.shape(), [1, 3, 32, 32]);
        assert_eq!(blur_area_fraction(&mask).unwrap(), 0.5);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (_, sharp) = toy_sample(32, 5, 0, false).unwrap();
        assert_eq!(blur_area_fraction(&sharp).unwrap(), 0.0);
    }

    #[test]
    fn written_set_loads() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(2, 1, 16, 0).unwrap();
        let paths = write_toy_dataset(dir.path(), &set).unwrap();
        let m = Manifest::load(&paths.blur).unwrap();
        assert_eq!(m.samples.len(), 2);
        let back = crate::dataset::load_rgb(m.hr_path(&m.samples[0])).unwrap();
        assert_eq!(back.shape(), [1, 3, 16, 16]);
    }
}
