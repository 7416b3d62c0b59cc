//! Gradient-energy sharpness estimate. This is a simple stand-in for a
//! learned defocus detector; every mask it produces is marked `auto` and
//! meant to be reviewed.

use std::collections::BTreeMap;

use super::{blur_area_fraction, size_category, Manifest};
use crate::degrade::reflect;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `0.299 R + 0.587 G + 0.114 B` of the first batch item, as `(1,1,H,W)`.
pub fn luma(img: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = img.shape();
    if n == 0 || c != 3 {
        return Err(Error::invalid(format!("expected an RGB image, got {:?}", img.shape())));
    }
    Ok(Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
        0.299 * img.at([0, 0, y, x]) + 0.587 * img.at([0, 1, y, x]) + 0.114 * img.at([0, 2, y, x])
    }))
}

/// Sobel derivatives of a single plane with reflect borders.
pub fn sobel(plane: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [_, _, h, w] = plane.shape();
    let d = plane.data();
    let px = |y: isize, x: isize| d[reflect(y, h) * w + reflect(x, w)] as f64;
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx.push(
                (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                    - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1)),
            );
            gy.push(
                (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                    - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1)),
            );
        }
    }
    (gx, gy)
}

/// Separable `window x window` mean with reflect borders.
fn box_mean(v: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let lo = (window / 2) as isize;
    let offsets: Vec<isize> = (0..window as isize).map(|i| i - lo).collect();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = offsets.iter().map(|&o| v[y * w + reflect(x as isize + o, w)]).sum::<f64>();
        }
    }
    let norm = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = offsets
                .iter()
                .map(|&o| rows[reflect(y as isize + o, h) * w + x])
                .sum::<f64>()
                * norm;
        }
    }
    out
}

/// Nearest-rank percentile.
fn percentile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

#[derive(Clone, Debug)]
pub struct BlurMapEstimate {
    /// Normalized sharpness in `[0,1]`, `(1,1,H,W)`.
    pub sharpness: Tensor,
    /// 0 where sharpness is below the threshold (blur), else 1.
    pub mask: Tensor,
}

/// `v < threshold` becomes 0 (blur), everything else 1.
pub fn binarize(map: &Tensor, threshold: f32) -> Tensor {
    map.map(|v| if v < threshold { 0.0 } else { 1.0 })
}

pub fn estimate_blur_map(img: &Tensor, window: usize, threshold: f32) -> Result<BlurMapEstimate> {
    let y = luma(img)?;
    let [_, _, h, w] = y.shape();
    if window == 0 || window > h.min(w) {
        return Err(Error::invalid(format!("window {window} does not fit a {h}x{w} image")));
    }
    let (gx, gy) = sobel(&y);
    let energy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * a + b * b).collect();
    let local = box_mean(&energy, h, w, window);
    let mut scale = percentile(&local, 0.99);
    if scale <= 0.0 {
        scale = local.iter().copied().fold(0.0, f64::max);
    }
    let sharp: Vec<f32> = if scale > 0.0 {
        local.iter().map(|&e| (e / scale).min(1.0) as f32).collect()
    } else {
        vec![0.0; h * w]
    };
    let sharpness = Tensor::new([1, 1, h, w], sharp)?;
    let mask = binarize(&sharpness, threshold);
    Ok(BlurMapEstimate { sharpness, mask })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStat {
    pub mean_gradient: f64,
    pub pixels: usize,
    pub samples: usize,
}

/// Mean Sobel magnitude over blurred (mask 0) pixels, pooled per group.
/// Groups without any blurred pixel are left out.
pub fn region_gradient_stats<'a, I>(items: I) -> Result<BTreeMap<String, GroupStat>>
where
    I: IntoIterator<Item = (String, &'a Tensor, &'a Tensor)>,
{
    let mut acc: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for (group, img, mask) in items {
        let y = luma(img)?;
        let [_, _, h, w] = y.shape();
        if mask.shape() != [1, 1, h, w] {
            return Err(Error::invalid(format!(
                "mask {:?} does not match image {h}x{w}",
                mask.shape()
            )));
        }
        let (gx, gy) = sobel(&y);
        let e = acc.entry(group).or_default();
        let mut any = false;
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                e.0 += (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                e.1 += 1;
                any = true;
            }
        }
        if any {
            e.2 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .filter(|(_, (_, n, _))| *n > 0)
        .map(|(g, (sum, pixels, samples))| {
            (
                g,
                GroupStat {
                    mean_gradient: sum / pixels as f64,
                    pixels,
                    samples,
                },
            )
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Intensity,
    Size,
}

impl Manifest {
    /// [`region_gradient_stats`] over the manifest's non-rejected samples.
    /// Size groups use the fraction of the mask on disk.
    pub fn gradient_stats(&self, grouping: Grouping) -> Result<BTreeMap<String, GroupStat>> {
        let mut loaded = Vec::new();
        for s in self.training_samples() {
            let img = super::load_rgb(self.hr_path(s))?;
            let mask = super::load_mask(self.mask_path(s))?;
            let key = match grouping {
                Grouping::Intensity => s.intensity.to_string(),
                Grouping::Size => size_category(blur_area_fraction(&mask)?).to_string(),
            };
            loaded.push((key, img, mask));
        }
        region_gradient_stats(loaded.iter().map(|(k, i, m)| (k.clone(), i, m)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_all_blur() {
        let est = estimate_blur_map(&Tensor::full([1, 3, 16, 16], 0.4), 5, 0.5).unwrap();
        assert!(est.sharpness.data().iter().all(|&v| v == 0.0));
        assert!(est.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_is_all_sharp() {
        let img = Tensor::from_fn([1, 3, 32, 32], |[_, _, y, x]| ((y / 2 + x / 2) % 2) as f32);
        let est = estimate_blur_map(&img, 8, 0.5).unwrap();
        assert!(est.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn window_must_fit() {
        assert!(estimate_blur_map(&Tensor::zeros([1, 3, 8, 8]), 9, 0.5).is_err());
    }

    #[test]
    fn binarize_is_idempotent_on_binary_maps() {
        let m = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| ((y + x) % 2) as f32);
        for t in [0.1f32, 0.5, 1.0] {
            assert_eq!(binarize(&m, t), m);
        }
        assert!(binarize(&m, 0.0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_sharp_mask_is_absent() {
        let img = Tensor::full([1, 3, 4, 4], 0.2);
        let mask = Tensor::full([1, 1, 4, 4], 1.0);
        let s = region_gradient_stats([("heavy".to_string(), &img, &mask)]).unwrap();
        assert!(s.is_empty());
    }
}
