//! Full-reference metrics with blur/focus region splits, discriminator
//! loss maps, and per-category reports.
//!
//! Region masks passed to the metric functions are *selection* masks:
//! non-zero entries are included. [`RegionValues`] builds the blur (mask 0)
//! and focus (mask 1) selections from a blur mask.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::Serialize;

use crate::checkpoint::{write_atomic, ParamSet};
use crate::dataset::{blur_area_fraction, luma, size_category, BlurType, Intensity, SizeCategory};
use crate::degrade::{self, DegradationConfig};
use crate::error::{Error, Result};
use crate::models::{bind, discriminator_forward_with, generator_forward, DiscriminatorConfig};
use crate::tensor::ops::{self, Resize};
use crate::tensor::{Graph, Tensor};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const GMSD_C: f64 = 0.0026;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_region(img: &Tensor, region: Option<&Tensor>) -> Result<()> {
    if let Some(r) = region {
        let [n, _, h, w] = img.shape();
        if r.shape() != [n, 1, h, w] {
            return Err(Error::invalid(format!(
                "region {:?} does not match image {:?}",
                r.shape(),
                img.shape()
            )));
        }
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels of the selected pixels, capped at
/// 100 dB. `None` when the region selects nothing.
pub fn psnr(a: &Tensor, b: &Tensor, region: Option<&Tensor>) -> Result<Option<f64>> {
    check_same(a, b)?;
    check_region(a, region)?;
    let [n, c, h, w] = a.shape();
    let mut se = 0.0f64;
    let mut count = 0usize;
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                if region.is_some_and(|r| r.at([i, 0, y, x]) == 0.0) {
                    continue;
                }
                for ch in 0..c {
                    let d = a.at([i, ch, y, x]) as f64 - b.at([i, ch, y, x]) as f64;
                    se += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        return Ok(Some(PSNR_CAP));
    }
    Ok(Some((10.0 * (1.0 / mse).log10()).min(PSNR_CAP)))
}

fn luma_planes(t: &Tensor) -> Result<Vec<Tensor>> {
    let [n, c, _, _] = t.shape();
    (0..n)
        .map(|i| {
            let item = t.item_at(i)?;
            if c == 1 {
                Ok(item)
            } else {
                luma(&item)
            }
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Mean local SSIM on luma with an 11×11 Gaussian window (σ = 1.5) over
/// window positions that fit inside the image. With a region, only windows
/// whose centre pixel is selected count.
pub fn ssim(a: &Tensor, b: &Tensor, region: Option<&Tensor>) -> Result<Option<f64>> {
    check_same(a, b)?;
    check_region(a, region)?;
    let [_, _, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {h}x{w} smaller than the SSIM window")));
    }
    let win = gaussian_window();
    let (la, lb) = (luma_planes(a)?, luma_planes(b)?);
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, (pa, pb)) in la.iter().zip(&lb).enumerate() {
        let (da, db) = (pa.data(), pb.data());
        for cy in half..h - half {
            for cx in half..w - half {
                if region.is_some_and(|r| r.at([i, 0, cy, cx]) == 0.0) {
                    continue;
                }
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    let row = (cy + wy - half) * w + cx - half;
                    for wx in 0..SSIM_WINDOW {
                        let k = win[wy * SSIM_WINDOW + wx];
                        let (x, y) = (da[row + wx] as f64, db[row + wx] as f64);
                        ma += k * x;
                        mb += k * y;
                        saa += k * x * x;
                        sbb += k * y * y;
                        sab += k * x * y;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Prewitt gradient magnitude (kernels scaled by 1/3) at interior pixels,
/// indexed by the centre pixel's offset into the `(H-2)×(W-2)` valid grid.
fn prewitt_magnitude(p: &Tensor) -> Vec<f64> {
    let [_, _, h, w] = p.shape();
    let d = p.data();
    let px = |y: usize, x: usize| d[y * w + x] as f64;
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (px(y - 1, x - 1) + px(y, x - 1) + px(y + 1, x - 1) - px(y - 1, x + 1) - px(y, x + 1) - px(y + 1, x + 1)) / 3.0;
            let gy = (px(y - 1, x - 1) + px(y - 1, x) + px(y - 1, x + 1) - px(y + 1, x - 1) - px(y + 1, x) - px(y + 1, x + 1)) / 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Standard deviation of the gradient-magnitude similarity map on luma,
/// with `c = 0.0026`, over interior pixels (no padding, no downsampling).
pub fn gmsd(a: &Tensor, b: &Tensor, region: Option<&Tensor>) -> Result<Option<f64>> {
    check_same(a, b)?;
    check_region(a, region)?;
    let [_, _, h, w] = a.shape();
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!("image {h}x{w} too small for GMSD")));
    }
    let (la, lb) = (luma_planes(a)?, luma_planes(b)?);
    let mut vals = Vec::new();
    for (i, (pa, pb)) in la.iter().zip(&lb).enumerate() {
        let (ga, gb) = (prewitt_magnitude(pa), prewitt_magnitude(pb));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                if region.is_some_and(|r| r.at([i, 0, y, x]) == 0.0) {
                    continue;
                }
                let k = (y - 1) * (w - 2) + (x - 1);
                vals.push((2.0 * ga[k] * gb[k] + GMSD_C) / (ga[k] * ga[k] + gb[k] * gb[k] + GMSD_C));
            }
        }
    }
    if vals.is_empty() {
        return Ok(None);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok(Some(var.sqrt()))
}

/// Blur (mask 0), focus (mask 1) and whole-image values of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionValues {
    pub blur: Option<f64>,
    pub focus: Option<f64>,
    pub all: Option<f64>,
}

impl RegionValues {
    pub fn compute(
        metric: impl Fn(Option<&Tensor>) -> Result<Option<f64>>,
        blur_mask: &Tensor,
    ) -> Result<Self> {
        let blur_sel = blur_mask.map(|v| if v == 0.0 { 1.0 } else { 0.0 });
        Ok(Self {
            blur: metric(Some(&blur_sel))?,
            focus: metric(Some(blur_mask))?,
            all: metric(None)?,
        })
    }
}

/// Per-location discriminator loss and its region means.
#[derive(Clone, Debug)]
pub struct DiscLossMap {
    /// `h(1 - D(hr)) + h(1 + D(sr))` on the logits grid, `(N,1,h,w)`.
    pub grid: Tensor,
    /// `grid` upsampled (nearest) to image size.
    pub map: Tensor,
    /// Blur mask majority-pooled onto the logits grid.
    pub grid_mask: Tensor,
    pub blur_mean: Option<f64>,
    pub focus_mean: Option<f64>,
    pub all_mean: f64,
    /// Share of blur cells on the logits grid.
    pub blur_fraction: f64,
}

/// A grid cell counts as blur when at least half of its pixels are blur.
fn pool_mask(mask: &Tensor, f: usize) -> Result<Tensor> {
    let [n, _, h, w] = mask.shape();
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid("mask extents not divisible by the logits stride"));
    }
    let (gh, gw) = (h / f, w / f);
    Ok(Tensor::from_fn([n, 1, gh, gw], |[i, _, gy, gx]| {
        let mut zeros = 0;
        for y in gy * f..(gy + 1) * f {
            for x in gx * f..(gx + 1) * f {
                if mask.at([i, 0, y, x]) == 0.0 {
                    zeros += 1;
                }
            }
        }
        if 2 * zeros >= f * f {
            0.0
        } else {
            1.0
        }
    }))
}

/// Loss map with the region split taken from `mask`. A conditional
/// discriminator is fed `d_mask` (usually the same mask).
pub fn disc_loss_map_with(
    d_params: &ParamSet,
    hr: &Tensor,
    sr: &Tensor,
    mask: &Tensor,
    d_mask: Option<&Tensor>,
    clamp: bool,
) -> Result<DiscLossMap> {
    check_same(hr, sr)?;
    check_region(hr, Some(mask))?;
    blur_area_fraction(mask)?;
    let cfg = DiscriminatorConfig::from_params(d_params)?;
    let d_in = if cfg.is_conditional() {
        let m = d_mask.unwrap_or(mask);
        check_region(hr, Some(m))?;
        Some(m)
    } else {
        None
    };
    let mut g = Graph::<f32>::new();
    let w = bind(&mut g, d_params, false);
    let h = g.leaf(hr.clone(), false);
    let s = g.leaf(sr.clone(), false);
    let m = d_in.map(|m| g.leaf(m.clone(), false));
    let real = discriminator_forward_with(&mut g, &cfg, &w, &h, m.as_ref())?;
    let fake = discriminator_forward_with(&mut g, &cfg, &w, &s, m.as_ref())?;
    let h_fn = |v: f64| if clamp { v.max(0.0) } else { v };
    let (rv, fv) = (g.value(real), g.value(fake));
    let grid_data: Vec<f32> = rv
        .data()
        .iter()
        .zip(fv.data())
        .map(|(&r, &f)| (h_fn(1.0 - r as f64) + h_fn(1.0 + f as f64)) as f32)
        .collect();
    let grid = Tensor::new(rv.shape(), grid_data)?;
    let factor = hr.shape()[2] / grid.shape()[2];
    let grid_mask = pool_mask(mask, factor)?;
    let (mut sb, mut nb, mut sf, mut nf) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &mv) in grid.data().iter().zip(grid_mask.data()) {
        if mv == 0.0 {
            sb += v as f64;
            nb += 1;
        } else {
            sf += v as f64;
            nf += 1;
        }
    }
    let total = grid.len();
    let map = ops::resize_nearest(&grid, factor, Resize::Up)?;
    Ok(DiscLossMap {
        blur_mean: (nb > 0).then(|| sb / nb as f64),
        focus_mean: (nf > 0).then(|| sf / nf as f64),
        all_mean: (sb + sf) / total as f64,
        blur_fraction: nb as f64 / total as f64,
        grid,
        map,
        grid_mask,
    })
}

pub fn disc_loss_map(d_params: &ParamSet, hr: &Tensor, sr: &Tensor, mask: &Tensor, clamp: bool) -> Result<DiscLossMap> {
    disc_loss_map_with(d_params, hr, sr, mask, None, clamp)
}

/// Piecewise-linear blue→cyan→yellow→red ramp.
fn false_color(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 } * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    let c = |k: usize| ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    [c(0), c(1), c(2)]
}

/// First batch item of a `(N,1,H,W)` map as a false-colour PNG, scaled to
/// `[0, max]`.
pub fn encode_false_color_png(map: &Tensor) -> Result<Vec<u8>> {
    let [n, _, h, w] = map.shape();
    if n == 0 {
        return Err(Error::invalid("empty map"));
    }
    let max = map.data().iter().copied().fold(0.0f32, f32::max) as f64;
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(false_color(map.at([0, 0, y as usize, x as usize]) as f64 * scale))
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Anything that maps an LR batch to a ×4 SR batch.
pub trait SuperResolver {
    fn upscale(&self, lr: &Tensor) -> Result<Tensor>;
}

impl SuperResolver for ParamSet {
    fn upscale(&self, lr: &Tensor) -> Result<Tensor> {
        generator_forward(self, lr)
    }
}

/// Nearest-neighbour ×4, the trivial baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestUpscaler;

impl SuperResolver for NearestUpscaler {
    fn upscale(&self, lr: &Tensor) -> Result<Tensor> {
        ops::resize_nearest(lr, degrade::FACTOR, Resize::Up)
    }
}

/// A labelled evaluation image.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub hr: Tensor,
    pub mask: Tensor,
    pub blur_type: BlurType,
    pub intensity: Intensity,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub sample_id: String,
    pub metric: String,
    pub blur_type: BlurType,
    pub size_category: SizeCategory,
    pub intensity: Intensity,
    pub blur_value: Option<f64>,
    pub focus_value: Option<f64>,
    pub all_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub blur_type: BlurType,
    pub size_category: SizeCategory,
    pub intensity: Intensity,
    pub metric: String,
    pub samples: usize,
    pub blur_mean: Option<f64>,
    pub focus_mean: Option<f64>,
    pub all_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregate: Vec<AggregateRow>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Crops to extents divisible by 4 (top-left anchored).
fn crop4(t: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = t.shape();
    t.crop(0, 0, h - h % degrade::FACTOR, w - w % degrade::FACTOR)
}

/// Degrades every sample with its own `(seed, id)` stream, super-resolves,
/// and scores PSNR/SSIM/GMSD per region. Aggregates are plain means of the
/// per-sample rows, grouped by `(blur_type, size_category, intensity)`.
pub fn eval_report(model: &dyn SuperResolver, samples: &[EvalSample], deg: &DegradationConfig) -> Result<MetricReport> {
    deg.validate()?;
    let mut rows = Vec::new();
    for s in samples {
        let hr = crop4(&s.hr)?;
        let mask = crop4(&s.mask)?;
        let lr = degrade::degrade_sample(&hr, deg, &s.id)?;
        let sr = model.upscale(&lr)?.map(|v| v.clamp(0.0, 1.0));
        check_same(&hr, &sr)?;
        let category = size_category(blur_area_fraction(&mask)?);
        let metrics: [(&str, RegionValues); 3] = [
            ("psnr", RegionValues::compute(|r| psnr(&sr, &hr, r), &mask)?),
            ("ssim", RegionValues::compute(|r| ssim(&sr, &hr, r), &mask)?),
            ("gmsd", RegionValues::compute(|r| gmsd(&sr, &hr, r), &mask)?),
        ];
        for (name, v) in metrics {
            rows.push(MetricRow {
                sample_id: s.id.clone(),
                metric: name.into(),
                blur_type: s.blur_type,
                size_category: category,
                intensity: s.intensity,
                blur_value: v.blur,
                focus_value: v.focus,
                all_value: v.all,
            });
        }
    }
    let mut groups: BTreeMap<(BlurType, SizeCategory, Intensity, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.blur_type, r.size_category, r.intensity, r.metric.clone()))
            .or_default()
            .push(r);
    }
    let aggregate = groups
        .into_iter()
        .map(|((blur_type, size_category, intensity, metric), rs)| AggregateRow {
            blur_type,
            size_category,
            intensity,
            metric,
            samples: rs.len(),
            blur_mean: mean_of(rs.iter().map(|r| r.blur_value)),
            focus_mean: mean_of(rs.iter().map(|r| r.focus_value)),
            all_mean: mean_of(rs.iter().map(|r| r.all_value)),
        })
        .collect();
    Ok(MetricReport { rows, aggregate })
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

impl MetricReport {
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), &csv_bytes(&self.rows)?)?;
        write_atomic(&dir.join("metrics_by_category.csv"), &csv_bytes(&self.aggregate)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 5 + y * 3 + x * 7) % 17) as f32 / 16.0)
    }

    #[test]
    fn identical_images() {
        let a = ramp(16, 16);
        assert_eq!(psnr(&a, &a, None).unwrap(), Some(PSNR_CAP));
        assert!((ssim(&a, &a, None).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(gmsd(&a, &a, None).unwrap(), Some(0.0));
    }

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::zeros([1, 3, 4, 4]);
        let b = Tensor::full([1, 3, 4, 4], 0.5);
        assert!((psnr(&a, &b, None).unwrap().unwrap() - 6.020_599_913).abs() < 1e-6);
        let none = Tensor::zeros([1, 1, 4, 4]);
        assert_eq!(psnr(&a, &b, Some(&none)).unwrap(), None);
    }

    #[test]
    fn ssim_inverse_is_lower_and_small_images_fail() {
        let a = ramp(16, 16);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv, None).unwrap().unwrap() < 1.0);
        assert!(ssim(&Tensor::zeros([1, 3, 10, 20]), &Tensor::zeros([1, 3, 10, 20]), None).is_err());
    }

    #[test]
    fn all_focus_mask_matches_all() {
        let a = ramp(16, 16);
        let b = a.map(|v| (v * 0.9 + 0.05).min(1.0));
        let mask = Tensor::full([1, 1, 16, 16], 1.0);
        let rv = RegionValues::compute(|r| psnr(&a, &b, r), &mask).unwrap();
        assert_eq!(rv.focus, rv.all);
        assert_eq!(rv.blur, None);
    }

    #[test]
    fn false_color_ends() {
        assert_eq!(false_color(0.0), [0, 0, 128]);
        assert_eq!(false_color(1.0), [204, 0, 0]);
        assert_eq!(false_color(f64::NAN), [0, 0, 128]);
    }
}
