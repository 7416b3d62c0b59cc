//! LR synthesis: Gaussian blur (reflect padded), ×4 box downsample,
//! additive Gaussian noise, clamp to `[0,1]`, and an optional 8×8 block-DCT
//! quantization stage.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub kernel_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub anisotropic: bool,
    /// Rotation range in radians, used only for anisotropic kernels.
    pub theta_min: f64,
    pub theta_max: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    /// Block-DCT quantization step on the `[0,1]` scale; `None` disables it.
    pub dct_step: Option<f64>,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma_min: 0.2,
            sigma_max: 3.0,
            anisotropic: false,
            theta_min: 0.0,
            theta_max: std::f64::consts::PI,
            noise_min: 0.0,
            noise_max: 10.0 / 255.0,
            dct_step: None,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::invalid("need 0 < sigma_min <= sigma_max"));
        }
        if !(self.noise_min >= 0.0 && self.noise_min <= self.noise_max) {
            return Err(Error::invalid("need 0 <= noise_min <= noise_max"));
        }
        if self.theta_min > self.theta_max {
            return Err(Error::invalid("need theta_min <= theta_max"));
        }
        if let Some(q) = self.dct_step {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::invalid("dct_step must be positive"));
            }
        }
        Ok(())
    }
}

/// Parameters drawn for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrawnDegradation {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub noise: f64,
}

fn uniform(r: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

impl DrawnDegradation {
    pub fn draw(cfg: &DegradationConfig, r: &mut Rng) -> Self {
        let sigma_x = uniform(r, cfg.sigma_min, cfg.sigma_max);
        let (sigma_y, theta) = if cfg.anisotropic {
            (
                uniform(r, cfg.sigma_min, cfg.sigma_max),
                uniform(r, cfg.theta_min, cfg.theta_max),
            )
        } else {
            (sigma_x, 0.0)
        };
        let noise = uniform(r, cfg.noise_min, cfg.noise_max);
        Self {
            sigma_x,
            sigma_y,
            theta,
            noise,
        }
    }
}

/// Normalized anisotropic Gaussian, rotated by `theta`.
pub fn gaussian_kernel(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Result<Tensor> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {size} must be odd")));
    }
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(Error::invalid("kernel sigmas must be positive"));
    }
    let half = (size / 2) as f64;
    let (s, c) = theta.sin_cos();
    let mut vals = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - half, y as f64 - half);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            vals.push((-0.5 * (u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y))).exp());
        }
    }
    let total: f64 = vals.iter().sum();
    Tensor::new([1, 1, size, size], vals.into_iter().map(|v| (v / total) as f32).collect())
}

/// Reflect index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Same-size 2-D filtering of every plane with reflect padding.
pub fn blur(img: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [_, _, kh, kw] = kernel.shape();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("blur kernel extents must be odd"));
    }
    let [n, c, h, w] = img.shape();
    let (ry, rx) = (kh / 2, kw / 2);
    let (ph, pw) = (h + 2 * ry, w + 2 * rx);
    let k: Vec<f64> = kernel.data().iter().map(|&v| v as f64).collect();
    let cols: Vec<usize> = (0..pw).map(|x| reflect(x as isize - rx as isize, w)).collect();
    let mut padded = vec![0.0f64; ph * pw];
    let mut out = Vec::with_capacity(img.len());
    for plane in img.data().chunks(h * w).take(n * c) {
        for y in 0..ph {
            let src = reflect(y as isize - ry as isize, h) * w;
            for (x, &sx) in cols.iter().enumerate() {
                padded[y * pw + x] = plane[src + sx] as f64;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..kh {
                    let row = &padded[(y + dy) * pw + x..(y + dy) * pw + x + kw];
                    let krow = &k[dy * kw..(dy + 1) * kw];
                    acc += row.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::new(img.shape(), out)
}

/// Mean over each `f x f` block.
pub fn box_downsample(img: &Tensor, f: usize) -> Result<Tensor> {
    let [n, c, h, w] = img.shape();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!("{h}x{w} not divisible by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in img.data().chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for y in oy * f..(oy + 1) * f {
                    for &v in &plane[y * w + ox * f..y * w + (ox + 1) * f] {
                        acc += v as f64;
                    }
                }
                out.push((acc * norm) as f32);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

/// Uniform quantization of orthonormal 8×8 DCT coefficients, per plane.
/// Partial edge blocks are left untouched.
pub fn block_dct_quantize(img: &Tensor, step: f64) -> Tensor {
    let [_, _, h, w] = img.shape();
    let b = dct_basis();
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for by in (0..h / 8).map(|i| i * 8) {
            for bx in (0..w / 8).map(|i| i * 8) {
                let mut blk = [[0.0f64; 8]; 8];
                for (y, row) in blk.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + y) * w + bx + x] as f64;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += b[u][y] * b[v][x] * blk[y][x];
                            }
                        }
                        coef[u][v] = (s / step).round() * step;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += b[u][y] * b[v][x] * coef[u][v];
                            }
                        }
                        plane[(by + y) * w + bx + x] = s as f32;
                    }
                }
            }
        }
    }
    out
}

/// Degrades one batch item with explicit parameters.
pub fn degrade_with(hr: &Tensor, cfg: &DegradationConfig, d: &DrawnDegradation, r: &mut Rng) -> Result<Tensor> {
    let kernel = gaussian_kernel(cfg.kernel_size, d.sigma_x, d.sigma_y, d.theta)?;
    let blurred = blur(hr, &kernel)?;
    let mut lr = box_downsample(&blurred, FACTOR)?;
    if d.noise > 0.0 {
        let normal = Normal::new(0.0, d.noise).map_err(|e| Error::invalid(e.to_string()))?;
        for v in lr.data_mut() {
            *v += normal.sample(r) as f32;
        }
    }
    if let Some(step) = cfg.dct_step {
        lr = block_dct_quantize(&lr, step);
    }
    Ok(lr.map(|v| v.clamp(0.0, 1.0)))
}

/// `(N,3,H,W)` HR to `(N,3,H/4,W/4)` LR. Each batch item draws its own
/// kernel and noise level from `r`, in order.
pub fn degrade(hr: &Tensor, cfg: &DegradationConfig, r: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    let [n, _, h, w] = hr.shape();
    if h % FACTOR != 0 || w % FACTOR != 0 {
        return Err(Error::invalid(format!("HR extents {h}x{w} not divisible by {FACTOR}")));
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let d = DrawnDegradation::draw(cfg, r);
        items.push(degrade_with(&hr.item_at(i)?, cfg, &d, r)?);
    }
    if items.is_empty() {
        let [_, c, _, _] = hr.shape();
        return Ok(Tensor::zeros([0, c, h / FACTOR, w / FACTOR]));
    }
    Tensor::stack(&items)
}

/// Degradation stream keyed by `(cfg.seed, sample_id)`, independent of
/// dataset order.
pub fn sample_stream(cfg: &DegradationConfig, sample_id: &str) -> Rng {
    rng::stream(cfg.seed, &format!("degrade/{sample_id}"), 0)
}

pub fn degrade_sample(hr: &Tensor, cfg: &DegradationConfig, sample_id: &str) -> Result<Tensor> {
    degrade(hr, cfg, &mut sample_stream(cfg, sample_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_properties() {
        let k = gaussian_kernel(7, 1.3, 1.3, 0.0).unwrap();
        let s: f64 = k.data().iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(k.at([0, 0, y, x]), k.at([0, 0, x, y]));
            }
        }
        assert!(gaussian_kernel(6, 1.0, 1.0, 0.0).is_err());
        let sharp = gaussian_kernel(7, 0.01, 0.01, 0.0).unwrap();
        assert!(sharp.at([0, 0, 3, 3]) > 0.999);
    }

    #[test]
    fn constant_image_stays_constant() {
        let cfg = DegradationConfig {
            noise_min: 0.0,
            noise_max: 0.0,
            ..Default::default()
        };
        let hr = Tensor::full([1, 3, 64, 64], 0.5);
        let lr = degrade_sample(&hr, &cfg, "c").unwrap();
        assert_eq!(lr.shape(), [1, 3, 16, 16]);
        assert!(lr.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn reproducible_and_rejects_bad_extent() {
        let cfg = DegradationConfig::default();
        let hr = Tensor::from_fn([2, 3, 32, 32], |[n, c, y, x]| ((n + c + y * x) % 7) as f32 / 7.0);
        let a = degrade_sample(&hr, &cfg, "s1").unwrap();
        assert_eq!(a, degrade_sample(&hr, &cfg, "s1").unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(degrade_sample(&Tensor::zeros([1, 3, 30, 32]), &cfg, "s").is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(0, 1), 0);
    }

    #[test]
    fn dct_small_step_is_near_identity() {
        let img = Tensor::from_fn([1, 1, 8, 8], |[_, _, y, x]| (y * 8 + x) as f32 / 64.0);
        let q = block_dct_quantize(&img, 1e-6);
        for (a, b) in img.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
