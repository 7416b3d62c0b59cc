//! Cross-branch weight fusion: cosine-adaptive λ, periodic symmetric
//! interpolation of the two branches, and the final half-half merge.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{cosine_similarity, distance, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{BranchState, FusionHook};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScope {
    #[default]
    GeneratorOnly,
    /// Also fuses discriminator tensors whose shapes agree across branches.
    GeneratorAndDiscriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub enabled: bool,
    pub lambda0: f64,
    pub k: u64,
    pub scope: FusionScope,
    /// One λ per tensor instead of one over the flattened set.
    pub per_tensor: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda0: 0.99,
            k: 20,
            scope: FusionScope::GeneratorOnly,
            per_tensor: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda0) {
            return Err(Error::invalid("lambda0 must lie in [0,1]"));
        }
        if self.k == 0 {
            return Err(Error::invalid("fusion interval k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionLog {
    pub iteration: u64,
    pub lambda: f64,
    pub cos_before: f64,
    pub cos_after: f64,
    pub diff_norm_before: f64,
    pub diff_norm_after: f64,
}

/// `λ0 + (1 - λ0) cos(W_G, W_B) / 2`.
pub fn adaptive_lambda(wg: &ParamSet, wb: &ParamSet, lambda0: f64) -> Result<f64> {
    Ok(lambda_from_cos(cosine_similarity(wg, wb)?, lambda0))
}

fn lambda_from_cos(cos: f64, lambda0: f64) -> f64 {
    lambda0 + (1.0 - lambda0) * cos / 2.0
}

/// `x / 2 + y / 2` with a single rounding. The f64 sum of two f32 values is
/// exact, so the result is the correctly rounded midpoint and symmetric.
#[inline]
fn midpoint(x: f32, y: f32) -> f32 {
    ((x as f64 + y as f64) * 0.5) as f32
}

/// `a + b` when it is exact in f32, via Knuth's error-free sum.
fn exact_sum(a: f64, b: f64) -> Option<f32> {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (err == 0.0 && (s as f32) as f64 == s).then_some(s as f32)
}

fn step_ulps(x: f32, k: i32) -> f32 {
    if !x.is_finite() {
        return x;
    }
    // order-preserving integer view of f32
    let i = x.to_bits() as i32;
    let ordered = if i < 0 { i32::MIN - i } else { i };
    let moved = ordered.saturating_add(k);
    f32::from_bits((if moved < 0 { i32::MIN - moved } else { moved }) as u32)
}

/// One coordinate of the symmetric update `g' = λg + (1-λ)b`,
/// `b' = λb + (1-λ)g`, constrained so that the f32 midpoint of the pair is
/// bit-identical before and after; that is what keeps the fused model fixed.
///
/// Tried in order: the rounded ideals; the larger result rounded with the
/// other as the exact remainder of `g + b`; the nearest pair within a few
/// ulps of the rounded ideals. If all fail the pair is left unchanged.
fn cross_pair(g: f32, b: f32, lambda: f64) -> (f32, f32) {
    let (gf, bf) = (g as f64, b as f64);
    let ideal_g = lambda * gf + (1.0 - lambda) * bf;
    let ideal_b = lambda * bf + (1.0 - lambda) * gf;
    let (g2, b2) = (ideal_g as f32, ideal_b as f32);
    let mid = midpoint(g, b);
    if !(gf.is_finite() && bf.is_finite()) || midpoint(g2, b2) == mid {
        return (g2, b2);
    }
    let sum = gf + bf;
    let via_g = || exact_sum(sum, -(g2 as f64)).map(|b| (g2, b));
    let via_b = || exact_sum(sum, -(b2 as f64)).map(|g| (g, b2));
    let split = if ideal_g.abs() >= ideal_b.abs() { via_g().or_else(via_b) } else { via_b().or_else(via_g) };
    if let Some(pair) = split {
        return pair;
    }
    let err = |p: f32, q: f32| (p as f64 - ideal_g).abs().max((q as f64 - ideal_b).abs());
    let mut best: Option<(f32, f32)> = None;
    for dg in -SEARCH_ULPS..=SEARCH_ULPS {
        let p = step_ulps(g2, dg);
        for db in -SEARCH_ULPS..=SEARCH_ULPS {
            let q = step_ulps(b2, db);
            if midpoint(p, q) == mid && best.is_none_or(|(bp, bq)| err(p, q) < err(bp, bq)) {
                best = Some((p, q));
            }
        }
    }
    best.unwrap_or((g, b))
}

const SEARCH_ULPS: i32 = 8;

fn cross_tensors(g: &Tensor, b: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    let mut gd = Vec::with_capacity(g.len());
    let mut bd = Vec::with_capacity(b.len());
    for (&x, &y) in g.data().iter().zip(b.data()) {
        let (p, q) = cross_pair(x, y, lambda);
        gd.push(p);
        bd.push(q);
    }
    Ok((Tensor::new(g.shape(), gd)?, Tensor::new(b.shape(), bd)?))
}

fn cross_sets(wg: &ParamSet, wb: &ParamSet, lambda_of: impl Fn(&str, &Tensor, &Tensor) -> f64) -> Result<(ParamSet, ParamSet)> {
    wg.check_aligned(wb)?;
    let mut g2 = wg.clone();
    let mut b2 = wb.clone();
    for (name, g) in wg.iter() {
        let b = wb.require(name)?;
        let (p, q) = cross_tensors(g, b, lambda_of(name, g, b))?;
        g2.insert(name.clone(), p);
        b2.insert(name.clone(), q);
    }
    Ok((g2, b2))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} not in [0,1]")));
    }
    Ok(())
}

/// `W_G' = λW_G + (1-λ)W_B`, `W_B' = λW_B + (1-λ)W_G`.
///
/// The returned log has `iteration = 0`; callers running a schedule fill
/// it in.
pub fn cross_interpolate(wg: &ParamSet, wb: &ParamSet, lambda: f64) -> Result<(ParamSet, ParamSet, FusionLog)> {
    check_lambda(lambda)?;
    let (g2, b2) = cross_sets(wg, wb, |_, _, _| lambda)?;
    let log = fusion_log(wg, wb, &g2, &b2, lambda)?;
    Ok((g2, b2, log))
}

fn cos_or_nan(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    match cosine_similarity(a, b) {
        Ok(c) => Ok(c),
        Err(Error::DegenerateInput(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

fn fusion_log(wg: &ParamSet, wb: &ParamSet, g2: &ParamSet, b2: &ParamSet, lambda: f64) -> Result<FusionLog> {
    Ok(FusionLog {
        iteration: 0,
        lambda,
        cos_before: cos_or_nan(wg, wb)?,
        cos_after: cos_or_nan(g2, b2)?,
        diff_norm_before: distance(wg, wb)?,
        diff_norm_after: distance(g2, b2)?,
    })
}

/// Per-tensor variant: each tensor gets λ from its own cosine. Tensors with
/// zero norm on either side fall back to `λ0`. The logged λ is the
/// global one, for reference.
pub fn cross_interpolate_per_tensor(
    wg: &ParamSet,
    wb: &ParamSet,
    lambda0: f64,
) -> Result<(ParamSet, ParamSet, FusionLog)> {
    check_lambda(lambda0)?;
    let (g2, b2) = cross_sets(wg, wb, |_, g, b| {
        let dot: f64 = g.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
        let ng = g.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = b.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if ng == 0.0 || nb == 0.0 {
            lambda0
        } else {
            lambda_from_cos((dot / (ng * nb)).clamp(-1.0, 1.0), lambda0)
        }
    })?;
    let global = match adaptive_lambda(wg, wb, lambda0) {
        Ok(l) => l,
        Err(Error::DegenerateInput(_)) => lambda0,
        Err(e) => return Err(e),
    };
    let log = fusion_log(wg, wb, &g2, &b2, global)?;
    Ok((g2, b2, log))
}

/// Coordinatewise `W_G/2 + W_B/2`. The result keeps metadata entries both
/// parents agree on and, when the parents differ, records their checksums
/// in sorted order so that `fuse(a, b)` and `fuse(b, a)` are identical.
pub fn final_fuse(wg: &ParamSet, wb: &ParamSet) -> Result<ParamSet> {
    wg.check_aligned(wb)?;
    let mut out = ParamSet::new();
    for (name, g) in wg.iter() {
        let b = wb.require(name)?;
        let data = g.data().iter().zip(b.data()).map(|(&x, &y)| midpoint(x, y)).collect();
        out.insert(name.clone(), Tensor::new(g.shape(), data)?);
    }
    for (k, v) in wg.metadata() {
        if wb.meta(k) == Some(v.as_str()) {
            out.set_meta(k.clone(), v.clone());
        }
    }
    let (ca, cb) = (wg.checksum(), wb.checksum());
    if ca != cb || wg.metadata() != wb.metadata() {
        let (lo, hi) = if ca <= cb { (ca, cb) } else { (cb, ca) };
        out.set_meta("fuse.parents", format!("{lo},{hi}"));
    }
    Ok(out)
}

pub fn should_fuse(iteration: u64, k: u64) -> bool {
    k > 0 && iteration > 0 && iteration % k == 0
}

/// Shape-compatible discriminator tensors of the two branches.
fn shared_subset(a: &ParamSet, b: &ParamSet) -> (ParamSet, ParamSet) {
    let mut sa = ParamSet::new();
    let mut sb = ParamSet::new();
    for (name, t) in a.iter() {
        if let Some(u) = b.get(name) {
            if u.shape() == t.shape() {
                sa.insert(name.clone(), t.clone());
                sb.insert(name.clone(), u.clone());
            }
        }
    }
    (sa, sb)
}

/// Fusion hook that cross-interpolates the branch generators every `k`
/// iterations, after that iteration's optimizer steps. Optimizer moments
/// stay with their branch.
#[derive(Clone, Debug)]
pub struct CrossFusion {
    pub config: FusionConfig,
}

impl CrossFusion {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl FusionHook for CrossFusion {
    fn is_barrier(&self, iteration: u64) -> bool {
        self.config.enabled && should_fuse(iteration, self.config.k)
    }

    fn after_iteration(
        &mut self,
        iteration: u64,
        general: &mut BranchState,
        blur: &mut BranchState,
    ) -> Result<Option<FusionLog>> {
        if !self.is_barrier(iteration) {
            return Ok(None);
        }
        let (g2, b2, mut log) = if self.config.per_tensor {
            cross_interpolate_per_tensor(&general.generator, &blur.generator, self.config.lambda0)?
        } else {
            let lambda = adaptive_lambda(&general.generator, &blur.generator, self.config.lambda0)?;
            cross_interpolate(&general.generator, &blur.generator, lambda)?
        };
        if self.config.scope == FusionScope::GeneratorAndDiscriminator {
            let (da, db) = shared_subset(&general.discriminator, &blur.discriminator);
            let (da2, db2, _) = cross_interpolate(&da, &db, log.lambda)?;
            for (name, t) in da2.iter() {
                general.discriminator.insert(name.clone(), t.clone());
            }
            for (name, t) in db2.iter() {
                blur.discriminator.insert(name.clone(), t.clone());
            }
        }
        general.generator = g2;
        blur.generator = b2;
        log.iteration = iteration;
        log::debug!(
            "fusion at {iteration}: lambda={:.6} cos {:.6}->{:.6}",
            log.lambda,
            log.cos_before,
            log.cos_after
        );
        Ok(Some(log))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[f32]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn lambda_extremes() {
        let a = set(&[1.0, 2.0]);
        assert!((adaptive_lambda(&a, &a, 0.99).unwrap() - 0.995).abs() < 1e-12);
        assert!((adaptive_lambda(&a, &a.map(|v| -v), 0.99).unwrap() - 0.985).abs() < 1e-12);
        assert_eq!(adaptive_lambda(&set(&[1.0, 0.0]), &set(&[0.0, 1.0]), 0.99).unwrap(), 0.99);
        assert!(adaptive_lambda(&a, &set(&[0.0, 0.0]), 0.99).is_err());
    }

    #[test]
    fn cross_cases() {
        let (g, b, log) = cross_interpolate(&set(&[0.0]), &set(&[2.0]), 0.9).unwrap();
        assert!((g.flatten()[0] - 0.2).abs() < 1e-6);
        assert!((b.flatten()[0] - 1.8).abs() < 1e-6);
        assert!(log.diff_norm_after < log.diff_norm_before);
        let a = set(&[0.3, -1.25, 7.0]);
        let (g, b, _) = cross_interpolate(&a, &a, 0.37).unwrap();
        assert_eq!(g.flatten(), a.flatten());
        assert_eq!(b.flatten(), a.flatten());
        let (g, b, _) = cross_interpolate(&set(&[1.0, 2.0]), &set(&[3.0, 5.0]), 0.5).unwrap();
        assert_eq!(g.flatten(), vec![2.0, 3.5]);
        assert_eq!(b.flatten(), vec![2.0, 3.5]);
        assert!(cross_interpolate(&set(&[1.0]), &set(&[1.0, 2.0]), 0.5).is_err());
    }

    #[test]
    fn fuse_cases() {
        let w = set(&[0.1, -3.0]);
        assert_eq!(final_fuse(&w, &w).unwrap(), w);
        assert_eq!(final_fuse(&set(&[1.0]), &set(&[3.0])).unwrap().flatten(), vec![2.0]);
        let (a, b) = (set(&[0.1, 7.3]), set(&[-2.2, 1e-3]));
        assert_eq!(final_fuse(&a, &b).unwrap(), final_fuse(&b, &a).unwrap());
    }

    #[test]
    fn schedule() {
        assert!(should_fuse(20, 20));
        assert!(!should_fuse(19, 20));
        assert!((1..50).all(|i| should_fuse(i, 1)));
    }

    #[test]
    fn pair_keeps_midpoint() {
        let cases = [(0.757_642_8, -0.017_662_957), (0.71, 0.002_832_563_6), (-0.5, 0.5), (3.0, 3.0), (0.0, -1e-40), (1e-30, 1.0)];
        for (g, b) in cases {
            for lambda in [0.0, 0.3, 0.985, 0.99, 0.995, 1.0] {
                let (g2, b2) = cross_pair(g, b, lambda);
                assert_eq!(midpoint(g2, b2), midpoint(g, b), "{g} {b} {lambda}");
            }
        }
        assert_eq!(step_ulps(1.0, 1), 1.0 + f32::EPSILON);
        assert_eq!(step_ulps(step_ulps(-2.5, 1), -1), -2.5);
        assert!(step_ulps(0.0, 1) > 0.0 && step_ulps(0.0, -1) < 0.0);
    }
}
