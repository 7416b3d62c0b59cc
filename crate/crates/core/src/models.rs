//! ×4 generator and patch discriminators.
//!
//! Forward passes are written once against [`Exec`] and run either eagerly
//! on tensors or on a [`Graph`] tape. Weights are looked up by name through
//! [`Weights`], so the same code serves a `ParamSet` (eager) and a map of
//! bound graph variables (training).

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Eager, Element, Exec, Graph, Resize, Tensor, Var};

pub const SCALE: usize = 4;

pub trait Weights<V> {
    fn weight(&self, name: &str) -> Result<&V>;
}

impl Weights<Tensor> for ParamSet {
    fn weight(&self, name: &str) -> Result<&Tensor> {
        self.require(name)
    }
}

impl<V> Weights<V> for BTreeMap<String, V> {
    fn weight(&self, name: &str) -> Result<&V> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }
}

/// Puts every tensor of `params` on the tape as a leaf.
pub fn bind(g: &mut Graph, params: &ParamSet, requires_grad: bool) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), g.leaf(t.clone(), requires_grad)))
        .collect()
}

/// Same as [`bind`] for a set already converted to another element type.
pub fn bind_as<T: Element>(g: &mut Graph<T>, params: &BTreeMap<String, Tensor<T>>) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), g.leaf(t.clone(), true)))
        .collect()
}

pub fn cast_params<T: Element>(params: &ParamSet) -> BTreeMap<String, Tensor<T>> {
    params.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub slope: f32,
    /// Multiplier on the tail conv's He-initialised weights. `0.0` gives a generator
    /// whose output is exactly the nearest-upsampled input.
    pub tail_scale: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_residual_blocks: 4,
            slope: 0.2,
            tail_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::invalid("generator needs at least 4 channels"));
        }
        if self.n_residual_blocks < 1 {
            return Err(Error::invalid("generator needs at least one residual block"));
        }
        check_slope(self.slope)?;
        if !(self.tail_scale.is_finite() && self.tail_scale >= 0.0) {
            return Err(Error::invalid("tail_scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Layer list as `(name, cout, cin, k)`.
    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let c = self.base_channels;
        let mut v = vec![("gen.head".to_string(), c, 3, 3)];
        for i in 0..self.n_residual_blocks {
            v.push((format!("gen.body.{i}.conv1"), c, c, 3));
            v.push((format!("gen.body.{i}.conv2"), c, c, 3));
        }
        v.push(("gen.up.0".into(), c, c, 3));
        v.push(("gen.up.1".into(), c, c, 3));
        v.push(("gen.tail".into(), 3, c, 3));
        v
    }

    /// Recovers the architecture from a generator `ParamSet`.
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let head = params.require("gen.head.weight")?;
        let blocks = params
            .names()
            .filter(|n| n.starts_with("gen.body.") && n.ends_with(".conv1.weight"))
            .count();
        let slope = match params.meta("gen.slope") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::invalid(format!("bad gen.slope `{s}`")))?,
            None => 0.2,
        };
        let cfg = Self {
            base_channels: head.shape()[0],
            n_residual_blocks: blocks,
            slope,
            tail_scale: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_slope(slope: f32) -> Result<()> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::invalid(format!("activation slope {slope} not in [0,1)")));
    }
    Ok(())
}

fn he_conv(
    params: &mut ParamSet,
    name: &str,
    (cout, cin, k): (usize, usize, usize),
    slope: f32,
    gain: f32,
    seed: u64,
    index: u64,
) {
    let fan_in = (cin * k * k) as f64;
    let std = (2.0 / ((1.0 + (slope as f64).powi(2)) * fan_in)).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut r = rng::stream(seed, "init", index);
    let w = Tensor::from_fn([cout, cin, k, k], |_| normal.sample(&mut r) as f32 * gain);
    params.insert(format!("{name}.weight"), w);
    params.insert(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let layers = cfg.layers();
    let last = layers.len() - 1;
    for (i, (name, cout, cin, k)) in layers.into_iter().enumerate() {
        let gain = if i == last { cfg.tail_scale } else { 1.0 };
        he_conv(&mut p, &name, (cout, cin, k), cfg.slope, gain, seed, i as u64);
    }
    p.set_meta("arch", "generator");
    p.set_meta("gen.base_channels", cfg.base_channels.to_string());
    p.set_meta("gen.blocks", cfg.n_residual_blocks.to_string());
    p.set_meta("gen.slope", format!("{:?}", cfg.slope));
    p.set_meta("init.seed", seed.to_string());
    Ok(p)
}

/// Closed-form parameter count.
pub fn generator_param_count(cfg: &GeneratorConfig) -> usize {
    cfg.layers()
        .iter()
        .map(|&(_, cout, cin, k)| cout * cin * k * k + cout)
        .sum()
}

fn conv<T: Element, E: Exec<T>>(
    ex: &mut E,
    w: &impl Weights<E::Value>,
    name: &str,
    x: &E::Value,
    stride: usize,
    pad: usize,
) -> Result<E::Value> {
    let k = w.weight(&format!("{name}.weight"))?;
    let b = w.weight(&format!("{name}.bias"))?;
    ex.conv2d(x, k, b, stride, pad)
}

/// `lr: (N,3,h,w)` to `(N,3,4h,4w)`.
pub fn generator_forward_with<T: Element, E: Exec<T>>(
    ex: &mut E,
    cfg: &GeneratorConfig,
    w: &impl Weights<E::Value>,
    lr: &E::Value,
) -> Result<E::Value> {
    let [_, c, h, wd] = ex.shape(lr);
    if c != 3 {
        return Err(Error::invalid(format!("generator expects 3 input channels, got {c}")));
    }
    if h < 4 || wd < 4 {
        return Err(Error::invalid(format!("generator input {h}x{wd} smaller than 4x4")));
    }
    let slope = T::of(cfg.slope as f64);
    let head = conv(ex, w, "gen.head", lr, 1, 1)?;
    let mut x = ex.leaky_relu(&head, slope)?;
    for i in 0..cfg.n_residual_blocks {
        let y = conv(ex, w, &format!("gen.body.{i}.conv1"), &x, 1, 1)?;
        let y = ex.leaky_relu(&y, slope)?;
        let y = conv(ex, w, &format!("gen.body.{i}.conv2"), &y, 1, 1)?;
        x = ex.add(&x, &y)?;
    }
    for i in 0..2 {
        let u = ex.resize_nearest(&x, 2, Resize::Up)?;
        let u = conv(ex, w, &format!("gen.up.{i}"), &u, 1, 1)?;
        x = ex.leaky_relu(&u, slope)?;
    }
    let tail = conv(ex, w, "gen.tail", &x, 1, 1)?;
    let skip = ex.resize_nearest(lr, SCALE, Resize::Up)?;
    ex.add(&tail, &skip)
}

pub fn generator_forward(params: &ParamSet, lr: &Tensor) -> Result<Tensor> {
    let cfg = GeneratorConfig::from_params(params)?;
    generator_forward_with(&mut Eager, &cfg, params, lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// 3 for the unconditional discriminator, 4 for image + blur mask.
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub slope: f32,
}

impl DiscriminatorConfig {
    pub fn unconditional() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            n_downsamples: 2,
            slope: 0.2,
        }
    }

    pub fn conditional() -> Self {
        Self {
            in_channels: 4,
            ..Self::unconditional()
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.in_channels == 4
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 3 | 4) {
            return Err(Error::invalid("discriminator input channels must be 3 or 4"));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("discriminator needs at least one channel"));
        }
        check_slope(self.slope)
    }

    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let b = self.base_channels;
        let mut v = vec![("disc.in".to_string(), b, self.in_channels, 3)];
        let mut c = b;
        for i in 0..self.n_downsamples {
            v.push((format!("disc.down.{i}"), c * 2, c, 4));
            c *= 2;
        }
        v.push(("disc.out".into(), 1, c, 3));
        v
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let first = params.require("disc.in.weight")?;
        let n_downsamples = params
            .names()
            .filter(|n| n.starts_with("disc.down.") && n.ends_with(".weight"))
            .count();
        let slope = match params.meta("disc.slope") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::invalid(format!("bad disc.slope `{s}`")))?,
            None => 0.2,
        };
        let cfg = Self {
            in_channels: first.shape()[1],
            base_channels: first.shape()[0],
            n_downsamples,
            slope,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    for (i, (name, cout, cin, k)) in cfg.layers().into_iter().enumerate() {
        he_conv(&mut p, &name, (cout, cin, k), cfg.slope, 1.0, seed, 1000 + i as u64);
    }
    p.set_meta("arch", "discriminator");
    p.set_meta("disc.in_channels", cfg.in_channels.to_string());
    p.set_meta("disc.base_channels", cfg.base_channels.to_string());
    p.set_meta("disc.downsamples", cfg.n_downsamples.to_string());
    p.set_meta("disc.slope", format!("{:?}", cfg.slope));
    p.set_meta("init.seed", seed.to_string());
    Ok(p)
}

/// Patch logits `(N,1,H/2^d,W/2^d)`. `mask` must be given exactly when the
/// discriminator is conditional.
pub fn discriminator_forward_with<T: Element, E: Exec<T>>(
    ex: &mut E,
    cfg: &DiscriminatorConfig,
    w: &impl Weights<E::Value>,
    image: &E::Value,
    mask: Option<&E::Value>,
) -> Result<E::Value> {
    let input = match (cfg.is_conditional(), mask) {
        (true, Some(m)) => {
            if ex.shape(m)[1] != 1 {
                return Err(Error::invalid("blur mask must have one channel"));
            }
            ex.concat_channels(image, m)?
        }
        (false, None) => image.clone(),
        (true, None) => return Err(Error::invalid("conditional discriminator needs a mask")),
        (false, Some(_)) => {
            return Err(Error::invalid("unconditional discriminator does not take a mask"))
        }
    };
    let slope = T::of(cfg.slope as f64);
    let x = conv(ex, w, "disc.in", &input, 1, 1)?;
    let mut x = ex.leaky_relu(&x, slope)?;
    for i in 0..cfg.n_downsamples {
        let y = conv(ex, w, &format!("disc.down.{i}"), &x, 2, 1)?;
        x = ex.leaky_relu(&y, slope)?;
    }
    conv(ex, w, "disc.out", &x, 1, 1)
}

pub fn discriminator_forward(params: &ParamSet, image: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let cfg = DiscriminatorConfig::from_params(params)?;
    discriminator_forward_with(&mut Eager, &cfg, params, image, mask)
}
