//! Finite-difference checks of every differentiable op, plus the composite
//! generator, discriminator and hinge losses, run in f64.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::models::{
    build_discriminator, build_generator, cast_params, discriminator_forward_with, generator_forward_with,
    DiscriminatorConfig, GeneratorConfig,
};
use crate::rng::{self, Rng};
use crate::tensor::{grad_check, grad_check_at};
use crate::tensor::{Graph, Resize, Shape, Tensor, Var};
use crate::train::hinge_d_loss;

pub const TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-3;
/// Step for whole networks. Their internal activations cannot be kept away
/// from kinks by construction, so the step must be small enough that a
/// kink almost never falls inside it.
pub const NETWORK_EPSILON: f64 = 1e-6;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: &'static str,
    pub seed: u64,
    pub rel_error: f64,
    pub passed: bool,
}

fn uniform(shape: Shape, r: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Values at least `gap` away from each kink, so central differences never
/// straddle one.
fn away_from(shape: Shape, kinks: &[f64], gap: f64, r: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = r.random_range(-2.0..2.0);
        if kinks.iter().all(|k| (v - k).abs() >= gap) {
            break v;
        }
    })
}

type Case = (&'static str, Box<dyn Fn(&mut Rng) -> Result<f64>>);

fn simple(name: &'static str, shapes: &'static [Shape], kinks: &'static [f64], op: fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Case {
    (
        name,
        Box::new(move |r| {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|&s| if kinks.is_empty() { uniform(s, r) } else { away_from(s, kinks, 0.01, r) })
                .collect();
            grad_check(op, &inputs, EPSILON)
        }),
    )
}

fn cases() -> Vec<Case> {
    const S: Shape = [2, 2, 4, 4];
    vec![
        simple("conv2d_3x3_s1_p1", &[[2, 3, 5, 5], [4, 3, 3, 3], [4, 1, 1, 1]], &[], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        simple("conv2d_4x4_s2_p1", &[[1, 2, 6, 6], [3, 2, 4, 4], [3, 1, 1, 1]], &[], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        simple("conv2d_2x3_s1_p0", &[[1, 2, 4, 5], [2, 2, 2, 3], [2, 1, 1, 1]], &[], |g, v| g.conv2d(v[0], v[1], v[2], 1, 0)),
        simple("leaky_relu", &[S], &[0.0], |g, v| g.leaky_relu(v[0], 0.2)),
        simple("relu", &[S], &[0.0], |g, v| g.relu(v[0])),
        simple("abs", &[S], &[0.0], |g, v| Ok(g.abs(v[0]))),
        simple("affine", &[S], &[], |g, v| Ok(g.affine(v[0], 1.7, -0.3))),
        simple("resize_nearest_up", &[[1, 2, 3, 4]], &[], |g, v| g.resize_nearest(v[0], 2, Resize::Up)),
        simple("resize_nearest_down", &[[1, 2, 4, 8]], &[], |g, v| g.resize_nearest(v[0], 2, Resize::Down)),
        simple("add", &[S, S], &[], |g, v| g.add(v[0], v[1])),
        simple("sub", &[S, S], &[], |g, v| g.sub(v[0], v[1])),
        simple("mul", &[S, S], &[], |g, v| g.mul(v[0], v[1])),
        simple("concat_channels", &[[1, 2, 3, 3], [1, 1, 3, 3]], &[], |g, v| g.concat_channels(v[0], v[1])),
        simple("mean", &[S], &[], |g, v| g.mean(v[0])),
        simple("hinge_d_loss_clamped", &[[1, 1, 4, 4], [1, 1, 4, 4]], &[-1.0, 1.0], |g, v| {
            hinge_d_loss(g, v[0], v[1], true)
        }),
        simple("hinge_d_loss_literal", &[[1, 1, 4, 4], [1, 1, 4, 4]], &[], |g, v| hinge_d_loss(g, v[0], v[1], false)),
        ("generator_forward", Box::new(generator_case)),
        ("discriminator_forward", Box::new(discriminator_case)),
    ]
}

/// Checks the LR input and a sample of weight coordinates of a small
/// generator.
fn generator_case(r: &mut Rng) -> Result<f64> {
    let cfg = GeneratorConfig { base_channels: 4, n_residual_blocks: 1, ..GeneratorConfig::default() };
    let params = cast_params::<f64>(&build_generator(&cfg, r.random())?);
    let names: Vec<String> = params.keys().cloned().collect();
    let lr = uniform([1, 3, 4, 4], r).map(|v| 0.5 + 0.4 * v);
    let mut inputs = vec![lr];
    inputs.extend(params.values().cloned());
    let coords = sampled_coords(&inputs, 48, 64, r);
    grad_check_at(
        |g, v| {
            let w: std::collections::BTreeMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            generator_forward_with(g, &cfg, &w, &v[0])
        },
        &inputs,
        &coords,
        NETWORK_EPSILON,
    )
}

fn discriminator_case(r: &mut Rng) -> Result<f64> {
    let cfg = DiscriminatorConfig { base_channels: 4, ..DiscriminatorConfig::conditional() };
    let params = cast_params::<f64>(&build_discriminator(&cfg, r.random())?);
    let image = uniform([1, 3, 8, 8], r).map(|v| 0.5 + 0.4 * v);
    let mask = Tensor::from_fn([1, 1, 8, 8], |[_, _, _, x]| if x < 4 { 0.0 } else { 1.0 });
    let names: Vec<String> = params.keys().cloned().collect();
    let mut inputs = vec![image, mask];
    inputs.extend(params.values().cloned());
    let mut coords: Vec<(usize, usize)> = (0..inputs[0].len()).map(|j| (0, j)).collect();
    coords.extend(sampled_coords(&inputs[1..], 0, 64, r).into_iter().map(|(i, j)| (i + 1, j)));
    grad_check_at(
        |g, v| {
            let w: std::collections::BTreeMap<String, Var> = names.iter().cloned().zip(v[2..].iter().copied()).collect();
            discriminator_forward_with(g, &cfg, &w, &v[0], Some(&v[1]))
        },
        &inputs,
        &coords,
        NETWORK_EPSILON,
    )
}

/// Every coordinate of input 0 (up to `first`), plus `extra` random
/// coordinates drawn from the remaining inputs.
fn sampled_coords(inputs: &[Tensor<f64>], first: usize, extra: usize, r: &mut Rng) -> Vec<(usize, usize)> {
    let mut coords: Vec<(usize, usize)> = (0..first.min(inputs[0].len())).map(|j| (0, j)).collect();
    if inputs.len() > 1 {
        for _ in 0..extra {
            let i = r.random_range(1..inputs.len());
            if !inputs[i].is_empty() {
                coords.push((i, r.random_range(0..inputs[i].len())));
            }
        }
    }
    coords
}

pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every case once per seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (op, case) in cases() {
        for &seed in seeds {
            let mut r = rng::stream(seed, "gradcheck", out.len() as u64);
            let rel_error = case(&mut r)?;
            out.push(CheckResult { op, seed, rel_error, passed: rel_error < TOLERANCE });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let results = run_suite(&[11]).unwrap();
        assert_eq!(results.len(), op_names().len());
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }
}
