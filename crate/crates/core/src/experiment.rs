//! Seeded end-to-end training runs with a held-out L1 probe.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::config::RunConfig;
use crate::dataset::{DataSplits, PatchSource};
use crate::degrade::{self, DegradationConfig};
use crate::error::{Error, Result};
use crate::fusion::{final_fuse, CrossFusion};
use crate::models::generator_forward;
use crate::train::{init_branches, run_dual_branch, BranchState, NoFusion, Probe, RunLog};
use crate::tensor::Tensor;

/// Side of the centre crop taken from each held-out image.
pub const HELDOUT_CROP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutL1 {
    pub iteration: u64,
    pub general: f64,
    pub blur: f64,
}

/// Mean absolute error of each branch generator on a fixed held-out batch.
pub struct HeldoutProbe {
    pub lr: Tensor,
    pub hr: Tensor,
    pub early_window: u64,
    pub final_iteration: u64,
    pub records: Vec<HeldoutL1>,
}

impl HeldoutProbe {
    /// Centre-crops each held-out image and degrades it with a per-image
    /// stream, so the LR inputs never change during a run.
    pub fn new(heldout: &[(Tensor, Tensor)], deg: &DegradationConfig, early_window: u64, final_iteration: u64) -> Result<Self> {
        if heldout.is_empty() {
            return Err(Error::invalid("held-out set is empty"));
        }
        let mut hrs = Vec::new();
        let mut lrs = Vec::new();
        for (i, (hr, _)) in heldout.iter().enumerate() {
            let [_, _, h, w] = hr.shape();
            if h < HELDOUT_CROP || w < HELDOUT_CROP {
                return Err(Error::invalid(format!("held-out image {i} smaller than {HELDOUT_CROP}")));
            }
            let crop = hr.crop((h - HELDOUT_CROP) / 2, (w - HELDOUT_CROP) / 2, HELDOUT_CROP, HELDOUT_CROP)?;
            lrs.push(degrade::degrade_sample(&crop, deg, &format!("heldout-{i}"))?);
            hrs.push(crop);
        }
        Ok(Self {
            lr: Tensor::stack(&lrs)?,
            hr: Tensor::stack(&hrs)?,
            early_window,
            final_iteration,
            records: Vec::new(),
        })
    }

    pub fn l1(&self, generator: &ParamSet) -> Result<f64> {
        let sr = generator_forward(generator, &self.lr)?;
        let sum: f64 = sr
            .data()
            .iter()
            .zip(self.hr.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(sum / sr.len() as f64)
    }

    /// Mean blur-branch L1 over probe records with `iteration <= upto`.
    pub fn early_mean(&self, upto: u64) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.iteration <= upto).map(|r| r.blur).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn last(&self) -> Option<HeldoutL1> {
        self.records.last().copied()
    }
}

impl Probe for HeldoutProbe {
    fn is_due(&self, iteration: u64) -> bool {
        iteration <= self.early_window || iteration == self.final_iteration
    }

    fn observe(&mut self, iteration: u64, general: &BranchState, blur: &BranchState) -> Result<()> {
        self.records.push(HeldoutL1 {
            iteration,
            general: self.l1(&general.generator)?,
            blur: self.l1(&blur.generator)?,
        });
        Ok(())
    }
}

pub struct RunOutcome {
    pub general: BranchState,
    pub blur: BranchState,
    pub log: RunLog,
    /// Absent when there is no held-out data.
    pub probe: Option<HeldoutProbe>,
}

impl RunOutcome {
    pub fn fused(&self) -> Result<ParamSet> {
        final_fuse(&self.general.generator, &self.blur.generator)
    }
}

/// Held-out probe plus periodic branch checkpoints.
struct RunProbes<'a> {
    heldout: Option<HeldoutProbe>,
    checkpoints: Option<(&'a Path, u64)>,
}

impl RunProbes<'_> {
    fn checkpoint_due(&self, iteration: u64) -> bool {
        self.checkpoints.is_some_and(|(_, every)| every > 0 && iteration % every == 0)
    }
}

impl Probe for RunProbes<'_> {
    fn is_due(&self, iteration: u64) -> bool {
        self.heldout.as_ref().is_some_and(|p| p.is_due(iteration)) || self.checkpoint_due(iteration)
    }

    fn observe(&mut self, iteration: u64, general: &BranchState, blur: &BranchState) -> Result<()> {
        if let Some(p) = self.heldout.as_mut().filter(|p| p.is_due(iteration)) {
            p.observe(iteration, general, blur)?;
        }
        if self.checkpoint_due(iteration) {
            let (dir, _) = self.checkpoints.expect("checked above");
            let dir = dir.join(format!("iter_{iteration:06}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            save_branch(&dir, general)?;
            save_branch(&dir, blur)?;
        }
        Ok(())
    }
}

/// Writes `{branch}.ckpt` (generator) and `{branch}_disc.ckpt`.
pub fn save_branch(dir: &Path, state: &BranchState) -> Result<()> {
    let name = state.branch.as_str();
    state.generator.save(dir.join(format!("{name}.ckpt")))?;
    state.discriminator.save(dir.join(format!("{name}_disc.ckpt")))
}

/// Trains both branches from scratch on `data`. Data streams, initial
/// weights and degradations all derive from `cfg.train.seed`.
pub fn run_training(cfg: &RunConfig, data: &DataSplits) -> Result<RunOutcome> {
    run_training_in(cfg, data, None)
}

/// As [`run_training`], also saving branch checkpoints under
/// `checkpoint_dir` every `train.checkpoint_every` iterations.
pub fn run_training_in(cfg: &RunConfig, data: &DataSplits, checkpoint_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let patch = cfg.train.hr_patch;
    let mut general_data = PatchSource::new(
        data.general.iter().map(|(h, _)| (h.clone(), None)).collect(),
        patch,
        cfg.degradation.clone(),
        seed,
        "general",
    )?;
    let mut blur_data = PatchSource::new(
        data.blur.iter().map(|(h, m)| (h.clone(), Some(m.clone()))).collect(),
        patch,
        cfg.degradation.clone(),
        seed,
        "blur",
    )?;
    let d = &cfg.discriminator;
    let (mut general, mut blur) = init_branches(&cfg.model, d.base_channels, d.n_downsamples, seed)?;
    let heldout = if data.heldout.is_empty() {
        None
    } else {
        Some(HeldoutProbe::new(&data.heldout, &cfg.degradation, cfg.probe.early_window, cfg.train.total_iters)?)
    };
    let mut probes = RunProbes {
        heldout,
        checkpoints: checkpoint_dir.map(|p| (p, cfg.train.checkpoint_every)),
    };
    let log = if cfg.fusion.enabled {
        let mut hook = CrossFusion::new(cfg.fusion.clone())?;
        run_dual_branch(&cfg.train, &mut general, &mut blur, &mut general_data, &mut blur_data, &mut hook, Some(&mut probes))?
    } else {
        run_dual_branch(&cfg.train, &mut general, &mut blur, &mut general_data, &mut blur_data, &mut NoFusion, Some(&mut probes))?
    };
    Ok(RunOutcome { general, blur, log, probe: probes.heldout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::toy_set;

    #[test]
    fn short_run_probes_every_early_iteration() {
        let set = toy_set(4, 2, 64, 3).unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.total_iters = 6;
        cfg.train.batch_size = 2;
        cfg.train.hr_patch = 16;
        cfg.fusion.k = 3;
        cfg.probe.early_window = 3;
        let run = run_training(&cfg, &set).unwrap();
        let its: Vec<u64> = run.probe.as_ref().unwrap().records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, [1, 2, 3, 6]);
        assert_eq!(run.log.fusions.len(), 2);
        assert_eq!(run.log.losses.len(), 12);
        assert!(run.fused().unwrap().all_finite());
    }

    #[test]
    fn periodic_checkpoints() {
        let set = toy_set(2, 0, 32, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.total_iters = 4;
        cfg.train.batch_size = 2;
        cfg.train.hr_patch = 16;
        cfg.train.checkpoint_every = 2;
        let run = run_training_in(&cfg, &set, Some(dir.path())).unwrap();
        assert!(run.probe.is_none());
        let last = ParamSet::load(dir.path().join("iter_000004/blur.ckpt")).unwrap();
        assert_eq!(last, run.blur.generator);
        assert!(dir.path().join("iter_000002/general_disc.ckpt").is_file());
    }
}
