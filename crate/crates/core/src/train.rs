//! Dual-branch adversarial training: a general branch with an
//! unconditional patch discriminator and a blur branch whose discriminator
//! also sees the blur mask. Each branch alternates one D update and one G
//! update with Adam.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::dataset::{Batch, PatchSource};
use crate::error::{Error, Result};
use crate::fusion::FusionLog;
use crate::models::{
    bind, build_discriminator, build_generator, discriminator_forward_with, generator_forward,
    generator_forward_with, DiscriminatorConfig, GeneratorConfig,
};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Mixed batch size; half goes to each branch.
    pub batch_size: usize,
    pub hr_patch: usize,
    pub total_iters: u64,
    pub adv_weight: f64,
    pub l1_weight: f64,
    /// `max(0, .)` on both hinge terms of the discriminator loss.
    pub clamp_hinge: bool,
    pub seed: u64,
    /// Run the two branches on separate threads between fusion barriers.
    pub parallel: bool,
    /// Save branch checkpoints every N iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 8,
            hr_patch: 64,
            total_iters: 2000,
            adv_weight: 0.05,
            l1_weight: 1.0,
            clamp_hinge: true,
            seed: 0,
            parallel: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam betas must lie in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::invalid("batch_size must be even and at least 2"));
        }
        if self.hr_patch == 0 || self.hr_patch % 4 != 0 {
            return Err(Error::invalid("hr_patch must be a positive multiple of 4"));
        }
        if !(self.adv_weight >= 0.0 && self.l1_weight >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moments aligned with a `ParamSet`, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam. Non-finite gradients leave everything untouched and
/// return a numeric error.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    params.check_aligned(&state.v)?;
    if !grads.all_finite() {
        log::warn!("non-finite gradient at Adam step {}; step skipped", state.t + 1);
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let g = grads.require(name)?.data();
        let m = state.m.get_mut(name).expect("aligned").data_mut();
        let v = state.v.get_mut(name).expect("aligned").data_mut();
        let w = params.get_mut(name).expect("aligned").data_mut();
        for i in 0..w.len() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            w[i] = (w[i] as f64 - step) as f32;
        }
    }
    state.t = t;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    General,
    Blur,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::General => "general",
            Branch::Blur => "blur",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub branch: Branch,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    pub iteration: u64,
}

impl BranchState {
    pub fn new(branch: Branch, generator: ParamSet, discriminator: ParamSet) -> Result<Self> {
        let dcfg = DiscriminatorConfig::from_params(&discriminator)?;
        if dcfg.is_conditional() != (branch == Branch::Blur) {
            return Err(Error::invalid(format!(
                "{} branch needs a {} discriminator",
                branch.as_str(),
                if branch == Branch::Blur { "conditional" } else { "unconditional" }
            )));
        }
        GeneratorConfig::from_params(&generator)?;
        Ok(Self {
            branch,
            g_opt: AdamState::new(&generator),
            d_opt: AdamState::new(&discriminator),
            generator,
            discriminator,
            iteration: 0,
        })
    }
}

/// Both branches start from the same generator; each gets its own
/// discriminator.
pub fn init_branches(
    gen_cfg: &GeneratorConfig,
    disc_base: usize,
    disc_downsamples: usize,
    seed: u64,
) -> Result<(BranchState, BranchState)> {
    let g = build_generator(gen_cfg, rng::derive_seed(seed, "init/generator", 0))?;
    let dcfg = |in_channels| DiscriminatorConfig {
        in_channels,
        base_channels: disc_base,
        n_downsamples: disc_downsamples,
        slope: gen_cfg.slope,
    };
    let dg = build_discriminator(&dcfg(3), rng::derive_seed(seed, "init/disc-general", 0))?;
    let db = build_discriminator(&dcfg(4), rng::derive_seed(seed, "init/disc-blur", 0))?;
    Ok((
        BranchState::new(Branch::General, g.clone(), dg)?,
        BranchState::new(Branch::Blur, g, db)?,
    ))
}

/// `mean h(1 - real) + mean h(1 + fake)` on the tape, `h = max(0,.)` when
/// clamped and the identity otherwise.
pub fn hinge_d_loss<T: Element>(g: &mut Graph<T>, real: Var, fake: Var, clamp: bool) -> Result<Var> {
    if g.value(real).shape() != g.value(fake).shape() {
        return Err(Error::invalid("real and fake logits differ in shape"));
    }
    let mut a = g.affine(real, -T::one(), T::one());
    let mut b = g.affine(fake, T::one(), T::one());
    if clamp {
        a = g.relu(a)?;
        b = g.relu(b)?;
    }
    let ma = g.mean(a)?;
    let mb = g.mean(b)?;
    g.add(ma, mb)
}

/// Discriminator loss evaluated directly on logits.
pub fn d_loss_from_logits(real: &Tensor, fake: &Tensor, clamp: bool) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let r = g.leaf(real.clone(), false);
    let f = g.leaf(fake.clone(), false);
    let l = hinge_d_loss(&mut g, r, f, clamp)?;
    Ok(g.value(l).item()? as f64)
}

fn check_pair(hr: &Tensor, sr: &Tensor, mask: Option<&Tensor>) -> Result<()> {
    if hr.shape() != sr.shape() {
        return Err(Error::invalid(format!("hr {:?} vs sr {:?}", hr.shape(), sr.shape())));
    }
    if let Some(m) = mask {
        let [n, _, h, w] = hr.shape();
        if m.shape() != [n, 1, h, w] {
            return Err(Error::invalid(format!("mask {:?} does not match image {:?}", m.shape(), hr.shape())));
        }
    }
    Ok(())
}

fn d_loss_eager(d_params: &ParamSet, hr: &Tensor, sr: &Tensor, mask: Option<&Tensor>, clamp: bool) -> Result<f64> {
    check_pair(hr, sr, mask)?;
    let cfg = DiscriminatorConfig::from_params(d_params)?;
    let mut g = Graph::<f32>::new();
    let w = bind(&mut g, d_params, false);
    let h = g.leaf(hr.clone(), false);
    let s = g.leaf(sr.clone(), false);
    let m = mask.map(|m| g.leaf(m.clone(), false));
    let real = discriminator_forward_with(&mut g, &cfg, &w, &h, m.as_ref())?;
    let fake = discriminator_forward_with(&mut g, &cfg, &w, &s, m.as_ref())?;
    let l = hinge_d_loss(&mut g, real, fake, clamp)?;
    Ok(g.value(l).item()? as f64)
}

/// Blur-branch discriminator loss; the mask is at HR resolution.
pub fn conditional_d_loss(d_params: &ParamSet, hr: &Tensor, sr: &Tensor, mask: &Tensor, clamp: bool) -> Result<f64> {
    d_loss_eager(d_params, hr, sr, Some(mask), clamp)
}

pub fn unconditional_d_loss(d_params: &ParamSet, hr: &Tensor, sr: &Tensor, clamp: bool) -> Result<f64> {
    d_loss_eager(d_params, hr, sr, None, clamp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GenLoss {
    pub total: f64,
    pub l1: f64,
    pub adv: f64,
}

/// Generator objective on the tape: `l1_weight * mean|sr - hr| +
/// adv_weight * (-mean D(sr))`. Returns `(total, l1, adv)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_graph<T: Element>(
    g: &mut Graph<T>,
    dcfg: &DiscriminatorConfig,
    d_vars: &BTreeMap<String, Var>,
    sr: Var,
    hr: Var,
    mask: Option<Var>,
    l1_weight: f64,
    adv_weight: f64,
) -> Result<(Var, Var, Var)> {
    let diff = g.sub(sr, hr)?;
    let abs = g.abs(diff);
    let l1 = g.mean(abs)?;
    let logits = discriminator_forward_with(g, dcfg, d_vars, &sr, mask.as_ref())?;
    let m = g.mean(logits)?;
    let adv = g.affine(m, -T::one(), T::zero());
    let a = g.affine(l1, T::of(l1_weight), T::zero());
    let b = g.affine(adv, T::of(adv_weight), T::zero());
    let total = g.add(a, b)?;
    Ok((total, l1, adv))
}

pub fn generator_loss(
    g_out: &Tensor,
    hr: &Tensor,
    d_params: &ParamSet,
    mask: Option<&Tensor>,
    l1_weight: f64,
    adv_weight: f64,
) -> Result<GenLoss> {
    check_pair(hr, g_out, mask)?;
    let dcfg = DiscriminatorConfig::from_params(d_params)?;
    let mut g = Graph::<f32>::new();
    let w = bind(&mut g, d_params, false);
    let s = g.leaf(g_out.clone(), false);
    let h = g.leaf(hr.clone(), false);
    let m = mask.map(|m| g.leaf(m.clone(), false));
    let (t, l, a) = generator_loss_graph(&mut g, &dcfg, &w, s, h, m, l1_weight, adv_weight)?;
    Ok(GenLoss {
        total: g.value(t).item()? as f64,
        l1: g.value(l).item()? as f64,
        adv: g.value(a).item()? as f64,
    })
}

fn collect_grads(g: &Graph, vars: &BTreeMap<String, Var>, like: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in like.iter() {
        let grad = g.grad(vars[name]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        out.insert(name.clone(), grad);
    }
    out
}

fn check_batch(state: &BranchState, batch: &Batch) -> Result<()> {
    match (state.branch, &batch.mask) {
        (Branch::General, Some(_)) => Err(Error::invalid("general branch does not take blur masks")),
        (Branch::Blur, None) => Err(Error::invalid("blur branch needs blur masks")),
        _ => Ok(()),
    }
}

/// One discriminator update on a detached generator output.
pub fn d_step(state: &mut BranchState, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    check_batch(state, batch)?;
    let sr = generator_forward(&state.generator, &batch.lr)?;
    check_pair(&batch.hr, &sr, batch.mask.as_ref())?;
    let dcfg = DiscriminatorConfig::from_params(&state.discriminator)?;
    let mut g = Graph::<f32>::new();
    let w = bind(&mut g, &state.discriminator, true);
    let h = g.leaf(batch.hr.clone(), false);
    let s = g.leaf(sr, false);
    let m = batch.mask.as_ref().map(|m| g.leaf(m.clone(), false));
    let real = discriminator_forward_with(&mut g, &dcfg, &w, &h, m.as_ref())?;
    let fake = discriminator_forward_with(&mut g, &dcfg, &w, &s, m.as_ref())?;
    let loss = hinge_d_loss(&mut g, real, fake, cfg.clamp_hinge)?;
    let value = g.value(loss).item()? as f64;
    g.backward(loss)?;
    let grads = collect_grads(&g, &w, &state.discriminator);
    drop(g);
    adam_step(&mut state.discriminator, &grads, &mut state.d_opt, &cfg.adam())?;
    Ok(value)
}

/// One generator update against the current discriminator.
pub fn g_step(state: &mut BranchState, batch: &Batch, cfg: &TrainConfig) -> Result<GenLoss> {
    check_batch(state, batch)?;
    let gcfg = GeneratorConfig::from_params(&state.generator)?;
    let dcfg = DiscriminatorConfig::from_params(&state.discriminator)?;
    let mut g = Graph::<f32>::new();
    let gw = bind(&mut g, &state.generator, true);
    let dw = bind(&mut g, &state.discriminator, false);
    let lr = g.leaf(batch.lr.clone(), false);
    let hr = g.leaf(batch.hr.clone(), false);
    let m = batch.mask.as_ref().map(|m| g.leaf(m.clone(), false));
    let sr = generator_forward_with(&mut g, &gcfg, &gw, &lr)?;
    if g.value(sr).shape() != batch.hr.shape() {
        return Err(Error::invalid("generator output does not match HR batch"));
    }
    let (total, l1, adv) = generator_loss_graph(&mut g, &dcfg, &dw, sr, hr, m, cfg.l1_weight, cfg.adv_weight)?;
    let loss = GenLoss {
        total: g.value(total).item()? as f64,
        l1: g.value(l1).item()? as f64,
        adv: g.value(adv).item()? as f64,
    };
    g.backward(total)?;
    let grads = collect_grads(&g, &gw, &state.generator);
    drop(g);
    adam_step(&mut state.generator, &grads, &mut state.g_opt, &cfg.adam())?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub branch: Branch,
    pub d_loss: f64,
    pub g_l1: f64,
    pub g_adv: f64,
    pub g_total: f64,
}

/// D update then G update; bumps the branch iteration.
pub fn train_step(state: &mut BranchState, batch: &Batch, cfg: &TrainConfig) -> Result<LossRecord> {
    let d_loss = d_step(state, batch, cfg)?;
    let gl = g_step(state, batch, cfg)?;
    state.iteration += 1;
    Ok(LossRecord {
        iteration: state.iteration,
        branch: state.branch,
        d_loss,
        g_l1: gl.l1,
        g_adv: gl.adv,
        g_total: gl.total,
    })
}

/// Alternates samples between the two branches so any window of `2m`
/// consecutive routed samples sends exactly `m` to each.
#[derive(Clone, Debug, Default)]
pub struct EqualMixRouter {
    routed: u64,
}

impl EqualMixRouter {
    pub fn route(&mut self) -> Branch {
        let b = if self.routed % 2 == 0 { Branch::General } else { Branch::Blur };
        self.routed += 1;
        b
    }

    /// Routes a mixed batch and returns per-branch counts `(general, blur)`.
    pub fn split(&mut self, batch_size: usize) -> (usize, usize) {
        let mut counts = (0, 0);
        for _ in 0..batch_size {
            match self.route() {
                Branch::General => counts.0 += 1,
                Branch::Blur => counts.1 += 1,
            }
        }
        counts
    }
}

/// Cross-branch hook run after both branches finish an iteration.
pub trait FusionHook {
    /// Iterations at which the hook may act; parallel runs synchronize there.
    fn is_barrier(&self, iteration: u64) -> bool;

    fn after_iteration(
        &mut self,
        iteration: u64,
        general: &mut BranchState,
        blur: &mut BranchState,
    ) -> Result<Option<FusionLog>>;
}

/// Branches never exchange anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoFusion;

impl FusionHook for NoFusion {
    fn is_barrier(&self, _: u64) -> bool {
        false
    }

    fn after_iteration(&mut self, _: u64, _: &mut BranchState, _: &mut BranchState) -> Result<Option<FusionLog>> {
        Ok(None)
    }
}

/// Observer called with both branch states after selected iterations (and
/// after the fusion hook for that iteration).
pub trait Probe {
    fn is_due(&self, iteration: u64) -> bool;
    fn observe(&mut self, iteration: u64, general: &BranchState, blur: &BranchState) -> Result<()>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub losses: Vec<LossRecord>,
    pub fusions: Vec<FusionLog>,
}

fn branch_iteration(
    state: &mut BranchState,
    data: &mut PatchSource,
    n: usize,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let mut batch = data.next_batch(n)?;
    if state.branch == Branch::General {
        batch.mask = None;
    }
    train_step(state, &batch, cfg)
}

fn run_segment(
    state: &mut BranchState,
    data: &mut PatchSource,
    n: usize,
    cfg: &TrainConfig,
    iters: u64,
) -> Result<Vec<LossRecord>> {
    (0..iters).map(|_| branch_iteration(state, data, n, cfg)).collect()
}

/// Trains both branches for `cfg.total_iters` iterations.
///
/// Each iteration routes one mixed batch, steps the general then the blur
/// branch, runs the fusion hook, then the probe. With `cfg.parallel` the
/// branches advance on two threads between barriers (fusion or probe
/// iterations); results are identical to the sequential order.
pub fn run_dual_branch(
    cfg: &TrainConfig,
    general: &mut BranchState,
    blur: &mut BranchState,
    general_data: &mut PatchSource,
    blur_data: &mut PatchSource,
    hook: &mut dyn FusionHook,
    mut probe: Option<&mut dyn Probe>,
) -> Result<RunLog> {
    cfg.validate()?;
    if general.branch != Branch::General || blur.branch != Branch::Blur {
        return Err(Error::invalid("branch states passed in the wrong order"));
    }
    if !blur_data.has_masks() {
        return Err(Error::invalid("blur data must carry masks"));
    }
    let mut router = EqualMixRouter::default();
    let mut log = RunLog::default();
    let start = general.iteration;
    if blur.iteration != start {
        return Err(Error::invalid("branches are at different iterations"));
    }
    let end = start + cfg.total_iters;
    let mut it = start;
    while it < end {
        let seg_end = if cfg.parallel {
            let mut e = it + 1;
            while e < end && !hook.is_barrier(e) && !probe.as_ref().is_some_and(|p| p.is_due(e)) {
                e += 1;
            }
            e
        } else {
            it + 1
        };
        let steps = seg_end - it;
        let mut n_general = 0;
        let mut n_blur = 0;
        for _ in 0..steps {
            let (a, b) = router.split(cfg.batch_size);
            if a != b {
                return Err(Error::invalid("router produced an unequal split"));
            }
            n_general = a;
            n_blur = b;
        }
        let (gl, bl) = if cfg.parallel && steps > 0 {
            std::thread::scope(|s| {
                let hg = s.spawn(|| run_segment(general, general_data, n_general, cfg, steps));
                let bl = run_segment(blur, blur_data, n_blur, cfg, steps);
                let gl = hg.join().expect("general branch thread panicked");
                (gl, bl)
            })
        } else {
            (
                run_segment(general, general_data, n_general, cfg, steps),
                run_segment(blur, blur_data, n_blur, cfg, steps),
            )
        };
        let (gl, bl) = (gl?, bl?);
        for (a, b) in gl.into_iter().zip(bl) {
            log.losses.push(a);
            log.losses.push(b);
        }
        it = seg_end;
        if let Some(f) = hook.after_iteration(it, general, blur)? {
            log.fusions.push(f);
        }
        if let Some(p) = probe.as_mut() {
            if p.is_due(it) {
                p.observe(it, general, blur)?;
            }
        }
    }
    Ok(log)
}

pub fn write_loss_csv(path: &Path, rows: &[LossRecord]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_fusion_csv(path: &Path, rows: &[FusionLog]) -> Result<()> {
    write_csv(path, rows)
}

/// Header plus one line per row; an empty slice gives an empty file.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::checkpoint::write_atomic(path, &bytes)
}
