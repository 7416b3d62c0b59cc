//! `pbasr` command-line tool and the curation service.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 bad configuration,
//! path, input file or argument, 3 numeric failure at runtime.

pub mod service;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use pbasr_core::checkpoint::{norm, write_atomic, ParamSet};
use pbasr_core::config::RunConfig;
use pbasr_core::dataset::curate::{self, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use pbasr_core::dataset::synth::{toy_set, write_toy_dataset};
use pbasr_core::dataset::{load_mask, load_rgb, save_rgb, Manifest, ReviewState};
use pbasr_core::degrade::{self, DegradationConfig};
use pbasr_core::eval::{disc_loss_map, encode_false_color_png, eval_report, EvalSample, NearestUpscaler, SuperResolver};
use pbasr_core::experiment::{run_training_in, save_branch};
use pbasr_core::fusion::final_fuse;
use pbasr_core::gradsuite;
use pbasr_core::models::DiscriminatorConfig;
use pbasr_core::train::{write_csv, write_fusion_csv, write_loss_csv};
use pbasr_core::Error;

pub const EXIT_GRADCHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pbasr", version, about = "Blur-aware dual-branch super-resolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write LR images for every sample of a manifest.
    Degrade {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose [degradation] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Replace masks with automatic blur-map estimates.
    Estimate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
        /// Also overwrite human-verified and rejected samples.
        #[arg(long)]
        all: bool,
    },
    /// Recount blur fractions and size categories and write stats CSVs.
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (defaults to the manifest's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both branches with periodic cross fusion.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average two generator checkpoints into one.
    Fuse {
        #[arg(long)]
        general: PathBuf,
        #[arg(long)]
        blur: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Region-split PSNR/SSIM/GMSD on a manifest.
    Eval {
        /// Generator checkpoint, or `nearest` for the interpolation baseline.
        #[arg(long)]
        model: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Discriminator checkpoint; renders per-sample loss maps.
        #[arg(long)]
        disc: Option<PathBuf>,
    },
    /// Print tensor names, shapes, norms and metadata.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = gradsuite::DEFAULT_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Serve the curation API (and optionally a UI bundle at `/`).
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides PBASR_PORT; default 8080.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Generate the procedural toy dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        heldout: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::DegenerateInput(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Degrade { manifest, out, config } => degrade_cmd(&manifest, &out, config.as_deref()),
        Command::Estimate { manifest, window, threshold, all } => estimate_cmd(&manifest, window, threshold, all),
        Command::Partition { manifest, out } => partition_cmd(&manifest, out.as_deref()),
        Command::Train { config, out } => train_cmd(&config, &out),
        Command::Fuse { general, blur, out } => {
            let fused = final_fuse(&ParamSet::load(&general)?, &ParamSet::load(&blur)?)?;
            fused.save(&out)?;
            println!("{} {}", out.display(), fused.checksum());
            Ok(())
        }
        Command::Eval { model, manifest, out, config, disc } => {
            eval_cmd(&model, &manifest, &out, config.as_deref(), disc.as_deref())
        }
        Command::Inspect { ckpt } => inspect_cmd(&ckpt),
        Command::Gradcheck { seeds } => gradcheck_cmd(&seeds),
        Command::Serve { manifest, port, ui } => serve_cmd(&manifest, port, ui),
        Command::Synth { out, count, heldout, size, seed } => {
            let set = toy_set(count, heldout, size, seed)?;
            let paths = write_toy_dataset(&out, &set)?;
            for p in [paths.general, paths.blur, paths.heldout] {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, prints any failure to stderr and maps
/// it to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn degrade_cmd(manifest: &Path, out: &Path, config: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let m = Manifest::load(manifest)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    for s in &m.samples {
        let hr = load_rgb(m.hr_path(s))?;
        let [_, _, h, w] = hr.shape();
        let hr = hr.crop(0, 0, h - h % degrade::FACTOR, w - w % degrade::FACTOR)?;
        let lr = degrade::degrade_sample(&hr, &cfg.degradation, &s.id)?;
        save_rgb(out.join(format!("{}.png", s.id)), &lr)?;
    }
    println!("{} LR images in {}", m.samples.len(), out.display());
    Ok(())
}

fn estimate_cmd(manifest: &Path, window: usize, threshold: f32, all: bool) -> CmdResult {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage("threshold must be in [0, 1]"));
    }
    let mut m = Manifest::load(manifest)?;
    let ids: Vec<String> = m
        .samples
        .iter()
        .filter(|s| all || s.review_state == ReviewState::Auto)
        .map(|s| s.id.clone())
        .collect();
    for id in &ids {
        curate::reestimate(&mut m, id, window, threshold)?;
    }
    m.save(manifest)?;
    println!("estimated {} of {} samples", ids.len(), m.samples.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct CategoryRow<'a> {
    id: &'a str,
    blur_fraction: f64,
    size_category: &'static str,
}

#[derive(serde::Serialize)]
struct StatRow<'a> {
    group: &'a str,
    key: &'a str,
    count: usize,
}

fn partition_cmd(manifest: &Path, out: Option<&Path>) -> CmdResult {
    let mut m = Manifest::load(manifest)?;
    let ids: Vec<String> = m.samples.iter().map(|s| s.id.clone()).collect();
    for id in &ids {
        curate::refresh_fraction(&mut m, id)?;
    }
    m.save(manifest)?;
    let rows: Vec<CategoryRow> = m
        .samples
        .iter()
        .map(|s| {
            let f = s.blur_fraction.expect("just refreshed");
            CategoryRow { id: &s.id, blur_fraction: f, size_category: s.size_category().expect("has fraction").as_str() }
        })
        .collect();
    for r in &rows {
        println!("{}\t{:.4}\t{}", r.id, r.blur_fraction, r.size_category);
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| m.root.clone());
    ensure_dir(&dir)?;
    write_csv(&dir.join("partition.csv"), &rows)?;
    let stats = m.stats();
    let stat_rows: Vec<StatRow> = stats
        .iter()
        .flat_map(|(g, keys)| keys.iter().map(move |(k, &count)| StatRow { group: g, key: k, count }))
        .collect();
    write_csv(&dir.join("partition_stats.csv"), &stat_rows)?;
    Ok(())
}

fn train_cmd(config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let data = cfg.load_data()?;
    let ckpt_dir = out.join("checkpoints");
    let run = run_training_in(&cfg, &data, (cfg.train.checkpoint_every > 0).then_some(ckpt_dir.as_path()))?;
    save_branch(out, &run.general)?;
    save_branch(out, &run.blur)?;
    let fused = run.fused()?;
    fused.save(out.join("fused.ckpt"))?;
    write_loss_csv(&out.join("losses.csv"), &run.log.losses)?;
    write_fusion_csv(&out.join("fusion.csv"), &run.log.fusions)?;
    if let Some(p) = &run.probe {
        write_csv(&out.join("heldout_l1.csv"), &p.records)?;
        if let Some(last) = p.last() {
            println!("held-out L1 at {}: general {:.5} blur {:.5}", last.iteration, last.general, last.blur);
        }
    }
    println!("fused {} {}", out.join("fused.ckpt").display(), fused.checksum());
    Ok(())
}

fn eval_cmd(model: &str, manifest: &Path, out: &Path, config: Option<&Path>, disc: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let m = Manifest::load(manifest)?;
    let params;
    let resolver: &dyn SuperResolver = if model == "nearest" {
        &NearestUpscaler
    } else {
        params = ParamSet::load(model)?;
        &params
    };
    let samples: Vec<EvalSample> = m
        .samples
        .iter()
        .map(|s| {
            Ok(EvalSample {
                id: s.id.clone(),
                hr: load_rgb(m.hr_path(s))?,
                mask: load_mask(m.mask_path(s))?,
                blur_type: s.blur_type,
                intensity: s.intensity,
            })
        })
        .collect::<Result<_, Error>>()?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let report = eval_report(resolver, &samples, &cfg.degradation)?;
    report.write_csvs(out)?;
    if let Some(d) = disc {
        loss_maps(&ParamSet::load(d)?, resolver, &samples, &cfg.degradation, &out.join("loss_maps"), cfg.train.clamp_hinge)?;
    }
    for a in &report.aggregate {
        println!(
            "{}/{}/{} {} n={} blur={:?} focus={:?} all={:?}",
            a.blur_type, a.size_category, a.intensity, a.metric, a.samples, a.blur_mean, a.focus_mean, a.all_mean
        );
    }
    Ok(())
}

fn loss_maps(
    d: &ParamSet,
    model: &dyn SuperResolver,
    samples: &[EvalSample],
    deg: &DegradationConfig,
    dir: &Path,
    clamp: bool,
) -> CmdResult {
    ensure_dir(dir)?;
    // extents must survive both the x4 degradation and the D strides
    let q = (1usize << DiscriminatorConfig::from_params(d)?.n_downsamples).max(degrade::FACTOR);
    for s in samples {
        let [_, _, h, w] = s.hr.shape();
        let (h, w) = (h - h % q, w - w % q);
        let hr = s.hr.crop(0, 0, h, w)?;
        let mask = s.mask.crop(0, 0, h, w)?;
        let sr = model.upscale(&degrade::degrade_sample(&hr, deg, &s.id)?)?.map(|v| v.clamp(0.0, 1.0));
        let map = disc_loss_map(d, &hr, &sr, &mask, clamp)?;
        write_atomic(&dir.join(format!("{}.png", s.id)), &encode_false_color_png(&map.map)?)?;
    }
    Ok(())
}

fn inspect_cmd(ckpt: &Path) -> CmdResult {
    let p = ParamSet::load(ckpt)?;
    println!("{} tensors, {} values, checksum {}", p.len(), p.numel(), p.checksum());
    for (name, t) in p.iter() {
        let n: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        println!("{name}\t{:?}\t{n:.6}", t.shape());
    }
    println!("total norm {:.6}", norm(&p));
    for (k, v) in p.metadata() {
        println!("meta {k} = {v}");
    }
    Ok(())
}

fn gradcheck_cmd(seeds: &[u64]) -> CmdResult {
    let started = std::time::Instant::now();
    let results = gradsuite::run_suite(seeds)?;
    let mut failed = 0;
    for r in &results {
        println!("{:<24} seed {:<3} rel {:.3e} {}", r.op, r.seed, r.rel_error, if r.passed { "ok" } else { "FAIL" });
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed, {:.2?}", results.len(), started.elapsed());
    if failed > 0 {
        return Err(Failure { code: EXIT_GRADCHECK, message: format!("{failed} gradient checks failed") });
    }
    Ok(())
}

fn serve_cmd(manifest: &Path, port: Option<u16>, ui: Option<PathBuf>) -> CmdResult {
    let port = service::resolve_port(port).map_err(usage)?;
    let state = Arc::new(service::AppState::load(manifest)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| usage(e.to_string()))?;
    rt.block_on(service::serve(state, port, ui)).map_err(|e| usage(format!("serve: {e}")))
}
