use std::path::Path;
use std::process::{Command, Output};

use pbasr_core::checkpoint::ParamSet;
use pbasr_core::dataset::{encode_mask_png, encode_rgb_png, BlurSample, BlurType, Intensity, Manifest, ReviewState, Source};
use pbasr_core::models::{build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig};
use pbasr_core::Tensor;

fn pbasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbasr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// 10x10 masks whose blur fractions are the given percentages.
fn fraction_manifest(dir: &Path, percents: &[usize]) -> std::path::PathBuf {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mut samples = Vec::new();
    for (i, &pct) in percents.iter().enumerate() {
        let id = format!("s{i}");
        let mask = Tensor::from_fn([1, 1, 10, 10], |[_, _, y, x]| if y * 10 + x < pct { 0.0 } else { 1.0 });
        std::fs::write(dir.join(format!("img/{id}.png")), encode_rgb_png(&Tensor::full([1, 3, 10, 10], 0.5)).unwrap()).unwrap();
        std::fs::write(dir.join(format!("img/{id}_m.png")), encode_mask_png(&mask).unwrap()).unwrap();
        samples.push(BlurSample {
            id: id.clone(),
            hr_path: format!("img/{id}.png"),
            mask_path: format!("img/{id}_m.png"),
            blur_type: BlurType::Defocus,
            intensity: Intensity::Unlabeled,
            source: Source::Real,
            review_state: ReviewState::Auto,
            blur_fraction: None,
            revision: 0,
        });
    }
    let path = dir.join("m.jsonl");
    Manifest::new(dir, samples).save(&path).unwrap();
    path
}

#[test]
fn partition_assigns_size_categories() {
    let dir = tempfile::tempdir().unwrap();
    let m = fraction_manifest(dir.path(), &[44, 50, 56]);
    let o = pbasr(&["partition", "--manifest", p(&m)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let cats: Vec<String> = stdout(&o).lines().map(|l| l.split('\t').nth(2).unwrap().to_string()).collect();
    assert_eq!(cats, ["small", "medium", "large"]);
    let reloaded = Manifest::load(&m).unwrap();
    assert_eq!(reloaded.samples[0].blur_fraction, Some(0.44));
    let stats = std::fs::read_to_string(dir.path().join("partition_stats.csv")).unwrap();
    assert!(stats.contains("size_category,medium,1"), "{stats}");
    assert!(dir.path().join("partition.csv").is_file());
}

#[test]
fn fusing_a_checkpoint_with_itself_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_generator(&GeneratorConfig::default(), 3).unwrap();
    let a = dir.path().join("a.ckpt");
    let out = dir.path().join("f.ckpt");
    g.save(&a).unwrap();
    let o = pbasr(&["fuse", "--general", p(&a), "--blur", p(&a), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&out).unwrap());
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "[train]\ntotal_iters = 6\nbatch_size = 2\nhr_patch = 16\nseed = 5\n\
         [fusion]\nk = 3\n\
         [model]\nbase_channels = 4\nn_residual_blocks = 1\n\
         [data.synthetic]\ncount = 3\nheldout = 1\nsize = 64\n\
         [probe]\nearly_window = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pbasr(&["train", "--config", p(&cfg), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    for f in ["general.ckpt", "blur.ckpt", "general_disc.ckpt", "blur_disc.ckpt", "fused.ckpt", "losses.csv", "fusion.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resolved = std::fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("total_iters = 6"));
    let fusions = std::fs::read_to_string(a.join("fusion.csv")).unwrap();
    assert_eq!(fusions.lines().count(), 3);
    let l1 = std::fs::read_to_string(a.join("heldout_l1.csv")).unwrap();
    assert_eq!(l1.lines().count(), 4);
}

#[test]
fn config_and_path_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = pbasr(&["train", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert_eq!(code(&pbasr(&["inspect", "--ckpt", "/definitely/not/here.ckpt"])), 2);
    assert_eq!(code(&pbasr(&["no-such-command"])), 2);
    assert_eq!(code(&pbasr(&["estimate", "--manifest", "/nope.jsonl"])), 2);
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let set = pbasr_core::dataset::synth::toy_set(1, 1, 32, 0).unwrap();
    let m = pbasr_core::dataset::synth::write_toy_dataset(dir.path(), &set).unwrap().heldout;
    let g = build_generator(&GeneratorConfig::default(), 0).unwrap().map(|_| f32::NAN);
    let ckpt = dir.path().join("nan.ckpt");
    g.save(&ckpt).unwrap();
    let o = pbasr(&["eval", "--model", p(&ckpt), "--manifest", p(&m), "--out", p(&dir.path().join("ev"))]);
    assert_eq!(code(&o), 3, "{o:?}");
}

#[test]
fn gradcheck_passes() {
    let o = pbasr(&["gradcheck", "--seeds", "0,1"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn synth_degrade_estimate_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = pbasr(&["synth", "--out", p(&data), "--count", "2", "--heldout", "2", "--size", "32"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let heldout = data.join("heldout.jsonl");

    let lr_dir = dir.path().join("lr");
    let o = pbasr(&["degrade", "--manifest", p(&heldout), "--out", p(&lr_dir)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let lr = pbasr_core::dataset::load_rgb(lr_dir.join("heldout-0000.png")).unwrap();
    assert_eq!(lr.shape(), [1, 3, 8, 8]);

    let ev = dir.path().join("eval");
    let disc = dir.path().join("d.ckpt");
    build_discriminator(&DiscriminatorConfig::conditional(), 1).unwrap().save(&disc).unwrap();
    let o = pbasr(&["eval", "--model", "nearest", "--manifest", p(&heldout), "--out", p(&ev), "--disc", p(&disc)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let rows = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    assert!(ev.join("metrics_by_category.csv").is_file());
    assert!(ev.join("loss_maps/heldout-0001.png").is_file());

    let o = pbasr(&["estimate", "--manifest", p(&heldout), "--window", "4"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let m = Manifest::load(&heldout).unwrap();
    assert!(m.samples.iter().all(|s| s.review_state == ReviewState::Auto && s.revision == 1));

    let o = pbasr(&["inspect", "--ckpt", p(&disc)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("disc.in.weight\t[16, 4, 3, 3]"));
    let loaded = ParamSet::load(&disc).unwrap();
    assert!(stdout(&o).contains(&loaded.checksum()));
}
