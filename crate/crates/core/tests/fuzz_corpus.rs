//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets make, so the corpus stays meaningful under plain `cargo test`.

use std::fs;
use std::path::PathBuf;

use pbasr_core::checkpoint::ParamSet;
use pbasr_core::config::RunConfig;
use pbasr_core::dataset::{decode_mask_png, decode_rgb_png, encode_mask_png, parse_manifest, Manifest};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Runs `check` on every seed and returns the names that decoded.
fn replay(target: &str, check: impl Fn(&[u8]) -> bool) -> Vec<String> {
    seeds(target).into_iter().filter(|(_, bytes)| check(bytes)).map(|(name, _)| name).collect()
}

#[test]
fn checkpoint_seeds() {
    let ok = replay("checkpoint_decode", |data| match ParamSet::decode(data) {
        Ok(p) => {
            let bytes = p.encode();
            assert_eq!(ParamSet::decode(&bytes).unwrap().encode(), bytes);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["empty_set", "small", "zero_len"]);
}

#[test]
fn manifest_seeds() {
    let ok = replay("manifest_parse", |data| {
        let Ok(text) = std::str::from_utf8(data) else { return false };
        match parse_manifest(text) {
            Ok(samples) => {
                let jsonl = Manifest::new(".", samples.clone()).to_jsonl();
                assert_eq!(parse_manifest(&jsonl).unwrap(), samples);
                true
            }
            Err(_) => false,
        }
    });
    assert_eq!(ok, ["one_line", "two_lines_blank"]);
}

#[test]
fn run_config_seeds() {
    let ok = replay("run_config_parse", |data| {
        let Ok(text) = std::str::from_utf8(data) else { return false };
        match RunConfig::parse(text) {
            Ok(cfg) => {
                assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
                true
            }
            Err(_) => false,
        }
    });
    assert_eq!(ok, ["empty.toml", "full.toml", "paths.toml"]);
}

#[test]
fn mask_png_seeds() {
    let ok = replay("mask_png_decode", |data| match decode_mask_png(data) {
        Ok(m) => {
            assert_eq!(decode_mask_png(&encode_mask_png(&m).unwrap()).unwrap(), m);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["half", "one_pixel"]);
}

#[test]
fn rgb_png_seeds() {
    let ok = replay("rgb_png_decode", |data| match decode_rgb_png(data) {
        Ok(img) => {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["gradient", "gray", "rgba"]);
}
