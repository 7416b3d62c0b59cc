#![no_main]

use libfuzzer_sys::fuzz_target;
use pbasr_core::dataset::{parse_manifest, Manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(samples) = parse_manifest(text) {
        let jsonl = Manifest::new(".", samples.clone()).to_jsonl();
        assert_eq!(parse_manifest(&jsonl).expect("saved manifest parses"), samples);
    }
});
