#![no_main]

use libfuzzer_sys::fuzz_target;
use pbasr_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let resolved = cfg.to_toml().expect("valid config serializes");
        assert_eq!(RunConfig::parse(&resolved).expect("resolved config parses"), cfg);
    }
});
