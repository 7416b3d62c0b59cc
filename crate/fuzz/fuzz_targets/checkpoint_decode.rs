#![no_main]

use libfuzzer_sys::fuzz_target;
use pbasr_core::checkpoint::ParamSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ParamSet::decode(data) {
        let bytes = p.encode();
        let again = ParamSet::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
    }
});
