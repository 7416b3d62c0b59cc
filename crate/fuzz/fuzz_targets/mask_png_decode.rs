#![no_main]

use libfuzzer_sys::fuzz_target;
use pbasr_core::dataset::{decode_mask_png, encode_mask_png};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_mask_png(data) {
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let png = encode_mask_png(&mask).expect("decoded mask encodes");
        assert_eq!(decode_mask_png(&png).expect("round trip"), mask);
    }
});
