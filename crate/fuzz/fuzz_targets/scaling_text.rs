#![no_main]

use libfuzzer_sys::fuzz_target;
use lipforge_core::layers::manifest::parse_scaling_text;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(diag) = parse_scaling_text(text) {
            assert!(diag.iter().all(|v| v.is_finite()));
        }
    }
});
