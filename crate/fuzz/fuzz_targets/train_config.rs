#![no_main]

use libfuzzer_sys::fuzz_target;
use lipforge_core::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_json(text) {
        cfg.validate().expect("parsed configs are valid");
        for k in 0..=10 {
            let lr = cfg.lr_at(k as f64 / 10.0);
            assert!(lr.is_finite() && lr >= 0.0);
        }
    }
});
