#![no_main]

use libfuzzer_sys::fuzz_target;
use mpa_core::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let back = ExperimentConfig::from_json(&cfg.to_json().expect("serialise")).expect("reparse");
        assert_eq!(back, ExperimentConfig { output_dir: None, ..cfg });
    }
});
