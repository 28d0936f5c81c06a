#![no_main]

use libfuzzer_sys::fuzz_target;
use mpa_core::synthbench::DomainSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = DomainSpec::from_json(text) {
        let back = DomainSpec::from_json(&spec.to_json().expect("serialise")).expect("reparse");
        assert_eq!(back, spec);
    }
});
