#![no_main]

use libfuzzer_sys::fuzz_target;
use mpa_core::harness::Report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = Report::from_json(text) {
        let _ = report.to_csv();
        let _ = report.verdicts();
        let back = Report::from_json(&report.to_json().expect("serialise")).expect("reparse");
        assert_eq!(back.episodes.len(), report.episodes.len());
    }
});
