#![no_main]

use libfuzzer_sys::fuzz_target;
use mpa_core::dmp::AdaptationLog;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = AdaptationLog::from_jsonl(text) {
        let back = AdaptationLog::from_jsonl(&log.to_jsonl().expect("serialise")).expect("reparse");
        assert_eq!(back.records.len(), log.records.len());
    }
});
