#![no_main]

use bosdf::harness::parse_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = parse_log(text) {
        let again = parse_log(&log.to_csv()).expect("to_csv output must parse");
        assert_eq!(again.len(), log.len());
    }
});
