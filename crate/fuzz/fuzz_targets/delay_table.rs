#![no_main]

use bosdf::ledger::parse_delay_table;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_delay_table(text);
    }
});
