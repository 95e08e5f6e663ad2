#![no_main]

use bosdf::env::parse_tabular;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_tabular(text);
    }
});
