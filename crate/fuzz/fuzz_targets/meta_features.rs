#![no_main]

use bosdf::contextual::parse_meta_features;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_meta_features(text);
    }
});
