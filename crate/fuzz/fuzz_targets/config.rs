#![no_main]

use bosdf::harness::{Config, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse(text) {
        let again = Config::parse(&cfg.to_text()).expect("to_text output must parse");
        assert_eq!(again.to_text(), cfg.to_text());
        let _ = RunConfig::from_config(&cfg);
    }
});
