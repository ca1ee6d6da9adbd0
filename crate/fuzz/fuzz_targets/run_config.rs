#![no_main]

use libfuzzer_sys::fuzz_target;
use supernet_core::harness::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        let again = RunConfig::from_json(&cfg.resolved_json()).expect("resolved config parses");
        assert_eq!(again, cfg);
    }
});
