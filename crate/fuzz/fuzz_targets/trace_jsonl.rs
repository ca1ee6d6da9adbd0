#![no_main]

use libfuzzer_sys::fuzz_target;
use supernet_core::runtime::parse_traces;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(traces) = parse_traces(text) else { return };
    for t in &traces {
        let again = parse_traces(&t.to_jsonl()).expect("serialized trace parses");
        assert_eq!(again.len(), 1);
    }
});
