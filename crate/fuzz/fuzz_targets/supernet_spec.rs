#![no_main]

use libfuzzer_sys::fuzz_target;
use supernet_core::environment::ToolRegistry;
use supernet_core::supernet::{build_graph, SupernetSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = SupernetSpec::from_json(text) else { return };
    if let Ok(graph) = build_graph(&spec, &ToolRegistry::standard()) {
        assert!(graph.num_actions() >= 1);
        let again = SupernetSpec::from_json(&spec.to_json()).expect("serialized spec parses");
        let g2 = build_graph(&again, &ToolRegistry::standard()).expect("round trip builds");
        assert_eq!(graph.fingerprint(), g2.fingerprint());
    }
});
