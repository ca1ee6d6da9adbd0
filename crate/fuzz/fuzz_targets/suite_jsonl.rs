#![no_main]

use libfuzzer_sys::fuzz_target;
use supernet_core::environment::{read_suite, write_suite};

fuzz_target!(|data: &[u8]| {
    let Ok(suite) = read_suite(data) else { return };
    let mut out = Vec::new();
    write_suite(&suite, &mut out).expect("write to memory");
    let back = read_suite(out.as_slice()).expect("written suite parses");
    assert_eq!(back.len(), suite.len());
});
