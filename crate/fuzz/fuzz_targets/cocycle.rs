#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = lpflow::textio::parse_cocycle_bytes(data);
});
