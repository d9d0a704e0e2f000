#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = clustermc::io::read_trace(text) {
            let again =
                clustermc::io::read_trace(&clustermc::io::format_trace(&trace)).unwrap();
            assert_eq!(again.states(), trace.states());
        }
    }
});
