#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(alloc) = clustermc::StateKey::parse(text) {
            // parse accepts only canonical keys, so the round trip is exact
            assert_eq!(alloc.key().as_str(), text);
        }
    }
});
