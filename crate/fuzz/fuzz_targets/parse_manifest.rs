#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = clustermc::io::read_manifest(text) {
            // validation must never panic, whatever the parse produced
            let _ = manifest.validate();
        }
    }
});
