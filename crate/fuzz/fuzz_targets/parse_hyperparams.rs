#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(hyper) = clustermc::io::read_hyper(text) {
            let again =
                clustermc::io::read_hyper(&clustermc::io::format_hyper(&hyper, None)).unwrap();
            assert_eq!(again, hyper);
        }
    }
});
