#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(matrix) = clustermc::io::read_data_csv(text) {
            // a successful parse must round-trip through the writer
            let again = clustermc::io::read_data_csv(&clustermc::io::format_data_csv(&matrix));
            assert!(again.is_ok());
        }
    }
});
