#![no_main]

use libfuzzer_sys::fuzz_target;
use melodyflow::trainer::{to_flat, TrainConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = TrainConfig::parse_flat(text) {
        let flat = to_flat(&config);
        assert_eq!(to_flat(&TrainConfig::parse_flat(&flat).unwrap()), flat);
    }
});
