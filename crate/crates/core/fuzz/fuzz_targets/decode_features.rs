#![no_main]

use libfuzzer_sys::fuzz_target;
use melodyflow::storage::{decode_features, encode_features};

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = decode_features(data, 93.75) {
        let again = decode_features(&encode_features(&f), 93.75).unwrap();
        assert_eq!(again.frames.dim(), f.frames.dim());
    }
});
