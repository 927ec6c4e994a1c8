#![no_main]

use libfuzzer_sys::fuzz_target;
use melodyflow::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode(data, None) {
        assert_eq!(decode(&encode(&ckpt).unwrap(), None).unwrap(), ckpt);
    }
});
