#![no_main]

use catpol::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode(data) {
        // The format has one encoding per checkpoint.
        assert_eq!(encode(&ck).expect("decoded checkpoint encodes"), data);
    }
});
