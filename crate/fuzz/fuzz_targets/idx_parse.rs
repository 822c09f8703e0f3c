#![no_main]
use libfuzzer_sys::fuzz_target;

use fedvhl::data::idx::{encode_idx, parse_idx};

fuzz_target!(|data: &[u8]| {
    if let Ok(decoded) = parse_idx(data) {
        // Accepted input must re-encode to the identical byte string; the
        // parser rejects trailing bytes, so the codec is bijective.
        let encoded = encode_idx(&decoded).expect("decoded value must encode");
        assert_eq!(encoded, data);
    }
});
