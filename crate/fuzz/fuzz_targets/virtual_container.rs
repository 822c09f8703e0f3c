#![no_main]
use libfuzzer_sys::fuzz_target;

use fedvhl::virtual_data::{decode_container, encode_container};

fuzz_target!(|data: &[u8]| {
    if let Ok(dataset) = decode_container(data) {
        // Payload floats are validated finite and stored losslessly, so an
        // accepted container re-encodes byte for byte.
        let encoded = encode_container(&dataset).expect("decoded container must encode");
        assert_eq!(encoded, data);
    }
});
