//! Strict EVWT decoding: accepted inputs re-encode to the identical bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = evfuse_core::fusion::read_conv_weights(data) {
        assert_eq!(evfuse_core::fusion::write_conv_weights(&w), data);
    }
});
