//! Strict EVIM decoding: accepted inputs re-encode to the identical bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = evfuse_core::enhance::read_image(data) {
        assert_eq!(evfuse_core::enhance::write_image(&img), data);
    }
});
