//! Anchor-template JSON: accepted files are valid and round-trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(anchors) = evfuse_core::detect::read_anchors_json(data) {
        anchors.validate().expect("accepted anchors must validate");
        let bytes = evfuse_core::detect::write_anchors_json(&anchors);
        let reparsed = evfuse_core::detect::read_anchors_json(&bytes)
            .expect("canonical serialization must reparse");
        assert_eq!(reparsed, anchors);
    }
});
