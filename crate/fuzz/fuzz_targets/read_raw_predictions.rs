//! Strict EVRP decoding, plus: any accepted grid must decode into boxes
//! without panicking (finite-ness violations surface as errors).

#![no_main]

use libfuzzer_sys::fuzz_target;

use evfuse_core::detect::Anchor;

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = evfuse_core::detect::read_raw_predictions(data) {
        assert_eq!(evfuse_core::detect::write_raw_predictions(&raw), data);
        if raw.anchors() == 3 {
            let anchors = [
                Anchor { w: 16.0, h: 32.0 },
                Anchor { w: 32.0, h: 32.0 },
                Anchor { w: 64.0, h: 48.0 },
            ];
            let _ = evfuse_core::detect::decode_boxes(&raw, &anchors, 3, 8);
        }
    }
});
