//! Detections JSON: accepted documents round-trip through the writer, and
//! NMS handles anything the reader accepts.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dets) = evfuse_core::detect::read_detections_json(data) {
        let bytes = evfuse_core::detect::write_detections_json(&dets);
        let reparsed = evfuse_core::detect::read_detections_json(&bytes)
            .expect("canonical serialization must reparse");
        assert_eq!(reparsed, dets);
        let kept = evfuse_core::detect::nms(&dets, 0.1, 0.4);
        assert!(kept.len() <= dets.len());
    }
});
