//! Ground-truth JSON: accepted documents round-trip through the writer.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(gts) = evfuse_core::eval::read_ground_truth_json(data) {
        let bytes = evfuse_core::eval::write_ground_truth_json(&gts);
        let reparsed = evfuse_core::eval::read_ground_truth_json(&bytes)
            .expect("canonical serialization must reparse");
        assert_eq!(reparsed, gts);
    }
});
