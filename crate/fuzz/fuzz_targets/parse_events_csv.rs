//! The event CSV reader must reject malformed input without panicking, and
//! accepted streams must survive a write/parse round trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(stream) = evfuse_core::events::parse_stream_any(data) {
        let canonical = evfuse_core::events::write_stream(&stream);
        let reparsed = evfuse_core::events::parse_stream_any(&canonical)
            .expect("canonical serialization must reparse");
        assert_eq!(reparsed, stream);
        assert_eq!(evfuse_core::events::write_stream(&reparsed), canonical);
    }
});
