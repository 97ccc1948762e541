//! Config JSON: accepted configs are valid and round-trip through to_json.

#![no_main]

use libfuzzer_sys::fuzz_target;

use evfuse_core::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = PipelineConfig::from_json(data) {
        config.validate().expect("accepted config must validate");
        let reparsed = PipelineConfig::from_json(&config.to_json())
            .expect("canonical serialization must reparse");
        assert_eq!(reparsed, config);
    }
});
