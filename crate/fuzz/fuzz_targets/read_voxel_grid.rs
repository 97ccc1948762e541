//! Strict EVXG decoding: accepted inputs re-encode to the identical bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = evfuse_core::voxel::read_voxel_grid(data) {
        assert_eq!(evfuse_core::voxel::write_voxel_grid(&grid), data);
    }
});
