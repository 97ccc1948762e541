//! Format-reader hardening checks over the checked-in fuzz corpus seeds.
//!
//! Every seed must satisfy its target's round-trip law, and random byte
//! mutations of the seeds must never panic a reader, the same properties
//! the fuzz targets assert, kept runnable under plain `cargo test`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evfuse_core::config::PipelineConfig;

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../fuzz/corpus/{target}"))
}

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = corpus_dir(target);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("missing corpus dir {}: {e}", dir.display()))
    {
        out.push(std::fs::read(entry.unwrap().path()).unwrap());
    }
    assert!(!out.is_empty(), "no corpus seeds for {target}");
    out
}

fn mutations(seed: &[u8], rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut bytes = seed.to_vec();
        for _ in 0..rng.gen_range(1..=4) {
            match rng.gen_range(0..3) {
                0 if !bytes.is_empty() => {
                    let i = rng.gen_range(0..bytes.len());
                    bytes[i] = rng.gen();
                }
                1 if !bytes.is_empty() => {
                    bytes.truncate(rng.gen_range(0..bytes.len()));
                }
                _ => {
                    let i = if bytes.is_empty() { 0 } else { rng.gen_range(0..bytes.len()) };
                    bytes.insert(i, rng.gen());
                }
            }
        }
        out.push(bytes);
    }
    out
}

fn exercise(target: &str, law: impl Fn(&[u8])) {
    // EVFUSE_FORMAT_MUTATIONS raises the mutation count for longer local
    // shake-out runs.
    let count = std::env::var("EVFUSE_FORMAT_MUTATIONS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(500);
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    for seed in seeds(target) {
        law(&seed);
        for mutated in mutations(&seed, &mut rng, count) {
            law(&mutated);
        }
    }
}

#[test]
fn events_csv_law() {
    exercise("parse_events_csv", |data| {
        if let Ok(stream) = evfuse_core::events::parse_stream_any(data) {
            let canonical = evfuse_core::events::write_stream(&stream);
            let reparsed = evfuse_core::events::parse_stream_any(&canonical).unwrap();
            assert_eq!(reparsed, stream);
            assert_eq!(evfuse_core::events::write_stream(&reparsed), canonical);
        }
    });
}

#[test]
fn voxel_grid_law() {
    exercise("read_voxel_grid", |data| {
        if let Ok(grid) = evfuse_core::voxel::read_voxel_grid(data) {
            assert_eq!(evfuse_core::voxel::write_voxel_grid(&grid), data);
        }
    });
}

#[test]
fn image_law() {
    exercise("read_image", |data| {
        if let Ok(img) = evfuse_core::enhance::read_image(data) {
            assert_eq!(evfuse_core::enhance::write_image(&img), data);
        }
    });
}

#[test]
fn conv_weights_law() {
    exercise("read_conv_weights", |data| {
        if let Ok(w) = evfuse_core::fusion::read_conv_weights(data) {
            assert_eq!(evfuse_core::fusion::write_conv_weights(&w), data);
        }
    });
}

#[test]
fn raw_predictions_law() {
    exercise("read_raw_predictions", |data| {
        if let Ok(raw) = evfuse_core::detect::read_raw_predictions(data) {
            assert_eq!(evfuse_core::detect::write_raw_predictions(&raw), data);
        }
    });
}

#[test]
fn detections_json_law() {
    exercise("read_detections_json", |data| {
        if let Ok(dets) = evfuse_core::detect::read_detections_json(data) {
            let bytes = evfuse_core::detect::write_detections_json(&dets);
            assert_eq!(evfuse_core::detect::read_detections_json(&bytes).unwrap(), dets);
            let kept = evfuse_core::detect::nms(&dets, 0.1, 0.4);
            assert!(kept.len() <= dets.len());
        }
    });
}

#[test]
fn ground_truth_json_law() {
    exercise("read_ground_truth_json", |data| {
        if let Ok(gts) = evfuse_core::eval::read_ground_truth_json(data) {
            let bytes = evfuse_core::eval::write_ground_truth_json(&gts);
            assert_eq!(evfuse_core::eval::read_ground_truth_json(&bytes).unwrap(), gts);
        }
    });
}

#[test]
fn config_json_law() {
    exercise("read_config_json", |data| {
        if let Ok(config) = PipelineConfig::from_json(data) {
            config.validate().unwrap();
            assert_eq!(PipelineConfig::from_json(&config.to_json()).unwrap(), config);
        }
    });
}

#[test]
fn anchors_json_law() {
    exercise("read_anchors_json", |data| {
        if let Ok(anchors) = evfuse_core::detect::read_anchors_json(data) {
            anchors.validate().unwrap();
            let bytes = evfuse_core::detect::write_anchors_json(&anchors);
            assert_eq!(evfuse_core::detect::read_anchors_json(&bytes).unwrap(), anchors);
        }
    });
}
