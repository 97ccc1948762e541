//! Regenerates the checked-in pipeline fixture and the fuzz corpus seeds.
//!
//! Run from the repository root:
//!
//! ```text
//! cargo run -p evfuse-cli --example gen_fixtures -- .
//! ```
//!
//! Everything is seeded, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evfuse_core::config::PipelineConfig;
use evfuse_core::detect::{
    write_anchors_json, write_detections_json, write_raw_predictions, Anchor, AnchorsFile, Bbox,
    Detection, RawPredictions,
};
use evfuse_core::enhance::{write_image, ImageTensor, ValueRange};
use evfuse_core::eval::{write_ground_truth_json, GroundTruth};
use evfuse_core::events::{write_stream, Event, EventStream, Polarity};
use evfuse_core::fusion::{write_conv_weights, ConvWeights};
use evfuse_core::voxel::{voxelize, write_voxel_grid, VoxelParams};

const SENSOR_W: u16 = 64;
const SENSOR_H: u16 = 48;
const FEAT_C: usize = 4;
const FEAT_H: usize = 12;
const FEAT_W: usize = 16;

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let fixture = root.join("crates/evfuse-cli/tests/fixtures/pipeline");
    let corpus = root.join("fuzz/corpus");
    fs::create_dir_all(&fixture).expect("create fixture dir");

    let config = fixture_config();
    write(&fixture.join("config.json"), &config.to_json());

    let mut rng = ChaCha8Rng::seed_from_u64(0xEF05);
    write(
        &fixture.join("w1.evwt"),
        &write_conv_weights(&random_weights(&mut rng, FEAT_C, 2 * FEAT_C, 1, 1)),
    );
    write(
        &fixture.join("w2.evwt"),
        &write_conv_weights(&random_weights(&mut rng, FEAT_C, FEAT_C, 3, 3)),
    );

    for frame in 0..2u32 {
        let stem = format!("frame_{frame:03}");
        let mut frame_rng = ChaCha8Rng::seed_from_u64(0x0DD5_0000 + frame as u64);
        let gts = ground_truths(&mut frame_rng);

        write(
            &fixture.join(format!("{stem}.events.csv")),
            &write_stream(&event_stream(&mut frame_rng, &gts)),
        );
        write(
            &fixture.join(format!("{stem}.image.evim")),
            &write_image(&low_light_image(&mut frame_rng)),
        );
        write(
            &fixture.join(format!("{stem}.raw.evrp")),
            &write_raw_predictions(&raw_predictions(&mut frame_rng, &gts, &config)),
        );
        write(
            &fixture.join(format!("{stem}.gt.json")),
            &write_ground_truth_json(&gts),
        );
        write(
            &fixture.join(format!("{stem}.feat-img.evim")),
            &write_image(&unit_features(&mut frame_rng)),
        );
        write(
            &fixture.join(format!("{stem}.feat-evt.evim")),
            &write_image(&unit_features(&mut frame_rng)),
        );
    }

    write_corpus_seeds(&corpus, &config);
    println!("fixture written to {}", fixture.display());
    println!("corpus seeds written to {}", corpus.display());
}

fn fixture_config() -> PipelineConfig {
    let mut config = PipelineConfig::default();
    // Anchor templates sized for the 64x48 fixture scenes.
    config.detect.anchors = vec![
        Anchor { w: 10.0, h: 14.0 },
        Anchor { w: 16.0, h: 16.0 },
        Anchor { w: 24.0, h: 18.0 },
    ];
    config.validate().expect("fixture config is valid");
    config
}

fn random_weights(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, kh: usize, kw: usize) -> ConvWeights {
    let weights = (0..out_c * in_c * kh * kw)
        .map(|_| rng.gen_range(-0.6..0.6))
        .collect();
    let bias = (0..out_c).map(|_| rng.gen_range(-0.2..0.2)).collect();
    ConvWeights::new(out_c, in_c, kh, kw, weights, bias).expect("weight shape")
}

fn ground_truths(rng: &mut ChaCha8Rng) -> Vec<GroundTruth> {
    (0..3)
        .map(|i| {
            let w = rng.gen_range(10.0..22.0f64).round();
            let h = rng.gen_range(12.0..18.0f64).round();
            let x0 = rng.gen_range(2.0..(SENSOR_W as f64 - w - 2.0)).round();
            let y0 = rng.gen_range(2.0..(SENSOR_H as f64 - h - 2.0)).round();
            GroundTruth {
                bbox: Bbox::new(x0, y0, x0 + w, y0 + h).unwrap(),
                class_id: i + 1,
            }
        })
        .collect()
}

/// Background noise events plus dense bursts around the annotated objects
/// and one defective pixel hot enough to trip the 500 Hz filter.
fn event_stream(rng: &mut ChaCha8Rng, gts: &[GroundTruth]) -> EventStream {
    let mut events = Vec::new();
    for _ in 0..2_000 {
        events.push(Event {
            x: rng.gen_range(0..SENSOR_W),
            y: rng.gen_range(0..SENSOR_H),
            t: rng.gen_range(0..30_000),
            polarity: polarity(rng),
        });
    }
    for gt in gts {
        for _ in 0..400 {
            let x = rng.gen_range(gt.bbox.x0..gt.bbox.x1) as u16;
            let y = rng.gen_range(gt.bbox.y0..gt.bbox.y1) as u16;
            events.push(Event {
                x: x.min(SENSOR_W - 1),
                y: y.min(SENSOR_H - 1),
                t: rng.gen_range(0..30_000),
                polarity: polarity(rng),
            });
        }
    }
    // 20 events in 30 ms is ~667 Hz, above the hot-pixel threshold.
    for i in 0..20 {
        events.push(Event {
            x: 1,
            y: 1,
            t: 1_500 * i,
            polarity: Polarity::Positive,
        });
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(SENSOR_W, SENSOR_H, events).expect("fixture events valid")
}

/// Dark scene with dim object blobs and mild sensor noise, byte-valued.
fn low_light_image(rng: &mut ChaCha8Rng) -> ImageTensor {
    let (c, h, w) = (3usize, SENSOR_H as usize, SENSOR_W as usize);
    let mut data = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = 6.0 + 10.0 * (x as f64 / w as f64);
                let blob = if (10..26).contains(&x) && (8..20).contains(&y) {
                    24.0
                } else if (34..58).contains(&x) && (22..40).contains(&y) {
                    14.0
                } else {
                    0.0
                };
                let noise: f64 = rng.gen_range(-3.0..3.0);
                data[(ch * h + y) * w + x] = (base + blob + noise).round().clamp(0.0, 255.0);
            }
        }
    }
    ImageTensor::new(c, h, w, ValueRange::Byte, data).expect("fixture image valid")
}

/// Raw head grid: low-objectness noise everywhere, confident slightly
/// perturbed anchors over all ground truths but the last (a miss), plus one
/// confident distractor in the top-right corner (a false positive).
fn raw_predictions(rng: &mut ChaCha8Rng, gts: &[GroundTruth], config: &PipelineConfig) -> RawPredictions {
    let stride = config.detect.strides[0] as f64;
    let (cells_h, cells_w, anchors) = (SENSOR_H as usize / 8, SENSOR_W as usize / 8, 3);
    let mut data = vec![0.0f64; cells_h * cells_w * anchors * 8];
    for entry in data.iter_mut() {
        *entry = rng.gen_range(-0.5..0.5);
    }
    // Background objectness low enough to fall below the 0.1 threshold.
    for a in 0..cells_h * cells_w * anchors {
        data[a * 8 + 4] = rng.gen_range(-5.0..-3.5);
    }
    let mut boost = |cell: (usize, usize), bbox: &Bbox, class_id: u8, rng: &mut ChaCha8Rng| {
        let (i, j) = cell;
        let cx = (bbox.x0 + bbox.x1) / 2.0;
        let cy = (bbox.y0 + bbox.y1) / 2.0;
        let k = rng.gen_range(0..anchors);
        let anchor = &config.detect.anchors[k];
        let base = ((i * cells_w + j) * anchors + k) * 8;
        data[base] = logit(cx / stride - j as f64 + rng.gen_range(-0.1..0.1));
        data[base + 1] = logit(cy / stride - i as f64 + rng.gen_range(-0.1..0.1));
        data[base + 2] = ((bbox.x1 - bbox.x0) / anchor.w).ln() + rng.gen_range(-0.08..0.08);
        data[base + 3] = ((bbox.y1 - bbox.y0) / anchor.h).ln() + rng.gen_range(-0.08..0.08);
        data[base + 4] = rng.gen_range(2.0..4.0);
        for c in 0..3 {
            data[base + 5 + c] = if c == (class_id - 1) as usize {
                rng.gen_range(2.0..4.0)
            } else {
                rng.gen_range(-4.0..-2.0)
            };
        }
    };
    for gt in &gts[..gts.len() - 1] {
        let cx = (gt.bbox.x0 + gt.bbox.x1) / 2.0;
        let cy = (gt.bbox.y0 + gt.bbox.y1) / 2.0;
        let j = ((cx / stride) as usize).min(cells_w - 1);
        let i = ((cy / stride) as usize).min(cells_h - 1);
        boost((i, j), &gt.bbox, gt.class_id, rng);
    }
    // Distractor far from every ground truth.
    let ghost = Bbox::new(SENSOR_W as f64 - 9.0, 1.0, SENSOR_W as f64 - 1.0, 9.0).unwrap();
    boost((0, cells_w - 1), &ghost, 3, rng);
    RawPredictions::new(cells_h, cells_w, anchors, data).expect("fixture raw valid")
}

fn unit_features(rng: &mut ChaCha8Rng) -> ImageTensor {
    let data = (0..FEAT_C * FEAT_H * FEAT_W)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    ImageTensor::new(FEAT_C, FEAT_H, FEAT_W, ValueRange::Unit, data).expect("fixture features valid")
}

fn polarity(rng: &mut ChaCha8Rng) -> Polarity {
    if rng.gen_bool(0.5) {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-3, 1.0 - 1e-3);
    (p / (1.0 - p)).ln()
}

/// Small valid inputs for every fuzzed reader.
fn write_corpus_seeds(corpus: &Path, config: &PipelineConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);

    let events = EventStream::new(
        16,
        16,
        vec![
            Event { x: 3, y: 4, t: 100, polarity: Polarity::Positive },
            Event { x: 5, y: 1, t: 220, polarity: Polarity::Negative },
            Event { x: 3, y: 4, t: 220, polarity: Polarity::Positive },
            Event { x: 15, y: 15, t: 900, polarity: Polarity::Negative },
        ],
    )
    .unwrap();
    seed(corpus, "parse_events_csv", "valid", &write_stream(&events));
    seed(
        corpus,
        "parse_events_csv",
        "header_only",
        b"# evfuse-events v1 W=346 H=260\n",
    );
    seed(
        corpus,
        "parse_events_csv",
        "zero_one_polarity",
        b"# evfuse-events v1 W=8 H=8\n10,1,2,0\n20,3,4,1\n",
    );

    let grid = voxelize(
        &events,
        &evfuse_core::events::TimeWindow::new(0, 1_000).unwrap(),
        &VoxelParams { bins: 2, theta_dens: 0.0 },
    )
    .unwrap();
    seed(corpus, "read_voxel_grid", "valid", &write_voxel_grid(&grid));

    let byte_img = ImageTensor::new(
        1,
        4,
        4,
        ValueRange::Byte,
        (0..16).map(|v| (v * 16) as f64).collect(),
    )
    .unwrap();
    seed(corpus, "read_image", "byte", &write_image(&byte_img));
    let unit_img = ImageTensor::new(
        2,
        2,
        2,
        ValueRange::Unit,
        (0..8).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    seed(corpus, "read_image", "unit", &write_image(&unit_img));

    let weights = random_weights(&mut rng, 2, 4, 1, 1);
    seed(corpus, "read_conv_weights", "valid", &write_conv_weights(&weights));

    let raw = RawPredictions::new(
        1,
        2,
        1,
        (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    seed(corpus, "read_raw_predictions", "valid", &write_raw_predictions(&raw));

    let det = Detection {
        bbox: Bbox::new(4.0, 2.0, 20.0, 18.0).unwrap(),
        class_id: 2,
        objectness: 0.8,
        class_scores: [0.2, 0.7, 0.1],
        confidence: 0.56,
    };
    seed(corpus, "read_detections_json", "valid", &write_detections_json(&[det]));

    let gt = GroundTruth {
        bbox: Bbox::new(4.0, 2.0, 20.0, 18.0).unwrap(),
        class_id: 2,
    };
    seed(corpus, "read_ground_truth_json", "valid", &write_ground_truth_json(&[gt]));

    seed(corpus, "read_config_json", "fixture", &config.to_json());
    seed(corpus, "read_config_json", "partial", b"{\"voxel\": {\"bins\": 8}}\n");

    let anchors = AnchorsFile {
        anchors: config.detect.anchors.clone(),
        stride: config.detect.strides[0],
        note: Some("fixture-sized templates".into()),
    };
    seed(corpus, "read_anchors_json", "valid", &write_anchors_json(&anchors));
}

fn seed(corpus: &Path, target: &str, name: &str, bytes: &[u8]) {
    let dir = corpus.join(target);
    fs::create_dir_all(&dir).expect("create corpus dir");
    write(&dir.join(name), bytes);
}

fn write(path: &Path, bytes: &[u8]) {
    fs::write(path, bytes).unwrap_or_else(|e| panic!("write {}: {e}", path.display()));
}
