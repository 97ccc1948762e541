//! The `pipeline` subcommand: chain the stages over a directory of paired
//! per-frame inputs and aggregate an evaluation report.
//!
//! Input layout, per frame stem:
//!
//! ```text
//! <stem>.events.csv     event stream            (required)
//! <stem>.image.evim     byte-range RGB frame    (required)
//! <stem>.raw.evrp       detection head output   (required)
//! <stem>.gt.json        ground-truth boxes      (required)
//! <stem>.feat-img.evim  image features, unit    (with --w1/--w2)
//! <stem>.feat-evt.evim  event features, unit    (with --w1/--w2)
//! ```
//!
//! Every stage is a pure function of its inputs and the config, so a rerun
//! with the same inputs and seed produces byte-identical artifacts.

use std::path::Path;

use evfuse_core::config::PipelineConfig;
use evfuse_core::detect::{decode_boxes, nms, write_detections_json};
use evfuse_core::enhance::{
    clahe, normalize_and_pad, read_image, write_image, ImageTensor, ValueRange,
};
use evfuse_core::error::{Error, Result};
use evfuse_core::eval::{evaluate, merge_reports, read_ground_truth_json, EvalReport};
use evfuse_core::events::{hot_pixel_filter, parse_stream_any, TimeWindow};
use evfuse_core::fusion::{
    acmf_attention, read_conv_weights, weighted_fuse, ConvWeights, FeatureMap,
};
use evfuse_core::voxel::{density_filter, voxelize, write_voxel_grid};

pub fn run(
    config: &PipelineConfig,
    input: &Path,
    out: &Path,
    w1: Option<&Path>,
    w2: Option<&Path>,
) -> Result<()> {
    let stems = discover_stems(input)?;
    if stems.is_empty() {
        return Err(Error::invalid(format!(
            "no <stem>.events.csv files found in {}",
            input.display()
        )));
    }
    let weights = match (w1, w2) {
        (Some(p1), Some(p2)) => Some((
            read_conv_weights(&read(p1)?)?,
            read_conv_weights(&read(p2)?)?,
        )),
        _ => None,
    };
    std::fs::create_dir_all(out)?;

    let window = TimeWindow::new(config.window.t0_us, config.window.dt_us)?;
    let stride = config.detect.strides[0];
    let mut reports = Vec::new();
    for stem in &stems {
        let report = process_frame(config, input, out, stem, &window, stride, weights.as_ref())?;
        let (p, r, f1) = report.percentages();
        println!("{stem}: P={p:.2}% R={r:.2}% F1={f1:.2}%");
        reports.push(report);
    }

    let merged = merge_reports(&reports);
    let mut bytes = serde_json::to_vec_pretty(&merged).expect("report serialize");
    bytes.push(b'\n');
    write(&out.join("report.json"), &bytes)?;
    let (p, r, f1) = merged.percentages();
    println!(
        "total over {} frames: P={p:.2}% R={r:.2}% F1={f1:.2}% (tp={} fp={} fn={})",
        stems.len(),
        merged.tp,
        merged.fp,
        merged.fn_
    );
    Ok(())
}

fn process_frame(
    config: &PipelineConfig,
    input: &Path,
    out: &Path,
    stem: &str,
    window: &TimeWindow,
    stride: u32,
    weights: Option<&(ConvWeights, ConvWeights)>,
) -> Result<EvalReport> {
    // Events -> denoised voxel grid.
    let stream = parse_stream_any(&read(&input.join(format!("{stem}.events.csv")))?)?;
    let (filtered, _) = hot_pixel_filter(&stream, window, config.voxel.theta_hot_hz)?;
    let grid = voxelize(&filtered, window, &config.voxel_params())?;
    let (grid, _) = density_filter(&grid, config.voxel.theta_dens)?;
    write(&out.join(format!("{stem}.grid.evxg")), &write_voxel_grid(&grid))?;

    // Frame -> enhanced, normalized, padded image.
    let image = read_image(&read(&input.join(format!("{stem}.image.evim")))?)?;
    let enhanced = clahe(&image, &config.clahe_params())?;
    let padded = normalize_and_pad(&enhanced)?;
    write(&out.join(format!("{stem}.enhanced.evim")), &write_image(&padded))?;

    // Optional fusion of provided feature-map pairs.
    if let Some((w1, w2)) = weights {
        let f_img = feature_map(&read_image(&read(&input.join(format!("{stem}.feat-img.evim")))?)?)?;
        let f_evt = feature_map(&read_image(&read(&input.join(format!("{stem}.feat-evt.evim")))?)?)?;
        let alpha = acmf_attention(&f_img, &f_evt, w1, w2)?;
        let fused = weighted_fuse(&f_img, &f_evt, &alpha)?;
        write(
            &out.join(format!("{stem}.alpha.evim")),
            &write_image(&unit_image(alpha.as_map())?),
        )?;
        write(
            &out.join(format!("{stem}.fused.evim")),
            &write_image(&unit_image(&fused)?),
        )?;
    }

    // Raw head output -> detections.
    let raw = evfuse_core::detect::read_raw_predictions(&read(&input.join(format!("{stem}.raw.evrp")))?)?;
    let decoded = decode_boxes(&raw, &config.detect.anchors, stride.trailing_zeros(), stride)?;
    let kept = nms(&decoded, config.detect.tau_conf, config.detect.tau_nms);
    write(&out.join(format!("{stem}.dets.json")), &write_detections_json(&kept))?;

    // Detections vs ground truth.
    let gts = read_ground_truth_json(&read(&input.join(format!("{stem}.gt.json")))?)?;
    evaluate(&kept, &gts, config.eval.iou_thresh)
}

/// Frame stems, sorted for a deterministic processing order.
fn discover_stems(input: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(input)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".events.csv") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Unit-range EVIM image as a feature map.
fn feature_map(img: &ImageTensor) -> Result<FeatureMap> {
    if img.range() != ValueRange::Unit {
        return Err(Error::invalid("feature maps must use the unit-range EVIM encoding"));
    }
    FeatureMap::new(img.channels(), img.height(), img.width(), img.data().to_vec())
}

/// Feature map with values in [0, 1] (attention maps, fusions of unit
/// inputs) as a unit-range EVIM image.
fn unit_image(map: &FeatureMap) -> Result<ImageTensor> {
    ImageTensor::new(
        map.channels(),
        map.height(),
        map.width(),
        ValueRange::Unit,
        map.data().to_vec(),
    )
}
