//! `evfuse`: command-line front end for the fusion-detector pipeline.
//!
//! Subcommands map one-to-one onto the library stages; a shared JSON config
//! (via `--config`, the `EVFUSE_CONFIG` environment variable, or built-in
//! defaults) supplies any value a flag does not override. Exit codes: 0 on
//! success, 1 on validation errors, 2 on I/O errors.

mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use evfuse_core::config::PipelineConfig;
use evfuse_core::detect::{
    decode_boxes, nms, read_anchors_json, read_detections_json, read_raw_predictions,
    write_detections_json,
};
use evfuse_core::enhance::{
    clahe, degrade, normalize_and_pad, read_image, write_image, ClaheParams, ImageTensor,
    ValueRange,
};
use evfuse_core::error::{Error, Result};
use evfuse_core::eval::{evaluate, read_ground_truth_json};
use evfuse_core::events::{hot_pixel_filter, parse_stream_any, TimeWindow};
use evfuse_core::fusion::simulate_fusion;
use evfuse_core::voxel::{density_filter, voxelize, write_voxel_grid, VoxelParams};

#[derive(Parser)]
#[command(name = "evfuse", version, about = "Event/RGB fusion detection pipeline tools")]
struct Cli {
    /// JSON config file; EVFUSE_CONFIG is the fallback, defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Window, denoise, and voxelize an event CSV into an EVXG grid.
    Voxelize {
        /// Event CSV input.
        #[arg(long)]
        events: PathBuf,
        /// Window start in microseconds.
        #[arg(long)]
        t0: Option<u64>,
        /// Window length in microseconds.
        #[arg(long)]
        dt: Option<u64>,
        /// Temporal bins per polarity.
        #[arg(long)]
        bins: Option<usize>,
        /// Hot-pixel rate threshold in Hz.
        #[arg(long = "theta-hot")]
        theta_hot: Option<f64>,
        /// Minimum per-channel event mass.
        #[arg(long = "theta-dens")]
        theta_dens: Option<f64>,
        /// Output EVXG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// CLAHE-enhance an EVIM image, optionally degrading it first and
    /// normalizing/padding afterwards.
    Enhance {
        /// Input EVIM image.
        #[arg(long = "in")]
        input: PathBuf,
        /// CLAHE tiles per side.
        #[arg(long)]
        tiles: Option<usize>,
        /// CLAHE normalized clip limit.
        #[arg(long)]
        clip: Option<f64>,
        /// Output EVIM path.
        #[arg(long)]
        out: PathBuf,
        /// Divide by 255 and zero-pad to the next multiple of 32.
        #[arg(long, action = ArgAction::SetTrue)]
        pad32: bool,
        /// Apply the low-light degradation model before CLAHE with this
        /// attenuation factor (requires --degrade-sigma).
        #[arg(long = "degrade-gamma", requires = "degrade_sigma")]
        degrade_gamma: Option<f64>,
        /// Gaussian noise standard deviation for the degradation model.
        #[arg(long = "degrade-sigma", requires = "degrade_gamma")]
        degrade_sigma: Option<f64>,
    },
    /// Monte-Carlo check of the minimum-variance fusion weights.
    FuseSim {
        /// Image-observation noise variance.
        #[arg(long = "sigma-img")]
        sigma_img: f64,
        /// Event-observation noise variance.
        #[arg(long = "sigma-evt")]
        sigma_evt: f64,
        /// Number of Monte-Carlo draws.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Output JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode an EVRP raw-prediction grid into detections JSON.
    Decode {
        /// Raw head output (EVRP).
        #[arg(long)]
        raw: PathBuf,
        /// Anchor template JSON file.
        #[arg(long)]
        anchors: PathBuf,
        /// Confidence threshold.
        #[arg(long)]
        conf: Option<f64>,
        /// NMS IoU threshold.
        #[arg(long)]
        nms: Option<f64>,
        /// Pixels per cell; overrides the anchors-file stride.
        #[arg(long)]
        stride: Option<u32>,
        /// Output detections JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Match detections against ground truth and report P/R/F1.
    Eval {
        /// Detections JSON.
        #[arg(long)]
        dets: PathBuf,
        /// Ground-truth JSON.
        #[arg(long)]
        gt: PathBuf,
        /// IoU matching threshold.
        #[arg(long)]
        iou: Option<f64>,
        /// Output JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Also write a plot-ready CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run voxelize, enhance, optional fusion, decode, and eval over a
    /// directory of paired inputs.
    Pipeline {
        /// Directory of per-frame inputs (`<stem>.events.csv` and friends).
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the produced artifacts.
        #[arg(long)]
        out: PathBuf,
        /// 1x1 attention convolution weights (EVWT); enables the fuse stage.
        #[arg(long, requires = "w2")]
        w1: Option<PathBuf>,
        /// 3x3 attention convolution weights (EVWT).
        #[arg(long, requires = "w1")]
        w2: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("EVFUSE_CONFIG").map(PathBuf::from));
    let mut config = match path {
        Some(p) => PipelineConfig::from_json(&read_file(&p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Voxelize {
            ref events,
            t0,
            dt,
            bins,
            theta_hot,
            theta_dens,
            ref out,
        } => {
            let stream = parse_stream_any(&read_file(events)?)?;
            let window = TimeWindow::new(
                t0.unwrap_or(config.window.t0_us),
                dt.unwrap_or(config.window.dt_us),
            )?;
            let params = VoxelParams {
                bins: bins.unwrap_or(config.voxel.bins),
                theta_dens: theta_dens.unwrap_or(config.voxel.theta_dens),
            };
            params.validate()?;
            let theta_hot = theta_hot.unwrap_or(config.voxel.theta_hot_hz);
            let (filtered, removed) = hot_pixel_filter(&stream, &window, theta_hot)?;
            let grid = voxelize(&filtered, &window, &params)?;
            let (grid, zeroed) = density_filter(&grid, params.theta_dens)?;
            write_file(out, &write_voxel_grid(&grid))?;
            println!(
                "voxelized {} events into ({}, {}, {}); {} hot pixels removed, {} sparse channels zeroed",
                filtered.len(),
                grid.channels(),
                grid.height(),
                grid.width(),
                removed.len(),
                zeroed.len()
            );
            Ok(())
        }
        Command::Enhance {
            ref input,
            tiles,
            clip,
            ref out,
            pad32,
            degrade_gamma,
            degrade_sigma,
        } => {
            let mut img = read_image(&read_file(input)?)?;
            if let (Some(gamma), Some(sigma)) = (degrade_gamma, degrade_sigma) {
                img = quantize_to_byte(&degrade(&to_unit(&img)?, gamma, sigma, config.seed)?)?;
            }
            let params = ClaheParams {
                tile_grid: tiles.unwrap_or(config.clahe.tiles),
                clip_limit: clip.unwrap_or(config.clahe.clip_limit),
                gray_levels: config.clahe.gray_levels,
            };
            let mut enhanced = clahe(&img, &params)?;
            if pad32 {
                enhanced = normalize_and_pad(&enhanced)?;
            }
            write_file(out, &write_image(&enhanced))?;
            println!(
                "enhanced ({}, {}, {}) image{}",
                enhanced.channels(),
                enhanced.height(),
                enhanced.width(),
                if pad32 { ", normalized and padded" } else { "" }
            );
            Ok(())
        }
        Command::FuseSim {
            sigma_img,
            sigma_evt,
            samples,
            ref out,
        } => {
            let report = simulate_fusion(sigma_img, sigma_evt, samples, config.seed)?;
            let mut bytes = serde_json::to_vec_pretty(&report).expect("report serialize");
            bytes.push(b'\n');
            write_file(out, &bytes)?;
            println!(
                "alpha* = {:.6}, analytic variance {:.6}, empirical variance {:.6} ({} draws)",
                report.alpha_star,
                report.analytic_variance_at_star,
                report.empirical_variance_at_star,
                report.samples
            );
            Ok(())
        }
        Command::Decode {
            ref raw,
            ref anchors,
            conf,
            nms: nms_thresh,
            stride,
            ref out,
        } => {
            let raw = read_raw_predictions(&read_file(raw)?)?;
            let anchors_file = read_anchors_json(&read_file(anchors)?)?;
            let stride = stride.unwrap_or(anchors_file.stride);
            if stride == 0 || !stride.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "--stride must be a positive power of two, got {stride}"
                )));
            }
            let decoded = decode_boxes(
                &raw,
                &anchors_file.anchors,
                stride.trailing_zeros(),
                stride,
            )?;
            let kept = nms(
                &decoded,
                conf.unwrap_or(config.detect.tau_conf),
                nms_thresh.unwrap_or(config.detect.tau_nms),
            );
            write_file(out, &write_detections_json(&kept))?;
            println!("decoded {} anchors, {} detections after NMS", decoded.len(), kept.len());
            Ok(())
        }
        Command::Eval {
            ref dets,
            ref gt,
            iou,
            ref out,
            ref csv,
        } => {
            let dets = read_detections_json(&read_file(dets)?)?;
            let gts = read_ground_truth_json(&read_file(gt)?)?;
            let report = evaluate(&dets, &gts, iou.unwrap_or(config.eval.iou_thresh))?;
            let mut bytes = serde_json::to_vec_pretty(&report).expect("report serialize");
            bytes.push(b'\n');
            write_file(out, &bytes)?;
            if let Some(csv_path) = csv {
                write_file(csv_path, report.to_csv().as_bytes())?;
            }
            let (p, r, f1) = report.percentages();
            println!(
                "P={p:.2}% R={r:.2}% F1={f1:.2}% (tp={} fp={} fn={})",
                report.tp, report.fp, report.fn_
            );
            Ok(())
        }
        Command::Pipeline {
            ref input,
            ref out,
            ref w1,
            ref w2,
        } => pipeline::run(&config, input, out, w1.as_deref(), w2.as_deref()),
    }
}

/// Convert a byte-range image to the unit range; unit images pass through.
fn to_unit(img: &ImageTensor) -> Result<ImageTensor> {
    match img.range() {
        ValueRange::Unit => Ok(img.clone()),
        ValueRange::Byte => ImageTensor::new(
            img.channels(),
            img.height(),
            img.width(),
            ValueRange::Unit,
            img.data().iter().map(|&v| v / 255.0).collect(),
        ),
    }
}

/// Quantize a unit-range image to integer byte values.
fn quantize_to_byte(img: &ImageTensor) -> Result<ImageTensor> {
    ImageTensor::new(
        img.channels(),
        img.height(),
        img.width(),
        ValueRange::Byte,
        img.data().iter().map(|&v| (v * 255.0).round()).collect(),
    )
}
