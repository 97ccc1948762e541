//! Independent oracle implementations shared by the property and acceptance
//! suites. Everything here recomputes results from the published formulas
//! with the most literal possible code (flat loops, no shared helpers), so
//! agreement with the library is a real two-route check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evfuse_core::detect::{Anchor, Bbox, Detection, NUM_CLASSES};
use evfuse_core::enhance::{ImageTensor, ValueRange};
use evfuse_core::eval::GroundTruth;
use evfuse_core::events::{Event, EventStream, Polarity, TimeWindow};

/// Random sorted event stream with the given size bounds.
pub fn random_stream(
    rng: &mut ChaCha8Rng,
    width: u16,
    height: u16,
    min_events: usize,
    max_events: usize,
    t_max: u64,
) -> EventStream {
    let n = rng.gen_range(min_events..=max_events);
    let mut times: Vec<u64> = (0..n).map(|_| rng.gen_range(0..=t_max)).collect();
    times.sort_unstable();
    let events = times
        .into_iter()
        .map(|t| Event {
            x: rng.gen_range(0..width),
            y: rng.gen_range(0..height),
            t,
            polarity: if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
        })
        .collect();
    EventStream::new(width, height, events).unwrap()
}

/// Brute-force voxelization: for every event inside the window, loop over
/// every bin and scatter `max(0, 1 - |tau - b|)`. Returns a dense
/// `(2B, H, W)` buffer laid out like `VoxelGrid` (negative block first).
pub fn scatter_voxel_oracle(
    stream: &EventStream,
    window: &TimeWindow,
    bins: usize,
) -> Vec<f64> {
    let (w, h) = (stream.sensor_width() as usize, stream.sensor_height() as usize);
    let mut grid = vec![0.0f64; 2 * bins * h * w];
    for e in stream.events() {
        if e.t < window.t0() || e.t >= window.end() {
            continue;
        }
        let tau = (e.t - window.t0()) as f64 / window.dt() as f64 * (bins - 1) as f64;
        let q = match e.polarity {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        };
        for b in 0..bins {
            let k = (1.0 - (tau - b as f64).abs()).max(0.0);
            if k > 0.0 {
                let channel = q * bins + b;
                grid[(channel * h + e.y as usize) * w + e.x as usize] += k;
            }
        }
    }
    grid
}

/// Global (single-histogram) clipped equalization: the reference output of
/// CLAHE with a 1x1 tile grid. Clipping, CDF, and mapping written out flat.
pub fn global_equalization_oracle(
    img: &ImageTensor,
    clip_limit: f64,
    gray_levels: usize,
) -> ImageTensor {
    let pixels = (img.height() * img.width()) as f64;
    let mut out = Vec::with_capacity(img.channels() * img.height() * img.width());
    for c in 0..img.channels() {
        let mut hist = vec![0u64; gray_levels];
        for y in 0..img.height() {
            for x in 0..img.width() {
                hist[img.get(c, y, x) as usize] += 1;
            }
        }
        let kappa = clip_limit * pixels / gray_levels as f64;
        let mut excess = 0.0;
        for &count in &hist {
            if count as f64 > kappa {
                excess += count as f64 - kappa;
            }
        }
        let share = excess / gray_levels as f64;
        let mut lut = vec![0.0f64; gray_levels];
        let mut cdf = 0.0;
        for (v, &count) in hist.iter().enumerate() {
            cdf += (count as f64).min(kappa) + share;
            lut[v] = ((gray_levels - 1) as f64 * cdf / pixels)
                .round()
                .clamp(0.0, (gray_levels - 1) as f64);
        }
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.push(lut[img.get(c, y, x) as usize]);
            }
        }
    }
    ImageTensor::new(img.channels(), img.height(), img.width(), ValueRange::Byte, out).unwrap()
}

/// Full multi-tile CLAHE reference: independent tiling, clipping, LUT, and
/// center bookkeeping, with the documented bilinear blend
/// `(1-fy) * ((1-fx) tl + fx tr) + fy * ((1-fx) bl + fx br)`.
pub fn clahe_oracle(img: &ImageTensor, tiles: usize, clip_limit: f64, gray_levels: usize) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let tile_h = h.div_ceil(tiles);
    let tile_w = w.div_ceil(tiles);
    let row_ranges: Vec<(usize, usize)> = (0..tiles)
        .map(|k| (k * tile_h, ((k + 1) * tile_h).min(h)))
        .collect();
    let col_ranges: Vec<(usize, usize)> = (0..tiles)
        .map(|k| (k * tile_w, ((k + 1) * tile_w).min(w)))
        .collect();
    let row_centers: Vec<f64> = row_ranges.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();
    let col_centers: Vec<f64> = col_ranges.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();

    let locate = |centers: &[f64], coord: f64| -> (usize, usize, f64) {
        if coord <= centers[0] || centers.len() == 1 {
            return (0, 0, 0.0);
        }
        if coord >= *centers.last().unwrap() {
            return (centers.len() - 1, centers.len() - 1, 0.0);
        }
        let mut hi = 1;
        while centers[hi] <= coord {
            hi += 1;
        }
        (hi - 1, hi, (coord - centers[hi - 1]) / (centers[hi] - centers[hi - 1]))
    };

    let mut out = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        let mut luts = vec![vec![vec![0.0f64; gray_levels]; tiles]; tiles];
        for (ti, &(r0, r1)) in row_ranges.iter().enumerate() {
            for (tj, &(c0, c1)) in col_ranges.iter().enumerate() {
                let mut hist = vec![0.0f64; gray_levels];
                for y in r0..r1 {
                    for x in c0..c1 {
                        hist[img.get(c, y, x) as usize] += 1.0;
                    }
                }
                let pixels = ((r1 - r0) * (c1 - c0)) as f64;
                let kappa = clip_limit * pixels / gray_levels as f64;
                let excess: f64 = hist.iter().map(|&v| (v - kappa).max(0.0)).sum();
                let share = excess / gray_levels as f64;
                let mut cdf = 0.0;
                for (v, lut) in luts[ti][tj].iter_mut().enumerate() {
                    cdf += hist[v].min(kappa) + share;
                    *lut = ((gray_levels - 1) as f64 * cdf / pixels)
                        .round()
                        .clamp(0.0, (gray_levels - 1) as f64);
                }
            }
        }
        for y in 0..h {
            let (ty0, ty1, fy) = locate(&row_centers, y as f64);
            for x in 0..w {
                let (tx0, tx1, fx) = locate(&col_centers, x as f64);
                let v = img.get(c, y, x) as usize;
                let tl = luts[ty0][tx0][v];
                let tr = luts[ty0][tx1][v];
                let bl = luts[ty1][tx0][v];
                let br = luts[ty1][tx1][v];
                let top = (1.0 - fx) * tl + fx * tr;
                let bottom = (1.0 - fx) * bl + fx * br;
                let blended = (1.0 - fy) * top + fy * bottom;
                out.push(blended.round().clamp(0.0, (gray_levels - 1) as f64));
            }
        }
    }
    ImageTensor::new(img.channels(), h, w, ValueRange::Byte, out).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scalar reference decode of one anchor's raw fields.
pub fn decode_scalar_oracle(
    fields: &[f64],
    anchor: &Anchor,
    i: usize,
    j: usize,
    stride: f64,
) -> ([f64; 4], f64, [f64; NUM_CLASSES], f64) {
    let bx = (sigmoid(fields[0]) + j as f64) * stride;
    let by = (sigmoid(fields[1]) + i as f64) * stride;
    let bw = anchor.w * fields[2].exp();
    let bh = anchor.h * fields[3].exp();
    let corners = [bx - bw / 2.0, by - bh / 2.0, bx + bw / 2.0, by + bh / 2.0];
    let obj = sigmoid(fields[4]);
    let scores = [sigmoid(fields[5]), sigmoid(fields[6]), sigmoid(fields[7])];
    let best = scores.iter().cloned().fold(f64::MIN, f64::max);
    (corners, obj, scores, obj * best)
}

/// Flat-loop reference for the multi-scale detection loss with the 5/10/1
/// weights. Targets are in the same spaces as the library: raw box offsets,
/// probability-space objectness and class targets.
pub struct OracleScale {
    pub raw: Vec<f64>,
    pub cells_h: usize,
    pub cells_w: usize,
    pub anchors: usize,
    /// Per anchor: objectness target and optional (box, class) targets.
    pub targets: Vec<OracleTarget>,
}

/// Objectness target plus optional (box offsets, class probabilities).
pub type OracleTarget = (f64, Option<([f64; 4], [f64; NUM_CLASSES])>);

pub fn loss_loop_oracle(scales: &[OracleScale]) -> (f64, f64, f64, f64) {
    let mut total = 0.0;
    let mut box_total = 0.0;
    let mut obj_total = 0.0;
    let mut cls_total = 0.0;
    for s in scales {
        let mut box_sum = 0.0;
        let mut box_n = 0usize;
        let mut obj_sum = 0.0;
        let mut obj_n = 0usize;
        let mut cls_sum = 0.0;
        let mut cls_n = 0usize;
        for a in 0..s.cells_h * s.cells_w * s.anchors {
            let f = &s.raw[a * 8..a * 8 + 8];
            let (obj_target, pos) = &s.targets[a];
            let d = sigmoid(f[4]) - obj_target;
            obj_sum += d * d;
            obj_n += 1;
            if let Some((box_t, cls_t)) = pos {
                for c in 0..4 {
                    let d = f[c] - box_t[c];
                    box_sum += d * d;
                    box_n += 1;
                }
                for c in 0..NUM_CLASSES {
                    let d = sigmoid(f[5 + c]) - cls_t[c];
                    cls_sum += d * d;
                    cls_n += 1;
                }
            }
        }
        let box_loss = if box_n == 0 { 0.0 } else { box_sum / box_n as f64 };
        let cls_loss = if cls_n == 0 { 0.0 } else { cls_sum / cls_n as f64 };
        let obj_loss = obj_sum / obj_n as f64;
        total += 5.0 * box_loss + 10.0 * obj_loss + 1.0 * cls_loss;
        box_total += box_loss;
        obj_total += obj_loss;
        cls_total += cls_loss;
    }
    (total, box_total, obj_total, cls_total)
}

/// Quadruple-loop reference for the attention forward pass:
/// sigmoid(conv3x3_pad1(relu(conv1x1([img; evt])))), everything written as
/// direct nested loops over flat buffers.
#[allow(clippy::too_many_arguments)]
pub fn acmf_attention_oracle(
    f_img: &[f64],
    f_evt: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> Vec<f64> {
    let plane = height * width;
    let mut stacked = vec![0.0; 2 * channels * plane];
    stacked[..channels * plane].copy_from_slice(f_img);
    stacked[channels * plane..].copy_from_slice(f_evt);

    // 1x1 convolution from 2C to C channels, then ReLU.
    let mut hidden = vec![0.0; channels * plane];
    for oc in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let mut acc = b1[oc];
                for ic in 0..2 * channels {
                    acc += stacked[ic * plane + y * width + x] * w1[oc * 2 * channels + ic];
                }
                hidden[oc * plane + y * width + x] = acc.max(0.0);
            }
        }
    }

    // 3x3 convolution with zero padding 1, then sigmoid.
    let mut out = vec![0.0; channels * plane];
    for oc in 0..channels {
        for y in 0..height as isize {
            for x in 0..width as isize {
                let mut acc = b2[oc];
                for ic in 0..channels {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (iy, ix) = (y + ky, x + kx);
                            if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize {
                                continue;
                            }
                            let w_idx = ((oc * channels + ic) * 3 + (ky + 1) as usize) * 3
                                + (kx + 1) as usize;
                            acc += hidden[ic * plane + iy as usize * width + ix as usize]
                                * w2[w_idx];
                        }
                    }
                }
                out[oc * plane + y as usize * width + x as usize] = 1.0 / (1.0 + (-acc).exp());
            }
        }
    }
    out
}

fn oracle_iou(a: &Bbox, b: &Bbox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x1 - a.x0) * (a.y1 - a.y0);
    let area_b = (b.x1 - b.x0) * (b.y1 - b.y0);
    if inter <= 0.0 {
        0.0
    } else {
        inter / (area_a + area_b - inter)
    }
}

/// O(n^2) suppression oracle: a detection survives iff it meets the
/// confidence threshold and no higher-priority surviving detection of the
/// same class overlaps it beyond `tau_nms`. Priority is (confidence desc,
/// index asc).
pub fn nms_brute_oracle(dets: &[Detection], tau_conf: f64, tau_nms: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= tau_conf)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut survives: Vec<usize> = Vec::new();
    for &candidate in &order {
        let mut suppressed = false;
        for &winner in &survives {
            if dets[winner].class_id == dets[candidate].class_id
                && oracle_iou(&dets[winner].bbox, &dets[candidate].bbox) > tau_nms
            {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            survives.push(candidate);
        }
    }
    survives.into_iter().map(|i| dets[i].clone()).collect()
}

/// Exhaustive matching oracle: follow the same confidence order as the
/// library but branch over every maximal-IoU choice when several unmatched
/// ground truths tie. Returns all reachable (tp, fp, fn) count triples.
pub fn match_exhaustive_oracle(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<(usize, usize, usize)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut outcomes = Vec::new();
    let mut taken = vec![false; gts.len()];
    recurse(dets, gts, iou_thresh, &order, 0, 0, &mut taken, &mut outcomes);
    outcomes.sort();
    outcomes.dedup();
    outcomes
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    order: &[usize],
    pos: usize,
    tp: usize,
    taken: &mut Vec<bool>,
    outcomes: &mut Vec<(usize, usize, usize)>,
) {
    if pos == order.len() {
        outcomes.push((tp, dets.len() - tp, gts.len() - tp));
        return;
    }
    let det = &dets[order[pos]];
    let mut best = 0.0f64;
    let mut candidates: Vec<usize> = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        if taken[gi] || gt.class_id != det.class_id {
            continue;
        }
        let overlap = oracle_iou(&det.bbox, &gt.bbox);
        if overlap < iou_thresh {
            continue;
        }
        if overlap > best {
            best = overlap;
            candidates.clear();
            candidates.push(gi);
        } else if overlap == best {
            candidates.push(gi);
        }
    }
    if candidates.is_empty() {
        recurse(dets, gts, iou_thresh, order, pos + 1, tp, taken, outcomes);
    } else {
        for gi in candidates {
            taken[gi] = true;
            recurse(dets, gts, iou_thresh, order, pos + 1, tp + 1, taken, outcomes);
            taken[gi] = false;
        }
    }
}

/// Random valid detection for the NMS and matching oracles.
pub fn random_detection(rng: &mut ChaCha8Rng, extent: f64) -> Detection {
    let x0 = rng.gen_range(0.0..extent);
    let y0 = rng.gen_range(0.0..extent);
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    let class_id: u8 = rng.gen_range(1..=NUM_CLASSES as u8);
    let mut scores = [0.0; NUM_CLASSES];
    for s in &mut scores {
        *s = rng.gen_range(0.01..0.5);
    }
    let best = rng.gen_range(0.5..0.99);
    scores[(class_id - 1) as usize] = best;
    let objectness = rng.gen_range(0.01..0.99);
    Detection {
        bbox: Bbox::new(x0, y0, x0 + w, y0 + h).unwrap(),
        class_id,
        objectness,
        class_scores: scores,
        confidence: objectness * best,
    }
}

pub fn random_ground_truth(rng: &mut ChaCha8Rng, extent: f64) -> GroundTruth {
    let x0 = rng.gen_range(0.0..extent);
    let y0 = rng.gen_range(0.0..extent);
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    GroundTruth {
        bbox: Bbox::new(x0, y0, x0 + w, y0 + h).unwrap(),
        class_id: rng.gen_range(1..=NUM_CLASSES as u8),
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
