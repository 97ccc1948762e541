//! Detection-head post-processing: box decoding, training loss, and NMS.
//!
//! Raw head outputs are an `(cells_h, cells_w, anchors, 8)` grid of
//! `(t_x, t_y, t_w, t_h, t_obj, t_1, t_2, t_3)` values per pyramid scale.
//! A cell `(i, j)` at scale `s` decodes to image coordinates through the
//! stride `2^s`: center `((sigmoid(t_x) + j) * stride, (sigmoid(t_y) + i) *
//! stride)`, size `anchor * exp(t_w/t_h)`. Confidence is
//! `sigmoid(t_obj) * max_c sigmoid(t_c)` and survivors of confidence
//! thresholding run through greedy per-class NMS.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const FIELDS_PER_ANCHOR: usize = 8;

/// Anchor template in image-scale pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() || !self.h.is_finite() || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "anchor ({}, {}) must have positive finite extent",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box in image pixels, corners `(x0, y0)` top-left exclusive
/// of `(x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bbox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Bbox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x0 < self.x1
            && self.y0 < self.y1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x0, self.y0, self.x1, self.y1
            )))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Intersection-over-union of two boxes; 0 for disjoint boxes.
pub fn iou(a: &Bbox, b: &Bbox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_valid(a, b))
}

fn iou_valid(a: &Bbox, b: &Bbox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// One decoded detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: Bbox,
    /// Object class in `{1, 2, 3}`; always the argmax of `class_scores`.
    pub class_id: u8,
    pub objectness: f64,
    pub class_scores: [f64; NUM_CLASSES],
    /// `objectness * max(class_scores)`.
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(1..=NUM_CLASSES as u8).contains(&self.class_id) {
            return Err(Error::invalid(format!("class {} outside 1..=3", self.class_id)));
        }
        let in_open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_open_unit(self.objectness)
            || !self.class_scores.iter().all(|&s| in_open_unit(s))
            || !in_open_unit(self.confidence)
        {
            return Err(Error::invalid("scores must lie strictly in (0, 1)"));
        }
        let argmax = self
            .class_scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u8 + 1)
            .unwrap();
        let max = self.class_scores[(self.class_id - 1) as usize];
        if self.class_scores.iter().any(|&s| s > max) {
            return Err(Error::invalid(format!(
                "class {} is not the argmax (expected {argmax})",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// Raw head output grid for one pyramid scale.
///
/// Layout: `data[((i * cells_w + j) * anchors + k) * 8 + field]` with field
/// order `(t_x, t_y, t_w, t_h, t_obj, t_1, t_2, t_3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    cells_h: usize,
    cells_w: usize,
    anchors: usize,
    data: Vec<f64>,
}

impl RawPredictions {
    pub fn new(cells_h: usize, cells_w: usize, anchors: usize, data: Vec<f64>) -> Result<Self> {
        if cells_h == 0 || cells_w == 0 || anchors == 0 {
            return Err(Error::invalid("raw predictions: zero dimension"));
        }
        if data.len() != cells_h * cells_w * anchors * FIELDS_PER_ANCHOR {
            return Err(Error::invalid(format!(
                "raw predictions: data length {} does not match ({cells_h}, {cells_w}, {anchors}, 8)",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("raw predictions: values must be finite"));
        }
        Ok(RawPredictions {
            cells_h,
            cells_w,
            anchors,
            data,
        })
    }

    pub fn cells_h(&self) -> usize {
        self.cells_h
    }

    pub fn cells_w(&self) -> usize {
        self.cells_w
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn fields(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let base = ((i * self.cells_w + j) * self.anchors + k) * FIELDS_PER_ANCHOR;
        &self.data[base..base + FIELDS_PER_ANCHOR]
    }
}

// Clamped into the open interval: scores are (0, 1) by invariant, and a
// plain sigmoid saturates to exactly 0.0/1.0 in floating point for |z| > ~37.
fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(f64::EPSILON / 2.0, 1.0 - f64::EPSILON / 2.0)
}

/// Decode every anchor of a raw grid into image-space detections.
///
/// `stride` must equal `2^scale`; the decoded center always lies strictly
/// inside its cell, and box size is the anchor scaled by `exp` of the raw
/// size offsets. Errors if a decoded box is non-finite (size offsets large
/// enough to overflow `exp`).
pub fn decode_boxes(
    raw: &RawPredictions,
    anchors: &[Anchor],
    scale: u32,
    stride: u32,
) -> Result<Vec<Detection>> {
    if anchors.len() != raw.anchors {
        return Err(Error::invalid(format!(
            "decode: grid has {} anchors per cell, got {} templates",
            raw.anchors,
            anchors.len()
        )));
    }
    for a in anchors {
        a.validate()?;
    }
    if stride != 1u32.checked_shl(scale).unwrap_or(0) {
        return Err(Error::invalid(format!(
            "decode: stride {stride} is not 2^scale (scale {scale})"
        )));
    }
    let stride = stride as f64;
    let mut detections = Vec::with_capacity(raw.cells_h * raw.cells_w * raw.anchors);
    for i in 0..raw.cells_h {
        for j in 0..raw.cells_w {
            for (k, anchor) in anchors.iter().enumerate() {
                let f = raw.fields(i, j, k);
                let bx = (sigmoid(f[0]) + j as f64) * stride;
                let by = (sigmoid(f[1]) + i as f64) * stride;
                let bw = anchor.w * f[2].exp();
                let bh = anchor.h * f[3].exp();
                if !(bw.is_finite() && bh.is_finite()) {
                    return Err(Error::invalid(format!(
                        "decode: non-finite box size at cell ({i}, {j}) anchor {k}"
                    )));
                }
                let objectness = sigmoid(f[4]);
                let class_scores = [sigmoid(f[5]), sigmoid(f[6]), sigmoid(f[7])];
                let (best, &score) = class_scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap();
                let bbox = Bbox::new(bx - bw / 2.0, by - bh / 2.0, bx + bw / 2.0, by + bh / 2.0)?;
                detections.push(Detection {
                    bbox,
                    class_id: best as u8 + 1,
                    objectness,
                    class_scores,
                    confidence: objectness * score,
                });
            }
        }
    }
    Ok(detections)
}

/// Per-anchor training targets for one scale.
///
/// `objectness` holds the target for every anchor (1 for positives and 0
/// for negatives under the standard assignment); `positives` carries box
/// regression and class-probability targets for positive anchors only.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub cells_h: usize,
    pub cells_w: usize,
    pub anchors: usize,
    pub objectness: Vec<f64>,
    pub positives: Vec<Option<BoxClassTarget>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxClassTarget {
    /// Raw-space regression targets for `(t_x, t_y, t_w, t_h)`.
    pub box_offsets: [f64; 4],
    /// Probability-space class targets (one-hot for real assignments).
    pub class_probs: [f64; NUM_CLASSES],
}

impl AnchorTargets {
    pub fn negatives(cells_h: usize, cells_w: usize, anchors: usize) -> Self {
        let n = cells_h * cells_w * anchors;
        AnchorTargets {
            cells_h,
            cells_w,
            anchors,
            objectness: vec![0.0; n],
            positives: vec![None; n],
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.cells_w + j) * self.anchors + k
    }

    fn matches(&self, raw: &RawPredictions) -> bool {
        self.cells_h == raw.cells_h && self.cells_w == raw.cells_w && self.anchors == raw.anchors
    }
}

/// Loss components for one or more scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLoss {
    pub total: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
}

/// Loss weights applied per scale: `5 * box + 10 * obj + 1 * cls`.
pub const BOX_WEIGHT: f64 = 5.0;
pub const OBJ_WEIGHT: f64 = 10.0;
pub const CLS_WEIGHT: f64 = 1.0;

/// Single-scale detection loss.
///
/// Box and class losses are mean squared error over positive anchors only
/// (box offsets compared in raw space, class scores after the sigmoid);
/// objectness is MSE of `sigmoid(t_obj)` against the target over all
/// anchors. With no positive anchors the box and class means are 0 by
/// convention.
pub fn detection_loss(raw: &RawPredictions, targets: &AnchorTargets) -> Result<DetectionLoss> {
    if !targets.matches(raw) {
        return Err(Error::invalid("detection_loss: targets shape mismatch"));
    }
    let mut box_sq = 0.0;
    let mut cls_sq = 0.0;
    let mut obj_sq = 0.0;
    let mut positives = 0usize;
    let mut anchors_total = 0usize;
    for i in 0..raw.cells_h {
        for j in 0..raw.cells_w {
            for k in 0..raw.anchors {
                let f = raw.fields(i, j, k);
                let t = targets.index(i, j, k);
                let obj_err = sigmoid(f[4]) - targets.objectness[t];
                obj_sq += obj_err * obj_err;
                anchors_total += 1;
                if let Some(pos) = &targets.positives[t] {
                    positives += 1;
                    for (pred, target) in f[..4].iter().zip(&pos.box_offsets) {
                        let d = pred - target;
                        box_sq += d * d;
                    }
                    for c in 0..NUM_CLASSES {
                        let d = sigmoid(f[5 + c]) - pos.class_probs[c];
                        cls_sq += d * d;
                    }
                }
            }
        }
    }
    let box_loss = if positives == 0 {
        0.0
    } else {
        box_sq / (positives * 4) as f64
    };
    let cls_loss = if positives == 0 {
        0.0
    } else {
        cls_sq / (positives * NUM_CLASSES) as f64
    };
    let obj_loss = obj_sq / anchors_total as f64;
    Ok(DetectionLoss {
        total: BOX_WEIGHT * box_loss + OBJ_WEIGHT * obj_loss + CLS_WEIGHT * cls_loss,
        box_loss,
        obj_loss,
        cls_loss,
    })
}

/// Sum of per-scale losses, each weighted 5/10/1.
pub fn total_detection_loss(scales: &[(&RawPredictions, &AnchorTargets)]) -> Result<DetectionLoss> {
    let mut acc = DetectionLoss {
        total: 0.0,
        box_loss: 0.0,
        obj_loss: 0.0,
        cls_loss: 0.0,
    };
    for (raw, targets) in scales {
        let l = detection_loss(raw, targets)?;
        acc.total += l.total;
        acc.box_loss += l.box_loss;
        acc.obj_loss += l.obj_loss;
        acc.cls_loss += l.cls_loss;
    }
    Ok(acc)
}

/// How ground-truth boxes are assigned to anchors for loss computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignStrategy {
    /// One positive per ground truth: the anchor shape with the best IoU
    /// against the box, at the cell containing the box center.
    BestAnchor,
    /// Every anchor shape at the center cell whose IoU with the box meets
    /// the threshold is positive (falls back to the best anchor when none
    /// qualify).
    AllAnchorsAboveIou(f64),
}

/// Build per-anchor targets for one scale from ground-truth boxes.
pub fn assign_targets(
    gts: &[(Bbox, u8)],
    anchors: &[Anchor],
    cells_h: usize,
    cells_w: usize,
    stride: u32,
    strategy: AssignStrategy,
) -> Result<AnchorTargets> {
    for a in anchors {
        a.validate()?;
    }
    if anchors.is_empty() {
        return Err(Error::invalid("assign_targets: anchors must not be empty"));
    }
    if stride == 0 {
        return Err(Error::invalid("assign_targets: stride must be positive"));
    }
    if cells_h == 0 || cells_w == 0 {
        return Err(Error::invalid("assign_targets: zero grid dimension"));
    }
    let mut targets = AnchorTargets::negatives(cells_h, cells_w, anchors.len());
    let stride_f = stride as f64;
    for (bbox, class) in gts {
        bbox.validate()?;
        if !(1..=NUM_CLASSES as u8).contains(class) {
            return Err(Error::invalid(format!("assign_targets: class {class} outside 1..=3")));
        }
        let cx = (bbox.x0 + bbox.x1) / 2.0;
        let cy = (bbox.y0 + bbox.y1) / 2.0;
        let j = ((cx / stride_f).floor() as isize).clamp(0, cells_w as isize - 1) as usize;
        let i = ((cy / stride_f).floor() as isize).clamp(0, cells_h as isize - 1) as usize;
        let w = bbox.x1 - bbox.x0;
        let h = bbox.y1 - bbox.y0;
        // IoU of the anchor shape against the box shape, both centered at
        // the origin: shape similarity independent of position.
        let shape_iou = |a: &Anchor| {
            let inter = a.w.min(w) * a.h.min(h);
            inter / (a.w * a.h + w * h - inter)
        };
        let best = anchors
            .iter()
            .enumerate()
            .max_by(|a, b| shape_iou(a.1).total_cmp(&shape_iou(b.1)))
            .map(|(k, _)| k)
            .expect("anchors is non-empty");
        let selected: Vec<usize> = match strategy {
            AssignStrategy::BestAnchor => vec![best],
            AssignStrategy::AllAnchorsAboveIou(th) => {
                let qualifying: Vec<usize> = (0..anchors.len())
                    .filter(|&k| shape_iou(&anchors[k]) >= th)
                    .collect();
                if qualifying.is_empty() {
                    vec![best]
                } else {
                    qualifying
                }
            }
        };
        for k in selected {
            let a = &anchors[k];
            let tx = logit((cx / stride_f - j as f64).clamp(1e-6, 1.0 - 1e-6));
            let ty = logit((cy / stride_f - i as f64).clamp(1e-6, 1.0 - 1e-6));
            let tw = (w / a.w).ln();
            let th = (h / a.h).ln();
            let mut class_probs = [0.0; NUM_CLASSES];
            class_probs[(class - 1) as usize] = 1.0;
            let idx = targets.index(i, j, k);
            targets.objectness[idx] = 1.0;
            targets.positives[idx] = Some(BoxClassTarget {
                box_offsets: [tx, ty, tw, th],
                class_probs,
            });
        }
    }
    Ok(targets)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Confidence thresholding followed by greedy per-class NMS.
///
/// Detections below `tau_conf` are dropped. Then, per class in descending
/// confidence (ties broken by lower original index), each kept detection
/// suppresses remaining same-class detections with IoU strictly greater
/// than `tau_nms`. The result is sorted by confidence descending.
pub fn nms(dets: &[Detection], tau_conf: f64, tau_nms: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= tau_conf)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        keep.push(dets[i].clone());
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if suppressed[later] || dets[j].class_id != dets[i].class_id {
                continue;
            }
            if iou_valid(&dets[j].bbox, &dets[i].bbox) > tau_nms {
                suppressed[later] = true;
            }
        }
    }
    keep
}

const EVRP_MAGIC: &[u8; 4] = b"EVRP";
const EVRP_VERSION: u32 = 1;

/// Encode raw predictions: magic, version, four little-endian u32 dims
/// (cells_h, cells_w, anchors, fields = 8), then f32 values in
/// `(i, j, anchor, field)` order.
pub fn write_raw_predictions(raw: &RawPredictions) -> Vec<u8> {
    let mut w = Writer::new(EVRP_MAGIC, EVRP_VERSION);
    w.u32(raw.cells_h as u32);
    w.u32(raw.cells_w as u32);
    w.u32(raw.anchors as u32);
    w.u32(FIELDS_PER_ANCHOR as u32);
    w.f32_block(&raw.data);
    w.into_bytes()
}

pub fn read_raw_predictions(bytes: &[u8]) -> Result<RawPredictions> {
    let mut r = Reader::new(bytes);
    r.magic(EVRP_MAGIC)?;
    r.version(EVRP_VERSION)?;
    let cells_h = r.u32()? as usize;
    let cells_w = r.u32()? as usize;
    let anchors = r.u32()? as usize;
    let fields = r.u32()? as usize;
    if fields != FIELDS_PER_ANCHOR {
        return Err(Error::parse_byte(20, format!("expected 8 fields per anchor, got {fields}")));
    }
    if cells_h == 0 || cells_w == 0 || anchors == 0 {
        return Err(Error::parse_byte(8, "zero dimension"));
    }
    let count = cells_h
        .checked_mul(cells_w)
        .and_then(|v| v.checked_mul(anchors))
        .and_then(|v| v.checked_mul(FIELDS_PER_ANCHOR))
        .ok_or_else(|| Error::parse_byte(8, "shape overflows"))?;
    let data = r.f32_block(count, "raw predictions")?;
    r.finish()?;
    RawPredictions::new(cells_h, cells_w, anchors, data).map_err(|e| Error::parse_byte(24, e.to_string()))
}

/// Anchor-template file consumed by `evfuse decode`.
///
/// Anchor values are dataset-dependent (there is no published operating
/// set); the `note` field is free-form provenance for whoever tunes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorsFile {
    pub anchors: Vec<Anchor>,
    pub stride: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AnchorsFile {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::invalid("anchors file: anchors must not be empty"));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            a.validate()
                .map_err(|e| Error::invalid(format!("anchors file: anchors[{i}]: {e}")))?;
        }
        if self.stride == 0 || !self.stride.is_power_of_two() {
            return Err(Error::invalid(format!(
                "anchors file: stride must be a positive power of two, got {}",
                self.stride
            )));
        }
        Ok(())
    }

    /// Pyramid scale implied by the stride.
    pub fn scale(&self) -> u32 {
        self.stride.trailing_zeros()
    }
}

pub fn write_anchors_json(anchors: &AnchorsFile) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(anchors).expect("anchors serialize");
    bytes.push(b'\n');
    bytes
}

pub fn read_anchors_json(bytes: &[u8]) -> Result<AnchorsFile> {
    let file: AnchorsFile = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        location: crate::error::Location::Line(e.line()),
        message: format!("anchors JSON: {e}"),
    })?;
    file.validate()?;
    Ok(file)
}

#[derive(Serialize, Deserialize)]
struct DetectionJson {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: u8,
    objectness: f64,
    scores: [f64; NUM_CLASSES],
    confidence: f64,
}

/// Serialize detections to the JSON interchange format.
pub fn write_detections_json(dets: &[Detection]) -> Vec<u8> {
    let records: Vec<DetectionJson> = dets
        .iter()
        .map(|d| DetectionJson {
            bbox: [d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1],
            class: d.class_id,
            objectness: d.objectness,
            scores: d.class_scores,
            confidence: d.confidence,
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&records).expect("detections serialize");
    bytes.push(b'\n');
    bytes
}

/// Parse and validate the detections JSON format.
pub fn read_detections_json(bytes: &[u8]) -> Result<Vec<Detection>> {
    let records: Vec<DetectionJson> = serde_json::from_slice(bytes)
        .map_err(|e| Error::Parse {
            location: crate::error::Location::Line(e.line()),
            message: format!("detections JSON: {e}"),
        })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let det = Detection {
                bbox: Bbox {
                    x0: r.bbox[0],
                    y0: r.bbox[1],
                    x1: r.bbox[2],
                    y1: r.bbox[3],
                },
                class_id: r.class,
                objectness: r.objectness,
                class_scores: r.scores,
                confidence: r.confidence,
            };
            det.validate()
                .map_err(|e| Error::invalid(format!("detection {i}: {e}")))?;
            Ok(det)
        })
        .collect()
}
