//! Detection evaluation: greedy IoU matching and precision/recall/F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::{iou, Bbox, Detection, NUM_CLASSES};
use crate::error::{Error, Result};

/// One annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: Bbox,
    pub class_id: u8,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(1..=NUM_CLASSES as u8).contains(&self.class_id) {
            return Err(Error::invalid(format!("class {} outside 1..=3", self.class_id)));
        }
        Ok(())
    }
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, ground-truth index)` pairs for the true positives.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy confidence-descending matching at a fixed IoU threshold.
///
/// Detections are visited in descending confidence (equal confidences keep
/// input order). A detection is a true positive if some still-unmatched
/// ground truth of the same class has IoU >= `iou_thresh` (it takes the
/// highest-IoU one); otherwise it is a false positive. Each ground truth
/// matches at most once; duplicates beyond the first count as false
/// positives, and unmatched ground truths are false negatives.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<MatchResult> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::invalid("match_detections: iou threshold must lie in [0, 1]"));
    }
    for d in dets {
        d.validate()?;
    }
    for g in gts {
        g.validate()?;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));

    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.class_id != det.class_id {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox)?;
            if overlap >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            pairs.push((di, gi));
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    })
}

/// Precision/recall/F1 summary with a per-class breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Fractions in `[0, 1]`; the zero-denominator convention is 0.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: BTreeMap<u8, ClassReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall, and F1 from raw counts. Zero denominators yield 0
/// (the conservative convention used by detection toolkits).
pub fn compute_prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Match and summarize one image (or a whole dataset when the inputs are
/// concatenated with disjoint boxes per image).
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Result<EvalReport> {
    let result = match_detections(dets, gts, iou_thresh)?;
    let mut class_counts: BTreeMap<u8, (usize, usize, usize)> = BTreeMap::new();
    for class in 1..=NUM_CLASSES as u8 {
        let n_dets = dets.iter().filter(|d| d.class_id == class).count();
        let n_gts = gts.iter().filter(|g| g.class_id == class).count();
        if n_dets + n_gts > 0 {
            class_counts.insert(class, (0, n_dets, n_gts));
        }
    }
    for &(di, _) in &result.pairs {
        let entry = class_counts
            .get_mut(&dets[di].class_id)
            .expect("matched class is present");
        entry.0 += 1;
    }
    Ok(report_from_counts(result.tp, result.fp, result.fn_, &class_counts))
}

fn report_from_counts(
    tp: usize,
    fp: usize,
    fn_: usize,
    class_counts: &BTreeMap<u8, (usize, usize, usize)>,
) -> EvalReport {
    let (precision, recall, f1) = compute_prf(tp, fp, fn_);
    let per_class = class_counts
        .iter()
        .map(|(&class, &(ctp, n_dets, n_gts))| {
            let cfp = n_dets - ctp;
            let cfn = n_gts - ctp;
            let (p, r, f) = compute_prf(ctp, cfp, cfn);
            (
                class,
                ClassReport {
                    tp: ctp,
                    fp: cfp,
                    fn_: cfn,
                    precision: p,
                    recall: r,
                    f1: f,
                },
            )
        })
        .collect();
    EvalReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
        per_class,
    }
}

/// Merge per-image match results and per-class tallies into one report.
/// Counts are summed; rates are recomputed from the merged counts.
pub fn merge_reports(reports: &[EvalReport]) -> EvalReport {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut class_counts: BTreeMap<u8, (usize, usize, usize)> = BTreeMap::new();
    for r in reports {
        tp += r.tp;
        fp += r.fp;
        fn_ += r.fn_;
        for (&class, c) in &r.per_class {
            let entry = class_counts.entry(class).or_insert((0, 0, 0));
            entry.0 += c.tp;
            entry.1 += c.tp + c.fp;
            entry.2 += c.tp + c.fn_;
        }
    }
    report_from_counts(tp, fp, fn_, &class_counts)
}

impl EvalReport {
    /// Percentages rounded to two decimals, the reporting convention.
    pub fn percentages(&self) -> (f64, f64, f64) {
        let to_pct = |v: f64| (v * 10_000.0).round() / 100.0;
        (to_pct(self.precision), to_pct(self.recall), to_pct(self.f1))
    }

    /// Plot-ready CSV: a header, one row per class, and a `total` row, with
    /// percentages to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn,precision_pct,recall_pct,f1_pct\n");
        let row = |label: &str, tp: usize, fp: usize, fn_: usize, p: f64, r: f64, f: f64| {
            format!(
                "{label},{tp},{fp},{fn_},{:.2},{:.2},{:.2}\n",
                p * 100.0,
                r * 100.0,
                f * 100.0
            )
        };
        for (class, c) in &self.per_class {
            out.push_str(&row(
                &class.to_string(),
                c.tp,
                c.fp,
                c.fn_,
                c.precision,
                c.recall,
                c.f1,
            ));
        }
        out.push_str(&row(
            "total",
            self.tp,
            self.fp,
            self.fn_,
            self.precision,
            self.recall,
            self.f1,
        ));
        out
    }
}

#[derive(Serialize, Deserialize)]
struct GroundTruthJson {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: u8,
}

/// Serialize ground truth to JSON (the detection format minus scores).
pub fn write_ground_truth_json(gts: &[GroundTruth]) -> Vec<u8> {
    let records: Vec<GroundTruthJson> = gts
        .iter()
        .map(|g| GroundTruthJson {
            bbox: [g.bbox.x0, g.bbox.y0, g.bbox.x1, g.bbox.y1],
            class: g.class_id,
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&records).expect("ground truth serialize");
    bytes.push(b'\n');
    bytes
}

/// Parse and validate the ground-truth JSON format.
pub fn read_ground_truth_json(bytes: &[u8]) -> Result<Vec<GroundTruth>> {
    let records: Vec<GroundTruthJson> = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        location: crate::error::Location::Line(e.line()),
        message: format!("ground-truth JSON: {e}"),
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let gt = GroundTruth {
                bbox: Bbox {
                    x0: r.bbox[0],
                    y0: r.bbox[1],
                    x1: r.bbox[2],
                    y1: r.bbox[3],
                },
                class_id: r.class,
            };
            gt.validate()
                .map_err(|e| Error::invalid(format!("ground truth {i}: {e}")))?;
            Ok(gt)
        })
        .collect()
}
