//! Alignment error rate and average precision.
//!
//! AER is the fraction of ground-truth RGB/thermal person pairs the matcher
//! got wrong: a pair counts as matched only when the prediction contains
//! exactly that pair; the denominator is the ground-truth pair count, so
//! spurious predicted pairs hurt AP (as false positives after fusion) but
//! not AER. Dataset-level AER pools pairs across scenes before dividing.
//!
//! AP is single-class all-points-interpolation average precision at a fixed
//! IoU threshold: detections sorted by descending score greedily claim the
//! highest-IoU unclaimed ground-truth box of their own scene.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedDetection;
use crate::scene_io::{BBox, MatchResult};

pub const DEFAULT_AP_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AER is undefined without ground-truth pairs")]
    EmptyGroundTruth,
    #[error("AP is undefined without ground-truth boxes")]
    NoGroundTruthBoxes,
    #[error("iou threshold must lie strictly between 0 and 1, got {0}")]
    BadIouThreshold(f64),
    #[error("report aggregation needs at least one scene")]
    NoScenes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AerOutcome {
    pub aer: f64,
    pub n_mismatched: usize,
    pub n_total: usize,
}

/// Count how many ground-truth pairs the prediction missed.
///
/// Returns `(n_mismatched, n_total)`; usable on empty ground truth (0, 0)
/// for pooling.
pub fn count_mismatches(gt_pairs: &[(String, String)], predicted: &MatchResult) -> (usize, usize) {
    let predicted_set: BTreeSet<(&str, &str)> = predicted
        .pairs
        .iter()
        .map(|(r, t)| (r.as_str(), t.as_str()))
        .collect();
    let mismatched = gt_pairs
        .iter()
        .filter(|(r, t)| !predicted_set.contains(&(r.as_str(), t.as_str())))
        .count();
    (mismatched, gt_pairs.len())
}

/// Alignment error rate of one prediction against ground truth.
pub fn compute_aer(
    gt_pairs: &[(String, String)],
    predicted: &MatchResult,
) -> Result<AerOutcome, EvalError> {
    if gt_pairs.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let (n_mismatched, n_total) = count_mismatches(gt_pairs, predicted);
    Ok(AerOutcome {
        aer: n_mismatched as f64 / n_total as f64,
        n_mismatched,
        n_total,
    })
}

/// Average precision of fused detections against ground-truth boxes in the
/// same frame. Zero detections yield 0.0.
pub fn compute_ap(
    fused: &[FusedDetection],
    gt_boxes: &[BBox],
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    compute_ap_pooled(&[(fused.to_vec(), gt_boxes.to_vec())], iou_threshold)
}

/// Average precision over several scenes pooled into one detection set.
///
/// Detections are ranked globally by (score desc, scene index, source ids);
/// each greedily claims the highest-IoU unclaimed ground-truth box of its
/// own scene when that IoU reaches the threshold.
pub fn compute_ap_pooled(
    scenes: &[(Vec<FusedDetection>, Vec<BBox>)],
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::BadIouThreshold(iou_threshold));
    }
    let n_gt: usize = scenes.iter().map(|(_, gt)| gt.len()).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruthBoxes);
    }

    let mut ranked: Vec<(usize, &FusedDetection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(scene_idx, (dets, _))| dets.iter().map(move |d| (scene_idx, d)))
        .collect();
    if ranked.is_empty() {
        return Ok(0.0);
    }
    ranked.sort_by(|(sa, da), (sb, db)| {
        db.score
            .total_cmp(&da.score)
            .then_with(|| sa.cmp(sb))
            .then_with(|| da.sources.key().cmp(&db.sources.key()))
    });

    let mut claimed: Vec<Vec<bool>> = scenes.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (scene_idx, det) in &ranked {
        let gt_boxes = &scenes[*scene_idx].1;
        let best = gt_boxes
            .iter()
            .enumerate()
            .filter(|(g, _)| !claimed[*scene_idx][*g])
            .map(|(g, gt)| (g, det.bbox.iou(gt)))
            .filter(|(_, iou)| *iou >= iou_threshold)
            .max_by(|(ga, ia), (gb, ib)| ia.total_cmp(ib).then_with(|| gb.cmp(ga)));
        match best {
            Some((g, _)) => {
                claimed[*scene_idx][g] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // precision/recall curve, then the all-points interpolated area
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for (k, is_tp) in tp_flags.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut max_precision_from = vec![0.0f64; points.len() + 1];
    for k in (0..points.len()).rev() {
        max_precision_from[k] = max_precision_from[k + 1].max(points[k].1);
    }
    for (k, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * max_precision_from[k];
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Per-scene evaluation inputs collected by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub scene_id: String,
    pub n_gt_pairs: usize,
    pub n_mismatched: usize,
    pub fused: Vec<FusedDetection>,
    pub gt_boxes: Vec<BBox>,
}

/// Table-shaped summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub matcher_id: String,
    pub debate_enabled: bool,
    /// Average precision in `[0, 1]`; absent without ground-truth boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    /// Alignment error rate in `[0, 1]`; absent without ground-truth pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aer: Option<f64>,
    pub n_scenes: usize,
    pub n_gt_pairs: usize,
    pub n_mismatched: usize,
}

/// Pool per-scene results into the dataset-level report: AER micro-averaged
/// over all ground-truth pairs, AP over the pooled detection set.
pub fn aggregate_report(
    per_scene: &[SceneEval],
    dataset_id: &str,
    matcher_id: &str,
    debate_enabled: bool,
    ap_iou: f64,
) -> Result<EvalReport, EvalError> {
    if per_scene.is_empty() {
        return Err(EvalError::NoScenes);
    }
    let n_gt_pairs: usize = per_scene.iter().map(|s| s.n_gt_pairs).sum();
    let n_mismatched: usize = per_scene.iter().map(|s| s.n_mismatched).sum();
    let aer = (n_gt_pairs > 0).then(|| n_mismatched as f64 / n_gt_pairs as f64);
    let pooled: Vec<(Vec<FusedDetection>, Vec<BBox>)> = per_scene
        .iter()
        .map(|s| (s.fused.clone(), s.gt_boxes.clone()))
        .collect();
    let ap = if pooled.iter().any(|(_, gt)| !gt.is_empty()) {
        Some(compute_ap_pooled(&pooled, ap_iou)?)
    } else {
        None
    };
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        matcher_id: matcher_id.to_string(),
        debate_enabled,
        ap,
        aer,
        n_scenes: per_scene.len(),
        n_gt_pairs,
        n_mismatched,
    })
}

/// Aligned text table with the Model | LLM Debate | AP | AER columns;
/// metrics reported x100 with one decimal.
pub fn render_report_table(report: &EvalReport) -> String {
    let fmt_metric = |value: Option<f64>| match value {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "n/a".to_string(),
    };
    let rows = [
        ("Model", "LLM Debate", "AP".to_string(), "AER".to_string()),
        (
            report.matcher_id.as_str(),
            if report.debate_enabled { "on" } else { "off" },
            fmt_metric(report.ap),
            fmt_metric(report.aer),
        ),
    ];
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap();
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap();
    let w2 = rows.iter().map(|r| r.2.len()).max().unwrap();
    let w3 = rows.iter().map(|r| r.3.len()).max().unwrap();
    let mut out = String::new();
    for (i, (model, debate, ap, aer)) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{model:<w0$} | {debate:<w1$} | {ap:<w2$} | {aer:<w3$}\n"
        ));
        if i == 0 {
            out.push_str(&format!(
                "{:-<w0$}-+-{:-<w1$}-+-{:-<w2$}-+-{:-<w3$}\n",
                "", "", "", ""
            ));
        }
    }
    out.push_str(&format!(
        "\nscenes: {}  gt pairs: {}  mismatched: {}\n",
        report.n_scenes, report.n_gt_pairs, report.n_mismatched
    ));
    out
}
