//! Detection metrics, box regression loss and flux distributions.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou_3d, score_order, wrap_angle, Detection, OrientedBox};
use crate::flux::{flux_batch, FluxField, DM2_PER_M2};
use crate::surface::{OrientationStrategy, SurfaceElement};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("IoU threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("non-finite detection score at index {0}")]
    NonFiniteScore(usize),
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("histogram upper edge must be positive and finite, got {0}")]
    InvalidRange(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Detections and ground truth of one scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneEval<'a> {
    pub detections: &'a [Detection],
    pub gt: &'a [OrientedBox],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

fn check(scenes: &[SceneEval], threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let mut offset = 0;
    for s in scenes {
        if let Some(i) = s.detections.iter().position(|d| !d.score.is_finite()) {
            return Err(EvalError::NonFiniteScore(offset + i));
        }
        offset += s.detections.len();
    }
    Ok(())
}

/// Greedy one-to-one matching in pooled score order. Returns, per ranked
/// detection, its score and whether it matched a ground-truth box.
fn match_ranked(scenes: &[SceneEval], threshold: f64) -> Vec<(f64, bool)> {
    let pooled: Vec<(usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| scene.detections.iter().map(move |d| (s, d)))
        .collect();
    let ious: Vec<Vec<f64>> = pooled
        .par_iter()
        .map(|(s, d)| scenes[*s].gt.iter().map(|g| iou_3d(&d.bbox, g)).collect())
        .collect();
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
    score_order(pooled.iter().map(|(_, d)| d.score))
        .into_iter()
        .map(|i| {
            let (s, d) = pooled[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in ious[i].iter().enumerate() {
                if !used[s][g] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                used[s][g] = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

/// Precision/recall after each ranked detection.
pub fn pr_curve(scenes: &[SceneEval], threshold: f64) -> Result<Vec<PrPoint>> {
    check(scenes, threshold)?;
    let total: usize = scenes.iter().map(|s| s.gt.len()).sum();
    let mut tp = 0usize;
    Ok(match_ranked(scenes, threshold)
        .into_iter()
        .enumerate()
        .map(|(k, (score, hit))| {
            tp += hit as usize;
            PrPoint {
                recall: if total == 0 { 0.0 } else { tp as f64 / total as f64 },
                precision: tp as f64 / (k + 1) as f64,
                score_threshold: score,
            }
        })
        .collect())
}

/// All-point interpolated AP over detections pooled across scenes.
///
/// No ground truth and no detections gives 1; no ground truth with
/// detections gives 0.
pub fn average_precision_pooled(scenes: &[SceneEval], threshold: f64) -> Result<f64> {
    let total: usize = scenes.iter().map(|s| s.gt.len()).sum();
    let curve = pr_curve(scenes, threshold)?;
    if total == 0 {
        return Ok(if curve.is_empty() { 1.0 } else { 0.0 });
    }
    let mut ap = 0.0;
    let mut max_precision = 0.0f64;
    let mut next_recall = curve.last().map_or(0.0, |p| p.recall);
    for p in curve.iter().rev() {
        if p.recall < next_recall {
            ap += (next_recall - p.recall) * max_precision;
            next_recall = p.recall;
        }
        max_precision = max_precision.max(p.precision);
    }
    ap += next_recall * max_precision;
    Ok(ap)
}

pub fn average_precision(detections: &[Detection], gt: &[OrientedBox], threshold: f64) -> Result<f64> {
    average_precision_pooled(&[SceneEval { detections, gt }], threshold)
}

/// Fraction of ground-truth boxes matched under the greedy one-to-one matching; 1 without ground truth.
pub fn average_recall_pooled(scenes: &[SceneEval], threshold: f64) -> Result<f64> {
    check(scenes, threshold)?;
    let total: usize = scenes.iter().map(|s| s.gt.len()).sum();
    if total == 0 {
        return Ok(1.0);
    }
    let hits = match_ranked(scenes, threshold).iter().filter(|(_, hit)| *hit).count();
    Ok(hits as f64 / total as f64)
}

pub fn average_recall(proposals: &[Detection], gt: &[OrientedBox], threshold: f64) -> Result<f64> {
    average_recall_pooled(&[SceneEval { detections: proposals, gt }], threshold)
}

/// Squared L2 distance between the 7-parameter vectors, yaw difference wrapped.
pub fn l2_box_loss(pred: &OrientedBox, gt: &OrientedBox) -> f64 {
    let dyaw = wrap_angle(pred.yaw - gt.yaw);
    (pred.center - gt.center).norm_squared() + (pred.size - gt.size).norm_squared() + dyaw * dyaw
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_25: f64,
    pub ap_50: f64,
    pub ar_25: f64,
    pub ar_50: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

pub fn evaluate_scenes(scenes: &[SceneEval]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        ap_25: average_precision_pooled(scenes, 0.25)?,
        ap_50: average_precision_pooled(scenes, 0.5)?,
        ar_25: average_recall_pooled(scenes, 0.25)?,
        ar_50: average_recall_pooled(scenes, 0.5)?,
        num_gt: scenes.iter().map(|s| s.gt.len()).sum(),
        num_det: scenes.iter().map(|s| s.detections.len()).sum(),
    })
}

pub fn evaluate(detections: &[Detection], gt: &[OrientedBox]) -> Result<MetricsReport> {
    evaluate_scenes(&[SceneEval { detections, gt }])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxUnit {
    /// `|flux|` in squared scene units.
    #[default]
    Scene,
    /// `|flux|` in dm², scene units being metres.
    SquareDecimetre,
    /// `|flux|` over enclosed area.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum HistogramRange {
    /// `[0, max value]`.
    #[default]
    Auto,
    /// `[0, upper]`; larger values land in the last bin.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxHistogram {
    /// `bins + 1` ascending edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub unit: FluxUnit,
    /// Per-box values in input order.
    pub values: Vec<f64>,
}

impl FluxHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `edge,count` rows, one per bin, keyed by the lower edge.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["edge", "count"])?;
        for (edge, count) in self.bin_edges.iter().zip(&self.counts) {
            w.write_record([format!("{edge:?}"), count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bins the per-box flux magnitude in `unit`.
pub fn flux_histogram(
    elements: &[SurfaceElement],
    boxes: &[OrientedBox],
    bins: usize,
    unit: FluxUnit,
    range: HistogramRange,
    field: &FluxField,
    orientation: &OrientationStrategy,
) -> Result<FluxHistogram> {
    if bins == 0 {
        return Err(EvalError::NoBins);
    }
    let values: Vec<f64> = flux_batch(elements, boxes, field, orientation)
        .iter()
        .map(|r| match unit {
            FluxUnit::Scene => r.flux.abs(),
            FluxUnit::SquareDecimetre => r.flux.abs() * DM2_PER_M2,
            FluxUnit::Normalized => r.normalized_flux,
        })
        .collect();
    histogram(values, bins, unit, range)
}

/// Bins precomputed non-negative values.
pub fn histogram(values: Vec<f64>, bins: usize, unit: FluxUnit, range: HistogramRange) -> Result<FluxHistogram> {
    if bins == 0 {
        return Err(EvalError::NoBins);
    }
    let upper = match range {
        HistogramRange::Fixed(u) => u,
        HistogramRange::Auto => {
            let max = values.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                max
            } else {
                1.0
            }
        }
    };
    if !(upper.is_finite() && upper > 0.0) {
        return Err(EvalError::InvalidRange(upper));
    }
    let width = upper / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in &values {
        let b = if v.is_finite() { ((v / width).floor().max(0.0) as usize).min(bins - 1) } else { bins - 1 };
        counts[b] += 1;
    }
    Ok(FluxHistogram {
        bin_edges,
        counts,
        unit,
        values,
    })
}
