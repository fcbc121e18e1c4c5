//! Closure-aware post-processing of box candidates: rescoring, min-support
//! gating, geometric refinement and NMS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{nms_3d_indices, BoxError, BoxRecord, Detection, IouMode, OrientedBox};
use crate::flux::{check_gamma, flux_batch, flux_through_box, FluxError, FluxField, FluxRecord, FluxReport, DEFAULT_GAMMA};
use crate::surface::{OrientationStrategy, SurfaceElement};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    /// Center step per axis as a fraction of the initial box size on that axis.
    pub center_step_frac: f64,
    pub size_step_frac: f64,
    pub yaw_step_deg: f64,
    /// Cap on accepted steps.
    pub max_iterations: usize,
    /// Weight of coverage against closure in the objective.
    pub coverage_weight: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            center_step_frac: 0.05,
            size_step_frac: 0.05,
            yaw_step_deg: 2.0,
            max_iterations: 50,
            coverage_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gamma: f64,
    /// Proposals enclosing fewer elements are scored 0.
    pub min_support: usize,
    /// Score with `exp(-gamma * normalized_flux * normalized_scale)` instead of raw flux.
    pub use_normalized_flux: bool,
    pub normalized_scale: f64,
    pub nms_iou: f64,
    pub iou_mode: IouMode,
    pub orientation: OrientationStrategy,
    /// Test field direction; normalized on use.
    pub field: [f64; 3],
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            min_support: 16,
            use_normalized_flux: false,
            normalized_scale: 10.0,
            nms_iou: 0.25,
            iou_mode: IouMode::YawAware,
            orientation: OrientationStrategy::default(),
            field: [1.0, 1.0, 1.0],
            refine: RefineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_gamma(self.gamma)?;
        let bad = |what: &str| Err(PipelineError::InvalidConfig(what.to_string()));
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if !(self.normalized_scale.is_finite() && self.normalized_scale > 0.0) {
            return bad("normalized_scale must be positive");
        }
        let r = &self.refine;
        if !(0.0..=1.0).contains(&r.coverage_weight) {
            return bad("refine.coverage_weight must lie in [0, 1]");
        }
        let steps = [r.center_step_frac, r.size_step_frac, r.yaw_step_deg];
        if !steps.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad("refine step sizes must be positive");
        }
        self.flux_field()?;
        Ok(())
    }

    pub fn flux_field(&self) -> Result<FluxField, PipelineError> {
        Ok(FluxField::new(Vec3::from(self.field))?)
    }

    /// Closure weight of a report under this configuration.
    pub fn closure_of(&self, report: &FluxReport) -> f64 {
        let magnitude = if self.use_normalized_flux {
            report.normalized_flux * self.normalized_scale
        } else {
            report.flux.abs()
        };
        (-self.gamma * magnitude).exp()
    }
}

/// A candidate box with its closure evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: OrientedBox,
    pub base_score: f64,
    pub label: Option<i64>,
    pub closure: FluxReport,
    pub closure_score: f64,
    pub final_score: f64,
    /// Position in the candidate list this proposal came from.
    pub source_index: usize,
    pub refined: bool,
}

impl Proposal {
    fn evaluate(
        det: &Detection,
        source_index: usize,
        closure: FluxReport,
        config: &PipelineConfig,
    ) -> Self {
        let closure_score = config.closure_of(&closure);
        let final_score = if closure.enclosed_count < config.min_support {
            0.0
        } else {
            det.score * closure_score
        };
        Self {
            bbox: det.bbox,
            base_score: det.score,
            label: det.label,
            closure,
            closure_score,
            final_score,
            source_index,
            refined: false,
        }
    }

    pub fn gated(&self, config: &PipelineConfig) -> bool {
        self.closure.enclosed_count < config.min_support
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            score: self.final_score,
            label: self.label,
        }
    }

    pub fn record(&self) -> ProposalRecord {
        ProposalRecord {
            bbox: BoxRecord::from(&self.detection()),
            base_score: self.base_score,
            closure: FluxRecord {
                flux: self.closure.flux,
                enclosed_count: self.closure.enclosed_count,
                total_area: self.closure.total_area,
                normalized_flux: self.closure.normalized_flux,
                closure_score: self.closure_score,
            },
        }
    }
}

/// Detection JSON row extended with the closure report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    #[serde(flatten)]
    pub bbox: BoxRecord,
    pub base_score: f64,
    pub closure: FluxRecord,
}

fn sort_by_final(proposals: &mut [Proposal]) {
    // stable: ties keep input order
    proposals.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
}

/// Scores every candidate by `base_score * S` and sorts by descending final score.
pub fn rescore_proposals(
    candidates: &[Detection],
    elements: &[SurfaceElement],
    config: &PipelineConfig,
) -> Result<Vec<Proposal>, PipelineError> {
    config.validate()?;
    let field = config.flux_field()?;
    let boxes: Vec<OrientedBox> = candidates.iter().map(|d| d.bbox).collect();
    let reports = flux_batch(elements, &boxes, &field, &config.orientation);
    let mut out: Vec<Proposal> = candidates
        .iter()
        .zip(reports)
        .enumerate()
        .map(|(i, (d, r))| Proposal::evaluate(d, i, r, config))
        .collect();
    sort_by_final(&mut out);
    Ok(out)
}

/// Result of [`refine_box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub bbox: OrientedBox,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Accepted steps.
    pub iterations: usize,
    /// The initial box enclosed nothing; it is returned untouched.
    pub noop: bool,
}

/// Refinement objective `J = w * coverage + (1 - w) * S` for a fixed element cluster.
pub struct Objective<'a> {
    cluster: Vec<SurfaceElement>,
    cluster_area: f64,
    field: FluxField,
    config: &'a PipelineConfig,
}

impl<'a> Objective<'a> {
    /// Cluster = elements inside `initial` scaled by 1.5.
    pub fn new(initial: &OrientedBox, elements: &[SurfaceElement], config: &'a PipelineConfig) -> Result<Self, PipelineError> {
        let frame = initial.scaled(1.5).frame();
        let cluster: Vec<SurfaceElement> = elements.iter().filter(|e| frame.contains(&e.x)).copied().collect();
        let cluster_area = cluster.iter().map(|e| e.area).sum();
        Ok(Self {
            cluster,
            cluster_area,
            field: config.flux_field()?,
            config,
        })
    }

    pub fn cluster_len(&self) -> usize {
        self.cluster.len()
    }

    pub fn value(&self, bx: &OrientedBox) -> f64 {
        let report = flux_through_box(&self.cluster, bx, &self.field, &self.config.orientation);
        let coverage = if self.cluster_area > 0.0 {
            report.total_area / self.cluster_area
        } else {
            0.0
        };
        let w = self.config.refine.coverage_weight;
        w * coverage + (1.0 - w) * self.config.closure_of(&report)
    }
}

const STEP_SCALES: [f64; 3] = [1.0, 0.5, 0.25];
const MIN_GAIN: f64 = 1e-6;

/// Best-improvement coordinate descent over center, size and yaw.
///
/// Steps are fixed fractions of the initial size. After an accepted step the
/// search restarts at the coarsest scale; it stops when no step at the finest
/// scale gains more than 1e-6 or after `max_iterations` accepted steps.
pub fn refine_box(
    initial: &OrientedBox,
    elements: &[SurfaceElement],
    config: &PipelineConfig,
) -> Result<RefineOutcome, PipelineError> {
    config.validate()?;
    let objective = Objective::new(initial, elements, config)?;
    let start = objective.value(initial);
    let enclosed = flux_through_box(elements, initial, &objective.field, &OrientationStrategy::Keep).enclosed_count;
    if enclosed == 0 {
        return Ok(RefineOutcome {
            bbox: *initial,
            objective_before: start,
            objective_after: start,
            iterations: 0,
            noop: true,
        });
    }
    let rc = &config.refine;
    let base_steps = [
        rc.center_step_frac * initial.size.x,
        rc.center_step_frac * initial.size.y,
        rc.center_step_frac * initial.size.z,
        rc.size_step_frac * initial.size.x,
        rc.size_step_frac * initial.size.y,
        rc.size_step_frac * initial.size.z,
        rc.yaw_step_deg.to_radians(),
    ];
    let mut current = *initial;
    let mut value = start;
    let mut iterations = 0;
    let mut scale = 0;
    while iterations < rc.max_iterations && scale < STEP_SCALES.len() {
        let mut best: Option<(OrientedBox, f64)> = None;
        for (param, step) in base_steps.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let Some(candidate) = perturb(&current, param, sign * step * STEP_SCALES[scale]) else {
                    continue;
                };
                let v = objective.value(&candidate);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((candidate, v));
                }
            }
        }
        match best {
            Some((b, v)) if v > value + MIN_GAIN => {
                current = b;
                value = v;
                iterations += 1;
                scale = 0;
            }
            _ => scale += 1,
        }
    }
    Ok(RefineOutcome {
        bbox: current,
        objective_before: start,
        objective_after: value,
        iterations,
        noop: false,
    })
}

fn perturb(b: &OrientedBox, param: usize, delta: f64) -> Option<OrientedBox> {
    let mut out = *b;
    match param {
        0..=2 => out.center[param] += delta,
        3..=5 => {
            out.size[param - 3] += delta;
            if out.size[param - 3] <= 0.0 {
                return None;
            }
        }
        _ => out.yaw = crate::boxes::wrap_angle(out.yaw + delta),
    }
    Some(out)
}

/// Rescore, drop gated proposals, optionally refine, re-score refined
/// boxes, then NMS on the final scores.
pub fn run_pipeline(
    elements: &[SurfaceElement],
    candidates: &[Detection],
    config: &PipelineConfig,
) -> Result<Vec<Proposal>, PipelineError> {
    let rescored = rescore_proposals(candidates, elements, config)?;
    let mut survivors: Vec<Proposal> = rescored.into_iter().filter(|p| !p.gated(config)).collect();
    if config.refine.enabled {
        let field = config.flux_field()?;
        survivors = survivors
            .par_iter()
            .map(|p| {
                let outcome = refine_box(&p.bbox, elements, config)?;
                let det = Detection {
                    bbox: outcome.bbox,
                    score: p.base_score,
                    label: p.label,
                };
                let report = flux_through_box(elements, &outcome.bbox, &field, &config.orientation);
                let mut q = Proposal::evaluate(&det, p.source_index, report, config);
                q.refined = !outcome.noop;
                Ok(q)
            })
            .collect::<Result<_, PipelineError>>()?;
        survivors.retain(|p| !p.gated(config));
        sort_by_final(&mut survivors);
    }
    let dets: Vec<Detection> = survivors.iter().map(Proposal::detection).collect();
    let keep = nms_3d_indices(&dets, config.nms_iou, config.iou_mode)?;
    Ok(keep.into_iter().map(|i| survivors[i]).collect())
}
