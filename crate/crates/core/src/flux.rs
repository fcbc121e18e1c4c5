//! Flux of a constant unit field through the surface elements inside a box.
//!
//! For a closed surface the flux of any constant field vanishes; for an open
//! fragment it equals the field dotted with the fragment's vector area. The
//! quadrature sums `T · n_i A_i` over the elements whose position lies in the
//! box, in element index order with compensated summation, so every code
//! path (linear scan, grid index, any thread count) returns identical bits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::OrientedBox;
use crate::surface::{align_away_from, canonical_sign, instance_flip, OrientationStrategy, SurfaceElement};
use crate::Vec3;

/// Default closure weight.
pub const DEFAULT_GAMMA: f64 = 0.5;
/// Square decimetres per square metre.
pub const DM2_PER_M2: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluxError {
    #[error("flux field direction must be finite and non-zero")]
    ZeroField,
    #[error("flux magnitude must be non-negative, got {0}")]
    NegativeFlux(f64),
    #[error("closure weight gamma must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
}

/// Constant unit test field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxField {
    t: Vec3,
}

impl FluxField {
    /// Normalizes `direction`.
    pub fn new(direction: Vec3) -> Result<Self, FluxError> {
        let norm = direction.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(FluxError::ZeroField);
        }
        Ok(Self { t: direction / norm })
    }

    pub fn direction(&self) -> &Vec3 {
        &self.t
    }
}

impl Default for FluxField {
    /// `(1, 1, 1) / sqrt(3)`.
    fn default() -> Self {
        let c = 1.0 / 3f64.sqrt();
        Self { t: Vec3::new(c, c, c) }
    }
}

/// Closure evidence for one box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FluxReport {
    pub flux: f64,
    pub enclosed_count: usize,
    pub total_area: f64,
    /// `|flux| / total_area`, 0 for an empty box.
    pub normalized_flux: f64,
}

impl FluxReport {
    fn from_sums(flux: f64, total_area: f64, enclosed_count: usize) -> Self {
        let normalized_flux = if total_area > 0.0 {
            flux.abs() / total_area
        } else {
            0.0
        };
        Self {
            flux,
            enclosed_count,
            total_area,
            normalized_flux,
        }
    }
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Per-box sign rule derived from an [`OrientationStrategy`].
#[derive(Clone, Copy)]
enum SignRule {
    AwayFrom(Vec3),
    Canonical { flip: bool },
    Keep,
}

impl SignRule {
    fn for_box(strategy: &OrientationStrategy, bx: &OrientedBox) -> Self {
        match strategy {
            OrientationStrategy::CenterAligned { .. } => Self::AwayFrom(bx.center),
            OrientationStrategy::FirstElementRandomFlip { seed } => Self::Canonical {
                flip: instance_flip(*seed),
            },
            OrientationStrategy::Keep => Self::Keep,
        }
    }

    #[inline]
    fn orient(&self, e: &SurfaceElement) -> Vec3 {
        match self {
            Self::AwayFrom(c) => align_away_from(&e.n, &e.x, c),
            Self::Canonical { flip } => {
                let n = canonical_sign(&e.n);
                if *flip {
                    -n
                } else {
                    n
                }
            }
            Self::Keep => e.n,
        }
    }
}

struct Accumulator {
    flux: CompensatedSum,
    area: CompensatedSum,
    count: usize,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            flux: CompensatedSum::default(),
            area: CompensatedSum::default(),
            count: 0,
        }
    }

    #[inline]
    fn push(&mut self, e: &SurfaceElement, rule: &SignRule, t: &Vec3) {
        self.flux.add(t.dot(&rule.orient(e)) * e.area);
        self.area.add(e.area);
        self.count += 1;
    }

    fn report(&self) -> FluxReport {
        FluxReport::from_sums(self.flux.value(), self.area.value(), self.count)
    }
}

/// Flux through the elements whose position lies in the closed box.
///
/// Normals are re-signed per `orientation`; `CenterAligned` uses the box
/// center as its reference.
pub fn flux_through_box(
    elements: &[SurfaceElement],
    bx: &OrientedBox,
    field: &FluxField,
    orientation: &OrientationStrategy,
) -> FluxReport {
    let frame = bx.frame();
    let rule = SignRule::for_box(orientation, bx);
    let mut acc = Accumulator::new();
    for e in elements {
        if frame.contains(&e.x) {
            acc.push(e, &rule, field.direction());
        }
    }
    acc.report()
}

/// Indices of elements inside the closed box, ascending.
pub fn enclosed_indices(elements: &[SurfaceElement], bx: &OrientedBox) -> Vec<usize> {
    let frame = bx.frame();
    elements
        .iter()
        .enumerate()
        .filter(|(_, e)| frame.contains(&e.x))
        .map(|(i, _)| i)
        .collect()
}

/// `exp(-gamma * flux_abs)`.
pub fn closure_score(flux_abs: f64, gamma: f64) -> Result<f64, FluxError> {
    if !(flux_abs >= 0.0) {
        return Err(FluxError::NegativeFlux(flux_abs));
    }
    check_gamma(gamma)?;
    Ok((-gamma * flux_abs).exp())
}

pub fn check_gamma(gamma: f64) -> Result<(), FluxError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(FluxError::InvalidGamma(gamma))
    }
}

/// Uniform grid over element positions for box queries.
///
/// Query results are identical to a linear scan: candidates are collected
/// from overlapping cells, filtered exactly, and visited in index order.
pub struct ElementIndex<'a> {
    elements: &'a [SurfaceElement],
    origin: Vec3,
    inv_cell: f64,
    dims: [usize; 3],
    /// `cell_start[c]..cell_start[c + 1]` indexes `order` for cell `c`.
    cell_start: Vec<u32>,
    order: Vec<u32>,
}

const TARGET_PER_CELL: f64 = 8.0;
const MAX_CELLS_PER_AXIS: usize = 1024;

impl<'a> ElementIndex<'a> {
    pub fn new(elements: &'a [SurfaceElement]) -> Self {
        assert!(elements.len() < u32::MAX as usize, "too many elements for the grid index");
        let (lo, hi) = elements.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), e| (lo.inf(&e.x), hi.sup(&e.x)),
        );
        let (origin, extent) = if elements.is_empty() {
            (Vec3::zeros(), Vec3::repeat(1.0))
        } else {
            (lo, hi - lo)
        };
        let longest = extent.max().max(f64::MIN_POSITIVE);
        // cell edge so that an average cell over the non-flat axes holds ~TARGET_PER_CELL
        let cells_wanted = (elements.len() as f64 / TARGET_PER_CELL).max(1.0);
        let thick: Vec<f64> = extent.iter().copied().filter(|e| *e > longest * 1e-9).collect();
        let measure: f64 = thick.iter().product();
        let cell = (measure / cells_wanted).powf(1.0 / thick.len().max(1) as f64).max(longest / MAX_CELLS_PER_AXIS as f64);
        let inv_cell = 1.0 / cell;
        let dims = [0, 1, 2].map(|i| ((extent[i] * inv_cell).floor() as usize + 1).min(MAX_CELLS_PER_AXIS));

        let mut index = Self {
            elements,
            origin,
            inv_cell,
            dims,
            cell_start: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<u32> = elements
            .iter()
            .map(|e| index.cell_id(index.cell_coords(&e.x)) as u32)
            .collect();
        let mut start = vec![0u32; n_cells + 1];
        for &c in &cell_of {
            start[c as usize + 1] += 1;
        }
        for c in 0..n_cells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut order = vec![0u32; elements.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c as usize] as usize] = i as u32;
            fill[c as usize] += 1;
        }
        index.cell_start = start;
        index.order = order;
        index
    }

    pub fn elements(&self) -> &'a [SurfaceElement] {
        self.elements
    }

    fn cell_coords(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|i| {
            let c = ((p[i] - self.origin[i]) * self.inv_cell).floor();
            (c.max(0.0) as usize).min(self.dims[i] - 1)
        })
    }

    fn cell_id(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Indices of elements inside the box, ascending.
    pub fn query(&self, bx: &OrientedBox) -> Vec<usize> {
        let (lo, hi) = bx.aabb();
        let (c_lo, c_hi) = (self.cell_coords(&lo), self.cell_coords(&hi));
        let mut candidates = 0usize;
        for z in c_lo[2]..=c_hi[2] {
            for y in c_lo[1]..=c_hi[1] {
                let row = self.cell_id([0, y, z]);
                candidates += (self.cell_start[row + c_hi[0] + 1] - self.cell_start[row + c_lo[0]]) as usize;
            }
        }
        if candidates * 4 > self.elements.len() {
            return enclosed_indices(self.elements, bx);
        }
        let frame = bx.frame();
        let mut hits = Vec::with_capacity(candidates);
        for z in c_lo[2]..=c_hi[2] {
            for y in c_lo[1]..=c_hi[1] {
                let row = self.cell_id([0, y, z]);
                let range = self.cell_start[row + c_lo[0]] as usize..self.cell_start[row + c_hi[0] + 1] as usize;
                hits.extend(
                    self.order[range]
                        .iter()
                        .map(|&i| i as usize)
                        .filter(|&i| frame.contains(&self.elements[i].x)),
                );
            }
        }
        hits.sort_unstable();
        hits
    }

    pub fn flux(&self, bx: &OrientedBox, field: &FluxField, orientation: &OrientationStrategy) -> FluxReport {
        let rule = SignRule::for_box(orientation, bx);
        let mut acc = Accumulator::new();
        for i in self.query(bx) {
            acc.push(&self.elements[i], &rule, field.direction());
        }
        acc.report()
    }
}

/// Flux reports for many boxes against one element set, in box order.
///
/// Boxes are evaluated in parallel; each result equals
/// [`flux_through_box`] for that box bit for bit.
pub fn flux_batch(
    elements: &[SurfaceElement],
    boxes: &[OrientedBox],
    field: &FluxField,
    orientation: &OrientationStrategy,
) -> Vec<FluxReport> {
    if boxes.len() < 4 || elements.len() < 4096 {
        return boxes
            .par_iter()
            .map(|b| flux_through_box(elements, b, field, orientation))
            .collect();
    }
    let index = ElementIndex::new(elements);
    boxes.par_iter().map(|b| index.flux(b, field, orientation)).collect()
}

/// One row of the per-box flux JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxRecord {
    pub flux: f64,
    pub enclosed_count: usize,
    pub total_area: f64,
    pub normalized_flux: f64,
    pub closure_score: f64,
}

impl FluxRecord {
    pub fn new(report: &FluxReport, gamma: f64) -> Result<Self, FluxError> {
        Ok(Self {
            flux: report.flux,
            enclosed_count: report.enclosed_count,
            total_area: report.total_area,
            normalized_flux: report.normalized_flux,
            closure_score: closure_score(report.flux.abs(), gamma)?,
        })
    }
}
