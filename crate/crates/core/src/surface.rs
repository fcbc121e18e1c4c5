//! Surface elements from Gaussian primitives.
//!
//! A Gaussian with covariance `R S Sᵀ Rᵀ` has the rotation columns as
//! eigenvectors and the squared scales as eigenvalues, so the surface normal
//! (eigenvector of the smallest eigenvalue) is read directly off the rotation
//! matrix. The element area is the largest cross-section of the ellipsoid.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::splat_io::SceneSplat;
use crate::Vec3;

/// Quaternions must be unit within this before building a covariance.
pub const UNIT_QUATERNION_TOLERANCE: f64 = 1e-6;
/// Relative gap between the two smallest scales below which the normal is ambiguous.
pub const DEGENERACY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("scales must be finite and positive, got [{0}, {1}, {2}]")]
    NonPositiveScale(f64, f64, f64),
    #[error("quaternion norm {0} is not unit")]
    NonUnitQuaternion(f64),
    #[error("primitive {index}: {source}")]
    AtPrimitive {
        index: usize,
        #[source]
        source: Box<SurfaceError>,
    },
    #[error("element CSV: {0}")]
    Csv(String),
}

/// How the sign of an unoriented normal is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrientationStrategy {
    /// Point away from a reference center. Flux evaluation substitutes the
    /// box center for `reference_center`.
    CenterAligned { reference_center: Vec3 },
    /// First non-zero component made non-negative, then the whole instance
    /// is inverted with probability 1/2, decided by `seed`.
    FirstElementRandomFlip { seed: u64 },
    /// Keep whatever sign the element already carries.
    Keep,
}

impl Default for OrientationStrategy {
    fn default() -> Self {
        Self::CenterAligned {
            reference_center: Vec3::zeros(),
        }
    }
}

/// Position, oriented unit normal and area of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceElement {
    pub x: Vec3,
    pub n: Vec3,
    pub area: f64,
    /// min-scale / median-scale; 1 for a sphere, near 0 for a flat disc.
    pub flatness: f64,
    /// The two smallest scales tie, so the normal is a tie-break.
    pub degenerate: bool,
}

impl SurfaceElement {
    /// Element with an explicit normal (normalized here) and unit flatness.
    pub fn new(x: Vec3, n: Vec3, area: f64) -> Self {
        Self {
            x,
            n: n.normalize(),
            area,
            flatness: 1.0,
            degenerate: false,
        }
    }
}

fn check_scales(scales: &Vec3) -> Result<(), SurfaceError> {
    if scales.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(SurfaceError::NonPositiveScale(scales.x, scales.y, scales.z))
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &[f64; 4]) -> Result<Matrix3<f64>, SurfaceError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= UNIT_QUATERNION_TOLERANCE) {
        return Err(SurfaceError::NonUnitQuaternion(norm));
    }
    let [w, x, y, z] = *q;
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `R S Sᵀ Rᵀ`, exactly symmetric.
pub fn covariance_from_params(scales: &Vec3, rotation: &[f64; 4]) -> Result<Matrix3<f64>, SurfaceError> {
    check_scales(scales)?;
    let r = rotation_matrix(rotation)?;
    let var = scales.component_mul(scales);
    let mut cov = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = (0..3).map(|k| r[(i, k)] * var[k] * r[(j, k)]).sum::<f64>();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalNormal {
    /// Unoriented unit normal.
    pub normal: Vec3,
    pub flatness: f64,
    pub degenerate: bool,
}

fn sorted_scales(scales: &Vec3) -> [f64; 3] {
    let mut s = [scales.x, scales.y, scales.z];
    s.sort_by(f64::total_cmp);
    s
}

/// Eigenvector of the smallest covariance eigenvalue.
///
/// When the two smallest scales agree within [`DEGENERACY_TOLERANCE`] the
/// lowest-index tied axis is returned and `degenerate` is set.
pub fn principal_normal(scales: &Vec3, rotation: &[f64; 4]) -> Result<PrincipalNormal, SurfaceError> {
    check_scales(scales)?;
    let r = rotation_matrix(rotation)?;
    let sorted = sorted_scales(scales);
    let (smallest, second) = (sorted[0], sorted[1]);
    let degenerate = second - smallest <= DEGENERACY_TOLERANCE * second;
    let axis = if degenerate {
        (0..3)
            .find(|&i| scales[i] - smallest <= DEGENERACY_TOLERANCE * second)
            .unwrap()
    } else {
        (0..3).find(|&i| scales[i] == smallest).unwrap()
    };
    let col = r.column(axis);
    Ok(PrincipalNormal {
        normal: Vec3::new(col[0], col[1], col[2]).normalize(),
        flatness: smallest / sorted[1],
        degenerate,
    })
}

/// Whether the instance seeded by `seed` is inverted.
pub fn instance_flip(seed: u64) -> bool {
    ChaCha8Rng::seed_from_u64(seed).random_bool(0.5)
}

/// Flips `n` so the first non-zero component is non-negative.
pub fn canonical_sign(n: &Vec3) -> Vec3 {
    match n.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -n,
        _ => *n,
    }
}

/// Fixes the sign of `n` for a Gaussian at `mean`.
pub fn orient_normal(n: &Vec3, mean: &Vec3, strategy: &OrientationStrategy) -> Vec3 {
    match strategy {
        OrientationStrategy::CenterAligned { reference_center } => align_away_from(n, mean, reference_center),
        OrientationStrategy::FirstElementRandomFlip { seed } => {
            let c = canonical_sign(n);
            if instance_flip(*seed) {
                -c
            } else {
                c
            }
        }
        OrientationStrategy::Keep => *n,
    }
}

/// `n` or `-n`, whichever has non-negative dot with `mean - center`; ties keep `n`.
#[inline]
pub fn align_away_from(n: &Vec3, mean: &Vec3, center: &Vec3) -> Vec3 {
    if n.dot(&(mean - center)) < 0.0 {
        -n
    } else {
        *n
    }
}

/// Largest cross-section of the ellipsoid: pi times the two largest scales.
pub fn cross_section_area(scales: &Vec3) -> Result<f64, SurfaceError> {
    check_scales(scales)?;
    let s = sorted_scales(scales);
    Ok(PI * (s[1] * s[2]))
}

/// One element per primitive, in scene order.
pub fn build_surface_elements(
    scene: &SceneSplat,
    strategy: &OrientationStrategy,
) -> Result<Vec<SurfaceElement>, SurfaceError> {
    scene
        .primitives
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let q = p.unit_rotation();
            let q = [q.w, q.i, q.j, q.k];
            element_from_params(&p.mean, &p.scales(), &q, strategy).map_err(|e| SurfaceError::AtPrimitive {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn element_from_params(
    mean: &Vec3,
    scales: &Vec3,
    rotation: &[f64; 4],
    strategy: &OrientationStrategy,
) -> Result<SurfaceElement, SurfaceError> {
    let principal = principal_normal(scales, rotation)?;
    Ok(SurfaceElement {
        x: *mean,
        n: orient_normal(&principal.normal, mean, strategy),
        area: cross_section_area(scales)?,
        flatness: principal.flatness,
        degenerate: principal.degenerate,
    })
}

/// Flat CSV/JSON row: `x,y,z,nx,ny,nz,area,flatness`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub nx: f64,
    pub ny: f64,
    pub nz: f64,
    pub area: f64,
    pub flatness: f64,
}

impl From<&SurfaceElement> for ElementRecord {
    fn from(e: &SurfaceElement) -> Self {
        Self {
            x: e.x.x,
            y: e.x.y,
            z: e.x.z,
            nx: e.n.x,
            ny: e.n.y,
            nz: e.n.z,
            area: e.area,
            flatness: e.flatness,
        }
    }
}

impl ElementRecord {
    pub fn to_element(&self) -> Result<SurfaceElement, SurfaceError> {
        let n = Vec3::new(self.nx, self.ny, self.nz);
        let values = [self.x, self.y, self.z, self.area, self.flatness];
        if !values.iter().all(|v| v.is_finite()) || self.area < 0.0 || !(n.norm() > 0.0) {
            return Err(SurfaceError::Csv(format!("invalid element row {self:?}")));
        }
        Ok(SurfaceElement {
            x: Vec3::new(self.x, self.y, self.z),
            n: n.normalize(),
            area: self.area,
            flatness: self.flatness,
            degenerate: false,
        })
    }
}

pub fn write_elements_csv<W: Write>(writer: W, elements: &[SurfaceElement]) -> Result<(), SurfaceError> {
    let mut w = csv::Writer::from_writer(writer);
    for e in elements {
        w.serialize(ElementRecord::from(e))
            .map_err(|e| SurfaceError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| SurfaceError::Csv(e.to_string()))
}

pub fn read_elements_csv<R: Read>(reader: R) -> Result<Vec<SurfaceElement>, SurfaceError> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<ElementRecord>()
        .map(|row| {
            row.map_err(|e| SurfaceError::Csv(e.to_string()))
                .and_then(|rec| rec.to_element())
        })
        .collect()
}
