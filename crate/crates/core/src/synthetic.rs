//! Synthetic surfaces with known flux, and labeled desk-scale scenes.
//!
//! Closed shapes (sphere, ellipsoid, box shell) have zero vector area, so the
//! flux of any constant field through them is zero. Open shapes
//! (hemisphere, planar patch, box shell with a face removed) have an
//! analytic vector area `V` and flux `T · V`.

use std::f64::consts::PI;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{contains, OrientedBox};
use crate::flux::FluxField;
use crate::splat_io::{CropBox, GaussianPrimitive, SceneSplat};
use crate::surface::SurfaceElement;
use crate::Vec3;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653; // pi * (3 - sqrt 5)

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("at least 4 elements are needed to tile a surface, got {0}")]
    TooFewElements(usize),
    #[error("shape dimensions must be finite and positive")]
    InvalidDimensions,
    #[error("could not place {0} shapes without overlap after {1} attempts")]
    PlacementFailed(usize, usize),
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
}

/// Face of an axis-aligned box, named by its outward normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    PosX,
    NegX,
    PosY,
    NegY,
    /// Top.
    PosZ,
    NegZ,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::PosX, Face::NegX, Face::PosY, Face::NegY, Face::PosZ, Face::NegZ];

    pub fn normal(self) -> Vec3 {
        match self {
            Face::PosX => Vec3::x(),
            Face::NegX => -Vec3::x(),
            Face::PosY => Vec3::y(),
            Face::NegY => -Vec3::y(),
            Face::PosZ => Vec3::z(),
            Face::NegZ => -Vec3::z(),
        }
    }

    fn axis(self) -> usize {
        match self {
            Face::PosX | Face::NegX => 0,
            Face::PosY | Face::NegY => 1,
            Face::PosZ | Face::NegZ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { r: f64 },
    Ellipsoid { a: f64, b: f64, c: f64 },
    BoxShell { w: f64, l: f64, h: f64 },
    /// Upper half (`z >= center.z`), open at the base.
    Hemisphere { r: f64 },
    /// Rectangle in the xy plane with normal +z.
    PlanarPatch { w: f64, l: f64 },
    BoxShellMissingFace { w: f64, l: f64, h: f64, face: Face },
}

impl Shape {
    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Sphere { r } | Shape::Hemisphere { r } => vec![r],
            Shape::Ellipsoid { a, b, c } => vec![a, b, c],
            Shape::BoxShell { w, l, h } | Shape::BoxShellMissingFace { w, l, h, .. } => vec![w, l, h],
            Shape::PlanarPatch { w, l } => vec![w, l],
        }
    }

    pub fn is_closed(&self) -> bool {
        matches!(self, Shape::Sphere { .. } | Shape::Ellipsoid { .. } | Shape::BoxShell { .. })
    }

    /// Integral of `n dA` over the surface.
    pub fn vector_area(&self) -> Vec3 {
        match *self {
            Shape::Sphere { .. } | Shape::Ellipsoid { .. } | Shape::BoxShell { .. } => Vec3::zeros(),
            Shape::Hemisphere { r } => Vec3::z() * (PI * r * r),
            Shape::PlanarPatch { w, l } => Vec3::z() * (w * l),
            Shape::BoxShellMissingFace { w, l, h, face } => -face.normal() * box_face_area(w, l, h, face),
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            Shape::Sphere { r } => 4.0 * PI * r * r,
            Shape::Ellipsoid { a, b, c } => ellipsoid_area(a, b, c),
            Shape::BoxShell { w, l, h } => 2.0 * (w * l + w * h + l * h),
            Shape::Hemisphere { r } => 2.0 * PI * r * r,
            Shape::PlanarPatch { w, l } => w * l,
            Shape::BoxShellMissingFace { w, l, h, face } => 2.0 * (w * l + w * h + l * h) - box_face_area(w, l, h, face),
        }
    }
}

fn box_face_area(w: f64, l: f64, h: f64, face: Face) -> f64 {
    match face.axis() {
        0 => l * h,
        1 => w * h,
        _ => w * l,
    }
}

/// Nodes and weights of `n`-point Gauss-Legendre quadrature on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Surface area of the ellipsoid with semi-axes `a, b, c`, by quadrature over the unit sphere.
pub fn ellipsoid_area(a: f64, b: f64, c: f64) -> f64 {
    let (nodes, weights) = gauss_legendre(96);
    let azimuths = 256;
    let dphi = 2.0 * PI / azimuths as f64;
    let mut total = 0.0;
    for (t, wt) in nodes.iter().zip(&weights) {
        let s = (1.0 - t * t).sqrt();
        let mut ring = 0.0;
        for k in 0..azimuths {
            let (sp, cp) = (k as f64 * dphi).sin_cos();
            let g = Vec3::new(s * cp / a, s * sp / b, t / c);
            ring += g.norm();
        }
        total += wt * ring * dphi;
    }
    a * b * c * total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub shape: Shape,
    pub element_count: usize,
    pub center: Vec3,
    /// Tessellations are deterministic; the seed is carried for scene bookkeeping.
    pub seed: u64,
}

impl SurfaceSpec {
    pub fn new(shape: Shape, element_count: usize) -> Self {
        Self {
            shape,
            element_count,
            center: Vec3::zeros(),
            seed: 0,
        }
    }

    pub fn at(mut self, center: Vec3) -> Self {
        self.center = center;
        self
    }
}

/// A tessellated shape and its analytic flux.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub elements: Vec<SurfaceElement>,
    pub analytic_flux: f64,
    pub vector_area: Vec3,
    pub surface_area: f64,
    pub tight_box: OrientedBox,
}

impl SurfaceSample {
    /// Rotates about the tight-box center by `yaw`, then moves that center to `position`.
    pub fn placed(&self, yaw: f64, position: Vec3, field: &FluxField) -> Self {
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), yaw);
        let pivot = self.tight_box.center;
        let elements = self
            .elements
            .iter()
            .map(|e| SurfaceElement {
                x: position + rot * (e.x - pivot),
                n: rot * e.n,
                ..*e
            })
            .collect();
        let vector_area = rot * self.vector_area;
        Self {
            elements,
            analytic_flux: field.direction().dot(&vector_area),
            vector_area,
            surface_area: self.surface_area,
            tight_box: OrientedBox {
                center: position,
                yaw: crate::boxes::wrap_angle(self.tight_box.yaw + yaw),
                ..self.tight_box
            },
        }
    }
}

/// Tessellates `spec.shape` with outward normals, using the default field for the analytic flux.
pub fn gen_primitive_surface(spec: &SurfaceSpec) -> Result<SurfaceSample, SynthError> {
    gen_primitive_surface_with(spec, &FluxField::default())
}

pub fn gen_primitive_surface_with(spec: &SurfaceSpec, field: &FluxField) -> Result<SurfaceSample, SynthError> {
    if spec.element_count < 4 {
        return Err(SynthError::TooFewElements(spec.element_count));
    }
    if !spec.shape.dims().iter().all(|d| d.is_finite() && *d > 0.0) || !spec.center.iter().all(|c| c.is_finite()) {
        return Err(SynthError::InvalidDimensions);
    }
    let n = spec.element_count;
    let c = spec.center;
    let shape = spec.shape;
    let surface_area = shape.surface_area();
    let (elements, tight_box) = match shape {
        Shape::Sphere { r } => {
            let elems = fibonacci_sphere(n)
                .map(|p| SurfaceElement::new(c + p * r, p, surface_area / n as f64))
                .collect();
            (elems, tight(c, Vec3::repeat(2.0 * r)))
        }
        Shape::Ellipsoid { a, b, c: cz } => {
            let axes = Vec3::new(a, b, cz);
            let raw: Vec<(Vec3, Vec3, f64)> = fibonacci_sphere(n)
                .map(|p| {
                    let grad = p.component_div(&axes);
                    // area Jacobian of the sphere -> ellipsoid map
                    (c + p.component_mul(&axes), grad, a * b * cz * grad.norm())
                })
                .collect();
            let scale = surface_area / raw.iter().map(|r| r.2).sum::<f64>();
            let elems = raw
                .into_iter()
                .map(|(x, grad, w)| SurfaceElement::new(x, grad, w * scale))
                .collect();
            (elems, tight(c, axes * 2.0))
        }
        Shape::BoxShell { w, l, h } => (box_shell(c, w, l, h, None, n), tight(c, Vec3::new(w, l, h))),
        Shape::BoxShellMissingFace { w, l, h, face } => {
            (box_shell(c, w, l, h, Some(face), n), tight(c, Vec3::new(w, l, h)))
        }
        Shape::Hemisphere { r } => {
            let elems = (0..n)
                .map(|i| {
                    let z = 1.0 - (i as f64 + 0.5) / n as f64;
                    let p = lattice_point(i, z);
                    SurfaceElement::new(c + p * r, p, surface_area / n as f64)
                })
                .collect();
            (elems, tight(c + Vec3::new(0.0, 0.0, 0.5 * r), Vec3::new(2.0 * r, 2.0 * r, r)))
        }
        Shape::PlanarPatch { w, l } => {
            let (nu, nv) = grid_dims(w, l, n as f64);
            let elems = grid(nu, nv)
                .map(|(u, v)| SurfaceElement::new(c + Vec3::new((u - 0.5) * w, (v - 0.5) * l, 0.0), Vec3::z(), w * l / (nu * nv) as f64))
                .collect();
            let thickness = 0.02 * w.max(l);
            (elems, tight(c, Vec3::new(w, l, thickness)))
        }
    };
    let vector_area = shape.vector_area();
    Ok(SurfaceSample {
        elements,
        analytic_flux: field.direction().dot(&vector_area),
        vector_area,
        surface_area,
        tight_box,
    })
}

/// Pads by a relative 1e-5 so surface points on the faces stay inside after
/// rigid motions and float32 export.
fn tight(center: Vec3, size: Vec3) -> OrientedBox {
    OrientedBox {
        center,
        size: size * (1.0 + 1e-5),
        yaw: 0.0,
    }
}

fn lattice_point(i: usize, z: f64) -> Vec3 {
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let (s, c) = (i as f64 * GOLDEN_ANGLE).sin_cos();
    Vec3::new(rho * c, rho * s, z)
}

/// Equal-area Fibonacci lattice on the unit sphere.
pub fn fibonacci_sphere(n: usize) -> impl Iterator<Item = Vec3> {
    (0..n).map(move |i| lattice_point(i, 1.0 - (2 * i + 1) as f64 / n as f64))
}

fn grid_dims(du: f64, dv: f64, count: f64) -> (usize, usize) {
    let nu = ((count * du / dv).sqrt().round() as usize).max(1);
    let nv = ((count / nu as f64).round() as usize).max(1);
    (nu, nv)
}

/// Cell centers of an `nu x nv` grid on the unit square.
fn grid(nu: usize, nv: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..nv).flat_map(move |j| (0..nu).map(move |i| ((i as f64 + 0.5) / nu as f64, (j as f64 + 0.5) / nv as f64)))
}

fn box_shell(c: Vec3, w: f64, l: f64, h: f64, missing: Option<Face>, n: usize) -> Vec<SurfaceElement> {
    let dims = Vec3::new(w, l, h);
    let total: f64 = Face::ALL
        .iter()
        .filter(|f| Some(**f) != missing)
        .map(|f| box_face_area(w, l, h, *f))
        .sum();
    let cell = (total / n as f64).sqrt();
    let mut elems = Vec::with_capacity(n + 64);
    for face in Face::ALL {
        if Some(face) == missing {
            continue;
        }
        let axis = face.axis();
        let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
        let (du, dv) = (dims[ua], dims[va]);
        let nu = ((du / cell).round() as usize).max(1);
        let nv = ((dv / cell).round() as usize).max(1);
        let area = du * dv / (nu * nv) as f64;
        let normal = face.normal();
        for (u, v) in grid(nu, nv) {
            let mut p = normal.component_mul(&dims) * 0.5;
            p[ua] = (u - 0.5) * du;
            p[va] = (v - 0.5) * dv;
            elems.push(SurfaceElement::new(c + p, normal, area));
        }
    }
    elems
}

/// Appends `count` clutter elements: uniform positions in `bounds`, uniform
/// random unit normals, areas log-uniform in `[0.1, 10] x` the median area
/// of `elements` (or of a shell tiling `bounds` when `elements` is empty).
pub fn add_outliers(elements: &[SurfaceElement], count: usize, bounds: &CropBox, seed: u64) -> Vec<SurfaceElement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = elements.to_vec();
    out.extend(outliers(&mut rng, reference_area(elements, bounds, count), count, bounds));
    out
}

fn reference_area(elements: &[SurfaceElement], bounds: &CropBox, count: usize) -> f64 {
    if elements.is_empty() {
        let e = bounds.extent();
        let shell = 2.0 * (e.x * e.y + e.x * e.z + e.y * e.z);
        return (shell / count.max(1) as f64).max(f64::MIN_POSITIVE);
    }
    let mut areas: Vec<f64> = elements.iter().map(|e| e.area).collect();
    areas.sort_by(f64::total_cmp);
    areas[areas.len() / 2]
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn outliers(rng: &mut ChaCha8Rng, reference: f64, count: usize, bounds: &CropBox) -> Vec<SurfaceElement> {
    (0..count)
        .map(|_| {
            let x = Vec3::from_fn(|i, _| rng.random_range(bounds.min[i]..=bounds.max[i]));
            let n = random_unit(rng);
            let area = reference * 10f64.powf(rng.random_range(-1.0..=1.0));
            SurfaceElement::new(x, n, area)
        })
        .collect()
}

/// Perturbs positions and normals with isotropic zero-mean noise of deviation `sigma`.
pub fn jitter_elements(elements: &mut [SurfaceElement], sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma is positive");
    for e in elements.iter_mut() {
        let dx = Vec3::from_fn(|_, _| noise.sample(&mut rng));
        let dn = Vec3::from_fn(|_, _| noise.sample(&mut rng));
        e.x += dx;
        let n = e.n + dn;
        if n.norm() > 1e-12 {
            e.n = n.normalize();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub objects: usize,
    /// Clutter elements per object element.
    pub clutter_ratio: f64,
    /// Standard deviation of position/normal noise, scene units.
    pub jitter: f64,
    pub seed: u64,
    /// Share of the clutter budget spent on open fragments; the rest are outliers.
    pub fragment_share: f64,
    /// Number of open fragments; defaults to `objects` when there is clutter.
    pub fragments: Option<usize>,
    pub elements_per_object: usize,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub max_attempts: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            objects: 3,
            clutter_ratio: 0.0,
            jitter: 0.0,
            seed: 0,
            fragment_share: 0.5,
            fragments: None,
            elements_per_object: 2000,
            room_min: [0.0, 0.0, 0.0],
            room_max: [4.0, 4.0, 2.0],
            max_attempts: 10_000,
        }
    }
}

impl BenchmarkConfig {
    pub fn room(&self) -> Result<CropBox, SynthError> {
        CropBox::new(Vec3::from(self.room_min), Vec3::from(self.room_max))
            .map_err(|_| SynthError::InvalidConfig("room min exceeds max".into()))
    }

    fn fragment_count(&self) -> usize {
        if self.clutter_ratio > 0.0 && self.fragment_share > 0.0 {
            self.fragments.unwrap_or(self.objects)
        } else {
            0
        }
    }
}

/// An open fragment placed as a distractor, with its tight box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub bbox: OrientedBox,
    pub analytic_flux: f64,
    pub shape: Shape,
    pub element_count: usize,
}

/// Elements with per-element object labels and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub elements: Vec<SurfaceElement>,
    pub gt_boxes: Vec<OrientedBox>,
    /// Object index per element; `None` for fragments and outliers.
    pub object_ids: Vec<Option<usize>>,
    /// Analytic flux per ground-truth object.
    pub analytic_flux: Vec<f64>,
    pub object_shapes: Vec<Shape>,
    pub fragments: Vec<Fragment>,
    pub config: BenchmarkConfig,
}

impl LabeledScene {
    pub fn object_elements(&self, object: usize) -> impl Iterator<Item = &SurfaceElement> {
        self.elements
            .iter()
            .zip(&self.object_ids)
            .filter(move |(_, id)| **id == Some(object))
            .map(|(e, _)| e)
    }
}

fn random_object(rng: &mut ChaCha8Rng) -> Shape {
    let r = rng.random_range(0.15..0.35);
    match rng.random_range(0..3) {
        0 => Shape::Sphere { r },
        1 => Shape::Ellipsoid {
            a: r,
            b: r * rng.random_range(0.6..1.0),
            c: r * rng.random_range(0.6..1.0),
        },
        _ => Shape::BoxShell {
            w: 2.0 * r,
            l: 2.0 * r * rng.random_range(0.6..1.0),
            h: 2.0 * r * rng.random_range(0.6..1.0),
        },
    }
}

fn random_fragment(rng: &mut ChaCha8Rng) -> Shape {
    if rng.random_bool(0.5) {
        Shape::Hemisphere {
            r: rng.random_range(0.15..0.3),
        }
    } else {
        Shape::BoxShellMissingFace {
            w: rng.random_range(0.25..0.45),
            l: rng.random_range(0.25..0.45),
            h: rng.random_range(0.25..0.45),
            face: Face::ALL[rng.random_range(0..6)],
        }
    }
}

/// Generates a reproducible scene of closed objects, open fragments and outliers.
pub fn gen_benchmark_scene(config: &BenchmarkConfig) -> Result<LabeledScene, SynthError> {
    if config.objects == 0 && config.clutter_ratio <= 0.0 {
        return Err(SynthError::InvalidConfig("scene needs objects or clutter".into()));
    }
    if !(config.clutter_ratio >= 0.0 && config.jitter >= 0.0) || !(0.0..=1.0).contains(&config.fragment_share) {
        return Err(SynthError::InvalidConfig(
            "clutter_ratio and jitter must be non-negative, fragment_share in [0, 1]".into(),
        ));
    }
    if config.elements_per_object < 4 {
        return Err(SynthError::TooFewElements(config.elements_per_object));
    }
    let room = config.room()?;
    let field = FluxField::default();

    // independent streams so that e.g. changing jitter keeps the layout
    let mut layout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(config.seed);
    clutter_rng.set_stream(1);

    let object_shapes: Vec<Shape> = (0..config.objects).map(|_| random_object(&mut layout_rng)).collect();
    let clutter_total = (config.clutter_ratio * (config.objects * config.elements_per_object) as f64).round() as usize;
    let n_fragments = config.fragment_count();
    let fragment_budget = if n_fragments > 0 {
        (clutter_total as f64 * config.fragment_share).round() as usize
    } else {
        0
    };
    let per_fragment = fragment_budget.checked_div(n_fragments).map_or(0, |k| k.max(4));
    let outlier_count = clutter_total.saturating_sub(per_fragment * n_fragments);
    let fragment_shapes: Vec<Shape> = (0..n_fragments).map(|_| random_fragment(&mut layout_rng)).collect();

    let mut placed: Vec<(SurfaceSample, Option<usize>)> = Vec::new();
    let mut occupied: Vec<(Vec3, f64)> = Vec::new();
    let shapes = object_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, Some(i), config.elements_per_object))
        .chain(fragment_shapes.iter().map(|s| (*s, None, per_fragment)));
    for (shape, object, count) in shapes {
        let sample = gen_primitive_surface_with(&SurfaceSpec::new(shape, count), &field)?;
        let yaw = match shape {
            Shape::Sphere { .. } | Shape::Hemisphere { .. } => 0.0,
            _ => layout_rng.random_range(-PI..PI),
        };
        let radius = 0.5 * sample.tight_box.size.norm();
        let margin = 0.05;
        let mut attempt = 0;
        let position = loop {
            if attempt == config.max_attempts {
                return Err(SynthError::PlacementFailed(placed.len() + 1, config.max_attempts));
            }
            attempt += 1;
            let lo = room.min + Vec3::repeat(radius);
            let hi = room.max - Vec3::repeat(radius);
            if (0..3).any(|i| lo[i] > hi[i]) {
                return Err(SynthError::InvalidConfig("room too small for shapes".into()));
            }
            let p = Vec3::from_fn(|i, _| layout_rng.random_range(lo[i]..=hi[i]));
            if occupied.iter().all(|(q, rq)| (p - q).norm() > radius + rq + margin) {
                break p;
            }
        };
        occupied.push((position, radius));
        placed.push((sample.placed(yaw, position, &field), object));
    }

    let mut elements = Vec::new();
    let mut object_ids = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut analytic_flux = Vec::new();
    let mut fragments = Vec::new();
    for ((sample, object), shape) in placed.iter().zip(object_shapes.iter().chain(&fragment_shapes)) {
        elements.extend_from_slice(&sample.elements);
        object_ids.extend(std::iter::repeat_n(*object, sample.elements.len()));
        match object {
            Some(_) => {
                gt_boxes.push(sample.tight_box);
                analytic_flux.push(sample.analytic_flux);
            }
            None => fragments.push(Fragment {
                bbox: sample.tight_box,
                analytic_flux: sample.analytic_flux,
                shape: *shape,
                element_count: sample.elements.len(),
            }),
        }
    }
    let mut jitter_rng_seed = ChaCha8Rng::seed_from_u64(config.seed);
    jitter_rng_seed.set_stream(2);
    jitter_elements(&mut elements, config.jitter, jitter_rng_seed.random());

    let reference = reference_area(&elements, &room, outlier_count);
    let clutter = outliers(&mut clutter_rng, reference, outlier_count, &room);
    object_ids.extend(std::iter::repeat_n(None, clutter.len()));
    elements.extend(clutter);

    Ok(LabeledScene {
        elements,
        gt_boxes,
        object_ids,
        analytic_flux,
        object_shapes,
        fragments,
        config: config.clone(),
    })
}

/// Fraction of an object's elements inside its ground-truth box.
pub fn gt_coverage(scene: &LabeledScene, object: usize) -> f64 {
    let bx = &scene.gt_boxes[object];
    let (inside, total) = scene
        .object_elements(object)
        .fold((0usize, 0usize), |(i, t), e| (i + contains(bx, &e.x) as usize, t + 1));
    inside as f64 / total.max(1) as f64
}

/// Encodes elements as flat Gaussians whose principal normal and
/// cross-section area reproduce each element.
///
/// The thin axis is `thickness_ratio` times the in-plane radius.
pub fn elements_to_splat(elements: &[SurfaceElement], thickness_ratio: f64, opacity_logit: f64) -> SceneSplat {
    let primitives = elements
        .iter()
        .map(|e| {
            let r = (e.area / PI).sqrt();
            let q = UnitQuaternion::rotation_between(&Vec3::z(), &e.n)
                .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), PI));
            let log_scale = Vec3::new(r.ln(), r.ln(), (r * thickness_ratio).ln());
            GaussianPrimitive::new(e.x, log_scale, [q.w, q.i, q.j, q.k], opacity_logit)
        })
        .collect();
    SceneSplat::new(primitives)
}

/// Serializable scene description (without elements).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub element_count: usize,
    pub objects: Vec<ObjectMetadata>,
    pub fragments: Vec<ObjectMetadata>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMetadata {
    pub shape: Shape,
    pub analytic_flux: f64,
    pub bbox: crate::boxes::BoxRecord,
}

impl LabeledScene {
    pub fn metadata(&self) -> SceneMetadata {
        SceneMetadata {
            seed: self.config.seed,
            config: self.config.clone(),
            element_count: self.elements.len(),
            objects: self
                .object_shapes
                .iter()
                .zip(&self.analytic_flux)
                .zip(&self.gt_boxes)
                .map(|((s, f), b)| ObjectMetadata {
                    shape: *s,
                    analytic_flux: *f,
                    bbox: b.into(),
                })
                .collect(),
            fragments: self
                .fragments
                .iter()
                .map(|f| ObjectMetadata {
                    shape: f.shape,
                    analytic_flux: f.analytic_flux,
                    bbox: (&f.bbox).into(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::flux_through_box;
    use crate::surface::{build_surface_elements, OrientationStrategy};
    use approx::assert_relative_eq;

    fn flux_of(sample: &SurfaceSample) -> crate::flux::FluxReport {
        flux_through_box(&sample.elements, &sample.tight_box, &FluxField::default(), &OrientationStrategy::Keep)
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert_relative_eq!(integral, 2.0 / 15.0, epsilon = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn ellipsoid_area_reference_values() {
        assert_relative_eq!(ellipsoid_area(1.0, 1.0, 1.0), 4.0 * PI, max_relative = 1e-13);
        // prolate spheroid a=b=1, c=2: 2 pi (1 + c / e * asin e), e = sqrt(1 - 1/c^2)
        let e = (1.0f64 - 0.25).sqrt();
        let prolate = 2.0 * PI * (1.0 + 2.0 / e * e.asin());
        assert_relative_eq!(ellipsoid_area(1.0, 1.0, 2.0), prolate, max_relative = 1e-12);
    }

    #[test]
    fn closed_shapes_have_near_zero_flux() {
        for shape in [
            Shape::Sphere { r: 1.0 },
            Shape::Ellipsoid { a: 1.0, b: 0.6, c: 0.3 },
            Shape::BoxShell { w: 1.0, l: 0.5, h: 2.0 },
        ] {
            let s = gen_primitive_surface(&SurfaceSpec::new(shape, 10_000).at(Vec3::new(1.0, -2.0, 0.5))).unwrap();
            assert_eq!(s.analytic_flux, 0.0);
            let r = flux_of(&s);
            assert_eq!(r.enclosed_count, s.elements.len(), "{shape:?}");
            assert!(r.normalized_flux <= 1e-3, "{shape:?}: {}", r.normalized_flux);
            let sum: f64 = s.elements.iter().map(|e| e.area).sum();
            assert_relative_eq!(sum, s.surface_area, max_relative = 1e-12);
            for e in &s.elements {
                assert!(e.n.dot(&(e.x - s.tight_box.center)) > 0.0, "{shape:?}");
            }
        }
    }

    #[test]
    fn hemisphere_flux_matches_disk() {
        let s = gen_primitive_surface(&SurfaceSpec::new(Shape::Hemisphere { r: 1.0 }, 10_000)).unwrap();
        assert_relative_eq!(s.analytic_flux, PI / 3f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(flux_of(&s).flux, PI / 3f64.sqrt(), max_relative = 1e-3);
    }

    #[test]
    fn missing_top_face() {
        let shape = Shape::BoxShellMissingFace {
            w: 1.0,
            l: 1.0,
            h: 1.0,
            face: Face::PosZ,
        };
        let s = gen_primitive_surface(&SurfaceSpec::new(shape, 10_000)).unwrap();
        assert_relative_eq!(s.analytic_flux, -1.0 / 3f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(flux_of(&s).flux, -1.0 / 3f64.sqrt(), max_relative = 1e-9);
        assert_relative_eq!(s.elements.iter().map(|e| e.area).sum::<f64>(), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn planar_patch_vector_area() {
        let s = gen_primitive_surface(&SurfaceSpec::new(Shape::PlanarPatch { w: 2.0, l: 0.5 }, 400)).unwrap();
        assert_relative_eq!(flux_of(&s).flux, 1.0 / 3f64.sqrt(), max_relative = 1e-12);
        assert_eq!(s.elements.len(), 400);
    }

    #[test]
    fn too_few_elements() {
        assert_eq!(
            gen_primitive_surface(&SurfaceSpec::new(Shape::Sphere { r: 1.0 }, 3)),
            Err(SynthError::TooFewElements(3))
        );
        assert_eq!(
            gen_primitive_surface(&SurfaceSpec::new(Shape::Sphere { r: -1.0 }, 30)),
            Err(SynthError::InvalidDimensions)
        );
    }

    #[test]
    fn placement_rotates_vector_area() {
        let shape = Shape::BoxShellMissingFace {
            w: 1.0,
            l: 1.0,
            h: 1.0,
            face: Face::PosX,
        };
        let field = FluxField::default();
        let s = gen_primitive_surface(&SurfaceSpec::new(shape, 2000)).unwrap();
        let p = s.placed(0.7, Vec3::new(3.0, 1.0, 0.0), &field);
        let r = flux_through_box(&p.elements, &p.tight_box, &field, &OrientationStrategy::default());
        assert_relative_eq!(r.flux, p.analytic_flux, epsilon = 1e-9);
        assert!((p.analytic_flux - s.analytic_flux).abs() > 1e-3);
    }

    #[test]
    fn outliers_are_seeded() {
        let bounds = CropBox::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        assert!(add_outliers(&[], 0, &bounds, 1).is_empty());
        let a = add_outliers(&[], 1000, &bounds, 9);
        let b = add_outliers(&[], 1000, &bounds, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|e| bounds.contains(&e.x)));
        let base = [SurfaceElement::new(Vec3::zeros(), Vec3::z(), 0.01)];
        let with = add_outliers(&base, 50, &bounds, 2);
        assert_eq!(with[0], base[0]);
        assert!(with[1..].iter().all(|e| (0.001 - 1e-15..=0.1 + 1e-15).contains(&e.area)));
    }

    #[test]
    fn benchmark_scene_is_reproducible_and_closed() {
        let cfg = BenchmarkConfig {
            seed: 11,
            ..Default::default()
        };
        let a = gen_benchmark_scene(&cfg).unwrap();
        assert_eq!(a, gen_benchmark_scene(&cfg).unwrap());
        assert_eq!(a.gt_boxes.len(), 3);
        assert!(a.fragments.is_empty());
        for (k, b) in a.gt_boxes.iter().enumerate() {
            assert_eq!(gt_coverage(&a, k), 1.0);
            let r = flux_through_box(&a.elements, b, &FluxField::default(), &OrientationStrategy::default());
            assert!(r.normalized_flux <= 1e-3, "object {k}: {}", r.normalized_flux);
        }
    }

    #[test]
    fn clutter_composition() {
        let cfg = BenchmarkConfig {
            seed: 5,
            clutter_ratio: 0.5,
            ..Default::default()
        };
        let s = gen_benchmark_scene(&cfg).unwrap();
        assert_eq!(s.fragments.len(), 3);
        let objects = s.object_ids.iter().filter(|i| i.is_some()).count();
        assert!(objects.abs_diff(3 * cfg.elements_per_object) < 300);
        let fragment_elems: usize = s.fragments.iter().map(|f| f.element_count).sum();
        assert!(s.fragments.iter().all(|f| f.element_count.abs_diff(500) < 100));
        assert_eq!(s.elements.len(), objects + fragment_elems + 1500);
        assert!(s.fragments.iter().all(|f| f.analytic_flux.is_finite()));
    }

    #[test]
    fn placement_failure_is_reported() {
        let cfg = BenchmarkConfig {
            objects: 50,
            room_max: [1.5, 1.5, 1.5],
            max_attempts: 200,
            ..Default::default()
        };
        assert!(matches!(gen_benchmark_scene(&cfg), Err(SynthError::PlacementFailed(..))));
    }

    #[test]
    fn splat_encoding_reproduces_elements() {
        let s = gen_primitive_surface(&SurfaceSpec::new(Shape::Sphere { r: 0.5 }, 200)).unwrap();
        let mut elems = s.elements.clone();
        elems[0].n = -Vec3::z();
        let scene = elements_to_splat(&elems, 0.01, 2.0);
        let back = build_surface_elements(&scene, &OrientationStrategy::Keep).unwrap();
        for (a, b) in elems.iter().zip(&back) {
            assert_relative_eq!(a.area, b.area, max_relative = 1e-12);
            assert_relative_eq!(a.n.dot(&b.n).abs(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn outliers_alone_do_not_close() {
        let bounds = CropBox::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        let bx = OrientedBox::axis_aligned(Vec3::repeat(0.5), Vec3::repeat(1.0)).unwrap();
        let mut values: Vec<f64> = (0..100)
            .map(|seed| {
                let e = add_outliers(&[], 1000, &bounds, seed);
                flux_through_box(&e, &bx, &FluxField::default(), &OrientationStrategy::Keep).normalized_flux
            })
            .collect();
        values.sort_by(f64::total_cmp);
        // frozen Monte-Carlo band: 97 of 100 seeds exceed 1e-3, median ~0.019
        assert!(values.iter().filter(|v| **v > 1e-3).count() >= 95);
        assert!(values[50] > 1e-2, "median {}", values[50]);
    }

    #[test]
    fn jitter_sweep_is_monotone_in_expectation() {
        let levels = [0.0, 0.01, 0.03, 0.07];
        let mut mean = [0.0; 4];
        for seed in 0..20 {
            for (slot, jitter) in mean.iter_mut().zip(levels) {
                let s = gen_benchmark_scene(&BenchmarkConfig {
                    seed,
                    jitter,
                    ..Default::default()
                })
                .unwrap();
                for b in &s.gt_boxes {
                    *slot += flux_through_box(&s.elements, b, &FluxField::default(), &OrientationStrategy::default())
                        .normalized_flux;
                }
            }
        }
        assert!(mean.windows(2).all(|w| w[1] > w[0]), "{mean:?}");
        assert!(mean[0] / 60.0 <= 1e-3);
    }
}
