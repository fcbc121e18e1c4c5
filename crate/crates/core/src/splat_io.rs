//! Binary little-endian PLY files as written by Gaussian Splatting trainers.
//!
//! Every stored value is kept exactly as read (the `f32` payload widened to
//! `f64`), so parse followed by write reproduces the input byte for byte.
//! Decoded quantities (opacity, scales, unit rotation) are exposed as methods.
//!
//! Expected vertex properties, all `float`:
//!
//! ```text
//! x y z [nx ny nz] f_dc_0..2 [f_rest_0..44] opacity scale_0..2 rot_0..3
//! ```
//!
//! Properties outside this set (including the normals) are carried through
//! opaquely.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::Vec3;

/// Deviation from unit norm tolerated before normalizing a stored quaternion.
pub const DEFAULT_QUATERNION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SplatIoError {
    #[error("malformed PLY header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("required vertex property `{0}` is missing")]
    MissingProperty(String),
    #[error("vertex property `{name}` must be float32, found `{found}`")]
    WrongPropertyType { name: String, found: String },
    #[error("payload truncated at byte {offset}: expected {expected} bytes of vertex data, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{extra} unexpected bytes after vertex data at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("non-finite value in property `{property}` of vertex {vertex} at byte {offset}")]
    NonFinite {
        vertex: usize,
        property: String,
        offset: usize,
    },
    #[error("quaternion of vertex {vertex} has norm {norm}, outside unit tolerance")]
    NonUnitQuaternion { vertex: usize, norm: f64 },
    #[error("primitive {vertex} does not match the scene layout: {reason}")]
    LayoutMismatch { vertex: usize, reason: String },
    #[error("opacity threshold {0} outside [0, 1]")]
    InvalidOpacityThreshold(f64),
    #[error("crop box min exceeds max")]
    InvertedCrop,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SplatIoError>;

/// Logistic function mapping an opacity logit to alpha.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One splat as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub log_scale: Vec3,
    /// Stored quaternion, `(w, x, y, z)`; see [`Self::unit_rotation`].
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color_dc: [f64; 3],
    pub color_rest: Vec<f32>,
    /// Raw little-endian bytes of properties this crate does not interpret.
    pub extra: Vec<u8>,
}

impl GaussianPrimitive {
    pub fn new(mean: Vec3, log_scale: Vec3, rotation: [f64; 4], opacity_logit: f64) -> Self {
        Self {
            mean,
            log_scale,
            rotation,
            opacity_logit,
            color_dc: [0.0; 3],
            color_rest: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The stored rotation normalized to unit length.
    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }
}

/// Axis-aligned region with closed bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl CropBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if min.iter().zip(max.iter()).any(|(lo, hi)| !(lo <= hi)) {
            return Err(SplatIoError::InvertedCrop);
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Tight bounds of a point set, `None` when empty.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut iter = points.into_iter();
        let first = *iter.next()?;
        let (min, max) = iter.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Self { min, max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlyProperty {
    pub name: String,
    pub scalar: ScalarType,
    /// Type keyword exactly as it appeared in the header.
    pub type_token: String,
}

impl PlyProperty {
    fn float(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scalar: ScalarType::F32,
            type_token: "float".into(),
        }
    }
}

/// Vertex property order and header comments of a splat file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlyLayout {
    pub comments: Vec<String>,
    pub properties: Vec<PlyProperty>,
}

impl PlyLayout {
    /// The reference exporter layout with `rest_count` higher-order SH coefficients.
    pub fn standard(rest_count: usize) -> Self {
        let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((0..rest_count).map(|i| format!("f_rest_{i}")));
        names.extend(
            ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
                .iter()
                .map(|s| s.to_string()),
        );
        Self {
            comments: Vec::new(),
            properties: names.into_iter().map(PlyProperty::float).collect(),
        }
    }

    pub fn stride(&self) -> usize {
        self.properties.iter().map(|p| p.scalar.size()).sum()
    }

    fn slots(&self) -> Result<(Vec<Slot>, usize, usize)> {
        let mut slots = Vec::with_capacity(self.properties.len());
        let mut seen = [false; REQUIRED.len()];
        let mut rest = 0;
        let mut extra = 0;
        for prop in &self.properties {
            let slot = if let Some(idx) = REQUIRED.iter().position(|r| *r == prop.name) {
                if prop.scalar != ScalarType::F32 {
                    return Err(SplatIoError::WrongPropertyType {
                        name: prop.name.clone(),
                        found: prop.type_token.clone(),
                    });
                }
                seen[idx] = true;
                Slot::Required(idx)
            } else if prop.name.starts_with("f_rest_") && prop.scalar == ScalarType::F32 {
                rest += 1;
                Slot::Rest(rest - 1)
            } else {
                extra += prop.scalar.size();
                Slot::Extra {
                    offset: extra - prop.scalar.size(),
                    len: prop.scalar.size(),
                }
            };
            slots.push(slot);
        }
        if let Some(idx) = seen.iter().position(|s| !s) {
            return Err(SplatIoError::MissingProperty(REQUIRED[idx].into()));
        }
        Ok((slots, rest, extra))
    }
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy)]
enum Slot {
    Required(usize),
    Rest(usize),
    Extra { offset: usize, len: usize },
}

/// A decoded splat file. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSplat {
    pub primitives: Vec<GaussianPrimitive>,
    pub source_path: String,
    pub layout: PlyLayout,
    /// Tight bounds of all means; `None` for an empty scene.
    pub bounds: Option<CropBox>,
}

impl SceneSplat {
    /// Scene with the standard layout, sized for the first primitive's SH coefficients.
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        let rest = primitives.first().map_or(0, |p| p.color_rest.len());
        Self::with_layout(primitives, PlyLayout::standard(rest), String::new())
    }

    pub fn with_layout(primitives: Vec<GaussianPrimitive>, layout: PlyLayout, source_path: String) -> Self {
        let bounds = CropBox::around(primitives.iter().map(|p| &p.mean));
        Self {
            primitives,
            source_path,
            layout,
            bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParseOptions {
    /// `None` accepts any non-zero quaternion norm.
    pub quaternion_tolerance: Option<f64>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            quaternion_tolerance: Some(DEFAULT_QUATERNION_TOLERANCE),
        }
    }
}

pub fn parse_splat_ply(bytes: &[u8]) -> Result<SceneSplat> {
    parse_splat_ply_with(bytes, &ParseOptions::default())
}

pub fn read_splat_ply(path: impl AsRef<Path>, options: &ParseOptions) -> Result<SceneSplat> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut scene = parse_splat_ply_with(&bytes, options)?;
    scene.source_path = path.as_ref().display().to_string();
    Ok(scene)
}

struct Header {
    layout: PlyLayout,
    count: usize,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let malformed = |offset: usize, reason: &str| SplatIoError::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    let mut offset = 0;
    let mut line_no = 0;
    let mut comments = Vec::new();
    let mut properties = Vec::new();
    let mut count = None;
    let mut in_vertex = false;
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(malformed(offset, "header not terminated by end_header"));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| malformed(offset, "header is not valid UTF-8"))?
            .trim_end_matches('\r');
        let start = offset;
        offset += nl + 1;
        line_no += 1;
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or("");
        match (line_no, keyword) {
            (1, "ply") => {}
            (1, _) => return Err(malformed(start, "missing `ply` magic")),
            (2, "format") => {
                let fmt: Vec<&str> = tokens.collect();
                if fmt.first() != Some(&"binary_little_endian") {
                    return Err(malformed(start, "only binary_little_endian is supported"));
                }
            }
            (2, _) => return Err(malformed(start, "missing format line")),
            (_, "comment") | (_, "obj_info") => comments.push(line.to_string()),
            (_, "element") => {
                let name = tokens.next().unwrap_or("");
                let n = tokens
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| malformed(start, "element count is not an integer"))?;
                if name != "vertex" {
                    return Err(malformed(start, &format!("unsupported element `{name}`")));
                }
                if count.is_some() {
                    return Err(malformed(start, "duplicate vertex element"));
                }
                count = Some(n);
                in_vertex = true;
            }
            (_, "property") => {
                if !in_vertex {
                    return Err(malformed(start, "property outside the vertex element"));
                }
                let ty = tokens.next().unwrap_or("");
                if ty == "list" {
                    return Err(malformed(start, "list properties are not supported"));
                }
                let scalar = ScalarType::parse(ty)
                    .ok_or_else(|| malformed(start, &format!("unknown property type `{ty}`")))?;
                let name = tokens
                    .next()
                    .ok_or_else(|| malformed(start, "property without a name"))?;
                properties.push(PlyProperty {
                    name: name.to_string(),
                    scalar,
                    type_token: ty.to_string(),
                });
            }
            (_, "end_header") => break,
            _ => return Err(malformed(start, &format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| malformed(offset, "no vertex element declared"))?;
    Ok(Header {
        layout: PlyLayout { comments, properties },
        count,
        payload_offset: offset,
    })
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn parse_splat_ply_with(bytes: &[u8], options: &ParseOptions) -> Result<SceneSplat> {
    let header = parse_header(bytes)?;
    let (slots, rest_count, extra_len) = header.layout.slots()?;
    let stride = header.layout.stride();
    let payload = &bytes[header.payload_offset..];
    let expected = stride * header.count;
    if payload.len() < expected {
        return Err(SplatIoError::Truncated {
            offset: header.payload_offset + payload.len(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(SplatIoError::TrailingBytes {
            offset: header.payload_offset + expected,
            extra: payload.len() - expected,
        });
    }

    let mut primitives = Vec::with_capacity(header.count);
    for vertex in 0..header.count {
        let base = vertex * stride;
        let mut required = [0f64; REQUIRED.len()];
        let mut color_rest = vec![0f32; rest_count];
        let mut extra = vec![0u8; extra_len];
        let mut at = base;
        for (slot, prop) in slots.iter().zip(&header.layout.properties) {
            match *slot {
                Slot::Required(idx) => {
                    let v = read_f32(payload, at);
                    if !v.is_finite() {
                        return Err(SplatIoError::NonFinite {
                            vertex,
                            property: prop.name.clone(),
                            offset: header.payload_offset + at,
                        });
                    }
                    required[idx] = v as f64;
                }
                Slot::Rest(idx) => {
                    let v = read_f32(payload, at);
                    if !v.is_finite() {
                        return Err(SplatIoError::NonFinite {
                            vertex,
                            property: prop.name.clone(),
                            offset: header.payload_offset + at,
                        });
                    }
                    color_rest[idx] = v;
                }
                Slot::Extra { offset, len } => {
                    extra[offset..offset + len].copy_from_slice(&payload[at..at + len]);
                }
            }
            at += prop.scalar.size();
        }
        let r = &required;
        let primitive = GaussianPrimitive {
            mean: Vec3::new(r[0], r[1], r[2]),
            color_dc: [r[3], r[4], r[5]],
            opacity_logit: r[6],
            log_scale: Vec3::new(r[7], r[8], r[9]),
            rotation: [r[10], r[11], r[12], r[13]],
            color_rest,
            extra,
        };
        let norm = primitive.quaternion_norm();
        let out_of_tolerance = options
            .quaternion_tolerance
            .is_some_and(|tol| (norm - 1.0).abs() > tol);
        if norm == 0.0 || !norm.is_finite() || out_of_tolerance {
            return Err(SplatIoError::NonUnitQuaternion { vertex, norm });
        }
        primitives.push(primitive);
    }
    Ok(SceneSplat::with_layout(primitives, header.layout, String::new()))
}

/// Serializes `scene` with its layout. Values are written as `f32`.
pub fn write_splat_ply(scene: &SceneSplat) -> Result<Vec<u8>> {
    let layout = &scene.layout;
    let (slots, rest_count, extra_len) = layout.slots()?;
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    for c in &layout.comments {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&format!("element vertex {}\n", scene.primitives.len()));
    for p in &layout.properties {
        out.push_str(&format!("property {} {}\n", p.type_token, p.name));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    bytes.reserve(layout.stride() * scene.primitives.len());

    for (vertex, prim) in scene.primitives.iter().enumerate() {
        if prim.color_rest.len() != rest_count {
            return Err(SplatIoError::LayoutMismatch {
                vertex,
                reason: format!("{} SH rest coefficients, layout has {rest_count}", prim.color_rest.len()),
            });
        }
        if prim.extra.len() != extra_len {
            return Err(SplatIoError::LayoutMismatch {
                vertex,
                reason: format!("{} extra bytes, layout has {extra_len}", prim.extra.len()),
            });
        }
        let required = [
            prim.mean.x,
            prim.mean.y,
            prim.mean.z,
            prim.color_dc[0],
            prim.color_dc[1],
            prim.color_dc[2],
            prim.opacity_logit,
            prim.log_scale.x,
            prim.log_scale.y,
            prim.log_scale.z,
            prim.rotation[0],
            prim.rotation[1],
            prim.rotation[2],
            prim.rotation[3],
        ];
        for (slot, prop) in slots.iter().zip(&layout.properties) {
            match *slot {
                Slot::Required(idx) => {
                    let v = required[idx] as f32;
                    if !v.is_finite() {
                        return Err(SplatIoError::NonFinite {
                            vertex,
                            property: prop.name.clone(),
                            offset: bytes.len(),
                        });
                    }
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                Slot::Rest(idx) => {
                    let v = prim.color_rest[idx];
                    if !v.is_finite() {
                        return Err(SplatIoError::NonFinite {
                            vertex,
                            property: prop.name.clone(),
                            offset: bytes.len(),
                        });
                    }
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                Slot::Extra { offset, len } => bytes.extend_from_slice(&prim.extra[offset..offset + len]),
            }
        }
    }
    Ok(bytes)
}

/// Keeps primitives with `opacity >= opacity_min` whose mean lies in `crop`.
pub fn filter_scene(scene: &SceneSplat, opacity_min: f64, crop: Option<&CropBox>) -> Result<SceneSplat> {
    if !(0.0..=1.0).contains(&opacity_min) {
        return Err(SplatIoError::InvalidOpacityThreshold(opacity_min));
    }
    if let Some(c) = crop {
        CropBox::new(c.min, c.max)?;
    }
    let kept: Vec<GaussianPrimitive> = scene
        .primitives
        .iter()
        .filter(|p| p.opacity() >= opacity_min && crop.is_none_or(|c| c.contains(&p.mean)))
        .cloned()
        .collect();
    Ok(SceneSplat::with_layout(kept, scene.layout.clone(), scene.source_path.clone()))
}
