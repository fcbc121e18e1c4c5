//! Oriented 3D boxes with a single heading angle about +z.
//!
//! Boxes are the unit of containment for flux, of overlap for IoU and NMS,
//! and of matching for evaluation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Volumes below this are treated as degenerate and get IoU 0.
const DEGENERATE_VOLUME: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box size must be finite and positive, got [{0}, {1}, {2}]")]
    InvalidSize(f64, f64, f64),
    #[error("box center/yaw must be finite")]
    NonFinite,
    #[error("detection score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("IoU threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2pi for tiny negative inputs
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// A box with center, size `(w, l, h)` along its local axes, and yaw.
///
/// `w` runs along the local x axis, `l` along local y, `h` along z. The yaw
/// is kept in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self, BoxError> {
        if !size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(BoxError::InvalidSize(size.x, size.y, size.z));
        }
        if !center.iter().all(|c| c.is_finite()) || !yaw.is_finite() {
            return Err(BoxError::NonFinite);
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Result<Self, BoxError> {
        Self::new(center, size, 0.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// Same center and yaw, size multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            size: self.size * factor,
            ..*self
        }
    }

    /// Expresses a world point in the box frame.
    pub fn to_local(&self, point: &Vec3) -> Vec3 {
        let (sin, cos) = self.yaw.sin_cos();
        let d = point - self.center;
        Vec3::new(cos * d.x + sin * d.y, -sin * d.x + cos * d.y, d.z)
    }

    /// Counter-clockwise footprint corners in the xy plane.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (sin, cos) = self.yaw.sin_cos();
        let hw = 0.5 * self.size.x;
        let hl = 0.5 * self.size.y;
        let local = [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]];
        local.map(|[x, y]| {
            [
                self.center.x + cos * x - sin * y,
                self.center.y + sin * x + cos * y,
            ]
        })
    }

    /// World-space axis-aligned bounds `(min, max)` of the box.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let (sin, cos) = self.yaw.sin_cos();
        let hx = 0.5 * (self.size.x * cos.abs() + self.size.y * sin.abs());
        let hy = 0.5 * (self.size.x * sin.abs() + self.size.y * cos.abs());
        let half = Vec3::new(hx, hy, 0.5 * self.size.z);
        (self.center - half, self.center + half)
    }

    /// Precomputed containment test for repeated queries.
    pub fn frame(&self) -> BoxFrame {
        let (sin, cos) = self.yaw.sin_cos();
        BoxFrame {
            center: self.center,
            half: self.size * 0.5,
            sin,
            cos,
        }
    }

    /// Smallest yaw-free box containing this one.
    pub fn enclosing_axis_aligned(&self) -> Self {
        let (lo, hi) = self.aabb();
        Self {
            center: (lo + hi) * 0.5,
            size: hi - lo,
            yaw: 0.0,
        }
    }
}

/// Box with trigonometry cached for fast point-in-box tests.
#[derive(Debug, Clone, Copy)]
pub struct BoxFrame {
    center: Vec3,
    half: Vec3,
    sin: f64,
    cos: f64,
}

impl BoxFrame {
    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let dz = p.z - self.center.z;
        let lx = self.cos * dx + self.sin * dy;
        let ly = -self.sin * dx + self.cos * dy;
        lx.abs() <= self.half.x && ly.abs() <= self.half.y && dz.abs() <= self.half.z
    }
}

/// True iff `point` lies in the closed box.
pub fn contains(bx: &OrientedBox, point: &Vec3) -> bool {
    bx.frame().contains(point)
}

/// How footprints are intersected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Exact rotated-footprint intersection.
    #[default]
    YawAware,
    /// Each box replaced by its world-aligned enclosing box first.
    AxisAligned,
}

/// Yaw-aware 3D IoU.
pub fn iou_3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    iou_3d_with(a, b, IouMode::YawAware)
}

pub fn iou_3d_with(a: &OrientedBox, b: &OrientedBox, mode: IouMode) -> f64 {
    let (a, b) = match mode {
        IouMode::YawAware => (*a, *b),
        IouMode::AxisAligned => (a.enclosing_axis_aligned(), b.enclosing_axis_aligned()),
    };
    let va = a.volume();
    let vb = b.volume();
    if va < DEGENERATE_VOLUME || vb < DEGENERATE_VOLUME {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let z_lo = (a.center.z - 0.5 * a.size.z).max(b.center.z - 0.5 * b.size.z);
    let z_hi = (a.center.z + 0.5 * a.size.z).min(b.center.z + 0.5 * b.size.z);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.footprint(), &b.footprint());
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = va + vb - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Area of the intersection of two counter-clockwise convex polygons.
pub fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let clipped = clip_convex(subject, clip);
    polygon_area(&clipped)
}

/// Sutherland-Hodgman clipping of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let mut input = Vec::with_capacity(subject.len() + clip.len());
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        // >= 0 means left of (or on) the directed edge a->b
        let side = |p: &[f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        std::mem::swap(&mut input, &mut output);
        output.clear();
        let mut prev = *input.last().unwrap();
        let mut prev_side = side(&prev);
        for &cur in input.iter() {
            let cur_side = side(&cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(edge_crossing(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(edge_crossing(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

fn edge_crossing(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Shoelace area, absolute value.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice.abs()
}

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub score: f64,
    pub label: Option<i64>,
}

impl Detection {
    pub fn new(bbox: OrientedBox, score: f64) -> Result<Self, BoxError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(BoxError::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            score,
            label: None,
        })
    }

    pub fn with_label(mut self, label: i64) -> Self {
        self.label = Some(label);
        self
    }
}

/// Greedy 3D NMS. Input order breaks score ties; the result is sorted by
/// descending score.
pub fn nms_3d(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, BoxError> {
    nms_3d_with(detections, iou_threshold, IouMode::YawAware)
}

pub fn nms_3d_with(
    detections: &[Detection],
    iou_threshold: f64,
    mode: IouMode,
) -> Result<Vec<Detection>, BoxError> {
    Ok(nms_3d_indices(detections, iou_threshold, mode)?
        .into_iter()
        .map(|i| detections[i])
        .collect())
}

/// Indices of the detections kept by [`nms_3d_with`], in output order.
pub fn nms_3d_indices(detections: &[Detection], iou_threshold: f64, mode: IouMode) -> Result<Vec<usize>, BoxError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(BoxError::InvalidThreshold(iou_threshold));
    }
    if let Some(d) = detections.iter().find(|d| !d.score.is_finite()) {
        return Err(BoxError::InvalidScore(d.score));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(detections.iter().map(|d| d.score)) {
        let candidate = &detections[i].bbox;
        let suppressed = kept
            .iter()
            .any(|&k| iou_3d_with(&detections[k].bbox, candidate, mode) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// JSON record shared by box, detection and ground-truth files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
}

impl BoxRecord {
    pub fn to_box(&self) -> Result<OrientedBox, BoxError> {
        OrientedBox::new(Vec3::from(self.center), Vec3::from(self.size), self.yaw)
    }

    /// Missing scores read as 1.
    pub fn to_detection(&self) -> Result<Detection, BoxError> {
        let mut det = Detection::new(self.to_box()?, self.score.unwrap_or(1.0))?;
        det.label = self.label;
        Ok(det)
    }
}

impl From<&OrientedBox> for BoxRecord {
    fn from(b: &OrientedBox) -> Self {
        Self {
            center: b.center.into(),
            size: b.size.into(),
            yaw: b.yaw,
            score: None,
            label: None,
        }
    }
}

impl From<&Detection> for BoxRecord {
    fn from(d: &Detection) -> Self {
        Self {
            score: Some(d.score),
            label: d.label,
            ..BoxRecord::from(&d.bbox)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn unit_at(x: f64, y: f64, z: f64, yaw: f64) -> OrientedBox {
        OrientedBox::new(Vec3::new(x, y, z), Vec3::new(1.0, 1.0, 1.0), yaw).unwrap()
    }

    #[test]
    fn containment_examples() {
        let b = unit_at(0.0, 0.0, 0.0, 0.0);
        assert!(contains(&b, &Vec3::new(0.5, 0.0, 0.0)));
        assert!(!contains(&b, &Vec3::new(0.51, 0.0, 0.0)));
        let r = unit_at(0.0, 0.0, 0.0, FRAC_PI_2);
        assert!(contains(&r, &Vec3::new(0.4, 0.1, 0.0)));
    }

    #[test]
    fn rotated_long_box_containment() {
        // 2x0.2 box rotated a quarter turn now extends along y
        let b = OrientedBox::new(Vec3::zeros(), Vec3::new(2.0, 0.2, 1.0), FRAC_PI_2).unwrap();
        assert!(contains(&b, &Vec3::new(0.0, 0.9, 0.0)));
        assert!(!contains(&b, &Vec3::new(0.9, 0.0, 0.0)));
    }

    #[test]
    fn iou_examples() {
        let a = unit_at(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou_3d(&a, &a), 1.0);
        let b = unit_at(0.5, 0.0, 0.0, 0.0);
        assert_relative_eq!(iou_3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        let c = unit_at(0.0, 0.0, 0.0, FRAC_PI_2);
        assert_relative_eq!(iou_3d(&a, &c), 1.0, epsilon = 1e-12);
        let far = unit_at(3.0, 0.0, 0.0, 0.3);
        assert_eq!(iou_3d(&a, &far), 0.0);
        let above = unit_at(0.0, 0.0, 1.5, 0.0);
        assert_eq!(iou_3d(&a, &above), 0.0);
    }

    #[test]
    fn iou_octagon_overlap() {
        // square vs. itself rotated 45 degrees: regular octagon of area 2(sqrt2 - 1)
        let a = unit_at(0.0, 0.0, 0.0, 0.0);
        let b = unit_at(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert_relative_eq!(iou_3d(&a, &b), inter / (2.0 - inter), epsilon = 1e-12);
    }

    #[test]
    fn axis_aligned_mode_uses_enclosing_boxes() {
        let a = unit_at(0.0, 0.0, 0.0, 0.0);
        let b = unit_at(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_4);
        // enclosing box of b is sqrt2 x sqrt2 x 1 and contains a
        assert_relative_eq!(iou_3d_with(&a, &b, IouMode::AxisAligned), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(OrientedBox::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), 0.0).is_err());
        assert!(OrientedBox::new(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::repeat(1.0), 0.0).is_err());
    }

    #[test]
    fn yaw_is_wrapped() {
        let b = unit_at(0.0, 0.0, 0.0, 3.0 * PI);
        assert_relative_eq!(b.yaw, -PI, epsilon = 1e-12);
        assert!(wrap_angle(PI) < PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_relative_eq!(wrap_angle(-0.25), -0.25);
    }

    #[test]
    fn nms_examples() {
        let a = unit_at(0.0, 0.0, 0.0, 0.0);
        let dets = [Detection::new(a, 0.9).unwrap(), Detection::new(a, 0.8).unwrap()];
        let kept = nms_3d(&dets, 0.25).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let disjoint = [
            Detection::new(a, 0.5).unwrap(),
            Detection::new(unit_at(5.0, 0.0, 0.0, 0.0), 0.7).unwrap(),
        ];
        let kept = nms_3d(&disjoint, 0.25).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.7);
    }

    #[test]
    fn nms_chain_keeps_ends() {
        // neighbours share half their extent (IoU 1/3); A and C only touch
        let dets = [
            Detection::new(unit_at(0.0, 0.0, 0.0, 0.0), 0.9).unwrap(),
            Detection::new(unit_at(0.5, 0.0, 0.0, 0.0), 0.8).unwrap(),
            Detection::new(unit_at(1.0, 0.0, 0.0, 0.0), 0.7).unwrap(),
        ];
        assert_relative_eq!(iou_3d(&dets[1].bbox, &dets[2].bbox), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(iou_3d(&dets[0].bbox, &dets[2].bbox), 0.0);
        let kept = nms_3d(&dets, 0.25).unwrap();
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let a = unit_at(0.0, 0.0, 0.0, 0.0).scaled(1.0);
        let dets = [
            Detection::new(a, 0.5).unwrap().with_label(1),
            Detection::new(a, 0.5).unwrap().with_label(2),
        ];
        let kept = nms_3d(&dets, 0.25).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].label, Some(1));
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        assert_eq!(nms_3d(&[], 1.5), Err(BoxError::InvalidThreshold(1.5)));
    }

    #[test]
    fn record_round_trip() {
        let json = r#"[{"center":[1,2,3],"size":[1,1,2],"yaw":0.5,"score":0.7,"label":3},
                       {"center":[0,0,0],"size":[1,1,1],"yaw":0}]"#;
        let recs: Vec<BoxRecord> = serde_json::from_str(json).unwrap();
        let d = recs[0].to_detection().unwrap();
        assert_eq!(d.label, Some(3));
        assert_eq!(BoxRecord::from(&d), recs[0]);
        assert_eq!(recs[1].to_detection().unwrap().score, 1.0);
    }
}
