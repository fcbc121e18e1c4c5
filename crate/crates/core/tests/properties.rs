use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion};
use proptest::prelude::*;

use splat_closure::boxes::{iou_3d, nms_3d, Detection, OrientedBox};
use splat_closure::evaluation::{average_precision, average_recall, histogram, FluxUnit, HistogramRange};
use splat_closure::flux::{closure_score, flux_through_box, ElementIndex, FluxField};
use splat_closure::pipeline::{refine_box, rescore_proposals, Objective, PipelineConfig};
use splat_closure::splat_io::{filter_scene, parse_splat_ply, write_splat_ply, GaussianPrimitive, SceneSplat};
use splat_closure::surface::{
    covariance_from_params, cross_section_area, principal_normal, rotation_matrix, OrientationStrategy, SurfaceElement,
};
use splat_closure::synthetic::{gen_primitive_surface, Face, Shape, SurfaceSpec};
use splat_closure::variational::{elbo_terms, inject_residual, FeatureMatrix};
use splat_closure::Vec3;

fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    [lo..hi, lo..hi, lo..hi].prop_map(Vec3::from)
}

fn unit_quaternion() -> impl Strategy<Value = [f64; 4]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
        .prop_filter("non-zero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|q| {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.map(|v| v / n)
        })
}

fn oriented_box() -> impl Strategy<Value = OrientedBox> {
    (vec3(-2.0, 2.0), vec3(0.1, 2.0), -PI..PI).prop_map(|(c, s, y)| OrientedBox::new(c, s, y).unwrap())
}

fn elements(max: usize) -> impl Strategy<Value = Vec<SurfaceElement>> {
    prop::collection::vec(
        (vec3(-2.0, 2.0), vec3(-1.0, 1.0), 1e-4..1e-1f64)
            .prop_filter("normal", |(_, n, _)| n.norm() > 1e-3)
            .prop_map(|(x, n, a)| SurfaceElement::new(x, n, a)),
        0..max,
    )
}

fn primitive(rest: usize) -> impl Strategy<Value = GaussianPrimitive> {
    (
        vec3(-50.0, 50.0),
        vec3(-8.0, 1.0),
        unit_quaternion(),
        -6.0..6.0f64,
        prop::collection::vec(-1.0..1.0f32, rest),
    )
        .prop_map(|(m, s, q, o, rest_coeffs)| {
            let f = |v: f64| v as f32 as f64;
            let mut p = GaussianPrimitive::new(m.map(f), s.map(f), q.map(f), f(o));
            p.color_rest = rest_coeffs;
            p
        })
}

fn scene() -> impl Strategy<Value = SceneSplat> {
    prop_oneof![Just(0usize), Just(9), Just(45)]
        .prop_flat_map(|rest| prop::collection::vec(primitive(rest), 0..40))
        .prop_map(SceneSplat::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ply_write_parse_is_byte_stable(scene in scene()) {
        let bytes = write_splat_ply(&scene).unwrap();
        let parsed = parse_splat_ply(&bytes).unwrap();
        prop_assert_eq!(parsed.len(), scene.len());
        for (a, b) in parsed.primitives.iter().zip(&scene.primitives) {
            prop_assert_eq!(a.mean, b.mean);
            prop_assert_eq!(&a.color_rest, &b.color_rest);
        }
        prop_assert_eq!(write_splat_ply(&parsed).unwrap(), bytes);
    }

    #[test]
    fn raising_opacity_threshold_never_adds(scene in scene(), lo in 0.0..1.0f64, hi in 0.0..1.0f64) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let a = filter_scene(&scene, lo, None).unwrap().len();
        let b = filter_scene(&scene, hi, None).unwrap().len();
        prop_assert!(b <= a);
    }

    #[test]
    fn normal_is_orthogonal_to_larger_axes(s in vec3(1e-3, 1.0), q in unit_quaternion()) {
        let pn = principal_normal(&s, &q).unwrap();
        let r = rotation_matrix(&q).unwrap();
        let mut axes = [0usize, 1, 2];
        axes.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
        if !pn.degenerate {
            for &i in &axes[1..] {
                prop_assert!(pn.normal.dot(&r.column(i).into_owned()).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn normal_matches_generic_eigensolver(s in vec3(1e-2, 1.0), q in unit_quaternion()) {
        let mut sorted = [s.x, s.y, s.z];
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[1] - sorted[0] > 1e-2 * sorted[1]);
        let cov: Matrix3<f64> = covariance_from_params(&s, &q).unwrap();
        let eig = SymmetricEigen::new(cov);
        let k = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(k).into_owned();
        let n = principal_normal(&s, &q).unwrap().normal;
        prop_assert!((n.dot(&v).abs() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn rotation_equivariance_and_area(s in vec3(1e-3, 1.0), q in unit_quaternion(), r in unit_quaternion(), k in 0.01..100.0f64) {
        let pn = principal_normal(&s, &q).unwrap();
        prop_assume!(!pn.degenerate);
        let qa = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let ra = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(r[0], r[1], r[2], r[3]));
        let rq = ra * qa;
        let rotated = principal_normal(&s, &[rq.w, rq.i, rq.j, rq.k]).unwrap().normal;
        let expected = ra * pn.normal;
        prop_assert!((rotated - expected).norm().min((rotated + expected).norm()) <= 1e-12);
        let a = cross_section_area(&s).unwrap();
        let ka = cross_section_area(&(s * k)).unwrap();
        prop_assert!((ka - k * k * a).abs() <= 1e-12 * ka);
    }

    #[test]
    fn flux_is_bounded_by_enclosed_area(e in elements(200), b in oriented_box()) {
        for orientation in [OrientationStrategy::default(), OrientationStrategy::Keep, OrientationStrategy::FirstElementRandomFlip { seed: 3 }] {
            let r = flux_through_box(&e, &b, &FluxField::default(), &orientation);
            prop_assert!(r.flux.abs() <= r.total_area * (1.0 + 1e-12));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.normalized_flux));
        }
    }

    #[test]
    fn flux_is_translation_invariant(e in elements(200), b in oriented_box(), t in vec3(-100.0, 100.0)) {
        let field = FluxField::default();
        let moved: Vec<SurfaceElement> = e.iter().map(|x| SurfaceElement { x: x.x + t, ..*x }).collect();
        let mb = OrientedBox { center: b.center + t, ..b };
        let r0 = flux_through_box(&e, &b, &field, &OrientationStrategy::default());
        let r1 = flux_through_box(&moved, &mb, &field, &OrientationStrategy::default());
        // membership can flip only for points within rounding distance of a face
        prop_assume!(r0.enclosed_count == r1.enclosed_count);
        prop_assert!((r0.flux - r1.flux).abs() <= 1e-12 * r0.total_area.max(1e-300) + 1e-15);
    }

    #[test]
    fn grid_index_matches_linear_scan(e in elements(400), boxes in prop::collection::vec(oriented_box(), 1..8)) {
        let index = ElementIndex::new(&e);
        let field = FluxField::default();
        for b in &boxes {
            let orientation = OrientationStrategy::default();
            prop_assert_eq!(index.flux(b, &field, &orientation), flux_through_box(&e, b, &field, &orientation));
        }
    }

    #[test]
    fn closure_score_range_and_monotonicity(a in 0.0..50.0f64, b in 0.0..50.0f64, gamma in 0.01..=1.0f64) {
        let (sa, sb) = (closure_score(a, gamma).unwrap(), closure_score(b, gamma).unwrap());
        prop_assert!(sa > 0.0 && sa <= 1.0);
        if a <= b {
            prop_assert!(sa >= sb);
        }
    }

    #[test]
    fn iou_symmetry_and_range(a in oriented_box(), b in oriented_box()) {
        let ab = iou_3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou_3d(&b, &a)).abs() <= 1e-12);
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn iou_rigid_invariance(a in oriented_box(), b in oriented_box(), t in vec3(-10.0, 10.0), yaw in -PI..PI) {
        let (c, s) = (yaw.cos(), yaw.sin());
        let move_box = |x: &OrientedBox| {
            let p = x.center;
            OrientedBox::new(Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z) + t, x.size, x.yaw + yaw).unwrap()
        };
        prop_assert!((iou_3d(&a, &b) - iou_3d(&move_box(&a), &move_box(&b))).abs() <= 1e-9);
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(
        boxes in prop::collection::vec((oriented_box(), 0.0..=1.0f64), 0..20),
        threshold in 0.0..=1.0f64,
    ) {
        let dets: Vec<Detection> = boxes.iter().map(|(b, s)| Detection::new(*b, *s).unwrap()).collect();
        let kept = nms_3d(&dets, threshold).unwrap();
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou_3d(&a.bbox, &b.bbox) <= threshold);
            }
        }
    }
}

fn shape() -> impl Strategy<Value = Shape> {
    let d = || 0.1..3.0f64;
    prop_oneof![
        d().prop_map(|r| Shape::Sphere { r }),
        (d(), d(), d()).prop_map(|(a, b, c)| Shape::Ellipsoid { a, b, c }),
        (d(), d(), d()).prop_map(|(w, l, h)| Shape::BoxShell { w, l, h }),
        d().prop_map(|r| Shape::Hemisphere { r }),
        (d(), d()).prop_map(|(w, l)| Shape::PlanarPatch { w, l }),
        (d(), d(), d(), 0..6usize).prop_map(|(w, l, h, f)| Shape::BoxShellMissingFace { w, l, h, face: Face::ALL[f] }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shapes_conserve_area_and_face_outward(shape in shape(), n in 4usize..3000, c in vec3(-5.0, 5.0)) {
        let s = gen_primitive_surface(&SurfaceSpec::new(shape, n).at(c)).unwrap();
        let total: f64 = s.elements.iter().map(|e| e.area).sum();
        prop_assert!((total - s.surface_area).abs() <= 1e-12 * s.surface_area);
        if shape.is_closed() {
            for e in &s.elements {
                prop_assert!(e.n.dot(&(e.x - c)) > 0.0);
            }
        }
        prop_assert!(s.analytic_flux.is_finite());
    }

    #[test]
    fn smaller_flux_never_ranks_lower(fa in 0.0..2.0f64, fb in 0.0..2.0f64, base in 0.01..=1.0f64) {
        // two patches with the same element count; flux set by the tilt of the normals
        let patch = |center: f64, flux: f64| -> Vec<SurfaceElement> {
            (0..20).map(|i| {
                let tilt = Vec3::new(1.0, 1.0, 1.0).normalize() * (flux / 2.0) + Vec3::new(1.0, -1.0, 0.0).normalize();
                SurfaceElement::new(Vec3::new(center + 0.01 * i as f64, 0.3, 0.0), tilt, 0.1)
            }).collect()
        };
        let mut e = patch(0.0, fa);
        e.extend(patch(5.0, fb));
        let b = |x: f64| OrientedBox::axis_aligned(Vec3::new(x + 0.1, 0.0, 0.0), Vec3::repeat(1.0)).unwrap();
        let dets = [Detection::new(b(0.0), base).unwrap(), Detection::new(b(5.0), base).unwrap()];
        let config = PipelineConfig { orientation: OrientationStrategy::Keep, ..Default::default() };
        let out = rescore_proposals(&dets, &e, &config).unwrap();
        let flux_a = out.iter().find(|p| p.source_index == 0).unwrap().closure.flux.abs();
        let flux_b = out.iter().find(|p| p.source_index == 1).unwrap().closure.flux.abs();
        if flux_a < flux_b {
            prop_assert_eq!(out[0].source_index, 0);
        } else if flux_b < flux_a {
            prop_assert_eq!(out[0].source_index, 1);
        }
        for gamma in [0.1, 0.7, 1.0] {
            let scaled = rescore_proposals(&dets, &e, &PipelineConfig { gamma, ..config.clone() }).unwrap();
            if flux_a != flux_b {
                prop_assert_eq!(scaled[0].source_index, out[0].source_index);
            }
        }
    }

    #[test]
    fn gate_is_sound(e in elements(300), boxes in prop::collection::vec(oriented_box(), 0..10), min_support in 0usize..30) {
        let dets: Vec<Detection> = boxes.iter().map(|b| Detection::new(*b, 0.7).unwrap()).collect();
        let config = PipelineConfig { min_support, ..Default::default() };
        for p in rescore_proposals(&dets, &e, &config).unwrap() {
            prop_assert!(p.closure.enclosed_count >= min_support || p.final_score == 0.0);
            prop_assert!((0.0..=1.0).contains(&p.final_score));
        }
        for p in splat_closure::pipeline::run_pipeline(&e, &dets, &config).unwrap() {
            prop_assert!(p.closure.enclosed_count >= min_support);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refinement_never_worsens_and_is_idempotent(
        r in 0.2..0.6f64,
        shift in vec3(-0.15, 0.15),
        yaw in -0.3..0.3f64,
        kind in 0..3usize,
    ) {
        let shape = match kind {
            0 => Shape::Sphere { r },
            1 => Shape::Ellipsoid { a: r, b: 0.7 * r, c: 0.5 * r },
            _ => Shape::BoxShell { w: 2.0 * r, l: 1.5 * r, h: r },
        };
        let s = gen_primitive_surface(&SurfaceSpec::new(shape, 1500)).unwrap();
        let start = OrientedBox::new(s.tight_box.center + shift * r, s.tight_box.size, yaw).unwrap();
        let mut config = PipelineConfig::default();
        config.refine.enabled = true;
        let once = refine_box(&start, &s.elements, &config).unwrap();
        let j = Objective::new(&start, &s.elements, &config).unwrap();
        prop_assert!(j.value(&once.bbox) >= j.value(&start));
        prop_assert!(once.objective_after >= once.objective_before);
        let twice = refine_box(&once.bbox, &s.elements, &config).unwrap();
        prop_assert!(twice.objective_after - twice.objective_before <= 1e-6);
    }
}

fn matrix(m: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = FeatureMatrix> {
    prop::collection::vec(lo..hi, m * c).prop_map(move |v| FeatureMatrix::from_row_slice(m, c, &v))
}

fn elbo_inputs() -> impl Strategy<Value = (FeatureMatrix, FeatureMatrix, FeatureMatrix, FeatureMatrix)> {
    (1usize..6, 1usize..5).prop_flat_map(|(m, c)| {
        (matrix(m, c, -3.0, 3.0), matrix(m, c, -3.0, 3.0), matrix(m, c, -3.0, 3.0), matrix(m, c, 0.05, 4.0))
    })
}

proptest! {
    #[test]
    fn kl_is_non_negative((f, r, mu, sigma) in elbo_inputs()) {
        let t = elbo_terms(&f, &r, &mu, &sigma).unwrap();
        prop_assert!(t.kl >= 0.0);
        prop_assert!(t.recon >= 0.0);
        let at_prior = elbo_terms(&f, &r, &mu.map(|_| 0.0), &sigma.map(|_| 1.0)).unwrap();
        prop_assert_eq!(at_prior.kl, 0.0);
        let off = mu.iter().any(|v| *v != 0.0) || sigma.iter().any(|v| *v != 1.0);
        if off {
            prop_assert!(t.kl > 0.0);
        }
    }

    #[test]
    fn loss_ignores_row_order((f, r, mu, sigma) in elbo_inputs(), seed in any::<u64>()) {
        let m = f.nrows();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut state = seed;
        for i in (1..m).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let p = |x: &FeatureMatrix| FeatureMatrix::from_fn(m, x.ncols(), |i, j| x[(perm[i], j)]);
        let a = elbo_terms(&f, &r, &mu, &sigma).unwrap().loss;
        let b = elbo_terms(&p(&f), &p(&r), &p(&mu), &p(&sigma)).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn injection_is_linear((f, r, g, _) in elbo_inputs(), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let lhs = inject_residual(&(&f * beta), &(&r * beta), alpha).unwrap();
        let rhs = inject_residual(&f, &r, alpha).unwrap() * beta;
        prop_assert!((lhs - rhs).amax() <= 1e-12);
        let sum = inject_residual(&(&f + &g), &(&r + &g), alpha).unwrap();
        let parts = inject_residual(&f, &r, alpha).unwrap() + inject_residual(&g, &g, alpha).unwrap();
        prop_assert!((sum - parts).amax() <= 1e-12);
    }
}

fn scored_boxes(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((oriented_box(), 0.0..=1.0f64), 0..max)
        .prop_map(|v| v.into_iter().map(|(b, s)| Detection::new(b, s).unwrap()).collect())
}

fn gt_boxes(max: usize) -> impl Strategy<Value = Vec<OrientedBox>> {
    prop::collection::vec(oriented_box(), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_shrink_as_threshold_rises(dets in scored_boxes(12), gt in gt_boxes(6), t0 in 0.0..=1.0f64, t1 in 0.0..=1.0f64) {
        let (lo, hi) = (t0.min(t1), t0.max(t1));
        prop_assert!(average_precision(&dets, &gt, hi).unwrap() <= average_precision(&dets, &gt, lo).unwrap() + 1e-12);
        prop_assert!(average_recall(&dets, &gt, hi).unwrap() <= average_recall(&dets, &gt, lo).unwrap());
    }

    #[test]
    fn ap_ignores_monotone_score_maps(dets in scored_boxes(12), gt in gt_boxes(6), t in 0.0..=1.0f64) {
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
        prop_assert_eq!(average_precision(&dets, &gt, t).unwrap(), average_precision(&squashed, &gt, t).unwrap());
    }

    #[test]
    fn extra_proposals_never_lower_recall(dets in scored_boxes(10), extra in scored_boxes(6), gt in gt_boxes(6), t in 0.0..=1.0f64) {
        let all: Vec<Detection> = dets.iter().chain(&extra).copied().collect();
        prop_assert!(average_recall(&all, &gt, t).unwrap() >= average_recall(&dets, &gt, t).unwrap());
    }

    #[test]
    fn histogram_conserves_count(values in prop::collection::vec(0.0..5.0f64, 0..50), bins in 1usize..30, upper in prop::option::of(0.1..3.0f64)) {
        let range = upper.map_or(HistogramRange::Auto, HistogramRange::Fixed);
        let h = histogram(values.clone(), bins, FluxUnit::Normalized, range).unwrap();
        prop_assert_eq!(h.total(), values.len());
        prop_assert_eq!(h.counts.len(), bins);
        prop_assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
    }
}
