//! Generates a labeled scene with clutter and jitter and prints per-object flux.

use splat_closure::flux::FluxField;
use splat_closure::synthetic::{gen_benchmark_scene, BenchmarkConfig};
use splat_closure::{flux_through_box, OrientationStrategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = BenchmarkConfig { objects: 5, clutter_ratio: 0.2, jitter: 0.005, seed: 7, ..Default::default() };
    let scene = gen_benchmark_scene(&config)?;
    println!("{} elements, {} objects, {} fragments", scene.elements.len(), scene.gt_boxes.len(), scene.fragments.len());

    let field = FluxField::default();
    for (k, gt) in scene.gt_boxes.iter().enumerate() {
        let r = flux_through_box(&scene.elements, gt, &field, &OrientationStrategy::default());
        println!("object {k}: {:?}  enclosed {}  normalized flux {:.2e}", scene.object_shapes[k], r.enclosed_count, r.normalized_flux);
    }
    for f in &scene.fragments {
        let r = flux_through_box(&scene.elements, &f.bbox, &field, &OrientationStrategy::default());
        println!("fragment {:?}: normalized flux {:.3}", f.shape, r.normalized_flux);
    }
    Ok(())
}
