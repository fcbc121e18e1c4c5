//! AP/AR at two IoU thresholds and a flux histogram over a few boxes.

use splat_closure::evaluation::{evaluate, flux_histogram, FluxUnit, HistogramRange};
use splat_closure::flux::FluxField;
use splat_closure::synthetic::{gen_benchmark_scene, BenchmarkConfig};
use splat_closure::{Detection, OrientationStrategy, OrientedBox};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = gen_benchmark_scene(&BenchmarkConfig { objects: 3, seed: 1, ..Default::default() })?;
    let dets: Vec<Detection> = scene
        .gt_boxes
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let grown = OrientedBox { size: b.size * (1.0 + 0.3 * k as f64), ..*b };
            Detection::new(grown, 1.0 - 0.1 * k as f64)
        })
        .collect::<Result<_, _>>()?;
    let m = evaluate(&dets, &scene.gt_boxes)?;
    println!("AP25 {:.3}  AP50 {:.3}  AR25 {:.3}  AR50 {:.3}", m.ap_25, m.ap_50, m.ar_25, m.ar_50);

    let mut boxes = scene.gt_boxes.clone();
    boxes.extend(scene.fragments.iter().map(|f| f.bbox));
    let h = flux_histogram(
        &scene.elements,
        &boxes,
        5,
        FluxUnit::Normalized,
        HistogramRange::Fixed(1.0),
        &FluxField::default(),
        &OrientationStrategy::default(),
    )?;
    h.write_csv(std::io::stdout())?;
    Ok(())
}
