//! Flux through a closed sphere versus an open hemisphere.

use splat_closure::flux::FluxField;
use splat_closure::synthetic::{gen_primitive_surface, Shape, SurfaceSpec};
use splat_closure::{closure_score, flux_through_box, OrientationStrategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let field = FluxField::default();
    for shape in [Shape::Sphere { r: 0.5 }, Shape::Hemisphere { r: 0.5 }, Shape::PlanarPatch { w: 1.0, l: 0.6 }] {
        let sample = gen_primitive_surface(&SurfaceSpec::new(shape, 4000))?;
        let report = flux_through_box(&sample.elements, &sample.tight_box, &field, &OrientationStrategy::default());
        println!(
            "{:<40} flux {:>10.3e}  analytic {:>10.3e}  normalized {:.4}  score {:.4}",
            format!("{shape:?}"),
            report.flux,
            sample.analytic_flux,
            report.normalized_flux,
            closure_score(report.flux.abs(), 0.5)?,
        );
    }
    Ok(())
}
