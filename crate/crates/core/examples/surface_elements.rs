//! Principal normals and areas of flat Gaussians, oriented away from a center.

use splat_closure::surface::{principal_normal, SurfaceError};
use splat_closure::{build_surface_elements, GaussianPrimitive, OrientationStrategy, SceneSplat, Vec3};

fn main() -> Result<(), SurfaceError> {
    // thin along z, rotated 90 degrees about x, so the normal lies along y
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let pn = principal_normal(&Vec3::new(0.2, 0.1, 0.001), &[s, s, 0.0, 0.0])?;
    println!("normal {:?}  degenerate {}", pn.normal.as_slice(), pn.degenerate);

    let scene = SceneSplat::new(vec![
        GaussianPrimitive::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(-2.0, -2.0, -7.0), [1.0, 0.0, 0.0, 0.0], 3.0),
        GaussianPrimitive::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(-2.0, -2.0, -7.0), [1.0, 0.0, 0.0, 0.0], 3.0),
    ]);
    let outward = OrientationStrategy::CenterAligned { reference_center: Vec3::zeros() };
    for e in build_surface_elements(&scene, &outward)? {
        println!("x {:?}  n {:?}  area {:.5}  flatness {:.4}", e.x.as_slice(), e.n.as_slice(), e.area, e.flatness);
    }
    Ok(())
}
