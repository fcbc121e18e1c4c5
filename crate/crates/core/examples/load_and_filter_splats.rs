//! Writes a small splat PLY, reads it back, and filters by opacity and crop box.

use splat_closure::splat_io::{read_splat_ply, ParseOptions};
use splat_closure::{filter_scene, write_splat_ply, CropBox, GaussianPrimitive, SceneSplat, Vec3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let primitives = (0..10)
        .map(|i| {
            let x = i as f64 * 0.5;
            // opacity logits from -2 to 2.5
            GaussianPrimitive::new(Vec3::new(x, 0.0, 0.0), Vec3::repeat(-3.0), [1.0, 0.0, 0.0, 0.0], i as f64 * 0.5 - 2.0)
        })
        .collect();
    let scene = SceneSplat::new(primitives);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("scene.ply");
    std::fs::write(&path, write_splat_ply(&scene)?)?;

    let loaded = read_splat_ply(&path, &ParseOptions::default())?;
    println!("loaded {} Gaussians", loaded.len());

    let opaque = filter_scene(&loaded, 0.5, None)?;
    println!("opacity >= 0.5: {}", opaque.len());

    let crop = CropBox::new(Vec3::new(0.0, -1.0, -1.0), Vec3::new(3.0, 1.0, 1.0))?;
    let cropped = filter_scene(&loaded, 0.5, Some(&crop))?;
    for p in &cropped.primitives {
        println!("  x = {:.1}  opacity = {:.3}", p.mean.x, p.opacity());
    }
    Ok(())
}
