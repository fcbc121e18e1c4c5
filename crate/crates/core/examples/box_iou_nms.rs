//! Yaw-aware IoU and 3D non-maximum suppression.

use splat_closure::boxes::{iou_3d_with, BoxError};
use splat_closure::{iou_3d, nms_3d, Detection, IouMode, OrientedBox, Vec3};

fn main() -> Result<(), BoxError> {
    let a = OrientedBox::new(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0), 0.0)?;
    let b = OrientedBox::new(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0), std::f64::consts::FRAC_PI_4)?;
    println!("rotated IoU        {:.4}", iou_3d(&a, &b));
    println!("axis-aligned IoU   {:.4}", iou_3d_with(&a, &b, IouMode::AxisAligned));

    let dets = vec![
        Detection::new(a, 0.9)?,
        Detection::new(b, 0.8)?,
        Detection::new(OrientedBox::new(Vec3::new(3.0, 0.0, 0.0), Vec3::repeat(1.0), 0.3)?, 0.7)?,
    ];
    for d in nms_3d(&dets, 0.25)? {
        println!("kept score {:.1} at {:?}", d.score, d.bbox.center.as_slice());
    }
    Ok(())
}
