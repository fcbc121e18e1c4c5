//! # splat-closure
//!
//! Surface-closure analysis for 3D Gaussian Splatting scenes.
//!
//! Gaussians are turned into surface elements (position, oriented normal,
//! area). The flux of a constant unit field through the elements enclosed by
//! a candidate box vanishes when those elements form a closed surface, so the
//! magnitude of that flux is a geometric objectness signal. The crate uses it
//! to rescore, refine and evaluate oriented 3D detections.
//!
//! Modules, bottom up:
//!
//! - [`splat_io`]: binary PLY reading/writing and opacity/crop filters.
//! - [`surface`]: covariance, principal normal, orientation, cross-section area.
//! - [`boxes`]: oriented boxes, containment, yaw-aware IoU, 3D NMS.
//! - [`flux`]: flux quadrature over enclosed elements and the closure score.
//! - [`synthetic`]: tessellated shapes with analytic flux and labeled scenes.
//! - [`pipeline`]: closure rescoring, geometric box refinement, NMS.
//! - [`variational`]: residual injection and ELBO terms with gradients.
//! - [`evaluation`]: AP/AR, box regression loss, flux histograms.
//! - [`cli`]: the `splat-closure` command-line front end.

pub mod boxes;
pub mod cli;
pub mod evaluation;
pub mod flux;
pub mod pipeline;
pub mod splat_io;
pub mod surface;
pub mod synthetic;
pub mod variational;

pub use boxes::{contains, iou_3d, nms_3d, Detection, IouMode, OrientedBox};
pub use flux::{closure_score, flux_through_box, FluxField, FluxReport};
pub use splat_io::{filter_scene, parse_splat_ply, write_splat_ply, CropBox, GaussianPrimitive, SceneSplat};
pub use surface::{build_surface_elements, OrientationStrategy, SurfaceElement};

/// Three-vector used for positions, normals, sizes.
pub type Vec3 = nalgebra::Vector3<f64>;
