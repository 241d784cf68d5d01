//! Shape-refined bi-ventricular segmentation on volumetric grids.
//!
//! The crate is organised as the refinement pipeline runs:
//!
//! * [`volgrid`]: geometry, intensity/label/probability grids, landmark sets,
//!   the MGRID container format.
//! * [`preproc`]: intensity normalisation, reframing, augmentation and
//!   low-resolution acquisition simulation.
//! * [`multitask`]: the segmentation + landmark objective (Dice loss,
//!   class-balanced cross-entropy, weight decay) and a small 2.5D classifier
//!   trained with it.
//! * [`landmarks`]: centroid extraction, 12-DOF affine fitting, point errors.
//! * [`regfuse`]: atlas selection, label-consistency B-spline registration,
//!   non-local label fusion and the end-to-end `refine` pipeline.
//! * [`metrics`]: Dice, Hausdorff and ventricular volume/mass measures.
//! * [`phantom`]: synthetic bi-ventricular phantoms.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the scalar
//! types used by the file formats and the command line tool.

pub mod error;
pub mod landmarks;
pub mod metrics;
pub mod multitask;
pub mod phantom;
pub mod preproc;
pub mod regfuse;
pub mod scalar;
pub mod volgrid;

pub use error::{Error, Result};
pub use scalar::Real;
pub use volgrid::{argmax_labels, one_hot, Geometry, LabelGrid, LandmarkName, LandmarkSet};

/// Intensity volume as stored on disk.
pub type VolumeGrid = volgrid::Volume<f32>;
/// Per-voxel probability channels at storage precision.
pub type ProbGrid = volgrid::Prob<f32>;
pub type Atlas = volgrid::Atlas<f32>;
pub type AffineTransform = landmarks::Affine<f64>;
pub type FfdTransform = regfuse::FfdTransform;
pub type ToyModel = multitask::ToyModel<f32>;
