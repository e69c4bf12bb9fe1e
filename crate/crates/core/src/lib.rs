//! Learning feedback models for reactive movement primitives.
//!
//! The crate covers demonstration segmentation, quaternion DMP fitting,
//! phase-modulated neural-network feedback and PI²-CMA refinement, together
//! with a simulated tilt-board plant to exercise them.

pub mod canonical;
pub mod dmp;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod pmnn;
pub mod quat;
pub mod rl;
pub mod rng;
pub mod segmentation;
pub mod testbed;
mod serde_mat;

pub use canonical::{CanonicalState, KernelBank};
pub use dmp::{DmpParams, DmpState, ExpectedSensorTraces, Rollout};
pub use error::{Error, Result};
pub use pmnn::{FeedbackDataset, PmnnParams};
pub use quat::{RotVec3, UnitQuaternion, Vec3};
