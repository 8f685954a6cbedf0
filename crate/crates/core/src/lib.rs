//! MUSICAL: multiple signal classification for fluctuation-based
//! super-resolution fluorescence microscopy.
//!
//! The crate is organized along the processing chain:
//!
//! * [`stack_io`] loads and validates raw image stacks and writes results.
//! * [`psf`] models the microscope point-spread function and samples
//!   steering vectors on a window's pixel grid.
//! * [`subspace`] cuts sliding windows out of a stack and computes their
//!   eigenimage basis.
//! * [`indicator`] turns a decomposition into per-eigenimage weights
//!   (hard, eigenvalue-weighted and soft families) and evaluates the
//!   generalized indicator function.
//! * [`reconstruct`] runs the two-phase pipeline over every window and
//!   stitches the super-resolved image.
//! * [`simulate`] generates synthetic scenes and blinking image stacks.
//! * [`metrics`] measures resolution, contrast and dynamic range.

pub mod error;
pub mod indicator;
pub mod metrics;
pub mod psf;
pub mod reconstruct;
pub mod simulate;
pub mod stack_io;
pub mod subspace;

pub use error::{Error, Result};
pub use indicator::{
    Family, IndicatorConfig, IndicatorVariant, ThresholdMode, ThresholdSpec, WeightVector,
};
pub use psf::{PsfKind, PsfModel, SteeringVector, WindowGeometry};
pub use reconstruct::{
    CardinalityMap, Reconstruction, ReconstructionConfig, SingularValueTable,
};
pub use stack_io::{Calibration, ImageStack, StackSummary};
pub use subspace::{ProjectionSet, SubspaceDecomposition, WindowStack};
