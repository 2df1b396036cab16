//! Clustering of 4D-STEM diffraction stacks.
//!
//! The crate factorizes a stack's 2D matrix view with multiplicative-update
//! NMF, picks the component count in two stages (loss-curve knee, then
//! image-quality distinctness over cluster representatives), and emits
//! orientation label maps plus crystal-overlap overlays derived from the
//! second/first coefficient weight ratio.

pub mod decide;
pub mod error;
pub mod io;
pub mod iqa;
pub mod maps;
pub mod nmf;
pub mod pipeline;
pub mod preprocess;
pub mod stack;
pub mod synthetic;

pub use error::{Error, Result};
pub use stack::{reshape_2d_to_4d, reshape_4d_to_2d, DataMatrix, ScanStack4D};
