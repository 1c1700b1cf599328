//! Physics-informed state partitioning for protein trajectories.
//!
//! The crate covers the numerical half of the pipeline:
//!
//! - [`trajectory`]: topology/trajectory domain model, PDB-subset parser, PISTRJ binary frames
//! - [`physchem`]: radius of gyration, Shrake-Rupley SASA, Kabsch superposition, RMSF
//! - [`graph`]: per-frame k-nearest-neighbour residue graphs with Gaussian distance expansion
//! - [`autodiff`]: a small dense reverse-mode differentiation tape plus Adam
//! - [`encoder`]: attention-weighted continuous-filter convolutions, gated fusion with
//!   physical priors, state probabilities
//! - [`vamp`]: VAMP-2 / VAMP-E scores, reversible Koopman construction, CK test,
//!   implied timescales, free-energy surfaces, residue contributions
//! - [`trainer`]: two-stage optimisation and checkpoints
//! - [`synth`]: synthetic metastable trajectories with exact kinetic ground truth

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod physchem;
pub mod synth;
pub mod trainer;
pub mod trajectory;
pub mod vamp;

pub use error::{Error, Result};
