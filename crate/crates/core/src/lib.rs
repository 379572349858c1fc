//! Grid-based Bayesian source localization for MEG/EEG current dipoles.
//!
//! The engine discretizes a region of interest into voxels, treats the
//! time-varying dipole location as a hidden state on that grid, and computes
//! the discrete posterior of the source location from the full measurement
//! record with a scaled forward-backward smoother. Model parameters are
//! estimated by EM with closed-form updates. A switch procedure handles
//! multiple sources without enumerating the joint state space, and a dynamic
//! procedure alternates ROI shrinkage with mesh refinement.

pub mod dynamic;
pub mod em;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod hmm;
mod linalg;
pub mod multisource;
pub mod statespace;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
