//! Learned monocular reconstruction of deformable objects from 2D keypoints.
//!
//! A factorization network maps a single view of 2D keypoints (with
//! visibility flags) to shape coefficients and a camera rotation, which,
//! combined with a learned low-rank shape basis, reconstruct the object in
//! 3D. A second canonicalization network is trained alongside it so that
//! viewpoint and deformation are factored consistently.
//!
//! The crate also carries everything needed to exercise the method without
//! external data: a reverse-mode differentiation core, synthetic benchmark
//! generation, classical factorization solvers used as oracles, and the
//! evaluation protocol (MPJPE and stress with depth ambiguity handling).

pub mod autodiff;
pub mod classical;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod networks;
pub mod rng;
pub mod shapemodel;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
