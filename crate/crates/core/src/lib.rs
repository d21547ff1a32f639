//! Desk-scale testbed for synthetic-to-real feature mapping in 3D pose
//! regression.
//!
//! The pipeline renders a textured box under sampled poses, corrupts a copy of
//! the renders to simulate a "real" capture domain, and trains three networks
//! jointly: a convolutional feature extractor, a residual feature mapper that
//! transports real-image features into the synthetic feature space, and a
//! linear pose head regressing the 2D reprojections of the box corners (or
//! its 3D corner locations directly). Poses are recovered from predicted
//! corner reprojections with a DLT + Levenberg-Marquardt PnP solver.
//!
//! Everything is deterministic given a master seed, double precision, and
//! CPU-only.

pub mod autodiff;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod scene;
pub mod seeds;
pub mod training;
