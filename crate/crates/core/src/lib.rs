//! 3D object detection on point clouds with object-object relation graph
//! refinement, built on a self-contained reverse-mode autodiff engine.
//!
//! The pipeline: a set-abstraction / feature-propagation point backbone
//! produces per-seed features, pseudo object centers, and unit direction
//! vectors; pseudo centers are clustered into proposals; each proposal is
//! decoded into an oriented box; a point attention pooling stage condenses
//! every proposal into a fixed-size appearance feature; a bank of relation
//! graphs exchanges information between proposals and the fused features are
//! re-decoded into refined boxes; class-wise NMS and an average-precision
//! evaluator close the loop.
//!
//! Everything is f64 and deterministic given a seed: RNG streams are derived
//! by hashing `(seed, label)` so that checkpoint resume never has to
//! serialize generator state.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod proposal;
pub mod relation;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
