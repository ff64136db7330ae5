//! Hierarchical relationship prediction for scene graphs.
//!
//! The crate bundles everything needed to train and evaluate a
//! super-category / conditional relationship head at desk scale:
//!
//! * [`hierarchy`]: label vocabularies and the predicate partition
//! * [`autodiff`]: a small reverse-mode tape over `f64` tensors
//! * [`assembly`]: direction-aware edge features from masked feature grids
//! * [`head`]: the factorized head and the flat baseline
//! * [`losses`]: cross-entropy, contrastive and connectivity objectives
//! * [`eval`]: three-candidates-per-edge ranking and R@k / mR@k / zsR@k
//! * [`data`]: manifests, annotation parsing, synthetic data, tensor containers
//! * [`train`]: mini-batch SGD with a step schedule
//! * [`pipeline`]: checkpoint and external-prediction evaluation
//! * [`gradcheck`]: finite-difference check of the full training loss

pub mod assembly;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use hierarchy::{LabelSpace, ObjectCategoryId, PredicateId, SuperCategoryId};
