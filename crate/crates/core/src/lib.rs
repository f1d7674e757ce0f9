//! Desk-scale preference-alignment lab: DPO, reference-free, and
//! clipped-reference hybrid objectives on exactly solvable toy policies,
//! with synthetic preference worlds, a deterministic trainer, inference-
//! aligned metrics, and plain-data exports of the diagnostic surfaces.
//!
//! Batch evaluation is data-parallel via rayon when the `parallel` feature
//! (default) is enabled; all reductions are ordered, so results are
//! bit-identical with and without it.

pub mod datagen;
pub mod error;
pub mod exec;
pub mod export;
pub mod math;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
pub use math::{HyperParams, MarginPair};
pub use objectives::{LossEval, ObjectiveKind};
pub use policy::{ParametricPolicy, TabularPolicy};
