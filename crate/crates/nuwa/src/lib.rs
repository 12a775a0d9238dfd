//! Derives small task-specific vision transformers from a trained base
//! model via structured pruning, with recovery fine-tuning.
//!
//! The pipeline has two stages. The one-shot stage prunes depth (guided by
//! early-exit probes), slices the classifier down to the target class
//! subset, and removes low-importance attention heads. The adaptive stage
//! then iteratively shrinks the query-key, value, expansion, and embedding
//! sizes under decaying retention thresholds until the requested parameter
//! or FLOPs reduction is met, followed by a short fine-tuning pass.

pub mod adaptive;
pub mod budget;
pub mod data;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod oneshot;
pub(crate) mod ranking;
pub mod score;
pub mod train;

pub use error::{NuwaError, Result};
