//! Data side of the grounding pipeline.
//!
//! * [`eval`]: score thresholding, NMS and detection-style mAP.
//! * [`synthetic`]: motif corpora on a skeleton graph with frame labels.
//! * [`annotation`]: overlap merging, one-to-many consolidation and corpus
//!   statistics for annotation files.

pub mod annotation;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod synthetic;

pub use error::{DataError, Result};
pub use eval::{ScoredSegment, Segment};
