//! Interaction logs, the dual sequence views and the temporal splits.

mod index;
mod log;
mod split;

pub use index::SequenceIndex;
pub use log::{load_log, IdMap, Interaction, InteractionLog};
pub use split::{temporal_debiased_split, write_split, Split, SplitMetadata, SplitSpec};

/// Default truncation length for both sequence views.
pub const DEFAULT_MAX_LEN: usize = 50;
