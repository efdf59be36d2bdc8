use serde::{Deserialize, Serialize};

use crate::interactions::{InteractionLog, SequenceIndex};

/// One training record with both histories strictly before its timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub click: bool,
    /// Items the user clicked before `timestamp`, most recent last.
    pub h_u: Vec<usize>,
    /// Users who clicked the item before `timestamp`, most recent last.
    pub h_i: Vec<usize>,
}

/// Training records plus the sequence corpora used by the sequence losses.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub samples: Vec<Sample>,
    pub index: SequenceIndex,
    /// Per-user item sequences cut into windows of at most `max_len`.
    pub item_sequences: Vec<Vec<usize>>,
    /// Per-item user sequences cut into windows of at most `max_len`.
    pub user_sequences: Vec<Vec<usize>>,
    pub user_count: usize,
    pub item_count: usize,
}

impl TrainingData {
    pub fn from_log(log: &InteractionLog, max_len: usize) -> Self {
        let index = SequenceIndex::build(log);
        let samples = log
            .records()
            .iter()
            .map(|r| Sample {
                user: r.user,
                item: r.item,
                timestamp: r.timestamp,
                click: r.click,
                h_u: index.item_view_sequence(r.user, r.timestamp, max_len),
                h_i: index.user_view_sequence(r.item, r.timestamp, max_len),
            })
            .collect();
        Self {
            samples,
            item_sequences: index.item_view_windows(max_len),
            user_sequences: index.user_view_windows(max_len),
            index,
            user_count: log.user_count(),
            item_count: log.item_count(),
        }
    }
}
