use serde::{Deserialize, Serialize};

use crate::reducer::LevTable;

/// Surrogate labels produced by one metaEpoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    /// 0 for the initial metaEpoch, otherwise the leaf-run number.
    pub leaf: usize,
    /// Depth inside the leaf-run; the initial metaEpoch has depth 0.
    pub meta_epoch: usize,
    pub stage: String,
    pub labels: LevTable,
}

impl LabelRecord {
    pub fn active_latent_count(&self) -> usize {
        self.labels.num_columns()
    }
}

/// Append-only collection of every labelled stage of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateLabelStore {
    records: Vec<LabelRecord>,
}

impl SurrogateLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LabelRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_columns(&self) -> usize {
        self.records.iter().map(LabelRecord::active_latent_count).sum()
    }

    /// Distinct global sample indices carrying at least one label.
    pub fn labeled_samples(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .records
            .iter()
            .flat_map(|r| r.labels.sample_indices.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}
