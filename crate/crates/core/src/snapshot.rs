//! Text snapshots of a filter belief, for debugging and regression files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadcost::{GaussianBelief, VariableKey, VariableLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotBlock {
    pub key: VariableKey,
    pub label: String,
    pub offset: usize,
    pub dim: usize,
}

/// A belief in canonical full-state order. Covariance rows are stored
/// row-major, one array per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub time: u32,
    pub dim: usize,
    pub blocks: Vec<SnapshotBlock>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl BeliefSnapshot {
    pub fn new(belief: &GaussianBelief, time: u32) -> Self {
        let belief = belief.to_canonical();
        let d = belief.dim();
        let blocks = belief
            .layout()
            .blocks()
            .iter()
            .map(|b| SnapshotBlock { key: b.key, label: b.key.to_string(), offset: b.offset, dim: b.dim })
            .collect();
        let cov = belief.covariance();
        Self {
            time,
            dim: d,
            blocks,
            mean: belief.mean().iter().copied().collect(),
            covariance: (0..d).map(|i| cov.row(i).iter().copied().collect()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::State(format!("snapshot serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::State(format!("snapshot parse failed: {e}")))
    }

    /// Rebuild the belief; checks shapes and finiteness.
    pub fn to_belief(&self) -> Result<GaussianBelief> {
        let layout = VariableLayout::from_blocks(self.blocks.iter().map(|b| (b.key, b.dim)))?;
        if self.covariance.len() != self.dim || self.covariance.iter().any(|r| r.len() != self.dim) {
            return Err(Error::layout("snapshot covariance is not square"));
        }
        let cov = nalgebra::DMatrix::from_fn(self.dim, self.dim, |i, j| self.covariance[i][j]);
        GaussianBelief::new(layout, nalgebra::DVector::from_column_slice(&self.mean), cov)
    }
}
