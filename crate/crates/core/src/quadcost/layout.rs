use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ego and object poses are (x, y, θ).
pub const POSE_DIM: usize = 3;
/// Feature positions are planar points.
pub const FEATURE_DIM: usize = 2;

/// Which copy of a moving-object feature a key refers to: the position in
/// the object's reference configuration (first sighting) or at the current
/// frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Epoch {
    Reference,
    Current,
}

/// Semantic identity of one state block.
///
/// The derived ordering is the canonical full-state order: ego pose, static
/// features, object features (reference clouds, then current clouds, each
/// grouped by object), object poses (by time, then object). `NextEgoPose`
/// only exists transiently during state propagation and `Generic` is for
/// ad-hoc problems that are not SLAM states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKey {
    EgoPose,
    StaticFeature(usize),
    ObjectFeature { epoch: Epoch, object: usize, feature: usize },
    ObjectPose { time: u32, object: usize },
    NextEgoPose,
    Generic(usize),
}

impl VariableKey {
    /// Block dimension implied by the key, `None` for `Generic`.
    pub fn natural_dim(&self) -> Option<usize> {
        match self {
            VariableKey::EgoPose | VariableKey::NextEgoPose | VariableKey::ObjectPose { .. } => {
                Some(POSE_DIM)
            }
            VariableKey::StaticFeature(_) | VariableKey::ObjectFeature { .. } => Some(FEATURE_DIM),
            VariableKey::Generic(_) => None,
        }
    }

    /// Whether the third component of the block is a heading.
    pub fn is_pose(&self) -> bool {
        matches!(
            self,
            VariableKey::EgoPose | VariableKey::NextEgoPose | VariableKey::ObjectPose { .. }
        )
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariableKey::EgoPose => write!(f, "ego"),
            VariableKey::StaticFeature(k) => write!(f, "static[{k}]"),
            VariableKey::ObjectFeature { epoch: Epoch::Reference, object, feature } => {
                write!(f, "object[{object}].ref[{feature}]")
            }
            VariableKey::ObjectFeature { epoch: Epoch::Current, object, feature } => {
                write!(f, "object[{object}].cur[{feature}]")
            }
            VariableKey::ObjectPose { time, object } => write!(f, "object[{object}].pose@{time}"),
            VariableKey::NextEgoPose => write!(f, "ego_next"),
            VariableKey::Generic(i) => write!(f, "var[{i}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub key: VariableKey,
    pub offset: usize,
    pub dim: usize,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.dim
    }
}

/// Ordered, contiguous assignment of variable blocks to a flat state vector.
#[derive(Debug, Clone, Default)]
pub struct VariableLayout {
    blocks: Vec<Block>,
    index: BTreeMap<VariableKey, usize>,
    total: usize,
}

impl PartialEq for VariableLayout {
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks
    }
}

impl VariableLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_blocks<I>(blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = (VariableKey, usize)>,
    {
        let mut layout = Self::new();
        for (key, dim) in blocks {
            layout.push(key, dim)?;
        }
        Ok(layout)
    }

    /// Layout of SLAM keys at their natural dimensions.
    pub fn from_keys<I>(keys: I) -> Result<Self>
    where
        I: IntoIterator<Item = VariableKey>,
    {
        let mut layout = Self::new();
        for key in keys {
            let dim = key
                .natural_dim()
                .ok_or_else(|| Error::layout(format!("{key} has no natural dimension")))?;
            layout.push(key, dim)?;
        }
        Ok(layout)
    }

    pub fn push(&mut self, key: VariableKey, dim: usize) -> Result<()> {
        if self.index.contains_key(&key) {
            return Err(Error::layout(format!("duplicate key {key}")));
        }
        if dim == 0 {
            return Err(Error::layout(format!("{key} has zero dimension")));
        }
        if let Some(natural) = key.natural_dim() {
            if natural != dim {
                return Err(Error::layout(format!(
                    "{key} must have dimension {natural}, got {dim}"
                )));
            }
        }
        self.index.insert(key, self.blocks.len());
        self.blocks.push(Block { key, offset: self.total, dim });
        self.total += dim;
        Ok(())
    }

    /// Total dimension of the flat state.
    pub fn dim(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn keys(&self) -> impl Iterator<Item = VariableKey> + '_ {
        self.blocks.iter().map(|b| b.key)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn block(&self, key: &VariableKey) -> Option<&Block> {
        self.index.get(key).map(|&i| &self.blocks[i])
    }

    pub fn range(&self, key: &VariableKey) -> Option<Range<usize>> {
        self.block(key).map(Block::range)
    }

    pub fn require(&self, key: &VariableKey) -> Result<Range<usize>> {
        self.range(key).ok_or(Error::UnknownKey(*key))
    }

    /// Flat indices covered by `keys`, in the order given.
    pub fn indices_of(&self, keys: &[VariableKey]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for key in keys {
            out.extend(self.require(key)?);
        }
        Ok(out)
    }

    /// The same blocks sorted into canonical full-state order.
    pub fn canonical(&self) -> VariableLayout {
        let mut pairs: Vec<_> = self.blocks.iter().map(|b| (b.key, b.dim)).collect();
        pairs.sort_by_key(|(k, _)| *k);
        Self::from_blocks(pairs).expect("keys of a valid layout stay unique")
    }

    pub fn is_canonical(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0].key < w[1].key)
    }

    /// Copy of the layout without `removed` (missing keys are ignored).
    pub fn without(&self, removed: &[VariableKey]) -> VariableLayout {
        let pairs = self
            .blocks
            .iter()
            .filter(|b| !removed.contains(&b.key))
            .map(|b| (b.key, b.dim));
        Self::from_blocks(pairs).expect("subset of a valid layout")
    }

    /// True when both layouts hold the same blocks with the same dimensions.
    pub fn is_permutation_of(&self, other: &VariableLayout) -> bool {
        self.len() == other.len()
            && self.blocks.iter().all(|b| other.block(&b.key).map(|o| o.dim) == Some(b.dim))
    }

    /// For each flat index of `self`, the flat index of the same scalar in `source`.
    pub fn gather_from(&self, source: &VariableLayout) -> Result<Vec<usize>> {
        if !self.is_permutation_of(source) {
            return Err(Error::layout("target layout is not a permutation of the source"));
        }
        let mut idx = Vec::with_capacity(self.total);
        for b in &self.blocks {
            idx.extend(source.require(&b.key)?);
        }
        Ok(idx)
    }

    /// Blocks whose key satisfies `pred`, in layout order.
    pub fn select(&self, pred: impl Fn(&VariableKey) -> bool) -> Vec<VariableKey> {
        self.keys().filter(|k| pred(k)).collect()
    }

    pub fn static_features(&self) -> Vec<usize> {
        self.keys()
            .filter_map(|k| match k {
                VariableKey::StaticFeature(id) => Some(id),
                _ => None,
            })
            .collect()
    }

    /// Objects with at least one reference-cloud feature, ascending.
    pub fn objects(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .keys()
            .filter_map(|k| match k {
                VariableKey::ObjectFeature { epoch: Epoch::Reference, object, .. } => Some(object),
                _ => None,
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Feature ids of one object's cloud at `epoch`, ascending.
    pub fn object_features(&self, object: usize, epoch: Epoch) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .keys()
            .filter_map(|k| match k {
                VariableKey::ObjectFeature { epoch: e, object: o, feature } if e == epoch && o == object => {
                    Some(feature)
                }
                _ => None,
            })
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Times at which `object` has a pose block, ascending.
    pub fn object_pose_times(&self, object: usize) -> Vec<u32> {
        let mut times: Vec<u32> = self
            .keys()
            .filter_map(|k| match k {
                VariableKey::ObjectPose { time, object: o } if o == object => Some(time),
                _ => None,
            })
            .collect();
        times.sort_unstable();
        times
    }
}
