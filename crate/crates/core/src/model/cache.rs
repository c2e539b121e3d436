use std::collections::BTreeMap;

use serde::Serialize;

use super::{LayerPartition, ModelConfig, Stage};
use crate::error::{Error, Result, SlotState};
use crate::tensor::{Prefix, Real};

/// Per-layer key/value storage with explicit slot occupancy.
///
/// Keys are stored after rotary encoding. Reads of anything other than a
/// `Filled` slot fail with [`Error::CacheIntegrity`].
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    d_model: usize,
    max_seq_len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    occupancy: Vec<Vec<SlotState>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OccupancySummary {
    pub filled: usize,
    pub pending_refill: usize,
    pub empty: usize,
    /// Per stage: (filled, pending_refill) counts.
    pub by_stage: BTreeMap<Stage, (usize, usize)>,
}

impl<T: Real> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        let (l, n, d) = (config.n_layers, config.max_seq_len, config.d_model);
        KvCache {
            d_model: d,
            max_seq_len: n,
            keys: vec![vec![T::zero(); n * d]; l],
            values: vec![vec![T::zero(); n * d]; l],
            occupancy: vec![vec![SlotState::Empty; n]; l],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.occupancy.len()
    }

    pub fn capacity(&self) -> usize {
        self.max_seq_len
    }

    pub fn state(&self, layer: usize, position: usize) -> SlotState {
        self.occupancy[layer][position]
    }

    /// One past the highest position with any non-empty slot.
    pub fn len(&self) -> usize {
        self.occupancy
            .iter()
            .filter_map(|row| row.iter().rposition(|s| *s != SlotState::Empty))
            .max()
            .map_or(0, |p| p + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_slot(&self, layer: usize, position: usize) -> Result<()> {
        if layer >= self.n_layers() {
            return Err(Error::Index {
                what: "cache layer",
                index: layer,
                limit: self.n_layers(),
            });
        }
        if position >= self.max_seq_len {
            return Err(Error::Index {
                what: "cache position",
                index: position,
                limit: self.max_seq_len,
            });
        }
        Ok(())
    }

    pub fn write(&mut self, layer: usize, position: usize, key: &[T], value: &[T]) -> Result<()> {
        self.check_slot(layer, position)?;
        let d = self.d_model;
        if key.len() != d || value.len() != d {
            return Err(Error::dim("cache rows must be d_model wide"));
        }
        self.keys[layer][position * d..(position + 1) * d].copy_from_slice(key);
        self.values[layer][position * d..(position + 1) * d].copy_from_slice(value);
        self.occupancy[layer][position] = SlotState::Filled;
        Ok(())
    }

    /// Marks a slot whose entry was skipped and must be recomputed later.
    pub fn mark_pending(&mut self, layer: usize, position: usize) -> Result<()> {
        self.check_slot(layer, position)?;
        if self.occupancy[layer][position] == SlotState::Filled {
            return Err(Error::contract(format!(
                "slot (layer {layer}, position {position}) is already filled"
            )));
        }
        self.occupancy[layer][position] = SlotState::PendingRefill;
        Ok(())
    }

    fn require_filled(&self, layer: usize, position: usize) -> Result<()> {
        self.check_slot(layer, position)?;
        match self.occupancy[layer][position] {
            SlotState::Filled => Ok(()),
            state => Err(Error::CacheIntegrity {
                layer,
                position,
                state,
            }),
        }
    }

    pub fn key(&self, layer: usize, position: usize) -> Result<&[T]> {
        self.require_filled(layer, position)?;
        let d = self.d_model;
        Ok(&self.keys[layer][position * d..(position + 1) * d])
    }

    pub fn value(&self, layer: usize, position: usize) -> Result<&[T]> {
        self.require_filled(layer, position)?;
        let d = self.d_model;
        Ok(&self.values[layer][position * d..(position + 1) * d])
    }

    /// Gathers the cached entries at `positions` for one layer.
    pub(crate) fn prefix(&self, layer: usize, positions: Vec<usize>) -> Result<Prefix<T>> {
        let mut keys = Vec::with_capacity(positions.len() * self.d_model);
        let mut values = Vec::with_capacity(positions.len() * self.d_model);
        for &p in &positions {
            keys.extend_from_slice(self.key(layer, p)?);
            values.extend_from_slice(self.value(layer, p)?);
        }
        Ok(Prefix {
            keys,
            values,
            positions,
        })
    }

    pub fn summary(&self, partition: &LayerPartition) -> OccupancySummary {
        let mut s = OccupancySummary::default();
        let used = self.len();
        for (layer, row) in self.occupancy.iter().enumerate() {
            let stage = partition.stage_of(layer).expect("layer inside partition");
            let entry = s.by_stage.entry(stage).or_default();
            for state in &row[..used] {
                match state {
                    SlotState::Filled => {
                        s.filled += 1;
                        entry.0 += 1;
                    }
                    SlotState::PendingRefill => {
                        s.pending_refill += 1;
                        entry.1 += 1;
                    }
                    SlotState::Empty => s.empty += 1,
                }
            }
        }
        s
    }
}
