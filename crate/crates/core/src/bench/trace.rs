use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerPartition, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    /// Whole context through every layer; emits the first token.
    Prefill,
    /// Decoding layers only (plus encoding layers in the encoding-base variant).
    Light,
    /// Cycle start: refills skipped upper-layer entries and runs full depth
    /// for the newest token.
    Boundary,
    /// Refill of pending entries with no token emitted.
    RefillOnly,
}

/// One partition range invoked by one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub pass: usize,
    pub kind: PassKind,
    pub stage: Stage,
    pub positions: Vec<usize>,
}

/// Ordered log of (pass, stage, positions) invocations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationTrace {
    pub entries: Vec<TraceEntry>,
}

impl InvocationTrace {
    pub fn record(&mut self, pass: usize, kind: PassKind, stage: Stage, positions: Vec<usize>) -> Result<()> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("trace positions must be strictly increasing"));
        }
        if let Some(last) = self.entries.last() {
            if pass < last.pass || (pass == last.pass && stage <= last.stage) {
                return Err(Error::contract("trace entries must advance in pass order"));
            }
        }
        self.entries.push(TraceEntry {
            pass,
            kind,
            stage,
            positions,
        });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pass_count(&self) -> usize {
        let mut passes: Vec<usize> = self.entries.iter().map(|e| e.pass).collect();
        passes.dedup();
        passes.len()
    }

    /// Number of passes that invoked `stage`.
    pub fn stage_invocations(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }

    /// Layer invocations: one per (pass, layer), however many tokens the
    /// pass carries.
    pub fn layer_invocations(&self, partition: &LayerPartition) -> u64 {
        self.entries
            .iter()
            .map(|e| partition.range(e.stage).len() as u64)
            .sum()
    }

    /// Kind of each pass in order.
    pub fn schedule(&self) -> Vec<PassKind> {
        let mut out: Vec<(usize, PassKind)> = Vec::new();
        for e in &self.entries {
            if out.last().map(|l| l.0) != Some(e.pass) {
                out.push((e.pass, e.kind));
            }
        }
        out.into_iter().map(|(_, k)| k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_rejects_disorder() {
        let mut t = InvocationTrace::default();
        t.record(0, PassKind::Prefill, Stage::Thinking, vec![0, 1]).unwrap();
        assert!(t.record(0, PassKind::Prefill, Stage::Encoding, vec![0]).is_err());
        assert!(t.record(1, PassKind::Light, Stage::Decoding, vec![3, 2]).is_err());
        t.record(1, PassKind::Light, Stage::Decoding, vec![2]).unwrap();
        assert_eq!(t.schedule(), vec![PassKind::Prefill, PassKind::Light]);
    }
}
