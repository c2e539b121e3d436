use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which hidden state is added to the thinking output before the decoding
/// layers: raw token embeddings, or the output of the encoding layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseVariant {
    #[default]
    Embedding,
    Encoding,
}

/// Cycle length, base variant and the position at which the mask is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub tau: usize,
    pub variant: BaseVariant,
    pub anchor: usize,
}

impl CyclePlan {
    pub fn new(tau: usize, variant: BaseVariant) -> Result<Self> {
        Self::anchored(tau, variant, 0)
    }

    pub fn anchored(tau: usize, variant: BaseVariant, anchor: usize) -> Result<Self> {
        let plan = CyclePlan { tau, variant, anchor };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::config("cycle length must be at least 1"));
        }
        if self.anchor >= self.tau {
            return Err(Error::config(format!(
                "mask anchor {} must be below the cycle length {}",
                self.anchor, self.tau
            )));
        }
        Ok(())
    }

    /// Offset of `position` within its cycle; 0 marks a cycle start.
    pub fn offset(&self, position: usize) -> usize {
        (position + self.tau - self.anchor) % self.tau
    }

    pub fn is_cycle_start(&self, position: usize) -> bool {
        self.offset(position) == 0
    }

    /// Plan whose cycle starts at `position`.
    pub fn aligned_to(&self, position: usize) -> Self {
        CyclePlan {
            anchor: position % self.tau,
            ..*self
        }
    }
}

/// Binary cycle mask over positions `0..n`: bit `i` is set iff
/// `(i − anchor) mod tau == 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleMask {
    pub bits: Vec<bool>,
}

impl CycleMask {
    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|b| *b as u8).collect()
    }
}

pub fn build_cycle_mask(n: usize, tau: usize, anchor: usize) -> Result<CycleMask> {
    if n == 0 {
        return Err(Error::config("mask length must be at least 1"));
    }
    let plan = CyclePlan::anchored(tau, BaseVariant::Embedding, anchor)?;
    Ok(CycleMask {
        bits: (0..n).map(|p| plan.is_cycle_start(p)).collect(),
    })
}
