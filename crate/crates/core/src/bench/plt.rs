use num_rational::Ratio;
use serde::{Serialize, Serializer};

use super::InvocationTrace;
use crate::error::{Error, Result};
use crate::model::LayerPartition;
use crate::train::{BaseVariant, CyclePlan};

/// Layers a light pass runs: the decoding layers, plus the encoding layers
/// when the base comes from them.
pub fn reuse_layers(partition: &LayerPartition, variant: BaseVariant) -> usize {
    match variant {
        BaseVariant::Embedding => partition.decoding.len(),
        BaseVariant::Encoding => partition.encoding.len() + partition.decoding.len(),
    }
}

/// Percentage of layers per token: `(L + (tau − 1)·L_d) / (tau·L)`.
///
/// `l_reuse` is the number of layers a light pass runs.
pub fn plt_theoretical(l: u64, l_reuse: u64, tau: u64) -> Result<Ratio<u64>> {
    if l == 0 || l_reuse == 0 || l_reuse > l {
        return Err(Error::config(format!("need 1 <= L_d <= L, got L={l}, L_d={l_reuse}")));
    }
    if tau == 0 {
        return Err(Error::config("cycle length must be at least 1"));
    }
    Ok(Ratio::new(l + (tau - 1) * l_reuse, tau * l))
}

fn ratio_str<S: Serializer>(r: &Ratio<u64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PltReport {
    pub l: usize,
    pub l_e: usize,
    pub l_t: usize,
    pub l_d: usize,
    pub tau: usize,
    pub variant: BaseVariant,
    pub generated_tokens: usize,
    #[serde(serialize_with = "ratio_str")]
    pub theoretical_plt: Ratio<u64>,
    #[serde(serialize_with = "ratio_str")]
    pub measured_plt: Ratio<u64>,
    /// Measured and theoretical agree; only claimed for whole cycles.
    pub matches: bool,
}

impl PltReport {
    pub fn theoretical_f64(&self) -> f64 {
        ratio_f64(&self.theoretical_plt)
    }

    pub fn measured_f64(&self) -> f64 {
        ratio_f64(&self.measured_plt)
    }
}

pub fn ratio_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Layer invocations per generated token relative to `L`, from a trace in
/// which the prefill pass stands in for the first cycle's full pass.
pub fn measure_plt(
    trace: &InvocationTrace,
    partition: &LayerPartition,
    plan: &CyclePlan,
    generated_tokens: usize,
) -> Result<PltReport> {
    if trace.is_empty() {
        return Err(Error::config("cannot measure PLT from an empty trace"));
    }
    if generated_tokens == 0 {
        return Err(Error::config("cannot measure PLT over zero generated tokens"));
    }
    let l = partition.total() as u64;
    let used = trace.layer_invocations(partition);
    let measured = Ratio::new(used, generated_tokens as u64 * l);
    let theoretical = plt_theoretical(l, reuse_layers(partition, plan.variant) as u64, plan.tau as u64)?;
    Ok(PltReport {
        l: partition.total(),
        l_e: partition.encoding.len(),
        l_t: partition.thinking.len(),
        l_d: partition.decoding.len(),
        tau: plan.tau,
        variant: plan.variant,
        generated_tokens,
        theoretical_plt: theoretical,
        measured_plt: measured,
        matches: generated_tokens % plan.tau == 0 && measured == theoretical,
    })
}
