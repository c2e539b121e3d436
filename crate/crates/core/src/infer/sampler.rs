use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SampleMode::Greedy,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn temperature(temperature: f64, seed: u64) -> Self {
        SamplerConfig {
            mode: SampleMode::Temperature,
            temperature,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SampleMode::Temperature && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "sampling temperature must be positive, got {}",
                self.temperature
            )));
        }
        crate::error::check_seed("sampler.seed", self.seed)
    }
}

/// Token sampler with its own seeded stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sampler {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn sample<T: Real>(&mut self, logits: &[T]) -> Result<usize> {
        if logits.is_empty() {
            return Err(Error::dim("cannot sample from an empty logit row"));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit at id {i}")));
        }
        match self.config.mode {
            SampleMode::Greedy => Ok(argmax(logits)),
            SampleMode::Temperature => {
                let t = self.config.temperature;
                let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|x| ((x.as_f64() - max) / t).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(e.to_string()))?;
                Ok(dist.sample(&mut self.rng))
            }
        }
    }
}

/// Samples one token with a fresh sampler.
pub fn sample<T: Real>(logits: &[T], config: &SamplerConfig) -> Result<usize> {
    Sampler::new(*config)?.sample(logits)
}
