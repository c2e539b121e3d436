//! Cycle-based generation with cyclical refilling.
//!
//! Each cycle of `tau` generated tokens costs one full-depth pass and
//! `tau - 1` light passes through the decoding layers. Light-pass tokens
//! leave their encoding/thinking KV slots `PendingRefill`; the next full
//! pass runs them through those layers together with the newest token,
//! which alone continues through the decoding layers.

mod sampler;

use serde::{Deserialize, Serialize};

pub use sampler::{sample, SampleMode, Sampler, SamplerConfig};

use crate::bench::{InvocationTrace, PassKind};
use crate::error::{Error, Result};
use crate::model::{KvCache, Model, OccupancySummary, Stage};
use crate::tensor::{Real, Tensor};
use crate::train::{BaseVariant, CyclePlan};

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// How the context is routed to the decoding layers during prefill.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Training mask with the last context position as a cycle start.
    #[default]
    Cyclic,
    /// Every context position takes the full path.
    FullPath,
}

/// Generation state of one stream.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    cache: KvCache<T>,
    plan: CyclePlan,
    next_position: usize,
    next_token: usize,
    pending: Vec<(usize, usize)>,
    stored_base: Vec<Vec<T>>,
    sampler: Sampler,
    trace: InvocationTrace,
    passes: usize,
    last_logits: Vec<T>,
}

fn add_rows<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

fn last_row<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let n = t.shape()[0];
    t.row(n - 1).to_vec()
}

fn row_tensor<T: Real>(row: Vec<T>) -> Result<Tensor<T>> {
    let d = row.len();
    Tensor::new(vec![1, d], row)
}

impl<T: Real> DecodeState<T> {
    /// Runs the whole context through every layer and samples the first
    /// generated token. The cycle is anchored so the last context position
    /// is a cycle start.
    pub fn prefill(
        model: &Model<T>,
        context: &[usize],
        plan: &CyclePlan,
        sampler: SamplerConfig,
        mode: PrefillMode,
    ) -> Result<(Self, usize)> {
        let config = model.config();
        plan.check_model(config)?;
        let c = context.len();
        if c == 0 {
            return Err(Error::config("context must hold at least one token"));
        }
        if c > config.max_seq_len {
            return Err(Error::config(format!(
                "context of {c} tokens exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        let plan = plan.aligned_to(c - 1);
        let mut sampler = Sampler::new(sampler)?;
        let part = model.partition();
        let mut cache = KvCache::new(config);
        let positions: Vec<usize> = (0..c).collect();

        let emb = model.embed(context)?;
        let enc = model.forward_range(&emb, part.encoding.clone(), &positions, &mut cache, true)?;
        let think = model.forward_range(&enc, part.thinking.clone(), &positions, &mut cache, true)?;
        let base = match plan.variant {
            BaseVariant::Embedding => &emb,
            BaseVariant::Encoding => &enc,
        };
        let d = config.d_model;
        let mut dec_in = base.data().to_vec();
        for (p, row) in dec_in.chunks_mut(d).enumerate() {
            if mode == PrefillMode::FullPath || plan.is_cycle_start(p) {
                for (x, t) in row.iter_mut().zip(think.row(p)) {
                    *x += *t;
                }
            }
        }
        let dec_in = Tensor::new(vec![c, d], dec_in)?;
        let out = model.forward_range(&dec_in, part.decoding.clone(), &positions, &mut cache, true)?;
        let logits = model.lm_head(&row_tensor(last_row(&out))?)?;
        let last_logits = logits.data().to_vec();
        let token = sampler.sample(&last_logits)?;

        let mut trace = InvocationTrace::default();
        for stage in Stage::ALL {
            if !part.range(stage).is_empty() {
                trace.record(0, PassKind::Prefill, stage, positions.clone())?;
            }
        }
        let state = DecodeState {
            cache,
            plan,
            next_position: c,
            next_token: token,
            pending: Vec::new(),
            stored_base: Vec::new(),
            sampler,
            trace,
            passes: 1,
            last_logits,
        };
        Ok((state, token))
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Plan anchored to this stream's cycles.
    pub fn plan(&self) -> &CyclePlan {
        &self.plan
    }

    /// Position the next fed token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Most recently sampled token, not yet fed back.
    pub fn next_token(&self) -> usize {
        self.next_token
    }

    /// Offset of [`Self::next_position`] within its cycle: 0 means the next
    /// pass is a cycle boundary.
    pub fn cycle_phase(&self) -> usize {
        self.plan.offset(self.next_position)
    }

    /// Light-pass tokens awaiting refill, as (position, token).
    pub fn pending(&self) -> &[(usize, usize)] {
        &self.pending
    }

    pub fn trace(&self) -> &InvocationTrace {
        &self.trace
    }

    pub fn last_logits(&self) -> &[T] {
        &self.last_logits
    }

    fn expected_pending(&self) -> usize {
        let tau = self.plan.tau;
        (self.cycle_phase() + tau - 1) % tau
    }

    fn check_capacity(&self, model: &Model<T>) -> Result<()> {
        let limit = model.config().max_seq_len;
        if self.next_position >= limit {
            return Err(Error::Index {
                what: "position",
                index: self.next_position,
                limit,
            });
        }
        Ok(())
    }

    /// Layers whose KV a light pass leaves for the next refill.
    fn deferred_layers(&self, model: &Model<T>) -> std::ops::Range<usize> {
        let part = model.partition();
        match self.plan.variant {
            BaseVariant::Embedding => part.encoding.start..part.thinking.end,
            BaseVariant::Encoding => part.thinking.clone(),
        }
    }

    /// Feeds `token` through the decoding layers only (and the encoding
    /// layers in the encoding-base variant). Returns its logits.
    pub fn light_pass(&mut self, model: &Model<T>, token: usize) -> Result<Vec<T>> {
        let phase = self.cycle_phase();
        if phase == 0 {
            return Err(Error::contract(format!(
                "light pass at position {} which starts a cycle",
                self.next_position
            )));
        }
        if self.pending.len() != self.expected_pending() {
            return Err(Error::contract("pending refill list out of step with the cycle"));
        }
        self.check_capacity(model)?;
        let part = model.partition();
        let p = self.next_position;
        let pass = self.passes;
        let emb = model.embed(&[token])?;
        let base = match self.plan.variant {
            BaseVariant::Embedding => emb,
            BaseVariant::Encoding => {
                let enc = model.forward_range(&emb, part.encoding.clone(), &[p], &mut self.cache, true)?;
                self.trace.record(pass, PassKind::Light, Stage::Encoding, vec![p])?;
                enc
            }
        };
        let out = model.forward_range(&base, part.decoding.clone(), &[p], &mut self.cache, true)?;
        self.trace.record(pass, PassKind::Light, Stage::Decoding, vec![p])?;
        for layer in self.deferred_layers(model) {
            self.cache.mark_pending(layer, p)?;
        }
        self.pending.push((p, token));
        self.stored_base.push(base.data().to_vec());
        self.next_position += 1;
        self.passes += 1;
        let logits = model.lm_head(&out)?;
        self.last_logits = logits.data().to_vec();
        Ok(self.last_logits.clone())
    }

    fn check_refill_batch(&self) -> Result<()> {
        let k = self.pending.len();
        for (i, (pos, _)) in self.pending.iter().enumerate() {
            if *pos + k != self.next_position + i {
                return Err(Error::contract(format!(
                    "refill batch out of order: {:?} before position {}",
                    self.pending.iter().map(|e| e.0).collect::<Vec<_>>(),
                    self.next_position
                )));
            }
        }
        Ok(())
    }

    /// Runs the pending tokens plus `token` through the encoding and
    /// thinking layers, refilling their KV, then sends `token` alone through
    /// the decoding layers with `base + think` as input.
    pub fn cycle_boundary_pass(&mut self, model: &Model<T>, token: usize) -> Result<Vec<T>> {
        if self.cycle_phase() != 0 {
            return Err(Error::contract(format!(
                "boundary pass at position {} which is not a cycle start",
                self.next_position
            )));
        }
        if self.pending.len() != self.expected_pending() {
            return Err(Error::contract("pending refill list out of step with the cycle"));
        }
        self.check_refill_batch()?;
        self.check_capacity(model)?;
        let part = model.partition();
        let p = self.next_position;
        let pass = self.passes;
        let mut positions: Vec<usize> = self.pending.iter().map(|e| e.0).collect();
        positions.push(p);
        let emb = model.embed(&[token])?;
        let (base, think) = match self.plan.variant {
            BaseVariant::Embedding => {
                let mut rows = std::mem::take(&mut self.stored_base);
                rows.push(emb.data().to_vec());
                let batch = Tensor::from_rows(&rows)?;
                let enc = model.forward_range(&batch, part.encoding.clone(), &positions, &mut self.cache, true)?;
                if !part.encoding.is_empty() {
                    self.trace.record(pass, PassKind::Boundary, Stage::Encoding, positions.clone())?;
                }
                let think = model.forward_range(&enc, part.thinking.clone(), &positions, &mut self.cache, true)?;
                (emb.data().to_vec(), last_row(&think))
            }
            BaseVariant::Encoding => {
                let enc = model.forward_range(&emb, part.encoding.clone(), &[p], &mut self.cache, true)?;
                self.trace.record(pass, PassKind::Boundary, Stage::Encoding, vec![p])?;
                let mut rows = std::mem::take(&mut self.stored_base);
                rows.push(enc.data().to_vec());
                let batch = Tensor::from_rows(&rows)?;
                let think = model.forward_range(&batch, part.thinking.clone(), &positions, &mut self.cache, true)?;
                (enc.data().to_vec(), last_row(&think))
            }
        };
        if !part.thinking.is_empty() {
            self.trace.record(pass, PassKind::Boundary, Stage::Thinking, positions)?;
        }
        let dec_in = row_tensor(add_rows(&base, &think))?;
        let out = model.forward_range(&dec_in, part.decoding.clone(), &[p], &mut self.cache, true)?;
        self.trace.record(pass, PassKind::Boundary, Stage::Decoding, vec![p])?;
        self.pending.clear();
        self.next_position += 1;
        self.passes += 1;
        let logits = model.lm_head(&out)?;
        self.last_logits = logits.data().to_vec();
        Ok(self.last_logits.clone())
    }

    /// Feeds the last sampled token through the pass its position calls
    /// for and samples the next one.
    pub fn step(&mut self, model: &Model<T>) -> Result<usize> {
        let token = self.next_token;
        let logits = if self.cycle_phase() == 0 {
            self.cycle_boundary_pass(model, token)?
        } else {
            self.light_pass(model, token)?
        };
        self.next_token = self.sampler.sample(&logits)?;
        Ok(self.next_token)
    }

    /// Refills every pending slot without emitting a token, so that the
    /// stream can be continued. The cycle is re-anchored so the last fed
    /// position counts as a cycle start.
    pub fn flush_refill(&mut self, model: &Model<T>) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        self.check_refill_batch()?;
        let part = model.partition();
        let pass = self.passes;
        let positions: Vec<usize> = self.pending.iter().map(|e| e.0).collect();
        let rows = Tensor::from_rows(&std::mem::take(&mut self.stored_base))?;
        let enc = match self.plan.variant {
            BaseVariant::Embedding => {
                let enc = model.forward_range(&rows, part.encoding.clone(), &positions, &mut self.cache, true)?;
                if !part.encoding.is_empty() {
                    self.trace.record(pass, PassKind::RefillOnly, Stage::Encoding, positions.clone())?;
                }
                enc
            }
            BaseVariant::Encoding => rows,
        };
        model.forward_range(&enc, part.thinking.clone(), &positions, &mut self.cache, true)?;
        if !part.thinking.is_empty() {
            self.trace.record(pass, PassKind::RefillOnly, Stage::Thinking, positions)?;
        }
        self.pending.clear();
        self.plan = self.plan.aligned_to(self.next_position - 1);
        self.passes += 1;
        Ok(())
    }
}

/// Why generation ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxTokens,
    StopToken,
    /// The sequence reached `max_seq_len`; the output is partial.
    Truncated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    pub prefill: PrefillMode,
    pub stop_token: Option<usize>,
    /// Keep the logit row behind every generated token.
    pub record_logits: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationReport {
    pub tokens: Vec<usize>,
    pub trace: InvocationTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f32>>>,
    pub stop: StopReason,
    pub occupancy: OccupancySummary,
    /// Plan anchored to the generated cycles.
    pub plan: CyclePlan,
}

/// Generation output as written to disk.
#[derive(Clone, Debug, Serialize)]
pub struct Transcript<'a> {
    pub schema_version: u32,
    pub context: &'a [usize],
    pub tokens: &'a [usize],
    pub text: String,
    pub tau: usize,
    pub variant: BaseVariant,
    pub anchor: usize,
    pub prefill: PrefillMode,
    pub stop: StopReason,
    pub schedule: Vec<PassKind>,
    pub trace: &'a InvocationTrace,
    pub occupancy: &'a OccupancySummary,
}

impl GenerationReport {
    pub fn transcript<'a>(&'a self, context: &'a [usize], prefill: PrefillMode) -> Transcript<'a> {
        let bytes: Vec<u8> = self
            .tokens
            .iter()
            .map(|&t| if t < 256 { t as u8 } else { crate::corpus::SEPARATOR_BYTE })
            .collect();
        Transcript {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            context,
            tokens: &self.tokens,
            text: String::from_utf8_lossy(&bytes).into_owned(),
            tau: self.plan.tau,
            variant: self.plan.variant,
            anchor: self.plan.anchor,
            prefill,
            stop: self.stop,
            schedule: self.trace.schedule(),
            trace: &self.trace,
            occupancy: &self.occupancy,
        }
    }
}

/// Prefills `context` and generates up to `max_new` tokens, one cycle of
/// `plan.tau` tokens at a time.
pub fn generate<T: Real>(
    model: &Model<T>,
    context: &[usize],
    max_new: usize,
    plan: &CyclePlan,
    sampler: SamplerConfig,
    options: GenerateOptions,
) -> Result<GenerationReport> {
    let mut reports = generate_lockstep(model, &[context], max_new, plan, sampler, options)?;
    Ok(reports.remove(0))
}

/// Independent streams stepped one pass at a time in lockstep. Every
/// stream uses the same sampler configuration.
pub fn generate_lockstep<T: Real, C: AsRef<[usize]>>(
    model: &Model<T>,
    contexts: &[C],
    max_new: usize,
    plan: &CyclePlan,
    sampler: SamplerConfig,
    options: GenerateOptions,
) -> Result<Vec<GenerationReport>> {
    plan.check_model(model.config())?;
    sampler.validate()?;
    if max_new == 0 {
        return Ok(contexts
            .iter()
            .map(|c| GenerationReport {
                tokens: Vec::new(),
                trace: InvocationTrace::default(),
                logits: options.record_logits.then(Vec::new),
                stop: StopReason::MaxTokens,
                occupancy: OccupancySummary::default(),
                plan: plan.aligned_to(c.as_ref().len().saturating_sub(1)),
            })
            .collect());
    }
    struct Stream<T> {
        state: DecodeState<T>,
        tokens: Vec<usize>,
        logits: Vec<Vec<f32>>,
        stop: Option<StopReason>,
    }
    let record = |state: &DecodeState<T>, logits: &mut Vec<Vec<f32>>| {
        if options.record_logits {
            logits.push(state.last_logits().iter().map(|x| x.as_f64() as f32).collect());
        }
    };
    let mut streams = Vec::with_capacity(contexts.len());
    for context in contexts {
        let (state, first) = DecodeState::prefill(model, context.as_ref(), plan, sampler, options.prefill)?;
        let mut logits = Vec::new();
        record(&state, &mut logits);
        let stop = if options.stop_token == Some(first) {
            Some(StopReason::StopToken)
        } else if max_new == 1 {
            Some(StopReason::MaxTokens)
        } else {
            None
        };
        streams.push(Stream {
            state,
            tokens: vec![first],
            logits,
            stop,
        });
    }
    let limit = model.config().max_seq_len;
    while streams.iter().any(|s| s.stop.is_none()) {
        for s in streams.iter_mut().filter(|s| s.stop.is_none()) {
            if s.state.next_position() >= limit {
                s.stop = Some(StopReason::Truncated);
                continue;
            }
            let token = s.state.step(model)?;
            record(&s.state, &mut s.logits);
            s.tokens.push(token);
            if options.stop_token == Some(token) {
                s.stop = Some(StopReason::StopToken);
            } else if s.tokens.len() >= max_new {
                s.stop = Some(StopReason::MaxTokens);
            }
        }
    }
    let partition = model.partition();
    Ok(streams
        .into_iter()
        .map(|s| GenerationReport {
            occupancy: s.state.cache().summary(&partition),
            plan: *s.state.plan(),
            trace: s.state.trace,
            tokens: s.tokens,
            logits: options.record_logits.then_some(s.logits),
            stop: s.stop.expect("every stream stopped"),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SlotState;
    use crate::model::ModelConfig;

    fn model() -> Model<f32> {
        Model::init(&ModelConfig::tiny(16, 1, 2, 1)).unwrap()
    }

    fn plan(tau: usize) -> CyclePlan {
        CyclePlan::new(tau, BaseVariant::Embedding).unwrap()
    }

    #[test]
    fn schedule_for_two_cycles() {
        let m = model();
        let r = generate(&m, &[1, 2, 3, 4, 5], 6, &plan(3), SamplerConfig::greedy(), Default::default()).unwrap();
        use PassKind::*;
        assert_eq!(r.trace.schedule(), vec![Prefill, Light, Light, Boundary, Light, Light]);
        assert_eq!(r.trace.stage_invocations(Stage::Thinking), 2);
        assert_eq!(r.trace.stage_invocations(Stage::Decoding), 6);
        assert_eq!(r.tokens.len(), 6);
        assert_eq!(r.stop, StopReason::MaxTokens);
    }

    #[test]
    fn trailing_light_tokens_stay_pending() {
        let m = model();
        let (mut st, _) = DecodeState::prefill(&m, &[1, 2], &plan(3), SamplerConfig::greedy(), PrefillMode::Cyclic).unwrap();
        assert_eq!(st.cycle_phase(), 1);
        st.step(&m).unwrap();
        assert_eq!(st.pending(), &[(2, st.pending()[0].1)]);
        assert_eq!(st.cache().state(0, 2), SlotState::PendingRefill);
        assert_eq!(st.cache().state(3, 2), SlotState::Filled);
        st.flush_refill(&m).unwrap();
        assert!(st.pending().is_empty());
        for l in 0..4 {
            assert_eq!(st.cache().state(l, 2), SlotState::Filled);
        }
        st.step(&m).unwrap();
        assert_eq!(st.trace().schedule().last(), Some(&PassKind::Light));
    }

    #[test]
    fn out_of_order_passes_are_rejected() {
        let m = model();
        let (mut st, t) = DecodeState::prefill(&m, &[1, 2], &plan(3), SamplerConfig::greedy(), PrefillMode::Cyclic).unwrap();
        assert!(matches!(st.cycle_boundary_pass(&m, t), Err(Error::Contract(_))));
        st.light_pass(&m, t).unwrap();
        st.light_pass(&m, t).unwrap();
        assert!(matches!(st.light_pass(&m, t), Err(Error::Contract(_))));
        st.cycle_boundary_pass(&m, t).unwrap();
    }

    #[test]
    fn context_limits() {
        let m = model();
        let g = SamplerConfig::greedy();
        assert!(matches!(
            DecodeState::prefill(&m, &[], &plan(2), g, PrefillMode::Cyclic),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            DecodeState::prefill(&m, &[1; 65], &plan(2), g, PrefillMode::Cyclic),
            Err(Error::Config(_))
        ));
        let r = generate(&m, &[1; 60], 20, &plan(2), g, Default::default()).unwrap();
        assert_eq!(r.stop, StopReason::Truncated);
        assert_eq!(r.tokens.len(), 5);
    }

    #[test]
    fn stop_token_ends_generation() {
        let m = model();
        let g = SamplerConfig::greedy();
        let free = generate(&m, &[7, 8], 5, &plan(2), g, Default::default()).unwrap();
        let stop = free.tokens[2];
        let opts = GenerateOptions {
            stop_token: Some(stop),
            ..Default::default()
        };
        let r = generate(&m, &[7, 8], 5, &plan(2), g, opts).unwrap();
        let first = free.tokens.iter().position(|t| *t == stop).unwrap();
        assert_eq!(r.tokens, free.tokens[..=first]);
        assert_eq!(r.stop, StopReason::StopToken);
    }

    #[test]
    fn single_token_prefill_matches_full_path() {
        let m = model();
        let (st, _) = DecodeState::prefill(&m, &[42], &plan(3), SamplerConfig::greedy(), PrefillMode::Cyclic).unwrap();
        let full = crate::train::masked_forward(&m, &[42], &plan(1)).unwrap();
        let diff = st
            .last_logits()
            .iter()
            .zip(full.row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }
}
