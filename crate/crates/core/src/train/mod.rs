//! Cyclical-mask training.
//!
//! One forward pass per sequence computes embeddings, encoding and thinking
//! states, then feeds `base + think ⊙ m` to the decoding layers, where `m`
//! is 1 at cycle starts and 0 elsewhere. Cycle starts therefore learn the
//! full-depth prediction and every other position learns to predict from
//! the decoding layers alone, all under the plain next-token loss.

mod mask;

use serde::{Deserialize, Serialize};

pub use mask::{build_cycle_mask, BaseVariant, CycleMask, CyclePlan};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Bound, Model, ModelConfig, Rows};
use crate::tensor::{AdamW, AdamWConfig, Graph, LrSchedule, NodeId, Real, Tensor};

impl CyclePlan {
    /// The encoding-base variant needs encoding layers to take its base from.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.variant == BaseVariant::Encoding && config.encoding_layers == 0 {
            return Err(Error::config("the encoding-base variant needs at least one encoding layer"));
        }
        Ok(())
    }
}

/// Graph-level masked forward over `rows`; returns the logits node.
pub(crate) fn masked_forward_node<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    b: &Bound,
    tokens: &[usize],
    rows: &Rows,
    plan: &CyclePlan,
) -> Result<NodeId> {
    let p = model.partition();
    let emb = model.embed_node(g, b, tokens)?;
    let enc = model.layers_node(g, b, emb, p.encoding.clone(), rows, None, false)?;
    let think = model.layers_node(g, b, enc, p.thinking.clone(), rows, None, false)?;
    let base = match plan.variant {
        BaseVariant::Embedding => emb,
        BaseVariant::Encoding => enc,
    };
    let m = rows
        .positions
        .iter()
        .map(|&pos| if plan.is_cycle_start(pos) { T::one() } else { T::zero() })
        .collect();
    let gated = g.row_scale(think, m)?;
    let masked = g.add(base, gated)?;
    let out = model.layers_node(g, b, masked, p.decoding.clone(), rows, None, false)?;
    model.head_node(g, b, out)
}

/// Logits `[n × vocab]` of the masked forward for one sequence.
pub fn masked_forward<T: Real>(model: &Model<T>, tokens: &[usize], plan: &CyclePlan) -> Result<Tensor<T>> {
    plan.check_model(model.config())?;
    if tokens.len() > model.config().max_seq_len {
        return Err(Error::config(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            model.config().max_seq_len
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut g = Graph::inference();
    let b = model.bind(&mut g);
    let z = masked_forward_node(model, &mut g, &b, tokens, &Rows::single(&positions), plan)?;
    Ok(g.tensor(z))
}

/// Flattened next-token targets for a batch of equal-length windows; the
/// final position of each window has no target and is inactive.
fn shifted_targets(batch: &[&[usize]]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut active = Vec::new();
    for seq in batch {
        for i in 0..seq.len() {
            let has_next = i + 1 < seq.len();
            targets.push(if has_next { seq[i + 1] } else { 0 });
            active.push(has_next);
        }
    }
    (targets, active)
}

/// Per-offset cross-entropy: entry `k` averages over positions whose cycle
/// offset is `k`. Offset 0 is the full-depth prediction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetLosses {
    pub mean: Vec<f64>,
    pub count: Vec<usize>,
}

impl OffsetLosses {
    fn zeros(tau: usize) -> Self {
        OffsetLosses {
            mean: vec![0.0; tau],
            count: vec![0; tau],
        }
    }

    /// Count-weighted mean over offsets.
    pub fn overall(&self) -> f64 {
        let n: usize = self.count.iter().sum();
        if n == 0 {
            return 0.0;
        }
        self.mean.iter().zip(&self.count).map(|(m, c)| m * *c as f64).sum::<f64>() / n as f64
    }

    fn merge(&mut self, other: &OffsetLosses) {
        for k in 0..self.mean.len() {
            let (a, b) = (self.count[k], other.count[k]);
            if a + b > 0 {
                self.mean[k] = (self.mean[k] * a as f64 + other.mean[k] * b as f64) / (a + b) as f64;
            }
            self.count[k] = a + b;
        }
    }
}

fn offset_losses_rows<T: Real>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    active: &[bool],
    positions: &[usize],
    plan: &CyclePlan,
) -> OffsetLosses {
    let mut sums = vec![0.0; plan.tau];
    let mut out = OffsetLosses::zeros(plan.tau);
    for (r, row) in logits.chunks(vocab).enumerate() {
        if !active[r] {
            continue;
        }
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        let k = plan.offset(positions[r]);
        sums[k] += lse - row[targets[r]].as_f64();
        out.count[k] += 1;
    }
    for k in 0..plan.tau {
        if out.count[k] > 0 {
            out.mean[k] = sums[k] / out.count[k] as f64;
        }
    }
    out
}

/// Splits the next-token loss of one sequence by cycle offset.
pub fn loss_by_offset<T: Real>(logits: &Tensor<T>, tokens: &[usize], plan: &CyclePlan) -> Result<OffsetLosses> {
    let (n, vocab) = logits.dims2()?;
    if n != tokens.len() {
        return Err(Error::dim(format!("{n} logit rows for {} tokens", tokens.len())));
    }
    let (targets, active) = shifted_targets(&[tokens]);
    let positions: Vec<usize> = (0..n).collect();
    Ok(offset_losses_rows(logits.data(), vocab, &targets, &active, &positions, plan))
}

/// Mean next-token loss of the masked forward over positions `0..n-1`.
pub fn sequence_loss<T: Real>(model: &Model<T>, tokens: &[usize], plan: &CyclePlan) -> Result<T> {
    batch_loss(model, &[tokens], plan, false).map(|(l, _)| l)
}

fn check_batch(batch: &[&[usize]], config: &ModelConfig) -> Result<usize> {
    let len = batch
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::config("empty batch"))?;
    if batch.iter().any(|s| s.len() != len) {
        return Err(Error::dim("batch sequences differ in length"));
    }
    if len < 2 {
        return Err(Error::config("sequences need at least two tokens"));
    }
    if len > config.max_seq_len {
        return Err(Error::config(format!(
            "sequence length {len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    Ok(len)
}

/// Loss and per-offset breakdown for a batch. With `with_grad`, parameter
/// gradients are written into the model's tensors.
fn batch_loss<T: Real>(
    model: &Model<T>,
    batch: &[&[usize]],
    plan: &CyclePlan,
    with_grad: bool,
) -> Result<(T, Option<(Vec<Option<Vec<T>>>, OffsetLosses)>)> {
    plan.check_model(model.config())?;
    let len = check_batch(batch, model.config())?;
    let rows = Rows::batched(batch.len(), len);
    let flat: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let (targets, active) = shifted_targets(batch);
    let mut g = if with_grad { Graph::new() } else { Graph::inference() };
    let b = model.bind(&mut g);
    let z = masked_forward_node(model, &mut g, &b, &flat, &rows, plan)?;
    let loss = g.cross_entropy(z, &targets, Some(&active))?;
    let value = g.value(loss)[0];
    if !with_grad {
        return Ok((value, None));
    }
    let vocab = model.config().vocab_size;
    let offsets = offset_losses_rows(g.value(z), vocab, &targets, &active, &rows.positions, plan);
    g.backward(loss)?;
    let grads = b.0.iter().map(|id| g.grad(*id).map(<[T]>::to_vec)).collect();
    Ok((value, Some((grads, offsets))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_fraction: f64,
    pub eval_windows: usize,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            seq_len: 64,
            steps: 2000,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            schedule: LrSchedule::Cosine,
            grad_clip: 1.0,
            seed: 0,
            eval_fraction: 0.05,
            eval_windows: 32,
            log_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("steps", self.steps),
            ("log_interval", self.log_interval),
            ("eval_windows", self.eval_windows as u64),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::config("train.seq_len must be at least 2"));
        }
        if self.checkpoint_interval % self.log_interval != 0 {
            return Err(Error::config(
                "train.checkpoint_interval must be a multiple of train.log_interval",
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config("train.eval_fraction must lie in [0, 1)"));
        }
        crate::error::check_seed("train.seed", self.seed)?;
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            max_grad_norm: self.grad_clip,
            warmup_ratio: self.warmup_ratio,
            schedule: self.schedule,
            total_steps: self.steps,
        }
    }
}

/// Mean masked loss of `batch` and its gradient for every parameter, in
/// parameter order. Parameters the loss does not reach get zeros.
pub fn loss_with_grads<T: Real>(model: &Model<T>, batch: &[&[usize]], plan: &CyclePlan) -> Result<(T, Vec<Vec<T>>)> {
    let (loss, extra) = batch_loss(model, batch, plan, true)?;
    let (grads, _) = extra.expect("requested gradients");
    let grads = grads
        .into_iter()
        .zip(model.parameters())
        .map(|(g, p)| g.unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();
    Ok((loss, grads))
}

/// Mean masked loss of `batch` without gradients.
pub fn batch_loss_value<T: Real>(model: &Model<T>, batch: &[&[usize]], plan: &CyclePlan) -> Result<T> {
    batch_loss(model, batch, plan, false).map(|(l, _)| l)
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub offsets: OffsetLosses,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Computes the masked loss of `batch`, backpropagates, and applies one
/// clipped AdamW update. The reported loss is the pre-update value.
pub fn training_step(
    model: &mut Model<f32>,
    batch: &[&[usize]],
    plan: &CyclePlan,
    opt: &mut AdamW<f32>,
) -> Result<StepOutput> {
    let (loss, extra) = batch_loss(model, batch, plan, true)?;
    let (grads, offsets) = extra.expect("requested gradients");
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss is {loss}")));
    }
    for (p, g) in model.parameters_mut().iter_mut().zip(grads) {
        p.grad = Some(g.unwrap_or_else(|| vec![0.0; p.numel()]));
    }
    let stats = opt.step(model.parameters_mut())?;
    for p in model.parameters_mut() {
        p.grad = None;
    }
    Ok(StepOutput {
        loss: loss as f64,
        offsets,
        lr: stats.lr,
        grad_norm: stats.grad_norm,
    })
}

/// Mean next-token loss over `windows`, evaluated in chunks with no
/// gradient tracking.
pub fn evaluate_windows<T: Real>(model: &Model<T>, windows: &[&[usize]], plan: &CyclePlan) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(8) {
        let (loss, _) = batch_loss(model, chunk, plan, false)?;
        let targets: usize = chunk.iter().map(|w| w.len() - 1).sum();
        total += loss.as_f64() * targets as f64;
        count += targets;
    }
    Ok(total / count as f64)
}

/// Mean next-token loss over (at most `max_windows` of) the held-out split.
pub fn evaluate<T: Real>(model: &Model<T>, corpus: &Corpus, plan: &CyclePlan, max_windows: usize) -> Result<f64> {
    let windows: Vec<&[usize]> = corpus
        .eval_windows()
        .iter()
        .take(max_windows)
        .map(|&w| corpus.window(w))
        .collect();
    evaluate_windows(model, &windows, plan)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub train_loss: f64,
    pub offset_losses: Vec<f64>,
    pub eval_loss: f64,
    pub lr: f64,
}

/// Owns the model and optimizer across steps and aggregates log records.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub config: TrainConfig,
    pub plan: CyclePlan,
    pub step: u64,
    pub tokens_seen: u64,
    window_loss: f64,
    window_steps: u64,
    window_offsets: OffsetLosses,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, plan: CyclePlan) -> Result<Self> {
        config.validate()?;
        plan.check_model(model.config())?;
        if config.seq_len > model.config().max_seq_len {
            return Err(Error::config("train.seq_len exceeds model.max_seq_len"));
        }
        let opt = AdamW::new(config.optimizer(), model.parameters(), model.decay_mask())?;
        Ok(Trainer {
            model,
            opt,
            config,
            window_offsets: OffsetLosses::zeros(plan.tau),
            plan,
            step: 0,
            tokens_seen: 0,
            window_loss: 0.0,
            window_steps: 0,
        })
    }

    /// Resumes at `step` with the optimizer step count aligned to it.
    pub fn resume_at(&mut self, step: u64, tokens_seen: u64) {
        self.step = step;
        self.tokens_seen = tokens_seen;
        self.opt.step_count = step;
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Record of the untrained state: loss of the first batch without an
    /// update, and the held-out loss.
    pub fn initial_record(&self, corpus: &Corpus) -> Result<TrainRecord> {
        let batch = corpus.train_batch(self.step, self.config.batch_size);
        let mut offsets = OffsetLosses::zeros(self.plan.tau);
        for seq in &batch {
            let z = masked_forward(&self.model, seq, &self.plan)?;
            offsets.merge(&loss_by_offset(&z, seq, &self.plan)?);
        }
        Ok(TrainRecord {
            step: self.step,
            tokens_seen: self.tokens_seen,
            train_loss: offsets.overall(),
            offset_losses: offsets.mean,
            eval_loss: evaluate(&self.model, corpus, &self.plan, self.config.eval_windows)?,
            lr: self.opt.current_lr(),
        })
    }

    /// Runs one step; returns a record when the step closes a log interval.
    pub fn step_once(&mut self, corpus: &Corpus) -> Result<Option<TrainRecord>> {
        let batch = corpus.train_batch(self.step, self.config.batch_size);
        let out = training_step(&mut self.model, &batch, &self.plan, &mut self.opt)?;
        self.step += 1;
        self.tokens_seen += batch.iter().map(|w| w.len() as u64).sum::<u64>();
        self.window_loss += out.loss;
        self.window_steps += 1;
        self.window_offsets.merge(&out.offsets);
        if self.step % self.config.log_interval != 0 && !self.done() {
            return Ok(None);
        }
        let eval_loss = evaluate(&self.model, corpus, &self.plan, self.config.eval_windows)?;
        let record = TrainRecord {
            step: self.step,
            tokens_seen: self.tokens_seen,
            train_loss: self.window_loss / self.window_steps as f64,
            offset_losses: self.window_offsets.mean.clone(),
            eval_loss,
            lr: out.lr,
        };
        self.window_loss = 0.0;
        self.window_steps = 0;
        self.window_offsets = OffsetLosses::zeros(self.plan.tau);
        Ok(Some(record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(enc: usize, think: usize, dec: usize) -> Model<f64> {
        let mut c = ModelConfig::tiny(16, enc, think, dec);
        c.vocab_size = 11;
        c.seed = 3;
        Model::init(&c).unwrap()
    }

    #[test]
    fn offset_losses_partition_the_total() {
        let m = tiny(1, 1, 1);
        let tokens = [1, 4, 2, 9, 3, 3, 7, 0];
        let plan = CyclePlan::new(3, BaseVariant::Embedding).unwrap();
        let z = masked_forward(&m, &tokens, &plan).unwrap();
        let parts = loss_by_offset(&z, &tokens, &plan).unwrap();
        let total = sequence_loss(&m, &tokens, &plan).unwrap();
        assert_eq!(parts.count, vec![3, 2, 2]);
        assert!((parts.overall() - total).abs() < 1e-12);

        let one = CyclePlan::new(1, BaseVariant::Embedding).unwrap();
        let z = masked_forward(&m, &tokens, &one).unwrap();
        let parts = loss_by_offset(&z, &tokens, &one).unwrap();
        assert!((parts.mean[0] - sequence_loss(&m, &tokens, &one).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn encoding_variant_needs_encoding_layers() {
        let m = tiny(0, 1, 1);
        let plan = CyclePlan::new(2, BaseVariant::Encoding).unwrap();
        assert!(matches!(masked_forward(&m, &[1, 2], &plan), Err(Error::Config(_))));
    }

    #[test]
    fn too_long_sequence() {
        let m = tiny(0, 1, 1);
        let plan = CyclePlan::new(2, BaseVariant::Embedding).unwrap();
        assert!(matches!(masked_forward(&m, &[1; 65], &plan), Err(Error::Config(_))));
    }

    /// Thinking-layer gradients with the decode-only loss terms isolated
    /// must match a graph where h_think is explicitly detached at every
    /// masked-out position.
    #[test]
    fn masked_positions_send_no_gradient_into_thinking_layers() {
        let m = tiny(0, 1, 1);
        let tokens = [3, 1, 4, 1, 5, 9, 2];
        let plan = CyclePlan::new(3, BaseVariant::Embedding).unwrap();
        let rows = Rows::single(&(0..tokens.len()).collect::<Vec<_>>());
        let (targets, mut active) = shifted_targets(&[&tokens]);
        for (i, a) in active.iter_mut().enumerate() {
            if plan.is_cycle_start(i) {
                *a = false;
            }
        }
        let think_range = m.partition().thinking;
        let grads = |detach: bool| {
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let p = m.partition();
            let emb = m.embed_node(&mut g, &b, &tokens).unwrap();
            let think = m.layers_node(&mut g, &b, emb, p.thinking.clone(), &rows, None, false).unwrap();
            let think = if detach {
                let m1: Vec<f64> = (0..tokens.len()).map(|i| plan.is_cycle_start(i) as u8 as f64).collect();
                let m0: Vec<f64> = m1.iter().map(|x| 1.0 - x).collect();
                let live = g.row_scale(think, m1).unwrap();
                let frozen = g.detach(think);
                let frozen = g.row_scale(frozen, m0).unwrap();
                g.add(live, frozen).unwrap()
            } else {
                think
            };
            let mask: Vec<f64> = (0..tokens.len()).map(|i| plan.is_cycle_start(i) as u8 as f64).collect();
            let gated = g.row_scale(think, mask).unwrap();
            let masked = g.add(emb, gated).unwrap();
            let out = m.layers_node(&mut g, &b, masked, p.decoding.clone(), &rows, None, false).unwrap();
            let z = m.head_node(&mut g, &b, out).unwrap();
            let loss = g.cross_entropy(z, &targets, Some(&active)).unwrap();
            g.backward(loss).unwrap();
            b.0.iter().map(|id| g.grad(*id).map(<[f64]>::to_vec)).collect::<Vec<_>>()
        };
        let plain = grads(false);
        let oracle = grads(true);
        let first = 1 + 8 * think_range.start;
        let mut nonzero = false;
        for i in first..first + 8 * think_range.len() {
            let (a, b) = (plain[i].as_ref().unwrap(), oracle[i].as_ref().unwrap());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
                nonzero |= x.abs() > 1e-9;
            }
        }
        // decode-only positions still reach the thinking layers through the
        // decoding-layer keys/values of cycle-start positions
        assert!(nonzero);
    }
}
