//! Browser bindings for three views of the decoder: the cycle mask, the
//! PLT curve over cycle lengths, and the pass-by-pass cache occupancy of a
//! generation on a small random model.
//!
//! Each binding returns JSON. The same functions are callable natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dmtd_core::bench::{measure_plt, plt_theoretical, ratio_f64, reuse_layers, PassKind};
use dmtd_core::error::SlotState;
use dmtd_core::infer::{DecodeState, PrefillMode, SamplerConfig};
use dmtd_core::model::{Model, ModelConfig, Stage};
use dmtd_core::train::{build_cycle_mask, BaseVariant, CyclePlan};

fn js_err(e: dmtd_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn variant(name: &str) -> Result<BaseVariant, dmtd_core::Error> {
    match name {
        "embedding" => Ok(BaseVariant::Embedding),
        "encoding" => Ok(BaseVariant::Encoding),
        other => Err(dmtd_core::Error::Config(format!("unknown variant {other:?}"))),
    }
}

/// Mask bits for positions `0..n`.
pub fn mask(n: usize, tau: usize, anchor: usize) -> Result<Vec<u8>, dmtd_core::Error> {
    Ok(build_cycle_mask(n, tau, anchor)?.as_u8())
}

#[wasm_bindgen]
pub fn mask_pattern(n: usize, tau: usize, anchor: usize) -> Result<Vec<u8>, JsError> {
    mask(n, tau, anchor).map_err(js_err)
}

#[derive(Debug, Serialize, PartialEq)]
pub struct PltPoint {
    pub tau: usize,
    pub plt: f64,
    pub fraction: String,
    pub speedup: f64,
}

/// Theoretical PLT for `tau = 1..=max_tau`.
pub fn plt_points(
    encoding: usize,
    thinking: usize,
    decoding: usize,
    variant_name: &str,
    max_tau: usize,
) -> Result<Vec<PltPoint>, dmtd_core::Error> {
    let v = variant(variant_name)?;
    let part = ModelConfig::tiny(16, encoding, thinking, decoding).partition();
    let (l, reuse) = (part.total(), reuse_layers(&part, v));
    (1..=max_tau)
        .map(|tau| {
            let r = plt_theoretical(l as u64, reuse as u64, tau as u64)?;
            Ok(PltPoint {
                tau,
                plt: ratio_f64(&r),
                fraction: format!("{}/{}", r.numer(), r.denom()),
                speedup: 1.0 / ratio_f64(&r),
            })
        })
        .collect()
}

#[wasm_bindgen]
pub fn plt_curve(
    encoding: usize,
    thinking: usize,
    decoding: usize,
    variant_name: &str,
    max_tau: usize,
) -> Result<String, JsError> {
    let pts = plt_points(encoding, thinking, decoding, variant_name, max_tau).map_err(js_err)?;
    Ok(serde_json::to_string(&pts)?)
}

#[derive(Debug, Serialize)]
pub struct PassView {
    pub kind: PassKind,
    /// Positions each stage ran on in this pass: [encoding, thinking, decoding].
    pub stages: [Vec<usize>; 3],
    pub token: usize,
    /// Occupancy after the pass: one string per layer, one char per
    /// position ('.' empty, '#' filled, 'o' pending refill).
    pub occupancy: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct ScheduleView {
    pub layers: [usize; 3],
    pub tau: usize,
    pub context_len: usize,
    pub passes: Vec<PassView>,
    pub measured_plt: String,
    pub theoretical_plt: String,
}

fn occupancy_rows(state: &DecodeState<f32>, layers: usize, len: usize) -> Vec<String> {
    (0..layers)
        .map(|l| {
            (0..len)
                .map(|p| match state.cache().state(l, p) {
                    SlotState::Empty => '.',
                    SlotState::Filled => '#',
                    SlotState::PendingRefill => 'o',
                })
                .collect()
        })
        .collect()
}

/// Greedy generation on a seeded random model, recording each pass.
#[allow(clippy::too_many_arguments)]
pub fn schedule(
    encoding: usize,
    thinking: usize,
    decoding: usize,
    variant_name: &str,
    tau: usize,
    context_len: usize,
    gen: usize,
    seed: u64,
) -> Result<ScheduleView, dmtd_core::Error> {
    let mut config = ModelConfig::tiny(16, encoding, thinking, decoding);
    config.n_heads = 2;
    config.seed = seed;
    config.max_seq_len = 64;
    if gen == 0 || context_len == 0 || context_len + gen > config.max_seq_len {
        return Err(dmtd_core::Error::Config(format!(
            "need 1 <= context, 1 <= tokens and context + tokens <= {}",
            config.max_seq_len
        )));
    }
    let model: Model<f32> = Model::init(&config)?;
    let plan = CyclePlan::new(tau, variant(variant_name)?)?;
    let context: Vec<usize> = (0..context_len).map(|i| 97 + (i * 7 + seed as usize) % 26).collect();
    let l = config.n_layers;
    let len = context_len + gen - 1;
    let (mut state, first) = DecodeState::prefill(&model, &context, &plan, SamplerConfig::greedy(), PrefillMode::Cyclic)?;
    let mut tokens = vec![first];
    let mut views = Vec::new();
    let mut seen = 0;
    let push = |state: &DecodeState<f32>, token: usize, seen: &mut usize, views: &mut Vec<PassView>| {
        let entries = &state.trace().entries[*seen..];
        *seen = state.trace().entries.len();
        let mut stages: [Vec<usize>; 3] = Default::default();
        for e in entries {
            let slot = match e.stage {
                Stage::Encoding => 0,
                Stage::Thinking => 1,
                Stage::Decoding => 2,
            };
            stages[slot] = e.positions.clone();
        }
        views.push(PassView {
            kind: entries[0].kind,
            stages,
            token,
            occupancy: occupancy_rows(state, l, len),
        });
    };
    push(&state, first, &mut seen, &mut views);
    while tokens.len() < gen {
        let t = state.step(&model)?;
        tokens.push(t);
        push(&state, t, &mut seen, &mut views);
    }
    let part = model.partition();
    let measured = measure_plt(state.trace(), &part, &plan, gen)?;
    Ok(ScheduleView {
        layers: [encoding, thinking, decoding],
        tau,
        context_len,
        passes: views,
        measured_plt: format!("{}/{}", measured.measured_plt.numer(), measured.measured_plt.denom()),
        theoretical_plt: format!(
            "{}/{}",
            measured.theoretical_plt.numer(),
            measured.theoretical_plt.denom()
        ),
    })
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn generation_schedule(
    encoding: usize,
    thinking: usize,
    decoding: usize,
    variant_name: &str,
    tau: usize,
    context_len: usize,
    gen: usize,
    seed: u32,
) -> Result<String, JsError> {
    let view = schedule(encoding, thinking, decoding, variant_name, tau, context_len, gen, seed as u64).map_err(js_err)?;
    Ok(serde_json::to_string(&view)?)
}
