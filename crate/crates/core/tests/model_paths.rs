//! Layer-range composition, causality, cached decoding and the masked
//! forward against a per-position routing oracle.

use dmtd_core::model::{KvCache, Model, ModelConfig};
use dmtd_core::tensor::Tensor;
use dmtd_core::train::{build_cycle_mask, masked_forward, BaseVariant, CyclePlan};

fn model(d: usize, e: usize, t: usize, dec: usize, seed: u64) -> Model<f32> {
    let mut c = ModelConfig::tiny(d, e, t, dec);
    c.seed = seed;
    Model::init(&c).unwrap()
}

fn tokens(n: usize, seed: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 131 + seed * 17 + 3) % 257).collect()
}

#[test]
fn ranges_compose() {
    let m = model(32, 2, 2, 2, 1);
    let toks = tokens(11, 0);
    let pos: Vec<usize> = (0..11).collect();
    let h = m.embed(&toks).unwrap();
    let whole = m.forward_range_uncached(&h, 0..6, &pos).unwrap();
    for split in 0..=6 {
        let a = m.forward_range_uncached(&h, 0..split, &pos).unwrap();
        let b = m.forward_range_uncached(&a, split..6, &pos).unwrap();
        assert!(b.max_abs_diff(&whole) < 1e-5, "split at {split}");
    }
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let m = model(32, 1, 2, 1, 2);
    let plan = CyclePlan::new(3, BaseVariant::Embedding).unwrap();
    let a = tokens(12, 1);
    let mut b = a.clone();
    for t in b.iter_mut().skip(7) {
        *t = (*t + 100) % 257;
    }
    let za = masked_forward(&m, &a, &plan).unwrap();
    let zb = masked_forward(&m, &b, &plan).unwrap();
    for p in 0..7 {
        let d = za.row(p).iter().zip(zb.row(p)).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-6, "position {p}: {d}");
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let m = model(32, 1, 3, 2, 3);
    let toks = tokens(20, 2);
    let full = m.forward_full(&toks).unwrap();
    let mut cache = KvCache::new(m.config());
    let l = m.config().n_layers;
    // Prefill eight, then one token at a time.
    let pos: Vec<usize> = (0..8).collect();
    let h = m.embed(&toks[..8]).unwrap();
    let h = m.forward_range(&h, 0..l, &pos, &mut cache, true).unwrap();
    let z = m.lm_head(&h).unwrap();
    for p in 0..8 {
        let d = z.row(p).iter().zip(full.row(p)).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-5);
    }
    for p in 8..20 {
        let h = m.embed(&toks[p..=p]).unwrap();
        let h = m.forward_range(&h, 0..l, &[p], &mut cache, true).unwrap();
        let z = m.lm_head(&h).unwrap();
        let d = z.row(0).iter().zip(full.row(p)).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-5, "position {p}: {d}");
    }
}

/// Logits at every position computed one position at a time: the prefix
/// `0..=p` is routed through the stages with the decoding input chosen per
/// position from the mask, and only row `p` is kept.
pub fn routing_oracle(m: &Model<f32>, toks: &[usize], plan: &CyclePlan) -> Vec<Vec<f32>> {
    let part = m.partition();
    let d = m.config().d_model;
    let mask = build_cycle_mask(toks.len(), plan.tau, plan.anchor).unwrap();
    (0..toks.len())
        .map(|p| {
            let prefix = &toks[..=p];
            let pos: Vec<usize> = (0..=p).collect();
            let emb = m.embed(prefix).unwrap();
            let enc = m.forward_range_uncached(&emb, part.encoding.clone(), &pos).unwrap();
            let think = m.forward_range_uncached(&enc, part.thinking.clone(), &pos).unwrap();
            let base = match plan.variant {
                BaseVariant::Embedding => &emb,
                BaseVariant::Encoding => &enc,
            };
            let mut rows = Vec::with_capacity((p + 1) * d);
            for q in 0..=p {
                if mask.bits[q] {
                    rows.extend(base.row(q).iter().zip(think.row(q)).map(|(a, b)| a + b));
                } else {
                    rows.extend_from_slice(base.row(q));
                }
            }
            let x = Tensor::new(vec![p + 1, d], rows).unwrap();
            let out = m.forward_range_uncached(&x, part.decoding.clone(), &pos).unwrap();
            let last = Tensor::new(vec![1, d], out.row(p).to_vec()).unwrap();
            m.lm_head(&last).unwrap().row(0).to_vec()
        })
        .collect()
}

#[test]
fn masked_forward_matches_routing_oracle() {
    let m = model(32, 2, 2, 2, 5);
    let toks = tokens(13, 4);
    for tau in 1..=4 {
        for anchor in 0..tau {
            for variant in [BaseVariant::Embedding, BaseVariant::Encoding] {
                let plan = CyclePlan::anchored(tau, variant, anchor).unwrap();
                let z = masked_forward(&m, &toks, &plan).unwrap();
                let oracle = routing_oracle(&m, &toks, &plan);
                for (p, row) in oracle.iter().enumerate() {
                    let d = row.iter().zip(z.row(p)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                    assert!(d < 1e-5, "tau {tau} anchor {anchor} {variant:?} position {p}: {d}");
                }
            }
        }
    }
}

#[test]
fn tau_one_is_the_full_path_everywhere() {
    let m = model(32, 0, 3, 1, 6);
    let toks = tokens(9, 5);
    let z = masked_forward(&m, &toks, &CyclePlan::new(1, BaseVariant::Embedding).unwrap()).unwrap();
    // With every bit set the decoding input is h_emb + h_think.
    let oracle = routing_oracle(&m, &toks, &CyclePlan::new(1, BaseVariant::Embedding).unwrap());
    for (p, row) in oracle.iter().enumerate() {
        assert!(row.iter().zip(z.row(p)).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
