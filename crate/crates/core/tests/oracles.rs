//! Tensor ops against direct textbook evaluations.

use dmtd_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(
        (m, k, n, a, b) in (1usize..12, 1usize..12, 1usize..12)
            .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), matrix(m, k), matrix(k, n)))
    ) {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(vec![m, k], a.clone()).unwrap();
        let y = g.constant(vec![k, n], b.clone()).unwrap();
        let z = g.matmul(x, y).unwrap();
        let want = naive_matmul(&a, &b, m, k, n);
        for (got, want) in g.value(z).iter().zip(&want) {
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn softmax_matches_definition(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(vec![rows, cols], data.clone()).unwrap();
        let s = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..cols {
                let want = row[c].exp() / denom;
                prop_assert!((g.value(s)[r * cols + c] - want).abs() < 1e-12);
            }
            let total: f64 = g.value(s)[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_definition(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(vec![rows, cols], data.clone()).unwrap();
        let l = g.cross_entropy(x, &targets, None).unwrap();
        let mut want = 0.0;
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let p = row[targets[r]].exp() / row.iter().map(|v| v.exp()).sum::<f64>();
            want -= p.ln();
        }
        want /= rows as f64;
        prop_assert!((g.value(l)[0] - want).abs() < 1e-10);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(vec![2, 256], vec![0.3; 512]).unwrap();
    let l = g.cross_entropy(x, &[5, 200], None).unwrap();
    assert!((g.value(l)[0] - (256f64).ln()).abs() < 1e-12);
}

#[test]
fn f32_and_f64_matmul_agree() {
    let a: Vec<f64> = (0..64 * 48).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    let b: Vec<f64> = (0..48 * 32).map(|i| ((i * 53) % 89) as f64 / 44.0 - 1.0).collect();
    let t64 = Tensor::new(vec![64, 48], a.clone()).unwrap();
    let t32: Tensor<f32> = t64.cast();
    let u64t = Tensor::new(vec![48, 32], b.clone()).unwrap();
    let u32t: Tensor<f32> = u64t.cast();
    let mut g = Graph::<f32>::inference();
    let (x, y) = (g.leaf(&t32), g.leaf(&u32t));
    let z = g.matmul(x, y).unwrap();
    let want = naive_matmul(&a, &b, 64, 48, 32);
    for (got, want) in g.value(z).iter().zip(&want) {
        assert!((*got as f64 - want).abs() < 1e-4);
    }
}
