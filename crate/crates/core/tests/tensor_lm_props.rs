use std::collections::BTreeMap;

use locale_forge::corpus::LocaleId;
use locale_forge::lm::{build_model, forward, train, Batch, ModelConfig, TrainHyper};
use locale_forge::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;

fn rows() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..5, 2usize..9).prop_flat_map(|(r, c)| (Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

fn small_cfg() -> ModelConfig {
    ModelConfig::new(2, 16, 2, 32, 24, 10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((c, data) in rows()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![data.len() / c, c], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes((c, data) in rows()) {
        let var_of = |r: &[f64]| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64
        };
        let input_vars: Vec<f64> = data.chunks(c).map(var_of).collect();
        prop_assume!(input_vars.iter().all(|&v| v > 1e-2));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![data.len() / c, c], data).unwrap());
        let y = tape.layer_norm(x, 1e-5).unwrap();
        for (row, v_in) in tape.value(y).chunks(c).zip(&input_vars) {
            let mean = row.iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() <= 1e-9);
            // eps in the denominator shrinks the variance slightly below one
            prop_assert!((var_of(row) - v_in / (v_in + 1e-5)).abs() <= 1e-9);
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_seeded(data in prop::collection::vec(-5.0f64..5.0, 1..64), seed: u64, p in 0.05f64..0.9) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![data.len()], data).unwrap());
        let id = tape.dropout(x, 0.0, seed).unwrap();
        prop_assert_eq!(tape.value(id), tape.value(x));
        let a = tape.dropout(x, p, seed).unwrap();
        let b = tape.dropout(x, p, seed).unwrap();
        prop_assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn gradients_accumulate_over_uses(data in prop::collection::vec(-3.0f64..3.0, 1..16), k in 1usize..5) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::new(vec![data.len()], data.clone()).unwrap());
        let mut acc = x;
        for _ in 1..k {
            acc = tape.add(acc, x).unwrap();
        }
        let sq = tape.mul(acc, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        // l = k·Σx², so dl/dx = 2k·x
        for (g, v) in tape.grad(x).unwrap().iter().zip(&data) {
            prop_assert!((g - 2.0 * k as f64 * v).abs() <= 1e-12);
        }
    }

    #[test]
    fn future_tokens_never_change_past_logits(
        prefix in prop::collection::vec(4u32..24, 1..5),
        tail_a in prop::collection::vec(4u32..24, 1..4),
        tail_b in prop::collection::vec(4u32..24, 1..4),
        seed in 0u64..4,
    ) {
        let m = build_model(small_cfg(), seed).unwrap();
        let mut a = vec![1u32];
        a.extend(&prefix);
        let mut b = a.clone();
        a.extend(&tail_a);
        b.extend(&tail_b);
        let logits = |s: &Vec<u32>| {
            let batch = Batch::from_sequences(&[s.clone()], 10).unwrap();
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = m.params.iter().map(|t| tape.leaf(t)).collect();
            let l = forward(&m.cfg, &mut tape, &vars, &batch, None, None).unwrap();
            tape.value(l).to_vec()
        };
        let v = m.cfg.vocab_size;
        let seen = 1 + prefix.len();
        prop_assert_eq!(&logits(&a)[..seen * v], &logits(&b)[..seen * v]);
    }

    #[test]
    fn param_count_is_a_function_of_config(layers in 1usize..4, heads in 1usize..4, dh in 1usize..5, ff in 1usize..40, v in 5usize..50, seed in 0u64..100) {
        let cfg = ModelConfig::new(layers, heads * dh * 2, heads, ff, v, 8);
        let m = build_model(cfg, seed).unwrap();
        prop_assert_eq!(m.n_params(), cfg.param_count());
        prop_assert!(std::ptr::eq(m.token_embedding(), m.output_projection()));
    }
}

#[test]
fn group_training_keeps_curves_aligned() {
    let cfg = small_cfg();
    let seqs = |base: u32| -> Vec<Vec<u32>> {
        (0..12)
            .map(|i| vec![1, base + i % 5, base + (i + 1) % 5, base + (i + 3) % 5, 2])
            .collect()
    };
    let (a, b) = (seqs(4), seqs(12));
    let stream: Vec<Vec<u32>> = a.iter().chain(&b).cloned().collect();
    let valid = BTreeMap::from([
        (LocaleId::new("aa-AA").unwrap(), a[..4].to_vec()),
        (LocaleId::new("bb-BB").unwrap(), b[..4].to_vec()),
    ]);
    let hyper = TrainHyper {
        steps: 150,
        batch_size: 8,
        peak_lr: 3e-3,
        warmup_steps: 20,
        eval_every: 25,
        ..Default::default()
    };
    let out = train(build_model(cfg, 1).unwrap(), &stream, &valid, &hyper).unwrap();
    let s = &out.state;
    assert!(s.eval_steps.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s.eval_steps, vec![0, 25, 50, 75, 100, 125, 150]);
    assert!(s.valid_loss.values().all(|c| c.len() == s.eval_steps.len()));
    let curve = s.group_curve();
    assert_eq!(curve.iter().copied().fold(f64::INFINITY, f64::min), s.best_group_loss);
    assert!(s.best_group_loss < curve[0] * 0.7, "{curve:?}");
    assert_eq!(out.log.len(), s.eval_steps.len());
}
