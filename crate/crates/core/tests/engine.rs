mod common;

use biasscope_core::metrics::perplexity;
use biasscope_core::model::{ForwardOptions, LogitRows, TensorStore};
use biasscope_core::synthetic::{random_model, successor_model, tiny_config, uniform_model};
use biasscope_core::{Error, InterventionHooks, ModelConfig, ModelWeights, ScalingHookSpec, Transformer};
use common::reference::{reference_forward, softmax};

/// Absolute logit tolerance between the engine and the f64 oracle.
const ORACLE_TOL: f64 = 1e-5;

fn configs() -> Vec<(ModelConfig, u64, bool)> {
    vec![
        (tiny_config(1, 1, 8, 16), 1, false),
        (tiny_config(2, 2, 8, 23), 2, true),
        (tiny_config(3, 4, 16, 40), 3, false),
        (tiny_config(2, 3, 12, 31), 4, true),
        (tiny_config(4, 2, 20, 50), 5, false),
        (tiny_config(1, 8, 32, 64), 6, true),
    ]
}

fn tokens(vocab: usize, len: usize, salt: u32) -> Vec<u32> {
    (0..len as u32).map(|i| (i * 7 + salt * 3 + 1) % vocab as u32).collect()
}

fn hooks(specs: Vec<ScalingHookSpec>) -> InterventionHooks {
    InterventionHooks::new(specs)
}

#[test]
fn logits_match_reference_on_random_models() {
    for (cfg, seed, untied) in configs() {
        let m = random_model(&cfg, seed, 0.3, untied).unwrap();
        let toks = tokens(cfg.vocab_size, 9, seed as u32);
        let out = m
            .forward_with(&toks, &ForwardOptions { logit_rows: LogitRows::All, ..Default::default() })
            .unwrap();
        let oracle = reference_forward(&cfg, m.weights(), &toks, &[]);
        for (i, row) in oracle.logits.iter().enumerate() {
            for (v, expected) in row.iter().enumerate() {
                let got = out.row(i, cfg.vocab_size)[v] as f64;
                assert!(
                    (got - expected).abs() < ORACLE_TOL,
                    "seed {seed} pos {i} vocab {v}: {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn attention_trace_matches_reference_and_sums_to_one() {
    for (cfg, seed, untied) in configs() {
        let m = random_model(&cfg, seed, 0.5, untied).unwrap();
        let toks = tokens(cfg.vocab_size, 7, 11);
        let trace = m.forward(&toks, None, true).unwrap().trace.unwrap();
        let oracle = reference_forward(&cfg, m.weights(), &toks, &[]);
        assert_eq!(trace.prompt_length(), toks.len());
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                assert!((trace.row_sum(l, h) as f64 - 1.0).abs() < 1e-5);
                for j in 0..toks.len() {
                    assert!((trace.get(l, h, j) as f64 - oracle.last_attention[l][h][j]).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn hooked_logits_match_reference() {
    for (cfg, seed, untied) in configs() {
        let m = random_model(&cfg, seed, 0.4, untied).unwrap();
        let toks = tokens(cfg.vocab_size, 8, 5);
        let layer = cfg.n_layers - 1;
        let hk = hooks(vec![ScalingHookSpec::new(layer, [1, 4], 0.3), ScalingHookSpec::new(0, [2], 0.7)]);
        let out = m.forward(&toks, Some(&hk), false).unwrap();
        let oracle = reference_forward(&cfg, m.weights(), &toks, &[(layer, vec![1, 4], 0.3), (0, vec![2], 0.7)]);
        let last = oracle.logits.last().unwrap();
        for (got, expected) in out.last_row(cfg.vocab_size).iter().zip(last) {
            assert!((*got as f64 - expected).abs() < ORACLE_TOL);
        }
    }
}

#[test]
fn distribution_matches_reference_softmax() {
    let cfg = tiny_config(2, 2, 16, 37);
    let m = random_model(&cfg, 77, 0.5, false).unwrap();
    let toks = tokens(37, 6, 2);
    let p = m.next_token_distribution(&toks, None).unwrap();
    let oracle = softmax(reference_forward(&cfg, m.weights(), &toks, &[]).logits.last().unwrap());
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for (a, b) in p.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn unit_lambda_is_bitwise_identity() {
    for (cfg, seed, untied) in configs() {
        let m = random_model(&cfg, seed, 0.5, untied).unwrap();
        let toks = tokens(cfg.vocab_size, 10, 3);
        let all: Vec<ScalingHookSpec> = (0..cfg.n_layers).map(|l| ScalingHookSpec::new(l, 0..10, 1.0)).collect();
        let plain = m.forward(&toks, None, true).unwrap();
        let hooked = m.forward(&toks, Some(&hooks(all)), true).unwrap();
        assert_eq!(plain.logits, hooked.logits);
        assert_eq!(plain.trace, hooked.trace);
    }
}

#[test]
fn scaled_row_mass_follows_lambda() {
    let cfg = tiny_config(2, 3, 12, 30);
    let m = random_model(&cfg, 9, 0.8, false).unwrap();
    let toks = tokens(30, 8, 4);
    let base = m.forward(&toks, None, true).unwrap().trace.unwrap();
    let targets = [1usize, 3, 5];
    for lambda in [0.9f32, 0.5, 0.1, 0.01] {
        let mut hk = hooks(vec![ScalingHookSpec::new(1, targets, lambda)]);
        let t = m.forward(&toks, Some(&hk), true).unwrap().trace.unwrap();
        for h in 0..cfg.n_heads {
            let s: f64 = targets.iter().map(|&j| base.get(1, h, j) as f64).sum();
            let expected = 1.0 - (1.0 - lambda as f64) * s;
            assert!((t.row_sum(1, h) as f64 - expected).abs() < 1e-5);
            for &j in &targets {
                let want = base.get(1, h, j) * lambda;
                assert!((t.get(1, h, j) - want).abs() < 1e-6);
            }
        }
        hk.renormalize_row = true;
        let t = m.forward(&toks, Some(&hk), true).unwrap().trace.unwrap();
        for h in 0..cfg.n_heads {
            assert!((t.row_sum(1, h) - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn small_lambda_changes_the_distribution() {
    let cfg = tiny_config(2, 2, 16, 40);
    let m = random_model(&cfg, 21, 0.8, true).unwrap();
    let toks = tokens(40, 8, 6);
    let base = m.next_token_distribution(&toks, None).unwrap();
    let hk = hooks(vec![ScalingHookSpec::new(0, [1, 2, 3], 0.01)]);
    let scaled = m.next_token_distribution(&toks, Some(&hk)).unwrap();
    let l1: f64 = base.iter().zip(&scaled).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 > 1e-4, "scaling had no effect (l1 = {l1})");
}

#[test]
fn earlier_positions_ignore_later_tokens() {
    let cfg = tiny_config(3, 2, 16, 40);
    let m = random_model(&cfg, 31, 0.5, false).unwrap();
    let toks = tokens(40, 10, 1);
    let opts = ForwardOptions { logit_rows: LogitRows::All, ..Default::default() };
    let base = m.forward_with(&toks, &opts).unwrap();
    for cut in [3usize, 6, 9] {
        let mut changed = toks.clone();
        changed[cut] = (changed[cut] + 13) % 40;
        let out = m.forward_with(&changed, &opts).unwrap();
        for i in 0..cut {
            for (a, b) in base.row(i, 40).iter().zip(out.row(i, 40)) {
                assert!((a - b).abs() <= 1e-6, "position {i} saw token {cut}");
            }
        }
        let moved = base.row(cut, 40).iter().zip(out.row(cut, 40)).any(|(a, b)| a != b);
        assert!(moved);
    }
}

#[test]
fn cached_decoding_matches_recompute() {
    for (cfg, seed, untied) in configs() {
        let m = random_model(&cfg, seed, 1.0, untied).unwrap();
        let prompt = tokens(cfg.vocab_size, 5, 8);
        let mut spec = ScalingHookSpec::new(0, [1, 3], 0.2);
        for during in [true, false] {
            spec.apply_during_generation = during;
            let hk = hooks(vec![spec.clone()]);
            for h in [None, Some(&hk)] {
                let fast = m.decode_greedy_with(&prompt, h, 12, true).unwrap();
                let slow = m.decode_greedy_with(&prompt, h, 12, false).unwrap();
                assert_eq!(fast, slow, "seed {seed}");
                assert_eq!(fast.tokens.len(), 12);
            }
        }
    }
}

#[test]
fn prefill_then_extend_matches_full_pass() {
    let cfg = tiny_config(3, 2, 16, 40);
    let m = random_model(&cfg, 41, 0.5, false).unwrap();
    let toks = tokens(40, 9, 7);
    let hk = hooks(vec![ScalingHookSpec::new(2, [0, 4], 0.1)]);
    let full = m.forward(&toks, Some(&hk), true).unwrap();
    let mut cache = m.prefill(&toks[..8]).unwrap();
    assert_eq!(cache.len(), 8);
    let step = m.extend(&mut cache, &toks[8..], Some(&hk), Some(8), true, LogitRows::Last).unwrap();
    for (a, b) in full.last_row(40).iter().zip(step.last_row(40)) {
        assert!((a - b).abs() < 1e-5);
    }
    let (ta, tb) = (full.trace.unwrap(), step.trace.unwrap());
    for l in 0..3 {
        for h in 0..2 {
            for j in 0..9 {
                assert!((ta.get(l, h, j) - tb.get(l, h, j)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn decoding_stops_at_context_and_honours_zero() {
    let cfg = tiny_config(1, 1, 8, 16);
    let m = random_model(&cfg, 5, 0.5, false).unwrap();
    let g = m.decode_greedy(&[1, 2, 3], None, 0).unwrap();
    assert!(g.tokens.is_empty() && !g.truncated);
    let g = m.decode_greedy(&[1; 60], None, 10).unwrap();
    assert!(g.truncated);
    assert_eq!(g.tokens.len(), 5);
    assert_eq!(m.decode_greedy(&[1, 2], None, 6).unwrap(), m.decode_greedy(&[1, 2], None, 6).unwrap());
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = tiny_config(2, 1, 8, 16);
    let m = random_model(&cfg, 5, 0.5, false).unwrap();
    assert!(matches!(m.forward(&[], None, false), Err(Error::EmptySequence)));
    assert!(matches!(m.forward(&[1, 16], None, false), Err(Error::TokenOutOfRange { id: 16, position: 1, .. })));
    assert!(matches!(m.forward(&[0; 65], None, false), Err(Error::ContextOverflow { len: 65, .. })));
    let bad_layer = hooks(vec![ScalingHookSpec::new(2, [0], 0.5)]);
    assert!(matches!(m.forward(&[1, 2], Some(&bad_layer), false), Err(Error::InvalidHook(_))));
    let bad_target = hooks(vec![ScalingHookSpec::new(0, [5], 0.5)]);
    assert!(matches!(m.forward(&[1, 2], Some(&bad_target), false), Err(Error::InvalidHook(_))));
}

#[test]
fn container_round_trip_preserves_outputs() {
    let cfg = tiny_config(2, 2, 8, 20);
    let m = random_model(&cfg, 12, 0.5, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    m.weights().to_store(&cfg).write(&path).unwrap();
    let loaded = Transformer::load(&path, cfg.clone()).unwrap();
    let toks = [3u32, 1, 4, 1, 5];
    assert_eq!(
        m.forward(&toks, None, true).unwrap().logits,
        loaded.forward(&toks, None, true).unwrap().logits
    );
}

#[test]
fn prefixed_names_load_and_missing_tensors_are_named() {
    let cfg = tiny_config(2, 2, 8, 20);
    let m = random_model(&cfg, 12, 0.5, false).unwrap();
    let store = m.weights().to_store(&cfg);
    let mut prefixed = TensorStore::default();
    for (name, t) in &store.tensors {
        prefixed.insert(format!("transformer.{name}"), t.shape.clone(), t.data.clone());
    }
    ModelWeights::from_store(prefixed, &cfg).unwrap();

    let mut missing = store.clone();
    missing.tensors.remove("h.1.mlp.c_fc.bias");
    match ModelWeights::from_store(missing, &cfg) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, "h.1.mlp.c_fc.bias"),
        other => panic!("expected a missing tensor error, got {other:?}"),
    }

    let mut wrong = store.clone();
    wrong.insert("ln_f.weight", vec![7], vec![1.0; 7]);
    assert!(matches!(ModelWeights::from_store(wrong, &cfg), Err(Error::ShapeMismatch { .. })));

    let mut nan = store;
    nan.tensors.get_mut("wpe.weight").unwrap().data[3] = f32::NAN;
    assert!(matches!(ModelWeights::from_store(nan, &cfg), Err(Error::NonFinite { index: 3, .. })));
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let m = uniform_model(&tiny_config(2, 2, 8, 50)).unwrap();
    let ppl = perplexity(&m, &[1, 7, 3, 9, 22, 0], None, None).unwrap();
    assert!((ppl - 50.0).abs() < 1e-6);
}

#[test]
fn successor_model_perplexity_is_near_one() {
    let seq = [3u32, 8, 1, 12, 5, 9];
    let m = successor_model(&seq, 16).unwrap();
    let ppl = perplexity(&m, &seq, None, None).unwrap();
    assert!((1.0..1.01).contains(&ppl), "ppl {ppl}");
}
