use std::collections::BTreeMap;

use kdlm_core::autodiff::Tape;
use kdlm_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use kdlm_core::data::{bptt_batches, encode, TokenStream, Vocabulary};
use kdlm_core::model::LmState;
use kdlm_core::rescore::align;
use kdlm_core::train::clip_global_norm;
use kdlm_core::{Bottleneck, DropoutSpec, LmModel, ModelConfig, RegContext, RunConfig, Tensor};
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        2usize..12,
        1usize..5,
        1usize..3,
        1usize..6,
        1usize..5,
        1usize..4,
        any::<bool>(),
        prop::option::of(1usize..5),
        any::<bool>(),
    )
        .prop_map(|(v, e, l, h, b, k, tie, ed, recurrent)| ModelConfig {
            vocab_size: v,
            embed_dim: e,
            lstm_layers: l,
            hidden_dim: h,
            bottleneck_dim: b,
            num_experts: k,
            // tying is only well-typed when the expert width equals the embedding
            tie_embeddings: tie && ed.is_none_or(|d| d == e),
            expert_dim: ed,
            bottleneck: if recurrent {
                Bottleneck::Recurrent
            } else {
                Bottleneck::Projection
            },
            dropout: DropoutSpec::default(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-1e4f64..1e4, 1..12), 1..6)) {
        let n = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let p = tape.softmax_rows(x).unwrap();
        let out = tape.value(p);
        for i in 0..rows.len() {
            let s: f64 = out.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", i, s);
            prop_assert!(out.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dp_edit_distance_is_a_metric_bound(a in prop::collection::vec(0u8..4, 0..7), b in prop::collection::vec(0u8..4, 0..7)) {
        let d = align(&a, &b);
        prop_assert_eq!(align(&a, &a).total(), 0);
        prop_assert_eq!(d.total(), align(&b, &a).total());
        prop_assert!(d.total() <= a.len().max(b.len()));
        prop_assert!(d.total() >= a.len().abs_diff(b.len()));
        // deletions minus insertions is fixed by the lengths
        prop_assert_eq!(a.len() as i64 - b.len() as i64, d.deletions as i64 - d.insertions as i64);
    }

    #[test]
    fn clipped_norm_bounded(g in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 0..8), 1..5), clip in 0.01f64..10.0) {
        let mut g = g;
        clip_global_norm(&mut g, clip);
        let post = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(post <= clip + 1e-12);
    }

    #[test]
    fn bptt_targets_are_successors(n in 3usize..200, batch in 1usize..5, steps in 1usize..9) {
        let stream = TokenStream { ids: (0..n).collect() };
        if let Ok(batches) = bptt_batches(&stream, batch, steps) {
            let lane_len = n / batch;
            for (k, bt) in batches.iter().enumerate() {
                for lane in 0..batch {
                    for t in 0..steps {
                        let x = bt.input(lane, t);
                        prop_assert_eq!(x, lane * lane_len + k * steps + t);
                        prop_assert_eq!(bt.target(lane, t), x + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn vocabulary_respects_cap(words in prop::collection::vec("[a-f]{1,2}", 1..60), cap in 4usize..20) {
        let line = words.join(" ");
        let v = Vocabulary::build(&[line.as_str()], cap, 0).unwrap();
        prop_assert!(v.capped_len() <= cap);
        prop_assert_eq!(v.len(), v.capped_len() + 3);
        let s = encode(&[line.as_str()], &v);
        prop_assert!(s.ids.iter().all(|&id| id < v.len()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn param_count_matches_allocation(cfg in config_strategy(), seed in any::<u64>()) {
        let m = LmModel::build(cfg.clone(), seed).unwrap();
        let allocated: usize = m.tensors().iter().map(Tensor::numel).sum();
        prop_assert_eq!(cfg.param_count(), allocated);
        let shapes: usize = cfg.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        prop_assert_eq!(shapes, allocated);
    }

    #[test]
    fn checkpoint_round_trip(cfg in config_strategy(), seed in any::<u64>()) {
        let m = LmModel::build(cfg, seed).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        prop_assert_eq!(encode_checkpoint(&back), encode_checkpoint(&m));
    }

    #[test]
    fn split_forward_equals_whole(cfg in config_strategy(), seed in any::<u64>(), split in 1usize..6) {
        let m = LmModel::build(cfg.clone(), seed).unwrap();
        let v = cfg.vocab_size;
        let tokens: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % v).collect();
        let zero = LmState::zeros(&cfg, 1);
        let (whole, whole_state) = m.predict(&tokens, 1, &zero).unwrap();
        let (a, mid) = m.predict(&tokens[..split], 1, &zero).unwrap();
        let (b, end) = m.predict(&tokens[split..], 1, &mid).unwrap();
        let joined: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in joined.iter().zip(whole.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for ((h1, c1), (h2, c2)) in end.layers.iter().zip(&whole_state.layers) {
            prop_assert_eq!(h1.data(), h2.data());
            prop_assert_eq!(c1.data(), c2.data());
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>()) {
        let cfg = ModelConfig {
            dropout: DropoutSpec { input_rate: 0.2, output_rate: 0.2, hidden_rate: 0.2, embed_rate: 0.1, other_rate: 0.2, ar_weight: 1.0, tar_weight: 1.0 },
            ..ModelConfig::default()
        };
        let m = LmModel::build(cfg.clone(), seed).unwrap();
        let tokens: Vec<usize> = (0..8).map(|i| (i * 3 + 1) % 10).collect();
        let targets: Vec<usize> = (0..8).map(|i| (i * 5 + 2) % 10).collect();
        let run = || {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, true).unwrap();
            let mut ctx = RegContext::train(seed);
            ctx.begin_sequence();
            let out = m.forward(&mut tape, &bound, &tokens, 2, &LmState::zeros(&cfg, 2), &mut ctx).unwrap();
            let ones = vec![1.0; targets.len()];
            let l = tape.weighted_nll(out.log_probs, &targets, &ones).unwrap();
            let g = tape.backward(l).unwrap();
            bound.vars.iter().zip(m.tensors())
                .flat_map(|(&v, t)| g.get_or_zeros(v, t.numel()))
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn config_keys_round_trip_through_text() {
    let mut c = RunConfig::default();
    let cfg_text = "hidden_dim = 6\nloss = fixed_interp\nalpha = 0.25\nensemble_seeds = 1, 2,3\n";
    c.apply_text(cfg_text).unwrap();
    let again = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(again, c);
    let seen: BTreeMap<_, _> = again.entries().into_iter().collect();
    assert_eq!(seen.len(), RunConfig::keys().len(), "keys are unique");
}
