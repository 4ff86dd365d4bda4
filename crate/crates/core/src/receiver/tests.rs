use rand::Rng;

use super::*;
use crate::autodiff::{grad_check_params, softmax_row};
use crate::rng::{normal_vec, rng_from_seed};
use crate::tokenizer::Modality;
use crate::train::TrainConfig;

fn small_config() -> MllmConfig {
    MllmConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        vocab: 5,
        max_len: 12,
        token_width: 2,
        ff_mult: 2,
        diffusion_steps: 10,
        head_hidden: 8,
        ..MllmConfig::default()
    }
}

fn random_sequence(rng: &mut impl Rng, len: usize, cfg: &MllmConfig) -> PackedSequence {
    let items = (0..len)
        .map(|_| {
            if rng.random_bool(0.5) {
                Item::Discrete(rng.random_range(0..cfg.vocab))
            } else {
                Item::Continuous(normal_vec(rng, cfg.token_width))
            }
        })
        .collect();
    PackedSequence::from_items(items, cfg.vocab, cfg.token_width).unwrap()
}

#[test]
fn pack_layout_and_round_trip() {
    let c = vec![vec![0.5, 1.0], vec![-1.0, 2.0], vec![0.0, 0.0]];
    let s = pack_tokens(&[3, 1], &c, 5, 2).unwrap();
    assert_eq!(s.len(), 5);
    use Modality::*;
    assert_eq!(
        s.modality_mask(),
        &[Discrete, Discrete, Continuous, Continuous, Continuous]
    );
    assert_eq!(s.unpack(), (vec![3, 1], c));
    let lm = pack_tokens(&[0, 1, 2], &[], 5, 2).unwrap();
    assert!(lm.modality_mask().iter().all(|m| *m == Discrete));
}

#[test]
fn pack_rejects_bad_tokens() {
    assert!(matches!(
        pack_tokens(&[5], &[], 5, 2),
        Err(Error::TokenOutOfRange { id: 5, vocab: 5 })
    ));
    assert!(pack_tokens(&[], &[vec![1.0]], 5, 2).is_err());
}

#[test]
fn causality_under_perturbation() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 1).unwrap();
    let mut rng = rng_from_seed(2);
    for _ in 0..100 {
        let len = rng.random_range(2..=cfg.max_len);
        let seq = random_sequence(&mut rng, len, &cfg);
        let j = rng.random_range(1..len);
        let mut items = seq.items().to_vec();
        items[j] = match &items[j] {
            Item::Discrete(id) => Item::Discrete((id + 1) % cfg.vocab),
            Item::Continuous(v) => Item::Continuous(v.iter().map(|x| x + 1.0).collect()),
        };
        let other = PackedSequence::from_items(items, cfg.vocab, cfg.token_width).unwrap();
        let (a, b) = (
            rx.transformer_forward(&seq).unwrap(),
            rx.transformer_forward(&other).unwrap(),
        );
        for i in 0..j {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(
                bits(&a[i]),
                bits(&b[i]),
                "position {i} changed by perturbing {j}"
            );
        }
        assert_ne!(a[j], b[j]);
    }
}

#[test]
fn batched_forward_matches_single() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 1).unwrap();
    let mut rng = rng_from_seed(3);
    let seqs: Vec<PackedSequence> = (0..3)
        .map(|k| random_sequence(&mut rng, 3 + k, &cfg))
        .collect();
    let refs: Vec<&PackedSequence> = seqs.iter().collect();
    let last = rx.last_hidden(&refs).unwrap();
    for (s, h) in seqs.iter().zip(&last) {
        assert_eq!(rx.transformer_forward(s).unwrap().last().unwrap(), h);
    }
}

#[test]
fn zero_layers_is_normalized_embedding() {
    let cfg = MllmConfig {
        layers: 0,
        ..small_config()
    };
    let rx = Receiver::new(cfg.clone(), 4).unwrap();
    let seq = random_sequence(&mut rng_from_seed(5), 6, &cfg);
    for h in rx.transformer_forward(&seq).unwrap() {
        let n = h.len() as f64;
        let mean = h.iter().sum::<f64>() / n;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn forward_is_deterministic_and_checks_length() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 1).unwrap();
    let seq = random_sequence(&mut rng_from_seed(6), 5, &cfg);
    assert_eq!(
        rx.transformer_forward(&seq).unwrap(),
        rx.transformer_forward(&seq).unwrap()
    );
    assert_eq!(Receiver::new(cfg.clone(), 1).unwrap(), rx);
    let long = random_sequence(&mut rng_from_seed(6), cfg.max_len + 1, &cfg);
    assert!(matches!(
        rx.transformer_forward(&long),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn lm_head_examples() {
    let mut rx = Receiver::new(small_config(), 1).unwrap();
    rx.lm_head_weight_mut().data_mut().fill(0.0);
    let p = rx.lm_probs(&[0.3; 8]).unwrap();
    assert!(p.iter().all(|v| *v == 0.2));
    assert_eq!(softmax_row(&[0.0; 4]), vec![0.25; 4]);
    let logits = [0.3, -1.2, 2.0, 0.7];
    let shifted: Vec<f64> = logits.iter().map(|v| v + 123.4).collect();
    for (a, b) in softmax_row(&logits).iter().zip(softmax_row(&shifted)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sampling_strategies() {
    let probs = [0.1, 0.7, 0.2];
    let mut rng = rng_from_seed(7);
    assert_eq!(
        sample_token(&probs, TokenStrategy::Greedy, &mut rng).unwrap(),
        1
    );
    assert_eq!(
        sample_token(&[0.4, 0.4, 0.2], TokenStrategy::Greedy, &mut rng).unwrap(),
        0
    );
    for _ in 0..200 {
        assert_eq!(
            sample_token(&probs, TokenStrategy::TopP { p: 0.6 }, &mut rng).unwrap(),
            1
        );
    }
    for p in [0.0, 1.5, -0.1] {
        assert!(sample_token(&probs, TokenStrategy::TopP { p }, &mut rng).is_err());
    }
    assert!(sample_token(&probs, TokenStrategy::Temperature { tau: 0.0 }, &mut rng).is_err());
}

#[test]
fn full_nucleus_matches_distribution() {
    let probs = [0.1, 0.7, 0.2];
    let mut rng = rng_from_seed(8);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_token(&probs, TokenStrategy::TopP { p: 1.0 }, &mut rng).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        assert!((*c as f64 / n as f64 - p).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn lm_loss_with_zero_head_is_ln_v() {
    let cfg = MllmConfig {
        vocab: 4,
        ..small_config()
    };
    let mut rx = Receiver::new(cfg, 1).unwrap();
    rx.lm_head_weight_mut().data_mut().fill(0.0);
    let seq = pack_tokens(&[0, 1, 2, 3, 0], &[], 4, 2).unwrap();
    let l = rx.lm_loss(&seq, 0).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let cont = pack_tokens(&[], &vec![vec![0.0; 2]; 3], 4, 2).unwrap();
    assert!(rx.lm_loss(&cont, 0).is_err());
}

#[test]
fn lm_loss_matches_independent_sum() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 3).unwrap();
    let mut rng = rng_from_seed(9);
    for _ in 0..10 {
        let seq = random_sequence(&mut rng, 10, &cfg);
        let start = rng.random_range(0..4);
        let hs = rx.transformer_forward(&seq).unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for i in start.max(1)..seq.len() {
            if let Item::Discrete(id) = seq.items()[i] {
                sum -= rx.lm_probs(&hs[i - 1]).unwrap()[id].ln();
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let l = rx.lm_loss(&seq, start).unwrap();
        assert!((l * count as f64 - sum).abs() < 1e-10);
    }
}

#[test]
fn schedule_products() {
    let s = DiffusionSchedule::new(vec![0.1, 0.2]).unwrap();
    assert_eq!(s.omegas(), &[0.9, 0.9 * 0.8]);
    assert!((s.omega(2) - 0.72).abs() < 1e-15);
    let s = DiffusionSchedule::linear(200, 0.05, 0.05).unwrap();
    assert!(s.omega(200) < 4e-5);
    assert!(s.omegas().windows(2).all(|w| w[1] < w[0]));
    assert!(DiffusionSchedule::new(vec![0.0]).is_err());
    assert!(DiffusionSchedule::new(vec![]).is_err());
}

#[test]
fn forward_noising_examples() {
    let s = DiffusionSchedule::new(vec![0.19]).unwrap();
    let c = diffusion_forward_with(&[1.0], 1, &s, &[0.0]).unwrap();
    assert!((c[0] - 0.9).abs() < 1e-15);
    assert!(diffusion_forward_with(&[1.0], 2, &s, &[0.0]).is_err());
    assert!(diffusion_forward(&[1.0], 0, &s, &mut rng_from_seed(0)).is_err());
}

#[test]
fn forward_noising_variance() {
    let s = DiffusionSchedule::linear(20, 0.02, 0.2).unwrap();
    let mut rng = rng_from_seed(10);
    for r in [1, 7, 20] {
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let c0 = normal_vec(&mut rng, 1);
                diffusion_forward(&c0, r, &s, &mut rng).unwrap().0[0]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let want = s.omega(r) + (1.0 - s.omega(r));
        assert!((var / want - 1.0).abs() < 0.02, "r={r} var={var}");
    }
}

#[test]
fn one_step_inversion_is_exact() {
    let s = DiffusionSchedule::linear(50, 0.02, 0.1).unwrap();
    let mut rng = rng_from_seed(11);
    for r in 1..=50 {
        let c0 = normal_vec(&mut rng, 4);
        let (cr, eps) = diffusion_forward(&c0, r, &s, &mut rng).unwrap();
        let back = predict_x0(&cr, &eps, r, &s).unwrap();
        for (a, b) in c0.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_step_oracle_sampler_recovers_c0() {
    let s = DiffusionSchedule::new(vec![0.3]).unwrap();
    let c0 = [0.7, -1.1];
    let eps = [0.4, 0.2];
    let c1 = diffusion_forward_with(&c0, 1, &s, &eps).unwrap();
    let x0 = predict_x0(&c1, &eps, 1, &s).unwrap();
    for (a, b) in c0.iter().zip(&x0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stub_heads_give_known_losses() {
    let s = DiffusionSchedule::linear(50, 0.02, 0.1).unwrap();
    let mut rng = rng_from_seed(12);
    let n = 100_000;
    let mut zero = 0.0;
    for _ in 0..n {
        let c0 = normal_vec(&mut rng, 1);
        zero += diffusion_loss_with(&c0, &s, &mut rng, |c, _| Ok(vec![0.0; c.len()])).unwrap();
    }
    let zero = zero / n as f64;
    assert!((zero - 1.0).abs() < 0.02, "{zero}");

    let c0 = [0.3, -0.2];
    let oracle = diffusion_loss_with(&c0, &s, &mut rng, |c, r| {
        let w = s.omega(r);
        Ok(c.iter()
            .zip(&c0)
            .map(|(c, x)| (c - w.sqrt() * x) / (1.0 - w).sqrt())
            .collect())
    })
    .unwrap();
    assert!(oracle < 1e-20);
}

#[test]
fn deterministic_sampling_is_repeatable() {
    let rx = Receiver::new(small_config(), 1).unwrap();
    let h = vec![0.1; 8];
    let a = rx
        .diffusion_sample(&h, SamplingNoise::Deterministic, &mut rng_from_seed(1))
        .unwrap();
    let b = rx
        .diffusion_sample(&h, SamplingNoise::Deterministic, &mut rng_from_seed(2))
        .unwrap();
    assert_eq!(a, b);
    let c = rx
        .diffusion_sample(&h, SamplingNoise::Ancestral, &mut rng_from_seed(1))
        .unwrap();
    assert_eq!(c.len(), 2);
    assert!(c.iter().all(|v| v.is_finite()));
}

fn mixed_batch(cfg: &MllmConfig, seed: u64) -> Vec<TrainingSequence> {
    let mut rng = rng_from_seed(seed);
    (0..2)
        .map(|_| {
            let mut items: Vec<Item> = (0..3)
                .map(|_| Item::Discrete(rng.random_range(0..cfg.vocab)))
                .collect();
            items.push(Item::Continuous(normal_vec(&mut rng, cfg.token_width)));
            items.push(Item::Discrete(rng.random_range(0..cfg.vocab)));
            items.push(Item::Continuous(normal_vec(&mut rng, cfg.token_width)));
            TrainingSequence::new(
                PackedSequence::from_items(items, cfg.vocab, cfg.token_width).unwrap(),
                1,
            )
        })
        .collect()
}

#[test]
fn receiver_loss_gradients_match_finite_differences() {
    let cfg = MllmConfig {
        hidden: 4,
        head_hidden: 4,
        ff_mult: 1,
        layers: 1,
        ..small_config()
    };
    for seed in 0..3 {
        let rx = Receiver::new(cfg.clone(), seed).unwrap();
        let batch = mixed_batch(&cfg, 100 + seed);
        let draws = rx.sample_draws(&batch, &mut rng_from_seed(seed));
        for head in ["lm", "diff", "total"] {
            let err = grad_check_params(
                |g, b| {
                    let v = rx.loss_graph(g, &b[0], &batch, &draws)?;
                    Ok(match head {
                        "lm" => v.lm.unwrap(),
                        "diff" => v.diff.unwrap(),
                        _ => v.total,
                    })
                },
                &[&rx.params],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{head}: relative error {err}");
        }
    }
}

#[test]
fn both_heads_reach_the_trunk() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 1).unwrap();
    let batch = mixed_batch(&cfg, 5);
    let draws = rx.sample_draws(&batch, &mut rng_from_seed(1));
    for which in [0, 1] {
        let mut g = Graph::new();
        let p = rx.params.bind(&mut g);
        let v = rx.loss_graph(&mut g, &p, &batch, &draws).unwrap();
        let loss = if which == 0 {
            v.lm.unwrap()
        } else {
            v.diff.unwrap()
        };
        let grads = g.backward(loss).unwrap();
        let mut store = rx.params.clone();
        store.accumulate(&p, &grads).unwrap();
        let trunk = store
            .iter()
            .find(|(_, name, _)| *name == "rx.block0.query.weight")
            .map(|(_, _, t)| t.grad().unwrap().iter().map(|x| x.abs()).sum::<f64>())
            .unwrap();
        assert!(trunk > 0.0, "head {which} left the trunk without gradient");
    }
}

#[test]
fn empty_plan_returns_prefix() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 1).unwrap();
    let prefix = random_sequence(&mut rng_from_seed(1), 4, &cfg);
    let out = rx
        .generate(
            &prefix,
            &[],
            GenerationOptions::default(),
            &mut rng_from_seed(0),
            None,
        )
        .unwrap();
    assert_eq!(out, prefix);
}

#[test]
fn greedy_deterministic_generation() {
    let cfg = small_config();
    let rx = Receiver::new(cfg.clone(), 1).unwrap();
    let prefix = random_sequence(&mut rng_from_seed(1), 4, &cfg);
    let plan = [Modality::Discrete, Modality::Continuous, Modality::Discrete];
    let opts = GenerationOptions {
        strategy: TokenStrategy::Greedy,
        noise: SamplingNoise::Deterministic,
    };
    let mut transcript = Vec::new();
    let a = rx
        .generate(
            &prefix,
            &plan,
            opts,
            &mut rng_from_seed(1),
            Some(&mut transcript),
        )
        .unwrap();
    let b = rx
        .generate(&prefix, &plan, opts, &mut rng_from_seed(2), None)
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 7);
    assert_eq!(&a.modality_mask()[4..], &plan);
    assert_eq!(transcript.len(), 3);
    assert_eq!(transcript[0].position, 4);
    assert!(transcript[0].nll.unwrap() >= 0.0);
    assert_eq!(transcript[1].diffusion_steps, Some(10));
    let mut buf = Vec::new();
    TranscriptRecord::write_jsonl(&transcript, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);

    let too_long = vec![Modality::Discrete; cfg.max_len];
    assert!(rx
        .generate(&prefix, &too_long, opts, &mut rng_from_seed(0), None)
        .is_err());
}

#[test]
fn learns_a_short_copy_task() {
    let cfg = MllmConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        vocab: 4,
        max_len: 8,
        token_width: 1,
        ff_mult: 2,
        head_hidden: 8,
        ..MllmConfig::default()
    };
    let mut rx = Receiver::new(cfg.clone(), 3).unwrap();
    let mut rng = rng_from_seed(4);
    let data: Vec<Vec<usize>> = (0..256)
        .map(|_| (0..3).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let seq = |ids: &[usize]| {
        let all: Vec<usize> = ids.iter().chain(ids).copied().collect();
        pack_tokens(&all, &[], 4, 1).unwrap()
    };
    let train = TrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 1e-2,
        weight_decay: 0.0,
    };
    let trace = train_receiver(
        &mut rx,
        data.len(),
        &train,
        &crate::rng::SeedTree::new(1),
        |idx, _| {
            Ok(idx
                .iter()
                .map(|&i| TrainingSequence::new(seq(&data[i]), 3))
                .collect())
        },
    )
    .unwrap();
    let last = trace.last().unwrap().lm.unwrap();
    assert!(last < 0.1, "final lm loss {last}");
}
