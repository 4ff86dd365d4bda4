use super::*;
use crate::autodiff::grad_check_params;
use crate::channel::{ChannelKind, CoderConfig};
use crate::rng::normal_vec;
use crate::train::TrainConfig;

fn continuous_data(n: usize, dim: usize, seed: u64) -> Vec<SourceSample> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| SourceSample::continuous(normal_vec(&mut rng, dim)))
        .collect()
}

fn discrete_data(n: usize, len: usize, alphabet: usize, seed: u64) -> Vec<SourceSample> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| SourceSample::discrete((0..len).map(|_| rng.random_range(0..alphabet)).collect()))
        .collect()
}

#[test]
fn kl_examples() {
    assert_eq!(kl_to_standard_normal(&[0.0; 3], &[1.0; 3]).unwrap(), 0.0);
    assert_eq!(kl_to_standard_normal(&[1.0; 4], &[1.0; 4]).unwrap(), 2.0);
    let e = std::f64::consts::E;
    let kl = kl_to_standard_normal(&[0.0], &[e.sqrt()]).unwrap();
    assert!((kl - (e - 2.0) / 2.0).abs() < 1e-12);
    assert!((kl - 0.35914).abs() < 1e-5);
}

#[test]
fn kl_rejects_nonpositive_sigma() {
    assert!(kl_to_standard_normal(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(kl_to_standard_normal(&[0.0], &[-1.0]).is_err());
    assert!(kl_to_standard_normal(&[0.0], &[1.0, 1.0]).is_err());
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = rng_from_seed(11);
    for _ in 0..5 {
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..4).map(|_| rng.random_range(0.3..2.0)).collect();
        let exact = kl_to_standard_normal(&mu, &sigma).unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for ((m, s), e) in mu.iter().zip(&sigma).zip(normal_vec(&mut rng, 4)) {
                let t = m + s * e;
                // log N(t; m, s²) − log N(t; 0, 1)
                acc += -s.ln() - 0.5 * e * e + 0.5 * t * t;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }
}

#[test]
fn reparameterize_with_zero_sigma_returns_mu() {
    let mu = vec![0.5, -1.0, 2.0];
    let ts = reparameterize(&mu, &[0.0; 3], &mut rng_from_seed(0), 5).unwrap();
    assert_eq!(ts.len(), 5);
    assert!(ts.iter().all(|t| *t == mu));
    assert!(reparameterize(&mu, &[1.0; 3], &mut rng_from_seed(0), 0).is_err());
}

#[test]
fn reparameterize_moments() {
    let ts = reparameterize(&[0.0; 3], &[1.0; 3], &mut rng_from_seed(1), 100_000).unwrap();
    for d in 0..3 {
        let n = ts.len() as f64;
        let mean = ts.iter().map(|t| t[d]).sum::<f64>() / n;
        let std = (ts.iter().map(|t| (t[d] - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.98..=1.02).contains(&std), "std {std}");
    }
}

#[test]
fn sigma_policy() {
    let tok = Tokenizer::new(TokenizerConfig::continuous(16, 32), 3).unwrap();
    assert!(tok.sigma().iter().all(|s| *s >= SIGMA_FLOOR));
    let again = Tokenizer::new(TokenizerConfig::continuous(16, 32), 3).unwrap();
    assert_eq!(tok.sigma(), again.sigma());
    assert_eq!(tok.sigma_seed(), again.sigma_seed());
    let cfg = TokenizerConfig {
        sigma_mode: SigmaMode::Constant,
        c_sigma: 0.09,
        ..TokenizerConfig::continuous(16, 4)
    };
    assert_eq!(Tokenizer::new(cfg, 3).unwrap().sigma(), &[0.3; 4]);
}

#[test]
fn encode_shape_and_determinism() {
    let tok = Tokenizer::new(TokenizerConfig::continuous(16, 4), 1).unwrap();
    let x = &continuous_data(1, 16, 2)[0];
    let a = tok.encode(x).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, tok.encode(x).unwrap());
    assert!(tok
        .encode(&SourceSample::continuous(vec![0.0; 15]))
        .is_err());
    assert!(tok.encode(&SourceSample::discrete(vec![0; 16])).is_err());
}

#[test]
fn zero_final_projection_gives_zero_mu() {
    let mut tok = Tokenizer::new(TokenizerConfig::continuous(16, 4), 1).unwrap();
    let last = tok.encoder().layers.last().unwrap().clone();
    tok.params.get_mut(last.weight).data_mut().fill(0.0);
    for x in continuous_data(5, 16, 3) {
        assert_eq!(tok.encode(&x).unwrap(), vec![0.0; 4]);
    }
}

#[test]
fn discrete_ids_are_validated() {
    let tok = Tokenizer::new(TokenizerConfig::discrete(6, 8, 4), 1).unwrap();
    let err = tok
        .encode(&SourceSample::discrete(vec![0, 1, 2, 3, 4, 8]))
        .unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { id: 8, vocab: 8 }));
}

#[test]
fn decode_shapes() {
    let tok = Tokenizer::new(TokenizerConfig::continuous(16, 4), 1).unwrap();
    match tok.decode(&[0.1, 0.2, 0.3, 0.4]).unwrap() {
        Reconstruction::Continuous(v) => assert_eq!(v.len(), 16),
        other => panic!("{other:?}"),
    }
    assert!(tok.decode(&[0.0; 3]).is_err());

    let tok = Tokenizer::new(TokenizerConfig::discrete(6, 8, 4), 1).unwrap();
    let r = tok.decode(&[0.1, 0.2, 0.3, 0.4]).unwrap();
    let Reconstruction::Logits {
        len,
        alphabet,
        data,
    } = &r
    else {
        panic!()
    };
    assert_eq!((*len, *alphabet, data.len()), (6, 8, 48));
    assert_eq!(r.ids().unwrap().len(), 6);
    assert_eq!(r, tok.decode(&[0.1, 0.2, 0.3, 0.4]).unwrap());
}

#[test]
fn argmax_ties_go_to_lowest_id() {
    let r = Reconstruction::Logits {
        len: 2,
        alphabet: 3,
        data: vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0],
    };
    assert_eq!(r.ids().unwrap(), vec![0, 1]);
}

#[test]
fn zero_eps_makes_lambda_irrelevant() {
    let data = continuous_data(6, 8, 4);
    for lambda_pair in [(0.0, 1.0), (0.0, 0.5)] {
        let mk = |lambda| {
            let cfg = TokenizerConfig {
                lambda,
                samples: 1,
                ..TokenizerConfig::continuous(8, 4)
            };
            Tokenizer::new(cfg, 9).unwrap()
        };
        let (a, b) = (mk(lambda_pair.0), mk(lambda_pair.1));
        let draws = NoiseDraws::zeros(1, 6, a.sigma().to_vec());
        let la = a
            .sigma_genib_loss(&data, &draws, &LossChannel::Identity)
            .unwrap();
        let lb = b
            .sigma_genib_loss(&data, &draws, &LossChannel::Identity)
            .unwrap();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
        assert_eq!(la.stochastic.to_bits(), la.deterministic.to_bits());
        let kl = a.xi_kl(&data);
        assert_eq!(la.total, kl + la.deterministic);
    }
}

impl Tokenizer {
    fn xi_kl(&self, data: &[SourceSample]) -> f64 {
        let mus = self.encode_batch(data).unwrap();
        let kl: f64 = mus
            .iter()
            .map(|m| kl_to_standard_normal(m, self.sigma()).unwrap())
            .sum::<f64>()
            / mus.len() as f64;
        self.config.xi * kl
    }
}

#[test]
fn perfect_decoder_with_no_rate_term_gives_zero_loss() {
    let cfg = TokenizerConfig {
        xi: 0.0,
        linear: true,
        ..TokenizerConfig::continuous(4, 4)
    };
    let mut tok = Tokenizer::new(cfg, 0).unwrap();
    for mlp in [tok.encoder().clone(), tok.decoder().clone()] {
        let l = &mlp.layers[0];
        let w = tok.params.get_mut(l.weight).data_mut();
        w.fill(0.0);
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
    }
    let data = continuous_data(3, 4, 1);
    let draws = NoiseDraws::zeros(4, 3, tok.sigma().to_vec());
    let l = tok
        .sigma_genib_loss(&data, &draws, &LossChannel::Identity)
        .unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn monte_carlo_variance_shrinks_with_k() {
    let tok = Tokenizer::new(TokenizerConfig::continuous(8, 4), 5).unwrap();
    let data = continuous_data(1, 8, 6);
    let variance = |k: usize| {
        let vals: Vec<f64> = (0..200)
            .map(|s| {
                let draws =
                    NoiseDraws::sample(&mut rng_from_seed(1000 + s), k, 1, tok.sigma().to_vec());
                tok.sigma_genib_loss(&data, &draws, &LossChannel::Identity)
                    .unwrap()
                    .stochastic
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let (v1, v16, v256) = (variance(1), variance(16), variance(256));
    let r1 = v1 / v16;
    let r2 = v16 / v256;
    assert!((8.0..=32.0).contains(&r1), "var ratio K=1/K=16: {r1}");
    assert!((8.0..=32.0).contains(&r2), "var ratio K=16/K=256: {r2}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for (cfg, data) in [
        (
            TokenizerConfig {
                hidden: Some(6),
                ..TokenizerConfig::continuous(5, 3)
            },
            continuous_data(3, 5, 1),
        ),
        (
            TokenizerConfig {
                hidden: Some(6),
                ..TokenizerConfig::discrete(3, 4, 2)
            },
            discrete_data(3, 3, 4, 2),
        ),
        (
            TokenizerConfig {
                hidden: Some(6),
                variance: VarianceMode::Learned,
                ..TokenizerConfig::continuous(5, 3)
            },
            continuous_data(3, 5, 3),
        ),
    ] {
        let tok = Tokenizer::new(cfg, 4).unwrap();
        let draws = tok.noise_draws(3, &mut rng_from_seed(8));
        let refs: Vec<&SourceSample> = data.iter().collect();
        let err = grad_check_params(
            |g, b| {
                Ok(tok
                    .loss_graph(g, &b[0], &refs, &draws, &IdentityChannel)?
                    .total)
            },
            &[&tok.params],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn loss_gradient_through_coded_channel() {
    let tok = Tokenizer::new(
        TokenizerConfig {
            hidden: Some(6),
            ..TokenizerConfig::continuous(5, 4)
        },
        4,
    )
    .unwrap();
    let coder = Coder::new(CoderConfig::new(4, 1.5), &mut rng_from_seed(2)).unwrap();
    let data = continuous_data(2, 5, 1);
    let refs: Vec<&SourceSample> = data.iter().collect();
    let sched = ChannelSchedule {
        kind: ChannelKind::Rayleigh,
        snr_db: (5.0, 15.0),
    };
    let frames = sched.draw_frames(2, &coder, &mut rng_from_seed(3));
    let draws = tok.noise_draws(2, &mut rng_from_seed(8));
    let err = grad_check_params(
        |g, b| {
            let chan = CodedChannel::new(&coder, b[1].clone(), frames.clone());
            Ok(tok.loss_graph(g, &b[0], &refs, &draws, &chan)?.total)
        },
        &[&tok.params, &coder.params],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn training_is_deterministic_and_leaves_sigma_alone() {
    let data = continuous_data(8, 8, 1);
    let train = TrainConfig {
        epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let run = || {
        let mut tok = Tokenizer::new(TokenizerConfig::continuous(8, 4), 2).unwrap();
        let mut coder = Coder::new(CoderConfig::new(4, 2.0), &mut rng_from_seed(3)).unwrap();
        let sched = ChannelSchedule {
            kind: ChannelKind::Rayleigh,
            snr_db: (0.0, 20.0),
        };
        let trace = train_tokenizer(
            &mut tok,
            Some((&mut coder, sched)),
            &data,
            &train,
            &SeedTree::new(7),
        )
        .unwrap();
        (tok, coder, trace)
    };
    let (a, ca, ta) = run();
    let (b, cb, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(ta, tb);
    let fresh = Tokenizer::new(TokenizerConfig::continuous(8, 4), 2).unwrap();
    assert_ne!(a.params, fresh.params);
    let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.sigma()), bits(fresh.sigma()));
}

#[test]
fn identity_toy_task_learns() {
    let cfg = TokenizerConfig {
        linear: true,
        lambda: 0.0,
        ..TokenizerConfig::continuous(4, 4)
    };
    let mut tok = Tokenizer::new(cfg, 1).unwrap();
    let data = continuous_data(64, 4, 2);
    let train = TrainConfig {
        epochs: 200,
        batch_size: 16,
        lr: 1e-2,
        weight_decay: 0.0,
    };
    train_tokenizer(&mut tok, None, &data, &train, &SeedTree::new(3)).unwrap();
    let mus = tok.encode_batch(&data).unwrap();
    let recon = tok.decode_batch(&mus).unwrap();
    let mut err = 0.0;
    for (x, r) in data.iter().zip(&recon) {
        let (Payload::Continuous(x), Reconstruction::Continuous(r)) = (&x.payload, r) else {
            panic!()
        };
        err += x.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
    }
    let mse = err / data.len() as f64;
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn lambda_endpoints_give_identical_traces_with_zero_eps() {
    let data = discrete_data(12, 4, 5, 3);
    let train = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = |lambda| {
        let cfg = TokenizerConfig {
            lambda,
            zero_eps: true,
            ..TokenizerConfig::discrete(4, 5, 4)
        };
        let mut tok = Tokenizer::new(cfg, 1).unwrap();
        let mut coder = Coder::new(CoderConfig::new(4, 2.0), &mut rng_from_seed(3)).unwrap();
        let sched = ChannelSchedule {
            kind: ChannelKind::Rayleigh,
            snr_db: (5.0, 15.0),
        };
        let trace = train_tokenizer(
            &mut tok,
            Some((&mut coder, sched)),
            &data,
            &train,
            &SeedTree::new(2),
        )
        .unwrap();
        (trace, tok.params)
    };
    let (t0, p0) = run(0.0);
    let (t1, p1) = run(1.0);
    assert_eq!(t0, t1);
    assert_eq!(p0, p1);
}

#[test]
fn divergence_aborts_with_epoch() {
    let mut tok = Tokenizer::new(TokenizerConfig::continuous(4, 2), 1).unwrap();
    let data: Vec<SourceSample> = (0..4)
        .map(|i| SourceSample::continuous(vec![1e4 * i as f64; 4]))
        .collect();
    let train = TrainConfig {
        epochs: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let err = train_tokenizer(&mut tok, None, &data, &train, &SeedTree::new(1)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
}

#[test]
fn empty_dataset_rejected() {
    let mut tok = Tokenizer::new(TokenizerConfig::continuous(4, 2), 1).unwrap();
    assert!(train_tokenizer(
        &mut tok,
        None,
        &[],
        &TrainConfig::default(),
        &SeedTree::new(1)
    )
    .is_err());
    assert!(variance_profile(&tok, &[]).is_err());
}

#[test]
fn variance_profile_basics() {
    let tok = Tokenizer::new(TokenizerConfig::continuous(8, 4), 1).unwrap();
    let same = vec![SourceSample::continuous(vec![0.3; 8]); 10];
    let p = variance_profile(&tok, &same).unwrap();
    assert_eq!(p.mu_std, vec![0.0; 4]);
    assert_eq!(p.collapsed, 0);
    assert!(!p.learned);
    assert_eq!(p.sigma, tok.sigma());

    let vae = Tokenizer::new(
        TokenizerConfig {
            variance: VarianceMode::Learned,
            ..TokenizerConfig::continuous(8, 4)
        },
        1,
    )
    .unwrap();
    let p = variance_profile(&vae, &continuous_data(10, 8, 1)).unwrap();
    assert!(p.learned);
    assert_eq!(p.sigma.len(), 4);
    assert!(p.sigma.iter().all(|s| *s > 0.0));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = TokenizerConfig {
        hidden: Some(12),
        sigma_mode: SigmaMode::Redraw,
        ..TokenizerConfig::discrete(6, 8, 3)
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TokenizerConfig>(&text).unwrap(), cfg);
    assert!(serde_json::from_str::<TokenizerConfig>(r#"{"tokenz": 3}"#).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let tok = Tokenizer::new(TokenizerConfig::discrete(6, 8, 3), 5).unwrap();
    let text = serde_json::to_string(&tok).unwrap();
    let back: Tokenizer = serde_json::from_str(&text).unwrap();
    assert_eq!(back, tok);
}
