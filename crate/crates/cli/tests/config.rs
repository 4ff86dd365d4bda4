use std::path::Path;

use tokcom::Modality;
use tokcom_cli::config::parse_list;
use tokcom_cli::ExperimentConfig;

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(name),
    )
    .unwrap()
}

#[test]
fn shipped_configs_load() {
    let copy = shipped("copy.toml");
    assert_eq!(copy.modality(), Modality::Discrete);
    assert_eq!(
        (
            copy.tokenizer.alphabet,
            copy.tokenizer.input_len,
            copy.tokenizer.tokens
        ),
        (16, 12, 8)
    );
    assert_eq!(copy.sweep_seeds(), vec![1, 2, 3]);
    let signal = shipped("signal.toml");
    assert_eq!(signal.modality(), Modality::Continuous);
    assert_eq!(signal.eval.lengths, vec![2, 8, 16, 32]);
    shipped("variance.toml");
}

#[test]
fn toml_round_trip_keeps_the_hash() {
    for name in ["copy.toml", "signal.toml", "variance.toml"] {
        let cfg = shipped(name);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }
}

#[test]
fn hash_tracks_every_field() {
    let cfg = shipped("copy.toml");
    let mut other = cfg.clone();
    other.train.receiver.lr *= 2.0;
    assert_ne!(other.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.channel.snr_list.pop();
    assert_ne!(other.hash(), cfg.hash());
}

#[test]
fn validation_rejects_inconsistent_shapes() {
    let cfg = shipped("copy.toml");
    let text = cfg.to_toml();
    for (from, to) in [
        ("alphabet = 16\nlength = 12", "alphabet = 16\nlength = 11"),
        ("max_len = 24", "max_len = 20"),
    ] {
        assert!(text.contains(from), "{from}");
        assert!(
            ExperimentConfig::from_toml(&text.replacen(from, to, 1)).is_err(),
            "{to}"
        );
    }
    let mut wide = cfg.clone();
    wide.receiver.token_width = 3;
    assert!(ExperimentConfig::from_toml(&wide.to_toml()).is_err());
}

#[test]
fn lists_parse_with_infinity() {
    assert_eq!(
        parse_list::<f64>("0, 5,inf").unwrap(),
        vec![0.0, 5.0, f64::INFINITY]
    );
    assert_eq!(parse_list::<usize>("2,8").unwrap(), vec![2, 8]);
    assert!(parse_list::<usize>("2,x").is_err());
}
