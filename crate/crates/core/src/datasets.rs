//! Seeded synthetic sources and train/test splitting.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, rng_from_seed};
use crate::tokenizer::{Payload, SourceSample};

/// Number of states of the built-in Markov grammar.
pub const GRAMMAR_STATES: usize = 8;

/// Row-stochastic transition matrix of the Markov grammar source. Each state
/// has two or three likely successors so that the next-token entropy sits
/// well below `ln 8`.
pub const GRAMMAR_TRANSITIONS: [[f64; GRAMMAR_STATES]; GRAMMAR_STATES] = [
    [0.0, 0.7, 0.2, 0.0, 0.0, 0.0, 0.0, 0.1],
    [0.0, 0.0, 0.6, 0.3, 0.0, 0.0, 0.1, 0.0],
    [0.1, 0.0, 0.0, 0.8, 0.1, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0],
    [0.3, 0.0, 0.0, 0.0, 0.0, 0.6, 0.1, 0.0],
    [0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.8, 0.0],
    [0.0, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0, 0.7],
    [0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Uniform random id sequences.
    Copy { alphabet: usize, length: usize },
    /// Sequences drawn from [`GRAMMAR_TRANSITIONS`], first state uniform.
    MarkovGrammar { length: usize },
    /// Each sample picks a component `k` by `weights`, then every coordinate
    /// is `means[k] + stds[k] * N(0, 1)`.
    GaussianMixturePatches {
        dim: usize,
        means: Vec<f64>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
    /// White noise smoothed by a Gaussian kernel of width `smoothness`
    /// samples, rescaled to unit empirical variance per sample.
    SmoothSignal { dim: usize, smoothness: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetKind,
    pub size: usize,
    pub seed: u64,
}

impl DatasetKind {
    pub fn is_discrete(&self) -> bool {
        matches!(
            self,
            DatasetKind::Copy { .. } | DatasetKind::MarkovGrammar { .. }
        )
    }

    /// Payload length `L_m`.
    pub fn sample_len(&self) -> usize {
        match *self {
            DatasetKind::Copy { length, .. } | DatasetKind::MarkovGrammar { length } => length,
            DatasetKind::GaussianMixturePatches { dim, .. }
            | DatasetKind::SmoothSignal { dim, .. } => dim,
        }
    }

    /// Alphabet size for discrete kinds.
    pub fn alphabet(&self) -> Option<usize> {
        match *self {
            DatasetKind::Copy { alphabet, .. } => Some(alphabet),
            DatasetKind::MarkovGrammar { .. } => Some(GRAMMAR_STATES),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetKind::Copy { alphabet, length } => {
                if *alphabet < 2 || *length == 0 {
                    return Err(Error::invalid(
                        "copy data needs alphabet >= 2 and length >= 1",
                    ));
                }
            }
            DatasetKind::MarkovGrammar { length } => {
                if *length == 0 {
                    return Err(Error::invalid("grammar length must be >= 1"));
                }
            }
            DatasetKind::GaussianMixturePatches {
                dim,
                means,
                stds,
                weights,
            } => {
                if *dim == 0
                    || means.is_empty()
                    || means.len() != stds.len()
                    || means.len() != weights.len()
                {
                    return Err(Error::invalid(
                        "mixture needs dim >= 1 and equal-length means/stds/weights",
                    ));
                }
                if stds.iter().any(|s| *s < 0.0) || weights.iter().any(|w| *w < 0.0) {
                    return Err(Error::invalid(
                        "mixture stds and weights must be nonnegative",
                    ));
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::invalid("mixture weights must not all be zero"));
                }
            }
            DatasetKind::SmoothSignal { dim, smoothness } => {
                if *dim < 2 || *smoothness <= 0.0 {
                    return Err(Error::invalid(
                        "smooth signal needs dim >= 2 and smoothness > 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Entropy rate (nats per transition) of the grammar under its stationary
/// distribution: the best achievable mean next-token loss after the first token.
pub fn grammar_entropy_rate() -> f64 {
    let mut pi = [1.0 / GRAMMAR_STATES as f64; GRAMMAR_STATES];
    for _ in 0..10_000 {
        let mut next = [0.0; GRAMMAR_STATES];
        for (i, p) in pi.iter().enumerate() {
            for (j, n) in next.iter_mut().enumerate() {
                *n += p * GRAMMAR_TRANSITIONS[i][j];
            }
        }
        pi = next;
    }
    pi.iter()
        .zip(GRAMMAR_TRANSITIONS.iter())
        .map(|(p, row)| {
            p * row
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|q| -q * q.ln())
                .sum::<f64>()
        })
        .sum()
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn smooth_signal<R: Rng + ?Sized>(rng: &mut R, dim: usize, smoothness: f64) -> Vec<f64> {
    let pad = (3.0 * smoothness).ceil() as usize;
    let noise: Vec<f64> = (0..dim + 2 * pad).map(|_| normal(rng)).collect();
    let kernel: Vec<f64> = (0..=2 * pad)
        .map(|k| {
            let d = k as f64 - pad as f64;
            (-0.5 * d * d / (smoothness * smoothness)).exp()
        })
        .collect();
    let mut out: Vec<f64> = (0..dim)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * noise[i + k])
                .sum()
        })
        .collect();
    let mean = out.iter().sum::<f64>() / dim as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    out
}

/// Draws `spec.size` samples; the same spec always yields the same data.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<SourceSample>> {
    if spec.size == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    spec.source.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let samples = (0..spec.size)
        .map(|_| {
            let payload = match &spec.source {
                DatasetKind::Copy { alphabet, length } => Payload::Discrete(
                    (0..*length)
                        .map(|_| rng.random_range(0..*alphabet))
                        .collect(),
                ),
                DatasetKind::MarkovGrammar { length } => {
                    let mut state = rng.random_range(0..GRAMMAR_STATES);
                    let mut ids = Vec::with_capacity(*length);
                    ids.push(state);
                    for _ in 1..*length {
                        state = categorical(&mut rng, &GRAMMAR_TRANSITIONS[state]);
                        ids.push(state);
                    }
                    Payload::Discrete(ids)
                }
                DatasetKind::GaussianMixturePatches {
                    dim,
                    means,
                    stds,
                    weights,
                } => {
                    let k = categorical(&mut rng, weights);
                    Payload::Continuous(
                        (0..*dim)
                            .map(|_| means[k] + stds[k] * normal(&mut rng))
                            .collect(),
                    )
                }
                DatasetKind::SmoothSignal { dim, smoothness } => {
                    Payload::Continuous(smooth_signal(&mut rng, *dim, *smoothness))
                }
            };
            SourceSample { payload }
        })
        .collect();
    Ok(samples)
}

/// Shuffles indices with `seed` and cuts at `round(fraction * n)`.
/// Returns `(train, test)` index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let cut = (train_fraction * n as f64).round() as usize;
    let test = idx.split_off(cut);
    Ok((idx, test))
}

pub fn split<T: Clone>(data: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, te) = split_indices(data.len(), train_fraction, seed)?;
    Ok((
        tr.iter().map(|&i| data[i].clone()).collect(),
        te.iter().map(|&i| data[i].clone()).collect(),
    ))
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    index: usize,
    modality: &'static str,
    payload: &'a Payload,
}

/// Writes one JSON record per line: `{index, modality, payload}`.
pub fn dump_jsonl<W: Write>(samples: &[SourceSample], mut out: W) -> Result<()> {
    for (index, s) in samples.iter().enumerate() {
        let rec = DumpRecord {
            index,
            modality: s.modality().as_str(),
            payload: &s.payload,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: DatasetKind::Copy {
                alphabet: 8,
                length: 6,
            },
            size: 200,
            seed,
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(
            generate(&copy_spec(3)).unwrap(),
            generate(&copy_spec(3)).unwrap()
        );
        assert_ne!(
            generate(&copy_spec(3)).unwrap(),
            generate(&copy_spec(4)).unwrap()
        );
    }

    #[test]
    fn copy_ids_in_range() {
        for s in generate(&copy_spec(1)).unwrap() {
            match s.payload {
                Payload::Discrete(ids) => assert!(ids.iter().all(|&i| i < 8) && ids.len() == 6),
                _ => panic!("copy data must be discrete"),
            }
        }
    }

    #[test]
    fn grammar_follows_transitions() {
        let spec = DatasetSpec {
            source: DatasetKind::MarkovGrammar { length: 20 },
            size: 100,
            seed: 9,
        };
        for s in generate(&spec).unwrap() {
            let Payload::Discrete(ids) = s.payload else {
                panic!()
            };
            for w in ids.windows(2) {
                assert!(GRAMMAR_TRANSITIONS[w[0]][w[1]] > 0.0);
            }
        }
    }

    #[test]
    fn grammar_rows_are_stochastic() {
        for row in GRAMMAR_TRANSITIONS {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let h = grammar_entropy_rate();
        assert!(h > 0.0 && h < (GRAMMAR_STATES as f64).ln());
    }

    #[test]
    fn symmetric_mixture_mean_is_zero() {
        let spec = DatasetSpec {
            source: DatasetKind::GaussianMixturePatches {
                dim: 1,
                means: vec![-2.0, 2.0],
                stds: vec![0.1, 0.1],
                weights: vec![0.5, 0.5],
            },
            size: 100_000,
            seed: 11,
        };
        let data = generate(&spec).unwrap();
        let mean = data
            .iter()
            .map(|s| match &s.payload {
                Payload::Continuous(v) => v[0],
                _ => unreachable!(),
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn smooth_signal_is_standardized() {
        let spec = DatasetSpec {
            source: DatasetKind::SmoothSignal {
                dim: 64,
                smoothness: 4.0,
            },
            size: 10,
            seed: 2,
        };
        for s in generate(&spec).unwrap() {
            let Payload::Continuous(v) = s.payload else {
                panic!()
            };
            let m = v.iter().sum::<f64>() / 64.0;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_size_rejected() {
        let mut spec = copy_spec(1);
        spec.size = 0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let (tr, te) = split_indices(100, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.8, 5).unwrap(), (tr.clone(), te));
        assert_ne!(split_indices(100, 0.8, 6).unwrap().0, tr);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = serde_json::from_str::<DatasetSpec>(
            r#"{"source":{"kind":"images"},"size":3,"seed":1}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn spec_json_round_trip_and_typos() {
        let spec = copy_spec(4);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<DatasetSpec>(&text).unwrap(), spec);
        let typo = r#"{"source":{"kind":"copy","alphabet":8,"lenght":4},"size":3,"seed":1}"#;
        assert!(serde_json::from_str::<DatasetSpec>(typo).is_err());
        let extra = r#"{"source":{"kind":"copy","alphabet":8,"length":4},"size":3,"seed":1,"x":0}"#;
        assert!(serde_json::from_str::<DatasetSpec>(extra).is_err());
    }

    #[test]
    fn dump_writes_one_line_per_sample() {
        let data = generate(&copy_spec(1)).unwrap();
        let mut buf = Vec::new();
        dump_jsonl(&data[..3], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"index":0,"modality":"discrete","payload":"#));
    }
}
