//! Metric rows, CSV emission and curve statistics.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    TokenAccuracy,
    SequenceExactMatch,
    Mse,
    Psnr,
    LmLoss,
    DiffLoss,
    Kl,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::TokenAccuracy => "token_accuracy",
            MetricName::SequenceExactMatch => "sequence_exact_match",
            MetricName::Mse => "mse",
            MetricName::Psnr => "psnr",
            MetricName::LmLoss => "lm_loss",
            MetricName::DiffLoss => "diff_loss",
            MetricName::Kl => "kl",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub snr_db: f64,
    pub token_length: usize,
    pub metric: MetricName,
    pub value: f64,
    pub config_hash: String,
}

/// Wall-clock measurements live apart from the metrics so that metric
/// CSVs stay bit-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub run_id: String,
    pub seed: u64,
    pub snr_db: f64,
    pub token_length: usize,
    pub samples: usize,
    pub wall_time: f64,
    pub wall_time_per_sample: f64,
    pub config_hash: String,
}

/// Writes rows with a header line, creating parent directories.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// `10·log10(peak² / mse)`; infinite for a perfect reconstruction.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    10.0 * (peak * peak / mse).log10()
}

/// Fraction of positions where the ids agree.
pub fn token_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if truth.is_empty() {
        return 1.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares non-decreasing fit (pool adjacent violators).
pub fn isotonic_fit(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let n = na + nb;
            *blocks.last_mut().unwrap() = ((a * na as f64 + b * nb as f64) / n as f64, n);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, n)| std::iter::repeat_n(v, n))
        .collect()
}

/// Largest absolute gap between `y` and its isotonic fit.
pub fn isotonic_deviation(y: &[f64]) -> f64 {
    isotonic_fit(y)
        .iter()
        .zip(y)
        .map(|(f, v)| (f - v).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_example() {
        assert!((psnr(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(0.0, 1.0), f64::INFINITY);
    }

    #[test]
    fn identical_reconstruction() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(mse(&[0.5, 1.0], &[0.5, 1.0]), 0.0);
        assert_eq!(token_accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]), 0.5);
    }

    #[test]
    fn isotonic_examples() {
        assert_eq!(
            isotonic_fit(&[1.0, 3.0, 2.0, 4.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(isotonic_fit(&[3.0, 2.0, 1.0]), vec![2.0; 3]);
        assert_eq!(isotonic_deviation(&[0.1, 0.2, 0.3]), 0.0);
        assert!((isotonic_deviation(&[0.5, 0.4]) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_round_trip_keeps_infinity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            run_id: "r".into(),
            seed: 1,
            snr_db: f64::INFINITY,
            token_length: 8,
            metric: MetricName::Kl,
            value: 0.1 + 0.2,
            config_hash: "abc".into(),
        }];
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("run_id,seed,snr_db,token_length,metric,value,config_hash\n"));
        assert_eq!(read_csv::<MetricsRow>(&path).unwrap(), rows);
    }
}
