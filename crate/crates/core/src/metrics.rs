//! Percentage-error measures over a test subset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub target: f64,
    pub prediction: f64,
    /// Absolute percentage error.
    pub ape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean absolute percentage error, percent.
    pub e_a: f64,
    /// Maximum absolute percentage error, percent.
    pub e_max: f64,
    pub accuracy: f64,
    pub per_sample: Vec<SampleError>,
}

fn check(targets: &[f64], predictions: &[f64]) -> Result<()> {
    if targets.is_empty() || targets.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Config(format!(
            "percentage error needs positive targets, got {t}"
        )));
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(())
}

pub fn percentage_errors(targets: &[f64], predictions: &[f64]) -> Result<Vec<f64>> {
    check(targets, predictions)?;
    Ok(targets
        .iter()
        .zip(predictions)
        .map(|(t, p)| (t - p).abs() / t * 100.0)
        .collect())
}

pub fn mape(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    let errs = percentage_errors(targets, predictions)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn max_ape(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    let errs = percentage_errors(targets, predictions)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

pub fn accuracy(e_a: f64) -> f64 {
    100.0 - e_a
}

pub fn evaluate(targets: &[f64], predictions: &[f64]) -> Result<EvalResult> {
    let errs = percentage_errors(targets, predictions)?;
    let e_a = errs.iter().sum::<f64>() / errs.len() as f64;
    let e_max = errs.iter().copied().fold(0.0, f64::max);
    let per_sample = targets
        .iter()
        .zip(predictions)
        .zip(&errs)
        .map(|((&target, &prediction), &ape)| SampleError {
            target,
            prediction,
            ape,
        })
        .collect();
    Ok(EvalResult {
        e_a,
        e_max,
        accuracy: accuracy(e_a),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_sample_error() {
        let e = mape(&[155.8], &[150.95]).unwrap();
        assert_eq!(format!("{e:.2}"), "3.11");
        assert_eq!(max_ape(&[100.0], &[150.0]).unwrap(), 50.0);
    }

    #[test]
    fn identical_vectors_have_zero_error() {
        let t = [10.0, 20.0, 30.0];
        assert_eq!(mape(&t, &t).unwrap(), 0.0);
        assert_eq!(max_ape(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_values() {
        assert!((accuracy(6.45) - 93.55).abs() < 1e-12);
        assert_eq!(accuracy(0.0), 100.0);
        assert!((accuracy(216.1) - -116.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(mape(&[], &[]).is_err());
        assert!(mape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mape(&[0.0], &[1.0]).is_err());
        assert!(max_ape(&[-5.0], &[1.0]).is_err());
    }

    #[test]
    fn evaluate_is_consistent() {
        let r = evaluate(&[100.0, 200.0], &[110.0, 150.0]).unwrap();
        assert!((r.e_a - 17.5).abs() < 1e-12);
        assert!((r.e_max - 25.0).abs() < 1e-12);
        assert!((r.accuracy - 82.5).abs() < 1e-12);
        assert_eq!(r.per_sample.len(), 2);
    }

    const REFERENCE: &str = include_str!("../tests/data/reference_predictions.tsv");

    fn reference_rows() -> Vec<[f64; 3]> {
        REFERENCE
            .lines()
            .map(|l| {
                let v: Vec<f64> = l.split('\t').map(|x| x.parse().unwrap()).collect();
                [v[0], v[1], v[2]]
            })
            .collect()
    }

    #[test]
    fn reference_predictions_reproduce_printed_errors() {
        let rows = reference_rows();
        assert_eq!(rows.len(), 44);
        let t: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let p: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let r = evaluate(&t, &p).unwrap();
        for (s, row) in r.per_sample.iter().zip(&rows) {
            assert!((s.ape - row[2]).abs() <= 0.01, "{row:?} gives {}", s.ape);
        }
        assert_eq!(format!("{:.2}", r.e_a), "7.23");
        assert_eq!(format!("{:.2}", r.e_max), "26.70");
        let worst = r.per_sample.iter().max_by(|a, b| a.ape.total_cmp(&b.ape)).unwrap();
        assert_eq!((worst.target, worst.prediction), (122.3, 154.96));
    }

    proptest! {
        #[test]
        fn mean_never_exceeds_max(pairs in proptest::collection::vec((1.0f64..500.0, 0.0f64..800.0), 1..50)) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(mape(&t, &p).unwrap() <= max_ape(&t, &p).unwrap() + 1e-12);
        }

        #[test]
        fn order_does_not_matter(pairs in proptest::collection::vec((1.0f64..500.0, 0.0f64..800.0), 1..30)) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (tr, pr): (Vec<f64>, Vec<f64>) = pairs.into_iter().rev().unzip();
            prop_assert!((mape(&t, &p).unwrap() - mape(&tr, &pr).unwrap()).abs() < 1e-9);
            prop_assert_eq!(max_ape(&t, &p).unwrap(), max_ape(&tr, &pr).unwrap());
        }
    }
}
