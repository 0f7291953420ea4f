use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelConfig, ModelParams};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`, or 0 when nothing was predicted or present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_unit_f1: Vec<f64>,
    pub average_f1: f64,
    pub confusion: Vec<Confusion>,
}

impl EvalReport {
    /// Builds a report from hard predictions and ground truth, both
    /// `samples × n`.
    pub fn from_predictions(predicted: &[Vec<u8>], truth: &[Vec<u8>], n: usize) -> Self {
        let mut confusion = vec![Confusion::default(); n];
        for (p, y) in predicted.iter().zip(truth) {
            for (c, (&pi, &yi)) in confusion.iter_mut().zip(p.iter().zip(y)) {
                match (pi, yi) {
                    (1, 1) => c.tp += 1,
                    (1, _) => c.fp += 1,
                    (_, 1) => c.fn_ += 1,
                    _ => c.tn += 1,
                }
            }
        }
        let per_unit_f1: Vec<f64> = confusion.iter().map(Confusion::f1).collect();
        let average_f1 = if n == 0 {
            0.0
        } else {
            per_unit_f1.iter().sum::<f64>() / n as f64
        };
        EvalReport {
            per_unit_f1,
            average_f1,
            confusion,
        }
    }

    /// Fixed-width table, one row per unit plus the average.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>7} {:>7} {:>7} {:>7}",
            "unit", "F1(%)", "TP", "FP", "FN", "TN"
        );
        for (i, (f1, c)) in self.per_unit_f1.iter().zip(&self.confusion).enumerate() {
            let _ = writeln!(
                out,
                "{:<6} {:>8.1} {:>7} {:>7} {:>7} {:>7}",
                i + 1,
                100.0 * f1,
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            );
        }
        let _ = writeln!(out, "{:<6} {:>8.1}", "avg", 100.0 * self.average_f1);
        out
    }
}

/// Predicted probabilities for every sample, in dataset order.
pub fn predict(
    dataset: &Dataset,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    if dataset.n() != cfg.n || dataset.d_l() != cfg.d_l {
        return Err(Error::input(format!(
            "dataset has {} units x {} dims, model expects {} x {}",
            dataset.n(),
            dataset.d_l(),
            cfg.n,
            cfg.d_l
        )));
    }
    params.check_shapes(cfg)?;
    dataset
        .samples()
        .par_iter()
        .map(|s| forward(&s.features, params, cfg, &Mode::Eval))
        .collect()
}

/// Per-unit and average F1 with predictions `p̂ ≥ threshold`.
pub fn evaluate(
    dataset: &Dataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    threshold: f64,
) -> Result<EvalReport> {
    let probs = predict(dataset, params, cfg)?;
    let predicted: Vec<Vec<u8>> = probs
        .iter()
        .map(|p| p.iter().map(|&q| u8::from(q >= threshold)).collect())
        .collect();
    let truth: Vec<Vec<u8>> = dataset.samples().iter().map(|s| s.labels.clone()).collect();
    Ok(EvalReport::from_predictions(
        &predicted,
        &truth,
        dataset.n(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        let c = Confusion {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            Confusion {
                tn: 5,
                ..Default::default()
            }
            .f1(),
            0.0
        );
    }

    #[test]
    fn perfect_predictions_score_one() {
        let y = vec![vec![1, 0, 1], vec![0, 1, 1]];
        let r = EvalReport::from_predictions(&y, &y, 3);
        assert_eq!(r.per_unit_f1, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.average_f1, 1.0);
    }

    #[test]
    fn average_is_mean_of_units() {
        let truth = vec![vec![1, 0], vec![1, 0]];
        let pred = vec![vec![1, 1], vec![0, 0]];
        let r = EvalReport::from_predictions(&pred, &truth, 2);
        // unit 1: tp 1, fn 1 -> 2/3; unit 2: fp 1 -> 0
        assert!((r.per_unit_f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_unit_f1[1], 0.0);
        assert!((r.average_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.table().contains("avg"));
    }

    #[test]
    fn report_json_uses_fn_key() {
        let r = EvalReport::from_predictions(&[vec![0]], &[vec![1]], 1);
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"fn\":1"), "{j}");
    }
}
