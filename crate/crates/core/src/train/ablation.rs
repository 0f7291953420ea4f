use serde::Serialize;

use super::{evaluate, generate_synthetic, train, SyntheticSpec, TrainConfig, DEFAULT_THRESHOLD};
use crate::error::Result;
use crate::model::FusionMode;

/// One configuration in an ablation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub name: String,
    pub m: usize,
    pub lambda: f64,
    /// Retained layers per sample; `None` disables relation dropout.
    pub dropout_t: Option<usize>,
    pub fusion: FusionMode,
}

impl AblationArm {
    pub fn new(name: &str, m: usize, lambda: f64, dropout_t: Option<usize>) -> Self {
        AblationArm {
            name: name.to_string(),
            m,
            lambda,
            dropout_t,
            fusion: FusionMode::Attention,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.m = self.m;
        cfg.model.fusion = self.fusion;
        cfg.loss.lambda = self.lambda;
        match self.dropout_t {
            Some(t) => {
                cfg.dropout_enabled = true;
                cfg.model.t = t;
            }
            None => {
                cfg.dropout_enabled = false;
                cfg.model.t = self.m.max(1);
            }
        }
        cfg
    }
}

/// Full model, relation layers without the pair loss or dropout, and no
/// relation layers at all.
pub fn standard_arms() -> Vec<AblationArm> {
    vec![
        AblationArm::new("m=4 lambda=0.1 dropout=0.5", 4, 0.1, Some(2)),
        AblationArm::new("m=4 lambda=0", 4, 0.0, None),
        AblationArm::new("m=0 lambda=0", 0, 0.0, None),
    ]
}

/// Full model under each alternative fusion rule.
pub fn fusion_arms() -> Vec<AblationArm> {
    [
        FusionMode::Attention,
        FusionMode::Avg,
        FusionMode::Concat,
        FusionMode::ScoreAvg,
    ]
    .into_iter()
    .map(|fusion| AblationArm {
        fusion,
        ..AblationArm::new(&format!("fusion={}", fusion), 4, 0.1, Some(2))
    })
    .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub name: String,
    /// Test average F1 per seed, in seed order.
    pub f1: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub spec: SyntheticSpec,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Fraction of each generated dataset used for training.
    pub train_fraction: f64,
}

pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// For every seed, regenerates the dataset from `plan.spec` with that seed,
/// splits it, trains each arm with that seed and scores the held-out part.
pub fn run_ablation(plan: &AblationPlan, arms: &[AblationArm]) -> Result<Vec<ArmResult>> {
    let mut scores = vec![Vec::with_capacity(plan.seeds.len()); arms.len()];
    for &seed in &plan.seeds {
        let data = generate_synthetic(&SyntheticSpec {
            seed,
            ..plan.spec.clone()
        })?;
        let cut = (data.len() as f64 * plan.train_fraction).round() as usize;
        let (train_set, test_set) = data.split(cut);
        for (arm, out) in arms.iter().zip(scores.iter_mut()) {
            let mut cfg = arm.apply(&plan.base);
            cfg.seed = seed;
            cfg.model.n = data.n();
            cfg.model.d_l = data.d_l();
            let run = train(&train_set, &cfg)?;
            let report = evaluate(&test_set, &run.params, &cfg.model, DEFAULT_THRESHOLD)?;
            log::info!("seed {seed} {}: test F1 {:.4}", arm.name, report.average_f1);
            out.push(report.average_f1);
        }
    }
    Ok(arms
        .iter()
        .zip(scores)
        .map(|(arm, f1)| {
            let (mean, std_error) = mean_and_std_error(&f1);
            ArmResult {
                name: arm.name.clone(),
                f1,
                mean,
                std_error,
            }
        })
        .collect())
}

/// Standard error of the mean of paired differences `a[s] - b[s]`.
pub fn paired_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_and_std_error(&d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_error_of_known_sample() {
        let (m, se) = mean_and_std_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_std_error(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn arms_configure_dropout() {
        let base = TrainConfig::default();
        let full = standard_arms()[0].apply(&base);
        assert!(full.dropout_enabled);
        assert_eq!((full.model.m, full.model.t), (4, 2));
        let plain = standard_arms()[2].apply(&base);
        assert!(!plain.dropout_enabled);
        assert_eq!(plain.loss.lambda, 0.0);
        plain.validate().unwrap();
    }
}
