//! End-to-end gradient check of the joint loss on a random mini-problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{balance_weights, relation_stats, LabelBatch, LossConfig};
use crate::model::{FeatureSet, Mode, ModelConfig, ModelParams};
use crate::numeric::{finite_diff_grad, max_relative_error, Matrix, DEFAULT_STEP};
use crate::train::{draw_plan, sample_loss, sample_objective, ObjectiveContext, TrainConfig};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Evaluation points closer than this to a kink are redrawn.
pub const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub dropout_enabled: bool,
    /// Samples averaged into the checked objective.
    pub batch: usize,
    /// Rows of the random label table behind the relation statistics.
    pub label_rows: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub max_attempts: usize,
    /// Perturbs the analytic `q0` gradient; a negative control for the checker.
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                n: 4,
                d_l: 8,
                d_m: 4,
                m: 4,
                k: Some(2),
                t: 2,
                ..Default::default()
            },
            loss: LossConfig::default(),
            dropout_enabled: true,
            batch: 3,
            label_rows: 16,
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            seed: 0,
            max_attempts: 2000,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    /// Mini-problems drawn before one cleared every kink.
    pub attempts: usize,
    pub kink_margin: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.clone())
            .collect()
    }
}

struct MiniProblem {
    params: ModelParams,
    features: Vec<FeatureSet>,
    labels: LabelBatch,
    modes: Vec<Mode>,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn draw_problem(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<MiniProblem> {
    let model = &cfg.model;
    let mut params = ModelParams::init(model, rng.random())?;
    for l in &mut params.layers {
        l.wq = uniform(rng, l.wq.rows(), l.wq.cols());
        l.wk = uniform(rng, l.wk.rows(), l.wk.cols());
    }
    params.fusion.q0 = uniform(rng, model.d_l, 1);
    for h in &mut params.classifier.heads {
        h.hidden_b = uniform(rng, 1, model.hidden).scale(0.1);
        h.out_b = uniform(rng, 1, 2).scale(0.1);
    }
    let features = (0..cfg.batch)
        .map(|_| FeatureSet::new(uniform(rng, model.n, model.d_l)))
        .collect::<Result<Vec<_>>>()?;
    let labels = loop {
        let rows: Vec<Vec<u8>> = (0..cfg.label_rows.max(cfg.batch))
            .map(|_| {
                (0..model.n)
                    .map(|_| u8::from(rng.random_bool(0.5)))
                    .collect()
            })
            .collect();
        let batch = LabelBatch::new(model.n, rows)?;
        if relation_stats(&batch).is_ok() {
            break batch;
        }
    };
    let train_cfg = TrainConfig {
        dropout_enabled: cfg.dropout_enabled,
        model: model.clone(),
        ..Default::default()
    };
    let modes = (0..cfg.batch)
        .map(|_| draw_plan(rng, &train_cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MiniProblem {
        params,
        features,
        labels,
        modes,
    })
}

/// Compares reverse-mode gradients of the mean joint loss against central
/// differences for every parameter tensor.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.model.validate()?;
    if cfg.dropout_enabled {
        cfg.model.validate_dropout()?;
    }
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for attempt in 1..=cfg.max_attempts {
        let problem = draw_problem(cfg, &mut rng)?;
        let stats = relation_stats(&problem.labels)?;
        let weights = balance_weights(&problem.labels)?;
        let ctx = ObjectiveContext {
            model: &cfg.model,
            loss: &cfg.loss,
            stats: &stats,
            weights: &weights,
        };
        let scale = 1.0 / cfg.batch as f64;

        let mut analytic = problem.params.zeros_like();
        let mut margin = f64::INFINITY;
        let mut loss = 0.0;
        for (s, (f, mode)) in problem.features.iter().zip(&problem.modes).enumerate() {
            let obj = sample_objective(&problem.params, f, problem.labels.row(s), mode, &ctx)?;
            analytic.axpy(scale, &obj.grads)?;
            margin = margin.min(obj.kink_margin);
            loss += scale * obj.total;
        }
        if margin < KINK_CLEARANCE {
            continue;
        }
        if cfg.corrupt_backward {
            let q0 = &mut analytic.fusion.q0;
            *q0 = q0.map(|v| v * 1.5 + 1e-3);
        }

        let objective = |params: &ModelParams| -> f64 {
            problem
                .features
                .iter()
                .zip(&problem.modes)
                .enumerate()
                .map(|(s, (f, mode))| {
                    sample_loss(params, f, problem.labels.row(s), mode, &ctx)
                        .map(|l| scale * l)
                        .unwrap_or(f64::NAN)
                })
                .sum()
        };

        let names = problem.params.tensor_names();
        let mut tensors = Vec::with_capacity(names.len());
        for (idx, name) in names.into_iter().enumerate() {
            let at = problem.params.tensors()[idx].clone();
            let numeric = finite_diff_grad(
                |x| {
                    let mut p = problem.params.clone();
                    *p.tensors_mut()[idx] = x.clone();
                    objective(&p)
                },
                &at,
                cfg.step,
            )?;
            let err = max_relative_error(analytic.tensors()[idx], &numeric, RELATIVE_FLOOR);
            tensors.push(TensorCheck {
                name,
                entries: at.len(),
                max_rel_error: err,
                passed: err < cfg.tolerance,
            });
        }
        return Ok(GradCheckReport {
            tensors,
            attempts: attempt,
            kink_margin: margin,
            loss,
        });
    }
    Err(Error::Oracle(format!(
        "no mini-problem cleared kinks by {KINK_CLEARANCE} in {} attempts",
        cfg.max_attempts
    )))
}
