//! Optimizer, relation dropout sampling, the training loop, synthetic data
//! and evaluation.

mod ablation;
mod dataset;
mod eval;
mod synth;

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{
    fusion_arms, mean_and_std_error, paired_gap, run_ablation, standard_arms, AblationArm,
    AblationPlan, ArmResult,
};
pub use dataset::{Dataset, Sample};
pub use eval::{evaluate, predict, Confusion, EvalReport, DEFAULT_THRESHOLD};
pub use synth::{generate_synthetic, ClusterSpec, SyntheticSpec};

use crate::error::{Error, Result};
use crate::loss::{
    balance_weights, joint_loss, relation_stats, BalanceWeights, LossConfig, RelationStats,
};
use crate::model::{
    forward_on, BoundParams, DropoutPlan, FeatureSet, Mode, ModelConfig, ModelParams,
};
use crate::numeric::{Matrix, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout_enabled: bool,
    /// Sample a separate layer subset for every unit instead of one per sample.
    pub dropout_per_unit: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0005,
            lr_halve_every: 2,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            dropout_enabled: true,
            dropout_per_unit: false,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 = {} must be >= 0", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if self.lr_halve_every == 0 || self.batch_size == 0 {
            return fail("lr_halve_every and batch_size must be at least 1".into());
        }
        self.model.validate()?;
        if self.dropout_active() {
            self.model.validate_dropout()?;
        }
        self.loss.validate()
    }

    fn dropout_active(&self) -> bool {
        self.dropout_enabled && self.model.m > 0
    }
}

/// `lr0 · 0.5^⌊epoch / halve_every⌋`, epochs counted from zero.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch / cfg.lr_halve_every) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: ModelParams,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: params.zeros_like(),
        }
    }
}

/// One SGD update with coupled weight decay and (Nesterov) momentum:
///
/// ```text
/// g ← g + wd·θ
/// v ← μ·v + g
/// θ ← θ − lr·(g + μ·v)   (Nesterov)   or   θ − lr·v
/// ```
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut SgdState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let lr = learning_rate(cfg, epoch);
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;
    let theta = params.tensors_mut();
    let g = grads.tensors();
    let v = state.velocity.tensors_mut();
    if theta.len() != g.len() || theta.len() != v.len() {
        return Err(Error::Config(
            "optimizer state does not match parameters".into(),
        ));
    }
    for ((t, g), v) in theta.into_iter().zip(g).zip(v) {
        t.ensure_same_shape(g, "sgd_step")?;
        let (ts, gs, vs) = (t.as_mut_slice(), g.as_slice(), v.as_mut_slice());
        for ((t, &g), v) in ts.iter_mut().zip(gs).zip(vs.iter_mut()) {
            let g = g + wd * *t;
            *v = mu * *v + g;
            let step = if cfg.nesterov { g + mu * *v } else { *v };
            *t -= lr * step;
        }
    }
    Ok(())
}

/// Uniformly random `t`-subset of `0..m`, sorted.
pub fn sample_dropout_subset<R: rand::Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    t: usize,
) -> Result<Vec<usize>> {
    if t == 0 || t > m {
        return Err(Error::Config(format!(
            "cannot keep t = {t} of m = {m} layers"
        )));
    }
    let mut s = index::sample(rng, m, t).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// Loss terms and parameter gradient for one sample.
#[derive(Debug, Clone)]
pub struct SampleObjective {
    pub cross: f64,
    pub aur: f64,
    pub total: f64,
    pub grads: ModelParams,
    /// Distance of this evaluation point to the nearest non-differentiable point.
    pub kink_margin: f64,
}

/// Everything the objective needs besides parameters and the sample.
#[derive(Debug, Clone)]
pub struct ObjectiveContext<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub stats: &'a RelationStats,
    pub weights: &'a BalanceWeights,
}

/// Joint loss of one sample and its exact gradient w.r.t. every parameter.
pub fn sample_objective(
    params: &ModelParams,
    features: &FeatureSet,
    labels: &[u8],
    mode: &Mode,
    ctx: &ObjectiveContext<'_>,
) -> Result<SampleObjective> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.matrix().clone());
    let bound = BoundParams::bind(&mut tape, params);
    let p = forward_on(&mut tape, f, &bound, ctx.model, mode)?;
    let p_hat = tape.value(p).as_slice().to_vec();
    let jl = joint_loss(&p_hat, labels, ctx.stats, ctx.weights, ctx.loss);
    tape.record_kink(jl.kink_margin);
    let loss = tape.custom_scalar(p, jl.total, Matrix::column(&jl.grad))?;
    let mut grads = tape.backward(loss)?;
    Ok(SampleObjective {
        cross: jl.cross,
        aur: jl.aur,
        total: jl.total,
        grads: bound.gradients(params, &mut grads),
        kink_margin: tape.kink_margin(),
    })
}

/// Joint loss value only, for finite-difference checks.
pub fn sample_loss(
    params: &ModelParams,
    features: &FeatureSet,
    labels: &[u8],
    mode: &Mode,
    ctx: &ObjectiveContext<'_>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.matrix().clone());
    let bound = BoundParams::bind(&mut tape, params);
    let p = forward_on(&mut tape, f, &bound, ctx.model, mode)?;
    let p_hat = tape.value(p).as_slice();
    Ok(joint_loss(p_hat, labels, ctx.stats, ctx.weights, ctx.loss).total)
}

/// Draws the dropout plan for one training sample.
pub fn draw_plan<R: rand::Rng + ?Sized>(rng: &mut R, cfg: &TrainConfig) -> Result<Mode> {
    let m = cfg.model.m;
    if !cfg.dropout_active() {
        return Ok(Mode::Eval);
    }
    let t = cfg.model.t;
    let plan = if cfg.dropout_per_unit {
        let subsets = (0..cfg.model.n)
            .map(|_| sample_dropout_subset(rng, m, t))
            .collect::<Result<Vec<_>>>()?;
        DropoutPlan::per_unit(&subsets, m, t)?
    } else {
        DropoutPlan::shared(&sample_dropout_subset(rng, m, t)?, m, t, cfg.model.n)?
    };
    Ok(Mode::Train(plan))
}

/// One row of the loss trace: batch means of each loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub batch: usize,
    pub l_cross: f64,
    pub l_aur: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    if rows.is_empty() {
        w.write_record(["epoch", "batch", "l_cross", "l_aur", "l_total", "lr"])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// State recovered from an aborted run.
#[derive(Debug, Clone)]
pub struct PartialRun {
    /// Last parameters for which every loss was finite.
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub initial: ModelParams,
    pub trace: Vec<TraceRow>,
    pub weights: BalanceWeights,
}

/// Relation statistics for training, or an all-zero table when the relation
/// loss is switched off and the labels would not support statistics.
fn training_stats(labels: &crate::loss::LabelBatch, loss: &LossConfig) -> Result<RelationStats> {
    match relation_stats(labels) {
        Ok(s) => Ok(s),
        Err(e) if loss.lambda > 0.0 => Err(e),
        Err(_) => {
            let n = labels.n();
            Ok(RelationStats {
                r: Matrix::zeros(n, n),
                a: Matrix::zeros(n, n),
                rates: vec![0.0; n],
                counts: vec![0; n],
                co_counts: vec![vec![0; n]; n],
                samples: labels.samples(),
            })
        }
    }
}

/// Mini-batch SGD on the mean joint loss.
///
/// Statistics and balance weights come from `dataset` alone. Per-sample
/// gradients may be computed in parallel but are summed in sample order,
/// so results do not depend on the thread count.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if dataset.n() != cfg.model.n || dataset.d_l() != cfg.model.d_l {
        return Err(Error::input(format!(
            "dataset has {} units x {} dims, configuration says {} x {}",
            dataset.n(),
            dataset.d_l(),
            cfg.model.n,
            cfg.model.d_l
        )));
    }
    let labels = dataset.labels();
    let weights = balance_weights(&labels)?;
    let stats = training_stats(&labels, &cfg.loss)?;
    let ctx = ObjectiveContext {
        model: &cfg.model,
        loss: &cfg.loss,
        stats: &stats,
        weights: &weights,
    };

    let initial = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut params = initial.clone();
    let mut state = SgdState::new(&params);
    // shuffle and dropout stream, independent of initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let jobs = chunk
                .iter()
                .map(|&i| Ok((i, draw_plan(&mut rng, cfg)?)))
                .collect::<Result<Vec<_>>>()?;
            let results = jobs
                .par_iter()
                .map(|(i, mode)| {
                    let s = &dataset.samples()[*i];
                    sample_objective(&params, &s.features, &s.labels, mode, &ctx)
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grads = params.zeros_like();
            let (mut l_cross, mut l_aur, mut l_total) = (0.0, 0.0, 0.0);
            for r in &results {
                grads.axpy(scale, &r.grads)?;
                l_cross += r.cross * scale;
                l_aur += r.aur * scale;
                l_total += r.total * scale;
            }
            if !l_total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    partial: Box::new(PartialRun { params, trace }),
                });
            }
            trace.push(TraceRow {
                epoch,
                batch,
                l_cross,
                l_aur,
                l_total,
                lr,
            });
            let before = params.clone();
            sgd_step(&mut params, &grads, &mut state, cfg, epoch)?;
            if !params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    partial: Box::new(PartialRun {
                        params: before,
                        trace,
                    }),
                });
            }
        }
        if let Some(last) = trace.last() {
            log::info!(
                "epoch {epoch}: lr {lr:.6} last batch loss {:.6}",
                last.l_total
            );
        }
    }

    Ok(TrainOutcome {
        params,
        initial,
        trace,
        weights,
    })
}

/// Mean joint loss over a dataset in evaluation mode.
pub fn mean_loss(
    dataset: &Dataset,
    params: &ModelParams,
    ctx: &ObjectiveContext<'_>,
) -> Result<f64> {
    let losses = dataset
        .samples()
        .par_iter()
        .map(|s| sample_loss(params, &s.features, &s.labels, &Mode::Eval, ctx))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            n: 2,
            d_l: 3,
            d_m: 2,
            m: 1,
            hidden: 2,
            ..Default::default()
        };
        ModelParams::init(&cfg, 1).unwrap()
    }

    #[test]
    fn schedule_halves_every_two_epochs() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..5).map(|e| learning_rate(&cfg, e)).collect();
        assert_eq!(lrs, vec![0.01, 0.01, 0.005, 0.005, 0.0025]);
    }

    #[test]
    fn plain_step_without_momentum_or_decay() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            lr0: 0.1,
            ..Default::default()
        };
        let mut p = params();
        let start = p.clone();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.as_mut_slice()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = i as f64 - 1.5);
        }
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut s, &cfg, 0).unwrap();
        let mut expected = start.clone();
        expected.axpy(-0.1, &g).unwrap();
        assert_eq!(p, expected);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = params();
        let start = p.clone();
        let g = p.zeros_like();
        let mut s = SgdState::new(&p);
        for epoch in 0..5 {
            sgd_step(&mut p, &g, &mut s, &cfg, epoch).unwrap();
        }
        assert_eq!(p, start);
    }

    #[test]
    fn nesterov_step_matches_hand_computation() {
        let cfg = TrainConfig {
            lr0: 0.5,
            momentum: 0.9,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = params();
        p.fusion.q0[(0, 0)] = 2.0;
        let mut g = p.zeros_like();
        g.fusion.q0[(0, 0)] = 1.0;
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut s, &cfg, 0).unwrap();
        // g' = 1 + 0.1*2 = 1.2; v = 1.2; step = 1.2 + 0.9*1.2 = 2.28
        assert!((p.fusion.q0[(0, 0)] - (2.0 - 0.5 * 2.28)).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut s, &cfg, 0).unwrap();
        let theta1 = 2.0 - 0.5 * 2.28;
        let g2 = 1.0 + 0.1 * theta1;
        let v2 = 0.9 * 1.2 + g2;
        assert!((p.fusion.q0[(0, 0)] - (theta1 - 0.5 * (g2 + 0.9 * v2))).abs() < 1e-15);
    }

    #[test]
    fn dropout_subsets_are_valid_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            sample_dropout_subset(&mut rng, 4, 4).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(sample_dropout_subset(&mut rng, 2, 3).is_err());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_dropout_subset(&mut rng, 4, 2).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        for s in draw(11) {
            assert_eq!(s.len(), 2);
            assert!(s[0] < s[1] && s[1] < 4);
        }
    }

    #[test]
    fn trace_csv_has_fixed_columns() {
        let mut buf = Vec::new();
        write_trace(
            &[TraceRow {
                epoch: 0,
                batch: 1,
                l_cross: 0.5,
                l_aur: 0.25,
                l_total: 0.525,
                lr: 0.01,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,batch,l_cross,l_aur,l_total,lr\n0,1,0.5,0.25,0.525,0.01\n"
        );
        let mut buf = Vec::new();
        write_trace(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,batch,l_cross,l_aur,l_total,lr\n"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.model.t = 5;
        assert!(bad.validate().is_err());
        bad.dropout_enabled = false;
        assert!(bad.validate().is_ok());
    }
}
