//! Balance weights, weighted cross-entropy, label relation statistics and
//! the pairwise relation loss.
//!
//! All losses here act on the predicted probabilities of one sample and
//! return their gradient with respect to those probabilities; the tape
//! records them as opaque scalar nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Predictions are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before logs.
pub const CLAMP_EPS: f64 = 1e-7;

/// Binary label table, one row per sample and one column per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    n: usize,
    rows: Vec<Vec<u8>>,
}

impl LabelBatch {
    pub fn new(n: usize, rows: Vec<Vec<u8>>) -> Result<Self> {
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::input(format!(
                    "label row {s} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|&&v| v > 1) {
                return Err(Error::input(format!(
                    "label row {s} has non-binary value {v}"
                )));
            }
        }
        Ok(LabelBatch { n, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn row(&self, s: usize) -> &[u8] {
        &self.rows[s]
    }

    fn occurrence_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n];
        for row in &self.rows {
            for (c, &v) in counts.iter_mut().zip(row) {
                *c += v as usize;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    /// Occurrence rate per unit (after any floor).
    pub rates: Vec<f64>,
    /// Normalized inverse-rate weight per unit; sums to one.
    pub weights: Vec<f64>,
}

impl BalanceWeights {
    pub fn uniform(n: usize) -> Self {
        BalanceWeights {
            rates: vec![0.5; n],
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Weights from explicit occurrence rates.
    pub fn from_rates(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() || rates.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!(
                "occurrence rates must lie in (0, 1]: {rates:?}"
            )));
        }
        let total: f64 = rates.iter().map(|r| 1.0 / r).sum();
        let weights = rates.iter().map(|r| 1.0 / r / total).collect();
        Ok(BalanceWeights { rates, weights })
    }
}

/// Inverse-occurrence-rate weights from training labels.
///
/// A unit that never occurs gets the floored rate `1 / (2·samples)` and a
/// logged warning instead of an infinite weight.
pub fn balance_weights(labels: &LabelBatch) -> Result<BalanceWeights> {
    let samples = labels.samples();
    if samples == 0 || labels.n() == 0 {
        return Err(Error::Stats(
            "cannot compute balance weights from an empty label table".into(),
        ));
    }
    let rates = labels
        .occurrence_counts()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if c == 0 {
                log::warn!(
                    "unit {} never occurs in training labels; flooring its rate",
                    i + 1
                );
                1.0 / (2.0 * samples as f64)
            } else {
                c as f64 / samples as f64
            }
        })
        .collect();
    BalanceWeights::from_rates(rates)
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// `−Σ_i w_i [p_i log p̂_i + (1 − p_i) log(1 − p̂_i)]` on clamped predictions.
pub fn weighted_cross_entropy(p_hat: &[f64], p: &[u8], w: &BalanceWeights) -> f64 {
    p_hat
        .iter()
        .zip(p)
        .zip(&w.weights)
        .map(|((&q, &y), &wi)| {
            let q = clamp(q);
            let y = y as f64;
            -wi * (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum()
}

fn weighted_cross_entropy_grad(p_hat: &[f64], p: &[u8], w: &BalanceWeights) -> Vec<f64> {
    p_hat
        .iter()
        .zip(p)
        .zip(&w.weights)
        .map(|((&q, &y), &wi)| {
            if !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&q) {
                return 0.0;
            }
            let y = y as f64;
            -wi * (y / q - (1.0 - y) / (1.0 - q))
        })
        .collect()
}

/// Empirical relation statistics between every ordered pair of units.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationStats {
    /// `r_ij = P(y_j=1 | y_i=1) − P(y_j=1)`.
    pub r: Matrix,
    /// Signed relation strength derived from `r_ij`.
    pub a: Matrix,
    /// `P(y_j = 1)` per unit.
    pub rates: Vec<f64>,
    /// Occurrence count per unit.
    pub counts: Vec<usize>,
    /// `co_counts[i][j]`: samples with both units present.
    pub co_counts: Vec<Vec<usize>>,
    pub samples: usize,
}

/// Conditional-probability relation statistics from training labels.
///
/// Every unit must occur at least once; no smoothing is applied.
pub fn relation_stats(labels: &LabelBatch) -> Result<RelationStats> {
    let n = labels.n();
    let samples = labels.samples();
    if samples == 0 {
        return Err(Error::Stats("label table is empty".into()));
    }
    let counts = labels.occurrence_counts();
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Stats(format!(
            "unit {} never occurs; its conditional probabilities are undefined",
            i + 1
        )));
    }
    let mut co_counts = vec![vec![0usize; n]; n];
    for row in labels.rows() {
        for i in (0..n).filter(|&i| row[i] == 1) {
            for j in (0..n).filter(|&j| row[j] == 1) {
                co_counts[i][j] += 1;
            }
        }
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / samples as f64).collect();
    let mut r = Matrix::zeros(n, n);
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let cond = co_counts[i][j] as f64 / counts[i] as f64;
            let rij = cond - rates[j];
            r[(i, j)] = rij;
            a[(i, j)] = if rij > 0.0 {
                cond
            } else {
                cond / rates[j] - 1.0
            };
        }
    }
    Ok(RelationStats {
        r,
        a,
        rates,
        counts,
        co_counts,
        samples,
    })
}

/// JSON document written by the `stats` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsDocument {
    pub r: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub rates: Vec<f64>,
    pub weights: Vec<f64>,
}

impl StatsDocument {
    pub fn new(stats: &RelationStats, weights: &BalanceWeights) -> Self {
        StatsDocument {
            r: stats.r.to_rows(),
            a: stats.a.to_rows(),
            rates: stats.rates.clone(),
            weights: weights.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the relation loss in the joint objective.
    pub lambda: f64,
    /// Positive-relation threshold.
    pub p_pos: f64,
    /// Negative-relation threshold.
    pub p_neg: f64,
    /// Skip `i = j` terms of the relation loss.
    pub exclude_diagonal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            p_pos: 0.5,
            p_neg: -0.7,
            exclude_diagonal: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda = {} must be >= 0",
                self.lambda
            )));
        }
        if self.p_neg.partial_cmp(&self.p_pos) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config(format!(
                "p_neg = {} must be below p_pos = {}",
                self.p_neg, self.p_pos
            )));
        }
        Ok(())
    }
}

/// Which piece of the pairwise relation loss applies to a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairBranch {
    /// Strong positive relation, both present: push both predictions up.
    Positive,
    /// Strong negative relation, `i` present and `j` absent: push apart.
    Negative,
    Inactive,
}

fn pair_branch(a: f64, p_i: u8, p_j: u8, cfg: &LossConfig) -> PairBranch {
    if a > cfg.p_pos && p_i == 1 && p_j == 1 {
        PairBranch::Positive
    } else if a < cfg.p_neg && p_i == 1 && p_j == 0 {
        PairBranch::Negative
    } else {
        PairBranch::Inactive
    }
}

/// Pairwise relation loss for one ordered pair of units.
///
/// Combinations outside the two penalized regimes contribute 0.
pub fn aur_pair_loss(
    a: f64,
    p_hat_i: f64,
    p_hat_j: f64,
    p_i: u8,
    p_j: u8,
    cfg: &LossConfig,
) -> f64 {
    match pair_branch(a, p_i, p_j, cfg) {
        PairBranch::Positive => (2.0 * a - p_hat_i - p_hat_j).max(0.0),
        PairBranch::Negative => (-a - p_hat_i + p_hat_j).max(0.0),
        PairBranch::Inactive => 0.0,
    }
}

fn pairs(n: usize, cfg: &LossConfig) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..n)
        .flat_map(move |i| (0..n).map(move |j| (i, j)))
        .filter(move |&(i, j)| !(cfg.exclude_diagonal && i == j))
}

/// `Σ_i Σ_j w_i · pair_loss(i, j)` over ordered pairs.
pub fn aur_loss(
    p_hat: &[f64],
    p: &[u8],
    stats: &RelationStats,
    w: &BalanceWeights,
    cfg: &LossConfig,
) -> f64 {
    pairs(p_hat.len(), cfg)
        .map(|(i, j)| {
            w.weights[i] * aur_pair_loss(stats.a[(i, j)], p_hat[i], p_hat[j], p[i], p[j], cfg)
        })
        .sum()
}

/// Loss terms of one sample together with `d total / d p̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub cross: f64,
    pub aur: f64,
    pub total: f64,
    pub grad: Vec<f64>,
    /// Distance to the nearest clamp edge or hinge corner.
    pub kink_margin: f64,
}

/// `L_cross + λ · L_AUR` for one sample, with its gradient.
pub fn joint_loss(
    p_hat: &[f64],
    p: &[u8],
    stats: &RelationStats,
    w: &BalanceWeights,
    cfg: &LossConfig,
) -> JointLoss {
    let cross = weighted_cross_entropy(p_hat, p, w);
    let aur = aur_loss(p_hat, p, stats, w, cfg);
    let mut grad = weighted_cross_entropy_grad(p_hat, p, w);

    let mut margin = p_hat
        .iter()
        .map(|&q| (q - CLAMP_EPS).abs().min((1.0 - CLAMP_EPS - q).abs()))
        .fold(f64::INFINITY, f64::min);
    for (i, j) in pairs(p_hat.len(), cfg) {
        let a = stats.a[(i, j)];
        let wi = w.weights[i] * cfg.lambda;
        match pair_branch(a, p[i], p[j], cfg) {
            PairBranch::Positive => {
                let arg = 2.0 * a - p_hat[i] - p_hat[j];
                margin = margin.min(arg.abs());
                if arg > 0.0 {
                    grad[i] -= wi;
                    grad[j] -= wi;
                }
            }
            PairBranch::Negative => {
                let arg = -a - p_hat[i] + p_hat[j];
                margin = margin.min(arg.abs());
                if arg > 0.0 {
                    grad[i] -= wi;
                    grad[j] += wi;
                }
            }
            PairBranch::Inactive => {}
        }
    }
    JointLoss {
        cross,
        aur,
        total: cross + cfg.lambda * aur,
        grad,
        kink_margin: margin,
    }
}
