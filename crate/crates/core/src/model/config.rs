use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::DEFAULT_LEAKY_SLOPE;

/// Whether every unit gets its own classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierSharing {
    Shared,
    #[default]
    PerUnit,
}

/// How the local feature and the relation-layer outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Sigmoid-gated sum over layers (the learned fusion).
    #[default]
    Attention,
    /// Unweighted mean over layers.
    Avg,
    /// Layers concatenated along the feature axis.
    Concat,
    /// One classification per layer, probabilities averaged.
    ScoreAvg,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Attention => "attention",
            FusionMode::Avg => "avg",
            FusionMode::Concat => "concat",
            FusionMode::ScoreAvg => "score-avg",
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "avg" => Ok(FusionMode::Avg),
            "concat" => Ok(FusionMode::Concat),
            "score-avg" => Ok(FusionMode::ScoreAvg),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected attention|avg|concat|score-avg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of units (labels).
    pub n: usize,
    /// Local feature dimension.
    pub d_l: usize,
    /// Query/key projection dimension.
    pub d_m: usize,
    /// Number of parallel relation layers.
    pub m: usize,
    /// Top-k retention count; `None` means `ceil(n / 2)`.
    pub k: Option<usize>,
    /// Relation layers kept per sample under dropout.
    pub t: usize,
    pub leaky_slope: f64,
    pub classifier_sharing: ClassifierSharing,
    pub fusion: FusionMode,
    /// Width of the classifier's hidden layer.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 8,
            d_l: 512,
            d_m: 256,
            m: 4,
            k: None,
            t: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            classifier_sharing: ClassifierSharing::PerUnit,
            fusion: FusionMode::Attention,
            hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or(self.n.div_ceil(2))
    }

    /// Width of the vector each classifier head consumes.
    pub fn classifier_input(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => (self.m + 1) * self.d_l,
            _ => self.d_l,
        }
    }

    pub fn head_count(&self) -> usize {
        match self.classifier_sharing {
            ClassifierSharing::Shared => 1,
            ClassifierSharing::PerUnit => self.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if self.d_l == 0 || self.d_m == 0 || self.hidden == 0 {
            return fail("d_l, d_m and hidden must be at least 1".into());
        }
        let k = self.effective_k();
        if k == 0 || k > self.n {
            return fail(format!("k = {k} outside 1..={}", self.n));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope = {} outside (0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Additional checks that apply when relation dropout is active.
    pub fn validate_dropout(&self) -> Result<()> {
        if self.m > 0 && (self.t == 0 || self.t > self.m) {
            return Err(Error::Config(format!(
                "t = {} outside 1..={} (m)",
                self.t, self.m
            )));
        }
        Ok(())
    }
}
