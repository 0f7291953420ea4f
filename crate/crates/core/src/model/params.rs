use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ClassifierSharing, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Query/key projections of one relation layer, each `d_m × d_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationLayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
}

impl RelationLayerParams {
    pub fn d_m(&self) -> usize {
        self.wq.rows()
    }
}

/// Fusion projection `q0`, a `d_l × 1` column shared by all layers and units.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub q0: Matrix,
}

/// Two-layer classifier head: `hidden × d_in` then `2 × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden_w: Matrix,
    pub hidden_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub sharing: ClassifierSharing,
    pub heads: Vec<Head>,
}

impl ClassifierParams {
    /// Head used for unit `i`.
    pub fn head(&self, i: usize) -> &Head {
        match self.sharing {
            ClassifierSharing::Shared => &self.heads[0],
            ClassifierSharing::PerUnit => &self.heads[i],
        }
    }
}

/// Every trainable tensor of the network.
///
/// The same structure doubles as the gradient container and the optimizer's
/// velocity buffer, so element-wise updates walk [`ModelParams::tensors`]
/// of two instances in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<RelationLayerParams>,
    pub fusion: FusionParams,
    pub classifier: ClassifierParams,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    // fan_in = cols, fan_out = rows for a `rows × cols` weight acting on columns
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, drawn from a seeded stream in a
    /// fixed order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..cfg.m)
            .map(|_| RelationLayerParams {
                wq: glorot(&mut rng, cfg.d_m, cfg.d_l),
                wk: glorot(&mut rng, cfg.d_m, cfg.d_l),
            })
            .collect();
        let q0 = glorot(&mut rng, cfg.d_l, 1);
        let d_in = cfg.classifier_input();
        let heads = (0..cfg.head_count())
            .map(|_| Head {
                hidden_w: glorot(&mut rng, cfg.hidden, d_in),
                hidden_b: Matrix::zeros(1, cfg.hidden),
                out_w: glorot(&mut rng, 2, cfg.hidden),
                out_b: Matrix::zeros(1, 2),
            })
            .collect();
        Ok(ModelParams {
            layers,
            fusion: FusionParams { q0 },
            classifier: ClassifierParams {
                sharing: cfg.classifier_sharing,
                heads,
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// Tensors in canonical order: `wq[l]`/`wk[l]` per layer, `q0`, then
    /// classifier heads.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.wq);
            out.push(&l.wk);
        }
        out.push(&self.fusion.q0);
        for h in &self.classifier.heads {
            out.extend([&h.hidden_w, &h.hidden_b, &h.out_w, &h.out_b]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.wq);
            out.push(&mut l.wk);
        }
        out.push(&mut self.fusion.q0);
        for h in &mut self.classifier.heads {
            out.extend([&mut h.hidden_w, &mut h.hidden_b, &mut h.out_w, &mut h.out_b]);
        }
        out
    }

    /// Checkpoint names aligned with [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            out.push(format!("wq[{l}]"));
            out.push(format!("wk[{l}]"));
        }
        out.push("q0".to_string());
        let per_unit = self.classifier.sharing == ClassifierSharing::PerUnit;
        for i in 0..self.classifier.heads.len() {
            let suffix = if per_unit {
                format!(".unit{i}")
            } else {
                String::new()
            };
            for part in ["cls.hidden.w", "cls.hidden.b", "cls.out.w", "cls.out.b"] {
                out.push(format!("{part}{suffix}"));
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        self.tensor_names()
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        let src = other.tensors();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Config(format!(
                "parameter sets differ in tensor count: {} vs {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.axpy(alpha, s)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Checks tensor shapes against a configuration.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::shape_template(cfg);
        let ours = self.tensors();
        let expected = reference.tensors();
        if ours.len() != expected.len() || self.classifier.sharing != cfg.classifier_sharing {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, configuration implies {}",
                ours.len(),
                expected.len()
            )));
        }
        for ((name, a), b) in self.tensor_names().iter().zip(ours).zip(expected) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    fn shape_template(cfg: &ModelConfig) -> ModelParams {
        let d_in = cfg.classifier_input();
        ModelParams {
            layers: (0..cfg.m)
                .map(|_| RelationLayerParams {
                    wq: Matrix::zeros(cfg.d_m, cfg.d_l),
                    wk: Matrix::zeros(cfg.d_m, cfg.d_l),
                })
                .collect(),
            fusion: FusionParams {
                q0: Matrix::zeros(cfg.d_l, 1),
            },
            classifier: ClassifierParams {
                sharing: cfg.classifier_sharing,
                heads: (0..cfg.head_count())
                    .map(|_| Head {
                        hidden_w: Matrix::zeros(cfg.hidden, d_in),
                        hidden_b: Matrix::zeros(1, cfg.hidden),
                        out_w: Matrix::zeros(2, cfg.hidden),
                        out_b: Matrix::zeros(1, 2),
                    })
                    .collect(),
            },
        }
    }
}
