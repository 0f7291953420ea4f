//! Synthetic correlated multi-label data.
//!
//! Each sample belongs to one latent cluster. Labels are thresholded draws
//! of a Gaussian whose correlation matrix depends on the cluster, so
//! different clusters carry different label relations. Each unit's feature
//! encodes its own label along a private direction, a weaker mix of the
//! other units' labels, a cluster signature and isotropic noise.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::FeatureSet;
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    /// Relative sampling weight.
    #[serde(default = "one")]
    pub weight: f64,
    /// `n × n` latent correlation matrix.
    pub correlation: Vec<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_l: usize,
    pub samples: usize,
    pub clusters: Vec<ClusterSpec>,
    /// Marginal occurrence rate per unit; 0.5 for every unit when absent.
    #[serde(default)]
    pub rates: Option<Vec<f64>>,
    /// Length of the own-label component.
    #[serde(default = "one")]
    pub signal: f64,
    /// Per-unit own-label lengths; overrides `signal` when present.
    #[serde(default)]
    pub unit_signal: Option<Vec<f64>>,
    /// Length of the per-unit offset shared by both label values, which lets
    /// a unit's feature identify the unit.
    #[serde(default)]
    pub identity: f64,
    /// Length of the other-units component.
    #[serde(default)]
    pub neighbor_mix: f64,
    /// Length of the cluster signature.
    #[serde(default)]
    pub cluster_signal: f64,
    /// Per-dimension noise standard deviation.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// One cluster with independent labels.
    pub fn independent(n: usize, d_l: usize, samples: usize, noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            n,
            d_l,
            samples,
            clusters: vec![ClusterSpec {
                weight: 1.0,
                correlation: Matrix::identity(n).to_rows(),
            }],
            rates: None,
            signal: 1.0,
            unit_signal: None,
            identity: 0.0,
            neighbor_mix: 0.0,
            cluster_signal: 0.0,
            noise,
            seed,
        }
    }

    /// Six units, two equally likely clusters. Odd units (1, 3, 5) carry
    /// almost no own-label signal; each is coupled at 0.9 to one even unit,
    /// a different one per cluster: (1,2), (3,4), (5,6) in cluster 0 and
    /// (1,4), (3,6), (5,2) in cluster 1. Recovering an odd unit therefore
    /// needs its cluster-dependent partner.
    pub fn clustered_benchmark(samples: usize, seed: u64) -> Self {
        let n = 6;
        let pairs_a = [(0, 1, 0.9), (2, 3, 0.9), (4, 5, 0.9)];
        let pairs_b = [(0, 3, 0.9), (2, 5, 0.9), (4, 1, 0.9)];
        let build = |pairs: &[(usize, usize, f64)]| {
            let mut c = Matrix::identity(n);
            for &(i, j, rho) in pairs {
                c[(i, j)] = rho;
                c[(j, i)] = rho;
            }
            ClusterSpec {
                weight: 1.0,
                correlation: c.to_rows(),
            }
        };
        SyntheticSpec {
            n,
            d_l: 16,
            samples,
            clusters: vec![build(&pairs_a), build(&pairs_b)],
            rates: None,
            signal: 1.0,
            unit_signal: Some(vec![0.1, 1.0, 0.1, 1.0, 0.1, 1.0]),
            identity: 1.0,
            neighbor_mix: 0.0,
            cluster_signal: 1.0,
            noise: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<Vec<Matrix>> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.n == 0 || self.d_l == 0 || self.samples == 0 {
            return fail("n, d_l and samples must all be at least 1".into());
        }
        if self.clusters.is_empty() {
            return fail("clusters: at least one cluster is required".into());
        }
        for (name, v) in [
            ("signal", self.signal),
            ("identity", self.identity),
            ("neighbor_mix", self.neighbor_mix),
            ("cluster_signal", self.cluster_signal),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(sig) = &self.unit_signal {
            if sig.len() != self.n || sig.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return fail(format!(
                    "unit_signal must hold {} finite values >= 0",
                    self.n
                ));
            }
        }
        if let Some(rates) = &self.rates {
            if rates.len() != self.n || rates.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
                return fail(format!("rates must hold {} values in (0, 1)", self.n));
            }
        }
        let mut chols = Vec::with_capacity(self.clusters.len());
        for (k, c) in self.clusters.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return fail(format!("clusters[{k}].weight must be > 0"));
            }
            let corr = Matrix::from_rows(&c.correlation)
                .ok()
                .filter(|m| m.shape() == (self.n, self.n))
                .ok_or_else(|| {
                    Error::Spec(format!(
                        "clusters[{k}].correlation must be {0} x {0}",
                        self.n
                    ))
                })?;
            for i in 0..self.n {
                if corr[(i, i)] != 1.0 {
                    return fail(format!("clusters[{k}].correlation[{i}][{i}] must be 1"));
                }
                for j in 0..self.n {
                    let v = corr[(i, j)];
                    if !(-1.0..=1.0).contains(&v) {
                        return fail(format!(
                            "clusters[{k}].correlation[{i}][{j}] = {v} outside [-1, 1]"
                        ));
                    }
                    if v != corr[(j, i)] {
                        return fail(format!(
                            "clusters[{k}].correlation is not symmetric at ({i}, {j})"
                        ));
                    }
                }
            }
            match psd_cholesky(&corr) {
                Some(l) => chols.push(l),
                None => {
                    let (min_eig, suggestion) = nearest_correlation(&corr);
                    return fail(format!(
                        "clusters[{k}].correlation is not positive semidefinite \
                         (smallest eigenvalue {min_eig:.6}); nearest PSD correlation matrix: {}",
                        serde_json::to_string(&suggestion.to_rows()).unwrap_or_default()
                    ));
                }
            }
        }
        Ok(chols)
    }
}

/// Lower Cholesky factor of a positive semidefinite matrix, or `None` when
/// a pivot is negative beyond round-off. Zero pivots zero their column.
fn psd_cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e-10 {
            return None;
        }
        let d = d.max(0.0).sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = if d > 1e-12 { s / d } else { 0.0 };
        }
    }
    // A zero pivot with a nonzero remainder means the matrix is indefinite.
    let back = l.matmul_t(&l).ok()?;
    (back.sub(a).ok()?.max_abs() < 1e-8).then_some(l)
}

/// Smallest eigenvalue and the eigenvalue-clipped, unit-diagonal repair.
fn nearest_correlation(a: &Matrix) -> (f64, Matrix) {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
    let eig = nalgebra::SymmetricEigen::new(m);
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let repaired = &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&clipped)
        * eig.eigenvectors.transpose();
    let out = Matrix::from_fn(n, n, |i, j| {
        let s = (repaired[(i, i)] * repaired[(j, j)]).sqrt();
        if s > 0.0 {
            repaired[(i, j)] / s
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    (min, out)
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Draws a dataset; identical specs produce identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let chols = spec.validate()?;
    let (n, d_l) = (spec.n, spec.d_l);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let thresholds: Vec<f64> = match &spec.rates {
        Some(r) => r.iter().map(|&p| std_normal.inverse_cdf(1.0 - p)).collect(),
        None => vec![0.0; n],
    };
    let own: Vec<Vec<f64>> = (0..n).map(|_| random_direction(&mut rng, d_l)).collect();
    let cross: Vec<Vec<f64>> = (0..n).map(|_| random_direction(&mut rng, d_l)).collect();
    let base: Vec<Vec<f64>> = (0..n).map(|_| random_direction(&mut rng, d_l)).collect();
    let signatures: Vec<Vec<f64>> = (0..spec.clusters.len())
        .map(|_| random_direction(&mut rng, d_l))
        .collect();
    let picker = WeightedIndex::new(spec.clusters.iter().map(|c| c.weight))
        .map_err(|e| Error::Spec(format!("cluster weights: {e}")))?;
    let strength: Vec<f64> = match &spec.unit_signal {
        Some(v) => v.clone(),
        None => vec![spec.signal; n],
    };
    let mix = spec.neighbor_mix / (n.max(2) - 1) as f64;

    let mut samples = Vec::with_capacity(spec.samples);
    for id in 0..spec.samples {
        let cluster = picker.sample(&mut rng);
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let chol = &chols[cluster];
        let labels: Vec<u8> = (0..n)
            .map(|i| {
                let z: f64 = (0..=i).map(|k| chol[(i, k)] * eps[k]).sum();
                u8::from(z > thresholds[i])
            })
            .collect();
        let signs: Vec<f64> = labels.iter().map(|&y| 2.0 * y as f64 - 1.0).collect();
        let mut f = Matrix::zeros(n, d_l);
        for i in 0..n {
            let row = f.row_mut(i);
            for (d, v) in row.iter_mut().enumerate() {
                let mut x = strength[i] * signs[i] * own[i][d]
                    + spec.identity * base[i][d]
                    + spec.cluster_signal * signatures[cluster][d];
                for j in (0..n).filter(|&j| j != i) {
                    x += mix * signs[j] * cross[j][d];
                }
                *v = x;
            }
            if spec.noise > 0.0 {
                for v in row.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += spec.noise * e;
                }
            }
        }
        samples.push(Sample {
            id: id as u64,
            cluster,
            labels,
            features: FeatureSet::new(f)?,
        });
    }
    Dataset::new(n, d_l, samples)
}
