//! Relation layers, fusion and classification.
//!
//! Every computation is expressed once, as a builder on a [`Tape`]. The
//! free functions at the bottom of this file run those builders on a
//! throwaway tape and return plain values; training reuses the same
//! builders and keeps the tape for the reverse pass.

use super::config::{ClassifierSharing, FusionMode, ModelConfig};
use super::params::{ClassifierParams, FusionParams, Head, ModelParams, RelationLayerParams};
use crate::error::{Error, Result};
use crate::numeric::{Gradients, Matrix, Tape, Var};

/// Per-unit local features, one row per unit (`n × d_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Matrix,
}

impl FeatureSet {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Config(format!(
                "feature set must be at least 1 x 1, got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::input("feature set contains non-finite values"));
        }
        Ok(FeatureSet { features })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d_l(&self) -> usize {
        self.features.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.features
    }
}

/// Softmax-normalized relation coefficients of one layer; row `i` holds the
/// influence of every unit on unit `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationCoefficients {
    pub mu: Matrix,
    pub layer: usize,
}

/// Refined per-unit features produced by one relation layer (`n × d_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub r: Matrix,
}

/// Which relation layers contribute to each unit during a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPlan {
    /// `keep[l][i]`: relation layer `l` contributes to unit `i`.
    keep: Vec<Vec<bool>>,
    /// Rescaling applied to retained relation-layer terms (`m / t`).
    scale: f64,
}

impl DropoutPlan {
    fn check_subset(subset: &[usize], m: usize, t: usize) -> Result<Vec<bool>> {
        if subset.len() != t {
            return Err(Error::Config(format!(
                "dropout subset has {} layers, expected t = {t}",
                subset.len()
            )));
        }
        let mut keep = vec![false; m];
        for &l in subset {
            if l >= m || keep[l] {
                return Err(Error::Config(format!(
                    "invalid dropout subset {subset:?} for m = {m}"
                )));
            }
            keep[l] = true;
        }
        Ok(keep)
    }

    fn scale_for(m: usize, t: usize) -> Result<f64> {
        if t == 0 || t > m {
            return Err(Error::Config(format!("t = {t} outside 1..={m}")));
        }
        Ok(m as f64 / t as f64)
    }

    /// One subset of relation layers shared by all `n` units.
    pub fn shared(subset: &[usize], m: usize, t: usize, n: usize) -> Result<Self> {
        let scale = Self::scale_for(m, t)?;
        let keep = Self::check_subset(subset, m, t)?;
        Ok(DropoutPlan {
            keep: keep.into_iter().map(|k| vec![k; n]).collect(),
            scale,
        })
    }

    /// An independent subset per unit; `subsets[i]` applies to unit `i`.
    pub fn per_unit(subsets: &[Vec<usize>], m: usize, t: usize) -> Result<Self> {
        let scale = Self::scale_for(m, t)?;
        let n = subsets.len();
        let mut keep = vec![vec![false; n]; m];
        for (i, s) in subsets.iter().enumerate() {
            for (l, k) in Self::check_subset(s, m, t)?.into_iter().enumerate() {
                keep[l][i] = k;
            }
        }
        Ok(DropoutPlan { keep, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn layers(&self) -> usize {
        self.keep.len()
    }

    /// Column mask for layer `l` broadcast to `cols` columns, or `None`
    /// when the layer is dropped for every unit.
    fn layer_mask(&self, l: usize, cols: usize) -> Option<Matrix> {
        let keep = &self.keep[l];
        if keep.iter().all(|k| !k) {
            return None;
        }
        let scale = self.scale;
        Some(Matrix::from_fn(keep.len(), cols, |i, _| {
            if keep[i] {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// Forward-pass mode. Evaluation always fuses every relation layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Mode {
    #[default]
    Eval,
    Train(DropoutPlan),
}

/// Tape handles for one classifier head.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundHead {
    hidden_w: Var,
    hidden_b: Var,
    out_w: Var,
    out_b: Var,
}

/// Tape handles for every parameter tensor, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub(crate) struct BoundParams {
    layers: Vec<(Var, Var)>,
    q0: Var,
    heads: Vec<BoundHead>,
    sharing: ClassifierSharing,
}

fn bind_head(t: &mut Tape, h: &Head) -> BoundHead {
    BoundHead {
        hidden_w: t.leaf(h.hidden_w.clone()),
        hidden_b: t.leaf(h.hidden_b.clone()),
        out_w: t.leaf(h.out_w.clone()),
        out_b: t.leaf(h.out_b.clone()),
    }
}

impl BoundParams {
    pub(crate) fn bind(t: &mut Tape, p: &ModelParams) -> Self {
        let layers = p
            .layers
            .iter()
            .map(|l| (t.leaf(l.wq.clone()), t.leaf(l.wk.clone())))
            .collect();
        let q0 = t.leaf(p.fusion.q0.clone());
        let heads = p.classifier.heads.iter().map(|h| bind_head(t, h)).collect();
        BoundParams {
            layers,
            q0,
            heads,
            sharing: p.classifier.sharing,
        }
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(q, k) in &self.layers {
            out.push(q);
            out.push(k);
        }
        out.push(self.q0);
        for h in &self.heads {
            out.extend([h.hidden_w, h.hidden_b, h.out_w, h.out_b]);
        }
        out
    }

    /// Collects parameter gradients into a [`ModelParams`]-shaped container.
    pub(crate) fn gradients(&self, template: &ModelParams, grads: &mut Gradients) -> ModelParams {
        let mut out = template.clone();
        for (slot, var) in out.tensors_mut().into_iter().zip(self.vars()) {
            *slot = grads.take(var);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// tape builders

/// Returns `(μ, scaled scores)`; `μ` is a row-wise monotone map of the scores.
pub(crate) fn coefficients_on(
    t: &mut Tape,
    f: Var,
    wq: Var,
    wk: Var,
    slope: f64,
) -> Result<(Var, Var)> {
    let d_m = t.value(wq).rows();
    let q = t.matmul_t(f, wq)?;
    let k = t.matmul_t(f, wk)?;
    let logits = t.matmul_t(q, k)?;
    let scaled = t.scale(logits, 1.0 / (d_m as f64).sqrt());
    let act = t.leaky_relu(scaled, slope);
    Ok((t.softmax_rows(act), scaled))
}

/// Indices of the `k` largest entries of `row`, ties going to the lower
/// index, plus the gap between the k-th and (k+1)-th largest values.
pub(crate) fn top_k(row: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let gap = if k < row.len() {
        row[order[k - 1]] - row[order[k]]
    } else {
        f64::INFINITY
    };
    order.truncate(k);
    (order, gap)
}

pub(crate) fn topk_mask(mu: &Matrix, k: usize) -> (Matrix, f64) {
    let mut mask = Matrix::zeros(mu.rows(), mu.cols());
    let mut margin = f64::INFINITY;
    for i in 0..mu.rows() {
        let (idx, gap) = top_k(mu.row(i), k);
        margin = margin.min(gap);
        for j in idx {
            mask[(i, j)] = 1.0;
        }
    }
    (mask, margin)
}

pub(crate) fn topk_aggregate_on(
    t: &mut Tape,
    f: Var,
    mu: Var,
    k: usize,
    slope: f64,
) -> Result<Var> {
    let n = t.value(mu).cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} outside 1..={n}")));
    }
    let masked = if k < n {
        let (mask, _) = topk_mask(t.value(mu), k);
        t.mul_const(mu, mask)?
    } else {
        mu
    };
    let agg = t.matmul(masked, f)?;
    Ok(t.leaky_relu(agg, slope))
}

fn gates_on(t: &mut Tape, r: Var, q0: Var) -> Result<Var> {
    let z = t.matmul(r, q0)?;
    Ok(t.sigmoid(z))
}

/// Applies the dropout plan of relation layer `l` to `x`; `None` means the
/// layer contributes nothing.
fn apply_plan(t: &mut Tape, x: Var, l: usize, mode: &Mode) -> Result<Option<Var>> {
    match mode {
        Mode::Eval => Ok(Some(x)),
        Mode::Train(plan) => {
            let cols = t.value(x).cols();
            match plan.layer_mask(l, cols) {
                None => Ok(None),
                Some(mask) if mask.as_slice().iter().all(|&v| v == 1.0) => Ok(Some(x)),
                Some(mask) => Ok(Some(t.mul_const(x, mask)?)),
            }
        }
    }
}

fn sum_all(t: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &term in &terms[1..] {
        acc = t.add(acc, term)?;
    }
    Ok(acc)
}

/// Gated fusion: `S_i = β_i⁰ F_i + Σ_l β_iˡ R_iˡ`, with dropout applied to the
/// relation-layer gates.
pub(crate) fn attention_fuse_on(
    t: &mut Tape,
    f: Var,
    outputs: &[Option<Var>],
    q0: Var,
    mode: &Mode,
) -> Result<Var> {
    let g0 = gates_on(t, f, q0)?;
    let mut terms = vec![t.row_scale(f, g0)?];
    for (l, r) in outputs.iter().enumerate() {
        let Some(r) = *r else { continue };
        let g = gates_on(t, r, q0)?;
        if let Some(g) = apply_plan(t, g, l, mode)? {
            terms.push(t.row_scale(r, g)?);
        }
    }
    sum_all(t, &terms)
}

fn head_on(t: &mut Tape, x: Var, h: &BoundHead, slope: f64) -> Result<Var> {
    let z = t.matmul_t(x, h.hidden_w)?;
    let z = t.add_row(z, h.hidden_b)?;
    let hidden = t.leaky_relu(z, slope);
    let logits = t.matmul_t(hidden, h.out_w)?;
    let logits = t.add_row(logits, h.out_b)?;
    let probs = t.softmax_rows(logits);
    t.col(probs, 1)
}

/// Occurrence probability per unit (`n × 1`); column 1 of the two-way
/// softmax is the "present" class.
pub(crate) fn classify_on(
    t: &mut Tape,
    s: Var,
    heads: &[BoundHead],
    sharing: ClassifierSharing,
    slope: f64,
) -> Result<Var> {
    match sharing {
        ClassifierSharing::Shared => head_on(t, s, &heads[0], slope),
        ClassifierSharing::PerUnit => {
            let n = t.value(s).rows();
            if heads.len() != n {
                return Err(Error::Dimension {
                    op: "classify",
                    lhs: t.value(s).shape(),
                    rhs: (heads.len(), 1),
                });
            }
            let mut parts = Vec::with_capacity(n);
            for (i, h) in heads.iter().enumerate() {
                let row = t.rows(s, i, 1)?;
                parts.push(head_on(t, row, h, slope)?);
            }
            t.stack_rows(&parts)
        }
    }
}

/// Full network: relation layers, fusion, classifier. Returns `p̂` (`n × 1`).
pub(crate) fn forward_on(
    t: &mut Tape,
    f: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    mode: &Mode,
) -> Result<Var> {
    if p.layers.len() != cfg.m {
        return Err(Error::Config(format!(
            "{} relation layers bound, configuration says m = {}",
            p.layers.len(),
            cfg.m
        )));
    }
    if let Mode::Train(plan) = mode {
        if plan.layers() != cfg.m {
            return Err(Error::Config(format!(
                "dropout plan covers {} layers, m = {}",
                plan.layers(),
                cfg.m
            )));
        }
    }
    let slope = cfg.leaky_slope;
    let k = cfg.effective_k();

    // Layers fully dropped by a shared plan are never built.
    let mut outputs = Vec::with_capacity(cfg.m);
    for (l, &(wq, wk)) in p.layers.iter().enumerate() {
        if let Mode::Train(plan) = mode {
            if plan.keep[l].iter().all(|k| !k) {
                outputs.push(None);
                continue;
            }
        }
        let (mu, scores) = coefficients_on(t, f, wq, wk, slope)?;
        // top-k gap, in score units
        if k < cfg.n {
            let (_, gap) = topk_mask(t.value(scores), k);
            t.record_kink(gap);
        }
        outputs.push(Some(topk_aggregate_on(t, f, mu, k, slope)?));
    }

    let layer_count = (cfg.m + 1) as f64;
    match cfg.fusion {
        FusionMode::Attention => {
            let s = attention_fuse_on(t, f, &outputs, p.q0, mode)?;
            classify_on(t, s, &p.heads, p.sharing, slope)
        }
        FusionMode::Avg => {
            let mut terms = vec![f];
            for (l, r) in outputs.iter().enumerate() {
                let Some(r) = *r else { continue };
                if let Some(x) = apply_plan(t, r, l, mode)? {
                    terms.push(x);
                }
            }
            let total = sum_all(t, &terms)?;
            let s = t.scale(total, 1.0 / layer_count);
            classify_on(t, s, &p.heads, p.sharing, slope)
        }
        FusionMode::Concat => {
            let mut blocks = vec![f];
            for (l, r) in outputs.iter().enumerate() {
                let x = match *r {
                    Some(r) => apply_plan(t, r, l, mode)?,
                    None => None,
                };
                let block = match x {
                    Some(x) => x,
                    None => t.leaf(Matrix::zeros(t.value(f).rows(), t.value(f).cols())),
                };
                blocks.push(block);
            }
            let s = t.hcat(&blocks)?;
            classify_on(t, s, &p.heads, p.sharing, slope)
        }
        FusionMode::ScoreAvg => {
            let mut scores = vec![classify_on(t, f, &p.heads, p.sharing, slope)?];
            for (l, r) in outputs.iter().enumerate() {
                let Some(r) = *r else { continue };
                let pr = classify_on(t, r, &p.heads, p.sharing, slope)?;
                if let Some(x) = apply_plan(t, pr, l, mode)? {
                    scores.push(x);
                }
            }
            let total = sum_all(t, &scores)?;
            Ok(t.scale(total, 1.0 / layer_count))
        }
    }
}

// ---------------------------------------------------------------------------
// value-level operations

fn check_layer(f: &FeatureSet, layer: &RelationLayerParams) -> Result<()> {
    for w in [&layer.wq, &layer.wk] {
        if w.cols() != f.d_l() || w.rows() != layer.d_m() {
            return Err(Error::Dimension {
                op: "relation layer",
                lhs: f.matrix().shape(),
                rhs: w.shape(),
            });
        }
    }
    Ok(())
}

/// Relation coefficients of one layer: row-wise softmax of the leaky-ReLU
/// activated, `√d_m`-scaled query/key products.
pub fn relation_coefficients(
    f: &FeatureSet,
    layer: &RelationLayerParams,
    slope: f64,
) -> Result<RelationCoefficients> {
    check_layer(f, layer)?;
    let mut t = Tape::new();
    let fv = t.leaf(f.matrix().clone());
    let wq = t.leaf(layer.wq.clone());
    let wk = t.leaf(layer.wk.clone());
    let (mu, _) = coefficients_on(&mut t, fv, wq, wk, slope)?;
    Ok(RelationCoefficients {
        mu: t.value(mu).clone(),
        layer: 0,
    })
}

/// `R_i = leaky_relu(Σ_{j ∈ top-k(i)} μ_ij F_j)`.
pub fn topk_aggregate(
    f: &FeatureSet,
    mu: &RelationCoefficients,
    k: usize,
    slope: f64,
) -> Result<LayerOutput> {
    if mu.mu.shape() != (f.n(), f.n()) {
        return Err(Error::Dimension {
            op: "topk_aggregate",
            lhs: f.matrix().shape(),
            rhs: mu.mu.shape(),
        });
    }
    let mut t = Tape::new();
    let fv = t.leaf(f.matrix().clone());
    let muv = t.leaf(mu.mu.clone());
    let r = topk_aggregate_on(&mut t, fv, muv, k, slope)?;
    Ok(LayerOutput {
        r: t.value(r).clone(),
    })
}

/// Runs all relation layers in parallel on the same dictionary `F`.
pub fn run_relation_module(
    f: &FeatureSet,
    layers: &[RelationLayerParams],
    cfg: &ModelConfig,
) -> Result<Vec<LayerOutput>> {
    if layers.len() != cfg.m {
        return Err(Error::Config(format!(
            "{} relation layers given, m = {}",
            layers.len(),
            cfg.m
        )));
    }
    layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut mu = relation_coefficients(f, layer, cfg.leaky_slope)?;
            mu.layer = l;
            topk_aggregate(f, &mu, cfg.effective_k(), cfg.leaky_slope)
        })
        .collect()
}

/// Per-unit fusion gates `β_i = sigmoid(R_i · q0)`.
pub fn fusion_weights(r: &Matrix, q: &FusionParams) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let rv = t.leaf(r.clone());
    let qv = t.leaf(q.q0.clone());
    let g = gates_on(&mut t, rv, qv)?;
    Ok(t.value(g).as_slice().to_vec())
}

fn fuse_values(
    layer0: &FeatureSet,
    outputs: &[LayerOutput],
    q: &FusionParams,
    mode: &Mode,
) -> Result<Matrix> {
    let mut t = Tape::new();
    let f = t.leaf(layer0.matrix().clone());
    let q0 = t.leaf(q.q0.clone());
    let rs: Vec<Option<Var>> = outputs.iter().map(|o| Some(t.leaf(o.r.clone()))).collect();
    let s = attention_fuse_on(&mut t, f, &rs, q0, mode)?;
    Ok(t.value(s).clone())
}

/// Gated fusion over the local feature and all relation-layer outputs.
pub fn fuse(layer0: &FeatureSet, outputs: &[LayerOutput], q: &FusionParams) -> Result<Matrix> {
    fuse_values(layer0, outputs, q, &Mode::Eval)
}

/// Gated fusion keeping only the relation layers in `subset`, rescaled by
/// `m / t`. The local-feature term is always kept and never rescaled.
pub fn fuse_with_dropout(
    layer0: &FeatureSet,
    outputs: &[LayerOutput],
    q: &FusionParams,
    subset: &[usize],
    m: usize,
    t: usize,
) -> Result<Matrix> {
    if outputs.len() != m {
        return Err(Error::Config(format!(
            "{} layer outputs given, m = {m}",
            outputs.len()
        )));
    }
    let plan = DropoutPlan::shared(subset, m, t, layer0.n())?;
    fuse_values(layer0, outputs, q, &Mode::Train(plan))
}

/// Occurrence probability per unit from fused representations `S`.
pub fn classify(s: &Matrix, params: &ClassifierParams, slope: f64) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let sv = t.leaf(s.clone());
    let heads: Vec<BoundHead> = params.heads.iter().map(|h| bind_head(&mut t, h)).collect();
    let p = classify_on(&mut t, sv, &heads, params.sharing, slope)?;
    Ok(t.value(p).as_slice().to_vec())
}

/// Predicted occurrence probabilities for one sample.
pub fn forward(
    f: &FeatureSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: &Mode,
) -> Result<Vec<f64>> {
    if f.n() != cfg.n || f.d_l() != cfg.d_l {
        return Err(Error::Dimension {
            op: "forward",
            lhs: f.matrix().shape(),
            rhs: (cfg.n, cfg.d_l),
        });
    }
    let mut t = Tape::new();
    let fv = t.leaf(f.matrix().clone());
    let bound = BoundParams::bind(&mut t, params);
    let p = forward_on(&mut t, fv, &bound, cfg, mode)?;
    Ok(t.value(p).as_slice().to_vec())
}
