//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::backward`] then walks the records in reverse and
//! accumulates vector-Jacobian products into one gradient per node.
//!
//! The tape also tracks the smallest distance of any recorded input to a
//! point where the computation is not differentiable (the zero of a leaky
//! ReLU, a top-k boundary, a hinge). Finite-difference checks use this
//! margin to reject evaluation points that straddle a kink.

use super::matrix::{leaky_relu, sigmoid, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant matrix.
    MulConst(Var, Matrix),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// Multiplies row `i` of `a` by entry `i` of the column `s`.
    RowScale(Var, Var),
    Rows(Var, usize, usize),
    Col(Var, usize),
    StackRows(Vec<Var>),
    HCat(Vec<Var>),
    /// Scalar produced outside the tape with a known gradient w.r.t. its input.
    Custom(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient w.r.t. `v`. Nodes the output does not depend on get zeros.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Parameters and constants are both leaves; only
    /// whether the caller reads the gradient back distinguishes them.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest recorded distance to a non-differentiable point.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn record_kink(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin.abs());
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: x.shape(),
                rhs: r.shape(),
            });
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let v = self.value(a).hadamard(&mask)?;
        Ok(self.push(v, Op::MulConst(a, mask)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let x = self.value(a);
        let margin = x
            .as_slice()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let v = x.map(|z| leaky_relu(z, slope));
        self.record_kink(margin);
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != x.rows() {
            return Err(Error::Dimension {
                op: "row_scale",
                lhs: x.shape(),
                rhs: sv.shape(),
            });
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            let c = sv[(i, 0)];
            v.row_mut(i).iter_mut().for_each(|o| *o *= c);
        }
        Ok(self.push(v, Op::RowScale(a, s)))
    }

    /// Rows `start..start + count` of `a`.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let x = self.value(a);
        if start + count > x.rows() {
            return Err(Error::Dimension {
                op: "rows",
                lhs: x.shape(),
                rhs: (start, count),
            });
        }
        let v = Matrix::from_vec(
            count,
            x.cols(),
            x.as_slice()[start * x.cols()..(start + count) * x.cols()].to_vec(),
        )?;
        Ok(self.push(v, Op::Rows(a, start, count)))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let x = self.value(a);
        if j >= x.cols() {
            return Err(Error::Dimension {
                op: "col",
                lhs: x.shape(),
                rhs: (0, j),
            });
        }
        let v = Matrix::from_fn(x.rows(), 1, |i, _| x[(i, j)]);
        Ok(self.push(v, Op::Col(a, j)))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    lhs: (rows, cols),
                    rhs: x.shape(),
                });
            }
            rows += x.rows();
            data.extend_from_slice(x.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::StackRows(parts.to_vec())))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != rows {
                return Err(Error::Dimension {
                    op: "hcat",
                    lhs: (rows, cols),
                    rhs: x.shape(),
                });
            }
            cols += x.cols();
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = &self.nodes[p.0].value;
            for i in 0..rows {
                v.row_mut(i)[offset..offset + x.cols()].copy_from_slice(x.row(i));
            }
            offset += x.cols();
        }
        Ok(self.push(v, Op::HCat(parts.to_vec())))
    }

    /// Records a scalar `value` computed outside the tape from `input`, with
    /// `grad` = d value / d input.
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Matrix) -> Result<Var> {
        self.value(input)
            .ensure_same_shape(&grad, "custom_scalar")?;
        Ok(self.push(Matrix::filled(1, 1, value), Op::Custom(input, grad)))
    }

    /// Reverse pass from the `1 × 1` node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: out.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // leaves keep their gradient for the caller
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.transpose().matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in gr.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *r, gr)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::MulConst(a, mask) => accumulate(&mut grads, *a, g.hadamard(mask)?)?,
                Op::LeakyRelu(a, slope) => {
                    let ga = self
                        .value(*a)
                        .zip_map(&g, |z, gv| if z >= 0.0 { gv } else { slope * gv })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let ga = node.value.zip_map(&g, |y, gv| gv * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = y[(i, j)] * (g[(i, j)] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowScale(a, s) => {
                    let x = self.value(*a);
                    let sv = self.value(*s);
                    let mut ga = g.clone();
                    let mut gs = Matrix::zeros(sv.rows(), 1);
                    for i in 0..x.rows() {
                        let c = sv[(i, 0)];
                        ga.row_mut(i).iter_mut().for_each(|o| *o *= c);
                        gs[(i, 0)] = x.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    }
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *s, gs)?;
                }
                Op::Rows(a, start, count) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    let c = x.cols();
                    ga.as_mut_slice()[start * c..(start + count) * c].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Col(a, j) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        ga[(i, *j)] = g[(i, 0)];
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let gp = Matrix::from_vec(
                            r,
                            c,
                            g.as_slice()[offset * c..(offset + r) * c].to_vec(),
                        )?;
                        offset += r;
                        accumulate(&mut grads, p, gp)?;
                    }
                }
                Op::HCat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let gp = Matrix::from_fn(r, c, |i, j| g[(i, offset + j)]);
                        offset += c;
                        accumulate(&mut grads, p, gp)?;
                    }
                }
                Op::Custom(a, local) => {
                    accumulate(&mut grads, *a, local.scale(g[(0, 0)]))?;
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        // keep entries away from 0 so leaky-relu kinks are not straddled
        Matrix::from_fn(r, c, |_, _| {
            let v: f64 = rng.random_range(1e-3..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Reduces any matrix node to a scalar through a fixed random weighting.
    fn reduce(tape: &mut Tape, v: Var, weights: &Matrix) -> Var {
        let val = tape.value(v).hadamard(weights).unwrap().sum();
        tape.custom_scalar(v, val, weights.clone()).unwrap()
    }

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, r: usize, c: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, r, c);
        let mut probe = Tape::new();
        let pv = probe.leaf(x.clone());
        let out = build(&mut probe, pv);
        let (or, oc) = probe.value(out).shape();
        let weights = random(&mut rng, or, oc);

        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(m.clone());
            let o = build(&mut t, v);
            t.value(o).hadamard(&weights).unwrap().sum()
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let o = build(&mut t, v);
        let loss = reduce(&mut t, o, &weights);
        let analytic = t.backward(loss).unwrap().get(v);
        let numeric = finite_diff_grad(eval, &x, 1e-5).unwrap();
        assert!(
            rel_err(&analytic, &numeric) < 1e-4,
            "{analytic:?} vs {numeric:?}"
        );
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(|t, v| t.leaky_relu(v, 0.01), 3, 4, 1);
        check_unary(|t, v| t.sigmoid(v), 3, 4, 2);
        check_unary(|t, v| t.softmax_rows(v), 3, 4, 3);
        check_unary(|t, v| t.scale(v, -2.5), 3, 4, 4);
        check_unary(|t, v| t.rows(v, 1, 2).unwrap(), 3, 4, 5);
        check_unary(|t, v| t.col(v, 2).unwrap(), 3, 4, 6);
        check_unary(|t, v| t.matmul_t(v, v).unwrap(), 3, 4, 7);
        check_unary(
            |t, v| {
                let a = t.rows(v, 0, 1).unwrap();
                let b = t.rows(v, 2, 1).unwrap();
                let s = t.stack_rows(&[b, a, v, a]).unwrap();
                let h = t.hcat(&[v, v]).unwrap();
                let hs = t.rows(h, 0, 3).unwrap();
                let hs = t.col(hs, 5).unwrap();
                let pad = t_col_pad(t, hs);
                let rs = t.row_scale(s, pad).unwrap();
                t.softmax_rows(rs)
            },
            3,
            4,
            8,
        );
        check_unary(
            |t, v| {
                let mask = Matrix::from_fn(3, 4, |i, j| ((i + j) % 2) as f64);
                t.mul_const(v, mask).unwrap()
            },
            3,
            4,
            9,
        );
    }

    // Pads a 3x1 column to the 6x1 needed by the stacked matrix above.
    fn t_col_pad(t: &mut Tape, c: Var) -> Var {
        t.stack_rows(&[c, c]).unwrap()
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let row = random(&mut rng, 1, 2);
        let weights = random(&mut rng, 3, 2);

        let build = |t: &mut Tape, a: Var, b: Var, row: Var| {
            let p = t.matmul(a, b).unwrap();
            let q = t.add_row(p, row).unwrap();
            let s = t.add(q, p).unwrap();
            t.leaky_relu(s, 0.1)
        };
        let mut t = Tape::new();
        let (va, vb, vr) = (t.leaf(a.clone()), t.leaf(b.clone()), t.leaf(row.clone()));
        let out = build(&mut t, va, vb, vr);
        let loss = reduce(&mut t, out, &weights);
        let g = t.backward(loss).unwrap();

        let eval = |a: &Matrix, b: &Matrix, r: &Matrix| {
            let mut t = Tape::new();
            let (va, vb, vr) = (t.leaf(a.clone()), t.leaf(b.clone()), t.leaf(r.clone()));
            let out = build(&mut t, va, vb, vr);
            t.value(out).hadamard(&weights).unwrap().sum()
        };
        let na = finite_diff_grad(|m| eval(m, &b, &row), &a, 1e-5).unwrap();
        let nb = finite_diff_grad(|m| eval(&a, m, &row), &b, 1e-5).unwrap();
        let nr = finite_diff_grad(|m| eval(&a, &b, m), &row, 1e-5).unwrap();
        assert!(rel_err(&g.get(va), &na) < 1e-4);
        assert!(rel_err(&g.get(vb), &nb) < 1e-4);
        assert!(rel_err(&g.get(vr), &nr) < 1e-4);
    }

    #[test]
    fn constant_output_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 3.0));
        let c = t.leaf(Matrix::filled(1, 1, 7.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x), Matrix::zeros(2, 2));
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let x = Matrix::row_vector(&[0.3, -1.2, 2.0]);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let sq = t.matmul_t(v, v).unwrap();
        let half = t.scale(sq, 0.5);
        let g = t.backward(half).unwrap().get(v);
        for (a, b) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kink_margin_tracks_leaky_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[0.5, -0.002, 3.0]));
        t.leaky_relu(x, 0.01);
        assert!((t.kink_margin() - 0.002).abs() < 1e-15);
        t.record_kink(-1e-4);
        assert!((t.kink_margin() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }
}
