use std::sync::Arc;

use super::{gemm, AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Reduce every element to a scalar.
    All,
    /// Reduce each row of a `[rows, cols]` tensor, giving `[rows]`.
    Rows,
}

/// Elementary operation accepted by [`Tape::record`].
#[derive(Clone, Debug, PartialEq)]
pub enum ElementaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    /// `x · W + b` with inputs `[x, W, b]`.
    Affine,
    Tanh,
    Relu,
    Exp,
    Log,
    Neg,
    Sum(Reduce),
    Mean(Reduce),
    LogSumExp(Reduce),
    /// Selects the listed columns.
    Split(Vec<usize>),
    /// Interleaves the inputs into `width` columns, input `k` landing on `columns[k]`.
    Concat { columns: Vec<Vec<usize>>, width: usize },
    Scale(f64),
}

impl ElementaryOp {
    pub fn name(&self) -> &'static str {
        match self {
            ElementaryOp::Add => "add",
            ElementaryOp::Sub => "sub",
            ElementaryOp::Mul => "mul",
            ElementaryOp::Div => "div",
            ElementaryOp::Matmul => "matmul",
            ElementaryOp::Affine => "affine",
            ElementaryOp::Tanh => "tanh",
            ElementaryOp::Relu => "relu",
            ElementaryOp::Exp => "exp",
            ElementaryOp::Log => "log",
            ElementaryOp::Neg => "neg",
            ElementaryOp::Sum(_) => "sum",
            ElementaryOp::Mean(_) => "mean",
            ElementaryOp::LogSumExp(_) => "logsumexp",
            ElementaryOp::Split(_) => "split",
            ElementaryOp::Concat { .. } => "concat",
            ElementaryOp::Scale(_) => "scale",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var, broadcast: bool },
    Matmul { a: Var, b: Var },
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    Sum(Var, Reduce),
    Mean(Var, Reduce),
    LogSumExp(Var, Reduce),
    Gather { x: Var, columns: Arc<[usize]> },
    Scatter { parts: Vec<(Var, Arc<[usize]>)>, width: usize },
    StopGradient,
    RowFunction { x: Var, jacobian: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Per-leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Gradients for every trainable parameter, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.wrt(p)).collect()
    }

    pub fn into_params(mut self) -> Vec<Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|p| match self.grads[p.0].take() {
                Some(g) => g,
                None => Tensor::zeros(&self.shapes[p.0]),
            })
            .collect()
    }
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in execution order, so the node index is already a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; appears in [`Gradients::params`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t, true);
        self.params.push(v);
        v
    }

    /// Leaf that carries gradient but is not a trainable parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf treated as a constant by the backward pass.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Dispatches an [`ElementaryOp`] to the matching method.
    pub fn record(&mut self, op: &ElementaryOp, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let want = match op {
            ElementaryOp::Add
            | ElementaryOp::Sub
            | ElementaryOp::Mul
            | ElementaryOp::Div
            | ElementaryOp::Matmul => 2,
            ElementaryOp::Affine => 3,
            ElementaryOp::Concat { columns, .. } => columns.len(),
            _ => 1,
        };
        if inputs.len() != want {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: want,
                got: inputs.len(),
            });
        }
        match op {
            ElementaryOp::Add => self.add(inputs[0], inputs[1]),
            ElementaryOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementaryOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementaryOp::Div => self.div(inputs[0], inputs[1]),
            ElementaryOp::Matmul => self.matmul(inputs[0], inputs[1]),
            ElementaryOp::Affine => self.affine(inputs[0], inputs[1], inputs[2]),
            ElementaryOp::Tanh => Ok(self.tanh(inputs[0])),
            ElementaryOp::Relu => Ok(self.relu(inputs[0])),
            ElementaryOp::Exp => Ok(self.exp(inputs[0])),
            ElementaryOp::Log => Ok(self.log(inputs[0])),
            ElementaryOp::Neg => Ok(self.neg(inputs[0])),
            ElementaryOp::Sum(r) => self.sum(inputs[0], *r),
            ElementaryOp::Mean(r) => self.mean(inputs[0], *r),
            ElementaryOp::LogSumExp(r) => self.logsumexp(inputs[0], *r),
            ElementaryOp::Split(cols) => self.select_columns(inputs[0], cols.clone().into()),
            ElementaryOp::Concat { columns, width } => {
                let parts: Vec<(Var, Arc<[usize]>)> = inputs
                    .iter()
                    .zip(columns)
                    .map(|(&v, c)| (v, Arc::from(c.as_slice())))
                    .collect();
                self.concat(&parts, *width)
            }
            ElementaryOp::Scale(c) => Ok(self.scale(inputs[0], *c)),
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            true
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = bv.len();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = if broadcast {
            av.data()
                .chunks(cols)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            value,
            rg,
        ))
    }

    /// Elementwise `a + b`; `b` may be a `[cols]` vector broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Div, a, b)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(AutodiffError::RankMismatch {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm::matmul(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::matrix(m, n, out), rg))
    }

    /// Dense layer `x · W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix_dims("affine", x)?;
        let (k2, n) = self.matrix_dims("affine", w)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        if self.shape(b) != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm::matmul(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Affine { x, w, b }, Tensor::matrix(m, n, out), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; `log(0) = -inf` and negative inputs give NaN, both propagated.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    fn reduce_rows_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        self.matrix_dims(op, a)
    }

    pub fn sum(&mut self, a: Var, axis: Reduce) -> Result<Var, AutodiffError> {
        let value = match axis {
            Reduce::All => Tensor::scalar(self.value(a).data().iter().sum()),
            Reduce::Rows => {
                let (_, c) = self.reduce_rows_dims("sum", a)?;
                Tensor::vector(
                    self.value(a)
                        .data()
                        .chunks(c.max(1))
                        .map(|r| r.iter().sum())
                        .collect(),
                )
            }
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a, axis), value, rg))
    }

    pub fn mean(&mut self, a: Var, axis: Reduce) -> Result<Var, AutodiffError> {
        let value = match axis {
            Reduce::All => {
                let d = self.value(a).data();
                if d.is_empty() {
                    return Err(AutodiffError::Empty { op: "mean" });
                }
                Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64)
            }
            Reduce::Rows => {
                let (_, c) = self.reduce_rows_dims("mean", a)?;
                if c == 0 {
                    return Err(AutodiffError::Empty { op: "mean" });
                }
                Tensor::vector(
                    self.value(a)
                        .data()
                        .chunks(c)
                        .map(|r| r.iter().sum::<f64>() / c as f64)
                        .collect(),
                )
            }
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a, axis), value, rg))
    }

    /// Max-shifted `log Σ exp`. Empty or all `-inf` input yields `-inf`.
    pub fn logsumexp(&mut self, a: Var, axis: Reduce) -> Result<Var, AutodiffError> {
        let value = match axis {
            Reduce::All => Tensor::scalar(logsumexp(self.value(a).data())),
            Reduce::Rows => {
                let (_, c) = self.reduce_rows_dims("logsumexp", a)?;
                Tensor::vector(self.value(a).data().chunks(c.max(1)).map(logsumexp).collect())
            }
        };
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExp(a, axis), value, rg))
    }

    /// Gathers `columns` of a `[rows, cols]` tensor into `[rows, columns.len()]`.
    pub fn select_columns(&mut self, x: Var, columns: Arc<[usize]>) -> Result<Var, AutodiffError> {
        let (r, c) = self.matrix_dims("split", x)?;
        if let Some(&bad) = columns.iter().find(|&&j| j >= c) {
            return Err(AutodiffError::ColumnOutOfRange {
                op: "split",
                column: bad,
                width: c,
            });
        }
        let src = self.value(x).data();
        let k = columns.len();
        let mut out = Vec::with_capacity(r * k);
        for row in src.chunks(c) {
            out.extend(columns.iter().map(|&j| row[j]));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Gather { x, columns }, Tensor::matrix(r, k, out), rg))
    }

    /// Splits `x` into (listed columns, remaining columns).
    pub fn split(&mut self, x: Var, columns: Arc<[usize]>, rest: Arc<[usize]>) -> Result<(Var, Var), AutodiffError> {
        let a = self.select_columns(x, columns)?;
        let b = self.select_columns(x, rest)?;
        Ok((a, b))
    }

    /// Inverse of [`Tape::split`]: writes each part's columns to the given positions.
    pub fn concat(&mut self, parts: &[(Var, Arc<[usize]>)], width: usize) -> Result<Var, AutodiffError> {
        let rows = match parts.first() {
            Some(&(v, _)) => self.matrix_dims("concat", v)?.0,
            None => return Err(AutodiffError::Empty { op: "concat" }),
        };
        let mut covered = vec![false; width];
        for (v, cols) in parts {
            let (r, c) = self.matrix_dims("concat", *v)?;
            if r != rows || c != cols.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![rows, cols.len()],
                    rhs: vec![r, c],
                });
            }
            for &j in cols.iter() {
                if j >= width || covered[j] {
                    return Err(AutodiffError::ColumnOutOfRange {
                        op: "concat",
                        column: j,
                        width,
                    });
                }
                covered[j] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: vec![rows, width],
                rhs: vec![rows, covered.iter().filter(|&&c| c).count()],
            });
        }
        let mut out = vec![0.0; rows * width];
        for (v, cols) in parts {
            let src = self.value(*v).data();
            let k = cols.len();
            for i in 0..rows {
                for (jj, &j) in cols.iter().enumerate() {
                    out[i * width + j] = src[i * k + jj];
                }
            }
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(
            Op::Scatter {
                parts: parts.to_vec(),
                width,
            },
            Tensor::matrix(rows, width, out),
            rg,
        ))
    }

    /// Same forward value, no gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGradient, value, false)
    }

    /// Per-row scalar function `y_i = f(x_i)` evaluated outside the tape.
    ///
    /// `values` holds `f(x_i)` and `jacobian` row `i` holds `∇f(x_i)`.
    pub fn row_function(&mut self, x: Var, values: Vec<f64>, jacobian: Tensor) -> Result<Var, AutodiffError> {
        let (r, c) = self.matrix_dims("row_function", x)?;
        if values.len() != r || jacobian.shape() != [r, c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_function",
                lhs: vec![r, c],
                rhs: jacobian.shape().to_vec(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(Op::RowFunction { x, jacobian }, Tensor::vector(values), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = bv.len();
                let bi = |k: usize| if *broadcast { k % cols } else { k };
                match kind {
                    Binary::Add | Binary::Sub => {
                        self.accumulate(grads, *a, |ga| {
                            ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi)
                        });
                        let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                        self.accumulate(grads, *b, |gb| {
                            for (k, &gi) in g.iter().enumerate() {
                                gb[bi(k)] += sign * gi;
                            }
                        });
                    }
                    Binary::Mul => {
                        self.accumulate(grads, *a, |ga| {
                            for (k, &gi) in g.iter().enumerate() {
                                ga[k] += gi * bv[bi(k)];
                            }
                        });
                        self.accumulate(grads, *b, |gb| {
                            for (k, &gi) in g.iter().enumerate() {
                                gb[bi(k)] += gi * av[k];
                            }
                        });
                    }
                    Binary::Div => {
                        self.accumulate(grads, *a, |ga| {
                            for (k, &gi) in g.iter().enumerate() {
                                ga[k] += gi / bv[bi(k)];
                            }
                        });
                        self.accumulate(grads, *b, |gb| {
                            for (k, &gi) in g.iter().enumerate() {
                                gb[bi(k)] -= gi * out[k] / bv[bi(k)];
                            }
                        });
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| gemm::matmul(m, n, k, g, false, bv, true, ga, 1.0));
                self.accumulate(grads, *b, |gb| gemm::matmul(k, m, n, av, true, g, false, gb, 1.0));
            }
            Op::Affine { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| gemm::matmul(m, n, k, g, false, wv, true, gx, 1.0));
                self.accumulate(grads, *w, |gw| gemm::matmul(k, m, n, xv, true, g, false, gw, 1.0));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        if av[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                })
            }
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / av[k];
                    }
                })
            }
            Op::Neg(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x -= gi)
            }),
            Op::Scale(a, c) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += c * gi)
            }),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let is_mean = matches!(node.op, Op::Mean(..));
                let len = self.value(*a).len();
                let cols = self.value(*a).cols().max(1);
                self.accumulate(grads, *a, |ga| match axis {
                    Reduce::All => {
                        let s = if is_mean { g[0] / len as f64 } else { g[0] };
                        ga.iter_mut().for_each(|x| *x += s);
                    }
                    Reduce::Rows => {
                        for (k, x) in ga.iter_mut().enumerate() {
                            let gi = g[k / cols];
                            *x += if is_mean { gi / cols as f64 } else { gi };
                        }
                    }
                })
            }
            Op::LogSumExp(a, axis) => {
                let av = self.value(*a).data();
                let cols = match axis {
                    Reduce::All => av.len().max(1),
                    Reduce::Rows => self.value(*a).cols().max(1),
                };
                self.accumulate(grads, *a, |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        let r = k / cols;
                        if out[r] == f64::NEG_INFINITY {
                            continue;
                        }
                        *x += g[r] * (av[k] - out[r]).exp();
                    }
                })
            }
            Op::Gather { x, columns } => {
                let c = self.value(*x).cols();
                let k = columns.len();
                self.accumulate(grads, *x, |gx| {
                    for (i, grow) in g.chunks(k.max(1)).enumerate() {
                        for (jj, &j) in columns.iter().enumerate() {
                            gx[i * c + j] += grow[jj];
                        }
                    }
                })
            }
            Op::Scatter { parts, width } => {
                for (v, cols) in parts {
                    let k = cols.len();
                    self.accumulate(grads, *v, |gv| {
                        for (i, grow) in g.chunks(*width).enumerate() {
                            for (jj, &j) in cols.iter().enumerate() {
                                gv[i * k + jj] += grow[j];
                            }
                        }
                    });
                }
            }
            Op::RowFunction { x, jacobian } => {
                let c = jacobian.cols().max(1);
                let jac = jacobian.data();
                self.accumulate(grads, *x, |gx| {
                    for (k, v) in gx.iter_mut().enumerate() {
                        *v += g[k / c] * jac[k];
                    }
                })
            }
        }
    }
}

/// Max-shifted `log Σ exp(v)`; `-inf` for empty or all `-inf` input.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m.is_infinite() || m.is_nan() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
