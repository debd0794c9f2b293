//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every network in the crate (retargeter, policy, world model, motion prior)
//! builds its forward pass on a [`Tape`]; `backward` replays the recorded ops
//! in reverse and accumulates gradients. The tape is rebuilt per forward pass,
//! which makes backpropagating through frozen networks (policy and world model
//! during prior training) a matter of which leaves are bound to a parameter
//! store and which are plain constants.

use std::fmt;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Tensor { shape, data, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x], grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Allocate (or keep) a zeroed gradient buffer of matching shape.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("backward called twice on the same tape without reset (double accumulation)")]
    DoubleBackward,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Relu,
    Elu,
    Recip,
    Abs,
    Scale(f64),
    AddConst(f64),
    /// min(x, c)
    MinConst(f64),
    /// max(x, c)
    MaxConst(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise min; gradient follows the selected side (ties go left).
    Min,
    /// Elementwise max; gradient follows the selected side (ties go left).
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    /// Input/constant leaf. `param` carries the parameter name when the leaf
    /// is bound to a parameter store entry.
    Leaf { param: Option<String> },
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// [B,N] + [N] broadcast over rows.
    AddRow { mat: usize, row: usize },
    /// [B,N] * [N] broadcast over rows.
    MulRow { mat: usize, row: usize },
    /// Tensor scaled by a scalar variable.
    ScaleBy { x: usize, s: usize },
    /// Tensor plus a broadcast scalar variable.
    AddScalar { x: usize, s: usize },
    Sum(usize),
    Mean(usize),
    /// Row sums of a [B,N] matrix -> [B].
    SumAxis1 { mat: usize, cols: usize },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize, len: usize },
    Reshape(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Records ops during a forward pass and replays them in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.len())
    }
}

fn assert_finite(data: &[f64], op: &str) {
    debug_assert!(
        data.iter().all(|x| x.is_finite()),
        "non-finite value produced by op {op}"
    );
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &str) -> Var {
        assert_finite(&data, name);
        self.nodes.push(Node { op, shape, data });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // ----- leaves -----

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t.shape.clone(), t.data.clone(), "leaf")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Op::Leaf { param: None }, vec![], vec![x], "scalar")
    }

    pub fn vector(&mut self, data: &[f64]) -> Var {
        self.push(Op::Leaf { param: None }, vec![data.len()], data.to_vec(), "vector")
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(Op::Leaf { param: None }, vec![rows, cols], data.to_vec(), "matrix")
    }

    /// Leaf bound to a named parameter; gradients reach the store through
    /// [`Tape::apply_param_grads`].
    pub fn param(&mut self, params: &crate::nn::NetParams, name: &str) -> Var {
        let t = params.get(name);
        self.push(
            Op::Leaf { param: Some(name.to_string()) },
            t.shape.clone(),
            t.data.clone(),
            "param",
        )
    }

    // ----- unary -----

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xd = &self.nodes[x.0];
        let data: Vec<f64> = match kind {
            Unary::Neg => xd.data.iter().map(|v| -v).collect(),
            Unary::Exp => xd.data.iter().map(|v| v.exp()).collect(),
            Unary::Sqrt => xd.data.iter().map(|v| v.sqrt()).collect(),
            Unary::Sin => xd.data.iter().map(|v| v.sin()).collect(),
            Unary::Cos => xd.data.iter().map(|v| v.cos()).collect(),
            Unary::Tanh => xd.data.iter().map(|v| v.tanh()).collect(),
            Unary::Relu => xd.data.iter().map(|v| v.max(0.0)).collect(),
            Unary::Elu => xd
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
                .collect(),
            Unary::Recip => xd.data.iter().map(|v| 1.0 / v).collect(),
            Unary::Abs => xd.data.iter().map(|v| v.abs()).collect(),
            Unary::Scale(c) => xd.data.iter().map(|v| v * c).collect(),
            Unary::AddConst(c) => xd.data.iter().map(|v| v + c).collect(),
            Unary::MinConst(c) => xd.data.iter().map(|v| v.min(c)).collect(),
            Unary::MaxConst(c) => xd.data.iter().map(|v| v.max(c)).collect(),
        };
        let shape = xd.shape.clone();
        self.push(Op::Unary(kind, x.0), shape, data, "unary")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(Unary::Elu, x)
    }
    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(Unary::Recip, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddConst(c), x)
    }
    pub fn min_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::MinConst(c), x)
    }
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::MaxConst(c), x)
    }

    /// clamp(x, lo, hi); zero gradient outside the active range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let m = self.max_const(x, lo);
        self.min_const(m, hi)
    }

    // ----- binary -----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ad, bd) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(
            ad.data.len(),
            bd.data.len(),
            "binary op {kind:?} needs equal sizes ({:?} vs {:?})",
            ad.shape,
            bd.shape
        );
        let data: Vec<f64> = match kind {
            Binary::Add => ad.data.iter().zip(&bd.data).map(|(x, y)| x + y).collect(),
            Binary::Sub => ad.data.iter().zip(&bd.data).map(|(x, y)| x - y).collect(),
            Binary::Mul => ad.data.iter().zip(&bd.data).map(|(x, y)| x * y).collect(),
            Binary::Div => ad.data.iter().zip(&bd.data).map(|(x, y)| x / y).collect(),
            Binary::Min => ad.data.iter().zip(&bd.data).map(|(x, y)| x.min(*y)).collect(),
            Binary::Max => ad.data.iter().zip(&bd.data).map(|(x, y)| x.max(*y)).collect(),
        };
        let shape = ad.shape.clone();
        self.push(Op::Binary(kind, a.0, b.0), shape, data, "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Min, a, b)
    }
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Max, a, b)
    }

    /// clamp(x, lo, hi) with per-element bounds.
    pub fn clamp_vec(&mut self, x: Var, lo: &[f64], hi: &[f64]) -> Var {
        let lo_v = self.vector(lo);
        let hi_v = self.vector(hi);
        let m = self.max(x, lo_v);
        self.min(m, hi_v)
    }

    /// Matrix product. Vectors are treated as rows on the left and columns on
    /// the right; the result shape follows the operands' ranks.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ashape, bshape) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let (m, k1) = match ashape.len() {
            1 => (1, ashape[0]),
            2 => (ashape[0], ashape[1]),
            _ => panic!("matmul lhs must be rank 1 or 2, got {ashape:?}"),
        };
        let (k2, n) = match bshape.len() {
            1 => (bshape[0], 1),
            2 => (bshape[0], bshape[1]),
            _ => panic!("matmul rhs must be rank 1 or 2, got {bshape:?}"),
        };
        assert_eq!(k1, k2, "matmul inner dims differ: {ashape:?} x {bshape:?}");
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k1,
            n,
            &mut out,
        );
        let shape = match (ashape.len(), bshape.len()) {
            (1, 1) => vec![],
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            _ => vec![m, n],
        };
        self.push(Op::Matmul { a: a.0, b: b.0, m, k: k1, n }, shape, out, "matmul")
    }

    pub fn add_row(&mut self, mat: Var, row: Var) -> Var {
        let (md, rd) = (&self.nodes[mat.0], &self.nodes[row.0]);
        let n = *md.shape.last().expect("add_row on empty shape");
        assert_eq!(rd.data.len(), n, "add_row width mismatch");
        let data: Vec<f64> = md
            .data
            .chunks(n)
            .flat_map(|c| c.iter().zip(&rd.data).map(|(x, y)| x + y))
            .collect();
        let shape = md.shape.clone();
        self.push(Op::AddRow { mat: mat.0, row: row.0 }, shape, data, "add_row")
    }

    pub fn mul_row(&mut self, mat: Var, row: Var) -> Var {
        let (md, rd) = (&self.nodes[mat.0], &self.nodes[row.0]);
        let n = *md.shape.last().expect("mul_row on empty shape");
        assert_eq!(rd.data.len(), n, "mul_row width mismatch");
        let data: Vec<f64> = md
            .data
            .chunks(n)
            .flat_map(|c| c.iter().zip(&rd.data).map(|(x, y)| x * y))
            .collect();
        let shape = md.shape.clone();
        self.push(Op::MulRow { mat: mat.0, row: row.0 }, shape, data, "mul_row")
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].data.len(), 1, "scale_by takes a scalar var");
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::ScaleBy { x: x.0, s: s.0 }, shape, data, "scale_by")
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].data.len(), 1, "add_scalar takes a scalar var");
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddScalar { x: x.0, s: s.0 }, shape, data, "add_scalar")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::Sum(x.0), vec![], vec![s], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len().max(1);
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        self.push(Op::Mean(x.0), vec![], vec![s], "mean")
    }

    pub fn sum_axis1(&mut self, mat: Var) -> Var {
        let md = &self.nodes[mat.0];
        assert_eq!(md.shape.len(), 2, "sum_axis1 expects a matrix");
        let (rows, cols) = (md.shape[0], md.shape[1]);
        let data: Vec<f64> = md.data.chunks(cols).map(|c| c.iter().sum()).collect();
        self.push(Op::SumAxis1 { mat: mat.0, cols }, vec![rows], data, "sum_axis1")
    }

    /// Concatenate flattened inputs into a single vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let len = data.len();
        self.push(
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            vec![len],
            data,
            "concat",
        )
    }

    /// Contiguous slice of the flattened input.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xd = &self.nodes[x.0];
        assert!(start + len <= xd.data.len(), "slice out of range");
        let data = xd.data[start..start + len].to_vec();
        self.push(Op::Slice { x: x.0, start, len }, vec![len], data, "slice")
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let s = self.slice(x, i, 1);
        self.reshape(s, vec![])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xd = &self.nodes[x.0];
        assert_eq!(shape.iter().product::<usize>(), xd.data.len(), "reshape size mismatch");
        let data = xd.data.clone();
        self.push(Op::Reshape(x.0), shape, data, "reshape")
    }

    // ----- composed helpers -----

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    /// v / sqrt(||v||^2 + eps); the epsilon guards zero-length vectors.
    pub fn normalize(&mut self, v: Var, eps: f64) -> Var {
        let n2 = self.sq_norm(v);
        let n2e = self.add_const(n2, eps);
        let n = self.sqrt(n2e);
        let inv = self.recip(n);
        self.scale_by(v, inv)
    }

    /// Forward value is `values`, gradient flows to `x` unchanged
    /// (straight-through estimator). Shapes must match.
    pub fn straight_through(&mut self, x: Var, values: &[f64]) -> Var {
        let xv = self.value(x).to_vec();
        assert_eq!(xv.len(), values.len());
        let delta: Vec<f64> = values.iter().zip(&xv).map(|(v, x)| v - x).collect();
        let shape = self.shape(x).to_vec();
        let d = self.push(Op::Leaf { param: None }, shape, delta, "st_delta");
        self.add(x, d)
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss. Gradients become readable through
    /// [`Tape::grad`]; parameter leaves are pushed into a store with
    /// [`Tape::apply_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::DoubleBackward);
        }
        let lnode = &self.nodes[loss.0];
        if lnode.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(lnode.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut add_to = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Unary(kind, x) => {
                let xd = &self.nodes[*x].data;
                let yd = &node.data;
                add_to(*x, &mut |gx| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Exp => yd[i],
                            Unary::Sqrt => 0.5 / yd[i],
                            Unary::Sin => xd[i].cos(),
                            Unary::Cos => -xd[i].sin(),
                            Unary::Tanh => 1.0 - yd[i] * yd[i],
                            Unary::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Elu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    yd[i] + 1.0
                                }
                            }
                            Unary::Recip => -yd[i] * yd[i],
                            Unary::Abs => {
                                if xd[i] >= 0.0 {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                            Unary::Scale(c) => *c,
                            Unary::AddConst(_) => 1.0,
                            Unary::MinConst(c) => {
                                if xd[i] <= *c {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::MaxConst(c) => {
                                if xd[i] >= *c {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                match kind {
                    Binary::Add => {
                        add_to(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                        add_to(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                    Binary::Sub => {
                        add_to(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                        add_to(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                    }
                    Binary::Mul => {
                        add_to(*a, &mut |ga| {
                            for i in 0..g.len() {
                                ga[i] += g[i] * bd[i];
                            }
                        });
                        add_to(*b, &mut |gb| {
                            for i in 0..g.len() {
                                gb[i] += g[i] * ad[i];
                            }
                        });
                    }
                    Binary::Div => {
                        add_to(*a, &mut |ga| {
                            for i in 0..g.len() {
                                ga[i] += g[i] / bd[i];
                            }
                        });
                        add_to(*b, &mut |gb| {
                            for i in 0..g.len() {
                                gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                            }
                        });
                    }
                    Binary::Min => {
                        add_to(*a, &mut |ga| {
                            for i in 0..g.len() {
                                if ad[i] <= bd[i] {
                                    ga[i] += g[i];
                                }
                            }
                        });
                        add_to(*b, &mut |gb| {
                            for i in 0..g.len() {
                                if ad[i] > bd[i] {
                                    gb[i] += g[i];
                                }
                            }
                        });
                    }
                    Binary::Max => {
                        add_to(*a, &mut |ga| {
                            for i in 0..g.len() {
                                if ad[i] >= bd[i] {
                                    ga[i] += g[i];
                                }
                            }
                        });
                        add_to(*b, &mut |gb| {
                            for i in 0..g.len() {
                                if ad[i] < bd[i] {
                                    gb[i] += g[i];
                                }
                            }
                        });
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                add_to(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + kk] += acc;
                        }
                    }
                });
                // dB[kk,j] += A[i,kk] * g[i,j]
                add_to(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        for (kk, &av) in arow.iter().enumerate() {
                            if av != 0.0 {
                                let gbrow = &mut gb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::AddRow { mat, row } => {
                let n = self.nodes[*row].data.len();
                add_to(*mat, &mut |gm| gm.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                add_to(*row, &mut |gr| {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv;
                    }
                });
            }
            Op::MulRow { mat, row } => {
                let n = self.nodes[*row].data.len();
                let md = &self.nodes[*mat].data;
                let rd = &self.nodes[*row].data;
                add_to(*mat, &mut |gm| {
                    for (i, gv) in g.iter().enumerate() {
                        gm[i] += gv * rd[i % n];
                    }
                });
                add_to(*row, &mut |gr| {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv * md[i];
                    }
                });
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[*s].data[0];
                let xd = &self.nodes[*x].data;
                add_to(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sv;
                    }
                });
                add_to(*s, &mut |gs| {
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        acc += g[i] * xd[i];
                    }
                    gs[0] += acc;
                });
            }
            Op::AddScalar { x, s } => {
                add_to(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                add_to(*s, &mut |gs| gs[0] += g.iter().sum::<f64>());
            }
            Op::Sum(x) => {
                add_to(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].data.len().max(1) as f64;
                add_to(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumAxis1 { mat, cols } => {
                add_to(*mat, &mut |gm| {
                    for (r, gv) in g.iter().enumerate() {
                        for c in 0..*cols {
                            gm[r * cols + c] += gv;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[*p].data.len();
                    let seg = &g[off..off + len];
                    add_to(*p, &mut |gp| {
                        gp.iter_mut().zip(seg).for_each(|(a, b)| *a += b)
                    });
                    off += len;
                }
            }
            Op::Slice { x, start, len } => {
                add_to(*x, &mut |gx| {
                    for i in 0..*len {
                        gx[start + i] += g[i];
                    }
                });
            }
            Op::Reshape(x) => {
                add_to(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let grads = self.grads.as_ref().expect("backward has not run");
        grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()])
    }

    /// Accumulate gradients of parameter-bound leaves into the store.
    /// Leaves whose names are absent from `params` are skipped, which is what
    /// lets frozen networks ride on the same tape as constants.
    pub fn apply_param_grads(&self, params: &mut crate::nn::NetParams) {
        let grads = self.grads.as_ref().expect("backward has not run");
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &grads[id] {
                    if params.contains(name) {
                        params.accumulate_grad(name, g);
                    }
                }
            }
        }
    }
}

/// out += a (m x k) * b (k x n), row-major.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m >= 8 && m * k * n >= 1 << 18 {
        use rayon::prelude::*;
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        });
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.vector(&[1.0, -2.0, 3.5, 0.0]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), vec![1.0; 4]);
    }

    #[test]
    fn sq_norm_grad_analytic() {
        // loss = ||x||^2 at x = (1,2) -> grad (2,4)
        let mut tape = Tape::new();
        let x = tape.vector(&[1.0, 2.0]);
        let l = tape.sq_norm(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), vec![2.0, 4.0]);
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.vector(&[1.0]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.vector(&[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_matches_manual() {
        let mut tape = Tape::new();
        let a = tape.matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.matrix(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn straight_through_copies_grad() {
        let mut tape = Tape::new();
        let x = tape.vector(&[0.3, -0.7]);
        let st = tape.straight_through(x, &[1.0, 1.0]);
        assert_eq!(tape.value(st), &[1.0, 1.0]);
        let l = tape.sq_norm(st);
        tape.backward(l).unwrap();
        // d||y||^2/dy = 2y evaluated at the quantized value, copied straight to x
        assert_eq!(tape.grad(x), vec![2.0, 2.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.vector(&[0.123456789, -0.987654321, 3.14159]);
            let w = tape.matrix(3, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, 0.9]);
            let y = tape.matmul(x, w);
            let t = tape.tanh(y);
            let s = tape.sum(t);
            tape.scalar_value(s).to_bits()
        };
        assert_eq!(run(), run());
    }
}
