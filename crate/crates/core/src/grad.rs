//! Reverse-mode gradients over dense `f64` vectors.
//!
//! A [`Tape`] records elementary vector operations in evaluation order.
//! Leaves are either constants or slices of a trainable [`Param`]; calling
//! [`Tape::backward`] pushes the adjoint of a scalar output back through the
//! recorded operations and hands every parameter-slice gradient to a
//! [`GradSink`].
//!
//! Tapes are built fresh per batch (define-by-run). Parameters are only read
//! while a tape is recorded, so several workers can record in parallel and
//! merge their [`GradBuffer`]s afterwards.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("output node {0} was never recorded on this tape")]
    NotRecorded(usize),
    #[error("backward requires a scalar output, node {node} has length {len}")]
    NotScalar { node: usize, len: usize },
}

/// Handle of a trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A flat trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(values: Vec<f64>) -> Self {
        let grad = vec![0.0; values.len()];
        Self { values, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A collection of parameters addressable by [`ParamId`].
pub trait ParamSet {
    fn param_ids(&self) -> Vec<ParamId>;
    fn param(&self, id: ParamId) -> &Param;
    fn param_mut(&mut self, id: ParamId) -> &mut Param;

    fn zero_grads(&mut self) {
        for id in self.param_ids() {
            self.param_mut(id).zero_grad();
        }
    }

    fn scalar_count(&self) -> usize {
        self.param_ids().iter().map(|&id| self.param(id).len()).sum()
    }
}

/// Receives gradient contributions for parameter slices.
pub trait GradSink {
    fn accumulate(&mut self, id: ParamId, offset: usize, grad: &[f64]);
}

/// Any [`ParamSet`] accumulates straight into its `grad` buffers.
impl<P: ParamSet> GradSink for P {
    fn accumulate(&mut self, id: ParamId, offset: usize, grad: &[f64]) {
        let p = self.param_mut(id);
        for (dst, g) in p.grad[offset..offset + grad.len()].iter_mut().zip(grad) {
            *dst += g;
        }
    }
}

/// Ordered list of gradient contributions, applied later by a single reducer.
#[derive(Debug, Default, Clone)]
pub struct GradBuffer {
    entries: Vec<(ParamId, usize, Vec<f64>)>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds every contribution, in recording order, to `target`.
    pub fn apply_to<S: GradSink + ?Sized>(&self, target: &mut S) {
        for (id, offset, g) in &self.entries {
            target.accumulate(*id, *offset, g);
        }
    }
}

impl GradSink for GradBuffer {
    fn accumulate(&mut self, id: ParamId, offset: usize, grad: &[f64]) {
        self.entries.push((id, offset, grad.to_vec()));
    }
}

/// Handle of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { id: ParamId, offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSoftplus(Var),
    Log1mExp(Var),
    LogAddExp(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Dot(Var, Var),
    Sum(Var),
    ScalarMul(Var, Var),
    RowCombine { weights: Var, rows: Var },
    Bernstein { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LogSoftplus(..) => "log_softplus",
            Op::Log1mExp(..) => "log1mexp",
            Op::LogAddExp(..) => "logaddexp",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::Clamp(..) => "clamp",
            Op::Dot(..) => "dot",
            Op::Sum(..) => "sum",
            Op::ScalarMul(..) => "scalar_mul",
            Op::RowCombine { .. } => "row_combine",
            Op::Bernstein { .. } => "bernstein",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Scalar numerics shared by the tape and the plain `f64` code paths.
pub mod scalar {
    /// `ln(1 + e^x)` without overflow.
    pub fn softplus(x: f64) -> f64 {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    }

    /// `ln(softplus(x))`, finite for every finite `x`.
    pub fn log_softplus(x: f64) -> f64 {
        if x < -30.0 {
            // softplus(x) = e^x (1 - e^x/2 + ...)
            x - 0.5 * x.exp()
        } else {
            softplus(x).ln()
        }
    }

    /// Derivative of [`log_softplus`].
    pub fn log_softplus_grad(x: f64) -> f64 {
        if x < -30.0 {
            1.0 - 0.5 * x.exp()
        } else {
            sigmoid(x) / softplus(x)
        }
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// `ln(e^a + e^b)`.
    pub fn logaddexp(a: f64, b: f64) -> f64 {
        if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let m = a.max(b);
        m + (-(a - b).abs()).exp().ln_1p()
    }

    /// `ln(1 - e^x)` for `x < 0`.
    pub fn log1mexp(x: f64) -> f64 {
        if x > -std::f64::consts::LN_2 {
            (-x.exp_m1()).ln()
        } else {
            (-x.exp()).ln_1p()
        }
    }
}

/// Records operations for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "{}: length mismatch", op.name());
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        self.push(value, op)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Constant)
    }

    /// Leaf reading `len` values of parameter `id` starting at `offset`.
    pub fn param<P: ParamSet + ?Sized>(
        &mut self,
        params: &P,
        id: ParamId,
        offset: usize,
        len: usize,
    ) -> Var {
        let value = params.param(id).values[offset..offset + len].to_vec();
        self.push(value, Op::Param { id, offset })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), f64::recip)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), scalar::sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), scalar::softplus)
    }

    pub fn log_softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSoftplus(a), scalar::log_softplus)
    }

    pub fn log1mexp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log1mExp(a), scalar::log1mexp)
    }

    pub fn logaddexp(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::LogAddExp(a, b), scalar::logaddexp)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "dot: length mismatch");
        let s = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    /// Length-1 `s` times vector `v`.
    pub fn scalar_mul(&mut self, s: Var, v: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "scalar_mul: lhs not scalar");
        let c = self.nodes[s.0].value[0];
        let value = self.nodes[v.0].value.iter().map(|x| c * x).collect();
        self.push(value, Op::ScalarMul(s, v))
    }

    /// `Σ_k weights[k] · rows[k]` where `rows` is a row-major K×width matrix.
    pub fn row_combine(&mut self, weights: Var, rows: Var) -> Var {
        let w = &self.nodes[weights.0].value;
        let m = &self.nodes[rows.0].value;
        assert!(!w.is_empty() && m.len() % w.len() == 0, "row_combine: shape mismatch");
        let width = m.len() / w.len();
        let mut out = vec![0.0; width];
        for (k, &wk) in w.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(&m[k * width..(k + 1) * width]) {
                *o += wk * x;
            }
        }
        self.push(out, Op::RowCombine { weights, rows })
    }

    /// Bernstein basis of the given order at the scalar `x ∈ [0,1]`.
    pub fn bernstein(&mut self, x: Var, order: usize) -> Var {
        let xv = self.scalar(x);
        let value = crate::time_codec::bernstein_values(xv, order);
        self.push(value, Op::Bernstein { x })
    }

    /// Scans the tape for the first non-finite node.
    pub fn check_finite(&self) -> Result<(), GradError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(GradError::NonFinite {
                    op: n.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Value of a scalar output after checking that every recorded node is finite.
    pub fn forward_scalar(&self, output: Var) -> Result<f64, GradError> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or(GradError::NotRecorded(output.0))?;
        if node.value.len() != 1 {
            return Err(GradError::NotScalar {
                node: output.0,
                len: node.value.len(),
            });
        }
        self.check_finite()?;
        Ok(node.value[0])
    }

    /// Propagates `seed · d(output)` to every parameter leaf, accumulating into `sink`.
    pub fn backward<S: GradSink + ?Sized>(
        &self,
        output: Var,
        seed: f64,
        sink: &mut S,
    ) -> Result<(), GradError> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or(GradError::NotRecorded(output.0))?;
        if out.value.len() != 1 {
            return Err(GradError::NotScalar {
                node: output.0,
                len: out.value.len(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![seed]);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match node.op {
                Op::Constant => {}
                Op::Param { id, offset } => sink.accumulate(id, offset, &g),
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.iter().copied());
                    acc(&mut adj, b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, a, g.iter().copied());
                    acc(&mut adj, b, g.iter().map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(&mut adj, a, g.iter().zip(vb).map(|(g, y)| g * y));
                    acc(&mut adj, b, g.iter().zip(va).map(|(g, x)| g * x));
                }
                Op::Neg(a) => acc(&mut adj, a, g.iter().map(|x| -x)),
                Op::Scale(a, c) => acc(&mut adj, a, g.iter().map(|x| c * x)),
                Op::Shift(a) => acc(&mut adj, a, g.iter().copied()),
                Op::Exp(a) => acc(&mut adj, a, g.iter().zip(val).map(|(g, y)| g * y)),
                Op::Ln(a) => {
                    let va = &self.nodes[a.0].value;
                    acc(&mut adj, a, g.iter().zip(va).map(|(g, x)| g / x));
                }
                Op::Sqrt(a) => acc(&mut adj, a, g.iter().zip(val).map(|(g, y)| 0.5 * g / y)),
                Op::Recip(a) => acc(&mut adj, a, g.iter().zip(val).map(|(g, y)| -g * y * y)),
                Op::Tanh(a) => acc(&mut adj, a, g.iter().zip(val).map(|(g, y)| g * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut adj, a, g.iter().zip(val).map(|(g, y)| g * y * (1.0 - y))),
                Op::Softplus(a) => {
                    let va = &self.nodes[a.0].value;
                    acc(&mut adj, a, g.iter().zip(va).map(|(g, &x)| g * scalar::sigmoid(x)));
                }
                Op::LogSoftplus(a) => {
                    let va = &self.nodes[a.0].value;
                    acc(
                        &mut adj,
                        a,
                        g.iter().zip(va).map(|(g, &x)| g * scalar::log_softplus_grad(x)),
                    );
                }
                Op::Log1mExp(a) => {
                    // d/dx ln(1 - e^x) = -1 / (e^{-x} - 1)
                    let va = &self.nodes[a.0].value;
                    acc(&mut adj, a, g.iter().zip(va).map(|(g, &x)| -g / (-x).exp_m1()));
                }
                Op::LogAddExp(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let wa: Vec<f64> = va.iter().zip(vb).map(|(&x, &y)| scalar::sigmoid(x - y)).collect();
                    acc(&mut adj, a, g.iter().zip(&wa).map(|(g, w)| g * w));
                    acc(&mut adj, b, g.iter().zip(&wa).map(|(g, w)| g * (1.0 - w)));
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let is_max = matches!(node.op, Op::Max(..));
                    let pick_a: Vec<bool> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| if is_max { x >= y } else { x <= y })
                        .collect();
                    acc(&mut adj, a, g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }));
                    acc(&mut adj, b, g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }));
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &self.nodes[a.0].value;
                    acc(
                        &mut adj,
                        a,
                        g.iter()
                            .zip(va)
                            .map(|(g, &x)| if x < lo || x > hi { 0.0 } else { *g }),
                    );
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let s = g[0];
                    acc(&mut adj, a, vb.iter().map(|y| s * y));
                    acc(&mut adj, b, va.iter().map(|x| s * x));
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut adj, a, std::iter::repeat(g[0]).take(n));
                }
                Op::ScalarMul(s, v) => {
                    let c = self.nodes[s.0].value[0];
                    let vv = &self.nodes[v.0].value;
                    let ds: f64 = g.iter().zip(vv).map(|(g, x)| g * x).sum();
                    acc(&mut adj, s, std::iter::once(ds));
                    acc(&mut adj, v, g.iter().map(|x| c * x));
                }
                Op::RowCombine { weights, rows } => {
                    let w = &self.nodes[weights.0].value;
                    let m = &self.nodes[rows.0].value;
                    let width = g.len();
                    let dw: Vec<f64> = (0..w.len())
                        .map(|k| {
                            m[k * width..(k + 1) * width]
                                .iter()
                                .zip(&g)
                                .map(|(x, g)| x * g)
                                .sum()
                        })
                        .collect();
                    acc(&mut adj, weights, dw.into_iter());
                    acc(
                        &mut adj,
                        rows,
                        (0..m.len()).map(|i| w[i / width] * g[i % width]),
                    );
                }
                Op::Bernstein { x } => {
                    let xv = self.nodes[x.0].value[0];
                    let d = crate::time_codec::bernstein_derivatives(xv, val.len() - 1);
                    let dx = g.iter().zip(&d).map(|(g, d)| g * d).sum();
                    acc(&mut adj, x, std::iter::once(dx));
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.collect()),
    }
}
