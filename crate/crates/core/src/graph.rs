//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a valid
//! topological order. A [`Graph`] lives for one forward/backward pass: [`Graph::backward`]
//! consumes it, and a second gradient requires a fresh forward.
//!
//! Binary elementwise ops broadcast the right operand over the leading axes of the left
//! one (its shape must be a suffix of the left shape). Every op output is checked for
//! NaN/Inf.

use std::collections::BTreeMap;

use crate::tensor::{matmul_into, split_last, transpose, ParamId, ParamStore, Tensor, TensorError, TensorResult};

/// Lower clamp applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumPerItem(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter, as returned from [`Graph::backward`].
pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Parameters bound into a graph.
pub type ParamVars = BTreeMap<ParamId, Var>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn check_finite(op: &'static str, data: &[f64]) -> TensorResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// tanh approximation, written through 1 + tanh(u) = 2σ(2u) to need a single exp
fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    x * sigmoid(2.0 * u)
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let s = sigmoid(2.0 * u);
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> TensorResult<Var> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, needs_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A gradient-tracked leaf registered under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// Binds every parameter in `store`; ids accepted by `trainable` become tracked leaves,
    /// the rest constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: impl Fn(&ParamId) -> bool) -> ParamVars {
        store
            .iter()
            .map(|(id, t)| {
                let v = if trainable(id) {
                    self.param(id.clone(), t.clone())
                } else {
                    self.constant(t.clone())
                };
                (id.clone(), v)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", out, Op::MatMul(a, b), ng)
    }

    fn broadcast_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let inner = tb.numel();
        let bd = tb.data();
        let mut data = Vec::with_capacity(ta.numel());
        for chunk in ta.data().chunks(inner) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push_checked(name, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> TensorResult<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push_checked(name, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> TensorResult<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> TensorResult<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> TensorResult<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> TensorResult<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Natural log guarded as `ln(max(x, 1e-12))`.
    pub fn log(&mut self, a: Var) -> TensorResult<Var> {
        self.unary("log", a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> TensorResult<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sums over every axis but the first: `[n, ...] -> [n]`.
    pub fn sum_per_item(&mut self, a: Var) -> TensorResult<Var> {
        let t = self.value(a);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let data = t.data().chunks(per).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(vec![n], data)?;
        let ng = self.ng(a);
        self.push_checked("sum_per_item", out, Op::SumPerItem(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let t = self.value(a);
        let (_, last) = split_last(t.shape());
        if start + len > last || len == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "slice {start}..{} out of last axis {last}",
                start + len
            )));
        }
        let data = t.data().chunks(last).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(a);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast(a, start), ng))
    }

    /// Reverse pass from a scalar loss. Every registered parameter gets an entry; those not
    /// connected to the loss get zeros.
    pub fn backward(self, loss: Var) -> TensorResult<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut out = Gradients::new();
        for (id, v) in &self.params {
            let t = &self.nodes[v.0].value;
            let g = grads[v.0].take().unwrap_or_else(|| vec![0.0; t.numel()]);
            check_finite("backward", &g)?;
            let entry = Tensor::new(t.shape().to_vec(), g)?;
            match out.get_mut(id) {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(entry.data()) {
                        *e += x;
                    }
                }
                None => {
                    out.insert(id.clone(), entry);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduces a gradient shaped like the left operand down to the broadcast right operand.
    fn reduce_broadcast(g: &[f64], inner: usize) -> Vec<f64> {
        let mut out = vec![0.0; inner];
        for chunk in g.chunks(inner) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (rows, inner) = split_last(ta.shape());
                let cols = tb.shape()[1];
                if self.ng(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(tb.data(), inner, cols);
                    let mut da = vec![0.0; rows * inner];
                    matmul_into(g, &bt, &mut da, rows, cols, inner);
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose(ta.data(), rows, inner);
                    let mut db = vec![0.0; inner * cols];
                    matmul_into(&at, g, &mut db, inner, rows, cols);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    let inner = self.nodes[b.0].value.numel();
                    let mut gb = Self::reduce_broadcast(g, inner);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let inner = bd.len();
                if self.ng(*a) {
                    let mut ga = Vec::with_capacity(g.len());
                    for c in g.chunks(inner) {
                        ga.extend(c.iter().zip(bd).map(|(x, y)| x * y));
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Self::reduce_broadcast(&prod, inner));
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let inner = bd.len();
                if self.ng(*a) {
                    let ga = g.chunks(inner).flat_map(|c| c.iter().zip(bd).map(|(x, y)| x / y)).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    // d(a/b)/db = -a/b²
                    let prod: Vec<f64> = g
                        .iter()
                        .zip(ad)
                        .enumerate()
                        .map(|(i, (x, y))| {
                            let den = bd[i % inner];
                            -x * y / (den * den)
                        })
                        .collect();
                    self.accumulate(grads, *b, Self::reduce_broadcast(&prod, inner));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let ga = g.iter().zip(out).map(|(x, p)| x * p * (1.0 - p)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.iter().zip(val(*a)).map(|(x, &z)| x * gelu_grad(z)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.iter().zip(val(*a)).map(|(x, &z)| if z > 0.0 { *x } else { 0.0 }).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.iter().zip(val(*a)).map(|(x, &z)| if z > LOG_FLOOR { x / z } else { 0.0 }).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.iter().zip(val(*a)).map(|(x, z)| 2.0 * x * z).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumPerItem(a) => {
                let t = &self.nodes[a.0].value;
                let per = t.numel() / t.shape()[0];
                let ga = g.iter().flat_map(|&x| std::iter::repeat_n(x, per)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if self.ng(*p) {
                        self.accumulate(grads, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceLast(a, start) => {
                let t = &self.nodes[a.0].value;
                let (_, last) = split_last(t.shape());
                let (_, len) = split_last(node.value.shape());
                let mut ga = vec![0.0; t.numel()];
                for (row, grow) in ga.chunks_mut(last).zip(g.chunks(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

/// Plain matrix product used by code paths that do not record a graph.
pub fn matmul_plain(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    matmul_into(a, b, &mut out, rows, inner, cols);
    out
}

/// Logistic function shared by evaluation code (single binarization path).
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar_value(s), 0.5);
        let v = g.constant(t(&[4], &[1.0, 2.0, 3.0, 6.0]));
        let m = g.mean(v).unwrap();
        assert_eq!(g.scalar_value(m), 3.0);
        let m3 = t(&[3, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0, 2.0, 2.0, 7.0]);
        let i = g.constant(Tensor::identity(3));
        let mv = g.constant(m3.clone());
        let p = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(p), &m3);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x".into(), Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[&ParamId::from("x")].item(), 6.0);
    }

    #[test]
    fn disconnected_param_gets_zero() {
        let mut g = Graph::new();
        let _x = g.param("x".into(), t(&[2], &[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&ParamId::from("x")].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let mut g = Graph::new();
        let x = g.param("x".into(), t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, z), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn guarded_ops_finite_on_extremes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[-50.0, -1e-3, 0.0, 50.0]));
        let s = g.sigmoid(x).unwrap();
        let ls = g.log(s).unwrap();
        let one_minus = g.scale(s, -1.0).unwrap();
        let one_minus = g.add_scalar(one_minus, 1.0).unwrap();
        let l2 = g.log(one_minus).unwrap();
        let ge = g.gelu(x).unwrap();
        for v in [ls, l2, ge] {
            assert!(g.value(v).data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut store = ParamStore::new();
        store.insert("a".into(), t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        store.insert("b".into(), t(&[1, 3], &[1.0, 2.0, -1.5]));
        let err = finite_diff_check(&store, 1e-5, |g, vars| {
            let c = g.concat(&[vars[&ParamId::from("a")], vars[&ParamId::from("b")]])?;
            let s = g.slice_last(c, 1, 2)?;
            let sq = g.square(s)?;
            let per = g.sum_per_item(sq)?;
            let w = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
            let m = g.mul(per, w)?;
            g.sum(m)
        })
        .unwrap();
        assert!(err.max_rel_error < 1e-6, "{err:?}");
    }

    fn small_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        /// Every op chained into one scalar: gradients agree with central differences.
        #[test]
        fn all_ops_match_finite_differences(
            a in small_values(6), b in small_values(6), c in small_values(3), d in small_values(3)
        ) {
            let mut store = ParamStore::new();
            store.insert("a".into(), t(&[2, 3], &a));
            store.insert("b".into(), t(&[3, 2], &b));
            store.insert("c".into(), t(&[3], &c));
            store.insert("d".into(), t(&[3], &d));
            let report = finite_diff_check(&store, 1e-5, |g, v| {
                let (a, b, c, d) = (v[&"a".into()], v[&"b".into()], v[&"c".into()], v[&"d".into()]);
                let ab = g.matmul(a, b)?;                // [2,2]
                let ab = g.reshape(ab, &[4])?;
                let ab3 = g.slice_last(ab, 0, 3)?;        // [3]
                let x = g.add(a, c)?;                      // [2,3] broadcast
                let x = g.mul(x, d)?;
                let x = g.sub(x, ab3)?;
                let s = g.sigmoid(x)?;
                let ge = g.gelu(x)?;
                let lg = g.log(s)?;
                let den = g.square(d)?;
                let den = g.add_scalar(den, 1.0)?;
                let q = g.div(ge, den)?;
                let q = g.scale(q, 0.7)?;
                let all = g.concat(&[lg, q])?;
                let per = g.sum_per_item(all)?;
                let sq = g.square(per)?;
                let m = g.mean(sq)?;
                let s2 = g.sum(ab)?;
                let s2 = g.scale(s2, 0.1)?;
                g.add(m, s2)
            }).unwrap();
            prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
        }

        #[test]
        fn backward_is_linear_in_losses(a in small_values(6), b in small_values(6)) {
            let mut store = ParamStore::new();
            store.insert("a".into(), t(&[2, 3], &a));
            store.insert("b".into(), t(&[2, 3], &b));
            let f1 = |g: &mut Graph, v: &ParamVars| -> TensorResult<Var> {
                let x = g.mul(v[&"a".into()], v[&"b".into()])?;
                let s = g.sigmoid(x)?;
                g.sum(s)
            };
            let f2 = |g: &mut Graph, v: &ParamVars| -> TensorResult<Var> {
                let x = g.gelu(v[&"a".into()])?;
                let y = g.square(v[&"b".into()])?;
                let z = g.mul(x, y)?;
                g.mean(z)
            };
            let grads_of = |f: &dyn Fn(&mut Graph, &ParamVars) -> TensorResult<Var>| {
                let mut g = Graph::new();
                let vars = g.bind(&store, |_| true);
                let l = f(&mut g, &vars).unwrap();
                g.backward(l).unwrap()
            };
            let g1 = grads_of(&f1);
            let g2 = grads_of(&f2);
            let g12 = grads_of(&|g: &mut Graph, v: &ParamVars| {
                let l1 = f1(g, v)?;
                let l2 = f2(g, v)?;
                g.add(l1, l2)
            });
            for (id, t12) in &g12 {
                for ((x, y), z) in g1[id].data().iter().zip(g2[id].data()).zip(t12.data()) {
                    prop_assert!((x + y - z).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn no_non_finite_in_range(x in prop::collection::vec(-50.0f64..50.0, 8)) {
            let mut g = Graph::new();
            let v = g.constant(t(&[8], &x));
            let s = g.sigmoid(v).unwrap();
            let l = g.log(s).unwrap();
            let n = g.scale(s, -1.0).unwrap();
            let n = g.add_scalar(n, 1.0).unwrap();
            let l2 = g.log(n).unwrap();
            let ge = g.gelu(v).unwrap();
            let r = g.relu(v).unwrap();
            let sq = g.square(v).unwrap();
            for var in [s, l, l2, ge, r, sq] {
                prop_assert!(g.value(var).data().iter().all(|x| x.is_finite()));
            }
        }
    }
}
