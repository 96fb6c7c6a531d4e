//! Reverse-mode autodiff on a flat tape.
//!
//! A [`Graph`] records every primitive operation of one forward pass in
//! topological order. `backward` walks the tape in exact reverse order and
//! accumulates gradients additively, so fan-out sums and repeated backward
//! calls add up. Parameters are referenced from a borrowed [`ParamSet`]
//! (never copied into the tape); their gradient contributions are drained
//! with [`Graph::take_param_grads`] and added into the set by the caller.

use std::collections::HashMap;

use crate::error::NumericError;
use crate::params::{ParamId, ParamSet};
use crate::real::{matmul, matmul_nt_acc, matmul_tn_acc, Real};

pub type NodeId = usize;

macro_rules! unary_op {
    ($name:ident, $variant:ident, $f:expr) => {
        pub fn $name(&mut self, a: NodeId) -> NodeId {
            let f = $f;
            let data = self.data(a).iter().map(|&x| f(x)).collect();
            let req = self.requires[a];
            self.push(Op::$variant { a }, self.shapes[a].clone(), data, req)
        }
    };
}

#[derive(Debug, Clone)]
enum Op<R: Real> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: R },
    Offset { a: NodeId },
    Affine { w: NodeId, x: NodeId, b: NodeId },
    MatVec { w: NodeId, x: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    MatMulNT { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, k: NodeId, stride: usize },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Dot { a: NodeId, b: NodeId },
    SumSq { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: usize, len: usize },
    Index { a: NodeId, i: usize },
    MulScalar { v: NodeId, s: NodeId },
    Recip { a: NodeId },
    RowNormalize { a: NodeId },
    NtXent { oo: NodeId, oa: NodeId, tau: R },
}

pub struct Graph<'p, R: Real> {
    params: &'p ParamSet<R>,
    ops: Vec<Op<R>>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<R>>,
    grads: Vec<Option<Vec<R>>>,
    requires: Vec<bool>,
    leaf_param: Vec<Option<ParamId>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn resolve<'a, R: Real>(
    data: &'a [Vec<R>],
    leaf_param: &[Option<ParamId>],
    params: &'a ParamSet<R>,
    id: NodeId,
) -> &'a [R] {
    match leaf_param[id] {
        Some(pid) => &params.get(pid).data,
        None => &data[id],
    }
}

fn grad_buf<R: Real>(grads: &mut [Option<Vec<R>>], id: NodeId, len: usize) -> &mut [R] {
    grads[id].get_or_insert_with(|| vec![R::zero(); len])
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamSet<R>) -> Self {
        Graph {
            params,
            ops: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            leaf_param: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<R>, shape: Vec<usize>, data: Vec<R>, requires: bool) -> NodeId {
        self.ops.push(op);
        self.shapes.push(shape);
        self.data.push(data);
        self.grads.push(None);
        self.requires.push(requires);
        self.leaf_param.push(None);
        self.ops.len() - 1
    }

    pub fn data(&self, id: NodeId) -> &[R] {
        resolve(&self.data, &self.leaf_param, self.params, id)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    /// Scalar value of a one-element node.
    pub fn value(&self, id: NodeId) -> R {
        debug_assert_eq!(self.data(id).len(), 1);
        self.data(id)[0]
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.shapes[id].iter().product()
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant input; does not receive gradients.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<R>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape.to_vec(), data, false)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.leaf(&[len], vec![R::zero(); len])
    }

    pub fn scalar(&mut self, v: R) -> NodeId {
        self.leaf(&[1], vec![v])
    }

    /// Differentiable leaf that is not a registered parameter (used for
    /// seeded-backward bridging between graphs).
    pub fn var_leaf(&mut self, shape: &[usize], data: Vec<R>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape.to_vec(), data, true)
    }

    /// Parameter leaf; zero-copy view into the borrowed `ParamSet`.
    /// Repeated calls for the same parameter return the same node.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&pid) {
            return n;
        }
        let shape = self.params.get(pid).shape.clone();
        let id = self.push(Op::Leaf, shape, Vec::new(), true);
        self.leaf_param[id] = Some(pid);
        self.param_nodes.insert(pid, id);
        id
    }

    // ── Elementwise and arithmetic ──────────────────────────────────

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), NumericError> {
        if self.shapes[a] != self.shapes[b] {
            return Err(NumericError::ShapeMismatch {
                expected: format!("{what}: {:?}", self.shapes[a]),
                got: format!("{:?}", self.shapes[b]),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.check_same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Add { a, b }, self.shapes[a].clone(), data, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.check_same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Sub { a, b }, self.shapes[a].clone(), data, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Mul { a, b }, self.shapes[a].clone(), data, req))
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let req = self.requires[a];
        self.push(Op::Scale { a, c }, self.shapes[a].clone(), data, req)
    }

    pub fn offset(&mut self, a: NodeId, c: R) -> NodeId {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        let req = self.requires[a];
        self.push(Op::Offset { a }, self.shapes[a].clone(), data, req)
    }

    unary_op!(relu, Relu, |x: R| if x > R::zero() { x } else { R::zero() });
    unary_op!(sigmoid, Sigmoid, |x: R| R::one() / (R::one() + (-x).exp()));
    unary_op!(tanh, Tanh, |x: R| x.tanh());
    unary_op!(exp, Exp, |x: R| x.exp());
    unary_op!(ln, Ln, |x: R| x.ln());
    unary_op!(recip, Recip, |x: R| R::one() / x);

    // ── Linear algebra ──────────────────────────────────────────────

    /// y = W x + b with W: [m, n], x: [n], b: [m].
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (m, n) = self.mat_dims(w, "affine W")?;
        if self.numel(x) != n || self.numel(b) != m {
            return Err(NumericError::ShapeMismatch {
                expected: format!("affine: x[{n}], b[{m}] for W[{m}x{n}]"),
                got: format!("x[{}], b[{}]", self.numel(x), self.numel(b)),
            });
        }
        let mut y = vec![R::zero(); m];
        matmul(self.data(w), self.data(x), m, n, 1, &mut y);
        for (yi, bi) in y.iter_mut().zip(self.data(b)) {
            *yi = *yi + *bi;
        }
        let req = self.requires[w] || self.requires[x] || self.requires[b];
        Ok(self.push(Op::Affine { w, x, b }, vec![m], y, req))
    }

    /// y = W x with W: [m, n], x: [n].
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, NumericError> {
        let (m, n) = self.mat_dims(w, "matvec W")?;
        if self.numel(x) != n {
            return Err(NumericError::ShapeMismatch {
                expected: format!("matvec: x[{n}] for W[{m}x{n}]"),
                got: format!("x[{}]", self.numel(x)),
            });
        }
        let mut y = vec![R::zero(); m];
        matmul(self.data(w), self.data(x), m, n, 1, &mut y);
        let req = self.requires[w] || self.requires[x];
        Ok(self.push(Op::MatVec { w, x }, vec![m], y, req))
    }

    /// C = A B with A: [m, k], B: [k, n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (m, k) = self.mat_dims(a, "matmul A")?;
        let (kb, n) = self.mat_dims(b, "matmul B")?;
        if k != kb {
            return Err(NumericError::ShapeMismatch {
                expected: format!("matmul inner dim {k}"),
                got: format!("{kb}"),
            });
        }
        let mut y = vec![R::zero(); m * n];
        matmul(self.data(a), self.data(b), m, k, n, &mut y);
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], y, req))
    }

    /// C = A B^T with A: [m, k], B: [n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (m, k) = self.mat_dims(a, "matmul_nt A")?;
        let (n, kb) = self.mat_dims(b, "matmul_nt B")?;
        if k != kb {
            return Err(NumericError::ShapeMismatch {
                expected: format!("matmul_nt inner dim {k}"),
                got: format!("{kb}"),
            });
        }
        let mut y = vec![R::zero(); m * n];
        matmul_nt_acc(self.data(a), self.data(b), m, k, n, &mut y);
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::MatMulNT { a, b, m, k, n }, vec![m, n], y, req))
    }

    fn mat_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize), NumericError> {
        let s = &self.shapes[id];
        if s.len() != 2 {
            return Err(NumericError::ShapeMismatch {
                expected: format!("{what}: 2-d matrix"),
                got: format!("{s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Valid (no padding) cross-correlation. x: [C, H, W], k: [F, C, kh, kw].
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize) -> Result<NodeId, NumericError> {
        let xs = self.shapes[x].clone();
        let ks = self.shapes[k].clone();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(NumericError::ShapeMismatch {
                expected: "conv2d: x[C,H,W], k[F,C,kh,kw]".into(),
                got: format!("x{xs:?}, k{ks:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(NumericError::ShapeMismatch {
                expected: format!("conv2d kernel channels {c}"),
                got: format!("{kc}"),
            });
        }
        if kh > h || kw > w {
            return Err(NumericError::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        if stride == 0 {
            return Err(NumericError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let ckk = c * kh * kw;
        let p = oh * ow;
        let cols = im2col(self.data(x), c, h, w, kh, kw, stride, oh, ow);
        let mut y = vec![R::zero(); f * p];
        matmul(self.data(k), &cols, f, ckk, p, &mut y);
        let req = self.requires[x] || self.requires[k];
        Ok(self.push(Op::Conv2d { x, k, stride }, vec![f, oh, ow], y, req))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: R = self.data(a).iter().copied().sum();
        let req = self.requires[a];
        self.push(Op::Sum { a }, vec![1], vec![s], req)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.numel(a);
        let s: R = self.data(a).iter().copied().sum();
        let req = self.requires[a];
        self.push(Op::Mean { a }, vec![1], vec![s / R::of_f64(n as f64)], req)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.check_same_shape(a, b, "dot")?;
        let s: R = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .sum();
        let req = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Dot { a, b }, vec![1], vec![s], req))
    }

    /// Squared L2 norm, scalar output.
    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s: R = self.data(a).iter().map(|&x| x * x).sum();
        let req = self.requires[a];
        self.push(Op::SumSq { a }, vec![1], vec![s], req)
    }

    // ── Softmax family (1-d) ────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.data(a);
        let m = x.iter().copied().fold(R::neg_infinity(), R::max);
        let mut y: Vec<R> = x.iter().map(|&v| (v - m).exp()).collect();
        let z: R = y.iter().copied().sum();
        y.iter_mut().for_each(|v| *v = *v / z);
        let req = self.requires[a];
        self.push(Op::Softmax { a }, self.shapes[a].clone(), y, req)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.data(a);
        let m = x.iter().copied().fold(R::neg_infinity(), R::max);
        let z: R = x.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln() + m;
        let y: Vec<R> = x.iter().map(|&v| v - lz).collect();
        let req = self.requires[a];
        self.push(Op::LogSoftmax { a }, self.shapes[a].clone(), y, req)
    }

    // ── Structure ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let req = parts.iter().any(|&p| self.requires[p]);
        let len = data.len();
        self.push(Op::Concat { parts: parts.to_vec() }, vec![len], data, req)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NumericError> {
        if start + len > self.numel(a) {
            return Err(NumericError::InvalidArgument(format!(
                "slice [{start}, {}) out of bounds for length {}",
                start + len,
                self.numel(a)
            )));
        }
        let data = self.data(a)[start..start + len].to_vec();
        let req = self.requires[a];
        Ok(self.push(Op::Slice { a, start, len }, vec![len], data, req))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId, NumericError> {
        if i >= self.numel(a) {
            return Err(NumericError::InvalidArgument(format!(
                "index {i} out of bounds for length {}",
                self.numel(a)
            )));
        }
        let v = self.data(a)[i];
        let req = self.requires[a];
        Ok(self.push(Op::Index { a, i }, vec![1], vec![v], req))
    }

    /// y = s * v, with s a scalar node and v a vector node.
    pub fn mul_scalar(&mut self, v: NodeId, s: NodeId) -> Result<NodeId, NumericError> {
        if self.numel(s) != 1 {
            return Err(NumericError::ShapeMismatch {
                expected: "scalar".into(),
                got: format!("{:?}", self.shapes[s]),
            });
        }
        let sv = self.value(s);
        let data = self.data(v).iter().map(|&x| x * sv).collect();
        let req = self.requires[v] || self.requires[s];
        Ok(self.push(Op::MulScalar { v, s }, self.shapes[v].clone(), data, req))
    }

    /// L2-normalize each row of a 2-d matrix. Zero rows stay zero.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId, NumericError> {
        let (n, d) = self.mat_dims(a, "row_normalize")?;
        let x = self.data(a);
        let mut y = vec![R::zero(); n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<R>().sqrt();
            if norm > R::zero() {
                for j in 0..d {
                    y[i * d + j] = row[j] / norm;
                }
            }
        }
        let req = self.requires[a];
        Ok(self.push(Op::RowNormalize { a }, vec![n, d], y, req))
    }

    /// Per-anchor normalized-temperature cross-entropy losses.
    ///
    /// `oo[i][j]` is the similarity of anchor i to original j, `oa[i][j]`
    /// to augmented j. For each anchor the positive is `oa[i][i]`; the
    /// denominator runs over the other originals, all augmenteds and the
    /// positive itself. Output is the length-N vector of losses.
    pub fn nt_xent(&mut self, oo: NodeId, oa: NodeId, tau: R) -> Result<NodeId, NumericError> {
        let (n, n2) = self.mat_dims(oo, "nt_xent oo")?;
        let (na, na2) = self.mat_dims(oa, "nt_xent oa")?;
        if n != n2 || na != n || na2 != n {
            return Err(NumericError::ShapeMismatch {
                expected: format!("nt_xent: square [{n}x{n}] similarity matrices"),
                got: format!("oo[{n}x{n2}], oa[{na}x{na2}]"),
            });
        }
        if tau <= R::zero() {
            return Err(NumericError::InvalidArgument("nt_xent temperature must be positive".into()));
        }
        let soo = self.data(oo);
        let soa = self.data(oa);
        let mut out = vec![R::zero(); n];
        for i in 0..n {
            let (m, d) = nt_xent_row_denom(soo, soa, n, i, tau);
            out[i] = -soa[i * n + i] / tau + m / tau + d.ln();
        }
        let req = self.requires[oo] || self.requires[oa];
        Ok(self.push(Op::NtXent { oo, oa, tau }, vec![n], out, req))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss with seed gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericError> {
        if self.numel(loss) != 1 {
            return Err(NumericError::NonScalarLoss(self.shapes[loss].clone()));
        }
        self.backward_seeded(loss, &[R::one()])
    }

    /// Backpropagate from `node` with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, node: NodeId, seed: &[R]) -> Result<(), NumericError> {
        if seed.len() != self.numel(node) {
            return Err(NumericError::ShapeMismatch {
                expected: format!("seed of length {}", self.numel(node)),
                got: format!("{}", seed.len()),
            });
        }
        {
            let buf = grad_buf(&mut self.grads, node, seed.len());
            for (g, s) in buf.iter_mut().zip(seed) {
                *g = *g + *s;
            }
        }

        for i in (0..=node).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            // Leaves keep their gradient for later export.
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.op_backward(i, &g);
        }
        Ok(())
    }

    fn op_backward(&mut self, i: NodeId, g: &[R]) {
        let op = self.ops[i].clone();
        let params = self.params;
        let data = &self.data;
        let leaf_param = &self.leaf_param;
        let shapes = &self.shapes;
        let requires = &self.requires;
        let grads = &mut self.grads;
        let out = |id: NodeId| resolve(data, leaf_param, params, id);
        let numel = |id: NodeId| shapes[id].iter().product::<usize>();

        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
                if requires[b] {
                    let gb = grad_buf(grads, b, numel(b));
                    for (x, &gv) in gb.iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
            }
            Op::Sub { a, b } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
                if requires[b] {
                    let gb = grad_buf(grads, b, numel(b));
                    for (x, &gv) in gb.iter_mut().zip(g) {
                        *x = *x - gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if requires[a] {
                    let bd: Vec<R> = out(b).to_vec();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &bv) in ga.iter_mut().zip(g).zip(&bd) {
                        *x = *x + gv * bv;
                    }
                }
                if requires[b] {
                    let ad: Vec<R> = out(a).to_vec();
                    let gb = grad_buf(grads, b, numel(b));
                    for ((x, &gv), &av) in gb.iter_mut().zip(g).zip(&ad) {
                        *x = *x + gv * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x = *x + gv * c;
                    }
                }
            }
            Op::Offset { a } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
            }
            Op::Affine { w, x, b } => {
                let (m, n) = (shapes[w][0], shapes[w][1]);
                if requires[w] {
                    let xd = out(x).to_vec();
                    let gw = grad_buf(grads, w, m * n);
                    outer_acc(g, &xd, gw, m, n);
                }
                if requires[x] {
                    let wd = out(w).to_vec();
                    let gx = grad_buf(grads, x, n);
                    matmul_tn_acc(&wd, g, n, m, 1, gx);
                }
                if requires[b] {
                    let gb = grad_buf(grads, b, m);
                    for (x_, &gv) in gb.iter_mut().zip(g) {
                        *x_ = *x_ + gv;
                    }
                }
            }
            Op::MatVec { w, x } => {
                let (m, n) = (shapes[w][0], shapes[w][1]);
                if requires[w] {
                    let xd = out(x).to_vec();
                    let gw = grad_buf(grads, w, m * n);
                    outer_acc(g, &xd, gw, m, n);
                }
                if requires[x] {
                    let wd = out(w).to_vec();
                    let gx = grad_buf(grads, x, n);
                    matmul_tn_acc(&wd, g, n, m, 1, gx);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if requires[a] {
                    let bd = out(b).to_vec();
                    let ga = grad_buf(grads, a, m * k);
                    matmul_nt_acc(g, &bd, m, n, k, ga);
                }
                if requires[b] {
                    let ad = out(a).to_vec();
                    let gb = grad_buf(grads, b, k * n);
                    matmul_tn_acc(&ad, g, k, m, n, gb);
                }
            }
            Op::MatMulNT { a, b, m, k, n } => {
                // y = A B^T; dA = G B, dB = G^T A
                if requires[a] {
                    let bd = out(b).to_vec();
                    let ga = grad_buf(grads, a, m * k);
                    R::gemm(
                        m, n, k,
                        R::one(),
                        g, n as isize, 1,
                        &bd, k as isize, 1,
                        R::one(),
                        ga, k as isize, 1,
                    );
                }
                if requires[b] {
                    let ad = out(a).to_vec();
                    let gb = grad_buf(grads, b, n * k);
                    matmul_tn_acc(g, &ad, n, m, k, gb);
                }
            }
            Op::Conv2d { x, k, stride } => {
                let xs = shapes[x].clone();
                let ks = shapes[k].clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (f, kh, kw) = (ks[0], ks[2], ks[3]);
                let oh = (h - kh) / stride + 1;
                let ow = (w - kw) / stride + 1;
                let ckk = c * kh * kw;
                let p = oh * ow;
                if requires[k] {
                    let cols = im2col(out(x), c, h, w, kh, kw, stride, oh, ow);
                    let gk = grad_buf(grads, k, f * ckk);
                    matmul_nt_acc(g, &cols, f, p, ckk, gk);
                }
                if requires[x] {
                    let kd = out(k).to_vec();
                    let mut gcols = vec![R::zero(); ckk * p];
                    matmul_tn_acc(&kd, g, ckk, f, p, &mut gcols);
                    let gx = grad_buf(grads, x, c * h * w);
                    col2im_acc(&gcols, c, h, w, kh, kw, stride, oh, ow, gx);
                }
            }
            Op::Relu { a } => {
                if requires[a] {
                    let ad = out(a).to_vec();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &av) in ga.iter_mut().zip(g).zip(&ad) {
                        if av > R::zero() {
                            *x = *x + gv;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if requires[a] {
                    let yd = data[i].clone();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(&yd) {
                        *x = *x + gv * yv * (R::one() - yv);
                    }
                }
            }
            Op::Tanh { a } => {
                if requires[a] {
                    let yd = data[i].clone();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(&yd) {
                        *x = *x + gv * (R::one() - yv * yv);
                    }
                }
            }
            Op::Exp { a } => {
                if requires[a] {
                    let yd = data[i].clone();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(&yd) {
                        *x = *x + gv * yv;
                    }
                }
            }
            Op::Ln { a } => {
                if requires[a] {
                    let ad = out(a).to_vec();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &av) in ga.iter_mut().zip(g).zip(&ad) {
                        *x = *x + gv / av;
                    }
                }
            }
            Op::Sum { a } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    let g0 = g[0];
                    for x in ga.iter_mut() {
                        *x = *x + g0;
                    }
                }
            }
            Op::Mean { a } => {
                if requires[a] {
                    let n = numel(a);
                    let ga = grad_buf(grads, a, n);
                    let g0 = g[0] / R::of_f64(n as f64);
                    for x in ga.iter_mut() {
                        *x = *x + g0;
                    }
                }
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                if requires[a] {
                    let bd = out(b).to_vec();
                    let ga = grad_buf(grads, a, numel(a));
                    for (x, &bv) in ga.iter_mut().zip(&bd) {
                        *x = *x + g0 * bv;
                    }
                }
                if requires[b] {
                    let ad = out(a).to_vec();
                    let gb = grad_buf(grads, b, numel(b));
                    for (x, &av) in gb.iter_mut().zip(&ad) {
                        *x = *x + g0 * av;
                    }
                }
            }
            Op::SumSq { a } => {
                if requires[a] {
                    let g0 = g[0];
                    let ad = out(a).to_vec();
                    let ga = grad_buf(grads, a, numel(a));
                    let two = R::of_f64(2.0);
                    for (x, &av) in ga.iter_mut().zip(&ad) {
                        *x = *x + two * g0 * av;
                    }
                }
            }
            Op::Softmax { a } => {
                if requires[a] {
                    let yd = data[i].clone();
                    let dot: R = g.iter().zip(&yd).map(|(&gv, &yv)| gv * yv).sum();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(&yd) {
                        *x = *x + yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if requires[a] {
                    let yd = data[i].clone();
                    let gsum: R = g.iter().copied().sum();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(&yd) {
                        *x = *x + gv - yv.exp() * gsum;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &pnode in &parts {
                    let len = numel(pnode);
                    if requires[pnode] {
                        let gp = grad_buf(grads, pnode, len);
                        for (x, &gv) in gp.iter_mut().zip(&g[off..off + len]) {
                            *x = *x + gv;
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { a, start, len } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    for (x, &gv) in ga[start..start + len].iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
            }
            Op::Index { a, i: idx } => {
                if requires[a] {
                    let ga = grad_buf(grads, a, numel(a));
                    ga[idx] = ga[idx] + g[0];
                }
            }
            Op::MulScalar { v, s } => {
                let sv = out(s)[0];
                if requires[v] {
                    let gv_buf = grad_buf(grads, v, numel(v));
                    for (x, &gv) in gv_buf.iter_mut().zip(g) {
                        *x = *x + gv * sv;
                    }
                }
                if requires[s] {
                    let vd = out(v).to_vec();
                    let dot: R = g.iter().zip(&vd).map(|(&gv, &vv)| gv * vv).sum();
                    let gs = grad_buf(grads, s, 1);
                    gs[0] = gs[0] + dot;
                }
            }
            Op::Recip { a } => {
                if requires[a] {
                    let yd = data[i].clone();
                    let ga = grad_buf(grads, a, numel(a));
                    for ((x, &gv), &yv) in ga.iter_mut().zip(g).zip(&yd) {
                        *x = *x - gv * yv * yv;
                    }
                }
            }
            Op::RowNormalize { a } => {
                if requires[a] {
                    let (n, d) = (shapes[a][0], shapes[a][1]);
                    let xd = out(a).to_vec();
                    let yd = data[i].clone();
                    let ga = grad_buf(grads, a, n * d);
                    for r_ in 0..n {
                        let x_row = &xd[r_ * d..(r_ + 1) * d];
                        let y_row = &yd[r_ * d..(r_ + 1) * d];
                        let g_row = &g[r_ * d..(r_ + 1) * d];
                        let norm = x_row.iter().map(|&v| v * v).sum::<R>().sqrt();
                        if norm <= R::zero() {
                            continue;
                        }
                        let yg: R = y_row.iter().zip(g_row).map(|(&y, &gv)| y * gv).sum();
                        for j in 0..d {
                            ga[r_ * d + j] = ga[r_ * d + j] + (g_row[j] - y_row[j] * yg) / norm;
                        }
                    }
                }
            }
            Op::NtXent { oo, oa, tau } => {
                let n = shapes[oo][0];
                let soo = out(oo).to_vec();
                let soa = out(oa).to_vec();
                let need_oo = requires[oo];
                let need_oa = requires[oa];
                // Touch oa first so both buffers exist before the split borrow.
                if need_oo {
                    let _ = grad_buf(grads, oo, n * n);
                }
                if need_oa {
                    let _ = grad_buf(grads, oa, n * n);
                }
                for i_ in 0..n {
                    let gi = g[i_];
                    if gi == R::zero() {
                        continue;
                    }
                    let (m, denom) = nt_xent_row_denom(&soo, &soa, n, i_, tau);
                    let inv = gi / (tau * denom);
                    if need_oo {
                        let goo = grads[oo].as_mut().expect("buffer initialized");
                        for j in 0..n {
                            if j == i_ {
                                continue;
                            }
                            goo[i_ * n + j] =
                                goo[i_ * n + j] + inv * ((soo[i_ * n + j] - m) / tau).exp();
                        }
                    }
                    if need_oa {
                        let goa = grads[oa].as_mut().expect("buffer initialized");
                        for j in 0..n {
                            goa[i_ * n + j] =
                                goa[i_ * n + j] + inv * ((soa[i_ * n + j] - m) / tau).exp();
                        }
                        goa[i_ * n + i_] = goa[i_ * n + i_] - gi / tau;
                    }
                }
            }
        }
    }

    /// Gradient of a leaf created with `var_leaf` (None if it never
    /// received one).
    pub fn leaf_grad(&self, id: NodeId) -> Option<&[R]> {
        self.grads[id].as_deref()
    }

    /// Drain accumulated parameter gradients out of the tape.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<R>)> {
        let mut outp = Vec::new();
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = self.grads[nid].take() {
                outp.push((pid, g));
            }
        }
        // HashMap order is arbitrary; keep the export deterministic.
        outp.sort_by_key(|(pid, _)| pid.0);
        outp
    }
}

fn nt_xent_row_denom<R: Real>(soo: &[R], soa: &[R], n: usize, i: usize, tau: R) -> (R, R) {
    let mut m = R::neg_infinity();
    for j in 0..n {
        if j != i {
            m = m.max(soo[i * n + j]);
        }
        m = m.max(soa[i * n + j]);
    }
    let mut d = R::zero();
    for j in 0..n {
        if j != i {
            d = d + ((soo[i * n + j] - m) / tau).exp();
        }
        d = d + ((soa[i * n + j] - m) / tau).exp();
    }
    (m, d)
}

fn outer_acc<R: Real>(g: &[R], x: &[R], out: &mut [R], m: usize, n: usize) {
    for i in 0..m {
        let gi = g[i];
        if gi == R::zero() {
            continue;
        }
        let row = &mut out[i * n..(i + 1) * n];
        for (o, &xv) in row.iter_mut().zip(x) {
            *o = *o + gi * xv;
        }
    }
}

fn im2col<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<R> {
    let p = oh * ow;
    let mut cols = vec![R::zero(); c * kh * kw * p];
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let q = (ci * kh + dy) * kw + dx;
                let dst = &mut cols[q * p..(q + 1) * p];
                for oy in 0..oh {
                    let sy = oy * stride + dy;
                    let src = &x[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        drow[ox] = src[ox * stride + dx];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc<R: Real>(
    gcols: &[R],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    gx: &mut [R],
) {
    let p = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let q = (ci * kh + dy) * kw + dx;
                let src = &gcols[q * p..(q + 1) * p];
                for oy in 0..oh {
                    let sy = oy * stride + dy;
                    let drow = &mut gx[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    for ox in 0..ow {
                        let v = src[oy * ow + ox];
                        drow[ox * stride + dx] = drow[ox * stride + dx] + v;
                    }
                }
            }
        }
    }
}
