//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is a Wengert list: every forward operation appends a node
//! holding its output value and the ids of its inputs, so input ids always
//! precede their consumers. [`Tape::backward`] sweeps the list once in
//! reverse, accumulating gradients for every leaf created with
//! `requires_grad`.
//!
//! All arithmetic is `f64`. Every forward output is checked for NaN/Inf and
//! reported as a hard error rather than silently propagated.
//!
//! A tape and its variables belong to one execution context; independent
//! tapes may run in parallel threads.

use thiserror::Error;

use crate::conv;
use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, transpose_into};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;

fn shape_err(op: &'static str, detail: String) -> TapeError {
    TapeError::Shape { op, detail }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    #[doc(hidden)]
    pub fn for_debug(id: usize) -> Var {
        Var(id)
    }
}

impl Tape {
    #[doc(hidden)]
    pub fn debug_op(&self, v: Var) -> (&'static str, Vec<Var>) {
        match &self.nodes[v.0].op {
            Op::Leaf => ("leaf", vec![]),
            Op::Add(a, b) => ("add", vec![*a, *b]),
            Op::Sub(a, b) => ("sub", vec![*a, *b]),
            Op::Mul(a, b) => ("mul", vec![*a, *b]),
            Op::ScalarMul(a, _) => ("scalar_mul", vec![*a]),
            Op::Relu(a) => ("relu", vec![*a]),
            Op::Sigmoid(a) => ("sigmoid", vec![*a]),
            Op::Exp(a) => ("exp", vec![*a]),
            Op::Ln(a) => ("ln", vec![*a]),
            Op::Reciprocal(a) => ("reciprocal", vec![*a]),
            Op::Square(a) => ("square", vec![*a]),
            Op::Matmul(a, b) => ("matmul", vec![*a, *b]),
            Op::Transpose(a) => ("transpose", vec![*a]),
            Op::Reshape(a) => ("reshape", vec![*a]),
            Op::Concat { inputs, .. } => ("concat", inputs.clone()),
            Op::Sum(a) => ("sum", vec![*a]),
            Op::Mean(a) => ("mean", vec![*a]),
            Op::Conv2d { x, w, b, .. } => ("conv2d", vec![*x, *w, *b]),
            Op::MaxPool2x2 { x, .. } => ("maxpool2x2", vec![*x]),
            Op::AvgPool { x, .. } => ("avgpool", vec![*x]),
            Op::Upsample { x, .. } => ("upsample_nearest", vec![*x]),
        }
    }
}

/// Distances of a recorded graph from its nondifferentiable points; used to
/// validate gradient-check fixtures.
#[derive(Clone, Copy, Debug)]
pub struct KinkMargins {
    /// Smallest |x| over all relu inputs.
    pub relu: f64,
    /// Smallest gap between the two largest values of any max-pooled 2x2
    /// block whose maximum is positive (blocks frozen at zero cannot move).
    pub pool_gap: f64,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Reciprocal(Var),
    Square(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { axis: usize, inputs: Vec<Var> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2x2 { x: Var, idx: Vec<u32> },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, f: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Places a tensor on the tape as a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: &'static str, node_op: Op, value: Tensor, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op });
        }
        self.nodes.push(Node { op: node_op, value, requires_grad: rg });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        );
        self.push("add", Op::Add(a, b), v, self.rg2(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect(),
        );
        self.push("sub", Op::Sub(a, b), v, self.rg2(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        );
        self.push("mul", Op::Mul(a, b), v, self.rg2(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x * c).collect(),
        );
        self.push("scalar_mul", Op::ScalarMul(a, c), v, self.nodes[a.0].requires_grad)
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        make: impl Fn(Var) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| f(x)).collect(),
        );
        self.push(op, make(a), v, self.nodes[a.0].requires_grad)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, Op::Ln, f64::ln)
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary("reciprocal", a, Op::Reciprocal, f64::recip)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square, |x| x * x)
    }

    /// [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 {
            return Err(shape_err("matmul", format!("lhs must be rank 2, got {sa:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let value = match sb.len() {
            2 => {
                if sb[0] != k {
                    return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
                }
                let n = sb[1];
                let mut out = vec![0.0; m * n];
                gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
                Tensor::new(vec![m, n], out)
            }
            1 => {
                if sb[0] != k {
                    return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
                }
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let out = (0..m).map(|i| dot(&ad[i * k..(i + 1) * k], bd)).collect();
                Tensor::new(vec![m], out)
            }
            _ => return Err(shape_err("matmul", format!("rhs must be rank 1 or 2, got {sb:?}"))),
        };
        self.push("matmul", Op::Matmul(a, b), value, self.rg2(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("requires rank 2, got {s:?}")));
        }
        let mut out = vec![0.0; s[0] * s[1]];
        transpose_into(self.value(a).data(), &mut out, s[0], s[1]);
        let v = Tensor::new(vec![s[1], s[0]], out);
        self.push("transpose", Op::Transpose(a), v, self.nodes[a.0].requires_grad)
    }

    /// Same data, new shape (the product of extents must match).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let want: usize = shape.iter().product();
        if want != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        let v = self.value(a).reshaped(shape);
        self.push("reshape", Op::Reshape(a), v, self.nodes[a.0].requires_grad)
    }

    /// Flattens to rank 1.
    pub fn vectorize(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    /// Concatenates same-rank tensors along `axis`; all other extents must
    /// agree.
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TapeError::Contract("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_block = axis_total * inner;
        let mut out = vec![0.0; outer * out_block];
        let mut offset = 0;
        for &v in inputs {
            let t = self.value(v);
            let block = t.shape()[axis] * inner;
            for o in 0..outer {
                out[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push("concat", Op::Concat { axis, inputs: inputs.to_vec() }, Tensor::new(shape, out), rg)
    }

    /// Full reduction to a scalar (shape [1]).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(s), self.nodes[a.0].requires_grad)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push("mean", Op::Mean(a), Tensor::scalar(s / n), self.nodes[a.0].requires_grad)
    }

    /// x [Cin,H,W] ⊛ w [Cout,Cin,kh,kw] + b [Cout], with the given stride and
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape().to_vec());
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        if sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(shape_err(
                "conv2d",
                format!("channels: x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        if stride == 0 {
            return Err(TapeError::Contract("conv2d stride must be positive".into()));
        }
        if conv::conv_out_extent(sx[1], sw[2], stride, pad).is_none()
            || conv::conv_out_extent(sx[2], sw[3], stride, pad).is_none()
        {
            return Err(shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let value = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.rg2(x, w) || self.nodes[b.0].requires_grad;
        self.push("conv2d", Op::Conv2d { x, w, b, stride, pad }, value, rg)
    }

    /// 2x2 max pooling with stride 2; both spatial extents must be even.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err("maxpool2x2", format!("{s:?}")));
        }
        let (value, idx) = conv::maxpool2x2_forward(self.value(x));
        let rg = self.nodes[x.0].requires_grad;
        self.push("maxpool2x2", Op::MaxPool2x2 { x, idx }, value, rg)
    }

    /// Average pooling with a k x k kernel and stride k over the trailing two
    /// modes (rank 2 or 3 input).
    pub fn avgpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let ok = matches!(s.len(), 2 | 3) && {
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            k > 0 && h % k == 0 && w % k == 0
        };
        if !ok {
            return Err(shape_err("avgpool", format!("{s:?} with kernel {k}")));
        }
        let value = conv::avgpool_forward(self.value(x), k);
        let rg = self.nodes[x.0].requires_grad;
        self.push("avgpool", Op::AvgPool { x, k }, value, rg)
    }

    /// Nearest-neighbour upsampling by integer factor f on the trailing two
    /// modes (rank 2 or 3 input).
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if !matches!(s.len(), 2 | 3) || f == 0 {
            return Err(shape_err("upsample_nearest", format!("{s:?} with factor {f}")));
        }
        let value = conv::upsample_forward(self.value(x), f);
        let rg = self.nodes[x.0].requires_grad;
        self.push("upsample_nearest", Op::Upsample { x, f }, value, rg)
    }

    /// Measures how far the recorded graph stays from relu kinks and
    /// max-pool ties. Finite-difference checks are only trustworthy when
    /// these margins comfortably exceed the probe step.
    pub fn kink_margins(&self) -> KinkMargins {
        let mut relu = f64::INFINITY;
        let mut pool_gap = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        relu = relu.min(x.abs());
                    }
                }
                Op::MaxPool2x2 { x, .. } => {
                    let t = self.value(*x);
                    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                    let d = t.data();
                    for cc in 0..c {
                        for oi in 0..h / 2 {
                            for oj in 0..w / 2 {
                                let base = (cc * h + 2 * oi) * w + 2 * oj;
                                let vals =
                                    [d[base], d[base + 1], d[base + w], d[base + w + 1]];
                                let mut top = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for v in vals {
                                    if v > top {
                                        second = top;
                                        top = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                                if top > 0.0 {
                                    pool_gap = pool_gap.min(top - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        KinkMargins { relu, pool_gap }
    }

    /// Propagates gradients from a scalar root back to every leaf that
    /// requires them. Each node is visited exactly once, in reverse order of
    /// recording.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(TapeError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || grads[id].is_none() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue; // keep the accumulated gradient
            }
            let g = grads[id].take().expect("checked above");
            self.backprop_node(id, &g, &mut grads);
        }

        // Unused leaves still report zero gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (slot, d) in t.data_mut().iter_mut().zip(delta.data()) {
                        *slot += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => unreachable!("leaves are not backpropagated"),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect());
                acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ScalarMul(a, c) => {
                let da = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * c).collect());
                acc(grads, *a, da);
            }
            Op::Relu(a) => {
                // gradient at exactly zero is defined as zero
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Ln(a) => {
                let xv = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(xv.data()).map(|(gv, xv)| gv / xv).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Reciprocal(a) => {
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gv, yv)| -gv * yv * yv).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Square(a) => {
                let xv = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(xv.data()).map(|(gv, xv)| 2.0 * gv * xv).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                if bv.rank() == 2 {
                    let n = bv.shape()[1];
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    // dB = A^T . g, computed as (g^T . A)^T when A is the
                    // wide operand so only the small matrices get transposed
                    let mut db = vec![0.0; k * n];
                    if k > 4 * m {
                        let mut gt = vec![0.0; m * n];
                        transpose_into(g.data(), &mut gt, m, n);
                        let mut dbt = vec![0.0; n * k];
                        gemm_nn(&gt, av.data(), &mut dbt, n, m, k);
                        transpose_into(&dbt, &mut db, n, k);
                    } else {
                        let mut at = vec![0.0; m * k];
                        transpose_into(av.data(), &mut at, m, k);
                        gemm_nn(&at, g.data(), &mut db, k, m, n);
                    }
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                    acc(grads, *b, Tensor::new(vec![k, n], db));
                } else {
                    // vector rhs: dA[i] = g[i] * b, dB = sum_i g[i] * A[i]
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k];
                    for i in 0..m {
                        let gi = g.data()[i];
                        axpy(gi, bv.data(), &mut da[i * k..(i + 1) * k]);
                        axpy(gi, &av.data()[i * k..(i + 1) * k], &mut db);
                    }
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                    acc(grads, *b, Tensor::new(vec![k], db));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let mut da = vec![0.0; g.len()];
                transpose_into(g.data(), &mut da, s[0], s[1]);
                acc(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da));
            }
            Op::Reshape(a) => {
                acc(grads, *a, g.reshaped(self.value(*a).shape()));
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape().to_vec();
                    let block = s[axis] * inner;
                    let mut dv = vec![0.0; self.value(v).len()];
                    for o in 0..outer {
                        dv[o * block..(o + 1) * block].copy_from_slice(
                            &g.data()[o * out_block + offset..o * out_block + offset + block],
                        );
                    }
                    acc(grads, v, Tensor::new(s, dv));
                    offset += block;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(grads, *a, Tensor::full(self.value(*a).shape(), g.item() / n));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::MaxPool2x2 { x, idx } => {
                acc(grads, *x, conv::maxpool2x2_backward(idx, g, self.value(*x).shape()));
            }
            Op::AvgPool { x, k } => {
                acc(grads, *x, conv::avgpool_backward(g, *k, self.value(*x).shape()));
            }
            Op::Upsample { x, f } => {
                acc(grads, *x, conv::upsample_backward(g, *f, self.value(*x).shape()));
            }
        }
    }
}

/// Gradients produced by one backward sweep, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a variable, if one was accumulated.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}
