//! Define-by-run reverse-mode automatic differentiation over 64-bit tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Model
//! parameters live outside any graph in a [`ParamSet`]; a graph copies the
//! values it needs through [`Graph::param`] and, on [`Graph::backward`],
//! adds the resulting gradients into the parameter tensors. Gradients
//! therefore accumulate across several graphs until explicitly zeroed.

use std::fmt;

use rand::Rng;

mod kernels;

pub use kernels::gemm;

/// Coefficient of the cubic term in the tanh approximation of gelu.
pub const GELU_CUBIC: f64 = 0.044_715;
/// sqrt(2 / pi), the scale inside the tanh approximation of gelu.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Floor applied to the norm in [`Graph::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("shape {shape:?} does not match {len} values")]
    Length { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Values drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        }
        if self.requires_grad {
            self.grad = grad;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer. A no-op when the tensor does not
    /// require gradients.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Gelu,
    Relu,
    Pow(f64),
}

/// Right-hand operand of [`Graph::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    LogSumExp,
    Softmax,
    LogSoftmax,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scalar {
        kind: BinaryKind,
        a: Var,
        s: f64,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    AngularMargin {
        a: Var,
        margin: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: kernels::ConvGeom,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Slice {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        take: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Gather {
        a: Var,
        rows: usize,
        width: usize,
        index: Vec<Option<usize>>,
    },
    MaskLengths {
        a: Var,
        geom: LengthMask,
    },
}

/// Position decoding for [`Graph::mask_lengths`].
#[derive(Clone, Debug)]
struct LengthMask {
    per_item: usize,
    axis_len: usize,
    inner: usize,
    lengths: Vec<usize>,
}

impl LengthMask {
    fn keep(&self, i: usize) -> bool {
        (i % self.per_item) / self.inner % self.axis_len < self.lengths[i / self.per_item]
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Operation record for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn margin_forward(c: f64, margin: f64) -> f64 {
    let (sin_m, cos_m) = margin.sin_cos();
    if c <= (std::f64::consts::PI - margin).cos() {
        c - margin * sin_m
    } else {
        let sin = (1.0 - c * c).max(0.0).sqrt();
        c * cos_m - sin * sin_m
    }
}

fn margin_grad(c: f64, margin: f64) -> f64 {
    let (sin_m, cos_m) = margin.sin_cos();
    if c <= (std::f64::consts::PI - margin).cos() {
        1.0
    } else {
        let sin = (1.0 - c * c).max(1e-24).sqrt();
        cos_m + c / sin * sin_m
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// The single value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let data = &self.nodes[v.0].data;
        assert_eq!(data.len(), 1, "scalar_value on a non-scalar node");
        data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant (never differentiated) input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, tensor.data, false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(t))
    }

    /// Records a leaf that mirrors parameter `id` of `params`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        let v = self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Records a free leaf that receives a gradient, readable through
    /// [`Graph::gradients`] after backward.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, tensor.data, true, Op::Leaf)
    }

    // ----- elementwise -----

    fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
        b.len() <= a.len() && a[a.len() - b.len()..] == *b
    }

    /// Dispatches an elementwise binary operation. `b` broadcasts over the
    /// leading dimensions of `a` when its shape is a suffix of `a`'s shape.
    pub fn elementwise(&mut self, kind: BinaryKind, a: Var, b: Operand) -> Result<Var> {
        match b {
            Operand::Var(b) => self.binary(kind, a, b),
            Operand::Scalar(s) => self.scalar_op(kind, a, s),
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let b_is_scalar = self.nodes[b.0].data.len() == 1 && sb.len() <= 1;
        if !Self::broadcast_ok(sa, sb) && !b_is_scalar {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let bd = &self.nodes[b.0].data;
        if kind == BinaryKind::Div {
            if let Some(pos) = bd.iter().position(|&x| x == 0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    detail: format!("division by zero at divisor index {pos}"),
                });
            }
        }
        let ad = &self.nodes[a.0].data;
        let nb = bd.len();
        let data: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let shape = sa.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Binary { kind, a, b }))
    }

    fn scalar_op(&mut self, kind: BinaryKind, a: Var, s: f64) -> Result<Var> {
        if kind == BinaryKind::Div && s == 0.0 {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by scalar zero".into(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| match kind {
                BinaryKind::Add => x + s,
                BinaryKind::Sub => x - s,
                BinaryKind::Mul => x * s,
                BinaryKind::Div => x / s,
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Scalar { kind, a, s }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.scalar_op(BinaryKind::Add, a, s).expect("add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.scalar_op(BinaryKind::Mul, a, s).expect("mul_scalar")
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].data;
        match kind {
            UnaryKind::Log => {
                if let Some(pos) = x.iter().position(|&v| v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {} at index {pos}", x[pos]),
                    });
                }
            }
            UnaryKind::Pow(p) if p.fract() != 0.0 => {
                if let Some(pos) = x.iter().position(|&v| v < 0.0) {
                    return Err(TensorError::Domain {
                        op: "pow",
                        detail: format!("negative base {} with fractional exponent {p}", x[pos]),
                    });
                }
            }
            _ => {}
        }
        let data = x
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Gelu => gelu(v),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Pow(p) => v.powf(p),
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Unary { kind, a }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a).expect("neg")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a).expect("tanh")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a).expect("gelu")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a).expect("relu")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(p), a)
    }

    /// Replaces each cosine `c` by `cos(acos(c) + margin)`, falling back to
    /// `c - margin * sin(margin)` once `acos(c) + margin` would pass pi.
    pub fn angular_margin(&mut self, a: Var, margin: f64) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&c| margin_forward(c, margin))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::AngularMargin { a, margin })
    }

    /// Multiplies by a freshly sampled inverted-dropout mask.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[a.0].data.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let m = self.push(shape, mask, false, Op::Leaf);
        self.mul(a, m).expect("dropout mask shape")
    }

    // ----- matmul -----

    /// Matrix product of 2-D or batched 3-D operands. A 3-D `a` may be
    /// multiplied by a 2-D `b`, which is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (bk, bn) = match sb.len() {
            2 | 3 => {
                let r = sb[sb.len() - 2];
                let c = sb[sb.len() - 1];
                if trans_b {
                    (c, r)
                } else {
                    (r, c)
                }
            }
            _ => return Err(err()),
        };
        let (batch, m, k, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], vec![sa[0], bn]),
            (3, 2) => (1, sa[0] * sa[1], sa[2], vec![sa[0], sa[1], bn]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], vec![sa[0], sa[1], bn]),
            _ => return Err(err()),
        };
        if k != bk {
            return Err(err());
        }
        let n = bn;
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    // ----- reductions -----

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis { op });
        }
        Ok(())
    }

    /// Reduction or normalization along `axis`. Sum, mean, max and
    /// log-sum-exp drop the axis; softmax and log-softmax keep the shape.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
            ReduceKind::LogSumExp => "logsumexp",
            ReduceKind::Softmax => "softmax",
            ReduceKind::LogSoftmax => "log_softmax",
        };
        self.check_axis(name, a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].data;
        let idx = |o: usize, j: usize, i: usize| (o * len + j) * inner + i;
        let keeps = matches!(kind, ReduceKind::Softmax | ReduceKind::LogSoftmax);
        let mut out = vec![0.0; if keeps { x.len() } else { outer * inner }];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let r = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(|j| x[idx(o, j, i)]).sum();
                        out[r] = if kind == ReduceKind::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if x[idx(o, j, i)] > x[idx(o, best, i)] {
                                best = j;
                            }
                        }
                        argmax[r] = best;
                        out[r] = x[idx(o, best, i)];
                    }
                    ReduceKind::LogSumExp | ReduceKind::Softmax | ReduceKind::LogSoftmax => {
                        let mx = (0..len)
                            .map(|j| x[idx(o, j, i)])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let lse = if mx == f64::NEG_INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            let s: f64 = (0..len).map(|j| (x[idx(o, j, i)] - mx).exp()).sum();
                            mx + s.ln()
                        };
                        match kind {
                            ReduceKind::LogSumExp => out[r] = lse,
                            ReduceKind::Softmax => {
                                for j in 0..len {
                                    out[idx(o, j, i)] = (x[idx(o, j, i)] - lse).exp();
                                }
                            }
                            _ => {
                                for j in 0..len {
                                    out[idx(o, j, i)] = x[idx(o, j, i)] - lse;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out_shape = if keeps {
            shape
        } else {
            let mut s = shape;
            s.remove(axis);
            s
        };
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Reduce {
                kind,
                a,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::LogSumExp, a, axis)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Softmax, a, axis)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::LogSoftmax, a, axis)
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let flat = self.reshape(a, &[n]).expect("flatten");
        if n == 0 {
            return self.push(Vec::new(), vec![0.0], false, Op::Leaf);
        }
        self.sum(flat, 0).expect("sum_all")
    }

    /// Index of the maximum along `axis` (first on ties). Not differentiable.
    pub fn argmax(&self, a: Var, axis: usize) -> Result<Vec<usize>> {
        self.check_axis("argmax", a, axis)?;
        let shape = &self.nodes[a.0].shape;
        let (outer, len, inner) = split_axis(shape, axis);
        let x = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if x[(o * len + j) * inner + i] > x[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let Some(&d) = shape.last() else {
            return Err(TensorError::Axis {
                op: "layer_norm",
                axis: 0,
                rank: 0,
            });
        };
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Divides each last-axis row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let d = match shape.last() {
            Some(&d) if d > 0 => d,
            _ => return Err(TensorError::EmptyAxis { op: "l2_normalize" }),
        };
        let x = &self.nodes[a.0].data;
        let rows = x.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let denom = n.max(L2_EPS);
            for j in 0..d {
                out[r * d + j] = row[j] / denom;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::L2Normalize { a, norms }))
    }

    // ----- convolution -----

    /// 1-D convolution. `x` is `[C_in, T]` or `[B, C_in, T]`, `w` is
    /// `[C_out, C_in / groups, K]`, the optional bias is `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        let (batch, c_in, t_in, batched) = match sx.len() {
            2 => (1, sx[0], sx[1], false),
            3 => (sx[0], sx[1], sx[2], true),
            _ => return Err(mismatch()),
        };
        if sw.len() != 3 || groups == 0 || stride == 0 {
            return Err(mismatch());
        }
        let (c_out, cg, k) = (sw[0], sw[1], sw[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cg * groups != c_in {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: vec![c_out],
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let padded = t_in + 2 * padding;
        if k > padded {
            return Err(TensorError::Domain {
                op: "conv1d",
                detail: format!("kernel {k} larger than padded input length {padded}"),
            });
        }
        let t_out = (padded - k) / stride + 1;
        let geom = kernels::ConvGeom {
            batch,
            c_in,
            c_out,
            groups,
            kernel: k,
            stride,
            padding,
            t_in,
            t_out,
        };
        let bias_data = bias.map(|b| self.nodes[b.0].data.as_slice());
        let out = kernels::conv1d_forward(
            &geom,
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            bias_data,
        );
        let shape = if batched {
            vec![batch, c_out, t_out]
        } else {
            vec![c_out, t_out]
        };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, rg, Op::Conv1d { x, w, bias, geom }))
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if numel(shape) != n {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = kernels::permute(&self.nodes[a.0].data, &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.nodes[a.0].shape.len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Zeroes every entry whose index along `axis` is at or beyond
    /// `lengths[b]`, where `b` is the entry's index along axis 0.
    pub fn mask_lengths(&mut self, a: Var, axis: usize, lengths: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis == 0 || axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "mask_lengths",
                axis,
                rank: shape.len(),
            });
        }
        if lengths.len() != shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "mask_lengths",
                lhs: shape,
                rhs: vec![lengths.len()],
            });
        }
        let geom = LengthMask {
            per_item: numel(&shape[1..]),
            axis_len: shape[axis],
            inner: numel(&shape[axis + 1..]),
            lengths: lengths.to_vec(),
        };
        let out = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| if geom.keep(i) { x } else { 0.0 })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::MaskLengths { a, geom }))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Domain {
                op: "slice",
                detail: format!("range {start}..{} exceeds axis length {}", start + len, shape[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Slice {
                a,
                outer,
                len: full,
                inner,
                start,
                take: len,
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let x = &self.nodes[p.0].data;
                out.extend_from_slice(&x[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
        ))
    }

    /// Selects last-axis entries by `index`, shared across all leading rows.
    /// `None` entries produce negative infinity and carry no gradient.
    pub fn gather_last(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let width = *shape.last().ok_or(TensorError::EmptyAxis { op: "gather_last" })?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= width) {
            return Err(TensorError::Domain {
                op: "gather_last",
                detail: format!("index {bad} out of range for width {width}"),
            });
        }
        let rows = self.nodes[a.0].data.len() / width.max(1);
        let x = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            for ix in index {
                out.push(match ix {
                    Some(i) => x[r * width + i],
                    None => f64::NEG_INFINITY,
                });
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = index.len();
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Gather {
                a,
                rows,
                width,
                index: index.to_vec(),
            },
        ))
    }

    // ----- backward -----

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `params`.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward_grads(loss)?;
        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                params.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Back-propagates from `loss` and returns the gradient of every leaf
    /// created with [`Graph::leaf`], in creation order.
    pub fn gradients(&mut self, loss: Var) -> Result<Vec<(Var, Vec<f64>)>> {
        let grads = self.backward_grads(loss)?;
        Ok(self
            .nodes
            .iter()
            .zip(grads)
            .enumerate()
            .filter(|(_, (n, _))| matches!(n.op, Op::Leaf) && n.requires_grad && n.param.is_none())
            .map(|(i, (n, g))| (Var(i), g.unwrap_or_else(|| vec![0.0; n.data.len()])))
            .collect())
    }

    /// Gradient of `loss` with respect to every parameter of a set holding
    /// `n_params` tensors, indexed by [`ParamId`]. `None` marks parameters
    /// the loss does not depend on. Unlike [`Graph::backward`] this leaves
    /// the graph reusable, so several losses can share one forward pass.
    pub fn param_gradients(&self, loss: Var, n_params: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let grads = self.node_grads(loss)?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                if node.requires_grad {
                    match &mut out[id.0] {
                        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward_grads(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let grads = self.node_grads(loss)?;
        self.backward_done = true;
        Ok(grads)
    }

    fn node_grads(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.data;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                let nb = bd.len();
                if needs(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bd[i % nb],
                            BinaryKind::Div => gi / bd[i % nb],
                        })
                        .collect();
                    acc(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; nb];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = i % nb;
                        db[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[i],
                            BinaryKind::Div => -gi * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Scalar { kind, a, s } => {
                let da = g
                    .iter()
                    .map(|&gi| match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * s,
                        BinaryKind::Div => gi / s,
                    })
                    .collect();
                acc(grads, *a, da);
            }
            Op::Unary { kind, a } => {
                let x = &self.nodes[a.0].data;
                let da = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| {
                        gi * match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => yi,
                            UnaryKind::Log => 1.0 / xi,
                            UnaryKind::Tanh => 1.0 - yi * yi,
                            UnaryKind::Gelu => gelu_grad(xi),
                            UnaryKind::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Pow(p) => {
                                if *p == 0.0 {
                                    0.0
                                } else {
                                    p * xi.powf(p - 1.0)
                                }
                            }
                        }
                    })
                    .collect();
                acc(grads, *a, da);
            }
            Op::AngularMargin { a, margin } => {
                let x = &self.nodes[a.0].data;
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &c)| gi * margin_grad(c, *margin))
                    .collect();
                acc(grads, *a, da);
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if needs(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for i in 0..*batch {
                        // dA = G · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    acc(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for i in 0..*batch {
                        let ga = &ad[i * m * k..(i + 1) * m * k];
                        let gg = &g[i * m * n..(i + 1) * m * n];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = Gᵀ · A
                            gemm(n, m, k, gg, true, ga, false, out, 0.0);
                        } else {
                            // B stored k×n: dB = Aᵀ · G
                            gemm(k, m, n, ga, true, gg, false, out, 0.0);
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Reduce {
                kind,
                a,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let x = &self.nodes[a.0].data;
                let idx = |o: usize, j: usize, i: usize| (o * len + j) * inner + i;
                let mut da = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        match kind {
                            ReduceKind::Sum => {
                                for j in 0..len {
                                    da[idx(o, j, i)] = g[r];
                                }
                            }
                            ReduceKind::Mean => {
                                for j in 0..len {
                                    da[idx(o, j, i)] = g[r] / len as f64;
                                }
                            }
                            ReduceKind::Max => da[idx(o, argmax[r], i)] = g[r],
                            ReduceKind::LogSumExp => {
                                if y[r] != f64::NEG_INFINITY {
                                    for j in 0..len {
                                        da[idx(o, j, i)] = g[r] * (x[idx(o, j, i)] - y[r]).exp();
                                    }
                                }
                            }
                            ReduceKind::Softmax => {
                                let dot: f64 =
                                    (0..len).map(|j| g[idx(o, j, i)] * y[idx(o, j, i)]).sum();
                                for j in 0..len {
                                    let p = idx(o, j, i);
                                    da[p] = y[p] * (g[p] - dot);
                                }
                            }
                            ReduceKind::LogSoftmax => {
                                let gs: f64 = (0..len).map(|j| g[idx(o, j, i)]).sum();
                                for j in 0..len {
                                    let p = idx(o, j, i);
                                    da[p] = g[p] - y[p].exp() * gs;
                                }
                            }
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.shape[node.shape.len() - 1];
                let rows = xhat.len() / d;
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    acc(grads, *beta, db);
                }
                if needs(*a) {
                    let gm = &self.nodes[gamma.0].data;
                    let mut da = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            da[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    acc(grads, *a, da);
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = node.shape[node.shape.len() - 1];
                let mut da = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    if n > L2_EPS {
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for p in row {
                            da[p] = (g[p] - y[p] * dot) / n;
                        }
                    } else {
                        for p in row {
                            da[p] = g[p] / L2_EPS;
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::Conv1d { x, w, bias, geom } => {
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                let (dx, dw) = kernels::conv1d_backward(geom, xd, wd, g, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let mut db = vec![0.0; geom.c_out];
                        for bi in 0..geom.batch {
                            for c in 0..geom.c_out {
                                let base = (bi * geom.c_out + c) * geom.t_out;
                                db[c] += g[base..base + geom.t_out].iter().sum::<f64>();
                            }
                        }
                        acc(grads, *b, db);
                    }
                }
            }
            Op::Reshape { a } => acc(grads, *a, g.to_vec()),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let da = kernels::permute(g, &node.shape, &inverse);
                acc(grads, *a, da);
            }
            Op::Slice {
                a,
                outer,
                len,
                inner,
                start,
                take,
            } => {
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let dst = (o * len + start) * inner;
                    let src = o * take * inner;
                    da[dst..dst + take * inner].copy_from_slice(&g[src..src + take * inner]);
                }
                acc(grads, *a, da);
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &l) in parts.iter().zip(lens) {
                    if needs(*p) {
                        let mut dp = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + l * inner]);
                        }
                        acc(grads, *p, dp);
                    }
                    offset += l;
                }
            }
            Op::Gather {
                a,
                rows,
                width,
                index,
            } => {
                let k = index.len();
                let mut da = vec![0.0; rows * width];
                for r in 0..*rows {
                    for (j, ix) in index.iter().enumerate() {
                        if let Some(i) = ix {
                            da[r * width + i] += g[r * k + j];
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::MaskLengths { a, geom } => {
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| if geom.keep(i) { gi } else { 0.0 })
                    .collect();
                acc(grads, *a, da);
            }
        }
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

/// Options for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Upper bound on coordinates probed per parameter tensor; `None`
    /// probes every element.
    pub max_coords_per_tensor: Option<usize>,
    /// Lower bound on the denominator of the relative error, so that
    /// components below the resolution of the difference quotient do not
    /// dominate.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: None,
            floor: 1e-8,
        }
    }
}

/// Compares analytic parameter gradients of `f` against central finite
/// differences and returns the largest relative error
/// `|a - n| / max(|a|, |n|, floor)` over all probed coordinates.
///
/// `f` records a scalar loss on the supplied graph. Parameters without
/// `requires_grad` are skipped. Gradients already held by `params` are
/// restored afterwards.
pub fn finite_diff_check<F>(params: &mut ParamSet, opts: &FdOptions, mut f: F) -> Result<f64>
where
    F: FnMut(&ParamSet, &mut Graph) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(TensorError::Domain {
            op: "finite_diff_check",
            detail: "eps must be positive".into(),
        });
    }
    let saved: Vec<Option<Vec<f64>>> = params.ids().map(|id| params.get_mut(id).take_grad()).collect();
    let mut eval = |params: &ParamSet, backward: Option<&mut ParamSet>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(params, &mut g)?;
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("objective evaluated to {v}")));
        }
        if let Some(target) = backward {
            g.backward(out, target)?;
        }
        Ok(v)
    };
    let mut grads_holder = params.clone();
    eval(params, Some(&mut grads_holder))?;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.get(id).requires_grad()).collect();
    for id in ids {
        let analytic = grads_holder
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params.get(id).len()]);
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(params, None);
            params.get_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(params, None);
            params.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(saved) {
        params.get_mut(id).zero_grad();
        params.get_mut(id).set_grad(g);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
