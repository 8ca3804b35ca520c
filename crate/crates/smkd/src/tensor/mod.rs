//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major arrays sharing an `Arc`'d node in a
//! differentiation graph. Gradients are never stored in the graph itself:
//! [`backward`] walks the graph and returns a [`GradMap`] keyed by parameter
//! identity, so repeated calls re-derive identical values.

mod backward;
mod check;

pub use backward::{backward, GradMap};
pub use check::{finite_diff_check, finite_diff_check_sampled, ulp_distance_f32};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Unique identity of a graph node; parameters are addressed by this in a [`GradMap`].
pub type NodeId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> NodeId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Machine epsilon of the element type, as `f64`.
    fn machine_eps() -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn from_usize(v: usize) -> Self {
                v as $t
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn machine_eps() -> f64 {
                <$t>::EPSILON as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors from tensor construction and operators.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    DataLength {
        expected: usize,
        got: usize,
    },
    NotTwoDimensional {
        op: &'static str,
        shape: Vec<usize>,
    },
    InvalidAxis {
        axis: usize,
        ndim: usize,
    },
    NonPositiveParameter {
        name: &'static str,
        value: f64,
    },
    IndexOutOfRange {
        index: usize,
        bound: usize,
    },
    NonScalarLoss {
        len: usize,
    },
    NotAParameter,
    EmptyConcat,
    NonFinite {
        context: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            TensorError::NotTwoDimensional { op, shape } => {
                write!(f, "{op}: requires a 2-d tensor, got shape {shape:?}")
            }
            TensorError::InvalidAxis { axis, ndim } => {
                write!(f, "axis {axis} out of range for {ndim}-d tensor")
            }
            TensorError::NonPositiveParameter { name, value } => {
                write!(f, "{name} must be positive, got {value}")
            }
            TensorError::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            TensorError::NonScalarLoss { len } => {
                write!(f, "backward requires a scalar loss, got {len} elements")
            }
            TensorError::NotAParameter => {
                write!(f, "finite-difference check requires a parameter tensor")
            }
            TensorError::EmptyConcat => write!(f, "concat of zero tensors"),
            TensorError::NonFinite { context } => write!(f, "non-finite value in {context}"),
        }
    }
}

impl std::error::Error for TensorError {}

#[derive(Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    /// Marker for a detached value; the producing branch is not retained.
    StopGrad,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddBias(Tensor<T>, Tensor<T>),
    Matmul(Tensor<T>, Tensor<T>),
    /// `a @ b^T` with `b` stored `[n, k]`; avoids materializing transposes in attention.
    MatmulNT(Tensor<T>, Tensor<T>),
    /// Block-diagonal `a_v @ b_v^T` over `views` stacked row blocks.
    MatmulBatchNT {
        a: Tensor<T>,
        b: Tensor<T>,
        views: usize,
    },
    /// Block-diagonal `a_v @ b_v` over `views` stacked row blocks.
    MatmulBatchNN {
        a: Tensor<T>,
        b: Tensor<T>,
        views: usize,
    },
    Transpose(Tensor<T>),
    Softmax {
        x: Tensor<T>,
        axis: usize,
        temp: T,
    },
    LayerNorm {
        x: Tensor<T>,
        gain: Tensor<T>,
        bias: Tensor<T>,
        eps: T,
    },
    Gelu(Tensor<T>),
    Log(Tensor<T>),
    ClampMin(Tensor<T>, T),
    L2NormRows {
        x: Tensor<T>,
        eps: T,
    },
    SumAxis1(Tensor<T>),
    MeanAxis0(Tensor<T>),
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    SelectRows {
        x: Tensor<T>,
        idx: Vec<usize>,
    },
    SelectBlock {
        x: Tensor<T>,
        r0: usize,
        nr: usize,
        c0: usize,
        nc: usize,
    },
    ConcatRows(Vec<Tensor<T>>),
    ConcatCols(Vec<Tensor<T>>),
    MaskRows {
        x: Tensor<T>,
        fill: Tensor<T>,
        mask: Vec<bool>,
    },
    Reshape(Tensor<T>),
}

#[derive(Debug)]
pub(crate) struct Node<T: Scalar> {
    pub(crate) id: NodeId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) param: bool,
    pub(crate) op: Op<T>,
}

/// An n-dimensional array, optionally part of a differentiation graph.
///
/// Cloning is cheap (shared `Arc`). A tensor created by [`Tensor::leaf`] or a
/// constant constructor contributes no gradient; one created by
/// [`Tensor::param`] is a trainable parameter addressed by its [`NodeId`].
#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar> {
    inner: Arc<Node<T>>,
}

impl<T: Scalar> Tensor<T> {
    fn new(shape: Vec<usize>, data: Vec<T>, param: bool, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Node {
                id: fresh_id(),
                shape,
                data,
                param,
                op,
            }),
        }
    }

    fn result(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        Self::new(shape, data, false, op)
    }

    /// A constant tensor outside the gradient path.
    pub fn leaf(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self::new(shape.to_vec(), data, false, Op::Leaf))
    }

    /// A trainable parameter; [`backward`] reports its gradient in the [`GradMap`].
    pub fn param(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self::new(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self::new(vec![data.len()], data, false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::ZERO; n], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n], false, Op::Leaf)
    }

    pub fn id(&self) -> NodeId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn is_param(&self) -> bool {
        self.inner.param
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.inner.data[0]
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Replace the values of a parameter, keeping shape; yields a fresh leaf.
    pub fn with_data(&self, data: Vec<T>) -> TensorResult<Self> {
        if data.len() != self.len() {
            return Err(TensorError::DataLength {
                expected: self.len(),
                got: data.len(),
            });
        }
        Ok(Self::new(
            self.inner.shape.clone(),
            data,
            self.inner.param,
            Op::Leaf,
        ))
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    fn rows_cols(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotTwoDimensional {
                op,
                shape: self.inner.shape.clone(),
            }),
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        self.same_shape("add", other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        Ok(Tensor::result(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        self.same_shape("sub", other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        Ok(Tensor::result(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        self.same_shape("mul", other)?;
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        Ok(Tensor::result(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    /// Add a bias row vector `[c]` to every row of a `[r, c]` tensor.
    pub fn add_bias(&self, bias: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let (_, c) = self.rows_cols("add_bias")?;
        if bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(Tensor::result(
            self.shape().to_vec(),
            data,
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    fn same_shape(&self, op: &'static str, other: &Tensor<T>) -> TensorResult<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    // ---- linear algebra ----------------------------------------------------

    /// `self [m,k] @ other [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kernel::matmul_nn(self.data(), other.data(), m, k, n, &mut out);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// `self [m,k] @ other^T` where `other` is stored `[n,k]`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let (m, k) = self.rows_cols("matmul_nt")?;
        let (n, k2) = other.rows_cols("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kernel::matmul_nt(self.data(), other.data(), m, k, n, &mut out);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::MatmulNT(self.clone(), other.clone()),
        ))
    }

    /// Per-view-block `a_v [m,k] @ b_v [n,k]^T`, with `views` blocks stacked
    /// along the rows of both operands: `[views*m, k] x [views*n, k] ->
    /// [views*m, n]`. Each block matches `matmul_nt` on that block exactly.
    pub fn matmul_batch_nt(&self, other: &Tensor<T>, views: usize) -> TensorResult<Tensor<T>> {
        let (rm, k) = self.rows_cols("matmul_batch_nt")?;
        let (rn, k2) = other.rows_cols("matmul_batch_nt")?;
        if k != k2 || views == 0 || rm % views != 0 || rn % views != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_batch_nt",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let (m, n) = (rm / views, rn / views);
        let mut out = vec![T::ZERO; rm * n];
        for v in 0..views {
            kernel::matmul_nt(
                &self.data()[v * m * k..(v + 1) * m * k],
                &other.data()[v * n * k..(v + 1) * n * k],
                m,
                k,
                n,
                &mut out[v * m * n..(v + 1) * m * n],
            );
        }
        Ok(Tensor::result(
            vec![rm, n],
            out,
            Op::MatmulBatchNT {
                a: self.clone(),
                b: other.clone(),
                views,
            },
        ))
    }

    /// Per-view-block `a_v [m,k] @ b_v [k,n]`, blocks stacked along rows:
    /// `[views*m, k] x [views*k, n] -> [views*m, n]`.
    pub fn matmul_batch_nn(&self, other: &Tensor<T>, views: usize) -> TensorResult<Tensor<T>> {
        let (rm, k) = self.rows_cols("matmul_batch_nn")?;
        let (rk, n) = other.rows_cols("matmul_batch_nn")?;
        if views == 0 || rm % views != 0 || rk != views * k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_batch_nn",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let m = rm / views;
        let mut out = vec![T::ZERO; rm * n];
        for v in 0..views {
            kernel::matmul_nn(
                &self.data()[v * m * k..(v + 1) * m * k],
                &other.data()[v * k * n..(v + 1) * k * n],
                m,
                k,
                n,
                &mut out[v * m * n..(v + 1) * m * n],
            );
        }
        Ok(Tensor::result(
            vec![rm, n],
            out,
            Op::MatmulBatchNN {
                a: self.clone(),
                b: other.clone(),
                views,
            },
        ))
    }

    pub fn transpose(&self) -> TensorResult<Tensor<T>> {
        let (r, c) = self.rows_cols("transpose")?;
        let src = self.data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::result(vec![c, r], out, Op::Transpose(self.clone())))
    }

    // ---- nonlinearities ----------------------------------------------------

    /// Max-shifted softmax along `axis` at the given temperature.
    pub fn softmax(&self, axis: usize, temp: T) -> TensorResult<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(TensorError::InvalidAxis {
                axis,
                ndim: self.ndim(),
            });
        }
        if !(temp.to_f64() > 0.0) {
            return Err(TensorError::NonPositiveParameter {
                name: "temperature",
                value: temp.to_f64(),
            });
        }
        let shape = self.shape();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data();
        let mut out = vec![T::ZERO; src.len()];
        let mut buf = vec![T::ZERO; lane];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = src[base];
                for l in 1..lane {
                    let v = src[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut total = T::ZERO;
                for l in 0..lane {
                    let e = ((src[base + l * inner] - mx) / temp).exp();
                    buf[l] = e;
                    total += e;
                }
                for l in 0..lane {
                    out[base + l * inner] = buf[l] / total;
                }
            }
        }
        Ok(Tensor::result(
            shape.to_vec(),
            out,
            Op::Softmax {
                x: self.clone(),
                axis,
                temp,
            },
        ))
    }

    /// Normalize each slice along the last axis to zero mean / unit variance,
    /// then apply `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> TensorResult<Tensor<T>> {
        let c = *self.shape().last().ok_or(TensorError::InvalidAxis {
            axis: 0,
            ndim: 0,
        })?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let src = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut out = vec![T::ZERO; src.len()];
        let inv_c = T::ONE / T::from_usize(c);
        for (row, orow) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();
            for j in 0..c {
                orow[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    pub fn gelu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| kernel::gelu(v)).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    pub fn log(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.ln()).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Log(self.clone()))
    }

    pub fn clamp_min(&self, min: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.maximum(min)).collect();
        Tensor::result(
            self.shape().to_vec(),
            data,
            Op::ClampMin(self.clone(), min),
        )
    }

    /// Scale each row (last axis) to unit L2 norm; `eps` guards zero rows.
    pub fn l2_normalize_rows(&self, eps: T) -> Tensor<T> {
        let c = *self.shape().last().unwrap_or(&1);
        let src = self.data();
        let mut out = vec![T::ZERO; src.len()];
        for (row, orow) in src.chunks(c).zip(out.chunks_mut(c)) {
            let sq = row.iter().map(|&v| v * v).sum::<T>();
            let inv = T::ONE / (sq + eps * eps).sqrt();
            for j in 0..c {
                orow[j] = row[j] * inv;
            }
        }
        Tensor::result(
            self.shape().to_vec(),
            out,
            Op::L2NormRows {
                x: self.clone(),
                eps,
            },
        )
    }

    // ---- reductions --------------------------------------------------------

    /// Row sums of a `[r, c]` tensor -> `[r]`.
    pub fn sum_axis1(&self) -> TensorResult<Tensor<T>> {
        let (r, c) = self.rows_cols("sum_axis1")?;
        let data = self
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().sum())
            .collect();
        let _ = r;
        Ok(Tensor::result(
            vec![r],
            data,
            Op::SumAxis1(self.clone()),
        ))
    }

    /// Column means of a `[r, c]` tensor -> `[c]`.
    pub fn mean_axis0(&self) -> TensorResult<Tensor<T>> {
        let (r, c) = self.rows_cols("mean_axis0")?;
        let mut data = vec![T::ZERO; c];
        for row in self.data().chunks(c) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = T::ONE / T::from_usize(r);
        for v in &mut data {
            *v = *v * inv;
        }
        Ok(Tensor::result(vec![c], data, Op::MeanAxis0(self.clone())))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::result(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let m = s / T::from_usize(self.len().max(1));
        Tensor::result(vec![1], vec![m], Op::MeanAll(self.clone()))
    }

    // ---- structure ---------------------------------------------------------

    /// Gather rows by index (embedding lookup); duplicate indices accumulate
    /// gradient into the same source row.
    pub fn select_rows(&self, idx: &[usize]) -> TensorResult<Tensor<T>> {
        let (r, c) = self.rows_cols("select_rows")?;
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, bound: r });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(Tensor::result(
            vec![idx.len(), c],
            data,
            Op::SelectRows {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn row(&self, i: usize) -> TensorResult<Tensor<T>> {
        Ok(self.select_rows(&[i])?.reshape(&[self.shape()[1]])?)
    }

    /// Contiguous sub-block `[r0..r0+nr, c0..c0+nc]`.
    pub fn select_block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> TensorResult<Tensor<T>> {
        let (r, c) = self.rows_cols("select_block")?;
        if r0 + nr > r || c0 + nc > c {
            return Err(TensorError::IndexOutOfRange {
                index: (r0 + nr).max(c0 + nc),
                bound: r.max(c),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&src[i * c + c0..i * c + c0 + nc]);
        }
        Ok(Tensor::result(
            vec![nr, nc],
            data,
            Op::SelectBlock {
                x: self.clone(),
                r0,
                nr,
                c0,
                nc,
            },
        ))
    }

    pub fn concat_rows(parts: &[Tensor<T>]) -> TensorResult<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let (_, c) = first.rows_cols("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pr, pc) = p.rows_cols("concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += pr;
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::result(
            vec![rows, c],
            data,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(parts: &[Tensor<T>]) -> TensorResult<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let (r, _) = first.rows_cols("concat_cols")?;
        let mut cols = 0;
        for p in parts {
            let (pr, pc) = p.rows_cols("concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            cols += pc;
        }
        let mut data = vec![T::ZERO; r * cols];
        let mut offset = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = p.data();
            for i in 0..r {
                data[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(Tensor::result(
            vec![r, cols],
            data,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Replace rows flagged in `mask` with the `fill` vector, leaving the rest
    /// untouched. Gradient flows to `self` on kept rows and to `fill` as the
    /// sum over replaced rows.
    pub fn mask_rows(&self, mask: &[bool], fill: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let (r, c) = self.rows_cols("mask_rows")?;
        if mask.len() != r || fill.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "mask_rows",
                left: self.shape().to_vec(),
                right: fill.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        let fv = fill.data();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                data[i * c..(i + 1) * c].copy_from_slice(fv);
            }
        }
        Ok(Tensor::result(
            vec![r, c],
            data,
            Op::MaskRows {
                x: self.clone(),
                fill: fill.clone(),
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::DataLength {
                expected: self.len(),
                got: n,
            });
        }
        Ok(Tensor::result(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Detach from the gradient path; the teacher branch is consumed through this.
    pub fn stop_grad(&self) -> Tensor<T> {
        Tensor::result(self.shape().to_vec(), self.data().to_vec(), Op::StopGrad)
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) mod kernel {
    use super::Scalar;
    use rayon::prelude::*;

    /// Below this many multiply-adds the rayon dispatch costs more than it saves.
    const PAR_THRESHOLD: usize = 1 << 18;

    pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
        let row = |i: usize, orow: &mut [T]| {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        };
        if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, orow)| row(i, orow));
        } else {
            for (i, orow) in out.chunks_mut(n).enumerate() {
                row(i, orow);
            }
        }
    }

    /// Dot product with eight independent accumulator lanes combined in a
    /// fixed order: deterministic, and the lanes vectorize (a plain serial
    /// sum cannot, because float addition is not reassociable).
    #[inline]
    pub fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
        const LANES: usize = 8;
        let mut acc = [T::ZERO; LANES];
        let chunks = a.len() / LANES;
        for c in 0..chunks {
            let base = c * LANES;
            for l in 0..LANES {
                acc[l] += a[base + l] * b[base + l];
            }
        }
        let mut tail = T::ZERO;
        for i in chunks * LANES..a.len() {
            tail += a[i] * b[i];
        }
        let mut total = T::ZERO;
        for v in acc {
            total += v;
        }
        total + tail
    }

    /// `a [m,k] @ b^T` with `b` stored `[n,k]`. Transposes `b` into a scratch
    /// buffer and runs the streaming kernel; the copy is far cheaper than the
    /// strided loads it avoids.
    pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
        let mut bt = vec![T::ZERO; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        matmul_nn(a, &bt, m, k, n, out);
    }

    /// `a^T @ b` with `a` stored `[m,k]`, `b` stored `[m,n]` -> `[k,n]`.
    /// Accumulated as a sum of outer products so both inputs stream
    /// contiguously; the output tile stays cache-resident.
    pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
        let run = |col0: usize, cols: usize, out_block: &mut [T]| {
            for p in 0..m {
                let arow = &a[p * k..(p + 1) * k];
                let brow = &b[p * n + col0..p * n + col0 + cols];
                for (i, &av) in arow.iter().enumerate() {
                    let orow = &mut out_block[i * cols..(i + 1) * cols];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        };
        let threads = rayon::current_num_threads();
        if m * k * n >= PAR_THRESHOLD && threads > 1 && n >= 2 * threads {
            // deterministic column split: each thread owns a column range
            let chunk = n.div_ceil(threads);
            let mut blocks: Vec<Vec<T>> = (0..threads)
                .into_par_iter()
                .map(|t| {
                    let col0 = t * chunk;
                    let cols = chunk.min(n.saturating_sub(col0));
                    let mut block = vec![T::ZERO; k * cols];
                    if cols > 0 {
                        run(col0, cols, &mut block);
                    }
                    block
                })
                .collect();
            for (t, block) in blocks.drain(..).enumerate() {
                let col0 = t * chunk;
                let cols = chunk.min(n.saturating_sub(col0));
                for i in 0..k {
                    out[i * n + col0..i * n + col0 + cols]
                        .copy_from_slice(&block[i * cols..(i + 1) * cols]);
                }
            }
        } else {
            run(0, n, out);
        }
    }

    const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const GELU_A: f64 = 0.044715;

    pub fn gelu<T: Scalar>(x: T) -> T {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let u = c * (x + a * x * x * x);
        half * x * (T::ONE + u.tanh())
    }

    pub fn gelu_grad<T: Scalar>(x: T) -> T {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        let u = c * (x + a * x * x * x);
        let t = u.tanh();
        half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
    }
}
