//! Dense row-major tensors and the numeric kernels everything else runs on.
//!
//! Kernels use a fixed loop nesting so that repeated runs produce
//! bit-identical results. Where a kernel is parallelised it is split over an
//! axis whose outputs are independent, so the per-element summation order is
//! the same as the sequential one.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Real number type a tensor can hold. Implemented for `f32` (training) and
/// `f64` (gradient checks and oracle suites).
pub trait Scalar:
    Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// Unchecked matrix product backing [`gemm`]; bounds are verified there.
    #[doc(hidden)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    ) {
        // SAFETY: `gemm` checked that every addressed element lies inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row as isize,
                a.col as isize,
                b.data.as_ptr(),
                b.row as isize,
                b.col as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    ) {
        // SAFETY: `gemm` checked that every addressed element lies inside the slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row as isize,
                a.col as isize,
                b.data.as_ptr(),
                b.row as isize,
                b.col as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Logistic function, evaluated so that large negative inputs do not overflow.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("grad", &self.grad.is_some())
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidGeometry {
            op,
            detail: format!("zero extent in shape {shape:?}"),
        });
    }
    Ok(())
}

/// Row-major strides: the last axis has stride 1.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("tensor", shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Panics on a zero extent; intended for shapes known to be valid.
    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    /// Linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range on axis {i}");
            off = off * dim + ix;
        }
        off
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (i, &dim) in self.shape.iter().enumerate().rev() {
            index[i] = offset % dim;
            offset /= dim;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(
            T::zero(),
            |acc, v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Fails with [`Error::NumericOverflow`] if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericOverflow(context.to_string()))
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, &d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Split into the data and (possibly absent) gradient buffers.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

/// Shape `rhs` must match `lhs` after left-padding with singleton axes, with
/// every axis either equal or 1.
fn broadcast_strides(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let pad = lhs.len() - rhs.len();
    let rhs_strides = strides(rhs);
    let mut out = vec![0; lhs.len()];
    for (i, &d) in rhs.iter().enumerate() {
        let l = lhs[pad + i];
        if d == l {
            out[pad + i] = if d == 1 { 0 } else { rhs_strides[i] };
        } else if d == 1 {
            out[pad + i] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Elementwise `op(a, b)` with `b` either a scalar, a same-shape tensor, or a
/// tensor broadcastable onto `a`.
pub fn elementwise<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    let data = match b {
        Operand::Scalar(s) => a.data.iter().map(|&x| op.apply(x, s)).collect(),
        Operand::Tensor(b) if b.shape == a.shape => a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect(),
        Operand::Tensor(b) => {
            let bstr =
                broadcast_strides(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
                    op: "elementwise",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                })?;
            let mut out = Vec::with_capacity(a.data.len());
            let mut index = vec![0usize; a.shape.len()];
            let mut boff = 0usize;
            for &x in &a.data {
                out.push(op.apply(x, b.data[boff]));
                // odometer increment, keeping the broadcast offset in step
                for ax in (0..index.len()).rev() {
                    index[ax] += 1;
                    boff += bstr[ax];
                    if index[ax] < a.shape[ax] {
                        break;
                    }
                    boff -= bstr[ax] * index[ax];
                    index[ax] = 0;
                }
            }
            out
        }
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
        grad: None,
    })
}

/// `W·x + bias` for `W` of shape `M×N`.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = |rhs: &Tensor<T>| Error::ShapeMismatch {
        op: "matvec",
        lhs: w.shape.clone(),
        rhs: rhs.shape.clone(),
    };
    if w.rank() != 2 || x.rank() != 1 || x.shape[0] != w.shape[1] {
        return Err(mismatch(x));
    }
    if bias.rank() != 1 || bias.shape[0] != w.shape[0] {
        return Err(mismatch(bias));
    }
    let n = w.shape[1];
    let data = w
        .data
        .chunks_exact(n)
        .zip(&bias.data)
        .map(|(row, &b)| dot(row, &x.data) + b)
        .collect();
    Ok(Tensor {
        shape: vec![w.shape[0]],
        data,
        grad: None,
    })
}

/// Plain sequential dot product.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Dot product with eight interleaved accumulators, combined in a fixed
/// order. Vectorises where the sequential loop cannot.
#[inline]
pub fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Arithmetic mean over the given axes; the reduced axes are dropped from the
/// output shape (a full reduction yields shape `[1]`).
pub fn reduce_mean<T: Scalar>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&ax| ax >= rank) {
        return Err(Error::InvalidAxes {
            axes: axes.to_vec(),
            rank,
        });
    }
    if axes.is_empty() {
        return Err(Error::EmptyReduction {
            axes: axes.to_vec(),
            shape: a.shape.clone(),
        });
    }
    let reduced: usize = sorted.iter().map(|&ax| a.shape[ax]).product();
    let kept: Vec<usize> = (0..rank).filter(|ax| !sorted.contains(ax)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&ax| a.shape[ax]).collect()
    };
    let out_len: usize = out_shape.iter().product();
    let mut sums = vec![T::zero(); out_len];
    let kept_strides = strides(&out_shape);
    let mut index = vec![0usize; rank];
    for &v in &a.data {
        let mut off = 0;
        for (k, &ax) in kept.iter().enumerate() {
            off += index[ax] * kept_strides[k];
        }
        sums[off] += v;
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < a.shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    let inv = T::one() / T::from_usize(reduced);
    Ok(Tensor {
        shape: out_shape,
        data: sums.into_iter().map(|s| s * inv).collect(),
        grad: None,
    })
}

/// Geometry of a 2-D convolution over an `N×C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Padding is always `kernel / 2`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || kernel[1] != input[1] || kernel[2] != kernel[3]
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let k = kernel[2];
        let geometry = |detail: String| Error::InvalidGeometry {
            op: "conv2d",
            detail,
        };
        if k.is_multiple_of(2) {
            return Err(geometry(format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(geometry("stride must be positive".into()));
        }
        let pad = k / 2;
        let (h, w) = (input[2], input[3]);
        let span = |extent: usize| -> Result<usize> {
            let padded = extent + 2 * pad;
            if padded < k {
                return Err(geometry(format!(
                    "input extent {extent} with pad {pad} is smaller than kernel {k}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: input[0],
            c_in: input[1],
            c_out: kernel[0],
            height: h,
            width: w,
            kernel: k,
            stride,
            pad,
            out_h: span(h)?,
            out_w: span(w)?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_h, self.out_w]
    }
}

/// Strided matrix operand: `data[i·row + j·col]` is element `(i, j)`.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row: usize,
    pub col: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row: cols,
            col: 1,
        }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row: 1,
            col: cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row + (cols - 1) * self.col < self.data.len()
    }
}

/// `c ← a·b + beta·c` with `a: m×k`, `b: k×n` and `c` row-major `m×n`.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    assert!(
        a.fits(m, k) && b.fits(k, n) && c.len() >= m * n,
        "gemm operand out of bounds"
    );
    T::gemm_raw(m, k, n, a, b, beta, c);
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (k, s, pad) = (g.kernel, g.stride, g.pad as isize);
    let n = g.out_h * g.out_w;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.height * g.width..][..g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((ci * k + kh) * k + kw) * n..][..n];
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * s + kh) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..][..g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (k, s, pad) = (g.kernel, g.stride, g.pad as isize);
    let n = g.out_h * g.out_w;
    dx.fill(T::zero());
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.height * g.width..][..g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((ci * k + kh) * k + kw) * n..][..n];
                for oy in 0..g.out_h {
                    let iy = (oy * s + kh) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..][..g.width];
                    for (ox, &v) in row[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * s + kw) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeometry {
    /// A 1×1 stride-1 convolution reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Cross-correlation with `pad = k/2`, lowered to a matrix product per sample.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(&x.shape, &k.shape, stride)?;
    let in_len = g.c_in * g.height * g.width;
    let n = g.out_h * g.out_w;
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.batch * g.c_out * n];
    out.par_chunks_mut(g.c_out * n)
        .zip(x.data.par_chunks(in_len))
        .for_each_init(Vec::new, |cols, (o, xs)| {
            let b = if g.is_pointwise() {
                xs
            } else {
                cols.resize(rows * n, T::zero());
                im2col(&g, xs, cols);
                &cols[..]
            };
            gemm(
                g.c_out,
                rows,
                n,
                MatRef::row_major(&k.data, rows),
                MatRef::row_major(b, n),
                T::zero(),
                o,
            );
        });
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
///
/// The kernel gradient is accumulated over samples in index order, so the
/// result does not depend on the number of worker threads.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(&x.shape, &k.shape, stride)?;
    if dy.shape != g.output_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: g.output_shape().to_vec(),
            rhs: dy.shape.clone(),
        });
    }
    let in_len = g.c_in * g.height * g.width;
    let n = g.out_h * g.out_w;
    let out_len = g.c_out * n;
    let rows = g.col_rows();

    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(in_len)
        .zip(dy.data.par_chunks(out_len))
        .for_each_init(Vec::new, |dcols, (dxs, d)| {
            let a = MatRef::transposed(&k.data, rows);
            if g.is_pointwise() {
                gemm(rows, g.c_out, n, a, MatRef::row_major(d, n), T::zero(), dxs);
            } else {
                dcols.resize(rows * n, T::zero());
                gemm(
                    rows,
                    g.c_out,
                    n,
                    a,
                    MatRef::row_major(d, n),
                    T::zero(),
                    dcols,
                );
                col2im(&g, dcols, dxs);
            }
        });

    let mut dk = vec![T::zero(); k.len()];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * n }];
    for (xs, d) in x.data.chunks(in_len).zip(dy.data.chunks(out_len)) {
        let b = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols[..]
        };
        gemm(
            g.c_out,
            n,
            rows,
            MatRef::row_major(d, n),
            MatRef::transposed(b, n),
            T::one(),
            &mut dk,
        );
    }
    Ok((Tensor::new(&x.shape, dx)?, Tensor::new(&k.shape, dk)?))
}
