//! Dense row-major tensors and the reshape vocabulary the scale convolutions
//! are written in.
//!
//! Feature maps on the translation group are `[N, C, U, U]`, feature maps on
//! the scale-translation group are `[N, C, S, U, U]` with the scale axis packed
//! directly after the channel axis. Expanding a signal (`[N, C, S, U, U]` to
//! `[N, C*S, U, U]`) and squeezing a convolution output back are therefore pure
//! metadata changes on an owned buffer.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; verification runs in
/// `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Element code used by the checkpoint container.
    const DTYPE_CODE: u8;
    const NAME: &'static str;

    /// `c <- alpha * a * b + beta * c` for strided row/column-major views.
    ///
    /// # Safety
    /// Every addressed element must lie inside the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view over a slice: `(offset, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strides {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Strides { offset, rs: cols, cs: 1 }
    }

    pub fn transposed(offset: usize, cols: usize) -> Self {
        Strides { offset, rs: 1, cs: cols }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// Bounds-checked strided GEMM: `c = alpha * a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(sc.last(m, n) < c.len(), "gemm: output view out of bounds");
    if k > 0 {
        assert!(sa.last(m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(sb.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    }
    // SAFETY: all three views were checked against their buffers above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(sa.offset),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr().add(sb.offset),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr().add(sc.offset),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    /// Reinterpret the buffer with a new shape of the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    /// Merge `axis` and `axis + 1`.
    pub fn merge_axes(self, axis: usize) -> Result<Self> {
        if axis + 1 >= self.rank() {
            return Err(Error::shape(format!("cannot merge axis {axis} of {:?}", self.shape)));
        }
        let mut shape = self.shape.clone();
        let inner = shape.remove(axis + 1);
        shape[axis] *= inner;
        self.reshape(&shape)
    }

    /// Split `axis` into `[extent / inner, inner]`.
    pub fn split_axis(self, axis: usize, inner: usize) -> Result<Self> {
        let extent = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::shape(format!("no axis {axis} in {:?}", self.shape)))?;
        if inner == 0 || extent % inner != 0 {
            return Err(Error::shape(format!(
                "extent {extent} of axis {axis} is not divisible by {inner}"
            )));
        }
        let mut shape = self.shape.clone();
        shape[axis] = extent / inner;
        shape.insert(axis + 1, inner);
        self.reshape(&shape)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `||self - reference|| / ||reference||` accumulated in double precision.
    pub fn rel_l2_error(&self, reference: &Self) -> Result<f64> {
        self.expect_same_shape(reference)?;
        let (num, den) = self.data.iter().zip(&reference.data).fold((0.0, 0.0), |(n, d), (&a, &b)| {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            (n + (a - b) * (a - b), d + b * b)
        });
        if den == 0.0 {
            return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok((num / den).sqrt())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(format!(
                "{what} must have rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// General axis permutation; `out.shape[i] = self.shape[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                index[ax] += 1;
                src += strides[ax];
                if index[ax] < shape[ax] {
                    break;
                }
                src -= strides[ax] * shape[ax];
                index[ax] = 0;
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    /// Copy of sub-tensor `index` along axis 0.
    pub fn slice_outer(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor { shape, data: self.data[index * inner..(index + 1) * inner].to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}

/// `[C_out, C_in, S, V, V]` to `[C_out, C_in*S, V, V]`.
pub fn expand_filter<T: Scalar>(kernel: Tensor<T>) -> Result<Tensor<T>> {
    kernel.expect_rank(5, "filter")?;
    kernel.merge_axes(1)
}

/// `[C, S, U, U]` to `[C*S, U, U]`, or batched `[N, C, S, U, U]` to `[N, C*S, U, U]`.
pub fn expand_signal<T: Scalar>(signal: Tensor<T>) -> Result<Tensor<T>> {
    match signal.rank() {
        4 => signal.merge_axes(0),
        5 => signal.merge_axes(1),
        _ => Err(Error::shape(format!("signal on H must have rank 4 or 5, got {:?}", signal.shape()))),
    }
}

/// `[C*S, U, U]` to `[C, S, U, U]`, or batched `[N, C*S, U, U]` to `[N, C, S, U, U]`.
pub fn squeeze_output<T: Scalar>(output: Tensor<T>, scales: usize) -> Result<Tensor<T>> {
    match output.rank() {
        3 => output.split_axis(0, scales),
        4 => output.split_axis(1, scales),
        _ => Err(Error::shape(format!("conv output must have rank 3 or 4, got {:?}", output.shape()))),
    }
}

/// Inverse of [`expand_filter`].
pub fn squeeze_filter<T: Scalar>(kernel: Tensor<T>, scales: usize) -> Result<Tensor<T>> {
    kernel.expect_rank(4, "expanded filter")?;
    kernel.split_axis(1, scales)
}
