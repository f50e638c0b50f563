use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{FdaError, Result};

/// Scalar types the engine runs on: `f32` for training, `f64` for gradient
/// checks.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static {
    /// Raw GEMM: `C = alpha * A * B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices.
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

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f32 {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f64 {
        v
    }

    fn f64(self) -> f64 {
        self
    }
}

/// Row-major GEMM: `C (m x n) = alpha * op(A) * op(B) + beta * C`, where
/// `op(A)` is `m x k` (stored `k x m` when `trans_a`) and `op(B)` is `k x n`
/// (stored `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the lengths were checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// GEMM on strided row-major views: `C = alpha * A * B + beta * C` with
/// `A` `m x k`, `B` `k x n`, `C` `m x n`, each given as `(data, row stride,
/// column stride)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: (&[T], usize, usize),
    b: (&[T], usize, usize),
    beta: T,
    c: (&mut [T], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(k == 0 || last(m, k, a.1, a.2) < a.0.len(), "gemm: A view out of bounds");
    assert!(k == 0 || last(k, n, b.1, b.2) < b.0.len(), "gemm: B view out of bounds");
    assert!(last(m, n, c.1, c.2) < c.0.len(), "gemm: C view out of bounds");
    // SAFETY: every addressed element lies inside its slice (checked above);
    // `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        )
    }
}

/// Five-axis array `(N, C, D, H, W)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn new(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(FdaError::Shape(format!("tensor shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: [usize; 5], v: T) -> Self {
        Tensor5 { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor5 { shape: [1; 5], data: vec![v] }
    }

    pub fn from_f32(shape: [usize; 5], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.f64() as f32).collect()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |a, v| a.max(v.abs()))
    }
}
