//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain value type (shape + contiguous data). Differentiable
//! computation happens on a [`Graph`], which records every primitive applied
//! to its [`Var`] handles and replays them backwards in [`Graph::backward`].

mod denormal;
mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

pub use denormal::FlushDenormals;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Graph, RopeTable, Var};

/// Scalar tag written into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. `f32` for training and inference, `f64`
/// for gradient and oracle checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * op(a) * op(b) + beta * c` over strided row/col layouts.
    ///
    /// # Safety
    /// Strides and extents must address memory inside the given slices.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major matrix operand for [`gemm`]: `data` holds a `rows x cols`
/// matrix; `trans` reads it as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, S> MatRef<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            trans: !self.trans,
            ..self
        }
    }

    fn eff_rows(&self) -> usize {
        if self.trans {
            self.cols
        } else {
            self.rows
        }
    }

    fn eff_cols(&self) -> usize {
        if self.trans {
            self.rows
        } else {
            self.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = alpha * a * b + beta * out`, with `out` a dense row-major `m x n`.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, out: &mut [S]) {
    let (m, k) = (a.eff_rows(), a.eff_cols());
    let n = b.eff_cols();
    assert_eq!(k, b.eff_rows(), "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents checked against slice lengths above.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("shape {shape:?} must have positive extents"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * std)
        })
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| S::lit(rng.random_range(-bound..bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// 2-D element access.
    pub fn at(&self, row: usize, col: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Plain (untracked) matrix product, used outside of graphs.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = dims2(self)?;
        let (k2, n) = dims2(other)?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatRef::new(&self.data, m, k),
            MatRef::new(&other.data, k, n),
            S::zero(),
            &mut out,
        );
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor<S>> {
        let (r, c) = dims2(self)?;
        Ok(Tensor::from_fn(&[c, r], |i| {
            let (j, k) = (i / r, i % r);
            self.data[k * c + j]
        }))
    }
}

pub(crate) fn dims2<S>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err!("expected a 2-D tensor, got shape {s:?}")),
    }
}

pub(crate) fn dims3<S>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match t.shape.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(dim_err!("expected a 3-D tensor, got shape {s:?}")),
    }
}

pub(crate) fn ensure_finite<S: Scalar>(what: &str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values produced by {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn identity_and_zero_products() {
        let id = Tensor::<f32>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(id.matmul(&m).unwrap(), m);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f32>::zeros(&[2, 3]);
        let any = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
            let fast = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap();
            let slow = naive_matmul(&a, &b);
            assert!(fast.cast::<f64>().max_abs_diff(&slow) < 1e-6);
        }
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_gemm_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let mut out = vec![0.0; 15];
        gemm(
            1.0,
            MatRef::new(a.data(), 3, 4),
            MatRef::new(b.data(), 5, 4).t(),
            0.0,
            &mut out,
        );
        let expect = naive_matmul(&a, &b.transpose2().unwrap());
        let got = Tensor::new(vec![3, 5], out).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(&[4, 5], 1.0, &mut rng);
            let c = Tensor::<f32>::randn(&[5, 2], 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            proptest::prop_assert!(left.max_abs_diff(&right) < 1e-4);
        }
    }
}
