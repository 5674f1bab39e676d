//! Small CPU backend: dense row-major tensors, a GEMM wrapper and the layers
//! the encoders are built from, each with an explicit backward pass.
//!
//! Everything is generic over [`Scalar`] so the same graph runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod layers;
mod lstm;

pub use layers::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv1d_backward, conv1d_forward,
    linear_backward, linear_forward, relu_dropout_backward, relu_dropout_forward, softmax_rows,
    softmax_rows_backward, BatchNormCache, BatchNormParams, LayerGrads,
};
pub use lstm::{bilstm_backward, bilstm_forward, BiLstmCache, LstmGrads, LstmWeights};

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid matrices of the given sizes.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {
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
}

impl Scalar for f64 {
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
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `op(a)`
/// is `m x k` and `op(b)` is `k x n`. With `trans_a` the buffer `a` holds a
/// `k x m` matrix, likewise `trans_b` means `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer sizes checked above; strides describe in-bounds row-major layouts.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Row-major matrix. Sequence activations use `rows = batch * len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `[self | other]` column-wise.
    pub fn hcat(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Mat::from_vec(self.rows, cols, data)
    }

    /// Inverse of [`Mat::hcat`]: split off the first `left` columns.
    pub fn hsplit(&self, left: usize) -> (Mat<F>, Mat<F>) {
        let right = self.cols - left;
        let mut a = Vec::with_capacity(self.rows * left);
        let mut b = Vec::with_capacity(self.rows * right);
        for r in 0..self.rows {
            let row = self.row(r);
            a.extend_from_slice(&row[..left]);
            b.extend_from_slice(&row[left..]);
        }
        (Mat::from_vec(self.rows, left, a), Mat::from_vec(self.rows, right, b))
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }
}

/// Ordered name → tensor map. Ordering is lexicographic so iteration (and
/// everything derived from it: optimizer state, checkpoints, hashes) is stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> TensorMap<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    /// Panics on unknown names; model states are validated against their
    /// spec before any forward pass, so a miss here is a programming error.
    pub fn expect(&self, name: &str) -> &Tensor<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("tensor `{name}` not present"))
    }

    pub fn expect_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("tensor `{name}` not present"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> TensorMap<G> {
        TensorMap {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// Concatenate all values in name order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all values from a flat buffer in name order.
    pub fn assign_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.numel(), "assign_flat size mismatch");
        let mut off = 0;
        for t in self.tensors.values_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Read access to parameters. Forward passes go through this trait so that a
/// tracing wrapper can record exactly which tensors a graph touches.
pub trait ParamSource<F: Scalar> {
    fn param(&self, name: &str) -> &Tensor<F>;
}

impl<F: Scalar> ParamSource<F> for TensorMap<F> {
    fn param(&self, name: &str) -> &Tensor<F> {
        self.expect(name)
    }
}

/// Records every parameter name requested from the wrapped source.
pub struct TracingParams<'a, F: Scalar> {
    inner: &'a TensorMap<F>,
    touched: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a, F: Scalar> TracingParams<'a, F> {
    pub fn new(inner: &'a TensorMap<F>) -> Self {
        Self {
            inner,
            touched: Default::default(),
        }
    }

    pub fn touched(&self) -> std::collections::BTreeSet<String> {
        self.touched.borrow().clone()
    }
}

impl<F: Scalar> ParamSource<F> for TracingParams<'_, F> {
    fn param(&self, name: &str) -> &Tensor<F> {
        self.touched.borrow_mut().insert(name.to_string());
        self.inner.expect(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, k, n, 1.0, aa, bb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hcat_then_hsplit_is_identity() {
        let a = Mat::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]);
        let b = Mat::from_vec(2, 1, vec![5.0f32, 6.0]);
        let c = a.hcat(&b);
        assert_eq!(c.data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (x, y) = c.hsplit(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn tracing_records_requested_names() {
        let mut m = TensorMap::<f32>::new();
        m.insert("a", Tensor::zeros(&[1]));
        m.insert("b", Tensor::zeros(&[1]));
        let t = TracingParams::new(&m);
        let _ = t.param("b");
        assert_eq!(t.touched().into_iter().collect::<Vec<_>>(), vec!["b"]);
    }
}
