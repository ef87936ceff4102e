//! Dense kernels shared by the forward, backward, and decode passes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub const LN_EPS: f64 = 1e-5;

/// Floating point type the model can run in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// # Safety
    /// Every pointer/stride combination must stay inside its allocation.
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
        Self::from_f64(v).expect("representable")
    }
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
}

/// Read-only strided matrix.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> View<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds buffer");
        View {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major with a row stride wider than the column count.
    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize) -> Self {
        let v = View {
            data,
            rows,
            cols,
            rs,
            cs: 1,
        };
        v.check();
        v
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds buffer");
        }
    }
}

/// Writable row-major matrix with an arbitrary row stride.
#[derive(Debug)]
pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    rows: usize,
    cols: usize,
    rs: usize,
}

impl<'a, F> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    pub fn strided(data: &'a mut [F], rows: usize, cols: usize, rs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + cols <= data.len(), "view exceeds buffer");
        }
        ViewMut {
            data,
            rows,
            cols,
            rs,
        }
    }
}

/// `c = alpha * a · b + beta * c`. With `beta == 0` the old contents of
/// `c` are ignored.
pub fn gemm<F: Real>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for r in 0..c.rows {
            for v in &mut c.data[r * c.rs..r * c.rs + c.cols] {
                *v = if beta == F::zero() { F::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked on construction.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            1,
        )
    }
}

/// Row-wise `out = W-projection + bias`: `out[n×o] = x[n×i] · w[i×o] + b`.
pub fn linear<F: Real>(x: &[F], n: usize, w: &[F], b: &[F], inputs: usize, out: &mut [F]) {
    let outputs = b.len();
    for row in out.chunks_exact_mut(outputs).take(n) {
        row.copy_from_slice(b);
    }
    gemm(
        F::one(),
        View::new(x, n, inputs),
        View::new(w, inputs, outputs),
        F::one(),
        ViewMut::new(out, n, outputs),
    );
}

/// Backward of [`linear`]: accumulates weight and bias gradients and
/// writes (or, with `accumulate`, adds) the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    x: &[F],
    n: usize,
    w: &[F],
    inputs: usize,
    dout: &[F],
    dw: &mut [F],
    db: &mut [F],
    dx: &mut [F],
    accumulate: bool,
) {
    let outputs = db.len();
    gemm(
        F::one(),
        View::new(x, n, inputs).t(),
        View::new(dout, n, outputs),
        F::one(),
        ViewMut::new(dw, inputs, outputs),
    );
    for row in dout.chunks_exact(outputs).take(n) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    gemm(
        F::one(),
        View::new(dout, n, outputs),
        View::new(w, inputs, outputs).t(),
        if accumulate { F::one() } else { F::zero() },
        ViewMut::new(dx, n, inputs),
    );
}

/// Layer norm over rows of width `gain.len()`. Stores the normalized
/// input and reciprocal standard deviation for the backward pass.
pub fn layer_norm<F: Real>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let d = gain.len();
    let inv_d = F::lit(1.0 / d as f64);
    let eps = F::lit(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            o[i] = xh[i] * gain[i] + bias[i];
        }
    }
}

/// Adds the input gradient of [`layer_norm`] into `dx` and accumulates
/// gain and bias gradients.
pub fn layer_norm_backward<F: Real>(
    dout: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let d = gain.len();
    let inv_d = F::lit(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, dy) in dout.chunks_exact(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dgain[i] += dy[i] * xh[i];
            dbias[i] += dy[i];
            dxhat[i] = dy[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Inner `tanh` of the GELU approximation, through `exp`, which is much
/// cheaper than the library `tanh`.
pub fn gelu_tanh<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let e = (F::lit(-2.0) * u.abs()).exp();
    let t = (F::one() - e) / (F::one() + e);
    if u < F::zero() {
        -t
    } else {
        t
    }
}

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub fn gelu_from_tanh<F: Real>(x: F, t: F) -> F {
    F::lit(0.5) * x * (F::one() + t)
}

#[cfg(test)]
fn gelu_grad<F: Real>(x: F) -> F {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

/// Derivative of GELU at `x` given `t = gelu_tanh(x)`.
pub fn gelu_grad_from_tanh<F: Real>(x: F, t: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

/// In-place softmax of one row.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place softmax of one row, returning `ln Σ exp(row)` of the input.
/// Both agree bit for bit with [`softmax_in_place`] and [`log_sum_exp`].
pub fn softmax_with_lse<F: Real>(row: &mut [F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

/// `ln Σ exp(row)`, computed stably.
pub fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
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

    #[test]
    fn gemm_matches_naive_with_transposes_and_strides() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 4×2
        let want = naive(&a, 3, 4, &b, 2);

        let mut c = vec![f64::NAN; 6];
        gemm(1.0, View::new(&a, 3, 4), View::new(&b, 4, 2), 0.0, ViewMut::new(&mut c, 3, 2));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored transposed (4×3), b inside a wider buffer.
        let at: Vec<f64> = (0..12).map(|i| a[(i % 3) * 4 + i / 3]).collect();
        let mut wide = vec![9.0; 4 * 5];
        for p in 0..4 {
            wide[p * 5 + 1] = b[p * 2];
            wide[p * 5 + 2] = b[p * 2 + 1];
        }
        let mut c2 = vec![1.0; 3 * 4];
        gemm(
            1.0,
            View::new(&at, 4, 3).t(),
            View::strided(&wide[1..], 4, 2, 5),
            1.0,
            ViewMut::strided(&mut c2[1..], 3, 2, 4),
        );
        for i in 0..3 {
            for j in 0..2 {
                assert!((c2[1 + i * 4 + j] - want[i * 2 + j] - 1.0).abs() < 1e-12);
            }
            assert_eq!(c2[i * 4], 1.0);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
        assert_eq!(gelu(0.0_f64), 0.0);
        for &x in &[-40.0, -2.5, -1e-3, 0.0, 1e-3, 0.7, 2.5, 40.0_f64] {
            let u = GELU_C * (x + GELU_A * x * x * x);
            assert!((gelu_tanh(x) - u.tanh()).abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn softmax_and_lse() {
        let mut row = vec![1.0_f64, 2.0, 3.0, 1000.0];
        let lse = log_sum_exp(&row);
        let mut fused = row.clone();
        softmax_in_place(&mut row);
        assert_eq!(softmax_with_lse(&mut fused), lse);
        assert_eq!(fused, row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((lse - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = vec![1.0_f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0];
        let g = vec![1.0; 4];
        let b = vec![0.0; 4];
        let (mut out, mut xhat, mut rstd) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 2]);
        layer_norm(&x, &g, &b, &mut out, &mut xhat, &mut rstd);
        for row in out.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
