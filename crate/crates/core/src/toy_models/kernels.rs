//! `f32` building blocks shared by the inference and training paths.

pub(crate) const LN_EPS: f32 = 1e-5;

/// One operand of [`gemm`]: a row-major buffer with leading dimension `ld`,
/// optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f32],
    pub ld: usize,
    pub trans: bool,
}

impl<'a> Operand<'a> {
    pub fn n(data: &'a [f32], ld: usize) -> Self {
        Self {
            data,
            ld,
            trans: false,
        }
    }

    pub fn t(data: &'a [f32], ld: usize) -> Self {
        Self {
            data,
            ld,
            trans: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }
}

fn last_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

/// `c[m x n] = alpha * op(a)[m x k] * op(b)[k x n] + beta * c`, where `c`
/// has leading dimension `ldc`. With `beta == 0` the prior contents of `c`
/// are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: Operand<'_>,
    b: Operand<'_>,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    assert!(
        last_index(m, n, ldc as isize, 1) < c.len(),
        "gemm: c out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(
        last_index(m, k, rsa, csa) < a.data.len(),
        "gemm: a out of bounds"
    );
    assert!(
        last_index(k, n, rsb, csb) < b.data.len(),
        "gemm: b out of bounds"
    );
    // SAFETY: the asserts above bound every element sgemm reads or writes
    // inside the corresponding slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
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
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `out = x * w + bias` for `rows` input rows; `w` is `d_in x d_out`.
pub(crate) fn linear(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        rows,
        d_in,
        d_out,
        1.0,
        Operand::n(x, d_in),
        Operand::n(w, d_out),
        1.0,
        &mut out,
        d_out,
    );
    out
}

/// Layer norm over rows of width `d`. Returns `(y, x_hat, rstd)`.
pub(crate) fn layer_norm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    d: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            x_hat[r * d + j] = xh;
            y[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    (y, x_hat, rstd)
}

/// Backward of [`layer_norm`]. Accumulates into `d_gamma`/`d_beta` and
/// adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dy: &[f32],
    x_hat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    d: usize,
    d_gamma: &mut [f32],
    d_beta: &mut [f32],
    dx: &mut [f32],
) {
    let rows = dy.len() / d;
    let mut dxh = vec![0.0f32; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhr = &x_hat[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            d_gamma[j] += dyr[j] * xhr[j];
            d_beta[j] += dyr[j];
            dxh[j] = dyr[j] * gamma[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xhr[j];
        }
        mean_dxh /= d as f32;
        mean_dxh_xh /= d as f32;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rstd[r] * (dxh[j] - mean_dxh - xhr[j] * mean_dxh_xh);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

/// Rational approximation of `tanh`, accurate to a few ulp in `f32` and
/// branch-free so the GELU loops vectorize.
pub(crate) fn fast_tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297_1e-8,
        -8.604_672e-11,
        2.000_188e-13,
        -2.760_768_5e-16,
    ];
    const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A[6];
    for &a in A[..6].iter().rev() {
        p = p * x2 + a;
    }
    let mut q = B[3];
    for &b in B[..3].iter().rev() {
        q = q * x2 + b;
    }
    x * p / q
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// In-place softmax over the first `len` entries of `row`; entries past
/// `len` are zeroed (causal mask).
pub(crate) fn softmax_prefix(row: &mut [f32], len: usize) {
    let max = row[..len].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..len] {
        *v /= sum;
    }
    for v in &mut row[len..] {
        *v = 0.0;
    }
}

/// Sums `rows` rows of width `d` into `out`.
pub(crate) fn add_column_sums(x: &[f32], d: usize, out: &mut [f32]) {
    for row in x.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
