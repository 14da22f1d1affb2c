//! Dense row-major kernels with their backward passes.

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// With `ta` set, `a` is stored `k×m`; with `tb` set, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index addressed by the
    // given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
        );
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normed: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm(x: &[f64], rows: usize, dim: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let mut out = vec![0.0; rows * dim];
    let mut normed = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let n = (row[j] - mean) * rs;
            normed[r * dim + j] = n;
            out[r * dim + j] = n * gain[j] + bias[j];
        }
    }
    (out, NormCache { normed, rstd })
}

/// Returns `dx`; accumulates into `dgain` and `dbias`.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    dim: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * dim];
    let mut dn = vec![0.0; dim];
    for r in 0..rows {
        let n = &cache.normed[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        let mut mean_dn = 0.0;
        let mut mean_dn_n = 0.0;
        for j in 0..dim {
            dgain[j] += g[j] * n[j];
            dbias[j] += g[j];
            dn[j] = g[j] * gain[j];
            mean_dn += dn[j];
            mean_dn_n += dn[j] * n[j];
        }
        mean_dn /= dim as f64;
        mean_dn_n /= dim as f64;
        for j in 0..dim {
            dx[r * dim + j] = cache.rstd[r] * (dn[j] - mean_dn - n[j] * mean_dn_n);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
