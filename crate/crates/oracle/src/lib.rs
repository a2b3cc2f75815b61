//! Reference computations for tests.
//!
//! Everything here works on plain row-major `Vec<f64>` buffers and naive
//! loops so it shares no code path with the `swbn` crate it is used to check.

/// Row-major square matrix product, triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns `(eigenvalues, eigenvectors)` with eigenvectors stored
/// as the columns of a row-major matrix.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Symmetric whitening matrix `U D^{-1/2} U^T` of an SPD matrix.
pub fn zca_matrix(sigma: &[f64], n: usize) -> Vec<f64> {
    let (evals, u) = jacobi_eigen(sigma, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| u[i * n + k] * u[j * n + k] / evals[k].sqrt()).sum();
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn central_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `||a - b||_F / max(||b||_F, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Max over entries of `|a - b| / max(floor, |b|)`.
pub fn max_entry_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Straight-line transcription of the per-element backward loop of the
/// whitening layer, written from the pseudocode independently of the crate's
/// vectorised implementation. All matrices are `d x n` row-major, `w` is
/// `d x d`.
#[allow(clippy::too_many_arguments)]
pub fn swbn_backward_loop(
    grad_out: &[f64],
    x: &[f64],
    x_s: &[f64],
    x_w: &[f64],
    mu: &[f64],
    v: &[f64],
    w: &[f64],
    gamma: &[f64],
    eps: f64,
    d: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; d * n];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for k in 0..d {
        for j in 0..n {
            gg[k] += grad_out[k * n + j] * x_w[k * n + j];
        }
        for j in 0..n {
            gb[k] += grad_out[k * n + j];
        }
        for l in 0..n {
            let dxs_dv = -0.5 * (x_s[k * n + l] - mu[k]) * (v[k] + eps).powf(-1.5);
            let dxs_dmu = -1.0 / (v[k] + eps).sqrt();
            let dv_dx = 2.0 / (n as f64 - 1.0) * (x[k * n + l] - mu[k]);
            let dmu_dx = 1.0 / n as f64;
            let dxs_dx = 1.0 / (v[k] + eps).sqrt() + dxs_dv * dv_dx + dxs_dmu * dmu_dx;
            let mut acc = 0.0;
            for i in 0..d {
                acc += gamma[i] * w[i * d + k] * grad_out[i * n + l];
            }
            gx[k * n + l] = dxs_dx * acc;
        }
    }
    (gx, gg, gb)
}
