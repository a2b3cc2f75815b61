//! Stochastic whitening batch normalization.
//!
//! Training forward pass, in order:
//!
//! 1. batch mean `μ` and variance `v` (divisor `n - 1`)
//! 2. EMA update of `μ_E`, `v_E` with momentum `η`
//! 3. standardize `X^S = Λ^{-1/2}(X - μ 1^T)` with `Λ = diag(v) + εI`
//! 4. `Σ̂ = (1/n) X^S X^S^T`, one criterion step `W ← W - αΔW`, then
//!    `W ← ½(W + W^T)`
//! 5. `X^W = W X^S`, output `X^W ⊙ γ1^T + β1^T`
//!
//! `W` is only ever changed by the forward pass; backward treats it as a
//! constant and produces gradients for the input, `γ` and `β`.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::criteria::{delta_w_counted, Criterion};
use crate::error::{Error, Result};
use crate::matrix::{matmul, matmul_at, sample_covariance, symmetrize, Matrix, OpCounter};

pub const DEFAULT_ALPHA: f64 = 1e-5;
pub const DEFAULT_ETA: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-8;

pub const CHECKPOINT_TAG: &str = "swbn-layer";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which input gradient `backward` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    /// Per-element derivative of the standardization, taken literally from
    /// the reference backward loop; samples are not coupled through `μ`, `v`.
    #[default]
    Faithful,
    /// Full Jacobian-vector product of the standardize/whiten/affine chain
    /// with `W` held fixed.
    Exact,
}

impl fmt::Display for BackwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardMode::Faithful => "faithful",
            BackwardMode::Exact => "exact",
        })
    }
}

impl FromStr for BackwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "faithful" => Ok(BackwardMode::Faithful),
            "exact" => Ok(BackwardMode::Exact),
            other => Err(Error::invalid(format!("unknown backward mode {other:?}"))),
        }
    }
}

/// Batch statistics and the standardized batch.
#[derive(Debug, Clone)]
pub(crate) struct Standardized {
    pub x_s: Matrix,
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-row mean, unbiased variance and `(x - μ) / sqrt(v + ε)`.
pub(crate) fn standardize(x: &Matrix, eps: f64) -> Result<Standardized> {
    let (d, n) = x.shape();
    if n < 2 {
        return Err(Error::invalid(format!("batch needs at least 2 samples, got {n}")));
    }
    if let Some(index) = x.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mu = x.row_means();
    let mut v = vec![0.0; d];
    let mut x_s = Matrix::zeros(d, n);
    for r in 0..d {
        let row = x.row(r);
        let var = row.iter().map(|&a| (a - mu[r]) * (a - mu[r])).sum::<f64>() / (n - 1) as f64;
        v[r] = var;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &a) in x_s.row_mut(r).iter_mut().zip(row) {
            *o = (a - mu[r]) * inv;
        }
    }
    Ok(Standardized { x_s, mu, v })
}

/// Exact input gradient of the row standardization given the gradient with
/// respect to its output `g_s`.
pub(crate) fn standardize_backward(g_s: &Matrix, x: &Matrix, mu: &[f64], v: &[f64], eps: f64) -> Matrix {
    let (d, n) = x.shape();
    let mut out = Matrix::zeros(d, n);
    for k in 0..d {
        let s = (v[k] + eps).sqrt();
        let g = g_s.row(k);
        let xr = x.row(k);
        let g_mean = g.iter().sum::<f64>() / n as f64;
        let g_dot_c: f64 = g.iter().zip(xr).map(|(&gi, &xi)| gi * (xi - mu[k])).sum();
        let coupling = g_dot_c / (s * s * s * (n - 1) as f64);
        for ((o, &gi), &xi) in out.row_mut(k).iter_mut().zip(g).zip(xr) {
            *o = (gi - g_mean) / s - (xi - mu[k]) * coupling;
        }
    }
    out
}

/// `X ⊙ γ1^T + β1^T`.
pub(crate) fn scale_shift(x: &Matrix, gamma: &[f64], beta: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let (g, b) = (gamma[r], beta[r]);
        out.row_mut(r).iter_mut().for_each(|v| *v = *v * g + b);
    }
    out
}

/// Row-wise `Σ_j g_kj x_kj`.
pub(crate) fn row_dot(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
        .collect()
}

pub(crate) fn check_vec(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::invalid(format!("{name} has length {}, expected {d}", v.len())));
    }
    Ok(())
}

/// Intermediates from [`SwbnState::forward_train`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BackpropCache {
    pub x_s: Matrix,
    pub x_w: Matrix,
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
    pub x: Matrix,
}

/// Gradients of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub grad_x: Matrix,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwbnState {
    pub d: usize,
    pub w: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu_e: Vec<f64>,
    pub v_e: Vec<f64>,
    pub alpha: f64,
    pub eta: f64,
    pub eps: f64,
    pub criterion: Criterion,
}

impl SwbnState {
    /// Fresh layer: `W = I`, `γ = 1`, `β = 0`, `μ_E = 0`, `v_E = 1`.
    pub fn new(d: usize, criterion: Criterion) -> Self {
        Self {
            d,
            w: Matrix::identity(d),
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            mu_e: vec![0.0; d],
            v_e: vec![1.0; d],
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            eps: DEFAULT_EPS,
            criterion,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(Error::invalid("layer width must be positive"));
        }
        if self.w.shape() != (d, d) {
            return Err(Error::shape("swbn_state", self.w.shape(), (d, d)));
        }
        for (name, v) in [("gamma", &self.gamma), ("beta", &self.beta), ("mu_e", &self.mu_e), ("v_e", &self.v_e)] {
            check_vec(name, v, d)?;
        }
        // α = 0 is allowed: it freezes W, which gradient checks rely on.
        if !(self.alpha >= 0.0) || !(self.eta > 0.0 && self.eta < 1.0) || !(self.eps > 0.0) {
            return Err(Error::invalid(format!(
                "hyperparameters out of range: alpha={}, eta={}, eps={}",
                self.alpha, self.eta, self.eps
            )));
        }
        if self.v_e.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("expected variance must be positive"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.d {
            return Err(Error::shape("swbn", x.shape(), (self.d, x.cols())));
        }
        Ok(())
    }

    /// One training step on a `d x n` batch. Updates `W`, `μ_E` and `v_E`.
    ///
    /// Products in the covariance, the `W` update and the whitening step are
    /// recorded on `counter`: `2 d^2 n + 3 d^3` in total.
    pub fn forward_train(&mut self, x: &Matrix, mut counter: Option<&mut OpCounter>) -> Result<(Matrix, BackpropCache)> {
        self.check_input(x)?;
        let Standardized { x_s, mu, v } = standardize(x, self.eps)?;

        let eta = self.eta;
        for k in 0..self.d {
            self.mu_e[k] = eta * self.mu_e[k] + (1.0 - eta) * mu[k];
            self.v_e[k] = eta * self.v_e[k] + (1.0 - eta) * v[k];
        }

        let sigma = sample_covariance(&x_s, counter.as_deref_mut())?;
        let delta = delta_w_counted(self.criterion, &self.w, &sigma, counter.as_deref_mut())?;
        self.w.sub_scaled_assign(self.alpha, &delta)?;
        self.w = symmetrize(&self.w)?;

        let x_w = matmul(&self.w, &x_s, counter)?;
        let out = scale_shift(&x_w, &self.gamma, &self.beta);
        let cache = BackpropCache {
            x_s,
            x_w,
            mu,
            v,
            x: x.clone(),
        };
        Ok((out, cache))
    }

    /// Gradients for the input, `γ` and `β`. Never modifies the state.
    pub fn backward(&self, grad_out: &Matrix, cache: &BackpropCache, mode: BackwardMode) -> Result<LayerGrads> {
        let (d, n) = cache.x_s.shape();
        if grad_out.shape() != (d, n) || cache.x_w.shape() != (d, n) || cache.x.shape() != (d, n) || d != self.d {
            return Err(Error::shape("swbn_backward", grad_out.shape(), (d, n)));
        }
        let grad_gamma = row_dot(grad_out, &cache.x_w);
        let grad_beta = grad_out.row_sums();

        // g_s[k, l] = Σ_i γ_i W_ik g[i, l]
        let mut gamma_g = grad_out.clone();
        for r in 0..d {
            let g = self.gamma[r];
            gamma_g.row_mut(r).iter_mut().for_each(|v| *v *= g);
        }
        let g_s = matmul_at(&self.w, &gamma_g, None)?;

        let grad_x = match mode {
            BackwardMode::Exact => standardize_backward(&g_s, &cache.x, &cache.mu, &cache.v, self.eps),
            BackwardMode::Faithful => {
                let mut out = g_s;
                let inv_n = 1.0 / n as f64;
                let two_over = 2.0 / (n - 1) as f64;
                for k in 0..d {
                    let ve = cache.v[k] + self.eps;
                    let inv_sd = 1.0 / ve.sqrt();
                    let inv_sd3 = ve.powf(-1.5);
                    let mu = cache.mu[k];
                    let xs = cache.x_s.row(k);
                    let xr = cache.x.row(k);
                    for ((o, &s), &raw) in out.row_mut(k).iter_mut().zip(xs).zip(xr) {
                        // Literal per-element terms: dX^S/dv uses (X^S - μ), dv/dX uses (X - μ).
                        let dxs_dv = -0.5 * (s - mu) * inv_sd3;
                        let dv_dx = two_over * (raw - mu);
                        let dxs_dx = inv_sd + dxs_dv * dv_dx - inv_sd * inv_n;
                        *o *= dxs_dx;
                    }
                }
                out
            }
        };
        Ok(LayerGrads {
            grad_x,
            grad_gamma,
            grad_beta,
        })
    }

    /// Whitened, pre-affine output `W Λ_E^{-1/2}(x - μ_E)` for a `d x m` input.
    pub fn predict_whitened(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut x_s = x.clone();
        for k in 0..self.d {
            let inv = 1.0 / (self.v_e[k] + self.eps).sqrt();
            let mu = self.mu_e[k];
            x_s.row_mut(k).iter_mut().for_each(|v| *v = (*v - mu) * inv);
        }
        matmul(&self.w, &x_s, None)
    }

    /// Inference output for a `d x m` input; each column is independent.
    pub fn forward_predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(scale_shift(&self.predict_whitened(x)?, &self.gamma, &self.beta))
    }

    pub fn forward_predict_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_predict(&Matrix::column(x))?.into_vec())
    }

    /// Inference map as `x ↦ A x + b` with `A = diag(γ) W Λ_E^{-1/2}` and
    /// `b = β - A μ_E`.
    pub fn fold_into_affine(&self) -> (Matrix, Vec<f64>) {
        let d = self.d;
        let inv_sd: Vec<f64> = self.v_e.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let a = Matrix::from_fn(d, d, |i, j| self.gamma[i] * self.w[(i, j)] * inv_sd[j]);
        let b = (0..d)
            .map(|i| self.beta[i] - (0..d).map(|j| a[(i, j)] * self.mu_e[j]).sum::<f64>())
            .collect();
        (a, b)
    }

    pub fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        w.header(CHECKPOINT_TAG, CHECKPOINT_VERSION);
        w.value("d", self.d);
        w.value("criterion", self.criterion);
        w.real("alpha", self.alpha);
        w.real("eta", self.eta);
        w.real("eps", self.eps);
        w.reals("W", self.w.as_slice());
        w.reals("gamma", &self.gamma);
        w.reals("beta", &self.beta);
        w.reals("mu_e", &self.mu_e);
        w.reals("v_e", &self.v_e);
        w.end();
    }

    pub fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self> {
        let version = r.header(CHECKPOINT_TAG)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported {CHECKPOINT_TAG} version {version}")));
        }
        let d: usize = r.value("d")?;
        let criterion: Criterion = r.value::<String>("criterion")?.parse()?;
        let state = Self {
            d,
            criterion,
            alpha: r.value("alpha")?,
            eta: r.value("eta")?,
            eps: r.value("eps")?,
            w: Matrix::new(d, d, r.reals("W", d * d)?)?,
            gamma: r.reals("gamma", d)?,
            beta: r.reals("beta", d)?,
            mu_e: r.reals("mu_e", d)?,
            v_e: r.reals("v_e", d)?,
        };
        r.end()?;
        state.validate()?;
        Ok(state)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut w = CheckpointWriter::new();
        self.write_checkpoint(&mut w);
        w.finish()
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        Self::read_checkpoint(&mut CheckpointReader::new(text))
    }
}

/// A `d x h x w x n` activation tensor stored with the sample index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::invalid(format!("tensor data length {} does not match {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Builds the tensor from a buffer in the usual `n x d x h x w` memory order.
    pub fn from_nchw(n: usize, d: usize, h: usize, w: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * d * h * w {
            return Err(Error::invalid("nchw buffer length mismatch"));
        }
        let mut out = vec![0.0; data.len()];
        for s in 0..n {
            for c in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        out[((c * h + y) * w + x) * n + s] = data[((s * d + c) * h + y) * w + x];
                    }
                }
            }
        }
        Self::new([d, h, w, n], out)
    }

    pub fn get(&self, c: usize, y: usize, x: usize, s: usize) -> f64 {
        let [_, h, w, n] = self.dims;
        self.data[((c * h + y) * w + x) * n + s]
    }
}

/// Flattens a `d x h x w x n` tensor into a `d x (h w n)` matrix; the channel
/// stays the row index.
pub fn reshape_nchw(t: &Tensor4) -> Matrix {
    let [d, h, w, n] = t.dims;
    Matrix::from_raw(d, h * w * n, t.data.clone())
}

/// Inverse of [`reshape_nchw`].
pub fn unreshape_nchw(m: &Matrix, h: usize, w: usize, n: usize) -> Result<Tensor4> {
    if m.cols() != h * w * n {
        return Err(Error::invalid(format!(
            "cannot reshape {}x{} into {}x{h}x{w}x{n}",
            m.rows(),
            m.cols(),
            m.rows()
        )));
    }
    Tensor4::new([m.rows(), h, w, n], m.as_slice().to_vec())
}
