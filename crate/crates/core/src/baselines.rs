//! Batch normalization and IterNorm, the layers SWBN is compared against.

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::error::{Error, Result};
use crate::matrix::{matmul, matmul_at, sample_covariance, Matrix, OpCounter};
use crate::swbn::{check_vec, row_dot, scale_shift, standardize, standardize_backward, LayerGrads, Standardized};

pub const BN_TAG: &str = "bn-layer";
pub const ITERNORM_TAG: &str = "iternorm-layer";

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu_e: Vec<f64>,
    pub v_e: Vec<f64>,
    pub eta: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub x: Matrix,
    pub x_s: Matrix,
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
}

impl BnState {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            mu_e: vec![0.0; d],
            v_e: vec![1.0; d],
            eta: crate::swbn::DEFAULT_ETA,
            eps: crate::swbn::DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, v) in [("beta", &self.beta), ("mu_e", &self.mu_e), ("v_e", &self.v_e)] {
            check_vec(name, v, d)?;
        }
        if !(self.eta > 0.0 && self.eta < 1.0) || !(self.eps > 0.0) || self.v_e.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("batch norm hyperparameters out of range"));
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        w.header(BN_TAG, 1);
        w.value("d", self.dim());
        w.real("eta", self.eta);
        w.real("eps", self.eps);
        w.reals("gamma", &self.gamma);
        w.reals("beta", &self.beta);
        w.reals("mu_e", &self.mu_e);
        w.reals("v_e", &self.v_e);
        w.end();
    }

    pub fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self> {
        r.header(BN_TAG)?;
        let d: usize = r.value("d")?;
        let s = Self {
            eta: r.value("eta")?,
            eps: r.value("eps")?,
            gamma: r.reals("gamma", d)?,
            beta: r.reals("beta", d)?,
            mu_e: r.reals("mu_e", d)?,
            v_e: r.reals("v_e", d)?,
        };
        r.end()?;
        s.validate()?;
        Ok(s)
    }
}

pub fn bn_forward_train(x: &Matrix, state: &mut BnState) -> Result<(Matrix, BnCache)> {
    if x.rows() != state.dim() {
        return Err(Error::shape("bn_forward_train", x.shape(), (state.dim(), x.cols())));
    }
    let Standardized { x_s, mu, v } = standardize(x, state.eps)?;
    let eta = state.eta;
    for k in 0..state.dim() {
        state.mu_e[k] = eta * state.mu_e[k] + (1.0 - eta) * mu[k];
        state.v_e[k] = eta * state.v_e[k] + (1.0 - eta) * v[k];
    }
    let out = scale_shift(&x_s, &state.gamma, &state.beta);
    Ok((
        out,
        BnCache {
            x: x.clone(),
            x_s,
            mu,
            v,
        },
    ))
}

/// Full batch-norm gradient, including the coupling through batch mean and variance.
pub fn bn_backward(grad_out: &Matrix, cache: &BnCache, state: &BnState) -> Result<LayerGrads> {
    if grad_out.shape() != cache.x_s.shape() {
        return Err(Error::shape("bn_backward", grad_out.shape(), cache.x_s.shape()));
    }
    let mut g_s = grad_out.clone();
    for r in 0..g_s.rows() {
        let g = state.gamma[r];
        g_s.row_mut(r).iter_mut().for_each(|v| *v *= g);
    }
    Ok(LayerGrads {
        grad_x: standardize_backward(&g_s, &cache.x, &cache.mu, &cache.v, state.eps),
        grad_gamma: row_dot(grad_out, &cache.x_s),
        grad_beta: grad_out.row_sums(),
    })
}

pub fn bn_standardize_predict(x: &Matrix, state: &BnState) -> Result<Matrix> {
    if x.rows() != state.dim() {
        return Err(Error::shape("bn_predict", x.shape(), (state.dim(), x.cols())));
    }
    let mut out = x.clone();
    for k in 0..state.dim() {
        let inv = 1.0 / (state.v_e[k] + state.eps).sqrt();
        let mu = state.mu_e[k];
        out.row_mut(k).iter_mut().for_each(|v| *v = (*v - mu) * inv);
    }
    Ok(out)
}

pub fn bn_predict(x: &Matrix, state: &BnState) -> Result<Matrix> {
    Ok(scale_shift(&bn_standardize_predict(x, state)?, &state.gamma, &state.beta))
}

/// Newton iterations for the inverse square root of a covariance.
///
/// With `Σ_N = Σ / tr(Σ)` and `W_0 = I`, iterates
/// `W_k = ½(3 W_{k-1} − W_{k-1}^3 Σ_N)` and returns `W_T / sqrt(tr Σ)`.
/// Each iteration costs three `d x d` products.
pub fn iternorm_whiten(sigma: &Matrix, t: usize, mut counter: Option<&mut OpCounter>) -> Result<Matrix> {
    if !sigma.is_square() {
        return Err(Error::shape("iternorm_whiten", sigma.shape(), sigma.shape()));
    }
    if t == 0 {
        return Err(Error::invalid("IterNorm needs at least one Newton iteration"));
    }
    let trace: f64 = sigma.diag().iter().sum();
    if !(trace > 0.0) {
        return Err(Error::invalid(format!("IterNorm needs a positive trace, got {trace}")));
    }
    let sigma_n = sigma.scale(1.0 / trace);
    let d = sigma.rows();
    let mut w = Matrix::identity(d);
    for _ in 0..t {
        let w2 = matmul(&w, &w, counter.as_deref_mut())?;
        let w3 = matmul(&w2, &w, counter.as_deref_mut())?;
        let w3s = matmul(&w3, &sigma_n, counter.as_deref_mut())?;
        w = Matrix::from_fn(d, d, |i, j| 0.5 * (3.0 * w[(i, j)] - w3s[(i, j)]));
    }
    Ok(w.scale(1.0 / trace.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterNormState {
    pub t: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu_e: Vec<f64>,
    /// Running average of the per-batch whitening matrices, used at inference.
    pub w_e: Matrix,
    pub eta: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct IterNormCache {
    pub x_w: Matrix,
    pub w: Matrix,
}

impl IterNormState {
    pub fn new(d: usize, t: usize) -> Self {
        Self {
            t,
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            mu_e: vec![0.0; d],
            w_e: Matrix::identity(d),
            eta: crate::swbn::DEFAULT_ETA,
            eps: crate::swbn::DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_vec("beta", &self.beta, d)?;
        check_vec("mu_e", &self.mu_e, d)?;
        if self.w_e.shape() != (d, d) {
            return Err(Error::shape("iternorm_state", self.w_e.shape(), (d, d)));
        }
        if self.t == 0 || !(self.eta > 0.0 && self.eta < 1.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("IterNorm hyperparameters out of range"));
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        w.header(ITERNORM_TAG, 1);
        w.value("d", self.dim());
        w.value("T", self.t);
        w.real("eta", self.eta);
        w.real("eps", self.eps);
        w.reals("gamma", &self.gamma);
        w.reals("beta", &self.beta);
        w.reals("mu_e", &self.mu_e);
        w.reals("W_e", self.w_e.as_slice());
        w.end();
    }

    pub fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self> {
        r.header(ITERNORM_TAG)?;
        let d: usize = r.value("d")?;
        let s = Self {
            t: r.value("T")?,
            eta: r.value("eta")?,
            eps: r.value("eps")?,
            gamma: r.reals("gamma", d)?,
            beta: r.reals("beta", d)?,
            mu_e: r.reals("mu_e", d)?,
            w_e: Matrix::new(d, d, r.reals("W_e", d * d)?)?,
        };
        r.end()?;
        s.validate()?;
        Ok(s)
    }
}

/// Centre, whiten with a fresh Newton solve, scale and shift. Records
/// `2 d^2 n + 3 T d^3` multiplications.
pub fn iternorm_forward_train(
    x: &Matrix,
    state: &mut IterNormState,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, IterNormCache)> {
    let (d, n) = x.shape();
    if d != state.dim() {
        return Err(Error::shape("iternorm_forward_train", x.shape(), (state.dim(), n)));
    }
    if n < 2 {
        return Err(Error::invalid(format!("batch needs at least 2 samples, got {n}")));
    }
    if let Some(index) = x.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mu = x.row_means();
    let mut xc = x.clone();
    for k in 0..d {
        let m = mu[k];
        xc.row_mut(k).iter_mut().for_each(|v| *v -= m);
    }
    let mut sigma = sample_covariance(&xc, counter.as_deref_mut())?;
    for k in 0..d {
        sigma[(k, k)] += state.eps;
    }
    let w = iternorm_whiten(&sigma, state.t, counter.as_deref_mut())?;
    let x_w = matmul(&w, &xc, counter)?;

    let eta = state.eta;
    for k in 0..d {
        state.mu_e[k] = eta * state.mu_e[k] + (1.0 - eta) * mu[k];
    }
    for (e, &b) in state.w_e.as_mut_slice().iter_mut().zip(w.as_slice()) {
        *e = eta * *e + (1.0 - eta) * b;
    }

    let out = scale_shift(&x_w, &state.gamma, &state.beta);
    Ok((out, IterNormCache { x_w, w }))
}

/// Backward with the batch whitening matrix held constant; only the centring
/// couples samples.
pub fn iternorm_backward(grad_out: &Matrix, cache: &IterNormCache, state: &IterNormState) -> Result<LayerGrads> {
    if grad_out.shape() != cache.x_w.shape() {
        return Err(Error::shape("iternorm_backward", grad_out.shape(), cache.x_w.shape()));
    }
    let mut gamma_g = grad_out.clone();
    for r in 0..gamma_g.rows() {
        let g = state.gamma[r];
        gamma_g.row_mut(r).iter_mut().for_each(|v| *v *= g);
    }
    let mut grad_x = matmul_at(&cache.w, &gamma_g, None)?;
    let means = grad_x.row_means();
    for (r, m) in means.into_iter().enumerate() {
        grad_x.row_mut(r).iter_mut().for_each(|v| *v -= m);
    }
    Ok(LayerGrads {
        grad_x,
        grad_gamma: row_dot(grad_out, &cache.x_w),
        grad_beta: grad_out.row_sums(),
    })
}

pub fn iternorm_whiten_predict(x: &Matrix, state: &IterNormState) -> Result<Matrix> {
    if x.rows() != state.dim() {
        return Err(Error::shape("iternorm_predict", x.shape(), (state.dim(), x.cols())));
    }
    let mut xc = x.clone();
    for k in 0..state.dim() {
        let m = state.mu_e[k];
        xc.row_mut(k).iter_mut().for_each(|v| *v -= m);
    }
    matmul(&state.w_e, &xc, None)
}

pub fn iternorm_predict(x: &Matrix, state: &IterNormState) -> Result<Matrix> {
    Ok(scale_shift(&iternorm_whiten_predict(x, state)?, &state.gamma, &state.beta))
}
