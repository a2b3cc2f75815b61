//! Normalization layers behind a common trait, looked up by name.
//!
//! The built-in registry knows `bn`, `swbn-kl`, `swbn-fro` and `iternorm`.
//! Each entry can build a fresh layer of width `d` and restore one from a
//! checkpoint section.

use std::fmt;

use crate::baselines::{
    bn_backward, bn_forward_train, bn_predict, bn_standardize_predict, iternorm_backward, iternorm_forward_train,
    iternorm_predict, iternorm_whiten_predict, BnCache, BnState, IterNormCache, IterNormState, BN_TAG, ITERNORM_TAG,
};
use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, OpCounter};
use crate::swbn::{BackpropCache, BackwardMode, LayerGrads, SwbnState, DEFAULT_ALPHA, DEFAULT_EPS, DEFAULT_ETA};

/// Mutable view of one trainable tensor with its gradient and momentum buffer.
pub struct ParamMut<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    pub velocity: &'a mut [f64],
}

/// Hyperparameters shared by the layer constructors; each layer reads the
/// fields it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NormOptions {
    pub alpha: f64,
    pub eta: f64,
    pub eps: f64,
    pub iternorm_t: usize,
    pub backward_mode: BackwardMode,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            eps: DEFAULT_EPS,
            iternorm_t: 5,
            backward_mode: BackwardMode::Faithful,
        }
    }
}

pub trait NormLayer: fmt::Debug + Send {
    /// Registry name of the layer kind.
    fn kind(&self) -> &'static str;

    fn dim(&self) -> usize;

    /// Training-mode forward pass. Keeps whatever the next `backward` needs.
    fn forward_train(&mut self, x: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix>;

    /// Consumes the stored forward intermediates, stores `γ`/`β` gradients and
    /// returns the input gradient.
    fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix>;

    /// Inference-mode output.
    fn predict(&self, x: &Matrix) -> Result<Matrix>;

    /// Inference-mode output before the per-channel scale and shift.
    fn predict_pre_affine(&self, x: &Matrix) -> Result<Matrix>;

    /// `γ` and `β` with their gradients and momentum buffers.
    fn params(&mut self) -> Vec<ParamMut<'_>>;

    /// Freezes (or unfreezes) any parameters that the forward pass updates on
    /// its own, so that the layer becomes a fixed function of its input.
    fn freeze_forward_updates(&mut self, _frozen: bool) {}

    fn write_checkpoint(&self, w: &mut CheckpointWriter);
}

/// `γ`/`β` gradients and momentum buffers common to every layer.
#[derive(Debug, Clone)]
struct TaskBuffers {
    grad_gamma: Vec<f64>,
    grad_beta: Vec<f64>,
    vel_gamma: Vec<f64>,
    vel_beta: Vec<f64>,
}

impl TaskBuffers {
    fn new(d: usize) -> Self {
        Self {
            grad_gamma: vec![0.0; d],
            grad_beta: vec![0.0; d],
            vel_gamma: vec![0.0; d],
            vel_beta: vec![0.0; d],
        }
    }

    fn store(&mut self, g: LayerGrads) -> Matrix {
        self.grad_gamma = g.grad_gamma;
        self.grad_beta = g.grad_beta;
        g.grad_x
    }

    fn params<'a>(&'a mut self, gamma: &'a mut [f64], beta: &'a mut [f64]) -> Vec<ParamMut<'a>> {
        vec![
            ParamMut {
                value: gamma,
                grad: &self.grad_gamma,
                velocity: &mut self.vel_gamma,
            },
            ParamMut {
                value: beta,
                grad: &self.grad_beta,
                velocity: &mut self.vel_beta,
            },
        ]
    }
}

fn no_cache() -> Error {
    Error::invalid("backward called without a preceding forward_train")
}

#[derive(Debug)]
pub struct SwbnLayer {
    pub state: SwbnState,
    pub mode: BackwardMode,
    cache: Option<BackpropCache>,
    buffers: TaskBuffers,
    saved_alpha: Option<f64>,
}

impl SwbnLayer {
    pub fn new(state: SwbnState, mode: BackwardMode) -> Self {
        let d = state.d;
        Self {
            state,
            mode,
            cache: None,
            buffers: TaskBuffers::new(d),
            saved_alpha: None,
        }
    }
}

impl NormLayer for SwbnLayer {
    fn kind(&self) -> &'static str {
        match self.state.criterion {
            Criterion::Kl => "swbn-kl",
            Criterion::Fro => "swbn-fro",
        }
    }

    fn dim(&self) -> usize {
        self.state.d
    }

    fn forward_train(&mut self, x: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
        let (out, cache) = self.state.forward_train(x, counter)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self.cache.take().ok_or_else(no_cache)?;
        let grads = self.state.backward(grad_out, &cache, self.mode)?;
        Ok(self.buffers.store(grads))
    }

    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.state.forward_predict(x)
    }

    fn predict_pre_affine(&self, x: &Matrix) -> Result<Matrix> {
        self.state.predict_whitened(x)
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        self.buffers.params(&mut self.state.gamma, &mut self.state.beta)
    }

    fn freeze_forward_updates(&mut self, frozen: bool) {
        if frozen {
            if self.saved_alpha.is_none() {
                self.saved_alpha = Some(self.state.alpha);
                self.state.alpha = 0.0;
            }
        } else if let Some(a) = self.saved_alpha.take() {
            self.state.alpha = a;
        }
    }

    fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        self.state.write_checkpoint(w);
    }
}

#[derive(Debug)]
pub struct BnLayer {
    pub state: BnState,
    cache: Option<BnCache>,
    buffers: TaskBuffers,
}

impl BnLayer {
    pub fn new(state: BnState) -> Self {
        let d = state.dim();
        Self {
            state,
            cache: None,
            buffers: TaskBuffers::new(d),
        }
    }
}

impl NormLayer for BnLayer {
    fn kind(&self) -> &'static str {
        "bn"
    }

    fn dim(&self) -> usize {
        self.state.dim()
    }

    fn forward_train(&mut self, x: &Matrix, _counter: Option<&mut OpCounter>) -> Result<Matrix> {
        let (out, cache) = bn_forward_train(x, &mut self.state)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self.cache.take().ok_or_else(no_cache)?;
        let grads = bn_backward(grad_out, &cache, &self.state)?;
        Ok(self.buffers.store(grads))
    }

    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        bn_predict(x, &self.state)
    }

    fn predict_pre_affine(&self, x: &Matrix) -> Result<Matrix> {
        bn_standardize_predict(x, &self.state)
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        self.buffers.params(&mut self.state.gamma, &mut self.state.beta)
    }

    fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        self.state.write_checkpoint(w);
    }
}

#[derive(Debug)]
pub struct IterNormLayer {
    pub state: IterNormState,
    cache: Option<IterNormCache>,
    buffers: TaskBuffers,
}

impl IterNormLayer {
    pub fn new(state: IterNormState) -> Self {
        let d = state.dim();
        Self {
            state,
            cache: None,
            buffers: TaskBuffers::new(d),
        }
    }
}

impl NormLayer for IterNormLayer {
    fn kind(&self) -> &'static str {
        "iternorm"
    }

    fn dim(&self) -> usize {
        self.state.dim()
    }

    fn forward_train(&mut self, x: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
        let (out, cache) = iternorm_forward_train(x, &mut self.state, counter)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self.cache.take().ok_or_else(no_cache)?;
        let grads = iternorm_backward(grad_out, &cache, &self.state)?;
        Ok(self.buffers.store(grads))
    }

    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        iternorm_predict(x, &self.state)
    }

    fn predict_pre_affine(&self, x: &Matrix) -> Result<Matrix> {
        iternorm_whiten_predict(x, &self.state)
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        self.buffers.params(&mut self.state.gamma, &mut self.state.beta)
    }

    fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        self.state.write_checkpoint(w);
    }
}

pub type BuildFn = fn(d: usize, opts: &NormOptions) -> Box<dyn NormLayer>;
pub type LoadFn = fn(r: &mut CheckpointReader<'_>, opts: &NormOptions) -> Result<Box<dyn NormLayer>>;

pub struct NormEntry {
    pub name: &'static str,
    pub description: &'static str,
    /// Checkpoint section tag this entry restores from.
    pub tag: &'static str,
    pub build: BuildFn,
    pub load: LoadFn,
}

pub struct NormRegistry {
    entries: Vec<NormEntry>,
}

impl fmt::Debug for NormRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.iter().map(|e| e.name)).finish()
    }
}

fn swbn_with(criterion: Criterion, d: usize, opts: &NormOptions) -> Box<dyn NormLayer> {
    let state = SwbnState::new(d, criterion)
        .with_alpha(opts.alpha)
        .with_eta(opts.eta)
        .with_eps(opts.eps);
    Box::new(SwbnLayer::new(state, opts.backward_mode))
}

fn load_swbn(r: &mut CheckpointReader<'_>, opts: &NormOptions) -> Result<Box<dyn NormLayer>> {
    Ok(Box::new(SwbnLayer::new(SwbnState::read_checkpoint(r)?, opts.backward_mode)))
}

impl NormRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(NormEntry {
            name: "bn",
            description: "batch normalization",
            tag: BN_TAG,
            build: |d, opts| {
                let mut s = BnState::new(d);
                s.eta = opts.eta;
                s.eps = opts.eps;
                Box::new(BnLayer::new(s))
            },
            load: |r, _| Ok(Box::new(BnLayer::new(BnState::read_checkpoint(r)?))),
        });
        reg.register(NormEntry {
            name: "swbn-kl",
            description: "stochastic whitening, KL criterion",
            tag: crate::swbn::CHECKPOINT_TAG,
            build: |d, opts| swbn_with(Criterion::Kl, d, opts),
            load: load_swbn,
        });
        reg.register(NormEntry {
            name: "swbn-fro",
            description: "stochastic whitening, Frobenius criterion",
            tag: crate::swbn::CHECKPOINT_TAG,
            build: |d, opts| swbn_with(Criterion::Fro, d, opts),
            load: load_swbn,
        });
        reg.register(NormEntry {
            name: "iternorm",
            description: "IterNorm, Newton iterations per batch",
            tag: ITERNORM_TAG,
            build: |d, opts| {
                let mut s = IterNormState::new(d, opts.iternorm_t);
                s.eta = opts.eta;
                s.eps = opts.eps;
                Box::new(IterNormLayer::new(s))
            },
            load: |r, _| Ok(Box::new(IterNormLayer::new(IterNormState::read_checkpoint(r)?))),
        });
        reg
    }

    /// Adds an entry; a later entry with the same name shadows an earlier one.
    pub fn register(&mut self, entry: NormEntry) {
        self.entries.retain(|e| e.name != entry.name);
        self.entries.push(entry);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&NormEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn build(&self, name: &str, d: usize, opts: &NormOptions) -> Result<Box<dyn NormLayer>> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown norm layer {name:?}; known: {}", self.names().join(", "))))?;
        Ok((entry.build)(d, opts))
    }

    /// Restores a layer from the checkpoint section at the reader's position,
    /// dispatching on the section tag.
    pub fn load(&self, r: &mut CheckpointReader<'_>, opts: &NormOptions) -> Result<Box<dyn NormLayer>> {
        let tag = r
            .peek_key()
            .ok_or_else(|| Error::Format("expected a layer section".into()))?;
        let entry = self
            .entries
            .iter()
            .find(|e| e.tag == tag)
            .ok_or_else(|| Error::Format(format!("no layer kind registered for section {tag:?}")))?;
        (entry.load)(r, opts)
    }
}

impl Default for NormRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
