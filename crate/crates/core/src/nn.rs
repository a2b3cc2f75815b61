//! A small fully-connected network trainer: dense layers, optional
//! normalization before each activation, ReLU, softmax cross-entropy and SGD
//! with momentum.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};

use crate::checkpoint::{CheckpointReader, CheckpointWriter};
use crate::data::{batch_indices, Dataset, Rng, Split};
use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::matrix::{matmul, matmul_at, matmul_bt, mean_abs_offdiag, CorrelationAccumulator, Matrix};
use crate::norm::{NormLayer, NormOptions, NormRegistry, ParamMut};
use crate::swbn::BackwardMode;

pub const MODEL_TAG: &str = "swbn-model";
const DENSE_TAG: &str = "dense-layer";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::None => "none",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Hidden layer: dense map to `units`, then optional normalization, then the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub units: usize,
    /// Registry name of the normalization layer, if any.
    pub norm: Option<String>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<LayerSpec>,
    pub classes: usize,
}

impl ModelSpec {
    /// `input -> units... -> classes`, the same norm kind and ReLU on every hidden layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], norm: Option<&str>, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden
                .iter()
                .map(|&units| LayerSpec {
                    units,
                    norm: norm.map(str::to_string),
                    activation: Activation::Relu,
                })
                .collect(),
            classes,
        }
    }

    pub fn validate(&self, registry: &NormRegistry) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::invalid("model needs a positive input width and at least two classes"));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            if l.units == 0 {
                return Err(Error::invalid(format!("hidden layer {i} has zero units")));
            }
            if let Some(n) = &l.norm {
                if registry.get(n).is_none() {
                    return Err(Error::invalid(format!(
                        "hidden layer {i}: unknown norm {n:?}; known: {}",
                        registry.names().join(", ")
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Halve the learning rate every this many epochs; 0 disables the schedule.
    pub lr_halving_period: usize,
    pub seed: u64,
    pub swbn_alpha: f64,
    /// EMA momentum of the running statistics in every norm layer.
    pub eta: f64,
    pub backward_mode: BackwardMode,
    pub iternorm_t: usize,
    pub eval_batch_size: usize,
    /// Fill `elapsed_ms`; off by default so metrics files are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            lr_halving_period: 20,
            seed: 0,
            swbn_alpha: crate::swbn::DEFAULT_ALPHA,
            eta: crate::swbn::DEFAULT_ETA,
            backward_mode: BackwardMode::Faithful,
            iternorm_t: 5,
            eval_batch_size: 1000,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "need lr > 0 and 0 <= momentum < 1 (lr={}, momentum={})",
                self.lr, self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        if !(self.swbn_alpha >= 0.0) || self.iternorm_t == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("swbn_alpha, iternorm_t or eval_batch_size out of range"));
        }
        Ok(())
    }

    pub fn norm_options(&self) -> NormOptions {
        NormOptions {
            alpha: self.swbn_alpha,
            eta: self.eta,
            iternorm_t: self.iternorm_t,
            backward_mode: self.backward_mode,
            ..NormOptions::default()
        }
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halving_period == 0 || epoch == 0 {
            return self.lr;
        }
        let halvings = (epoch - 1) / self.lr_halving_period;
        self.lr / 2f64.powi(halvings as i32)
    }
}

/// `v ← momentum·v + g; p ← p − lr·v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Layers feeding a normalization layer carry no bias; it would be
    /// cancelled by the mean subtraction.
    pub use_bias: bool,
    grad_w: Matrix,
    grad_b: Vec<f64>,
    vel_w: Matrix,
    vel_b: Vec<f64>,
    input: Option<Matrix>,
}

/// Gradients of a dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub grad_x: Matrix,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

/// `y = W x + b 1^T`.
pub fn dense_forward(x: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let mut y = matmul(weights, x, None)?;
    for (r, &b) in bias.iter().enumerate() {
        y.row_mut(r).iter_mut().for_each(|v| *v += b);
    }
    Ok(y)
}

pub fn dense_backward(grad_y: &Matrix, x: &Matrix, weights: &Matrix) -> Result<DenseGrads> {
    Ok(DenseGrads {
        grad_x: matmul_at(weights, grad_y, None)?,
        grad_w: matmul_bt(grad_y, x, None)?,
        grad_b: grad_y.row_sums(),
    })
}

impl DenseLayer {
    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new(inputs: usize, outputs: usize, use_bias: bool, rng: &mut Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Matrix::from_fn(outputs, inputs, |_, _| rng.uniform_range(-bound, bound));
        Self::from_parts(weights, vec![0.0; outputs], use_bias)
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>, use_bias: bool) -> Self {
        let (o, i) = weights.shape();
        Self {
            grad_w: Matrix::zeros(o, i),
            grad_b: vec![0.0; o],
            vel_w: Matrix::zeros(o, i),
            vel_b: vec![0.0; o],
            weights,
            bias,
            use_bias,
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        dense_forward(x, &self.weights, &self.bias)
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Matrix) -> Result<Matrix> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::invalid("dense backward without forward"))?;
        let g = dense_backward(grad_y, &x, &self.weights)?;
        self.grad_w = g.grad_w;
        self.grad_b = g.grad_b;
        Ok(g.grad_x)
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = vec![ParamMut {
            value: self.weights.as_mut_slice(),
            grad: self.grad_w.as_slice(),
            velocity: self.vel_w.as_mut_slice(),
        }];
        if self.use_bias {
            out.push(ParamMut {
                value: &mut self.bias,
                grad: &self.grad_b,
                velocity: &mut self.vel_b,
            });
        }
        out
    }

    fn write_checkpoint(&self, w: &mut CheckpointWriter) {
        w.header(DENSE_TAG, 1);
        w.value("out", self.outputs());
        w.value("in", self.inputs());
        w.value("use_bias", u8::from(self.use_bias));
        w.reals("W", self.weights.as_slice());
        w.reals("b", &self.bias);
        w.end();
    }

    fn read_checkpoint(r: &mut CheckpointReader<'_>) -> Result<Self> {
        r.header(DENSE_TAG)?;
        let out: usize = r.value("out")?;
        let inp: usize = r.value("in")?;
        let use_bias = r.value::<u8>("use_bias")? != 0;
        let weights = Matrix::new(out, inp, r.reals("W", out * inp)?)?;
        let bias = r.reals("b", out)?;
        r.end()?;
        Ok(Self::from_parts(weights, bias, use_bias))
    }
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` where the layer input was positive.
pub fn relu_backward(grad: &Matrix, input: &Matrix) -> Result<Matrix> {
    let mut out = grad.clone();
    if grad.shape() != input.shape() {
        return Err(Error::shape("relu_backward", grad.shape(), input.shape()));
    }
    for (g, &x) in out.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the columns of a `C x n` logit matrix, and
/// its gradient with respect to the logits.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (c, n) = logits.shape();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} columns", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Matrix::zeros(c, n);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (j, &label) in labels.iter().enumerate() {
        let max = (0..c).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..c).map(|i| (logits[(i, j)] - max).exp()).sum();
        let log_sum = sum.ln();
        loss += -(logits[(label, j)] - max - log_sum);
        for i in 0..c {
            let p = (logits[(i, j)] - max - log_sum).exp();
            grad[(i, j)] = (p - if i == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

struct Block {
    spec: LayerSpec,
    dense: DenseLayer,
    norm: Option<Box<dyn NormLayer>>,
    /// Activation input from the last training forward pass.
    pre_activation: Option<Matrix>,
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Block")
            .field("spec", &self.spec)
            .field("norm", &self.norm.as_ref().map(|n| n.kind()))
            .finish()
    }
}

#[derive(Debug)]
pub struct Network {
    pub spec: ModelSpec,
    blocks: Vec<Block>,
    output: DenseLayer,
}

impl Network {
    /// Builds a freshly initialised network. Dense weights are drawn from
    /// `Rng::derive(seed, 0)` in layer order, so equal specs and seeds give
    /// equal parameters regardless of the norm kinds.
    pub fn build(spec: &ModelSpec, registry: &NormRegistry, opts: &NormOptions, seed: u64) -> Result<Self> {
        spec.validate(registry)?;
        let mut rng = Rng::derive(seed, 0);
        let mut width = spec.input_dim;
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        for l in &spec.hidden {
            let dense = DenseLayer::new(width, l.units, l.norm.is_none(), &mut rng);
            let norm = match &l.norm {
                Some(name) => Some(registry.build(name, l.units, opts)?),
                None => None,
            };
            blocks.push(Block {
                spec: l.clone(),
                dense,
                norm,
                pre_activation: None,
            });
            width = l.units;
        }
        let output = DenseLayer::new(width, spec.classes, true, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            blocks,
            output,
        })
    }

    pub fn has_norm(&self) -> bool {
        self.blocks.iter().any(|b| b.norm.is_some())
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &dyn NormLayer> {
        self.blocks.iter().filter_map(|b| b.norm.as_deref())
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut Box<dyn NormLayer>> {
        self.blocks.iter_mut().filter_map(|b| b.norm.as_mut())
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.dense.forward_train(&h)?;
            if let Some(n) = &mut b.norm {
                h = n.forward_train(&h, None)?;
            }
            if b.spec.activation == Activation::Relu {
                let out = relu_forward(&h);
                b.pre_activation = Some(h);
                h = out;
            }
        }
        self.output.forward_train(&h)
    }

    /// Back-propagates a logit gradient; returns the gradient for the input.
    pub fn backward(&mut self, grad_logits: &Matrix) -> Result<Matrix> {
        let mut g = self.output.backward(grad_logits)?;
        for b in self.blocks.iter_mut().rev() {
            if b.spec.activation == Activation::Relu {
                let pre = b
                    .pre_activation
                    .take()
                    .ok_or_else(|| Error::invalid("relu backward without forward"))?;
                g = relu_backward(&g, &pre)?;
            }
            if let Some(n) = &mut b.norm {
                g = n.backward(&g)?;
            }
            g = b.dense.backward(&g)?;
        }
        Ok(g)
    }

    /// Inference logits, plus the pre-affine output of the last normalization
    /// layer when the network has one.
    pub fn predict_with_probe(&self, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        let last_norm = self.blocks.iter().rposition(|b| b.norm.is_some());
        let mut probe = None;
        let mut h = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.dense.forward(&h)?;
            if let Some(n) = &b.norm {
                if Some(i) == last_norm {
                    probe = Some(n.predict_pre_affine(&h)?);
                }
                h = n.predict(&h)?;
            }
            if b.spec.activation == Activation::Relu {
                h = relu_forward(&h);
            }
        }
        Ok((self.output.forward(&h)?, probe))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.predict_with_probe(x)?.0)
    }

    /// All trainable tensors in a fixed order.
    pub fn params(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.dense.params());
            if let Some(n) = &mut b.norm {
                out.extend(n.params());
            }
        }
        out.extend(self.output.params());
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        for p in self.params() {
            sgd_momentum_step(p.value, p.grad, p.velocity, lr, momentum);
        }
    }

    pub fn freeze_forward_updates(&mut self, frozen: bool) {
        for n in self.norm_layers_mut() {
            n.freeze_forward_updates(frozen);
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut w = CheckpointWriter::new();
        w.header(MODEL_TAG, 1);
        w.value("input", self.spec.input_dim);
        w.value("classes", self.spec.classes);
        w.value("hidden", self.spec.hidden.len());
        for l in &self.spec.hidden {
            w.value(
                "layer",
                format!("{} {} {}", l.units, l.norm.as_deref().unwrap_or("none"), l.activation.as_str()),
            );
        }
        for b in &self.blocks {
            b.dense.write_checkpoint(&mut w);
            if let Some(n) = &b.norm {
                n.write_checkpoint(&mut w);
            }
        }
        self.output.write_checkpoint(&mut w);
        w.end();
        w.finish()
    }

    pub fn from_checkpoint_str(text: &str, registry: &NormRegistry, opts: &NormOptions) -> Result<Self> {
        let mut r = CheckpointReader::new(text);
        r.header(MODEL_TAG)?;
        let input_dim: usize = r.value("input")?;
        let classes: usize = r.value("classes")?;
        let count: usize = r.value("hidden")?;
        let mut hidden = Vec::with_capacity(count);
        for _ in 0..count {
            let parts = r.tokens("layer")?;
            let line = parts.join(" ");
            let [units, norm, act] = parts.as_slice() else {
                return Err(Error::Format(format!("bad layer line {line:?}")));
            };
            hidden.push(LayerSpec {
                units: units
                    .parse()
                    .map_err(|_| Error::Format(format!("bad unit count {units:?}")))?,
                norm: (*norm != "none").then(|| norm.to_string()),
                activation: act.parse()?,
            });
        }
        let spec = ModelSpec {
            input_dim,
            hidden,
            classes,
        };
        spec.validate(registry)?;
        let mut blocks = Vec::with_capacity(count);
        let mut width = input_dim;
        for l in &spec.hidden {
            let dense = DenseLayer::read_checkpoint(&mut r)?;
            if dense.inputs() != width || dense.outputs() != l.units {
                return Err(Error::Format("dense layer shape does not match the model header".into()));
            }
            let norm = match &l.norm {
                Some(name) => {
                    let layer = registry.load(&mut r, opts)?;
                    if layer.kind() != name || layer.dim() != l.units {
                        return Err(Error::Format(format!(
                            "expected a {name} layer of width {}, found {} of width {}",
                            l.units,
                            layer.kind(),
                            layer.dim()
                        )));
                    }
                    Some(layer)
                }
                None => None,
            };
            blocks.push(Block {
                spec: l.clone(),
                dense,
                norm,
                pre_activation: None,
            });
            width = l.units;
        }
        let output = DenseLayer::read_checkpoint(&mut r)?;
        if output.inputs() != width || output.outputs() != classes {
            return Err(Error::Format("output layer shape does not match the model header".into()));
        }
        r.end()?;
        Ok(Self { spec, blocks, output })
    }
}

/// One record of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_abs_offdiag_lastnorm: Option<f64>,
    pub elapsed_ms: Option<f64>,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,mean_abs_offdiag_lastnorm,elapsed_ms,seed";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(g17).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split.as_str(),
            g17(self.loss),
            g17(self.accuracy),
            opt(self.mean_abs_offdiag_lastnorm),
            opt(self.elapsed_ms),
            self.seed
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv_line())?;
    }
    Ok(())
}

/// Loss, accuracy and last-norm decorrelation of a network on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_abs_offdiag: Option<f64>,
}

pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluation needs labelled data"))?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut corr: Option<CorrelationAccumulator> = None;
    for idx in batch_indices(data.len(), batch_size, 0, 0, false)? {
        let x = data.features.select_columns(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (logits, probe) = net.predict_with_probe(&x)?;
        let (loss, _) = softmax_xent(&logits, &y)?;
        loss_sum += loss * idx.len() as f64;
        for (j, &label) in y.iter().enumerate() {
            let col = logits.column_vec(j);
            let best = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a)));
            if best == Some(label) {
                correct += 1;
            }
        }
        if let Some(p) = probe {
            corr.get_or_insert_with(|| CorrelationAccumulator::new(p.rows())).push(&p)?;
        }
    }
    let n = data.len() as f64;
    let mean_abs_offdiag = match corr {
        Some(acc) if acc.count() >= 2 && acc.dim() >= 2 => Some(mean_abs_offdiag(&acc.correlation()?)?),
        _ => None,
    };
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        mean_abs_offdiag,
    })
}

/// Result of [`train`]: the metrics log and the trained network.
#[derive(Debug)]
pub struct TrainRun {
    pub metrics: Vec<MetricsRow>,
    pub network: Network,
}

/// Trains a freshly built network and evaluates both splits before training
/// and after every epoch.
pub fn train(
    spec: &ModelSpec,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    registry: &NormRegistry,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_data.dim() != spec.input_dim || test_data.dim() != spec.input_dim {
        return Err(Error::invalid(format!(
            "data width {} / {} does not match model input {}",
            train_data.dim(),
            test_data.dim(),
            spec.input_dim
        )));
    }
    let labels = train_data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("training needs labelled data"))?;
    let mut net = Network::build(spec, registry, &cfg.norm_options(), cfg.seed)?;
    let mut metrics = Vec::with_capacity(2 * (cfg.epochs + 1));
    let start = Instant::now();
    let mut training_time = 0.0;

    let record = |net: &Network, epoch: usize, elapsed: f64, metrics: &mut Vec<MetricsRow>| -> Result<()> {
        for data in [train_data, test_data] {
            let e = evaluate(net, data, cfg.eval_batch_size)?;
            metrics.push(MetricsRow {
                epoch,
                split: data.split,
                loss: e.loss,
                accuracy: e.accuracy,
                mean_abs_offdiag_lastnorm: e.mean_abs_offdiag,
                elapsed_ms: cfg.record_timing.then_some(elapsed),
                seed: cfg.seed,
            });
        }
        Ok(())
    };
    record(&net, 0, 0.0, &mut metrics)?;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let epoch_start = Instant::now();
        let batches = batch_indices(train_data.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?;
        for (step, idx) in batches.iter().enumerate() {
            if idx.len() < 2 {
                warn!("epoch {epoch}: dropping final batch of size {}", idx.len());
                continue;
            }
            let x = train_data.features.select_columns(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = net.forward_train(&x)?;
            let (loss, grad) = softmax_xent(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence { epoch, step, loss });
            }
            net.backward(&grad)?;
            net.sgd_step(lr, cfg.momentum);
        }
        training_time += epoch_start.elapsed().as_secs_f64() * 1e3;
        record(&net, epoch, training_time, &mut metrics)?;
        if let Some(last) = metrics.last() {
            debug!(
                "seed {} epoch {epoch}: test loss {:.4} acc {:.4} ({:.0} ms total)",
                cfg.seed,
                last.loss,
                last.accuracy,
                start.elapsed().as_secs_f64() * 1e3
            );
        }
    }
    Ok(TrainRun { metrics, network: net })
}

/// Central-difference step used by [`fd_gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Compares back-propagated gradients of the mean cross-entropy with central
/// differences, over every parameter and every input entry.
///
/// Returns `max |analytic − numeric| / max(1e-8, |numeric|)`. Forward-phase
/// updates (the whitening step) are frozen for the duration of the check, and
/// SWBN layers should be in exact backward mode for the result to be small.
pub fn fd_gradcheck(net: &mut Network, x: &Matrix, labels: &[usize]) -> Result<f64> {
    net.freeze_forward_updates(true);
    let result = gradcheck_inner(net, x, labels);
    net.freeze_forward_updates(false);
    result
}

fn gradcheck_inner(net: &mut Network, x: &Matrix, labels: &[usize]) -> Result<f64> {
    let loss_at = |net: &mut Network, x: &Matrix| -> Result<f64> {
        let logits = net.forward_train(x)?;
        Ok(softmax_xent(&logits, labels)?.0)
    };
    let logits = net.forward_train(x)?;
    let (_, grad) = softmax_xent(&logits, labels)?;
    let grad_x = net.backward(&grad)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.to_vec()).collect();

    let h = GRADCHECK_STEP;
    let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1e-8);
    let mut worst = 0.0f64;
    for (t, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = net.params()[t].value[e];
            net.params()[t].value[e] = orig + h;
            let up = loss_at(net, x)?;
            net.params()[t].value[e] = orig - h;
            let down = loss_at(net, x)?;
            net.params()[t].value[e] = orig;
            worst = worst.max(rel(a, (up - down) / (2.0 * h)));
        }
    }
    let mut probe = x.clone();
    for i in 0..probe.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = loss_at(net, &probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = loss_at(net, &probe)?;
        probe.as_mut_slice()[i] = orig;
        worst = worst.max(rel(grad_x.as_slice()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}
