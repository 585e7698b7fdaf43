//! Feed-forward ReLU classifier with inverted dropout on hidden layers,
//! trained with Adam and validation-accuracy early stopping.
//!
//! Weights for layer `l` are stored as a `fan_in x fan_out` matrix so a batch
//! `X (n x fan_in)` maps to `X · W + b`. Dropout masks are applied to the
//! output of every hidden ReLU and never to the raw input, so the first
//! layer's activation is shared by all MC passes over the same batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::{argmax, softmax_in_place, MathError, Matrix, Rng};

pub const SNAPSHOT_FORMAT: &str = "alens-learner-v1";

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("batch has {found} columns but the network expects {expected} inputs")]
    InputWidth { expected: usize, found: usize },
    #[error("label {label} at row {row} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("bad snapshot: {0}")]
    Snapshot(String),
}

/// Layer widths (input first, classes last) and one dropout rate per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub dropout_rates: Vec<f64>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layer_sizes: vec![784, 128, 128, 10],
            dropout_rates: vec![0.25, 0.5],
        }
    }
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, dropout_rates: Vec<f64>) -> Result<Self, LearnerError> {
        let arch = Self {
            layer_sizes,
            dropout_rates,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.layer_sizes.len() < 2 {
            return Err(LearnerError::Architecture(
                "need at least an input and an output layer".into(),
            ));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(LearnerError::Architecture(format!("layer {pos} has size 0")));
        }
        let hidden = self.layer_sizes.len() - 2;
        if self.dropout_rates.len() != hidden {
            return Err(LearnerError::Architecture(format!(
                "{} dropout rates for {hidden} hidden layers",
                self.dropout_rates.len()
            )));
        }
        if let Some(r) = self
            .dropout_rates
            .iter()
            .find(|r| !(0.0..1.0).contains(*r))
        {
            return Err(LearnerError::Architecture(format!(
                "dropout rate {r} outside [0, 1)"
            )));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |m: String| Err(LearnerError::Config(m));
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Number of stochastic forward passes per input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub k_passes: usize,
}

impl McConfig {
    pub fn new(k_passes: usize) -> Result<Self, LearnerError> {
        if k_passes == 0 {
            return Err(LearnerError::Config("k_passes must be at least 1".into()));
        }
        Ok(Self { k_passes })
    }
}

/// Inputs paired with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self, LearnerError> {
        if inputs.rows() != labels.len() {
            return Err(LearnerError::Math(MathError::ShapeMismatch {
                op: "LabeledSet",
                left: inputs.shape(),
                right: (labels.len(), 1),
            }));
        }
        Ok(Self { inputs, labels })
    }

    /// Gathers `indices` from a full image matrix and label list.
    pub fn gather(images: &Matrix, labels: &[usize], indices: &[usize]) -> Self {
        Self {
            inputs: images.select_rows(indices),
            labels: indices.iter().map(|&i| labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One network's weights and dropout configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams {
    pub arch: Architecture,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(params: &LearnerParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn glorot_init(arch: &Architecture, rng: &mut Rng) -> Result<LearnerParams, LearnerError> {
    arch.validate()?;
    let mut weights = Vec::with_capacity(arch.layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(arch.layer_sizes.len() - 1);
    for pair in arch.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(LearnerParams {
        arch: arch.clone(),
        weights,
        biases,
    })
}

/// Whether hidden units are masked during a forward pass.
pub enum DropoutMode<'a> {
    Off,
    Sample(&'a mut Rng),
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    layer_sizes: Vec<usize>,
    dropout_rates: Vec<f64>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl LearnerParams {
    pub fn n_inputs(&self) -> usize {
        self.arch.n_inputs()
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|b| b.is_finite())
    }

    fn check_input(&self, batch: &Matrix) -> Result<(), LearnerError> {
        if batch.cols() != self.n_inputs() {
            return Err(LearnerError::InputWidth {
                expected: self.n_inputs(),
                found: batch.cols(),
            });
        }
        Ok(())
    }

    fn n_hidden(&self) -> usize {
        self.weights.len() - 1
    }

    /// First-layer output: ReLU activation if the net has hidden layers,
    /// otherwise the logits. Deterministic for a given batch.
    fn first_layer(&self, batch: &Matrix) -> Result<Matrix, LearnerError> {
        self.check_input(batch)?;
        let mut z = batch.matmul(&self.weights[0])?;
        z.add_bias_in_place(&self.biases[0])?;
        if self.n_hidden() > 0 {
            z.relu_in_place();
        }
        Ok(z)
    }

    /// Finishes a forward pass from [`Self::first_layer`], drawing fresh masks
    /// when `rng` is given, and returns row-wise class probabilities.
    fn finish_pass(&self, first: &Matrix, mut rng: Option<&mut Rng>) -> Result<Matrix, LearnerError> {
        let n_hidden = self.n_hidden();
        if n_hidden == 0 {
            let mut out = first.clone();
            softmax_rows(&mut out);
            return Ok(out);
        }
        let mut act = first.clone();
        for layer in 1..=n_hidden {
            if let Some(r) = rng.as_deref_mut() {
                apply_mask(&mut act, self.arch.dropout_rates[layer - 1], r);
            }
            let mut z = act.matmul(&self.weights[layer])?;
            z.add_bias_in_place(&self.biases[layer])?;
            if layer < n_hidden {
                z.relu_in_place();
            }
            act = z;
        }
        softmax_rows(&mut act);
        Ok(act)
    }

    /// Row-wise class probabilities. In `Off` mode no units are dropped;
    /// inverted scaling makes this the mask expectation of the hidden layers.
    pub fn forward(&self, batch: &Matrix, mode: DropoutMode<'_>) -> Result<Matrix, LearnerError> {
        let first = self.first_layer(batch)?;
        match mode {
            DropoutMode::Off => self.finish_pass(&first, None),
            DropoutMode::Sample(rng) => self.finish_pass(&first, Some(rng)),
        }
    }

    /// Predicted class per row with dropout off; ties go to the lowest class.
    pub fn predict_classes(&self, batch: &Matrix) -> Result<Vec<usize>, LearnerError> {
        let probs = self.forward(batch, DropoutMode::Off)?;
        Ok(probs.iter_rows().map(argmax).collect())
    }

    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64, LearnerError> {
        if set.is_empty() {
            return Err(LearnerError::EmptySet("evaluation"));
        }
        let preds = self.predict_classes(&set.inputs)?;
        let hits = preds.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / set.len() as f64)
    }

    /// Mean cross-entropy and its gradient on `set` with dropout off.
    pub fn loss_and_gradients(&self, set: &LabeledSet) -> Result<(f64, Gradients), LearnerError> {
        self.check_labels(set)?;
        self.backprop(&set.inputs, &set.labels, None)
    }

    /// Mean cross-entropy on `set` with dropout off.
    pub fn loss(&self, set: &LabeledSet) -> Result<f64, LearnerError> {
        self.check_labels(set)?;
        let logits = self.logits(&set.inputs)?;
        Ok(mean_cross_entropy(&logits, &set.labels))
    }

    fn logits(&self, batch: &Matrix) -> Result<Matrix, LearnerError> {
        self.check_input(batch)?;
        let mut act = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = act.matmul(w)?;
            z.add_bias_in_place(b)?;
            if l < self.n_hidden() {
                z.relu_in_place();
            }
            act = z;
        }
        Ok(act)
    }

    fn check_labels(&self, set: &LabeledSet) -> Result<(), LearnerError> {
        let n_classes = self.n_classes();
        if let Some((row, &label)) = set.labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(LearnerError::LabelOutOfRange {
                row,
                label,
                n_classes,
            });
        }
        self.check_input(&set.inputs)
    }

    /// Forward with optional dropout masks, then reverse-mode gradients of
    /// the mean softmax cross-entropy.
    fn backprop(
        &self,
        x: &Matrix,
        labels: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<(f64, Gradients), LearnerError> {
        let n_layers = self.weights.len();
        let n_hidden = self.n_hidden();
        // inputs[l] feeds weights[l]; pre[l] is the hidden pre-activation of layer l+1
        let mut inputs: Vec<Matrix> = Vec::with_capacity(n_layers);
        let mut pre: Vec<Matrix> = Vec::with_capacity(n_hidden);
        let mut masks: Vec<Option<Matrix>> = Vec::with_capacity(n_hidden);
        inputs.push(x.clone());
        for l in 0..n_hidden {
            let mut z = inputs[l].matmul(&self.weights[l])?;
            z.add_bias_in_place(&self.biases[l])?;
            let mut a = z.relu();
            let mask = match rng.as_deref_mut() {
                Some(r) => draw_mask(a.rows(), a.cols(), self.arch.dropout_rates[l], r),
                None => None,
            };
            if let Some(m) = &mask {
                for (v, s) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= s;
                }
            }
            pre.push(z);
            masks.push(mask);
            inputs.push(a);
        }
        let mut logits = inputs[n_hidden].matmul(&self.weights[n_hidden])?;
        logits.add_bias_in_place(&self.biases[n_hidden])?;
        let loss = mean_cross_entropy(&logits, labels);

        let n = x.rows() as f64;
        let mut delta = logits;
        softmax_rows(&mut delta);
        for (r, &y) in labels.iter().enumerate() {
            delta.row_mut(r)[y] -= 1.0;
        }
        for v in delta.as_mut_slice() {
            *v /= n;
        }

        let mut grads = Gradients::zeros_like(self);
        for l in (0..n_layers).rev() {
            grads.weights[l] = inputs[l].t_matmul(&delta)?;
            grads.biases[l] = delta.column_sums();
            if l == 0 {
                break;
            }
            let mut back = delta.matmul_t(&self.weights[l])?;
            let relu_mask = pre[l - 1].relu_grad();
            let drop = masks[l - 1].as_ref();
            for (i, v) in back.as_mut_slice().iter_mut().enumerate() {
                let mut g = *v * relu_mask.as_slice()[i];
                if let Some(m) = drop {
                    g *= m.as_slice()[i];
                }
                *v = g;
            }
            delta = back;
        }
        Ok((loss, grads))
    }

    pub fn to_snapshot_json(&self) -> String {
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            layer_sizes: self.arch.layer_sizes.clone(),
            dropout_rates: self.arch.dropout_rates.clone(),
            weights: self.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
            biases: self.biases.clone(),
        };
        serde_json::to_string(&snap).expect("plain data serializes")
    }

    pub fn from_snapshot_json(text: &str) -> Result<Self, LearnerError> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| LearnerError::Snapshot(e.to_string()))?;
        Self::from_snapshot(snap)
    }

    fn from_snapshot(snap: Snapshot) -> Result<Self, LearnerError> {
        if snap.format != SNAPSHOT_FORMAT {
            return Err(LearnerError::Snapshot(format!(
                "unknown format tag {:?}",
                snap.format
            )));
        }
        let arch = Architecture::new(snap.layer_sizes, snap.dropout_rates)?;
        let n_layers = arch.layer_sizes.len() - 1;
        if snap.weights.len() != n_layers || snap.biases.len() != n_layers {
            return Err(LearnerError::Snapshot("layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(n_layers);
        for (l, data) in snap.weights.into_iter().enumerate() {
            let (fi, fo) = (arch.layer_sizes[l], arch.layer_sizes[l + 1]);
            weights.push(Matrix::from_vec(fi, fo, data)?);
            if snap.biases[l].len() != fo {
                return Err(LearnerError::Snapshot(format!("bias {l} has wrong width")));
            }
        }
        let params = Self {
            arch,
            weights,
            biases: snap.biases,
        };
        if !params.is_finite() {
            return Err(LearnerError::Snapshot("non-finite parameter".into()));
        }
        Ok(params)
    }
}

fn softmax_rows(m: &mut Matrix) {
    let cols = m.cols();
    if cols == 0 {
        return;
    }
    for row in m.as_mut_slice().chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
}

/// Mean of `-log softmax(z)[y]` computed via log-sum-exp.
fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Scaled keep-mask (`0` or `1/(1-rate)`), or `None` when nothing can drop.
fn draw_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Option<Matrix> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
        .collect();
    Some(Matrix::from_vec(rows, cols, data).expect("sized"))
}

fn apply_mask(act: &mut Matrix, rate: f64, rng: &mut Rng) {
    if rate <= 0.0 {
        return;
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    for v in act.as_mut_slice() {
        if rng.bernoulli(keep) {
            *v *= scale;
        } else {
            *v = 0.0;
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &LearnerParams, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut LearnerParams, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for l in 0..params.weights.len() {
            update(
                params.weights[l].as_mut_slice(),
                grads.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            update(
                &mut params.biases[l],
                &grads.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
            );
        }
    }
}

/// Result of [`train`]: the best-validation snapshot plus bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LearnerParams,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Mini-batch Adam on cross-entropy with dropout active. After every epoch
/// the dropout-off validation accuracy is measured; training stops once it
/// has failed to strictly improve for `patience` consecutive epochs, and the
/// earliest best-scoring snapshot is returned.
pub fn train(
    params: LearnerParams,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, LearnerError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(LearnerError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(LearnerError::EmptySet("validation"));
    }
    params.check_labels(train_set)?;
    params.check_labels(val_set)?;

    let mut rng = Rng::new(cfg.seed);
    let mut params = params;
    let mut adam = Adam::new(&params, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_set.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) = params.backprop(&x, &y, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(LearnerError::Diverged { epoch });
            }
            adam.step(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(LearnerError::Diverged { epoch });
        }

        let acc = params.accuracy(val_set)?;
        if acc > best_acc {
            best_acc = acc;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best,
        epochs_run,
        best_epoch,
        best_val_accuracy: best_acc,
    })
}

/// `K` dropout-sampled passes per row, laid out as `[sample][pass][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct McSlab {
    pub n_samples: usize,
    pub k_passes: usize,
    pub n_classes: usize,
    pub data: Vec<f64>,
}

impl McSlab {
    pub fn pass(&self, sample: usize, k: usize) -> &[f64] {
        let start = (sample * self.k_passes + k) * self.n_classes;
        &self.data[start..start + self.n_classes]
    }
}

/// Runs `mc.k_passes` independent dropout-sampled passes over `batch`.
pub fn mc_predict(
    params: &LearnerParams,
    batch: &Matrix,
    mc: McConfig,
    rng: &mut Rng,
) -> Result<McSlab, LearnerError> {
    if mc.k_passes == 0 {
        return Err(LearnerError::Config("k_passes must be at least 1".into()));
    }
    let first = params.first_layer(batch)?;
    let (n, k_passes, c) = (batch.rows(), mc.k_passes, params.n_classes());
    let mut data = vec![0.0; n * k_passes * c];
    for k in 0..k_passes {
        let probs = params.finish_pass(&first, Some(rng))?;
        for (s, row) in probs.iter_rows().enumerate() {
            let start = (s * k_passes + k) * c;
            data[start..start + c].copy_from_slice(row);
        }
    }
    Ok(McSlab {
        n_samples: n,
        k_passes,
        n_classes: c,
        data,
    })
}
