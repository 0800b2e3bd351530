//! From-scratch feed-forward softmax classifier.
//!
//! Hidden layers use the rectified-linear activation; the output layer is a
//! softmax over class logits. Training is plain minibatch SGD with momentum
//! and cross-entropy loss.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPC";
const CHECKPOINT_VERSION: u32 = 1;

/// Multilayer perceptron. `weights[l]` maps layer l (size `layer_sizes[l]`)
/// to layer l+1.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// SGD hyperparameters. The learning rate is multiplied by `lr_decay` when
/// entering epochs ⌊E/2⌋ and ⌊3E/4⌋ (deduplicated, and never before the first
/// epoch).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 6,
            lr_decay: 0.1,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Accuracy breakdown plus a confusion matrix (rows = true class, columns =
/// predicted class).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    pub per_class_accuracy: Vec<f64>,
    pub total_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Classifier {
    /// Fresh model with uniform Glorot weights and zero biases.
    pub fn new(layer_sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_sizes needs at least input and output".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = glorot_limit(fan_in, fan_out);
            let mut m = Array2::zeros((fan_in, fan_out));
            for v in m.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            weights.push(m);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Classifier {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn k(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Grow the output layer by `extra` units. Existing units keep their
    /// parameters; new units start with zero weights and biases, so the
    /// expanded model's predictions on old classes are unchanged until the
    /// new units are trained. Class targets differ per sample, so zero
    /// columns pose no symmetry problem for subsequent training.
    pub fn expand_output(&self, extra: usize) -> Classifier {
        let mut grown = self.clone();
        let l = grown.weights.len() - 1;
        let fan_in = grown.layer_sizes[grown.layer_sizes.len() - 2];
        let old_k = grown.k();
        let new_k = old_k + extra;
        let mut w = Array2::zeros((fan_in, new_k));
        w.slice_mut(ndarray::s![.., ..old_k])
            .assign(&grown.weights[l]);
        let mut b = Array1::zeros(new_k);
        b.slice_mut(ndarray::s![..old_k]).assign(&grown.biases[l]);
        grown.weights[l] = w;
        grown.biases[l] = b;
        *grown.layer_sizes.last_mut().unwrap() = new_k;
        grown
    }

    fn check_width(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "feature width {} does not match input layer {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping post-activation values per layer; index 0 is the
    /// input itself and the final entry holds raw logits.
    fn forward_cached(&self, x: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w) + b;
            if l < self.weights.len() - 1 {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Softmax probabilities, numerically stabilized by per-row max
    /// subtraction. Rows sum to 1.
    pub fn softmax_probs(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&features)?;
        let n = features.nrows();
        let mut probs = Array2::zeros((n, self.k()));
        // Chunked so the hidden activations never balloon on large inputs.
        let chunk = 16_384;
        let mut row = 0;
        while row < n {
            let end = (row + chunk).min(n);
            let acts = self.forward_cached(&features.slice(ndarray::s![row..end, ..]));
            let logits = acts.last().unwrap();
            let mut block = logits.clone();
            softmax_rows_in_place(&mut block);
            probs.slice_mut(ndarray::s![row..end, ..]).assign(&block);
            row = end;
        }
        Ok(probs)
    }

    /// Mean cross-entropy and parameter gradients for one batch.
    fn loss_gradients(
        &self,
        x: &ArrayView2<f64>,
        y: &[usize],
    ) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let acts = self.forward_cached(x);
        let mut delta = acts.last().unwrap().clone();
        softmax_rows_in_place(&mut delta);

        let batch = y.len() as f64;
        let mut loss = 0.0;
        for (i, &label) in y.iter().enumerate() {
            loss -= delta[[i, label]].max(f64::MIN_POSITIVE).ln();
            delta[[i, label]] -= 1.0;
        }
        loss /= batch;
        delta.mapv_inplace(|v| v / batch);

        let layers = self.weights.len();
        let mut grads_w = vec![Array2::zeros((0, 0)); layers];
        let mut grads_b = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            grads_w[l] = acts[l].t().dot(&delta);
            grads_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                // Rectifier gradient: zero wherever the forward activation
                // was clamped.
                Zip::from(&mut back).and(&acts[l]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        (loss, grads_w, grads_b)
    }

    fn mean_loss(&self, x: &ArrayView2<f64>, y: &[usize]) -> f64 {
        let probs = {
            let acts = self.forward_cached(x);
            let mut p = acts.last().unwrap().clone();
            softmax_rows_in_place(&mut p);
            p
        };
        let mut loss = 0.0;
        for (i, &label) in y.iter().enumerate() {
            loss -= probs[[i, label]].max(f64::MIN_POSITIVE).ln();
        }
        loss / y.len() as f64
    }

    /// Write a self-describing checkpoint: magic, version, layer sizes, then
    /// per-layer weights (row-major) and biases as little-endian f64. The
    /// round-trip is bitwise exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u32::<LittleEndian>(self.layer_sizes.len() as u32)?;
        for &s in &self.layer_sizes {
            out.write_u32::<LittleEndian>(s as u32)?;
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for &v in w.iter() {
                out.write_f64::<LittleEndian>(v)?;
            }
            for &v in b.iter() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut cur = buf.as_slice();
        let mut magic = [0u8; 4];
        if cur.len() < 4 {
            return Err(bad_checkpoint(path, "file too short"));
        }
        magic.copy_from_slice(&cur[..4]);
        cur = &cur[4..];
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad_checkpoint(path, "wrong magic"));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad_checkpoint(path, "truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad_checkpoint(path, &format!("unsupported version {version}")));
        }
        let n_sizes = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad_checkpoint(path, "truncated layer count"))? as usize;
        if n_sizes < 2 {
            return Err(bad_checkpoint(path, "fewer than two layers"));
        }
        let mut layer_sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            layer_sizes.push(
                cur.read_u32::<LittleEndian>()
                    .map_err(|_| bad_checkpoint(path, "truncated layer sizes"))? as usize,
            );
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (rows, cols) = (pair[0], pair[1]);
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                w.push(
                    cur.read_f64::<LittleEndian>()
                        .map_err(|_| bad_checkpoint(path, "truncated weights"))?,
                );
            }
            weights.push(Array2::from_shape_vec((rows, cols), w).expect("shape from sizes"));
            let mut b = Vec::with_capacity(cols);
            for _ in 0..cols {
                b.push(
                    cur.read_f64::<LittleEndian>()
                        .map_err(|_| bad_checkpoint(path, "truncated biases"))?,
                );
            }
            biases.push(Array1::from_vec(b));
        }
        if !cur.is_empty() {
            return Err(bad_checkpoint(path, "trailing bytes"));
        }
        Ok(Classifier {
            layer_sizes,
            weights,
            biases,
        })
    }
}

fn bad_checkpoint(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

fn softmax_rows_in_place(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Minibatch SGD with momentum. Returns the trained model; the input model is
/// untouched. Momentum buffers start at zero on every call, the shuffle order
/// comes from `rng`, and a final partial batch is used as-is.
pub fn train(
    model: &Classifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Classifier> {
    cfg.validate()?;
    model.check_width(&data.features.view())?;
    if data.k() > model.k() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model output is {}",
            data.k(),
            model.k()
        )));
    }

    let mut m = model.clone();
    let mut vel_w: Vec<Array2<f64>> = m.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut vel_b: Vec<Array1<f64>> = m.biases.iter().map(|b| Array1::zeros(b.dim())).collect();

    let milestones: BTreeSet<usize> = [cfg.epochs / 2, cfg.epochs * 3 / 4]
        .into_iter()
        .filter(|&e| e > 0)
        .collect();
    let mut lr = cfg.learning_rate;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        if milestones.contains(&epoch) {
            lr *= cfg.lr_decay;
        }
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (_, gw, gb) = m.loss_gradients(&x.view(), &y);
            for l in 0..m.weights.len() {
                Zip::from(&mut vel_w[l]).and(&gw[l]).for_each(|v, &g| {
                    *v = cfg.momentum * *v - lr * g;
                });
                m.weights[l] += &vel_w[l];
                Zip::from(&mut vel_b[l]).and(&gb[l]).for_each(|v, &g| {
                    *v = cfg.momentum * *v - lr * g;
                });
                m.biases[l] += &vel_b[l];
            }
        }
    }
    Ok(m)
}

/// Argmax prediction with ties broken toward the lowest class id.
pub fn evaluate(model: &Classifier, data: &LabeledDataset) -> Result<EvalResult> {
    if data.k() > model.k() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model output is {}",
            data.k(),
            model.k()
        )));
    }
    let probs = model.softmax_probs(data.features.view())?;
    let k = model.k();
    let mut confusion = vec![vec![0u64; k]; k];
    for (i, &label) in data.labels.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0;
        let mut best_p = row[0];
        for (j, &p) in row.iter().enumerate().skip(1) {
            if p > best_p {
                best_p = p;
                best = j;
            }
        }
        confusion[label][best] += 1;
    }
    let mut per_class = vec![0.0; k];
    let mut correct = 0u64;
    for c in 0..k {
        let total: u64 = confusion[c].iter().sum();
        correct += confusion[c][c];
        per_class[c] = if total == 0 {
            0.0
        } else {
            confusion[c][c] as f64 / total as f64
        };
    }
    Ok(EvalResult {
        per_class_accuracy: per_class,
        total_accuracy: correct as f64 / data.len() as f64,
        confusion,
    })
}

/// Compare analytic gradients against central finite differences on every
/// parameter; returns the maximum relative error.
pub fn gradient_check(
    model: &Classifier,
    features: ArrayView2<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    model.check_width(&features)?;
    let (_, gw, gb) = model.loss_gradients(&features, labels);
    let mut max_err: f64 = 0.0;
    let mut probe = model.clone();
    for l in 0..model.weights.len() {
        for idx in 0..model.weights[l].len() {
            let analytic = gw[l].as_slice().unwrap()[idx];
            let numeric = central_diff(&mut probe, &features, labels, l, false, idx, epsilon);
            max_err = max_err.max(relative_error(analytic, numeric));
        }
        for idx in 0..model.biases[l].len() {
            let analytic = gb[l][idx];
            let numeric = central_diff(&mut probe, &features, labels, l, true, idx, epsilon);
            max_err = max_err.max(relative_error(analytic, numeric));
        }
    }
    Ok(max_err)
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

fn central_diff(
    probe: &mut Classifier,
    x: &ArrayView2<f64>,
    y: &[usize],
    layer: usize,
    is_bias: bool,
    idx: usize,
    eps: f64,
) -> f64 {
    let nudge = |probe: &mut Classifier, delta: f64| {
        if is_bias {
            probe.biases[layer][idx] += delta;
        } else {
            probe.weights[layer].as_slice_mut().unwrap()[idx] += delta;
        }
    };
    nudge(probe, eps);
    let plus = probe.mean_loss(x, y);
    nudge(probe, -2.0 * eps);
    let minus = probe.mean_loss(x, y);
    nudge(probe, eps);
    (plus - minus) / (2.0 * eps)
}
