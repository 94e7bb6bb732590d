//! Static patch weighting with a one-hidden-layer perceptron over the
//! concatenated patch scores:
//!
//! `logits = W2 · relu(batchnorm(W1 · x + b1)) + b2`
//!
//! Trained with softmax cross-entropy and plain mini-batch gradient descent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{argmax, ScoreTensor, Split};

use super::subset::Predictions;

pub const DEFAULT_HIDDEN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalise with the statistics of the batch being evaluated.
    Train,
    /// Normalise with the running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub in_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    /// `hidden × in_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// `n_classes × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Weight of the previous running statistic in each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct ForwardCache {
    batch: usize,
    /// Normalised pre-activations, `batch × hidden`.
    xhat: Vec<f64>,
    /// Batch-norm output before the ReLU.
    y: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(in_dim: usize, hidden: usize, n_classes: usize) -> Self {
        Self {
            in_dim,
            hidden,
            n_classes,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            gamma: vec![1.0; hidden],
            beta: vec![0.0; hidden],
            running_mean: vec![0.0; hidden],
            running_var: vec![1.0; hidden],
            w2: vec![0.0; n_classes * hidden],
            b2: vec![0.0; n_classes],
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation of both linear layers.
    pub fn init(in_dim: usize, hidden: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(in_dim, hidden, n_classes);
        let b1 = 1.0 / (in_dim.max(1) as f64).sqrt();
        let b2 = 1.0 / (hidden.max(1) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.gen_range(-b1..=b1));
        m.b1.iter_mut().for_each(|w| *w = rng.gen_range(-b1..=b1));
        m.w2.iter_mut().for_each(|w| *w = rng.gen_range(-b2..=b2));
        m.b2.iter_mut().for_each(|w| *w = rng.gen_range(-b2..=b2));
        m
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, usize, usize); 8] = [
            ("mlp w1", self.hidden * self.in_dim, self.w1.len()),
            ("mlp b1", self.hidden, self.b1.len()),
            ("mlp gamma", self.hidden, self.gamma.len()),
            ("mlp beta", self.hidden, self.beta.len()),
            ("mlp running mean", self.hidden, self.running_mean.len()),
            ("mlp running variance", self.hidden, self.running_var.len()),
            ("mlp w2", self.n_classes * self.hidden, self.w2.len()),
            ("mlp b2", self.n_classes, self.b2.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        if self.running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::Format(
                "batch-norm variance must be non-negative".into(),
            ));
        }
        if self
            .parameters()
            .iter()
            .flat_map(|p| p.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Format("mlp parameters must be finite".into()));
        }
        Ok(())
    }

    /// Trainable parameter blocks in a fixed order: w1, b1, gamma, beta, w2, b2.
    pub fn parameters(&self) -> [&Vec<f64>; 6] {
        [
            &self.w1,
            &self.b1,
            &self.gamma,
            &self.beta,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.gamma,
            &mut self.beta,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn check_batch(&self, xs: &[f64]) -> Result<usize> {
        if self.in_dim == 0 || !xs.len().is_multiple_of(self.in_dim) || xs.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "mlp input",
                expected: self.in_dim,
                found: xs.len(),
            });
        }
        Ok(xs.len() / self.in_dim)
    }

    fn forward_cached(&self, xs: &[f64], mode: BatchNormMode) -> Result<ForwardCache> {
        let batch = self.check_batch(xs)?;
        let (h, c, d) = (self.hidden, self.n_classes, self.in_dim);
        let mut z = vec![0.0; batch * h];
        for (x, zrow) in xs.chunks(d).zip(z.chunks_mut(h)) {
            for (u, zu) in zrow.iter_mut().enumerate() {
                let w = &self.w1[u * d..(u + 1) * d];
                *zu = self.b1[u] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; h];
                for zrow in z.chunks(h) {
                    mean.iter_mut().zip(zrow).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= batch as f64);
                let mut var = vec![0.0; h];
                for zrow in z.chunks(h) {
                    for ((s, v), m) in var.iter_mut().zip(zrow).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= batch as f64);
                (mean, var)
            }
            BatchNormMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();
        let mut xhat = z;
        let mut y = vec![0.0; batch * h];
        for (xrow, yrow) in xhat.chunks_mut(h).zip(y.chunks_mut(h)) {
            for u in 0..h {
                xrow[u] = (xrow[u] - mean[u]) * inv_std[u];
                yrow[u] = self.gamma[u] * xrow[u] + self.beta[u];
            }
        }
        let act: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
        let mut logits = vec![0.0; batch * c];
        for (arow, lrow) in act.chunks(h).zip(logits.chunks_mut(c)) {
            for (k, l) in lrow.iter_mut().enumerate() {
                let w = &self.w2[k * h..(k + 1) * h];
                *l = self.b2[k] + w.iter().zip(arow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(ForwardCache {
            batch,
            xhat,
            y,
            act,
            logits,
            mean,
            var,
            inv_std,
        })
    }

    /// Logits for a row-major batch `xs` (`batch × in_dim`).
    pub fn forward_batch(&self, xs: &[f64], mode: BatchNormMode) -> Result<Vec<f64>> {
        Ok(self.forward_cached(xs, mode)?.logits)
    }

    /// Mean softmax cross-entropy of the batch.
    pub fn loss(&self, xs: &[f64], labels: &[usize], mode: BatchNormMode) -> Result<f64> {
        let cache = self.forward_cached(xs, mode)?;
        self.check_labels(cache.batch, labels)?;
        Ok(cross_entropy(&cache.logits, labels, self.n_classes).0)
    }

    fn check_labels(&self, batch: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::DimensionMismatch {
                what: "mlp labels",
                expected: batch,
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::InvalidParameter(format!("label {bad} out of range")));
        }
        Ok(())
    }

    /// Train-mode loss and its gradient with respect to every trainable
    /// parameter, back-propagating through the batch statistics.
    pub fn loss_and_gradients(&self, xs: &[f64], labels: &[usize]) -> Result<(f64, MlpGradients)> {
        let cache = self.forward_cached(xs, BatchNormMode::Train)?;
        self.check_labels(cache.batch, labels)?;
        let (loss, dlogits) = cross_entropy(&cache.logits, labels, self.n_classes);
        Ok((loss, self.backward(xs, &cache, &dlogits)))
    }

    fn backward(&self, xs: &[f64], cache: &ForwardCache, dlogits: &[f64]) -> MlpGradients {
        let (h, c, d, n) = (self.hidden, self.n_classes, self.in_dim, cache.batch);
        let mut g = MlpGradients {
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            gamma: vec![0.0; h],
            beta: vec![0.0; h],
            w2: vec![0.0; c * h],
            b2: vec![0.0; c],
        };
        let mut dy = vec![0.0; n * h];
        for b in 0..n {
            let dl = &dlogits[b * c..(b + 1) * c];
            let act = &cache.act[b * h..(b + 1) * h];
            for (k, &dk) in dl.iter().enumerate() {
                g.b2[k] += dk;
                for (gw, a) in g.w2[k * h..(k + 1) * h].iter_mut().zip(act) {
                    *gw += dk * a;
                }
            }
            let dyrow = &mut dy[b * h..(b + 1) * h];
            for (u, dyu) in dyrow.iter_mut().enumerate() {
                if cache.y[b * h + u] > 0.0 {
                    *dyu = (0..c).map(|k| dl[k] * self.w2[k * h + u]).sum();
                }
            }
        }
        // batch norm: dz = inv_std / n * (n·dxhat - Σdxhat - xhat·Σ(dxhat·xhat))
        let mut sum_dxhat = vec![0.0; h];
        let mut sum_dxhat_xhat = vec![0.0; h];
        for b in 0..n {
            for u in 0..h {
                let i = b * h + u;
                g.gamma[u] += dy[i] * cache.xhat[i];
                g.beta[u] += dy[i];
                let dxhat = dy[i] * self.gamma[u];
                sum_dxhat[u] += dxhat;
                sum_dxhat_xhat[u] += dxhat * cache.xhat[i];
            }
        }
        let nf = n as f64;
        for b in 0..n {
            let x = &xs[b * d..(b + 1) * d];
            for u in 0..h {
                let i = b * h + u;
                let dxhat = dy[i] * self.gamma[u];
                let dz = cache.inv_std[u] / nf
                    * (nf * dxhat - sum_dxhat[u] - cache.xhat[i] * sum_dxhat_xhat[u]);
                if dz != 0.0 {
                    g.b1[u] += dz;
                    for (gw, xv) in g.w1[u * d..(u + 1) * d].iter_mut().zip(x) {
                        *gw += dz * xv;
                    }
                }
            }
        }
        g
    }

    fn update_running_stats(&mut self, mean: &[f64], var: &[f64], batch: usize) {
        let m = self.bn_momentum;
        let unbias = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        for u in 0..self.hidden {
            self.running_mean[u] = m * self.running_mean[u] + (1.0 - m) * mean[u];
            self.running_var[u] = m * self.running_var[u] + (1.0 - m) * var[u] * unbias;
        }
    }

    /// One gradient-descent step on the batch; returns the loss before it.
    pub fn sgd_step(&mut self, xs: &[f64], labels: &[usize], learning_rate: f64) -> Result<f64> {
        let cache = self.forward_cached(xs, BatchNormMode::Train)?;
        self.check_labels(cache.batch, labels)?;
        let (loss, dlogits) = cross_entropy(&cache.logits, labels, self.n_classes);
        let grads = self.backward(xs, &cache, &dlogits);
        let blocks = [
            grads.w1,
            grads.b1,
            grads.gamma,
            grads.beta,
            grads.w2,
            grads.b2,
        ];
        for (param, grad) in self.parameters_mut().into_iter().zip(blocks.iter()) {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= learning_rate * g;
            }
        }
        self.update_running_stats(&cache.mean, &cache.var, cache.batch);
        Ok(loss)
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &[f64], labels: &[usize], n_classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, grow), &label) in logits
        .chunks(n_classes)
        .zip(grad.chunks_mut(n_classes))
        .zip(labels)
    {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[label];
        for (k, (g, v)) in grow.iter_mut().zip(row).enumerate() {
            *g = ((v - max).exp() / z - f64::from(u8::from(k == label))) / n;
        }
    }
    (loss / n, grad)
}

/// Logits for one input vector.
pub fn mlp_forward(model: &MlpModel, x: &[f64], mode: BatchNormMode) -> Result<Vec<f64>> {
    if x.len() != model.in_dim {
        return Err(Error::DimensionMismatch {
            what: "mlp input",
            expected: model.in_dim,
            found: x.len(),
        });
    }
    model.forward_batch(x, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpHyperParams {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Fraction of train-split images held out to pick the best epoch.
    pub validation_fraction: f64,
}

impl Default for MlpHyperParams {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 100,
            seed: 0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            validation_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the per-batch losses seen during the epoch.
    pub train_loss: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTraining {
    pub model: MlpModel,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were returned (1-based).
    pub selected_epoch: usize,
}

/// Concatenated patch scores for `images`, row-major.
pub fn feature_rows(scores: &ScoreTensor, images: &[usize]) -> Vec<f64> {
    images
        .iter()
        .flat_map(|&i| scores.image_row(i).iter().map(|&v| f64::from(v)))
        .collect()
}

/// Trains on the train-split images of `scores`. With a validation fraction
/// the model from the epoch with the best held-out accuracy is returned
/// (earliest on ties); otherwise the final model.
pub fn mlp_train(scores: &ScoreTensor, hp: &MlpHyperParams) -> Result<MlpTraining> {
    if hp.batch_size == 0 || hp.hidden == 0 {
        return Err(Error::InvalidParameter(
            "batch size and hidden width must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&hp.validation_fraction) {
        return Err(Error::InvalidParameter(
            "validation fraction must lie in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut train = scores.images_in(Split::Train);
    let mut validation = Vec::new();
    if hp.validation_fraction > 0.0 {
        train.shuffle(&mut rng);
        let n_val = ((train.len() as f64) * hp.validation_fraction).round() as usize;
        validation = train.split_off(train.len() - n_val);
        validation.sort_unstable();
        if validation.is_empty() {
            return Err(Error::DegenerateSplit(
                "validation fraction leaves no held-out images".into(),
            ));
        }
    }
    if train.is_empty() {
        return Err(Error::DegenerateSplit(
            "no train-split images to fit".into(),
        ));
    }
    let in_dim = scores.n_patches() * scores.n_classes();
    let mut model = MlpModel::init(in_dim, hp.hidden, scores.n_classes(), &mut rng);
    model.bn_momentum = hp.bn_momentum;
    model.bn_eps = hp.bn_eps;

    let val_x = feature_rows(scores, &validation);
    let val_y: Vec<usize> = validation.iter().map(|&i| scores.label(i)).collect();
    let mut best: Option<(f64, usize, MlpModel)> = None;
    let mut history = Vec::with_capacity(hp.epochs);
    for epoch in 1..=hp.epochs {
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in train.chunks(hp.batch_size) {
            let xs = feature_rows(scores, batch);
            let ys: Vec<usize> = batch.iter().map(|&i| scores.label(i)).collect();
            loss_sum += model.sgd_step(&xs, &ys, hp.learning_rate)?;
            batches += 1;
        }
        let validation_accuracy = if validation.is_empty() {
            None
        } else {
            Some(accuracy_of(&model, &val_x, &val_y)?)
        };
        if let Some(acc) = validation_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            validation_accuracy,
        });
    }
    let (model, selected_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, hp.epochs),
    };
    Ok(MlpTraining {
        model,
        history,
        selected_epoch,
    })
}

fn accuracy_of(model: &MlpModel, xs: &[f64], labels: &[usize]) -> Result<f64> {
    let logits = model.forward_batch(xs, BatchNormMode::Eval)?;
    let hits = logits
        .chunks(model.n_classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Eval-mode predictions for every image in `scores`.
pub fn mlp_predict(model: &MlpModel, scores: &ScoreTensor) -> Result<Predictions> {
    let in_dim = scores.n_patches() * scores.n_classes();
    if in_dim != model.in_dim || scores.n_classes() != model.n_classes {
        return Err(Error::DimensionMismatch {
            what: "mlp input",
            expected: model.in_dim,
            found: in_dim,
        });
    }
    let mut predicted = Vec::with_capacity(scores.n_images());
    let all: Vec<usize> = (0..scores.n_images()).collect();
    for chunk in all.chunks(256) {
        let logits = model.forward_batch(&feature_rows(scores, chunk), BatchNormMode::Eval)?;
        predicted.extend(logits.chunks(model.n_classes).map(argmax));
    }
    Ok(Predictions::from_predicted(
        predicted,
        scores.labels().iter().map(|&l| l as usize),
    ))
}
