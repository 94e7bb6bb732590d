//! Input-dependent patch weighting: `G(x) = normalize(top_k(H(x)))` with a
//! linear `H(x) = Wᵀx + b`. Only the `k` largest logits keep a non-zero
//! weight; the class scores are the weighted sum of patch score vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{argmax, ScoreTensor, Split};

use super::subset::Predictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateNormalization {
    /// Softmax over the kept logits.
    #[default]
    Softmax,
    /// Sigmoid of each kept logit, rescaled to sum to one.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateModel {
    pub n_features: usize,
    pub n_patches: usize,
    /// `n_features × n_patches`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub k: usize,
    pub normalization: GateNormalization,
}

impl GateModel {
    pub fn zeros(n_features: usize, n_patches: usize, k: usize) -> Result<Self> {
        Self::new(
            n_features,
            n_patches,
            vec![0.0; n_features * n_patches],
            vec![0.0; n_patches],
            k,
            GateNormalization::Softmax,
        )
    }

    pub fn new(
        n_features: usize,
        n_patches: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        k: usize,
        normalization: GateNormalization,
    ) -> Result<Self> {
        if k == 0 || k > n_patches {
            return Err(Error::InvalidParameter(format!(
                "gate k={k} outside 1..={n_patches}"
            )));
        }
        if weights.len() != n_features * n_patches {
            return Err(Error::DimensionMismatch {
                what: "gate weights",
                expected: n_features * n_patches,
                found: weights.len(),
            });
        }
        if bias.len() != n_patches {
            return Err(Error::DimensionMismatch {
                what: "gate bias",
                expected: n_patches,
                found: bias.len(),
            });
        }
        Ok(Self {
            n_features,
            n_patches,
            weights,
            bias,
            k,
            normalization,
        })
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                what: "gate features",
                expected: self.n_features,
                found: features.len(),
            });
        }
        let mut h = self.bias.clone();
        for (x, row) in features.iter().zip(self.weights.chunks(self.n_patches)) {
            if *x != 0.0 {
                for (hp, w) in h.iter_mut().zip(row) {
                    *hp += x * w;
                }
            }
        }
        Ok(h)
    }

    /// Patch weights: non-zero on at most `k` patches, summing to one.
    pub fn gate_weights(&self, features: &[f64]) -> Result<Vec<f64>> {
        let h = self.logits(features)?;
        Ok(normalize_top_k(&h, self.k, self.normalization))
    }
}

/// Indices of the `k` largest values; ties keep the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn normalize_top_k(h: &[f64], k: usize, normalization: GateNormalization) -> Vec<f64> {
    let kept = top_k_indices(h, k);
    let mut w = vec![0.0; h.len()];
    match normalization {
        GateNormalization::Softmax => {
            let max = kept.iter().map(|&p| h[p]).fold(f64::NEG_INFINITY, f64::max);
            for &p in &kept {
                w[p] = (h[p] - max).exp();
            }
        }
        GateNormalization::Sigmoid => {
            for &p in &kept {
                w[p] = sigmoid(h[p]);
            }
        }
    }
    let z: f64 = kept.iter().map(|&p| w[p]).sum();
    for &p in &kept {
        w[p] /= z;
    }
    w
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn weighted_class_scores(weights: &[f64], scores_row: &[f32], n_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; n_classes];
    for (w, patch) in weights.iter().zip(scores_row.chunks(n_classes)) {
        if *w != 0.0 {
            for (yc, &s) in y.iter_mut().zip(patch) {
                *yc += w * f64::from(s);
            }
        }
    }
    y
}

/// Class with the highest gated score for one image. `scores_row` is the
/// image's concatenated patch scores.
pub fn gate_predict(
    model: &GateModel,
    features: &[f64],
    scores_row: &[f32],
    n_classes: usize,
) -> Result<usize> {
    if n_classes == 0 || scores_row.len() != model.n_patches * n_classes {
        return Err(Error::DimensionMismatch {
            what: "gate score row",
            expected: model.n_patches * n_classes,
            found: scores_row.len(),
        });
    }
    let w = model.gate_weights(features)?;
    Ok(argmax(&weighted_class_scores(&w, scores_row, n_classes)))
}

/// Per-image gate features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_features: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    /// The default gate input: each image's concatenated patch scores.
    pub fn from_scores(scores: &ScoreTensor) -> Self {
        let rows = (0..scores.n_images())
            .map(|i| scores.image_row(i).iter().map(|&v| f64::from(v)).collect())
            .collect();
        Self {
            n_features: scores.n_patches() * scores.n_classes(),
            rows,
        }
    }

    pub fn constant(n_images: usize, n_features: usize, value: f64) -> Self {
        Self {
            n_features,
            rows: vec![vec![value; n_features]; n_images],
        }
    }
}

pub fn gate_predict_all(
    model: &GateModel,
    features: &FeatureMatrix,
    scores: &ScoreTensor,
) -> Result<Predictions> {
    if features.rows.len() != scores.n_images() {
        return Err(Error::DimensionMismatch {
            what: "gate feature rows",
            expected: scores.n_images(),
            found: features.rows.len(),
        });
    }
    let predicted = (0..scores.n_images())
        .map(|i| {
            gate_predict(
                model,
                &features.rows[i],
                scores.image_row(i),
                scores.n_classes(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Predictions::from_predicted(
        predicted,
        scores.labels().iter().map(|&l| l as usize),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateTrainParams {
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Half-width of the uniform initialisation of `W`.
    pub init_scale: f64,
    pub normalization: GateNormalization,
}

impl GateTrainParams {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            learning_rate: 1e-2,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            init_scale: 1e-3,
            normalization: GateNormalization::Softmax,
        }
    }
}

/// Cross-entropy of `softmax(y)` where `y = Σ_p g_p s_p`, and its gradient
/// with respect to the gate logits (zero outside the kept set).
pub(crate) fn gate_loss_and_logit_grad(
    h: &[f64],
    k: usize,
    normalization: GateNormalization,
    scores_row: &[f32],
    n_classes: usize,
    label: usize,
) -> (f64, Vec<f64>) {
    let g = normalize_top_k(h, k, normalization);
    let y = weighted_class_scores(&g, scores_row, n_classes);
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let loss = -(exp[label] / z).ln();
    let dy: Vec<f64> = exp
        .iter()
        .enumerate()
        .map(|(c, e)| e / z - f64::from(u8::from(c == label)))
        .collect();
    let dg: Vec<f64> = scores_row
        .chunks(n_classes)
        .map(|patch| patch.iter().zip(&dy).map(|(&s, d)| f64::from(s) * d).sum())
        .collect();
    let kept: Vec<usize> = (0..h.len()).filter(|&p| g[p] != 0.0).collect();
    let mean_dg: f64 = kept.iter().map(|&p| g[p] * dg[p]).sum();
    let mut dh = vec![0.0; h.len()];
    match normalization {
        GateNormalization::Softmax => {
            for &p in &kept {
                dh[p] = g[p] * (dg[p] - mean_dg);
            }
        }
        GateNormalization::Sigmoid => {
            let a_sum: f64 = kept.iter().map(|&p| sigmoid(h[p])).sum();
            for &p in &kept {
                let a = sigmoid(h[p]);
                dh[p] = (dg[p] - mean_dg) / a_sum * a * (1.0 - a);
            }
        }
    }
    (loss, dh)
}

/// Mini-batch gradient descent on the gate's linear layer, using the
/// train-split images. The weighted patch scores feed a softmax
/// cross-entropy.
pub fn gate_train(
    scores: &ScoreTensor,
    features: &FeatureMatrix,
    params: &GateTrainParams,
) -> Result<GateModel> {
    use rand::seq::SliceRandom;

    let n_patches = scores.n_patches();
    let nf = features.n_features;
    if features.rows.len() != scores.n_images() {
        return Err(Error::DimensionMismatch {
            what: "gate feature rows",
            expected: scores.n_images(),
            found: features.rows.len(),
        });
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch size must be positive".into(),
        ));
    }
    let mut train = scores.images_in(Split::Train);
    if train.is_empty() {
        return Err(Error::DegenerateSplit(
            "gate training needs train-split images".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let weights = (0..nf * n_patches)
        .map(|_| rng.gen_range(-params.init_scale..=params.init_scale))
        .collect();
    let mut model = GateModel::new(
        nf,
        n_patches,
        weights,
        vec![0.0; n_patches],
        params.k,
        params.normalization,
    )?;

    let c = scores.n_classes();
    for _ in 0..params.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(params.batch_size) {
            let mut grad_w = vec![0.0; nf * n_patches];
            let mut grad_b = vec![0.0; n_patches];
            for &i in batch {
                let x = &features.rows[i];
                let h = model.logits(x)?;
                let (_, dh) = gate_loss_and_logit_grad(
                    &h,
                    model.k,
                    model.normalization,
                    scores.image_row(i),
                    c,
                    scores.label(i),
                );
                for (f, &xf) in x.iter().enumerate() {
                    if xf != 0.0 {
                        for (gw, d) in grad_w[f * n_patches..(f + 1) * n_patches]
                            .iter_mut()
                            .zip(&dh)
                        {
                            *gw += xf * d;
                        }
                    }
                }
                for (gb, d) in grad_b.iter_mut().zip(&dh) {
                    *gb += d;
                }
            }
            let step = params.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad_w) {
                *w -= step * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad_b) {
                *b -= step * g;
            }
        }
    }
    Ok(model)
}
