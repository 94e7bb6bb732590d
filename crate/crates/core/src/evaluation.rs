//! Keypoint PCK, per-patch accuracy and the per-image difficulty histogram.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::PoseAnnotation;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scores::{argmax, ScoreTensor};

pub const DEFAULT_PCK_C: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PckConfig {
    pub c: f64,
    pub box_w: f64,
    pub box_h: f64,
}

impl PckConfig {
    pub fn new(c: f64, box_w: f64, box_h: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "PCK factor c must be positive, got {c}"
            )));
        }
        if !(box_w > 0.0 && box_h > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bounding box {box_w}x{box_h} must be positive"
            )));
        }
        Ok(Self { c, box_w, box_h })
    }

    pub fn threshold(&self) -> f64 {
        self.c * self.box_w.max(self.box_h)
    }
}

/// `|pred - gt| <= c * max(box_w, box_h)`.
pub fn pck_correct(pred: Point2, gt: Point2, cfg: &PckConfig) -> bool {
    pred.distance(gt) <= cfg.threshold()
}

/// Ground truth for one image: keypoints plus bounding-box size.
#[derive(Debug, Clone, PartialEq)]
pub struct PckTruth {
    pub pose: PoseAnnotation,
    pub box_w: f64,
    pub box_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub names: Vec<String>,
    pub correct: Vec<usize>,
    pub evaluated: Vec<usize>,
}

impl PckReport {
    /// Percentage per keypoint; `None` where no visible ground truth exists.
    pub fn per_keypoint(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.evaluated)
            .map(|(&c, &n)| (n > 0).then(|| 100.0 * c as f64 / n as f64))
            .collect()
    }

    /// Correct instances over evaluated instances, across all keypoints.
    pub fn overall(&self) -> Option<f64> {
        let n: usize = self.evaluated.iter().sum();
        let c: usize = self.correct.iter().sum();
        (n > 0).then(|| 100.0 * c as f64 / n as f64)
    }

    /// Mean of the per-keypoint percentages that are defined.
    pub fn overall_macro(&self) -> Option<f64> {
        let rows: Vec<f64> = self.per_keypoint().into_iter().flatten().collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    pub fn table(&self) -> PckTable {
        PckTable {
            names: self.names.clone(),
            values: self.per_keypoint(),
            overall: self.overall(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("keypoint\tpck\tcorrect\tevaluated\n");
        for ((name, pct), (c, n)) in self
            .names
            .iter()
            .zip(self.per_keypoint())
            .zip(self.correct.iter().zip(&self.evaluated))
        {
            let _ = writeln!(out, "{name}\t{}\t{c}\t{n}", fmt_pct(pct));
        }
        let total_c: usize = self.correct.iter().sum();
        let total_n: usize = self.evaluated.iter().sum();
        let _ = writeln!(
            out,
            "Overall\t{}\t{total_c}\t{total_n}",
            fmt_pct(self.overall())
        );
        let _ = writeln!(
            out,
            "Overall (macro)\t{}\t\t",
            fmt_pct(self.overall_macro())
        );
        out
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.1}"))
}

/// Keypoint PCK values laid out like the usual comparison table: columns in
/// schema order, eight per block, with the overall value last.
#[derive(Debug, Clone, PartialEq)]
pub struct PckTable {
    pub names: Vec<String>,
    pub values: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

impl PckTable {
    pub const COLUMNS_PER_BLOCK: usize = 8;

    pub fn render(&self, row_label: &str) -> String {
        let mut cells: Vec<(String, String)> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.replace(' ', "-"), fmt_pct(*v)))
            .collect();
        cells.push(("Overall".to_string(), fmt_pct(self.overall)));
        let label_w = row_label.len();
        let mut out = String::new();
        for block in cells.chunks(Self::COLUMNS_PER_BLOCK) {
            let widths: Vec<usize> = block.iter().map(|(n, v)| n.len().max(v.len())).collect();
            let mut header = format!("{:label_w$}", "");
            let mut row = row_label.to_string();
            for ((name, value), w) in block.iter().zip(&widths) {
                let _ = write!(header, " | {name:>w$}");
                let _ = write!(row, " | {value:>w$}");
            }
            let _ = writeln!(out, "{header}");
            let _ = writeln!(out, "{}", "-".repeat(header.len()));
            let _ = writeln!(out, "{row}");
            let _ = writeln!(out);
        }
        out
    }
}

/// Per-keypoint PCK over images where that ground-truth keypoint is visible.
/// `preds` and `truth` must cover the same image ids.
pub fn pck_report(
    names: &[String],
    preds: &BTreeMap<String, Vec<Point2>>,
    truth: &BTreeMap<String, PckTruth>,
    c: f64,
) -> Result<PckReport> {
    if let Some(id) = preds.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::MismatchedIds(format!(
            "prediction for unknown image {id}"
        )));
    }
    if let Some(id) = truth.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::MismatchedIds(format!(
            "no prediction for image {id}"
        )));
    }
    let n = names.len();
    let per_image = preds
        .par_iter()
        .map(|(id, pred)| {
            let gt = &truth[id];
            if pred.len() != n || gt.pose.keypoints.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "keypoints per image",
                    expected: n,
                    found: if pred.len() != n {
                        pred.len()
                    } else {
                        gt.pose.keypoints.len()
                    },
                });
            }
            let cfg = PckConfig::new(c, gt.box_w, gt.box_h)?;
            Ok(gt
                .pose
                .keypoints
                .iter()
                .zip(pred)
                .map(|(g, p)| g.visible.then(|| pck_correct(*p, g.point(), &cfg)))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut correct = vec![0; n];
    let mut evaluated = vec![0; n];
    for outcomes in per_image {
        for (k, outcome) in outcomes.into_iter().enumerate() {
            if let Some(ok) = outcome {
                evaluated[k] += 1;
                correct[k] += usize::from(ok);
            }
        }
    }
    Ok(PckReport {
        names: names.to_vec(),
        correct,
        evaluated,
    })
}

/// For each patch, the fraction of images whose argmax class is the label.
pub fn patch_accuracy(scores: &ScoreTensor) -> Vec<f64> {
    let n = scores.n_images();
    (0..scores.n_patches())
        .map(|p| {
            let hits = (0..n)
                .filter(|&i| argmax(scores.patch_scores(i, p)) == scores.label(i))
                .count();
            if n == 0 {
                0.0
            } else {
                hits as f64 / n as f64
            }
        })
        .collect()
}

/// Bucket `k` counts images on which exactly `k` patches predict the label.
pub fn difficulty_histogram(scores: &ScoreTensor) -> Vec<usize> {
    let mut buckets = vec![0; scores.n_patches() + 1];
    for i in 0..scores.n_images() {
        let correct = (0..scores.n_patches())
            .filter(|&p| argmax(scores.patch_scores(i, p)) == scores.label(i))
            .count();
        buckets[correct] += 1;
    }
    buckets
}

pub fn histogram_csv(buckets: &[usize]) -> String {
    let mut out = String::from("bucket,count\n");
    for (k, c) in buckets.iter().enumerate() {
        let _ = writeln!(out, "{k},{c}");
    }
    out
}
