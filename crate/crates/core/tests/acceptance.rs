//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pairs::aggregate::subset::binomial;
use pairs::aggregate::{
    average_predict, beam_search_subsets, brute_force_best_subset, gate_predict_all, BatchNormMode,
    FeatureMatrix, GateModel, GateNormalization, MlpHyperParams, MlpModel, Subset,
    DEFAULT_SUBSET_CAP,
};
use pairs::dataset::{load_cub, write_cub, Keypoint, PoseAnnotation};
use pairs::evaluation::{difficulty_histogram, pck_report, PckTruth};
use pairs::geometry::{pair_rectangle, patch_transform, warp_patch, Image, WarpOptions};
use pairs::posetensor::PoseTensor;
use pairs::schema::{cub_schema, enumerate_raw_pairs, merge_symmetric};
use pairs::{KeypointSchema, PatchSize, Point2, ScoreTensor, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "geometry exactness",
            Some(Duration::from_secs(1)),
            geometry_exactness,
        ),
        (
            "pose invariance",
            Some(Duration::from_secs(30)),
            pose_invariance,
        ),
        ("combinatorics", Some(Duration::from_secs(1)), combinatorics),
        (
            "beam/oracle equivalence",
            Some(Duration::from_secs(120)),
            beam_oracle_equivalence,
        ),
        ("gate reductions", None, gate_reductions),
        (
            "mlp gradients and training",
            None,
            mlp_gradients_and_training,
        ),
        ("pck oracle", None, pck_oracle),
        ("format round-trips", None, format_round_trips),
        ("difficulty histogram", None, difficulty),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(limit)) if elapsed > *limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} {name} ({elapsed:.2?}): {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn geometry_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let size = PatchSize::default();
    let (w, h) = (f64::from(size.width), f64::from(size.height));
    let mut worst_corner = 0.0f64;
    let mut worst_map = 0.0f64;
    for _ in 0..1000 {
        let p_i = Point2::new(rng.gen_range(-500.0..1500.0), rng.gen_range(-500.0..1500.0));
        let p_j = Point2::new(rng.gen_range(-500.0..1500.0), rng.gen_range(-500.0..1500.0));
        let d = ((p_j.x - p_i.x).powi(2) + (p_j.y - p_i.y).powi(2)).sqrt();
        let (rx, ry) = ((p_j.x - p_i.x) / d, (p_j.y - p_i.y) / d);
        let (tx, ty) = (-ry, rx);
        let hh = d / 2.0;
        let expected = [
            (p_i.x - hh * rx + hh * tx, p_i.y - hh * ry + hh * ty),
            (p_j.x + hh * rx - hh * tx, p_j.y + hh * ry - hh * ty),
            (p_i.x - hh * rx - hh * tx, p_i.y - hh * ry - hh * ty),
            (p_j.x + hh * rx + hh * tx, p_j.y + hh * ry + hh * ty),
        ];
        let got = pair_rectangle(p_i, p_j).map_err(|e| e.to_string())?;
        for (g, (ex, ey)) in got.iter().zip(expected) {
            let rel = (g.x - ex).abs().max((g.y - ey).abs()) / ex.abs().max(ey.abs()).max(1.0);
            worst_corner = worst_corner.max(rel);
        }
        let spec = patch_transform(p_i, p_j, size).map_err(|e| e.to_string())?;
        let a = spec.transform.apply(p_i);
        let b = spec.transform.apply(p_j);
        worst_map = worst_map
            .max(a.distance(Point2::new(w / 4.0, h / 2.0)))
            .max(b.distance(Point2::new(3.0 * w / 4.0, h / 2.0)));
    }
    ensure(worst_corner <= 1e-9, || {
        format!("corner relative error {worst_corner:e}")
    })?;
    ensure(worst_map <= 1e-6, || {
        format!("anchor mapping error {worst_map:e} px")
    })?;
    Ok(format!(
        "1000 pairs, max corner rel err {worst_corner:.1e}, max anchor err {worst_map:.1e} px"
    ))
}

/// Smooth test pattern in object coordinates.
fn pattern(k: usize, c: usize, x: f64, y: f64) -> f32 {
    let kf = k as f64;
    let cf = c as f64;
    let a = (2.0 * std::f64::consts::PI / (48.0 + 7.0 * kf)) * (x * (1.0 + 0.1 * cf) + 0.6 * y);
    let b = (2.0 * std::f64::consts::PI / (61.0 + 5.0 * cf)) * (0.8 * y - 0.3 * x) + kf;
    (0.5 + 0.25 * a.sin() + 0.2 * b.cos() * (0.3 * cf + 0.7)) as f32
}

fn pose_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let size = PatchSize::default();
    let base = 160u32;
    let centre = Point2::new(f64::from(base) / 2.0, f64::from(base) / 2.0);
    let mut worst = 0.0f64;
    for k in 0..5 {
        let img = Image::from_fn(base, base, 3, |x, y, c| {
            pattern(k, c, f64::from(x) + 0.5, f64::from(y) + 0.5)
        });
        let mid = centre + Point2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let half = rng.gen_range(20.0..25.0);
        let dir = Point2::new(angle.cos(), angle.sin());
        let (p_i, p_j) = (mid - half * dir, mid + half * dir);
        let reference = warp_patch(
            &img,
            &patch_transform(p_i, p_j, size).unwrap(),
            WarpOptions::default(),
        );

        for deg in [30.0f64, 90.0, 137.0] {
            for scale in [0.5f64, 2.0] {
                let canvas = (f64::from(base) * scale * 1.5).ceil() as u32;
                let canvas_centre = Point2::new(f64::from(canvas) / 2.0, f64::from(canvas) / 2.0);
                let theta = deg.to_radians();
                let (s, c) = theta.sin_cos();
                let fwd = |p: Point2| {
                    let q = p - centre;
                    canvas_centre
                        + Point2::new(scale * (c * q.x - s * q.y), scale * (s * q.x + c * q.y))
                };
                let inv = |p: Point2| {
                    let q = p - canvas_centre;
                    centre + Point2::new((c * q.x + s * q.y) / scale, (-s * q.x + c * q.y) / scale)
                };
                let moved = Image::from_fn(canvas, canvas, 3, |x, y, ch| {
                    let o = inv(Point2::new(f64::from(x) + 0.5, f64::from(y) + 0.5));
                    pattern(k, ch, o.x, o.y)
                });
                let spec = patch_transform(fwd(p_i), fwd(p_j), size).unwrap();
                let patch = warp_patch(&moved, &spec, WarpOptions::default());
                let mad = reference
                    .data()
                    .iter()
                    .zip(patch.data())
                    .map(|(a, b)| f64::from((a - b).abs()))
                    .sum::<f64>()
                    / reference.data().len() as f64;
                ensure(mad <= 0.02, || {
                    format!("image {k}, {deg} deg, scale {scale}: mean abs diff {mad:.4}")
                })?;
                worst = worst.max(mad);
            }
        }
    }
    Ok(format!(
        "5 images x 6 poses, worst mean abs diff {worst:.4}"
    ))
}

fn combinatorics() -> Check {
    let cub = cub_schema();
    let raw = enumerate_raw_pairs(&cub);
    let merged = merge_symmetric(&cub, &raw);
    ensure(raw.len() == 105, || format!("CUB raw pairs {}", raw.len()))?;
    ensure(merged.len() == 69, || {
        format!("CUB hybrid classes {}", merged.len())
    })?;
    let covered: usize = merged.iter().map(|c| c.member_pairs.len()).sum();
    ensure(covered == 105, || {
        format!("hybrid classes cover {covered} raw pairs")
    })?;

    let names: Vec<String> = (0..11).map(|i| format!("k{i}")).collect();
    let eleven = KeypointSchema::new(names, Vec::new()).map_err(|e| e.to_string())?;
    let raw11 = enumerate_raw_pairs(&eleven).len();
    ensure(raw11 == 55, || format!("11-keypoint raw pairs {raw11}"))?;
    Ok("CUB 105 -> 69, 11 keypoints -> 55".into())
}

fn beam_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let width = binomial(8, 4) as usize;
    let mut compared = 0;
    for t in 0..50 {
        let n_patches = rng.gen_range(1..=8);
        let n_classes = rng.gen_range(2..=5);
        let n_images = rng.gen_range(1..=40);
        let scores = common::random_scores(&mut rng, n_images, n_patches, n_classes);
        let steps = beam_search_subsets(&scores, width, n_patches, Split::Train)
            .map_err(|e| e.to_string())?;
        ensure(steps.len() == n_patches, || {
            format!("tensor {t}: {} beam steps", steps.len())
        })?;
        for (k, step) in (1..=n_patches).zip(&steps) {
            let (_, acc) = brute_force_best_subset(&scores, k, Split::Train, DEFAULT_SUBSET_CAP)
                .map_err(|e| e.to_string())?;
            ensure(step.objective_accuracy == acc, || {
                format!(
                    "tensor {t}, k={k}: beam {} vs brute force {acc}",
                    step.objective_accuracy
                )
            })?;
            ensure(step.subset.len() == k, || {
                format!("tensor {t}, k={k}: subset size {}", step.subset.len())
            })?;
            compared += 1;
        }
    }
    Ok(format!(
        "50 tensors, {compared} (tensor, k) comparisons, beam width {width}"
    ))
}

fn gate_reductions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..20 {
        let n_patches = rng.gen_range(1..=10);
        let n_classes = rng.gen_range(2..=6);
        let n_images = rng.gen_range(1..=50);
        let scores = common::random_scores(&mut rng, n_images, n_patches, n_classes);
        let nf = rng.gen_range(1..=4);

        // Identical columns make every patch logit equal for constant features.
        let column: Vec<f64> = (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = column
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w, n_patches))
            .collect();
        let bias = vec![rng.gen_range(-1.0..1.0); n_patches];
        let model = GateModel::new(
            nf,
            n_patches,
            weights,
            bias,
            n_patches,
            GateNormalization::Softmax,
        )
        .map_err(|e| e.to_string())?;
        let constant = FeatureMatrix::constant(n_images, nf, rng.gen_range(-2.0..2.0));
        let gated = gate_predict_all(&model, &constant, &scores).map_err(|e| e.to_string())?;
        let avg = average_predict(&scores, &Subset::all(n_patches).unwrap())
            .map_err(|e| e.to_string())?;
        ensure(gated.predicted == avg.predicted, || {
            format!("tensor {t}: k=n differs from averaging")
        })?;

        let weights: Vec<f64> = (0..nf * n_patches)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let bias: Vec<f64> = (0..n_patches).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = FeatureMatrix {
            n_features: nf,
            rows: (0..n_images)
                .map(|_| (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        };
        let model = GateModel::new(
            nf,
            n_patches,
            weights.clone(),
            bias.clone(),
            1,
            GateNormalization::Softmax,
        )
        .map_err(|e| e.to_string())?;
        let gated = gate_predict_all(&model, &features, &scores).map_err(|e| e.to_string())?;
        for i in 0..n_images {
            let logits: Vec<f64> = (0..n_patches)
                .map(|p| {
                    bias[p]
                        + (0..nf)
                            .map(|f| features.rows[i][f] * weights[f * n_patches + p])
                            .sum::<f64>()
                })
                .collect();
            let chosen = first_argmax(&logits);
            let expected = first_argmax(scores.patch_scores(i, chosen));
            ensure(gated.predicted[i] == expected, || {
                format!("tensor {t}, image {i}: k=1 mismatch")
            })?;
        }
    }
    Ok("20 tensors: k=n matches averaging, k=1 matches the selected patch".into())
}

fn first_argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn mlp_gradients_and_training() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let step = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for m in 0..20 {
        let in_dim = rng.gen_range(1..=20);
        let hidden = rng.gen_range(1..=8);
        let n_classes = rng.gen_range(2..=5);
        let batch = rng.gen_range(3..=8);
        let mut model = MlpModel::init(in_dim, hidden, n_classes, &mut rng);
        model
            .gamma
            .iter_mut()
            .for_each(|g| *g = rng.gen_range(0.5..1.5));
        model
            .beta
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let xs: Vec<f64> = (0..batch * in_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let ys: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_classes)).collect();
        let (_, grads) = model
            .loss_and_gradients(&xs, &ys)
            .map_err(|e| e.to_string())?;
        let analytic = [
            &grads.w1,
            &grads.b1,
            &grads.gamma,
            &grads.beta,
            &grads.w2,
            &grads.b2,
        ];
        for (block, g) in analytic.iter().enumerate() {
            for e in 0..g.len() {
                let eval = |delta: f64| {
                    let mut probe = model.clone();
                    probe.parameters_mut()[block][e] += delta;
                    probe.loss(&xs, &ys, BatchNormMode::Train).unwrap()
                };
                let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                let rel = relative_error(g[e], numeric);
                ensure(rel <= 1e-4, || {
                    format!("model {m}, block {block}, entry {e}: analytic {} vs numeric {numeric} (rel {rel:e})", g[e])
                })?;
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }

    let scores = separable_scores(7);
    let hp = MlpHyperParams {
        hidden: 32,
        batch_size: 32,
        learning_rate: 0.05,
        epochs: 100,
        seed: 11,
        ..MlpHyperParams::default()
    };
    let first = pairs::aggregate::mlp_train(&scores, &hp).map_err(|e| e.to_string())?;
    let second = pairs::aggregate::mlp_train(&scores, &hp).map_err(|e| e.to_string())?;
    ensure(first.model == second.model, || {
        "training is not deterministic for a fixed seed".into()
    })?;
    let acc = pairs::aggregate::mlp_predict(&first.model, &scores)
        .map_err(|e| e.to_string())?
        .accuracy;
    ensure(acc >= 0.99, || {
        format!("train accuracy {acc:.4} after {} epochs", hp.epochs)
    })?;
    Ok(format!(
        "{checked} coordinates on 20 models, max rel err {worst:.1e}; separable data {:.1}% after {} epochs",
        acc * 100.0,
        hp.epochs
    ))
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true derivative is zero compare absolutely.
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// 3 classes, 10 patches, 300 train images; 8 patches score the true class
/// above every other class, 2 are pure noise.
fn separable_scores(seed: u64) -> ScoreTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_images, n_patches, n_classes) = (300, 10, 3);
    let labels: Vec<u32> = (0..n_images).map(|i| (i % n_classes) as u32).collect();
    let mut data = Vec::with_capacity(n_images * n_patches * n_classes);
    for &l in &labels {
        for p in 0..n_patches {
            for c in 0..n_classes {
                let noise: f32 = rng.gen_range(0.0..0.5);
                data.push(if p < 8 && c == l as usize {
                    noise + 0.5
                } else {
                    noise
                });
            }
        }
    }
    ScoreTensor::new(
        n_patches,
        n_classes,
        labels,
        vec![Split::Train; n_images],
        data,
    )
    .unwrap()
}

fn pck_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..100 {
        let n_images = rng.gen_range(1..=10);
        let n_kp = rng.gen_range(1..=5);
        let c = [0.05, 0.1, 0.2][rng.gen_range(0..3)];
        let names: Vec<String> = (0..n_kp).map(|k| format!("kp{k}")).collect();
        let mut preds = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for i in 0..n_images {
            let (bw, bh) = (rng.gen_range(5.0..60.0), rng.gen_range(5.0..60.0));
            let keypoints: Vec<Keypoint> = (0..n_kp)
                .map(|_| Keypoint {
                    x: rng.gen_range(0.0..100.0),
                    y: rng.gen_range(0.0..100.0),
                    visible: rng.gen_bool(0.8),
                })
                .collect();
            let reach = 2.0 * c * f64::max(bw, bh);
            let pred: Vec<Point2> = keypoints
                .iter()
                .map(|k| {
                    Point2::new(
                        k.x + rng.gen_range(-reach..reach),
                        k.y + rng.gen_range(-reach..reach),
                    )
                })
                .collect();
            let id = format!("img{i}");
            preds.insert(id.clone(), pred);
            truth.insert(
                id,
                PckTruth {
                    pose: PoseAnnotation { keypoints },
                    box_w: bw,
                    box_h: bh,
                },
            );
        }
        let report = pck_report(&names, &preds, &truth, c).map_err(|e| e.to_string())?;

        let mut correct = vec![0usize; n_kp];
        let mut evaluated = vec![0usize; n_kp];
        for (id, gt) in &truth {
            for (k, kp) in gt.pose.keypoints.iter().enumerate() {
                if !kp.visible {
                    continue;
                }
                evaluated[k] += 1;
                let p = preds[id][k];
                let dist = ((p.x - kp.x).powi(2) + (p.y - kp.y).powi(2)).sqrt();
                if dist <= c * f64::max(gt.box_w, gt.box_h) {
                    correct[k] += 1;
                }
            }
        }
        ensure(
            report.correct == correct && report.evaluated == evaluated,
            || {
                format!(
                    "instance {t}: report {:?}/{:?} vs oracle {correct:?}/{evaluated:?}",
                    report.correct, report.evaluated
                )
            },
        )?;
        let total: usize = evaluated.iter().sum();
        let expected_overall =
            (total > 0).then(|| 100.0 * correct.iter().sum::<usize>() as f64 / total as f64);
        let overall = report.overall();
        ensure(overall == expected_overall, || {
            format!("instance {t}: overall {overall:?} vs {expected_overall:?}")
        })?;
    }

    let names = vec!["beak".to_string()];
    let gt = |w: f64, h: f64| PckTruth {
        pose: PoseAnnotation {
            keypoints: vec![Keypoint {
                x: 10.0,
                y: 10.0,
                visible: true,
            }],
        },
        box_w: w,
        box_h: h,
    };
    for (pred, w, h, want) in [
        (Point2::new(13.0, 14.0), 50.0, 20.0, 1),
        (Point2::new(13.0, 14.0), 20.0, 50.0, 1),
        (Point2::new(13.0, 14.001), 50.0, 20.0, 0),
    ] {
        let preds = BTreeMap::from([("a".to_string(), vec![pred])]);
        let truth = BTreeMap::from([("a".to_string(), gt(w, h))]);
        let report = pck_report(&names, &preds, &truth, 0.1).map_err(|e| e.to_string())?;
        ensure(report.correct[0] == want, || {
            format!("boundary case {pred:?} box {w}x{h}")
        })?;
    }
    Ok("100 random instances match the naive loop; distance == threshold counts correct".into())
}

fn format_round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("cub");
    common::write_fixture(&root, 6, 8);
    let index = load_cub(&root).map_err(|e| e.to_string())?;
    let copy = dir.path().join("copy");
    write_cub(&index, &copy).map_err(|e| e.to_string())?;
    copy_dir(&root.join("images"), &copy.join("images"));
    let again = load_cub(&copy).map_err(|e| e.to_string())?;
    ensure(index == again, || {
        "CUB load -> write -> load changed the index".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (n, p, c) = (
            rng.gen_range(1..30),
            rng.gen_range(1..10),
            rng.gen_range(1..6),
        );
        let scores = common::random_scores(&mut rng, n, p, c);
        let mut buf = Vec::new();
        scores.write_to(&mut buf).map_err(|e| e.to_string())?;
        ensure(
            ScoreTensor::read_from(&buf[..]).map_err(|e| e.to_string())? == scores,
            || "score tensor round-trip".into(),
        )?;

        let (c, w, h) = (
            rng.gen_range(1..16),
            rng.gen_range(1..20),
            rng.gen_range(1..20),
        );
        let data: Vec<f32> = (0..c * w * h).map(|_| rng.gen()).collect();
        let tensor = PoseTensor::new(c, w, h, rng.gen_range(1..500), rng.gen_range(1..500), data)
            .map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        tensor.write_to(&mut buf).map_err(|e| e.to_string())?;
        ensure(
            PoseTensor::read_from(&buf[..]).map_err(|e| e.to_string())? == tensor,
            || "pose tensor round-trip".into(),
        )?;
    }

    let commands = cli_determinism(dir.path(), &root)?;
    Ok(format!("fixture, 20 score and 20 pose tensors round-trip; {commands} CLI invocations byte-identical"))
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn tree_contents(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(base).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Runs each invocation twice, substituting a fresh output directory for
/// `{out}`, and compares stdout and every written file.
fn cli_determinism(work: &Path, root: &Path) -> Result<usize, String> {
    let bin = env!("CARGO_BIN_EXE_pairs");
    let inputs = work.join("inputs");
    fs::create_dir_all(&inputs).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let index = load_cub(root).map_err(|e| e.to_string())?;
    let mut tensors = Vec::new();
    for rec in &index.records {
        let data: Vec<f32> = (0..15 * 8 * 6).map(|_| rng.gen()).collect();
        let t = PoseTensor::new(15, 8, 6, common::IMAGE_W, common::IMAGE_H, data).unwrap();
        let path = inputs.join(format!("{}.ptns", rec.id));
        t.save(&path).unwrap();
        tensors.push(path.display().to_string());
    }
    let scores = common::random_scores(&mut rng, 40, 6, 4);
    let scores_path = inputs.join("scores.pscr");
    scores.save(&scores_path).unwrap();
    let pred = inputs.join("pred.json");
    let output = Command::new(bin)
        .args(["decode", "--out", pred.to_str().unwrap(), "--tensor"])
        .args(&tensors)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(output.status.success(), || "decode failed".into())?;

    let root_s = root.display().to_string();
    let parts = root.join("parts/parts.txt").display().to_string();
    let scores_s = scores_path.display().to_string();
    let pred_s = pred.display().to_string();
    let mut decode_args = vec![
        "decode".to_string(),
        "--out".into(),
        "{out}/kp.json".into(),
        "--tensor".into(),
    ];
    decode_args.extend(tensors.iter().cloned());
    let invocations: Vec<Vec<String>> = vec![
        vec!["schema", "check", &parts],
        vec![
            "pairs",
            "enumerate",
            "--schema",
            &parts,
            "--merge-symmetric",
        ],
        vec![
            "extract", "--root", &root_s, "--schema", &parts, "--out", "{out}", "--size", "64x32",
        ],
        vec![
            "extract",
            "--root",
            &root_s,
            "--schema",
            &parts,
            "--out",
            "{out}",
            "--size",
            "32x16",
            "--policy",
            "visible-only",
            "--merge-symmetric",
            "--keypoints",
            &pred_s,
        ],
        vec!["pck", "--pred", &pred_s, "--gt", &root_s],
        vec![
            "pck", "--pred", &pred_s, "--gt", &root_s, "--c", "0.2", "--format", "tsv",
        ],
        vec!["aggregate", "avg", "--scores", &scores_s, "--k", "3"],
        vec![
            "aggregate",
            "beam",
            "--scores",
            &scores_s,
            "--beam-width",
            "4",
        ],
        vec![
            "aggregate",
            "gate",
            "--scores",
            &scores_s,
            "--k",
            "2",
            "--model-out",
            "{out}/gate.pmdl",
        ],
        vec![
            "aggregate",
            "mlp",
            "--scores",
            &scores_s,
            "--hidden",
            "16",
            "--epochs",
            "5",
            "--model-out",
            "{out}/mlp.pmdl",
        ],
        vec!["difficulty", "--scores", &scores_s],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .chain(std::iter::once(decode_args))
    .collect();

    for (n, args) in invocations.iter().enumerate() {
        let mut results = Vec::new();
        for run in 0..2 {
            let out = work.join(format!("run{n}_{run}"));
            fs::create_dir_all(&out).unwrap();
            let args: Vec<String> = args
                .iter()
                .map(|a| a.replace("{out}", out.to_str().unwrap()))
                .collect();
            let output = Command::new(bin)
                .args(&args)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(output.status.success(), || {
                format!(
                    "pairs {} failed: {}",
                    args.join(" "),
                    String::from_utf8_lossy(&output.stderr)
                )
            })?;
            results.push((output.stdout, tree_contents(&out)));
        }
        ensure(results[0] == results[1], || {
            format!("pairs {} is not deterministic", args.join(" "))
        })?;
    }
    Ok(invocations.len())
}

fn difficulty() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in 0..50 {
        let n_patches = rng.gen_range(1..=12);
        let n_images = rng.gen_range(1..=60);
        let n_classes = rng.gen_range(1..=5);
        let scores = common::random_scores(&mut rng, n_images, n_patches, n_classes);
        let hist = difficulty_histogram(&scores);
        ensure(hist.len() == n_patches + 1, || {
            format!("tensor {t}: {} buckets", hist.len())
        })?;
        ensure(hist.iter().sum::<usize>() == n_images, || {
            format!("tensor {t}: mass {}", hist.iter().sum::<usize>())
        })?;
    }

    // Image i has exactly i patches voting for its label (class 0).
    let mut data = Vec::new();
    for i in 0..3 {
        for p in 0..3 {
            data.extend(if p < i { [1.0f32, 0.0] } else { [0.0, 1.0] });
        }
    }
    let scores = ScoreTensor::new(3, 2, vec![0, 0, 0], vec![Split::Test; 3], data)
        .map_err(|e| e.to_string())?;
    let hist = difficulty_histogram(&scores);
    ensure(hist == vec![1, 1, 1, 0], || {
        format!("constructed example gave {hist:?}")
    })?;
    Ok("mass conserved on 50 tensors; constructed example [1, 1, 1, 0]".into())
}
