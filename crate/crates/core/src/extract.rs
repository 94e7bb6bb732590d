//! Batch extraction of pose-aligned patches for a whole dataset.
//!
//! Patches are written as `<image_id>__<kpA>__<kpB>.png` (inside one
//! directory per hybrid class when merging symmetric parts), each image gets
//! a `<image_id>__skipped.json` sidecar, and `manifest.json` summarises the
//! run. Images are processed in parallel; the manifest keeps dataset order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::DatasetIndex;
use crate::error::{Error, Result};
use crate::geometry::{patch_transform, warp_patch, Image, PatchSize, Point2, WarpOptions};
use crate::schema::{enumerate_raw_pairs, merge_symmetric, KeypointSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisibilityPolicy {
    /// Every keypoint counts as present, visible or not.
    All,
    /// Pairs with an invisible endpoint are skipped.
    VisibleOnly,
}

impl FromStr for VisibilityPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "visible-only" => Ok(Self::VisibleOnly),
            other => Err(Error::InvalidParameter(format!("unknown policy {other:?}"))),
        }
    }
}

impl fmt::Display for VisibilityPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::VisibleOnly => "visible-only",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub size: PatchSize,
    pub policy: VisibilityPolicy,
    pub merge_symmetric: bool,
    pub warp: WarpOptions,
    /// Directory the records' relative image paths are resolved against.
    pub image_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedPair {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageManifest {
    pub image_id: String,
    pub written: usize,
    pub skipped_degenerate: Vec<SkippedPair>,
    pub skipped_invisible: usize,
    /// Pairs not attempted because the image failed.
    pub skipped_failed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionManifest {
    pub patch_size: String,
    pub policy: VisibilityPolicy,
    pub merge_symmetric: bool,
    pub pairs_per_image: usize,
    pub written: usize,
    pub skipped_degenerate: usize,
    pub skipped_invisible: usize,
    pub skipped_failed: usize,
    pub errors: usize,
    pub images: Vec<ImageManifest>,
}

/// Replaces anything outside `[A-Za-z0-9._-]` with `-`.
pub fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

pub fn patch_file_name(image_id: &str, a: &str, b: &str) -> String {
    format!(
        "{}__{}__{}.png",
        sanitize(image_id),
        sanitize(a),
        sanitize(b)
    )
}

/// Extracts every raw-pair patch of every image. Keypoints come from
/// `keypoints` when given (e.g. decoded predictions), otherwise from the
/// annotations; visibility always comes from the annotations.
pub fn extract_all(
    index: &DatasetIndex,
    schema: &KeypointSchema,
    keypoints: Option<&BTreeMap<String, Vec<Point2>>>,
    out_dir: &Path,
    opts: &ExtractOptions,
) -> Result<ExtractionManifest> {
    let n = schema.len();
    if let Some(pose) = index.poses.iter().find(|p| p.keypoints.len() != n) {
        return Err(Error::DimensionMismatch {
            what: "keypoints per image vs schema",
            expected: n,
            found: pose.keypoints.len(),
        });
    }
    if let Some(map) = keypoints {
        if let Some(rec) = index
            .records
            .iter()
            .find(|r| map.get(&r.id).is_none_or(|k| k.len() != n))
        {
            return Err(Error::MismatchedIds(format!(
                "keypoints missing or incomplete for image {}",
                rec.id
            )));
        }
    }
    let raw = enumerate_raw_pairs(schema);
    let pairs: Vec<(usize, usize)> = raw.iter().map(|c| c.member_pairs[0]).collect();
    let class_dir: HashMap<(usize, usize), String> = if opts.merge_symmetric {
        merge_symmetric(schema, &raw)
            .iter()
            .flat_map(|class| {
                let dir = sanitize(&class.label(schema));
                class.member_pairs.iter().map(move |&p| (p, dir.clone()))
            })
            .collect()
    } else {
        HashMap::new()
    };
    fs::create_dir_all(out_dir)?;
    for dir in class_dir.values() {
        fs::create_dir_all(out_dir.join(dir))?;
    }

    let images: Vec<ImageManifest> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let record = &index.records[i];
            let pose = &index.poses[i];
            let points: Vec<Point2> = match keypoints {
                Some(map) => map[&record.id].clone(),
                None => pose.keypoints.iter().map(|k| k.point()).collect(),
            };
            let mut entry = ImageManifest {
                image_id: record.id.clone(),
                written: 0,
                skipped_degenerate: Vec::new(),
                skipped_invisible: 0,
                skipped_failed: 0,
                error: None,
            };
            if let Err(e) = extract_image(
                record, pose, &points, schema, &pairs, &class_dir, out_dir, opts, &mut entry,
            ) {
                entry.skipped_failed = pairs.len()
                    - entry.written
                    - entry.skipped_degenerate.len()
                    - entry.skipped_invisible;
                entry.error = Some(e.to_string());
            }
            entry
        })
        .collect();

    let manifest = ExtractionManifest {
        patch_size: opts.size.to_string(),
        policy: opts.policy,
        merge_symmetric: opts.merge_symmetric,
        pairs_per_image: pairs.len(),
        written: images.iter().map(|m| m.written).sum(),
        skipped_degenerate: images.iter().map(|m| m.skipped_degenerate.len()).sum(),
        skipped_invisible: images.iter().map(|m| m.skipped_invisible).sum(),
        skipped_failed: images.iter().map(|m| m.skipped_failed).sum(),
        errors: images.iter().filter(|m| m.error.is_some()).count(),
        images,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn extract_image(
    record: &crate::dataset::ImageRecord,
    pose: &crate::dataset::PoseAnnotation,
    points: &[Point2],
    schema: &KeypointSchema,
    pairs: &[(usize, usize)],
    class_dir: &HashMap<(usize, usize), String>,
    out_dir: &Path,
    opts: &ExtractOptions,
    entry: &mut ImageManifest,
) -> Result<()> {
    let image = Image::load(opts.image_dir.join(&record.path))?;
    for &(i, j) in pairs {
        if opts.policy == VisibilityPolicy::VisibleOnly
            && !(pose.keypoints[i].visible && pose.keypoints[j].visible)
        {
            entry.skipped_invisible += 1;
            continue;
        }
        let spec = match patch_transform(points[i], points[j], opts.size) {
            Ok(spec) => spec,
            Err(Error::DegeneratePair { .. }) => {
                entry.skipped_degenerate.push(SkippedPair {
                    a: schema.name(i).to_string(),
                    b: schema.name(j).to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let patch = warp_patch(&image, &spec, opts.warp);
        let name = patch_file_name(&record.id, schema.name(i), schema.name(j));
        let path = match class_dir.get(&(i, j)) {
            Some(dir) => out_dir.join(dir).join(name),
            None => out_dir.join(name),
        };
        patch.save_png(path)?;
        entry.written += 1;
    }
    let sidecar = serde_json::json!({
        "image_id": record.id,
        "skipped_degenerate": entry.skipped_degenerate,
    });
    fs::write(
        out_dir.join(format!("{}__skipped.json", sanitize(&record.id))),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(())
}
