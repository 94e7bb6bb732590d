//! Keypoint prediction files: `{"<image_id>": [[x, y, confidence], ...]}`
//! with keypoints in schema order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::posetensor::DecodedPose;

pub type KeypointFile = BTreeMap<String, Vec<[f64; 3]>>;

pub fn from_decoded<'a>(
    poses: impl IntoIterator<Item = (String, &'a DecodedPose)>,
) -> KeypointFile {
    poses
        .into_iter()
        .map(|(id, pose)| {
            let rows = pose
                .keypoints
                .iter()
                .map(|k| [k.location.x, k.location.y, f64::from(k.confidence)])
                .collect();
            (id, rows)
        })
        .collect()
}

/// Drops the confidence column.
pub fn locations(file: &KeypointFile) -> BTreeMap<String, Vec<Point2>> {
    file.iter()
        .map(|(id, rows)| {
            (
                id.clone(),
                rows.iter().map(|r| Point2::new(r[0], r[1])).collect(),
            )
        })
        .collect()
}

pub fn to_string(file: &KeypointFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(file)?;
    s.push('\n');
    Ok(s)
}

pub fn load(path: impl AsRef<Path>) -> Result<KeypointFile> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file: KeypointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.values().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "{} holds non-finite coordinates",
            path.display()
        )));
    }
    Ok(file)
}
