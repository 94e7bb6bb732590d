//! CUB-200-2011 style annotation loading and writing.
//!
//! Expected files under the dataset root:
//!
//! ```text
//! images.txt              <image_id> <relative_path>
//! image_class_labels.txt  <image_id> <class_id>          (1-based)
//! bounding_boxes.txt      <image_id> <x> <y> <w> <h>
//! train_test_split.txt    <image_id> <is_train>
//! parts/parts.txt         <part_id> <name>               (1-based)
//! parts/part_locs.txt     <image_id> <part_id> <x> <y> <visible>
//! ```
//!
//! NABirds ships the same files with UUID image ids, so image ids are kept as
//! strings and the layout is configurable.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::schema::parse_cub_part_names;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn point(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseAnnotation {
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    /// Read from the image header when the file is present.
    pub width: Option<u32>,
    pub height: Option<u32>,
    /// 0-based class index.
    pub label: u32,
    pub bbox: BoundingBox,
    pub is_train: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub part_names: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub poses: Vec<PoseAnnotation>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn train_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_train).count()
    }
}

/// Relative locations of the annotation files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub images: PathBuf,
    pub class_labels: PathBuf,
    pub bounding_boxes: PathBuf,
    pub split: PathBuf,
    pub parts: PathBuf,
    pub part_locs: PathBuf,
    pub image_dir: PathBuf,
}

impl DatasetLayout {
    pub fn cub() -> Self {
        Self {
            images: "images.txt".into(),
            class_labels: "image_class_labels.txt".into(),
            bounding_boxes: "bounding_boxes.txt".into(),
            split: "train_test_split.txt".into(),
            parts: "parts/parts.txt".into(),
            part_locs: "parts/part_locs.txt".into(),
            image_dir: "images".into(),
        }
    }

    /// NABirds keeps CUB's file names; only the id format differs.
    pub fn nabirds() -> Self {
        Self::cub()
    }
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self::cub()
    }
}

pub fn load_cub(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    load_with_layout(root.as_ref(), &DatasetLayout::cub())
}

pub fn load_with_layout(root: &Path, layout: &DatasetLayout) -> Result<DatasetIndex> {
    let images = read_table(root, &layout.images, 2)?;
    let labels = read_table(root, &layout.class_labels, 2)?;
    let boxes = read_table(root, &layout.bounding_boxes, 5)?;
    let split = read_table(root, &layout.split, 2)?;
    let parts_path = root.join(&layout.parts);
    let part_names =
        parse_cub_part_names(&read_file(&parts_path)?).map_err(|e| relocate(e, &parts_path))?;
    let locs = read_table(root, &layout.part_locs, 5)?;

    let mut seen = HashSet::new();
    for row in &images.rows {
        if !seen.insert(row.fields[0].as_str()) {
            return Err(Error::malformed(
                &images.path,
                row.line,
                format!("duplicate image id {}", row.fields[0]),
            ));
        }
    }
    let labels = keyed(&labels, images.rows.len())?;
    let boxes = keyed(&boxes, images.rows.len())?;
    let split = keyed(&split, images.rows.len())?;

    let n_parts = part_names.len();
    let mut poses: HashMap<&str, Vec<Option<Keypoint>>> = images
        .rows
        .iter()
        .map(|r| (r.fields[0].as_str(), vec![None; n_parts]))
        .collect();
    for row in &locs.rows {
        let bad = |reason: String| Error::malformed(&locs.path, row.line, reason);
        let slots = poses.get_mut(row.fields[0].as_str()).ok_or_else(|| {
            Error::InconsistentCounts(format!(
                "part_locs references unknown image {}",
                row.fields[0]
            ))
        })?;
        let part: usize = parse_field(&row.fields[1], "part id").map_err(bad)?;
        if part == 0 || part > n_parts {
            return Err(Error::InconsistentCounts(format!(
                "part id {part} out of range 1..={n_parts} at {}:{}",
                locs.path.display(),
                row.line
            )));
        }
        let x: f64 = parse_field(&row.fields[2], "x").map_err(bad)?;
        let y: f64 = parse_field(&row.fields[3], "y").map_err(bad)?;
        let visible = parse_flag(&row.fields[4]).map_err(bad)?;
        if slots[part - 1]
            .replace(Keypoint { x, y, visible })
            .is_some()
        {
            return Err(bad(format!("duplicate entry for part {part}")));
        }
    }

    let mut records = Vec::with_capacity(images.rows.len());
    let mut pose_list = Vec::with_capacity(images.rows.len());
    for row in &images.rows {
        let id = row.fields[0].clone();
        let lookup = |table: &HashMap<String, (usize, Vec<String>)>, what: &str| {
            table
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::InconsistentCounts(format!("image {id} missing from {what}")))
        };
        let (lline, lf) = lookup(&labels.0, "class labels")?;
        let class: u32 =
            parse_field(&lf[0], "class id").map_err(|r| Error::malformed(&labels.1, lline, r))?;
        if class == 0 {
            return Err(Error::malformed(&labels.1, lline, "class ids are 1-based"));
        }
        let (bline, bf) = lookup(&boxes.0, "bounding boxes")?;
        let bnum = |i: usize| {
            parse_field::<f64>(&bf[i], "box value")
                .map_err(|r| Error::malformed(&boxes.1, bline, r))
        };
        let bbox = BoundingBox {
            x: bnum(0)?,
            y: bnum(1)?,
            w: bnum(2)?,
            h: bnum(3)?,
        };
        let (sline, sf) = lookup(&split.0, "train/test split")?;
        let is_train = parse_flag(&sf[0]).map_err(|r| Error::malformed(&split.1, sline, r))?;

        let slots = poses.remove(id.as_str()).expect("every image has a slot");
        let keypoints = slots
            .into_iter()
            .enumerate()
            .map(|(p, k)| {
                k.ok_or_else(|| {
                    Error::InconsistentCounts(format!("image {id} has no entry for part {}", p + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let path = row.fields[1].clone();
        let image_path = root.join(&layout.image_dir).join(&path);
        let (width, height) = match image::image_dimensions(&image_path) {
            Ok((w, h)) => (Some(w), Some(h)),
            Err(_) => (None, None),
        };
        if let (Some(w), Some(h)) = (width, height) {
            for (p, k) in keypoints.iter().enumerate() {
                if k.visible
                    && !(k.x >= 0.0 && k.y >= 0.0 && k.x <= f64::from(w) && k.y <= f64::from(h))
                {
                    warn!(
                        "image {id}: visible part {} at ({}, {}) lies outside {w}x{h}",
                        p + 1,
                        k.x,
                        k.y
                    );
                }
            }
        }
        records.push(ImageRecord {
            id,
            path,
            width,
            height,
            label: class - 1,
            bbox,
            is_train,
        });
        pose_list.push(PoseAnnotation { keypoints });
    }
    Ok(DatasetIndex {
        part_names,
        records,
        poses: pose_list,
    })
}

/// Writes the annotation files (not the images) for `index` under `root`.
pub fn write_cub(index: &DatasetIndex, root: impl AsRef<Path>) -> Result<()> {
    write_with_layout(index, root.as_ref(), &DatasetLayout::cub())
}

pub fn write_with_layout(index: &DatasetIndex, root: &Path, layout: &DatasetLayout) -> Result<()> {
    let mut images = String::new();
    let mut labels = String::new();
    let mut boxes = String::new();
    let mut split = String::new();
    let mut locs = String::new();
    for (rec, pose) in index.records.iter().zip(&index.poses) {
        let id = &rec.id;
        images.push_str(&format!("{id} {}\n", rec.path));
        labels.push_str(&format!("{id} {}\n", rec.label + 1));
        let b = rec.bbox;
        boxes.push_str(&format!("{id} {:?} {:?} {:?} {:?}\n", b.x, b.y, b.w, b.h));
        split.push_str(&format!("{id} {}\n", u8::from(rec.is_train)));
        for (p, k) in pose.keypoints.iter().enumerate() {
            locs.push_str(&format!(
                "{id} {} {:?} {:?} {}\n",
                p + 1,
                k.x,
                k.y,
                u8::from(k.visible)
            ));
        }
    }
    let parts: String = index
        .part_names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{} {n}\n", i + 1))
        .collect();
    for (rel, body) in [
        (&layout.images, images),
        (&layout.class_labels, labels),
        (&layout.bounding_boxes, boxes),
        (&layout.split, split),
        (&layout.parts, parts),
        (&layout.part_locs, locs),
    ] {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(&path)?.write_all(body.as_bytes())?;
    }
    Ok(())
}

struct Row {
    line: usize,
    fields: Vec<String>,
}

struct Table {
    path: PathBuf,
    rows: Vec<Row>,
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn relocate(e: Error, path: &Path) -> Error {
    match e {
        Error::MalformedLine { line, reason, .. } => Error::malformed(path, line, reason),
        other => other,
    }
}

/// Whitespace-separated rows with exactly `width` fields; in a two-field
/// table the second field takes the rest of the line so paths may contain
/// spaces.
fn read_table(root: &Path, rel: &Path, width: usize) -> Result<Table> {
    let path = root.join(rel);
    let text = read_file(&path)?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = if width == 2 {
            match line.split_once(char::is_whitespace) {
                Some((a, b)) if !b.trim().is_empty() => vec![a.to_string(), b.trim().to_string()],
                _ => vec![line.to_string()],
            }
        } else {
            line.split_whitespace().map(str::to_string).collect()
        };
        if fields.len() != width {
            return Err(Error::malformed(
                &path,
                i + 1,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        rows.push(Row {
            line: i + 1,
            fields,
        });
    }
    Ok(Table { path, rows })
}

type Keyed = (HashMap<String, (usize, Vec<String>)>, PathBuf);

fn keyed(table: &Table, n_images: usize) -> Result<Keyed> {
    let mut map = HashMap::with_capacity(table.rows.len());
    for row in &table.rows {
        let prev = map.insert(row.fields[0].clone(), (row.line, row.fields[1..].to_vec()));
        if prev.is_some() {
            return Err(Error::malformed(
                &table.path,
                row.line,
                format!("duplicate image id {}", row.fields[0]),
            ));
        }
    }
    if map.len() != n_images {
        return Err(Error::InconsistentCounts(format!(
            "{} lists {} images, images.txt lists {n_images}",
            table.path.display(),
            map.len()
        )));
    }
    Ok((map, table.path.clone()))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(format!("expected 0 or 1, found {other:?}")),
    }
}
