//! Per-image, per-patch class scores: the hand-off between patch classifiers
//! and the aggregation strategies.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "PSCR" | u32 n_images | u32 n_patches | u32 n_classes
//! | u32 label × n_images | u8 split × n_images (1 = train, 0 = test)
//! | f32 × n_images·n_patches·n_classes, image-major then patch then class
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};

pub const SCORE_TENSOR_MAGIC: &[u8; 4] = b"PSCR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 1,
            Split::Test => 0,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Split::Train),
            0 => Ok(Split::Test),
            other => Err(Error::Format(format!(
                "split flag must be 0 or 1, found {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    n_images: usize,
    n_patches: usize,
    n_classes: usize,
    labels: Vec<u32>,
    splits: Vec<Split>,
    data: Vec<f32>,
}

impl ScoreTensor {
    pub fn new(
        n_patches: usize,
        n_classes: usize,
        labels: Vec<u32>,
        splits: Vec<Split>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n_images = labels.len();
        if splits.len() != n_images {
            return Err(Error::DimensionMismatch {
                what: "split flags",
                expected: n_images,
                found: splits.len(),
            });
        }
        let expected = n_images * n_patches * n_classes;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "score data",
                expected,
                found: data.len(),
            });
        }
        if n_patches == 0 || n_classes == 0 {
            return Err(Error::Format(
                "score tensor needs at least one patch and one class".into(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(
                "score tensor contains non-finite values".into(),
            ));
        }
        Ok(Self {
            n_images,
            n_patches,
            n_classes,
            labels,
            splits,
            data,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, image: usize) -> usize {
        self.labels[image] as usize
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Concatenated scores of every patch for one image.
    pub fn image_row(&self, image: usize) -> &[f32] {
        let len = self.n_patches * self.n_classes;
        &self.data[image * len..(image + 1) * len]
    }

    pub fn patch_scores(&self, image: usize, patch: usize) -> &[f32] {
        let start = (image * self.n_patches + patch) * self.n_classes;
        &self.data[start..start + self.n_classes]
    }

    /// Indices of images in `split`, in tensor order.
    pub fn images_in(&self, split: Split) -> Vec<usize> {
        (0..self.n_images)
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Sub-tensor holding only `images`, in the given order.
    pub fn select(&self, images: &[usize]) -> ScoreTensor {
        let len = self.n_patches * self.n_classes;
        let mut data = Vec::with_capacity(images.len() * len);
        for &i in images {
            data.extend_from_slice(self.image_row(i));
        }
        ScoreTensor {
            n_images: images.len(),
            n_patches: self.n_patches,
            n_classes: self.n_classes,
            labels: images.iter().map(|&i| self.labels[i]).collect(),
            splits: images.iter().map(|&i| self.splits[i]).collect(),
            data,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(SCORE_TENSOR_MAGIC)?;
        for v in [self.n_images, self.n_patches, self.n_classes] {
            binio::write_u32(&mut w, binio::to_u32(v, "score tensor dimension")?)?;
        }
        for &l in &self.labels {
            binio::write_u32(&mut w, l)?;
        }
        let flags: Vec<u8> = self.splits.iter().map(|s| s.to_byte()).collect();
        w.write_all(&flags)?;
        binio::write_f32s(&mut w, &self.data)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        binio::expect_magic(&mut r, SCORE_TENSOR_MAGIC)?;
        let n_images = binio::read_u32(&mut r)? as usize;
        let n_patches = binio::read_u32(&mut r)? as usize;
        let n_classes = binio::read_u32(&mut r)? as usize;
        let mut labels = Vec::with_capacity(n_images.min(1 << 20));
        for _ in 0..n_images {
            labels.push(binio::read_u32(&mut r)?);
        }
        let splits = binio::read_bytes(&mut r, n_images)?
            .into_iter()
            .map(Split::from_byte)
            .collect::<Result<Vec<_>>>()?;
        let count = n_images
            .checked_mul(n_patches)
            .and_then(|v| v.checked_mul(n_classes))
            .ok_or_else(|| Error::Format("score tensor dimensions overflow".into()))?;
        let data = binio::read_f32s(&mut r, count)?;
        binio::expect_eof(&mut r)?;
        Self::new(n_patches, n_classes, labels, splits, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Debug dump: `image_id,patch_id,class_0,…` with one row per
    /// (image, patch).
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::from("image_id,patch_id");
        for c in 0..self.n_classes {
            header.push_str(&format!(",class_{c}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.n_images {
            for p in 0..self.n_patches {
                let mut line = format!("{i},{p}");
                for v in self.patch_scores(i, p) {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2, 2, 2]), 0);
    }

    #[test]
    fn validation() {
        assert!(ScoreTensor::new(1, 2, vec![2], vec![Split::Train], vec![0.0, 0.0]).is_err());
        assert!(matches!(
            ScoreTensor::new(1, 2, vec![0], vec![], vec![0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(
            ScoreTensor::new(1, 2, vec![0], vec![Split::Test], vec![0.0, f32::INFINITY]).is_err()
        );
    }

    #[test]
    fn bad_split_byte() {
        let t = ScoreTensor::new(1, 1, vec![0], vec![Split::Test], vec![0.5]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf[20] = 7;
        assert!(matches!(
            ScoreTensor::read_from(&buf[..]),
            Err(Error::Format(_))
        ));
        buf.truncate(18);
        assert!(matches!(
            ScoreTensor::read_from(&buf[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn csv_dump() {
        let t =
            ScoreTensor::new(2, 2, vec![1], vec![Split::Train], vec![0.5, 0.25, 1.0, 0.0]).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "image_id,patch_id,class_0,class_1\n0,0,0.5,0.25\n0,1,1,0\n"
        );
    }

    proptest! {
        #[test]
        fn binary_roundtrip(
            n_images in 0usize..6, n_patches in 1usize..5, n_classes in 1usize..5, seed in any::<u32>(),
        ) {
            let labels: Vec<u32> = (0..n_images).map(|i| (seed as usize + i) as u32 % n_classes as u32).collect();
            let splits = (0..n_images).map(|i| if (seed as usize + i).is_multiple_of(3) { Split::Test } else { Split::Train }).collect();
            let data = (0..n_images * n_patches * n_classes).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
            let t = ScoreTensor::new(n_patches, n_classes, labels, splits, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(ScoreTensor::read_from(&buf[..]).unwrap(), t);
        }
    }
}
