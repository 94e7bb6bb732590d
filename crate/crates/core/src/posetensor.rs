//! Pose tensors: one non-negative map per keypoint, decoded by taking each
//! channel's maximally activated cell.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "PTNS" | u32 n_channels | u32 tensor_w | u32 tensor_h | u32 img_w | u32 img_h
//! | n_channels * tensor_h * tensor_w f32, channel-major then row-major
//! ```

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::binio;
use crate::error::{Error, Result};
use crate::geometry::Point2;

pub const POSE_TENSOR_MAGIC: &[u8; 4] = b"PTNS";

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTensor {
    n_channels: usize,
    width: usize,
    height: usize,
    img_w: u32,
    img_h: u32,
    data: Vec<f32>,
}

impl PoseTensor {
    pub fn new(
        n_channels: usize,
        width: usize,
        height: usize,
        img_w: u32,
        img_h: u32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = n_channels * width * height;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "pose tensor data",
                expected,
                found: data.len(),
            });
        }
        let tensor = Self {
            n_channels,
            width,
            height,
            img_w,
            img_h,
            data,
        };
        tensor.validate()?;
        Ok(tensor)
    }

    fn validate(&self) -> Result<()> {
        if self.img_w == 0 || self.img_h == 0 {
            return Err(Error::Format(
                "pose tensor image size must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::EmptyTensor { channel: 0 });
        }
        for c in 0..self.n_channels {
            if let Some(cell) = self
                .channel(c)
                .iter()
                .position(|v| !(v.is_finite() && *v >= 0.0))
            {
                return Err(Error::InvalidTensorValue { channel: c, cell });
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.img_w, self.img_h)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let area = self.width * self.height;
        &self.data[c * area..(c + 1) * area]
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(POSE_TENSOR_MAGIC)?;
        for v in [self.n_channels, self.width, self.height] {
            binio::write_u32(&mut w, binio::to_u32(v, "pose tensor dimension")?)?;
        }
        binio::write_u32(&mut w, self.img_w)?;
        binio::write_u32(&mut w, self.img_h)?;
        binio::write_f32s(&mut w, &self.data)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        binio::expect_magic(&mut r, POSE_TENSOR_MAGIC)?;
        let n_channels = binio::read_u32(&mut r)? as usize;
        let width = binio::read_u32(&mut r)? as usize;
        let height = binio::read_u32(&mut r)? as usize;
        let img_w = binio::read_u32(&mut r)?;
        let img_h = binio::read_u32(&mut r)?;
        let count = n_channels
            .checked_mul(width)
            .and_then(|v| v.checked_mul(height))
            .ok_or_else(|| Error::Format("pose tensor dimensions overflow".into()))?;
        let data = binio::read_f32s(&mut r, count)?;
        binio::expect_eof(&mut r)?;
        Self::new(n_channels, width, height, img_w, img_h, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodedKeypoint {
    pub location: Point2,
    pub confidence: f32,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedPose {
    pub keypoints: Vec<DecodedKeypoint>,
}

impl DecodedPose {
    pub fn locations(&self) -> Vec<Point2> {
        self.keypoints.iter().map(|k| k.location).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeOptions {
    /// Peaks below this are marked invisible. `None` keeps every keypoint
    /// visible.
    pub visibility_threshold: Option<f32>,
}

/// Argmax per channel (first cell in row-major order on ties), mapped to the
/// image by scaling the cell centre.
pub fn decode(tensor: &PoseTensor, opts: DecodeOptions) -> Result<DecodedPose> {
    if tensor.width == 0 || tensor.height == 0 {
        return Err(Error::EmptyTensor { channel: 0 });
    }
    let sx = f64::from(tensor.img_w) / tensor.width as f64;
    let sy = f64::from(tensor.img_h) / tensor.height as f64;
    let keypoints = (0..tensor.n_channels)
        .into_par_iter()
        .map(|c| {
            let (cell, peak) = argmax_first(tensor.channel(c));
            let (row, col) = (cell / tensor.width, cell % tensor.width);
            let location = Point2::new((col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy);
            let visible = opts.visibility_threshold.is_none_or(|tau| peak >= tau);
            DecodedKeypoint {
                location,
                confidence: peak,
                visible,
            }
        })
        .collect();
    Ok(DecodedPose { keypoints })
}

fn argmax_first(values: &[f32]) -> (usize, f32) {
    values.iter().enumerate().fold(
        (0, values[0]),
        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(w: usize, h: usize, img: u32, data: Vec<f32>) -> PoseTensor {
        PoseTensor::new(1, w, h, img, img, data).unwrap()
    }

    #[test]
    fn one_cell_maps_to_centre() {
        let pose = decode(&single(1, 1, 100, vec![0.3]), DecodeOptions::default()).unwrap();
        assert_eq!(pose.keypoints[0].location, Point2::new(50.0, 50.0));
        assert_eq!(pose.keypoints[0].confidence, 0.3);
        assert!(pose.keypoints[0].visible);
    }

    #[test]
    fn peak_cell_is_scaled() {
        let mut data = vec![0.0; 16];
        data[4 + 2] = 1.0;
        let pose = decode(&single(4, 4, 64, data), DecodeOptions::default()).unwrap();
        assert_eq!(pose.keypoints[0].location, Point2::new(40.0, 24.0));
    }

    #[test]
    fn ties_break_row_major() {
        let pose = decode(&single(3, 2, 30, vec![0.5; 6]), DecodeOptions::default()).unwrap();
        assert_eq!(pose.keypoints[0].location, Point2::new(5.0, 7.5));
    }

    #[test]
    fn threshold_marks_invisible() {
        let t = PoseTensor::new(2, 1, 1, 10, 10, vec![0.2, 0.8]).unwrap();
        let pose = decode(
            &t,
            DecodeOptions {
                visibility_threshold: Some(0.5),
            },
        )
        .unwrap();
        assert!(!pose.keypoints[0].visible);
        assert!(pose.keypoints[1].visible);
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(matches!(
            PoseTensor::new(1, 0, 4, 10, 10, vec![]),
            Err(Error::EmptyTensor { .. })
        ));
        assert!(matches!(
            PoseTensor::new(1, 2, 1, 10, 10, vec![0.0, -1.0]),
            Err(Error::InvalidTensorValue {
                channel: 0,
                cell: 1
            })
        ));
        assert!(matches!(
            PoseTensor::new(1, 2, 1, 10, 10, vec![0.0, f32::NAN]),
            Err(Error::InvalidTensorValue { .. })
        ));
        assert!(matches!(
            PoseTensor::new(1, 2, 2, 10, 10, vec![0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_magic_and_trailing_bytes() {
        let t = PoseTensor::new(1, 1, 1, 4, 4, vec![1.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(
            PoseTensor::read_from(&wrong[..]),
            Err(Error::Format(_))
        ));
        buf.push(0);
        assert!(matches!(
            PoseTensor::read_from(&buf[..]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn binary_roundtrip(c in 1usize..4, w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f32> = (0..c * w * h)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64).wrapping_mul(1442695040888963407) >> 40) as f32) / 1e6)
                .collect();
            let t = PoseTensor::new(c, w, h, 37, 91, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 24 + 4 * c * w * h);
            prop_assert_eq!(PoseTensor::read_from(&buf[..]).unwrap(), t);
        }

        #[test]
        fn decode_is_scale_invariant_and_in_bounds(
            vals in proptest::collection::vec(0.0f32..10.0, 12),
            scale in 0.01f32..100.0,
            img_w in 1u32..500, img_h in 1u32..500,
        ) {
            let t = PoseTensor::new(1, 4, 3, img_w, img_h, vals.clone()).unwrap();
            let scaled = PoseTensor::new(1, 4, 3, img_w, img_h, vals.iter().map(|v| v * scale).collect()).unwrap();
            let a = decode(&t, DecodeOptions::default()).unwrap();
            let b = decode(&scaled, DecodeOptions::default()).unwrap();
            let loc = a.keypoints[0].location;
            prop_assert!(loc.x >= 0.0 && loc.x < f64::from(img_w));
            prop_assert!(loc.y >= 0.0 && loc.y < f64::from(img_h));
            // Scaling by a positive float can merge near-equal values into a tie;
            // only assert when the original maximum is unique.
            let max = vals.iter().cloned().fold(f32::MIN, f32::max);
            if vals.iter().filter(|&&v| v == max).count() == 1 {
                let second = vals.iter().cloned().filter(|&v| v != max).fold(0.0f32, f32::max);
                if max * scale > second * scale {
                    prop_assert_eq!(loc, b.keypoints[0].location);
                }
            }
        }
    }
}
