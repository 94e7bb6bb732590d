//! Pose-aligned patch geometry.
//!
//! For a keypoint pair `p_i`, `p_j` with `d = |p_j - p_i|`, `r = (p_j - p_i) / d`
//! and `t = z × r = (-r.y, r.x)`, the patch region is the `2d × d` rectangle
//! centred on the segment midpoint and aligned with `r`. A similarity maps it
//! onto a fixed-size output patch so that `p_i` always lands at
//! `(w/4, h/2)` and `p_j` at `(3w/4, h/2)`.
//!
//! Image coordinates have their origin at the top-left corner with y growing
//! downward. Pixel `(x, y)` covers `[x, x+1) × [y, y+1)`, so its centre is at
//! `(x + 0.5, y + 0.5)`.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairs closer than this (in pixels) have no usable orientation.
pub const MIN_PAIR_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// `z × self` for `z` pointing out of the plane: rotates by +90°.
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    fn mul(self, p: Point2) -> Point2 {
        Point2::new(self * p.x, self * p.y)
    }
}

/// Row-major 2×3 affine map `q = A p + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    /// Rotation by `angle` radians and uniform `scale` about the origin,
    /// followed by translation.
    pub fn similarity(scale: f64, angle: f64, translation: Point2) -> Self {
        let (s, c) = angle.sin_cos();
        Affine2 {
            m: [
                [scale * c, -scale * s, translation.x],
                [scale * s, scale * c, translation.y],
            ],
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.m;
        Point2::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine2 {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Affine2 { m }
    }

    /// Uniform scale factor `s` if the linear part satisfies `AᵀA = s²I`
    /// to relative tolerance `tol`.
    pub fn similarity_scale(&self, tol: f64) -> Option<f64> {
        let [[a, b, _], [c, d, _]] = self.m;
        let n0 = a * a + c * c;
        let n1 = b * b + d * d;
        let cross = a * b + c * d;
        let scale2 = 0.5 * (n0 + n1);
        if scale2 <= 0.0 {
            return None;
        }
        let ok = (n0 - n1).abs() <= tol * scale2 && cross.abs() <= tol * scale2;
        ok.then(|| scale2.sqrt())
    }
}

/// Output patch dimensions; width must be twice the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSize {
    pub width: u32,
    pub height: u32,
}

impl PatchSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::BadAspect { width, height });
        }
        Ok(Self { width, height })
    }
}

impl Default for PatchSize {
    fn default() -> Self {
        Self {
            width: 512,
            height: 256,
        }
    }
}

impl fmt::Display for PatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for PatchSize {
    type Err = Error;

    /// Parses `WIDTHxHEIGHT`, e.g. `512x256`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Format(format!("patch size {s:?} is not WIDTHxHEIGHT")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("patch size {s:?} is not WIDTHxHEIGHT")))
        };
        PatchSize::new(parse(w)?, parse(h)?)
    }
}

/// Patch region and the map from source pixels to patch pixels for one
/// keypoint pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    /// `[(p_i - h r) + h t, (p_j + h r) - h t, (p_i - h r) - h t, (p_j + h r) + h t]`,
    /// i.e. near-i upper, near-j lower, near-i lower, near-j upper.
    pub corners: [Point2; 4],
    /// Source image coordinates to patch coordinates.
    pub transform: Affine2,
    pub size: PatchSize,
}

/// Rectangle corners for the pair, in [`PatchSpec::corners`] order.
pub fn pair_rectangle(p_i: Point2, p_j: Point2) -> Result<[Point2; 4]> {
    let (r_hat, t_hat, d) = pair_frame(p_i, p_j)?;
    let h = d / 2.0;
    let near_i = p_i - h * r_hat;
    let near_j = p_j + h * r_hat;
    Ok([
        near_i + h * t_hat,
        near_j - h * t_hat,
        near_i - h * t_hat,
        near_j + h * t_hat,
    ])
}

/// Unit direction `r`, its normal `t = z × r`, and the distance `d`.
pub fn pair_frame(p_i: Point2, p_j: Point2) -> Result<(Point2, Point2, f64)> {
    let r = p_j - p_i;
    let d = r.norm();
    if d.is_nan() || d <= MIN_PAIR_DISTANCE {
        return Err(Error::DegeneratePair { distance: d });
    }
    let r_hat = (1.0 / d) * r;
    Ok((r_hat, r_hat.perp(), d))
}

/// Similarity taking the pair's rectangle onto a `size` patch: `r` maps to
/// +x and `t` to +y, both scaled by `height / d`.
pub fn patch_transform(p_i: Point2, p_j: Point2, size: PatchSize) -> Result<PatchSpec> {
    let size = PatchSize::new(size.width, size.height)?;
    let corners = pair_rectangle(p_i, p_j)?;
    let (r_hat, t_hat, d) = pair_frame(p_i, p_j)?;
    let s = f64::from(size.height) / d;
    let anchor = Point2::new(f64::from(size.width) / 4.0, f64::from(size.height) / 2.0);
    // u = w/4 + s (q - p_i)·r,  v = h/2 + s (q - p_i)·t
    let transform = Affine2 {
        m: [
            [s * r_hat.x, s * r_hat.y, anchor.x - s * p_i.dot(r_hat)],
            [s * t_hat.x, s * t_hat.y, anchor.y - s * p_i.dot(t_hat)],
        ],
    };
    Ok(PatchSpec {
        corners,
        transform,
        size,
    })
}

/// Row-major image with `channels` interleaved `f32` values per pixel,
/// nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: usize,
    data: Vec<f32>,
}

pub type RgbImage = Image;
pub type GrayImage = Image;

impl Image {
    pub fn new(width: u32, height: u32, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize * channels;
        if channels == 0 || data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "image data",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: &[f32]) -> Self {
        let n = width as usize * height as usize;
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(n * value.len())
            .collect();
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        channels: usize,
        mut f: impl FnMut(u32, u32, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let start = (y as usize * self.width as usize + x as usize) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Bilinear sample at continuous coordinates. Points outside
    /// `[0, width) × [0, height)` yield `None`; inside, neighbours are
    /// clamped to the border.
    pub fn sample_bilinear(&self, p: Point2, out: &mut [f32]) -> bool {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
            return false;
        }
        let fx = p.x - 0.5;
        let fy = p.y - 0.5;
        let x0f = fx.floor();
        let y0f = fy.floor();
        let ax = (fx - x0f) as f32;
        let ay = (fy - y0f) as f32;
        let clamp = |v: f64, hi: u32| v.clamp(0.0, f64::from(hi - 1)) as u32;
        let (x0, x1) = (clamp(x0f, self.width), clamp(x0f + 1.0, self.width));
        let (y0, y1) = (clamp(y0f, self.height), clamp(y0f + 1.0, self.height));
        let (p00, p10) = (self.pixel(x0, y0), self.pixel(x1, y0));
        let (p01, p11) = (self.pixel(x0, y1), self.pixel(x1, y1));
        for c in 0..self.channels {
            let top = p00[c] + ax * (p10[c] - p00[c]);
            let bottom = p01[c] + ax * (p11[c] - p01[c]);
            out[c] = top + ay * (bottom - top);
        }
        true
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb32f();
        let (width, height) = rgb.dimensions();
        Self {
            width,
            height,
            channels: 3,
            data: rgb.into_raw(),
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(Self::from_dynamic(&image::open(path)?))
    }

    /// 8-bit PNG-ready buffer; values are clamped to `[0, 1]` and rounded.
    pub fn to_dynamic(&self) -> Result<image::DynamicImage> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let bad = || Error::Format(format!("cannot encode {}-channel image", self.channels));
        Ok(match self.channels {
            1 => image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, bytes).ok_or_else(bad)?,
            ),
            3 => image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, bytes).ok_or_else(bad)?,
            ),
            _ => return Err(bad()),
        })
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_dynamic()?
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpOptions {
    /// Value written to every channel of output pixels whose pre-image falls
    /// outside the source.
    pub fill: f32,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self { fill: 0.5 }
    }
}

/// Resamples `image` into the patch described by `spec`. Output pixel
/// `(u, v)` takes the bilinear sample at `transform⁻¹(u + 0.5, v + 0.5)`.
pub fn warp_patch(image: &Image, spec: &PatchSpec, opts: WarpOptions) -> Image {
    let inverse = spec
        .transform
        .inverse()
        .expect("patch transforms are similarities with positive scale");
    warp_with_inverse(image, &inverse, spec.size.width, spec.size.height, opts)
}

/// Generic inverse-mapped warp; `inverse` maps output to source coordinates.
pub fn warp_with_inverse(
    image: &Image,
    inverse: &Affine2,
    out_w: u32,
    out_h: u32,
    opts: WarpOptions,
) -> Image {
    let ch = image.channels;
    let mut data = vec![opts.fill; out_w as usize * out_h as usize * ch];
    for (v, row) in data.chunks_mut(out_w as usize * ch).enumerate() {
        for (u, px) in row.chunks_mut(ch).enumerate() {
            let src = inverse.apply(Point2::new(u as f64 + 0.5, v as f64 + 0.5));
            image.sample_bilinear(src, px);
        }
    }
    Image {
        width: out_w,
        height: out_h,
        channels: ch,
        data,
    }
}
