//! Synthetic CUB-layout dataset shared by the integration tests.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pairs::geometry::Image;
use pairs::schema::CUB_PART_NAMES;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE_W: u32 = 96;
pub const IMAGE_H: u32 = 64;

/// Image 1 has every part visible, image 2 hides exactly one part, image 3
/// puts two visible parts on the same pixel; the rest are random. Visible
/// parts never coincide otherwise.
pub struct Fixture {
    pub n_images: usize,
    /// Part index (0-based) hidden on image 2.
    pub hidden_part: usize,
    /// Parts (0-based) sharing a location on image 3.
    pub coincident: (usize, usize),
}

pub fn write_fixture(root: &Path, n_images: usize, seed: u64) -> Fixture {
    assert!(n_images >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden_part = 4;
    let coincident = (1, 2);

    let mut images = String::new();
    let mut labels = String::new();
    let mut boxes = String::new();
    let mut split = String::new();
    let mut locs = String::new();
    let mut parts = String::new();
    for (i, name) in CUB_PART_NAMES.iter().enumerate() {
        writeln!(parts, "{} {name}", i + 1).unwrap();
    }

    for id in 1..=n_images {
        let class = 1 + (id - 1) % 3;
        let rel = format!("{class:03}.Bird_{class}/img_{id:04}.png");
        writeln!(images, "{id} {rel}").unwrap();
        writeln!(labels, "{id} {class}").unwrap();
        let (bx, by) = (rng.gen_range(0.0..10.0f64), rng.gen_range(0.0..10.0f64));
        let (bw, bh) = (rng.gen_range(40.0..80.0f64), rng.gen_range(30.0..50.0f64));
        writeln!(boxes, "{id} {bx:.1} {by:.1} {bw:.1} {bh:.1}").unwrap();
        writeln!(split, "{id} {}", u8::from(id % 4 != 0)).unwrap();

        let mut points: Vec<(f64, f64, bool)> = Vec::new();
        while points.len() < CUB_PART_NAMES.len() {
            let x = rng.gen_range(4.0..f64::from(IMAGE_W) - 4.0).round();
            let y = rng.gen_range(4.0..f64::from(IMAGE_H) - 4.0).round();
            if !points.iter().any(|p| p.0 == x && p.1 == y) {
                points.push((x, y, true));
            }
        }
        match id {
            1 => {}
            2 => points[hidden_part] = (0.0, 0.0, false),
            3 => points[coincident.1] = points[coincident.0],
            _ => {
                for p in points.iter_mut() {
                    if rng.gen_bool(0.2) {
                        *p = (0.0, 0.0, false);
                    }
                }
            }
        }
        for (p, (x, y, v)) in points.iter().enumerate() {
            writeln!(locs, "{id} {} {x:.1} {y:.1} {}", p + 1, u8::from(*v)).unwrap();
        }

        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let img = Image::from_fn(IMAGE_W, IMAGE_H, 3, |x, y, c| {
            let (x, y) = (x as f32, y as f32);
            0.5 + 0.4 * (0.11 * x + 0.07 * y * (c as f32 + 1.0) + phase).sin()
        });
        let path = root.join("images").join(&rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        img.save_png(&path).unwrap();
    }

    for (name, body) in [
        ("images.txt", images),
        ("image_class_labels.txt", labels),
        ("bounding_boxes.txt", boxes),
        ("train_test_split.txt", split),
        ("parts/parts.txt", parts),
        ("parts/part_locs.txt", locs),
    ] {
        let path = root.join(name);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, body).unwrap();
    }
    Fixture {
        n_images,
        hidden_part,
        coincident,
    }
}

/// Random score tensor with per-image labels and a mixed split.
pub fn random_scores(
    rng: &mut ChaCha8Rng,
    n_images: usize,
    n_patches: usize,
    n_classes: usize,
) -> pairs::ScoreTensor {
    let labels: Vec<u32> = (0..n_images)
        .map(|_| rng.gen_range(0..n_classes as u32))
        .collect();
    let mut splits: Vec<pairs::Split> = (0..n_images)
        .map(|_| {
            if rng.gen_bool(0.7) {
                pairs::Split::Train
            } else {
                pairs::Split::Test
            }
        })
        .collect();
    splits[0] = pairs::Split::Train;
    let data: Vec<f32> = (0..n_images * n_patches * n_classes)
        .map(|_| rng.gen())
        .collect();
    pairs::ScoreTensor::new(n_patches, n_classes, labels, splits, data).unwrap()
}
