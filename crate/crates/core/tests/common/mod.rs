//! Shared fixtures: synthetic lead datasets, synthetic report scans, and a
//! flood-fill component-count oracle.

#![allow(dead_code)]

use std::path::Path;

use ecgformer_core::dataset::{DiseaseClass, LeadDataset, Sample};
use ecgformer_core::preprocess::{BinaryImage, LeadLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Linearly separable lead set: class `c` fills the `c`-th horizontal band
/// with foreground, plus a sprinkle of per-sample noise pixels.
pub fn separable_leads(per_class: usize, side: usize, seed: u64) -> LeadDataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let band = side / 4;
    for class in 0..4usize {
        for i in 0..per_class {
            let mut image = vec![0.0; side * side];
            for r in class * band..(class + 1) * band {
                for c in 0..side {
                    image[r * side + c] = 1.0;
                }
            }
            for _ in 0..side / 2 {
                let r = rng.random_range(0..side);
                let c = rng.random_range(0..side);
                image[r * side + c] = 1.0 - image[r * side + c];
            }
            samples.push(Sample {
                image,
                side,
                label: class,
                report_id: format!("{}-{i}", DiseaseClass::ALL[class].dir_name()),
                lead_label: LeadLabel::ALL[i % 12],
            });
        }
    }
    LeadDataset { samples }
}

/// Pixel dimensions of the synthetic report scans.
pub const REPORT_W: u32 = 48;
pub const REPORT_H: u32 = 36;

/// Write an RGB report scan: white paper with one black 3-pixel stroke per
/// 3×4 grid cell. `marker` shifts the stroke so classes/files differ.
pub fn write_report_png(path: &Path, marker: usize) {
    let (w, h) = (REPORT_W, REPORT_H);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let (cell_w, cell_h) = (w / 4, h / 3);
    for row in 0..3 {
        for col in 0..4 {
            let x0 = col * cell_w + 2 + (marker as u32 % 4);
            let y0 = row * cell_h + 2 + (marker as u32 % 3);
            for dx in 0..3 {
                img.put_pixel(x0 + dx, y0, image::Rgb([0, 0, 0]));
            }
        }
    }
    img.save(path).unwrap();
}

/// Lay out a dataset root with the four class directories and synthetic
/// report scans. With `class_marker` the stroke position encodes the
/// class, making the preprocessed leads separable.
pub fn write_synthetic_root(root: &Path, counts: [usize; 4], class_marker: bool) {
    for (label, (class, &count)) in DiseaseClass::ALL.iter().zip(&counts).enumerate() {
        let dir = root.join(class.dir_name());
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..count {
            let marker = if class_marker { label } else { i };
            write_report_png(&dir.join(format!("{}_{i:04}.png", class.dir_name())), marker);
        }
    }
}

/// 4-connected foreground component count by flood fill.
pub fn count_components(img: &BinaryImage) -> usize {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if img.pixels[start] == 0 || seen[start] {
            continue;
        }
        components += 1;
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |rr: usize, cc: usize| {
                let q = rr * w + cc;
                if img.pixels[q] == 1 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
    }
    components
}
