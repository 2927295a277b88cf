//! Synthetic textured fixtures.
//!
//! Generates smooth procedural textures with optional high-contrast square
//! and stripe defects, written out in the standard dataset layout. Used by
//! the test suites and the end-to-end sanity run; no external data needed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{ImageTensor, ResolutionTag};
use crate::error::Result;
use crate::rng::{derive_seed, XorShift64Star};
use crate::tensor::Tensor;

/// A smooth low-frequency sinusoid texture in [0.05, 0.95] with mild
/// per-channel tinting. Each seed yields a different texture from the same
/// family; the family is deliberately narrow so a short training run can
/// model it.
pub fn texture_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = XorShift64Star::new(seed);
    let mut components = Vec::new();
    for k in 0..2 {
        let fx = rng.uniform(0.5, 2.0);
        let fy = rng.uniform(0.5, 2.0);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let amp = rng.uniform(0.08, 0.16) / (1.0 + k as f64);
        components.push((fx, fy, phase, amp));
    }
    let tint = [
        rng.uniform(-0.03, 0.03),
        rng.uniform(-0.03, 0.03),
        rng.uniform(-0.03, 0.03),
    ];
    let mut data = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let mut val = 0.5;
            for &(fx, fy, phase, amp) in &components {
                val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            }
            for (c, t) in tint.iter().enumerate() {
                data.set3(c, y, x, (val + t).clamp(0.05, 0.95));
            }
        }
    }
    ImageTensor::new(data, None, ResolutionTag::High).unwrap()
}

/// Stamps a square or stripe defect onto a texture; returns the defective
/// image and its binary mask.
///
/// Defect interiors are filled with high-frequency content (per-pixel noise
/// or a fine checkerboard) rather than a flat color: flat patches survive
/// downsampling unchanged, while irregular fine structure degrades in the
/// low-resolution view, which is exactly the signal cross-resolution
/// alignment reacts to.
pub fn apply_defect(image: &ImageTensor, seed: u64) -> (ImageTensor, Tensor) {
    let mut rng = XorShift64Star::new(seed);
    let (h, w) = image.hw();
    let mut data = image.data.clone();
    let mut mask = Tensor::zeros(&[h, w]);
    let speckle = rng.next_f64() < 0.5;
    let (dark, light) = (rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0));
    let fill = |data: &mut Tensor, rng: &mut XorShift64Star, y: usize, x: usize| {
        let v = if speckle {
            if rng.next_f64() < 0.5 {
                dark
            } else {
                light
            }
        } else if (y + x).is_multiple_of(2) {
            dark
        } else {
            light
        };
        for c in 0..3 {
            data.set3(c, y, x, v);
        }
    };
    let square = rng.next_f64() < 0.5;
    if square {
        let side = rng.uniform_usize(h / 5, h / 3);
        let y0 = rng.uniform_usize(2, h - side - 2);
        let x0 = rng.uniform_usize(2, w - side - 2);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                fill(&mut data, &mut rng, y, x);
                mask.set2(y, x, 1.0);
            }
        }
    } else {
        let horizontal = rng.next_f64() < 0.5;
        let thickness = rng.uniform_usize(h / 8, h / 5);
        let start = rng.uniform_usize(2, h - thickness - 2);
        for t in 0..thickness {
            for along in 0..w {
                let (y, x) = if horizontal {
                    (start + t, along)
                } else {
                    (along, start + t)
                };
                fill(&mut data, &mut rng, y, x);
                mask.set2(y, x, 1.0);
            }
        }
    }
    let image = ImageTensor::new(data, None, ResolutionTag::High).unwrap();
    (image, mask)
}

pub fn save_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = image.hw();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image.data.at3(0, y, x) * 255.0).round() as u8,
                (image.data.at3(1, y, x) * 255.0).round() as u8,
                (image.data.at3(2, y, x) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    out.save(path)?;
    Ok(())
}

pub fn save_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = mask.hw();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask.at2(y, x) > 0.5 { 255 } else { 0 };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    out.save(path)?;
    Ok(())
}

/// Writes a complete synthetic category tree under `root` and returns the
/// category directory.
pub fn write_synthetic_tree(
    root: &Path,
    category: &str,
    n_train: usize,
    n_test_good: usize,
    n_test_defect: usize,
    size: usize,
    seed: u64,
) -> Result<PathBuf> {
    let cat = root.join(category);
    for i in 0..n_train {
        let img = texture_image(size, derive_seed(seed, i as u64));
        save_image_png(&cat.join(format!("train/good/{i:03}.png")), &img)?;
    }
    for i in 0..n_test_good {
        let img = texture_image(size, derive_seed(seed, 10_000 + i as u64));
        save_image_png(&cat.join(format!("test/good/{i:03}.png")), &img)?;
    }
    for i in 0..n_test_defect {
        let base = texture_image(size, derive_seed(seed, 20_000 + i as u64));
        let (img, mask) = apply_defect(&base, derive_seed(seed, 30_000 + i as u64));
        save_image_png(&cat.join(format!("test/defect/{i:03}.png")), &img)?;
        save_mask_png(
            &cat.join(format!("ground_truth/defect/{i:03}_mask.png")),
            &mask,
        )?;
    }
    Ok(cat)
}
