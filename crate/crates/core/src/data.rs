//! Dataset ingestion.
//!
//! Scans the standard industrial anomaly-detection layout
//! (`<root>/<category>/train/good`, `test/<defect_type>`,
//! `ground_truth/<defect_type>/<stem>_mask.png`) into an immutable index,
//! or reads a JSON manifest for arbitrary datasets. Loaders decode, resize
//! and scale images to `[3, S, S]` tensors in [0, 1]; per-channel
//! normalization happens inside the extractor, not here.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{ImageTensor, ResolutionTag};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, resize_nearest_2d, Tensor};

pub const DEFAULT_TARGET_SIZE: usize = 640;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug)]
pub struct TestItem {
    pub image_path: PathBuf,
    /// "good" for normal samples, the defect folder name otherwise.
    pub defect_type: String,
    pub mask_path: Option<PathBuf>,
    pub label: Label,
}

#[derive(Clone, Debug)]
pub struct CategoryIndex {
    pub name: String,
    pub train_normal: Vec<PathBuf>,
    pub test_items: Vec<TestItem>,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub categories: Vec<CategoryIndex>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_images(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Scans a dataset tree into an index with deterministic lexicographic
/// ordering. `category_filter` restricts to the named categories when
/// non-empty.
pub fn scan_dataset(root: &Path, category_filter: &[String]) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut categories = Vec::new();
    for cat_dir in sorted_dirs(root)? {
        let name = cat_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if !category_filter.is_empty() && !category_filter.iter().any(|c| c == &name) {
            continue;
        }
        // Only treat directories that look like dataset categories.
        if !cat_dir.join("train").is_dir() {
            continue;
        }
        let train_good = cat_dir.join("train").join("good");
        if !train_good.is_dir() {
            return Err(Error::Dataset(format!(
                "category `{name}` has no train/good directory"
            )));
        }
        let train_normal = sorted_images(&train_good)?;
        if train_normal.is_empty() {
            return Err(Error::Dataset(format!(
                "category `{name}` has an empty train/good directory"
            )));
        }
        let mut test_items = Vec::new();
        let test_dir = cat_dir.join("test");
        if test_dir.is_dir() {
            for type_dir in sorted_dirs(&test_dir)? {
                let defect_type = type_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                for image_path in sorted_images(&type_dir)? {
                    if defect_type == "good" {
                        test_items.push(TestItem {
                            image_path,
                            defect_type: defect_type.clone(),
                            mask_path: None,
                            label: Label::Normal,
                        });
                    } else {
                        let stem = image_path
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .unwrap_or_default();
                        let mask_path = cat_dir
                            .join("ground_truth")
                            .join(&defect_type)
                            .join(format!("{stem}_mask.png"));
                        if !mask_path.is_file() {
                            return Err(Error::Dataset(format!(
                                "anomalous test image {} has no mask at {}",
                                image_path.display(),
                                mask_path.display()
                            )));
                        }
                        test_items.push(TestItem {
                            image_path,
                            defect_type: defect_type.clone(),
                            mask_path: Some(mask_path),
                            label: Label::Anomalous,
                        });
                    }
                }
            }
        }
        for item in &test_items {
            if train_normal.contains(&item.image_path) {
                return Err(Error::Dataset(format!(
                    "{} appears in both train and test",
                    item.image_path.display()
                )));
            }
        }
        categories.push(CategoryIndex {
            name,
            train_normal,
            test_items,
        });
    }
    if categories.is_empty() {
        return Err(Error::Dataset(format!(
            "no categories found under {}",
            root.display()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        categories,
    })
}

/// JSON manifest schema for non-standard datasets: a list of categories,
/// each with `train` image paths and `test` entries
/// `{image, defect_type, mask?}` (mask required unless defect_type is
/// "good"). Paths are resolved relative to the manifest file.
#[derive(Debug, Deserialize)]
struct Manifest {
    categories: Vec<ManifestCategory>,
}

#[derive(Debug, Deserialize)]
struct ManifestCategory {
    name: String,
    train: Vec<PathBuf>,
    #[serde(default)]
    test: Vec<ManifestTestItem>,
}

#[derive(Debug, Deserialize)]
struct ManifestTestItem {
    image: PathBuf,
    defect_type: String,
    #[serde(default)]
    mask: Option<PathBuf>,
}

/// Reads a JSON manifest into a [`DatasetIndex`].
pub fn scan_manifest(path: &Path) -> Result<DatasetIndex> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut categories = Vec::new();
    for cat in manifest.categories {
        let train_normal: Vec<PathBuf> = cat.train.iter().map(|p| resolve(p)).collect();
        if train_normal.is_empty() {
            return Err(Error::Dataset(format!(
                "manifest category `{}` has no training images",
                cat.name
            )));
        }
        for p in &train_normal {
            if !p.is_file() {
                return Err(Error::Dataset(format!("missing file {}", p.display())));
            }
        }
        let mut test_items = Vec::new();
        for item in cat.test {
            let image_path = resolve(&item.image);
            if !image_path.is_file() {
                return Err(Error::Dataset(format!(
                    "missing file {}",
                    image_path.display()
                )));
            }
            let label = if item.defect_type == "good" {
                Label::Normal
            } else {
                Label::Anomalous
            };
            let mask_path = item.mask.as_deref().map(resolve);
            if label == Label::Anomalous && mask_path.is_none() {
                return Err(Error::Dataset(format!(
                    "anomalous manifest item {} needs a mask",
                    image_path.display()
                )));
            }
            test_items.push(TestItem {
                image_path,
                defect_type: item.defect_type,
                mask_path,
                label,
            });
        }
        categories.push(CategoryIndex {
            name: cat.name,
            train_normal,
            test_items,
        });
    }
    Ok(DatasetIndex {
        root: base,
        categories,
    })
}

/// Decodes an image, converts to 3 channels, resizes to
/// `target_size x target_size` with antialiased bilinear filtering (skipped
/// when the size already matches) and scales to [0, 1].
pub fn load_sample(path: &Path, target_size: usize) -> Result<ImageTensor> {
    let decoded = image::open(path)?.to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!("{} is empty", path.display())));
    }
    let mut tensor = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = decoded.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                tensor.set3(c, y, x, px.0[c] as f64 / 255.0);
            }
        }
    }
    let resized = if (h, w) == (target_size, target_size) {
        tensor
    } else {
        resize_bilinear(&tensor, target_size, target_size).map(|v| v.clamp(0.0, 1.0))
    };
    ImageTensor::new(resized, Some(path.to_path_buf()), ResolutionTag::High)
}

/// Loads a grayscale mask, resizes with nearest-neighbor (preserving
/// binarity) and thresholds at 127 to {0, 1}.
pub fn load_mask(path: &Path, target_size: usize) -> Result<Tensor> {
    let decoded = image::open(path)?.to_luma8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!("{} is empty", path.display())));
    }
    let mut tensor = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            tensor.set2(y, x, decoded.get_pixel(x as u32, y as u32).0[0] as f64);
        }
    }
    let resized = resize_nearest_2d(&tensor, target_size, target_size);
    Ok(resized.map(|v| if v > 127.0 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn temp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hlgfa_data_{name}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn scan_counts_a_wellformed_tree() {
        let root = temp_dir("scan");
        synthetic::write_synthetic_tree(&root, "widget", 3, 2, 2, 64, 5).unwrap();
        let index = scan_dataset(&root, &[]).unwrap();
        assert_eq!(index.categories.len(), 1);
        let cat = &index.categories[0];
        assert_eq!(cat.name, "widget");
        assert_eq!(cat.train_normal.len(), 3);
        assert_eq!(cat.test_items.len(), 4);
        let normals = cat
            .test_items
            .iter()
            .filter(|t| t.label == Label::Normal)
            .count();
        assert_eq!(normals, 2);
        for item in &cat.test_items {
            assert_eq!(item.label == Label::Anomalous, item.mask_path.is_some());
            assert_eq!(item.label == Label::Anomalous, item.defect_type != "good");
        }
    }

    #[test]
    fn empty_train_good_names_the_category() {
        let root = temp_dir("empty_train");
        fs::create_dir_all(root.join("gadget/train/good")).unwrap();
        let err = scan_dataset(&root, &[]).unwrap_err();
        assert!(err.to_string().contains("gadget"), "{err}");
    }

    #[test]
    fn every_indexed_path_decodes() {
        let root = temp_dir("roundtrip");
        synthetic::write_synthetic_tree(&root, "widget", 2, 1, 1, 64, 9).unwrap();
        let index = scan_dataset(&root, &[]).unwrap();
        for cat in &index.categories {
            for p in &cat.train_normal {
                load_sample(p, 64).unwrap();
            }
            for item in &cat.test_items {
                load_sample(&item.image_path, 64).unwrap();
                if let Some(mask) = &item.mask_path {
                    load_mask(mask, 64).unwrap();
                }
            }
        }
    }

    #[test]
    fn load_sample_scales_and_short_circuits() {
        let root = temp_dir("load");
        let path = root.join("white.png");
        let img = image::RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255]));
        img.save(&path).unwrap();
        let loaded = load_sample(&path, 64).unwrap();
        assert!(loaded.data.data().iter().all(|&v| v == 1.0));
        assert_eq!(loaded.hw(), (64, 64));
    }

    #[test]
    fn load_sample_resizes_with_bilinear_oracle() {
        let root = temp_dir("resize");
        let path = root.join("ramp.png");
        let mut img = image::RgbImage::new(70, 50);
        for y in 0..50 {
            for x in 0..70 {
                let v = ((x * 255) / 69) as u8;
                img.put_pixel(x, y, image::Rgb([v, v, v]));
            }
        }
        img.save(&path).unwrap();
        let loaded = load_sample(&path, 64).unwrap();
        assert_eq!(loaded.hw(), (64, 64));
        // independent oracle on the decoded tensor
        let mut tensor = Tensor::zeros(&[3, 50, 70]);
        for y in 0..50 {
            for x in 0..70 {
                let v = ((x * 255) / 69) as f64 / 255.0;
                for c in 0..3 {
                    tensor.set3(c, y, x, v);
                }
            }
        }
        let expect = resize_bilinear(&tensor, 64, 64);
        // corners within 8-bit quantization slack
        for (y, x) in [(0usize, 0usize), (0, 63), (63, 0), (63, 63)] {
            assert!((loaded.data.at3(0, y, x) - expect.at3(0, y, x)).abs() < 1e-3);
        }
    }

    #[test]
    fn masks_threshold_and_replicate() {
        let root = temp_dir("mask");
        let zero_path = root.join("zero.png");
        image::GrayImage::from_pixel(8, 8, image::Luma([0]))
            .save(&zero_path)
            .unwrap();
        let zeros = load_mask(&zero_path, 8).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));

        let ones_path = root.join("ones.png");
        image::GrayImage::from_pixel(8, 8, image::Luma([255]))
            .save(&ones_path)
            .unwrap();
        let ones = load_mask(&ones_path, 8).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));

        // 2x2 checkerboard -> 4x4 block replication under nearest neighbor
        let checker_path = root.join("checker.png");
        let mut checker = image::GrayImage::new(2, 2);
        checker.put_pixel(0, 0, image::Luma([255]));
        checker.put_pixel(1, 1, image::Luma([255]));
        checker.save(&checker_path).unwrap();
        let mask = load_mask(&checker_path, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (y < 2) == (x < 2) { 1.0 } else { 0.0 };
                assert_eq!(mask.at2(y, x), expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let root = temp_dir("manifest");
        synthetic::write_synthetic_tree(&root, "widget", 2, 1, 1, 64, 13).unwrap();
        let manifest = serde_json::json!({
            "categories": [{
                "name": "widget",
                "train": ["widget/train/good/000.png", "widget/train/good/001.png"],
                "test": [
                    {"image": "widget/test/good/000.png", "defect_type": "good"},
                    {"image": "widget/test/defect/000.png", "defect_type": "defect",
                     "mask": "widget/ground_truth/defect/000_mask.png"}
                ]
            }]
        });
        let path = root.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let index = scan_manifest(&path).unwrap();
        assert_eq!(index.categories.len(), 1);
        assert_eq!(index.categories[0].train_normal.len(), 2);
        assert_eq!(index.categories[0].test_items.len(), 2);
    }
}
