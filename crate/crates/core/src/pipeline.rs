//! Orchestration: training on normal samples, test-set evaluation, and
//! single-image prediction.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive, DType};
use crate::augment::paired_augment;
use crate::backbone::{make_dual_views, Backbone, FeaturePyramid, ImageTensor};
use crate::config::RunConfig;
use crate::data::{load_mask, load_sample, scan_dataset, DatasetIndex, Label};
use crate::error::{Error, Result};
use crate::guidance::{align, GuidanceParameters, DEFAULT_STRUCTURE_KERNELS};
use crate::metrics::{
    auroc, average_precision, f1_optimal, pro_score, CategoryMetrics, EvalReport, PixelScoredSet,
    ScoredSet, DEFAULT_PRO_FPR_LIMIT,
};
use crate::objective::{composite_loss_and_grads, LossReport};
use crate::rng::{derive_seed, XorShift64Star};
use crate::scoring::{
    anomaly_map_with, crop_map, image_score, postprocess_map, reliability_modulate,
    structural_consistency, write_heatmap_png, AnomalyMap, HeatmapNorm,
};
use crate::tensor::{NamedTensors, Tensor};

/// Cosine-annealed learning rate:
/// `lr(e) = lr_end + (lr_start - lr_end) * (1 + cos(pi * e / E)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    let t = epoch as f64 / total_epochs as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with bias correction; state is kept per parameter name so updates
/// are order-independent and reproducible.
pub struct Adam {
    m: NamedTensors,
    v: NamedTensors,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &NamedTensors) -> Self {
        let mut m = NamedTensors::new();
        let mut v = NamedTensors::new();
        for (name, tensor) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(tensor.shape()));
            v.insert(name.clone(), Tensor::zeros(tensor.shape()));
        }
        Self {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.0.iter_mut() {
            let grad = grads.get(name)?;
            let m = self.m.0.get_mut(name).unwrap();
            let v = self.v.0.get_mut(name).unwrap();
            for i in 0..tensor.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                tensor.data_mut()[i] -= update;
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("parameters after optimizer step".into()));
        }
        Ok(())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash = (hash ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn config_hash(config: &RunConfig) -> Result<String> {
    Ok(format!(
        "{:016x}",
        fnv1a64(serde_json::to_string(config)?.as_bytes())
    ))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    loss_history_digest: String,
}

/// Trained guidance parameters plus the exact configuration they were
/// produced under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: GuidanceParameters,
    pub config: RunConfig,
    pub epoch: usize,
    pub loss_history_digest: String,
}

impl Checkpoint {
    /// Writes `params.hlgw` (f64, bit-exact round trip) and `meta.json`
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        archive::save(
            &dir.join("params.hlgw"),
            &self.params.to_named(),
            DType::F64,
        )?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: config_hash(&self.config)?,
            epoch: self.epoch,
            loss_history_digest: self.loss_history_digest.clone(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if config_hash(&meta.config)? != meta.config_hash {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {} config hash mismatch",
                dir.display()
            )));
        }
        let named = Archive::read(&dir.join("params.hlgw"))?.all_tensors()?;
        let params = GuidanceParameters::from_named(
            &named,
            &meta.config.selected_channels(),
            &DEFAULT_STRUCTURE_KERNELS,
        )?;
        Ok(Self {
            params,
            config: meta.config,
            epoch: meta.epoch,
            loss_history_digest: meta.loss_history_digest,
        })
    }
}

/// Restricts a pyramid to the configured 1-based stage selection,
/// re-indexing the kept stages consecutively.
pub fn select_stages(pyramid: FeaturePyramid, stages: &[usize]) -> Result<FeaturePyramid> {
    let mut kept = Vec::with_capacity(stages.len());
    for (new_index, &s) in stages.iter().enumerate() {
        if s < 1 || s > pyramid.stages.len() {
            return Err(Error::InvalidConfig(format!(
                "stage {s} outside 1..={}",
                pyramid.stages.len()
            )));
        }
        let mut stage = pyramid.stages[s - 1].clone();
        stage.stage_index = new_index + 1;
        kept.push(stage);
    }
    Ok(FeaturePyramid {
        stages: kept,
        backbone_id: pyramid.backbone_id,
        input_resolution: pyramid.input_resolution,
        original_resolution: pyramid.original_resolution,
    })
}

/// Extracts the selected dual-view pyramids for one image pair.
fn dual_pyramids(
    backbone: &Backbone,
    high: &ImageTensor,
    low: &ImageTensor,
    stages: &[usize],
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    let hr = select_stages(backbone.extract(high)?, stages)?;
    let lr = select_stages(backbone.extract(low)?, stages)?;
    Ok((hr, lr))
}

/// Outcome of one training group (one category, or the unified pool).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub group: String,
    pub checkpoint_dir: PathBuf,
    pub final_epoch_mean_loss: f64,
    pub epoch_mean_losses: Vec<f64>,
}

/// Trains guidance parameters on the normal samples of every configured
/// group (per category by default, one pooled group with `unified`).
/// Checkpoints land under `<output_dir>/<group>/checkpoints/`.
pub fn train(config: &RunConfig) -> Result<Vec<TrainOutcome>> {
    config.validate()?;
    let index = scan_dataset(&config.dataset.root, &config.dataset.categories)?;
    let backbone = Backbone::from_spec(&config.backbone.to_spec())?;
    let groups: Vec<(String, Vec<PathBuf>)> = if config.dataset.unified {
        let mut all = Vec::new();
        for cat in &index.categories {
            all.extend(cat.train_normal.iter().cloned());
        }
        vec![("unified".into(), all)]
    } else {
        index
            .categories
            .iter()
            .map(|c| (c.name.clone(), c.train_normal.clone()))
            .collect()
    };
    let mut outcomes = Vec::new();
    for (group, paths) in groups {
        outcomes.push(train_group(config, &backbone, &group, &paths)?);
    }
    Ok(outcomes)
}

fn train_group(
    config: &RunConfig,
    backbone: &Backbone,
    group: &str,
    paths: &[PathBuf],
) -> Result<TrainOutcome> {
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "group `{group}` has no training samples"
        )));
    }
    let weights = config.loss.weights()?;
    let opt = &config.optimizer;
    let group_dir = config.output_dir.join(group);
    let logs_dir = group_dir.join("logs");
    fs::create_dir_all(&logs_dir)?;
    let mut loss_log = String::from("step,align,l1,js,gram,total,learning_rate\n");

    // Backbone frozen-ness guard: hash before and after training.
    let backbone_hash = backbone.weights_hash();

    // Samples are decoded once and kept in memory; augmentation re-noises
    // them per epoch.
    let images: Vec<ImageTensor> = paths
        .iter()
        .map(|p| load_sample(p, config.dataset.target_size))
        .collect::<Result<_>>()?;

    let mut params = GuidanceParameters::init(
        &config.selected_channels(),
        &DEFAULT_STRUCTURE_KERNELS,
        opt.seed,
    );
    let mut named = params.to_named();
    let mut adam = Adam::new(&named);
    let mut step = 0u64;
    let mut epoch_means = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let lr = cosine_lr(
            epoch,
            opt.epochs,
            opt.learning_rate_start,
            opt.learning_rate_end,
        );
        let mut order: Vec<usize> = (0..images.len()).collect();
        XorShift64Star::new(derive_seed(opt.seed, epoch as u64)).shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(opt.batch_size) {
            let mut grads_acc: Option<NamedTensors> = None;
            let mut batch_report = LossReport {
                align: 0.0,
                l1: 0.0,
                js: 0.0,
                gram: 0.0,
                total: 0.0,
            };
            for &sample_idx in batch {
                let aug_seed =
                    derive_seed(opt.seed, (epoch as u64) << 32 | (sample_idx as u64 + 1));
                let spec = config.augment.with_seed(aug_seed);
                let (high, low) = paired_augment(&images[sample_idx], &spec, config.lr_factor)?;
                let (hr, lr_pyr) = dual_pyramids(backbone, &high, &low, &config.stages)?;
                let (report, grads) = composite_loss_and_grads(&lr_pyr, &hr, &params, &weights)?;
                if !report.total.is_finite() {
                    let dump = group_dir.join("logs").join("diagnostic.txt");
                    let mut f = fs::File::create(&dump)?;
                    writeln!(f, "non-finite loss at step {step}, epoch {epoch}")?;
                    writeln!(f, "sample index {sample_idx}")?;
                    writeln!(f, "report: {report:?}")?;
                    return Err(Error::Training(format!(
                        "non-finite loss at step {step}; diagnostic at {}",
                        dump.display()
                    )));
                }
                batch_report.align += report.align;
                batch_report.l1 += report.l1;
                batch_report.js += report.js;
                batch_report.gram += report.gram;
                batch_report.total += report.total;
                grads_acc = Some(match grads_acc {
                    None => grads,
                    Some(mut acc) => {
                        for (name, tensor) in grads.iter() {
                            let dst = acc.0.get_mut(name).unwrap();
                            for (d, s) in dst.data_mut().iter_mut().zip(tensor.data()) {
                                *d += s;
                            }
                        }
                        acc
                    }
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = grads_acc.unwrap();
            for tensor in grads.0.values_mut() {
                for v in tensor.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut named, &grads, lr)?;
            params.apply_named(&named)?;
            step += 1;
            epoch_loss_sum += batch_report.total * scale;
            epoch_count += 1;
            loss_log.push_str(&format!(
                "{step},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                batch_report.align * scale,
                batch_report.l1 * scale,
                batch_report.js * scale,
                batch_report.gram * scale,
                batch_report.total * scale,
                lr
            ));
        }
        let epoch_mean = epoch_loss_sum / epoch_count as f64;
        epoch_means.push(epoch_mean);
        fs::write(logs_dir.join("loss.csv"), &loss_log)?;

        let ckpt = Checkpoint {
            params: params.clone(),
            config: config.clone(),
            epoch,
            loss_history_digest: format!("{:016x}", fnv1a64(loss_log.as_bytes())),
        };
        ckpt.save(
            &group_dir
                .join("checkpoints")
                .join(format!("epoch_{epoch:04}")),
        )?;
        ckpt.save(&group_dir.join("checkpoints").join("latest"))?;
    }

    if backbone.weights_hash() != backbone_hash {
        return Err(Error::Training(
            "backbone weights changed during training".into(),
        ));
    }

    Ok(TrainOutcome {
        group: group.to_string(),
        checkpoint_dir: group_dir.join("checkpoints").join("latest"),
        final_epoch_mean_loss: *epoch_means.last().unwrap(),
        epoch_mean_losses: epoch_means,
    })
}

/// Scores one already-loaded image with a trained checkpoint; returns the
/// post-processed map (cropped to the original resolution) with
/// `image_score` filled in.
pub fn score_image(
    backbone: &Backbone,
    checkpoint: &Checkpoint,
    image: &ImageTensor,
) -> Result<AnomalyMap> {
    let config = &checkpoint.config;
    let (high, low) = make_dual_views(image, config.lr_factor)?;
    let (hr, lr_pyr) = dual_pyramids(backbone, &high, &low, &config.stages)?;
    let aligned = align(&lr_pyr, &hr, &checkpoint.params)?;
    let mut map = anomaly_map_with(&hr, &aligned.stages, config.score.stage_norm)?;
    if config.score.reliability_enabled {
        let mut reliability = structural_consistency(&aligned.bundles, &config.score)?;
        map = reliability_modulate(&map, &mut reliability, &config.score)?;
    }
    let (orig_h, orig_w) = hr.original_resolution;
    let mut map = crop_map(&map, orig_h, orig_w);
    map = postprocess_map(&map, &config.score)?;
    map.image_score = image_score(&map, &config.score)?;
    Ok(map)
}

/// Evaluates a checkpoint over the test split of every category in the
/// index. Reports are written as CSV and JSON when `report_dir` is given.
pub fn evaluate(
    checkpoint: &Checkpoint,
    index: &DatasetIndex,
    report_dir: Option<&Path>,
) -> Result<EvalReport> {
    let config = &checkpoint.config;
    let backbone = Backbone::from_spec(&config.backbone.to_spec())?;
    let mut rows = Vec::new();
    for category in &index.categories {
        if category.test_items.is_empty() {
            return Err(Error::Dataset(format!(
                "category `{}` has no test items",
                category.name
            )));
        }
        let mut image_set = ScoredSet::default();
        let mut pixel_set = PixelScoredSet::default();
        for item in &category.test_items {
            let image = load_sample(&item.image_path, config.dataset.target_size)?;
            let map = score_image(&backbone, checkpoint, &image)?;
            image_set.push(
                map.image_score,
                if item.label == Label::Anomalous { 1 } else { 0 },
            );
            let mask = match (&item.mask_path, item.label) {
                (Some(path), Label::Anomalous) => load_mask(path, config.dataset.target_size)?,
                (None, Label::Normal) => {
                    let (h, w) = map.scores.hw();
                    Tensor::zeros(&[h, w])
                }
                _ => {
                    return Err(Error::Dataset(format!(
                        "{} has inconsistent label/mask metadata",
                        item.image_path.display()
                    )))
                }
            };
            pixel_set.push(map.scores.clone(), mask)?;
        }
        let first = image_set.scores[0];
        if image_set.scores.iter().all(|&s| s == first) {
            return Err(Error::DegenerateScores);
        }
        let (f1_i, _) = f1_optimal(&image_set)?;
        let pooled = pixel_set.pooled();
        let (f1_p, _) = f1_optimal(&pooled)?;
        rows.push(CategoryMetrics {
            category: category.name.clone(),
            auc_i: auroc(&image_set)?,
            ap_i: average_precision(&image_set)?,
            f1_i,
            auc_p: auroc(&pooled)?,
            ap_p: average_precision(&pooled)?,
            pro_p: pro_score(&pixel_set, DEFAULT_PRO_FPR_LIMIT)?,
            f1_p,
        });
    }
    let report = EvalReport::from_categories(rows)?;
    if let Some(dir) = report_dir {
        fs::create_dir_all(dir)?;
        report.write_csv(&dir.join("metrics.csv"))?;
        report.write_json(&dir.join("metrics.json"))?;
    }
    Ok(report)
}

/// Prediction artifacts for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub image_score: f64,
    pub heatmap_path: PathBuf,
    pub raw_path: Option<PathBuf>,
}

/// Scores a single image and writes `<stem>_heatmap.png` (16-bit grayscale)
/// plus, optionally, the raw float map as an HLGW archive for exact
/// regression comparisons.
pub fn predict(
    checkpoint: &Checkpoint,
    image_path: &Path,
    out_dir: &Path,
    norm: HeatmapNorm,
    write_raw: bool,
) -> Result<Prediction> {
    let backbone = Backbone::from_spec(&checkpoint.config.backbone.to_spec())?;
    let image = load_sample(image_path, checkpoint.config.dataset.target_size)?;
    let map = score_image(&backbone, checkpoint, &image)?;
    fs::create_dir_all(out_dir)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let heatmap_path = out_dir.join(format!("{stem}_heatmap.png"));
    write_heatmap_png(&heatmap_path, &map.scores, norm)?;
    let raw_path = if write_raw {
        let path = out_dir.join(format!("{stem}_raw.hlgw"));
        let mut tensors = NamedTensors::new();
        tensors.insert("heatmap", map.scores.clone());
        archive::save(&path, &tensors, DType::F64)?;
        Some(path)
    } else {
        None
    };
    Ok(Prediction {
        image_score: map.image_score,
        heatmap_path,
        raw_path,
    })
}

/// Exports the seeded reference backbone as an HLGW archive.
pub fn export_reference_backbone(seed: u64, path: &Path) -> Result<()> {
    let backbone = Backbone::from_spec(&crate::backbone::BackboneSpec::reference(seed))?;
    backbone.save_archive(path)
}
