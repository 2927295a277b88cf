//! Anomaly map construction and image-level scoring.
//!
//! The raw anomaly map sums per-stage channel L2 distances between aligned
//! LR and HR features, upsampled to the extractor's input grid. A
//! reliability gate derived from the local structural consistency of the
//! fused guidance field attenuates responses in unstable regions, followed
//! by Gaussian smoothing and a pixel-to-image reduction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::guidance::GuidanceBundle;
use crate::tensor::{gaussian_smooth_2d, resize_bilinear, Tensor};

const SIM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ImageReduction {
    Max,
    TopKMean { k: usize },
}

/// Optional per-stage normalization of the discrepancy maps. `Literal`
/// follows the plain cross-stage sum; `SqrtChannels` divides each stage map
/// by the square root of its channel count before summing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageNorm {
    Literal,
    SqrtChannels,
}

/// Which stages contribute to the reliability field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityStage {
    Deepest,
    AverageAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Consistency threshold of the reliability gate.
    pub tau: f64,
    /// Transition smoothness of the reliability gate.
    pub delta: f64,
    /// Odd neighborhood side length for structural consistency.
    pub neighborhood: usize,
    /// Gaussian smoothing sigma in input pixels (0 disables smoothing).
    pub smoothing_sigma: f64,
    pub reliability_enabled: bool,
    pub image_reduction: ImageReduction,
    pub stage_norm: StageNorm,
    pub reliability_stage: ReliabilityStage,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            delta: 0.1,
            neighborhood: 3,
            smoothing_sigma: 4.0,
            reliability_enabled: true,
            image_reduction: ImageReduction::Max,
            stage_norm: StageNorm::Literal,
            reliability_stage: ReliabilityStage::Deepest,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        // negated form so a NaN delta fails validation
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.neighborhood < 3 || self.neighborhood.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "neighborhood must be an odd integer >= 3, got {}",
                self.neighborhood
            )));
        }
        if self.smoothing_sigma < 0.0 {
            return Err(Error::InvalidConfig("smoothing_sigma must be >= 0".into()));
        }
        if let ImageReduction::TopKMean { k } = self.image_reduction {
            if k == 0 {
                return Err(Error::InvalidConfig("top-k mean needs k >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Per-pixel anomaly scores at the extractor's input resolution, plus the
/// raw per-stage maps before fusion.
#[derive(Clone, Debug)]
pub struct AnomalyMap {
    pub scores: Tensor,
    pub stage_maps: Vec<Tensor>,
    /// Filled by the pipeline once post-processing is done.
    pub image_score: f64,
}

/// Local structural consistency of the fused guidance field.
#[derive(Clone, Debug)]
pub struct ReliabilityMap {
    /// Per contributing stage, at that stage's resolution; values in [-1, 1].
    pub sim: Vec<Tensor>,
    /// Logistic gate at map resolution, filled by [`reliability_modulate`].
    pub modulation: Option<Tensor>,
}

/// Cross-resolution discrepancy map (pre-modulation): per stage the channel
/// L2 norm of `aligned - hr`, upsampled to the input grid and summed.
pub fn anomaly_map(hr_pyramid: &FeaturePyramid, aligned: &[FeatureMap]) -> Result<AnomalyMap> {
    if hr_pyramid.stages.len() != aligned.len() {
        return Err(Error::ShapeMismatch(format!(
            "hr has {} stages, aligned has {}",
            hr_pyramid.stages.len(),
            aligned.len()
        )));
    }
    let (out_h, out_w) = hr_pyramid.input_resolution;
    let mut total = Tensor::zeros(&[out_h, out_w]);
    let mut stage_maps = Vec::with_capacity(aligned.len());
    for (hr, al) in hr_pyramid.stages.iter().zip(aligned) {
        if hr.data.shape() != al.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "stage {}: hr {:?} vs aligned {:?}",
                hr.stage_index,
                hr.data.shape(),
                al.data.shape()
            )));
        }
        let (c, h, w) = (hr.channels(), hr.hw().0, hr.hw().1);
        let plane = h * w;
        let mut stage_map = Tensor::zeros(&[h, w]);
        for i in 0..plane {
            let mut acc = 0.0;
            for ch in 0..c {
                let d = al.data.data()[ch * plane + i] - hr.data.data()[ch * plane + i];
                acc += d * d;
            }
            stage_map.data_mut()[i] = acc.sqrt();
        }
        let upsampled = {
            // resize works on [C, H, W]; lift the map to one channel
            let lifted = Tensor::from_vec(&[1, h, w], stage_map.data().to_vec());
            let up = resize_bilinear(&lifted, out_h, out_w);
            Tensor::from_vec(&[out_h, out_w], up.into_data())
        };
        for (t, u) in total.data_mut().iter_mut().zip(upsampled.data()) {
            *t += u;
        }
        stage_maps.push(stage_map);
    }
    Ok(AnomalyMap {
        scores: total,
        stage_maps,
        image_score: 0.0,
    })
}

/// Variant of [`anomaly_map`] honoring the configured stage normalization.
pub fn anomaly_map_with(
    hr_pyramid: &FeaturePyramid,
    aligned: &[FeatureMap],
    stage_norm: StageNorm,
) -> Result<AnomalyMap> {
    let mut map = anomaly_map(hr_pyramid, aligned)?;
    if stage_norm == StageNorm::SqrtChannels {
        let (out_h, out_w) = hr_pyramid.input_resolution;
        let mut total = Tensor::zeros(&[out_h, out_w]);
        for (stage_map, hr) in map.stage_maps.iter().zip(&hr_pyramid.stages) {
            let scale = 1.0 / (hr.channels() as f64).sqrt();
            let (h, w) = stage_map.hw();
            let lifted = Tensor::from_vec(&[1, h, w], stage_map.data().to_vec());
            let up = resize_bilinear(&lifted, out_h, out_w);
            for (t, u) in total.data_mut().iter_mut().zip(up.data()) {
                *t += scale * u;
            }
        }
        map.scores = total;
    }
    Ok(map)
}

fn consistency_of(fused: &Tensor, neighborhood: usize) -> Tensor {
    let (c, h, w) = (fused.shape()[0], fused.shape()[1], fused.shape()[2]);
    let plane = h * w;
    // normalize each location's channel vector to unit L2 norm
    let mut unit = vec![0.0; c * plane];
    for i in 0..plane {
        let mut norm2 = 0.0;
        for ch in 0..c {
            let v = fused.data()[ch * plane + i];
            norm2 += v * v;
        }
        let denom = norm2.sqrt() + SIM_EPS;
        for ch in 0..c {
            unit[ch * plane + i] = fused.data()[ch * plane + i] / denom;
        }
    }
    let half = (neighborhood / 2) as isize;
    let mut sim = Tensor::zeros(&[h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = (y as usize) * w + x as usize;
            let mut acc = 0.0;
            let mut count = 0usize;
            for dy in -half..=half {
                for dx in -half..=half {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = crate::tensor::reflect_index(y + dy, h);
                    let nx = crate::tensor::reflect_index(x + dx, w);
                    let neighbor = ny * w + nx;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += unit[ch * plane + center] * unit[ch * plane + neighbor];
                    }
                    acc += dot;
                    count += 1;
                }
            }
            sim.set2(y as usize, x as usize, acc / count as f64);
        }
    }
    sim
}

/// Structural consistency per stage: mean dot product of the unit-normalized
/// fused guidance against its (k*k - 1)-cell reflect-padded neighborhood.
pub fn structural_consistency(
    bundles: &[GuidanceBundle],
    config: &ScoreConfig,
) -> Result<ReliabilityMap> {
    config.validate()?;
    if bundles.is_empty() {
        return Err(Error::Scoring("no guidance bundles".into()));
    }
    let sim = match config.reliability_stage {
        ReliabilityStage::Deepest => {
            vec![consistency_of(
                &bundles[bundles.len() - 1].fused,
                config.neighborhood,
            )]
        }
        ReliabilityStage::AverageAll => bundles
            .iter()
            .map(|b| consistency_of(&b.fused, config.neighborhood))
            .collect(),
    };
    Ok(ReliabilityMap {
        sim,
        modulation: None,
    })
}

/// Reliability gating: `A'(x) = sigmoid((sim(x) - tau) / delta) * A(x)`.
/// The consistency fields are upsampled to map resolution (and averaged when
/// more than one stage contributes) before gating.
pub fn reliability_modulate(
    map: &AnomalyMap,
    reliability: &mut ReliabilityMap,
    config: &ScoreConfig,
) -> Result<AnomalyMap> {
    config.validate()?;
    let (h, w) = map.scores.hw();
    let mut sim_up = Tensor::zeros(&[h, w]);
    for sim in &reliability.sim {
        let (sh, sw) = sim.hw();
        let lifted = Tensor::from_vec(&[1, sh, sw], sim.data().to_vec());
        let up = resize_bilinear(&lifted, h, w);
        for (acc, v) in sim_up.data_mut().iter_mut().zip(up.data()) {
            *acc += v / reliability.sim.len() as f64;
        }
    }
    let modulation = sim_up.map(|s| 1.0 / (1.0 + (-(s - config.tau) / config.delta).exp()));
    let scores = Tensor::from_vec(
        &[h, w],
        map.scores
            .data()
            .iter()
            .zip(modulation.data())
            .map(|(a, m)| a * m)
            .collect(),
    );
    reliability.modulation = Some(modulation);
    Ok(AnomalyMap {
        scores,
        stage_maps: map.stage_maps.clone(),
        image_score: map.image_score,
    })
}

/// Gaussian smoothing (sigma in input pixels, truncated at 4 sigma);
/// `sigma == 0` is a bit-exact identity.
pub fn postprocess_map(map: &AnomalyMap, config: &ScoreConfig) -> Result<AnomalyMap> {
    config.validate()?;
    Ok(AnomalyMap {
        scores: gaussian_smooth_2d(&map.scores, config.smoothing_sigma),
        stage_maps: map.stage_maps.clone(),
        image_score: map.image_score,
    })
}

/// Crops an anomaly map back to the original (pre-padding) resolution.
pub fn crop_map(map: &AnomalyMap, out_h: usize, out_w: usize) -> AnomalyMap {
    AnomalyMap {
        scores: crate::tensor::crop_2d(&map.scores, out_h, out_w),
        stage_maps: map.stage_maps.clone(),
        image_score: map.image_score,
    }
}

/// Pixel-to-image reduction of a post-processed map.
pub fn image_score(map: &AnomalyMap, config: &ScoreConfig) -> Result<f64> {
    config.validate()?;
    let data = map.scores.data();
    match config.image_reduction {
        ImageReduction::Max => Ok(data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))),
        ImageReduction::TopKMean { k } => {
            if k > data.len() {
                return Err(Error::Scoring(format!(
                    "top-k mean with k={k} exceeds {} pixels",
                    data.len()
                )));
            }
            let mut sorted: Vec<f64> = data.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            Ok(sorted[..k].iter().sum::<f64>() / k as f64)
        }
    }
}

/// Normalization mode for 16-bit heatmap export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeatmapNorm {
    PerImage,
    Global { lo: f64, hi: f64 },
}

/// Writes a score map as a 16-bit grayscale PNG, min-max normalized
/// according to `norm`.
pub fn write_heatmap_png(path: &Path, scores: &Tensor, norm: HeatmapNorm) -> Result<()> {
    let (h, w) = scores.hw();
    let (lo, hi) = match norm {
        HeatmapNorm::PerImage => {
            let lo = scores.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = scores
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
        HeatmapNorm::Global { lo, hi } => (lo, hi),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = ((scores.at2(y, x) - lo) / span).clamp(0.0, 1.0);
            img.put_pixel(
                x as u32,
                y as u32,
                image::Luma([(v * 65535.0).round() as u16]),
            );
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path)?;
    Ok(())
}
