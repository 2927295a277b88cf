//! The learnable guided-alignment core.
//!
//! Per pyramid stage, low-resolution features are upsampled to the
//! high-resolution grid, stabilized, and corrected under guidance distilled
//! from the HR pyramid: a structure prior (multi-scale depthwise convs over
//! the deeper HR stage), a detail prior (spatial alignment plus channel
//! projection of the stage itself), their sum as the fused guidance field,
//! a spatially varying FiLM modulation generated from that field, and a
//! gated residual correction on top of the raw upsampled LR features.
//!
//! Parameters are initialized so the whole operator starts as the identity:
//! FiLM at `gamma = 1, beta = 0`, the residual branch at zero, and the gate
//! biased to -2 so early corrections stay small.

use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::XorShift64Star;
use crate::tensor::{
    channel_norm, concat_channels, conv2d_same, depthwise_conv_same, resize_bilinear,
    slice_channels, NamedTensors, Tensor,
};

/// Channel-normalization epsilon for LR stabilization.
pub const STABILIZE_EPS: f64 = 1e-5;
/// Initial gate bias; `sigmoid(-2) ~ 0.12`.
pub const GATE_BIAS_INIT: f64 = -2.0;
/// Default multi-scale depthwise kernel set for the structure prior.
pub const DEFAULT_STRUCTURE_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug)]
pub struct StructurePrior {
    pub data: Tensor,
}

#[derive(Clone, Debug)]
pub struct DetailPrior {
    pub data: Tensor,
}

/// Per-stage guidance: the two priors, their exact sum, and the FiLM fields
/// generated from the sum.
#[derive(Clone, Debug)]
pub struct GuidanceBundle {
    pub structure: StructurePrior,
    pub detail: DetailPrior,
    pub fused: Tensor,
    pub film_gamma: Tensor,
    pub film_beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable parameters of one stage's alignment operator.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// One depthwise filter bank per structure kernel size, over the deeper
    /// HR stage's channels.
    pub structure_dw: Vec<ConvParams>,
    /// 1x1 projection of the summed depthwise responses to stage channels.
    pub structure_proj: ConvParams,
    /// 3x3 depthwise spatial-alignment filter over the stage itself.
    pub detail_dw: ConvParams,
    /// 1x1 channel projection for the detail prior.
    pub detail_proj: ConvParams,
    /// 1x1 conv mapping fused guidance to per-channel (gamma, beta) fields.
    pub film: ConvParams,
    /// 3x3 conv over [guidance; modulated] with a sigmoid head.
    pub gate: ConvParams,
    /// 3x3 conv over [guidance; modulated] predicting the residual.
    pub residual: ConvParams,
}

/// The only trainable state of the model (the backbone stays frozen).
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceParameters {
    pub stages: Vec<StageParams>,
    pub structure_kernels: Vec<usize>,
    /// Channel count per stage (guidance channels equal LR stage channels).
    pub stage_channels: Vec<usize>,
    /// Channels of the structure-prior input per stage (the next-deeper
    /// stage, or the stage itself for the deepest).
    pub deep_channels: Vec<usize>,
}

fn draw(rng: &mut XorShift64Star, shape: &[usize], bound: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len)
            .map(|_| rng.uniform(-bound, bound) as f32 as f64)
            .collect(),
    )
}

impl GuidanceParameters {
    /// Fresh identity-at-start parameters for a backbone with the given
    /// per-stage channels. Weights are drawn from the documented xorshift
    /// generator in stage order.
    pub fn init(stage_channels: &[usize], structure_kernels: &[usize], seed: u64) -> Self {
        let mut rng = XorShift64Star::new(seed);
        let deep_channels: Vec<usize> = (0..stage_channels.len())
            .map(|i| stage_channels[(i + 1).min(stage_channels.len() - 1)])
            .collect();
        let mut stages = Vec::with_capacity(stage_channels.len());
        for (i, &c) in stage_channels.iter().enumerate() {
            let c_deep = deep_channels[i];
            let structure_dw = structure_kernels
                .iter()
                .map(|&k| ConvParams {
                    weight: draw(&mut rng, &[c_deep, k, k], 1.0 / k as f64),
                    bias: Tensor::zeros(&[c_deep]),
                })
                .collect();
            let structure_proj = ConvParams {
                weight: draw(&mut rng, &[c, c_deep, 1, 1], 1.0 / (c_deep as f64).sqrt()),
                bias: Tensor::zeros(&[c]),
            };
            let detail_dw = ConvParams {
                weight: draw(&mut rng, &[c, 3, 3], 1.0 / 3.0),
                bias: Tensor::zeros(&[c]),
            };
            let detail_proj = ConvParams {
                weight: draw(&mut rng, &[c, c, 1, 1], 1.0 / (c as f64).sqrt()),
                bias: Tensor::zeros(&[c]),
            };
            // FiLM starts as the identity: zero weights, gamma bias 1,
            // beta bias 0.
            let mut film_bias = Tensor::zeros(&[2 * c]);
            for v in film_bias.data_mut()[..c].iter_mut() {
                *v = 1.0;
            }
            let film = ConvParams {
                weight: Tensor::zeros(&[2 * c, c, 1, 1]),
                bias: film_bias,
            };
            let gate = ConvParams {
                weight: draw(&mut rng, &[c, 2 * c, 3, 3], 1.0 / (18.0 * c as f64).sqrt()),
                bias: Tensor::filled(&[c], GATE_BIAS_INIT),
            };
            // Zero residual branch: the operator is exactly the identity
            // until the first optimizer step.
            let residual = ConvParams {
                weight: Tensor::zeros(&[c, 2 * c, 3, 3]),
                bias: Tensor::zeros(&[c]),
            };
            stages.push(StageParams {
                structure_dw,
                structure_proj,
                detail_dw,
                detail_proj,
                film,
                gate,
                residual,
            });
        }
        Self {
            stages,
            structure_kernels: structure_kernels.to_vec(),
            stage_channels: stage_channels.to_vec(),
            deep_channels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.to_named().total_values()
    }

    /// Flattens to archive naming: `guidance/stage{i}/<part>/{weight,bias}`.
    pub fn to_named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let mut put = |part: &str, conv: &ConvParams| {
                out.insert(
                    format!("guidance/stage{i}/{part}/weight"),
                    conv.weight.clone(),
                );
                out.insert(format!("guidance/stage{i}/{part}/bias"), conv.bias.clone());
            };
            for (j, dw) in stage.structure_dw.iter().enumerate() {
                put(&format!("structure_dw{}", self.structure_kernels[j]), dw);
            }
            put("structure_proj", &stage.structure_proj);
            put("detail_dw", &stage.detail_dw);
            put("detail_proj", &stage.detail_proj);
            put("film", &stage.film);
            put("gate", &stage.gate);
            put("residual", &stage.residual);
        }
        out
    }

    /// Rebuilds parameters from named tensors, validating every shape
    /// against a freshly initialized layout.
    pub fn from_named(
        named: &NamedTensors,
        stage_channels: &[usize],
        structure_kernels: &[usize],
    ) -> Result<Self> {
        let mut params = Self::init(stage_channels, structure_kernels, 0);
        let template = params.to_named();
        for (name, tensor) in template.iter() {
            let loaded = named.get(name)?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: tensor.shape().to_vec(),
                    found: loaded.shape().to_vec(),
                });
            }
        }
        params.apply_named(named)?;
        Ok(params)
    }

    /// Overwrites parameter values from named tensors (shapes must match).
    pub fn apply_named(&mut self, named: &NamedTensors) -> Result<()> {
        let kernels = self.structure_kernels.clone();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let take = |part: &str, conv: &mut ConvParams| -> Result<()> {
                conv.weight = named
                    .get(&format!("guidance/stage{i}/{part}/weight"))?
                    .clone();
                conv.bias = named
                    .get(&format!("guidance/stage{i}/{part}/bias"))?
                    .clone();
                Ok(())
            };
            for (j, dw) in stage.structure_dw.iter_mut().enumerate() {
                take(&format!("structure_dw{}", kernels[j]), dw)?;
            }
            take("structure_proj", &mut stage.structure_proj)?;
            take("detail_dw", &mut stage.detail_dw)?;
            take("detail_proj", &mut stage.detail_proj)?;
            take("film", &mut stage.film)?;
            take("gate", &mut stage.gate)?;
            take("residual", &mut stage.residual)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// plain (inference/test) operations
// ---------------------------------------------------------------------------

/// Bilinear upsampling of an LR stage onto its HR counterpart's grid
/// (align-corners=false). Same-size inputs pass through bit-identically.
pub fn upsample_to_match(lr_stage: &FeatureMap, hr_stage: &FeatureMap) -> Result<FeatureMap> {
    if lr_stage.channels() != hr_stage.channels() {
        return Err(Error::ShapeMismatch(format!(
            "channel mismatch: lr {} vs hr {}",
            lr_stage.channels(),
            hr_stage.channels()
        )));
    }
    let (lh, lw) = lr_stage.hw();
    let (hh, hw) = hr_stage.hw();
    if lh > hh || lw > hw {
        return Err(Error::ShapeMismatch(format!(
            "lr stage {lh}x{lw} larger than hr stage {hh}x{hw}"
        )));
    }
    Ok(FeatureMap {
        data: resize_bilinear(&lr_stage.data, hh, hw),
        stage_index: lr_stage.stage_index,
        stride: hr_stage.stride,
    })
}

/// Per-channel mean/std stabilization applied to upsampled LR features
/// before FiLM modulation.
pub fn stabilize_features(map: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: channel_norm(&map.data, STABILIZE_EPS),
        stage_index: map.stage_index,
        stride: map.stride,
    }
}

/// Structure prior: parallel depthwise convolutions (multi-scale kernels)
/// over the deeper HR stage, summed, projected to stage channels with a 1x1
/// conv, then upsampled onto the target grid.
pub fn compute_structure_prior(
    hr_deep: &FeatureMap,
    stage: &StageParams,
    target_hw: (usize, usize),
) -> Result<StructurePrior> {
    if stage.structure_dw.is_empty() {
        return Err(Error::InvalidConfig("no structure kernels".into()));
    }
    let mut summed: Option<Tensor> = None;
    for dw in &stage.structure_dw {
        let branch = depthwise_conv_same(&hr_deep.data, &dw.weight, &dw.bias);
        summed = Some(match summed {
            None => branch,
            Some(acc) => {
                let data = acc
                    .data()
                    .iter()
                    .zip(branch.data())
                    .map(|(a, b)| a + b)
                    .collect();
                Tensor::from_vec(acc.shape(), data)
            }
        });
    }
    let projected = conv2d_same(
        &summed.unwrap(),
        &stage.structure_proj.weight,
        &stage.structure_proj.bias,
    );
    Ok(StructurePrior {
        data: resize_bilinear(&projected, target_hw.0, target_hw.1),
    })
}

/// Detail prior: 3x3 depthwise spatial alignment over the stage's own HR
/// features, a 1x1 channel projection, then resampling to the target grid.
pub fn compute_detail_prior(
    hr_shallow: &FeatureMap,
    stage: &StageParams,
    target_hw: (usize, usize),
) -> Result<DetailPrior> {
    let aligned = depthwise_conv_same(
        &hr_shallow.data,
        &stage.detail_dw.weight,
        &stage.detail_dw.bias,
    );
    let projected = conv2d_same(&aligned, &stage.detail_proj.weight, &stage.detail_proj.bias);
    Ok(DetailPrior {
        data: resize_bilinear(&projected, target_hw.0, target_hw.1),
    })
}

/// Fuses the two priors (exact elementwise sum) and generates the FiLM
/// fields from the fused guidance.
pub fn fuse_guidance(
    structure: &StructurePrior,
    detail: &DetailPrior,
    stage: &StageParams,
) -> Result<GuidanceBundle> {
    if structure.data.shape() != detail.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "structure {:?} vs detail {:?}",
            structure.data.shape(),
            detail.data.shape()
        )));
    }
    let fused = Tensor::from_vec(
        structure.data.shape(),
        structure
            .data
            .data()
            .iter()
            .zip(detail.data.data())
            .map(|(s, d)| s + d)
            .collect(),
    );
    let film_out = conv2d_same(&fused, &stage.film.weight, &stage.film.bias);
    let c = fused.channels();
    let film_gamma = slice_channels(&film_out, 0, c);
    let film_beta = slice_channels(&film_out, c, c);
    Ok(GuidanceBundle {
        structure: structure.clone(),
        detail: detail.clone(),
        fused,
        film_gamma,
        film_beta,
    })
}

/// FiLM modulation `gamma * lr + beta`. The input is expected to be the
/// stabilized upsampled LR stage; with `gamma = 1, beta = 0` this is the
/// identity on any input.
pub fn film_modulate(lr: &FeatureMap, bundle: &GuidanceBundle) -> Result<FeatureMap> {
    if bundle.film_gamma.shape() != lr.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "film fields {:?} vs lr {:?}",
            bundle.film_gamma.shape(),
            lr.data.shape()
        )));
    }
    if !bundle.film_gamma.all_finite() || !bundle.film_beta.all_finite() {
        return Err(Error::NonFinite("FiLM parameters".into()));
    }
    let data = lr
        .data
        .data()
        .iter()
        .zip(bundle.film_gamma.data())
        .zip(bundle.film_beta.data())
        .map(|((x, g), b)| g * x + b)
        .collect();
    Ok(FeatureMap {
        data: Tensor::from_vec(lr.data.shape(), data),
        stage_index: lr.stage_index,
        stride: lr.stride,
    })
}

/// Gated residual correction: `lr + sigmoid(conv([g; m])) * conv([g; m])`,
/// where `lr` is the raw upsampled LR stage and `m` the modulated features.
pub fn gated_residual_refine(
    lr: &FeatureMap,
    modulated: &FeatureMap,
    bundle: &GuidanceBundle,
    stage: &StageParams,
) -> Result<FeatureMap> {
    if lr.data.shape() != modulated.data.shape() || lr.data.shape() != bundle.fused.shape() {
        return Err(Error::ShapeMismatch(
            "lr, modulated and guidance must share a shape".into(),
        ));
    }
    let cat = concat_channels(&bundle.fused, &modulated.data);
    let gate_pre = conv2d_same(&cat, &stage.gate.weight, &stage.gate.bias);
    let gate = gate_pre.map(|v| 1.0 / (1.0 + (-v).exp()));
    let residual = conv2d_same(&cat, &stage.residual.weight, &stage.residual.bias);
    let data = lr
        .data
        .data()
        .iter()
        .zip(gate.data())
        .zip(residual.data())
        .map(|((x, g), r)| x + g * r)
        .collect();
    Ok(FeatureMap {
        data: Tensor::from_vec(lr.data.shape(), data),
        stage_index: lr.stage_index,
        stride: lr.stride,
    })
}

/// Full alignment output for one image pair.
#[derive(Clone, Debug)]
pub struct AlignOutput {
    /// Refined LR stages, shaped like the HR pyramid.
    pub stages: Vec<FeatureMap>,
    /// Per-stage guidance bundles (used by reliability scoring).
    pub bundles: Vec<GuidanceBundle>,
}

/// Node handles for one stage of the alignment graph.
#[derive(Clone, Debug)]
pub struct StageNodes {
    pub upsampled: NodeId,
    pub structure: NodeId,
    pub detail: NodeId,
    pub fused: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub refined: NodeId,
}

/// The bound alignment graph: per-stage outputs plus the mapping from
/// parameter names to leaf nodes (for gradient collection).
pub struct AlignGraph {
    pub stages: Vec<StageNodes>,
    pub param_nodes: Vec<(String, NodeId)>,
}

fn bind_conv(
    g: &mut Graph,
    conv: &ConvParams,
    name: String,
    trainable: bool,
    nodes: &mut Vec<(String, NodeId)>,
) -> (NodeId, NodeId) {
    let w = g.leaf(conv.weight.clone(), trainable);
    let b = g.leaf(conv.bias.clone(), trainable);
    nodes.push((format!("{name}/weight"), w));
    nodes.push((format!("{name}/bias"), b));
    (w, b)
}

/// Builds the alignment pipeline on an autodiff graph. With
/// `trainable = false` this is the inference path; values are identical
/// either way.
pub fn align_graph(
    g: &mut Graph,
    lr_pyramid: &FeaturePyramid,
    hr_pyramid: &FeaturePyramid,
    params: &GuidanceParameters,
    trainable: bool,
) -> Result<AlignGraph> {
    let stage_count = hr_pyramid.stages.len();
    if lr_pyramid.stages.len() != stage_count {
        return Err(Error::ShapeMismatch(format!(
            "stage count mismatch: lr {} vs hr {}",
            lr_pyramid.stages.len(),
            stage_count
        )));
    }
    if params.stages.len() != stage_count {
        return Err(Error::ShapeMismatch(format!(
            "guidance has {} stages, pyramids have {stage_count}",
            params.stages.len()
        )));
    }
    let mut param_nodes = Vec::new();
    let mut stages = Vec::with_capacity(stage_count);
    for (i, stage) in params.stages.iter().enumerate() {
        let hr = &hr_pyramid.stages[i];
        let lr = &lr_pyramid.stages[i];
        if lr.channels() != hr.channels() {
            return Err(Error::ShapeMismatch(format!(
                "stage {} channel mismatch: lr {} vs hr {}",
                i + 1,
                lr.channels(),
                hr.channels()
            )));
        }
        let deep = &hr_pyramid.stages[(i + 1).min(stage_count - 1)];
        let (hh, hw) = hr.hw();

        let prefix = format!("guidance/stage{i}");
        let lr_leaf = g.leaf(lr.data.clone(), false);
        let hr_leaf = g.leaf(hr.data.clone(), false);
        let deep_leaf = g.leaf(deep.data.clone(), false);

        // Resize the LR stage onto the HR grid and stabilize it.
        let upsampled = g.upsample(lr_leaf, hh, hw);
        let stabilized = g.channel_norm(upsampled, STABILIZE_EPS);

        // Structure prior over the deeper stage.
        let mut branches = Vec::with_capacity(stage.structure_dw.len());
        for (j, dw) in stage.structure_dw.iter().enumerate() {
            let (w, b) = bind_conv(
                g,
                dw,
                format!("{prefix}/structure_dw{}", params.structure_kernels[j]),
                trainable,
                &mut param_nodes,
            );
            branches.push(g.depthwise_conv(deep_leaf, w, b));
        }
        let summed = g.add_n(&branches);
        let (spw, spb) = bind_conv(
            g,
            &stage.structure_proj,
            format!("{prefix}/structure_proj"),
            trainable,
            &mut param_nodes,
        );
        let projected = g.conv2d(summed, spw, spb);
        let structure = g.upsample(projected, hh, hw);

        // Detail prior over the stage itself.
        let (ddw, ddb) = bind_conv(
            g,
            &stage.detail_dw,
            format!("{prefix}/detail_dw"),
            trainable,
            &mut param_nodes,
        );
        let aligned_detail = g.depthwise_conv(hr_leaf, ddw, ddb);
        let (dpw, dpb) = bind_conv(
            g,
            &stage.detail_proj,
            format!("{prefix}/detail_proj"),
            trainable,
            &mut param_nodes,
        );
        let detail_proj = g.conv2d(aligned_detail, dpw, dpb);
        let detail = g.upsample(detail_proj, hh, hw);

        // Fuse the priors and generate the FiLM fields from the sum.
        let fused = g.add(structure, detail);
        let (fw, fb) = bind_conv(
            g,
            &stage.film,
            format!("{prefix}/film"),
            trainable,
            &mut param_nodes,
        );
        let film_out = g.conv2d(fused, fw, fb);
        let c = hr.channels();
        let gamma = g.slice_c(film_out, 0, c);
        let beta = g.slice_c(film_out, c, c);

        // Feature-wise affine modulation.
        let scaled = g.mul(gamma, stabilized);
        let modulated = g.add(scaled, beta);

        // Gated residual correction on the raw upsampled features.
        let cat = g.concat_c(fused, modulated);
        let (gw, gb) = bind_conv(
            g,
            &stage.gate,
            format!("{prefix}/gate"),
            trainable,
            &mut param_nodes,
        );
        let gate_pre = g.conv2d(cat, gw, gb);
        let gate = g.sigmoid(gate_pre);
        let (rw, rb) = bind_conv(
            g,
            &stage.residual,
            format!("{prefix}/residual"),
            trainable,
            &mut param_nodes,
        );
        let residual = g.conv2d(cat, rw, rb);
        let correction = g.mul(gate, residual);
        let refined = g.add(upsampled, correction);

        stages.push(StageNodes {
            upsampled,
            structure,
            detail,
            fused,
            gamma,
            beta,
            refined,
        });
    }
    Ok(AlignGraph {
        stages,
        param_nodes,
    })
}

/// Aligns an LR pyramid to its HR counterpart: the inference-path
/// wrapper over [`align_graph`].
pub fn align(
    lr_pyramid: &FeaturePyramid,
    hr_pyramid: &FeaturePyramid,
    params: &GuidanceParameters,
) -> Result<AlignOutput> {
    let mut g = Graph::new();
    let built = align_graph(&mut g, lr_pyramid, hr_pyramid, params, false)?;
    let mut stages = Vec::with_capacity(built.stages.len());
    let mut bundles = Vec::with_capacity(built.stages.len());
    for (i, nodes) in built.stages.iter().enumerate() {
        let hr = &hr_pyramid.stages[i];
        stages.push(FeatureMap {
            data: g.value(nodes.refined).clone(),
            stage_index: hr.stage_index,
            stride: hr.stride,
        });
        bundles.push(GuidanceBundle {
            structure: StructurePrior {
                data: g.value(nodes.structure).clone(),
            },
            detail: DetailPrior {
                data: g.value(nodes.detail).clone(),
            },
            fused: g.value(nodes.fused).clone(),
            film_gamma: g.value(nodes.gamma).clone(),
            film_beta: g.value(nodes.beta).clone(),
        });
    }
    Ok(AlignOutput { stages, bundles })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_map(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> FeatureMap {
        let mut t = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t.set3(ch, y, x, f(ch, y, x));
                }
            }
        }
        FeatureMap {
            data: t,
            stage_index: 1,
            stride: 4,
        }
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = XorShift64Star::new(seed);
        feature_map(c, h, w, |_, _, _| rng.uniform(-1.0, 1.0))
    }

    fn test_params(channels: &[usize], seed: u64) -> GuidanceParameters {
        GuidanceParameters::init(channels, &DEFAULT_STRUCTURE_KERNELS, seed)
    }

    #[test]
    fn upsample_constant_and_identity() {
        let lr = feature_map(2, 8, 8, |_, _, _| 0.3);
        let hr = feature_map(2, 16, 16, |_, _, _| 0.0);
        let up = upsample_to_match(&lr, &hr).unwrap();
        assert_eq!(up.hw(), (16, 16));
        assert!(up.data.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));

        let same = feature_map(2, 16, 16, |c, y, x| (c + y * x) as f64);
        let passthrough = upsample_to_match(&same, &hr).unwrap();
        assert_eq!(passthrough.data, same.data);
    }

    #[test]
    fn upsample_matches_closed_form_bilinear() {
        // 2x2 -> 4x4 with align-corners=false: source coordinates
        // (o + 0.5)/2 - 0.5 clamped to [0, 1].
        let lr = feature_map(1, 2, 2, |_, y, x| (1 + 2 * y + x) as f64);
        let hr = feature_map(1, 4, 4, |_, _, _| 0.0);
        let up = upsample_to_match(&lr, &hr).unwrap();
        let src = |p: f64| -> f64 { ((p + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0) };
        for oy in 0..4 {
            for ox in 0..4 {
                let (sy, sx) = (src(oy as f64), src(ox as f64));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |y: usize, x: usize| lr.data.at3(0, y, x);
                let expect = v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + v(y0, x1) * (1.0 - fy) * fx
                    + v(y1, x0) * fy * (1.0 - fx)
                    + v(y1, x1) * fy * fx;
                assert!((up.data.at3(0, oy, ox) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_channel_mismatch() {
        let lr = feature_map(2, 4, 4, |_, _, _| 0.0);
        let hr = feature_map(3, 8, 8, |_, _, _| 0.0);
        assert!(upsample_to_match(&lr, &hr).is_err());
    }

    #[test]
    fn structure_prior_zero_input_zero_bias() {
        let params = test_params(&[4, 8], 1);
        let deep = feature_map(8, 4, 4, |_, _, _| 0.0);
        let prior = compute_structure_prior(&deep, &params.stages[0], (8, 8)).unwrap();
        assert_eq!(prior.data.shape(), [4, 8, 8]);
        assert!(prior.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structure_prior_constant_field_closed_form() {
        // Reflect padding keeps a constant field constant, so each depthwise
        // branch returns c * sum(kernel) + bias per channel, and the 1x1
        // projection composes linearly.
        let params = test_params(&[4, 8], 2);
        let c_val = 0.7;
        let deep = feature_map(8, 4, 4, |_, _, _| c_val);
        let prior = compute_structure_prior(&deep, &params.stages[0], (4, 4)).unwrap();
        let stage = &params.stages[0];
        for out_c in 0..4 {
            // summed depthwise response per input channel
            let mut summed = [0.0; 8];
            for dw in &stage.structure_dw {
                let k = dw.weight.shape()[1];
                for (ci, s) in summed.iter_mut().enumerate() {
                    let ksum: f64 = dw.weight.data()[ci * k * k..(ci + 1) * k * k].iter().sum();
                    *s += c_val * ksum + dw.bias.data()[ci];
                }
            }
            let mut expect = stage.structure_proj.bias.data()[out_c];
            for (ci, s) in summed.iter().enumerate() {
                expect += stage.structure_proj.weight.data()[out_c * 8 + ci] * s;
            }
            for y in 0..4 {
                for x in 0..4 {
                    assert!(
                        (prior.data.at3(out_c, y, x) - expect).abs() < 1e-10,
                        "cell ({out_c},{y},{x})"
                    );
                }
            }
        }
    }

    /// Independent nested-loop depthwise convolution used as an oracle.
    fn oracle_depthwise(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let k = weight.shape()[1];
        let half = (k / 2) as isize;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias.data()[ch];
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let sy = crate::tensor::reflect_index(y + dy, h);
                            let sx = crate::tensor::reflect_index(x + dx, w);
                            let wv = weight.data()
                                [(ch * k + (dy + half) as usize) * k + (dx + half) as usize];
                            acc += wv * input.at3(ch, sy, sx);
                        }
                    }
                    out.set3(ch, y as usize, x as usize, acc);
                }
            }
        }
        out
    }

    #[test]
    fn structure_prior_matches_nested_loop_oracle() {
        let params = test_params(&[4, 8], 3);
        let stage = &params.stages[0];
        let deep = random_map(8, 8, 8, 77);
        let prior = compute_structure_prior(&deep, stage, (8, 8)).unwrap();
        // Oracle composition with independent convs.
        let mut summed = Tensor::zeros(&[8, 8, 8]);
        for dw in &stage.structure_dw {
            let b = oracle_depthwise(&deep.data, &dw.weight, &dw.bias);
            for (s, v) in summed.data_mut().iter_mut().zip(b.data()) {
                *s += v;
            }
        }
        let mut expect = Tensor::zeros(&[4, 8, 8]);
        for co in 0..4 {
            for i in 0..64 {
                let mut acc = stage.structure_proj.bias.data()[co];
                for ci in 0..8 {
                    acc += stage.structure_proj.weight.data()[co * 8 + ci]
                        * summed.data()[ci * 64 + i];
                }
                expect.data_mut()[co * 64 + i] = acc;
            }
        }
        assert!(prior.data.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn detail_prior_zero_and_identity_composition() {
        let params = test_params(&[4, 8], 4);
        let zero = feature_map(4, 6, 6, |_, _, _| 0.0);
        let prior = compute_detail_prior(&zero, &params.stages[0], (6, 6)).unwrap();
        assert!(prior.data.data().iter().all(|&v| v == 0.0));

        // Delta alignment kernel + identity projection reproduce the input.
        let mut stage = params.stages[0].clone();
        stage.detail_dw.weight = Tensor::zeros(&[4, 3, 3]);
        for c in 0..4 {
            stage.detail_dw.weight.data_mut()[c * 9 + 4] = 1.0;
        }
        stage.detail_proj.weight = Tensor::zeros(&[4, 4, 1, 1]);
        for c in 0..4 {
            stage.detail_proj.weight.data_mut()[c * 4 + c] = 1.0;
        }
        stage.detail_proj.bias = Tensor::zeros(&[4]);
        let input = random_map(4, 6, 6, 5);
        let prior = compute_detail_prior(&input, &stage, (6, 6)).unwrap();
        assert!(prior.data.max_abs_diff(&input.data) < 1e-12);
    }

    #[test]
    fn detail_prior_matches_nested_loop_oracle() {
        let params = test_params(&[4, 8], 6);
        let stage = &params.stages[0];
        let input = random_map(4, 8, 8, 99);
        let prior = compute_detail_prior(&input, stage, (8, 8)).unwrap();
        let aligned = oracle_depthwise(&input.data, &stage.detail_dw.weight, &stage.detail_dw.bias);
        let mut expect = Tensor::zeros(&[4, 8, 8]);
        for co in 0..4 {
            for i in 0..64 {
                let mut acc = stage.detail_proj.bias.data()[co];
                for ci in 0..4 {
                    acc +=
                        stage.detail_proj.weight.data()[co * 4 + ci] * aligned.data()[ci * 64 + i];
                }
                expect.data_mut()[co * 64 + i] = acc;
            }
        }
        assert!(prior.data.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn fusion_is_exact_addition() {
        let params = test_params(&[4, 8], 7);
        let stage = &params.stages[0];
        let s = StructurePrior {
            data: random_map(4, 5, 5, 11).data,
        };
        let zero = DetailPrior {
            data: Tensor::zeros(&[4, 5, 5]),
        };
        let bundle = fuse_guidance(&s, &zero, stage).unwrap();
        assert_eq!(bundle.fused, s.data);

        // s = -d gives exactly zero fused guidance; the FiLM fields equal
        // the generator's response to the zero field.
        let d = DetailPrior {
            data: s.data.map(|v| -v),
        };
        let bundle = fuse_guidance(&s, &d, stage).unwrap();
        assert!(bundle.fused.data().iter().all(|&v| v == 0.0));
        let zero_resp = conv2d_same(
            &Tensor::zeros(&[4, 5, 5]),
            &stage.film.weight,
            &stage.film.bias,
        );
        assert_eq!(bundle.film_gamma, slice_channels(&zero_resp, 0, 4));
        assert_eq!(bundle.film_beta, slice_channels(&zero_resp, 4, 4));

        // random fusion equals an independent elementwise addition
        let d = DetailPrior {
            data: random_map(4, 5, 5, 13).data,
        };
        let bundle = fuse_guidance(&s, &d, stage).unwrap();
        for i in 0..bundle.fused.len() {
            assert_eq!(bundle.fused.data()[i], s.data.data()[i] + d.data.data()[i]);
        }
    }

    fn identity_bundle(c: usize, h: usize, w: usize) -> GuidanceBundle {
        GuidanceBundle {
            structure: StructurePrior {
                data: Tensor::zeros(&[c, h, w]),
            },
            detail: DetailPrior {
                data: Tensor::zeros(&[c, h, w]),
            },
            fused: Tensor::zeros(&[c, h, w]),
            film_gamma: Tensor::filled(&[c, h, w], 1.0),
            film_beta: Tensor::zeros(&[c, h, w]),
        }
    }

    #[test]
    fn film_identity_zero_and_arithmetic() {
        let lr = random_map(3, 4, 4, 21);
        let bundle = identity_bundle(3, 4, 4);
        let out = film_modulate(&lr, &bundle).unwrap();
        assert_eq!(out.data, lr.data);

        let mut b2 = identity_bundle(3, 4, 4);
        b2.film_gamma = Tensor::zeros(&[3, 4, 4]);
        b2.film_beta = Tensor::filled(&[3, 4, 4], 0.25);
        let out = film_modulate(&lr, &b2).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.25));

        let mut b3 = identity_bundle(3, 4, 4);
        b3.film_gamma = Tensor::filled(&[3, 4, 4], 2.0);
        b3.film_beta = Tensor::filled(&[3, 4, 4], 1.0);
        let lr3 = feature_map(3, 4, 4, |_, _, _| 3.0);
        let out = film_modulate(&lr3, &b3).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn film_rejects_non_finite() {
        let lr = random_map(2, 3, 3, 30);
        let mut bundle = identity_bundle(2, 3, 3);
        bundle.film_gamma.data_mut()[0] = f64::NAN;
        assert!(film_modulate(&lr, &bundle).is_err());
    }

    #[test]
    fn closed_gate_returns_lr() {
        let channels = [4usize, 8];
        let mut params = test_params(&channels, 8);
        // Large negative gate bias closes the gate; random residual weights
        // to make the test non-trivial.
        let mut rng = XorShift64Star::new(50);
        let stage = &mut params.stages[0];
        stage.gate.bias = Tensor::filled(&[4], -20.0);
        stage.residual.weight = draw(&mut rng, &[4, 8, 3, 3], 0.3);
        stage.residual.bias = draw(&mut rng, &[4], 0.3);
        let lr = random_map(4, 5, 5, 31);
        let modulated = random_map(4, 5, 5, 32);
        let mut bundle = identity_bundle(4, 5, 5);
        bundle.fused = random_map(4, 5, 5, 33).data;
        let out = gated_residual_refine(&lr, &modulated, &bundle, &params.stages[0]).unwrap();
        assert!(out.data.max_abs_diff(&lr.data) < 1e-6);
    }

    #[test]
    fn zero_residual_branch_is_exact_identity() {
        let params = test_params(&[4, 8], 9); // residual weights start at zero
        let lr = random_map(4, 5, 5, 41);
        let modulated = random_map(4, 5, 5, 42);
        let mut bundle = identity_bundle(4, 5, 5);
        bundle.fused = random_map(4, 5, 5, 43).data;
        let out = gated_residual_refine(&lr, &modulated, &bundle, &params.stages[0]).unwrap();
        assert_eq!(out.data, lr.data);
    }

    fn perturbed_params(channels: &[usize], seed: u64, scale: f64) -> GuidanceParameters {
        let mut params = test_params(channels, seed);
        let mut rng = XorShift64Star::new(seed.wrapping_add(1000));
        for stage in &mut params.stages {
            let mut convs: Vec<&mut ConvParams> = stage.structure_dw.iter_mut().collect();
            convs.push(&mut stage.structure_proj);
            convs.push(&mut stage.detail_dw);
            convs.push(&mut stage.detail_proj);
            convs.push(&mut stage.film);
            convs.push(&mut stage.gate);
            convs.push(&mut stage.residual);
            for conv in convs {
                for v in conv
                    .weight
                    .data_mut()
                    .iter_mut()
                    .chain(conv.bias.data_mut())
                {
                    *v += rng.uniform(-scale, scale);
                }
            }
        }
        params
    }

    fn tiny_pyramids(factor: f64) -> (FeaturePyramid, FeaturePyramid) {
        use crate::backbone::{make_dual_views, Backbone, BackboneSpec};
        let backbone = Backbone::from_spec(&BackboneSpec::tiny(3)).unwrap();
        let image = crate::synthetic::texture_image(64, 5);
        let (high, low) = make_dual_views(&image, factor).unwrap();
        let hr = backbone.extract(&high).unwrap();
        let lr = backbone.extract(&low).unwrap();
        (lr, hr)
    }

    #[test]
    fn identity_configuration_aligns_exactly() {
        // factor 1.0 dual views + fresh (identity) parameters: the refined
        // stages equal the HR stages bit-for-bit, so the anomaly score is 0.
        let (lr, hr) = tiny_pyramids(1.0);
        let params = test_params(&[4, 8], 7);
        let out = align(&lr, &hr, &params).unwrap();
        assert_eq!(out.stages.len(), hr.stages.len());
        for (a, h) in out.stages.iter().zip(&hr.stages) {
            assert_eq!(a.data, h.data);
        }
    }

    #[test]
    fn align_returns_hr_shapes() {
        let (lr, hr) = tiny_pyramids(0.5);
        let params = perturbed_params(&[4, 8], 8, 0.1);
        let out = align(&lr, &hr, &params).unwrap();
        assert_eq!(out.stages.len(), 2);
        for (a, h) in out.stages.iter().zip(&hr.stages) {
            assert_eq!(a.data.shape(), h.data.shape());
            assert_eq!(a.stride, h.stride);
        }
        assert_eq!(out.bundles.len(), 2);
    }

    #[test]
    fn align_matches_explicit_suboperation_composition() {
        let (lr, hr) = tiny_pyramids(0.5);
        let params = perturbed_params(&[4, 8], 9, 0.1);
        let out = align(&lr, &hr, &params).unwrap();
        for i in 0..hr.stages.len() {
            let hr_s = &hr.stages[i];
            let lr_s = &lr.stages[i];
            let deep = &hr.stages[(i + 1).min(hr.stages.len() - 1)];
            let stage = &params.stages[i];
            let up = upsample_to_match(lr_s, hr_s).unwrap();
            let stab = stabilize_features(&up);
            let s = compute_structure_prior(deep, stage, hr_s.hw()).unwrap();
            let d = compute_detail_prior(hr_s, stage, hr_s.hw()).unwrap();
            let bundle = fuse_guidance(&s, &d, stage).unwrap();
            let m = film_modulate(&stab, &bundle).unwrap();
            let refined = gated_residual_refine(&up, &m, &bundle, stage).unwrap();
            assert_eq!(out.stages[i].data, refined.data, "stage {i}");
            assert_eq!(out.bundles[i].fused, bundle.fused, "stage {i} fused");
            assert_eq!(out.bundles[i].structure.data, s.data, "stage {i} structure");
            assert_eq!(out.bundles[i].detail.data, d.data, "stage {i} detail");
            assert_eq!(
                out.bundles[i].film_gamma, bundle.film_gamma,
                "stage {i} gamma"
            );
            assert_eq!(out.bundles[i].film_beta, bundle.film_beta, "stage {i} beta");
        }
    }

    #[test]
    fn align_rejects_stage_count_mismatch() {
        let (lr, hr) = tiny_pyramids(0.5);
        let params = test_params(&[4], 1); // one stage only
        assert!(align(&lr, &hr, &params).is_err());
    }

    #[test]
    fn named_round_trip_preserves_parameters() {
        let params = perturbed_params(&[4, 8], 10, 0.2);
        let named = params.to_named();
        let rebuilt =
            GuidanceParameters::from_named(&named, &[4, 8], &DEFAULT_STRUCTURE_KERNELS).unwrap();
        assert_eq!(rebuilt, params);
        // missing tensor reported by name
        let mut broken = named.clone();
        broken.0.remove("guidance/stage1/gate/bias");
        match GuidanceParameters::from_named(&broken, &[4, 8], &DEFAULT_STRUCTURE_KERNELS) {
            Err(crate::error::Error::MissingTensor(name)) => {
                assert_eq!(name, "guidance/stage1/gate/bias")
            }
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }

    #[test]
    fn refine_matches_composition_oracle() {
        let mut params = test_params(&[4, 8], 10);
        let mut rng = XorShift64Star::new(60);
        let stage = &mut params.stages[0];
        stage.residual.weight = draw(&mut rng, &[4, 8, 3, 3], 0.3);
        stage.residual.bias = draw(&mut rng, &[4], 0.3);
        let lr = random_map(4, 6, 6, 51);
        let modulated = random_map(4, 6, 6, 52);
        let mut bundle = identity_bundle(4, 6, 6);
        bundle.fused = random_map(4, 6, 6, 53).data;
        let out = gated_residual_refine(&lr, &modulated, &bundle, &params.stages[0]).unwrap();
        // Oracle: evaluate gate and residual separately, then combine.
        let stage = &params.stages[0];
        let cat = concat_channels(&bundle.fused, &modulated.data);
        let gate = conv2d_same(&cat, &stage.gate.weight, &stage.gate.bias)
            .map(|v| 1.0 / (1.0 + (-v).exp()));
        let residual = conv2d_same(&cat, &stage.residual.weight, &stage.residual.bias);
        for i in 0..out.data.len() {
            let expect = lr.data.data()[i] + gate.data()[i] * residual.data()[i];
            assert!((out.data.data()[i] - expect).abs() < 1e-6);
        }
    }
}
