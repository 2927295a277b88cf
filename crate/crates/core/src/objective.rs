//! The composite training objective over aligned pyramids.
//!
//! The core term is a per-location cosine alignment loss between HR and
//! aligned-LR channel vectors; focal-weighted L1, Jensen-Shannon and
//! Gram-matrix terms act as weighted stabilizers. Presets mirror the loss
//! ablation configurations.

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::guidance::{align, align_graph, GuidanceParameters};
use crate::tensor::NamedTensors;

/// Default focal exponent for the L1 term.
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_js: f64,
    pub lambda_gram: f64,
    /// Classification auxiliary weight; must be zero (no head is defined).
    pub lambda_cls: f64,
    pub focal_gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPreset {
    Cosine,
    CosineJs,
    CosineGram,
    CosineL1,
    Full,
}

impl LossPreset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(Self::Cosine),
            "cosine_js" => Ok(Self::CosineJs),
            "cosine_gram" => Ok(Self::CosineGram),
            "cosine_l1" => Ok(Self::CosineL1),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss preset `{other}`"
            ))),
        }
    }
}

impl LossWeights {
    /// `(lambda_l1, lambda_js, lambda_gram)` per preset.
    pub fn preset(preset: LossPreset) -> Self {
        let (l1, js, gram) = match preset {
            LossPreset::Cosine => (0.0, 0.0, 0.0),
            LossPreset::CosineJs => (0.0, 0.1, 0.0),
            LossPreset::CosineGram => (0.0, 0.0, 0.5),
            LossPreset::CosineL1 => (0.5, 0.0, 0.0),
            LossPreset::Full => (0.5, 0.5, 0.5),
        };
        Self {
            lambda_l1: l1,
            lambda_js: js,
            lambda_gram: gram,
            lambda_cls: 0.0,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_js", self.lambda_js),
            ("lambda_gram", self.lambda_gram),
            ("lambda_cls", self.lambda_cls),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.lambda_cls != 0.0 {
            return Err(Error::InvalidConfig(
                "lambda_cls must be 0: no classification head is defined".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::preset(LossPreset::Full)
    }
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub align: f64,
    pub l1: f64,
    pub js: f64,
    pub gram: f64,
    pub total: f64,
}

fn check_pair(hr: &FeaturePyramid, aligned: &[FeatureMap]) -> Result<()> {
    if hr.stages.len() != aligned.len() {
        return Err(Error::ShapeMismatch(format!(
            "hr has {} stages, aligned has {}",
            hr.stages.len(),
            aligned.len()
        )));
    }
    for (h, a) in hr.stages.iter().zip(aligned) {
        if h.data.shape() != a.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "stage {}: hr {:?} vs aligned {:?}",
                h.stage_index,
                h.data.shape(),
                a.data.shape()
            )));
        }
    }
    Ok(())
}

fn stage_mean(
    g: &mut Graph,
    hr: &FeaturePyramid,
    aligned: &[FeatureMap],
    mut term: impl FnMut(&mut Graph, NodeId, NodeId) -> NodeId,
) -> f64 {
    let mut nodes = Vec::with_capacity(hr.stages.len());
    for (h, a) in hr.stages.iter().zip(aligned) {
        let hn = g.leaf(h.data.clone(), false);
        let an = g.leaf(a.data.clone(), false);
        nodes.push(term(g, hn, an));
    }
    let sum = g.add_n(&nodes);
    let mean = g.scale(sum, 1.0 / hr.stages.len() as f64);
    g.scalar(mean)
}

/// Mean over locations and stages of `1 - cos(f_h, f_aligned)`; range [0, 2].
pub fn cosine_align_loss(hr: &FeaturePyramid, aligned: &[FeatureMap]) -> Result<f64> {
    check_pair(hr, aligned)?;
    let mut g = Graph::new();
    Ok(stage_mean(&mut g, hr, aligned, |g, h, a| {
        g.cosine_align(h, a)
    }))
}

/// Focal-weighted mean absolute feature error; weights are
/// `(|e| / (max|e| + eps))^gamma`, detached from gradient flow, with the
/// maximum taken per stage.
pub fn focal_l1_loss(hr: &FeaturePyramid, aligned: &[FeatureMap], focal_gamma: f64) -> Result<f64> {
    check_pair(hr, aligned)?;
    let mut g = Graph::new();
    Ok(stage_mean(&mut g, hr, aligned, |g, h, a| {
        g.focal_l1(h, a, focal_gamma)
    }))
}

/// Jensen-Shannon divergence between channel softmaxes, averaged over
/// locations and stages; range [0, ln 2].
pub fn js_divergence_loss(hr: &FeaturePyramid, aligned: &[FeatureMap]) -> Result<f64> {
    check_pair(hr, aligned)?;
    let mut g = Graph::new();
    Ok(stage_mean(&mut g, hr, aligned, |g, h, a| {
        g.js_divergence(h, a)
    }))
}

/// Squared Frobenius distance between per-stage Gram matrices
/// `F F^T / (HW)`, normalized by `C^2` and averaged over stages.
pub fn gram_loss(hr: &FeaturePyramid, aligned: &[FeatureMap]) -> Result<f64> {
    check_pair(hr, aligned)?;
    let mut g = Graph::new();
    Ok(stage_mean(&mut g, hr, aligned, |g, h, a| g.gram(h, a)))
}

/// Evaluates every term and the weighted total.
pub fn total_loss(
    hr: &FeaturePyramid,
    aligned: &[FeatureMap],
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let align = cosine_align_loss(hr, aligned)?;
    let l1 = focal_l1_loss(hr, aligned, weights.focal_gamma)?;
    let js = js_divergence_loss(hr, aligned)?;
    let gram = gram_loss(hr, aligned)?;
    let total =
        align + weights.lambda_l1 * l1 + weights.lambda_js * js + weights.lambda_gram * gram;
    Ok(LossReport {
        align,
        l1,
        js,
        gram,
        total,
    })
}

/// Node handles of a composite-loss subgraph.
pub struct LossNodes {
    pub align: NodeId,
    pub l1: Option<NodeId>,
    pub js: Option<NodeId>,
    pub gram: Option<NodeId>,
    pub total: NodeId,
}

/// Appends the composite objective to an existing graph. HR stages enter as
/// constants; `aligned` are the refined stage nodes. Terms with zero weight
/// are skipped (reported as 0 in training logs).
pub fn total_loss_graph(
    g: &mut Graph,
    hr: &FeaturePyramid,
    aligned: &[NodeId],
    weights: &LossWeights,
) -> LossNodes {
    total_loss_graph_inner(g, hr, aligned, weights, None)
}

fn total_loss_graph_inner(
    g: &mut Graph,
    hr: &FeaturePyramid,
    aligned: &[NodeId],
    weights: &LossWeights,
    frozen_focal: Option<&[crate::tensor::Tensor]>,
) -> LossNodes {
    let hr_nodes: Vec<NodeId> = hr
        .stages
        .iter()
        .map(|s| g.leaf(s.data.clone(), false))
        .collect();
    let stage_scale = 1.0 / hr.stages.len() as f64;
    let mean_term = |g: &mut Graph, nodes: Vec<NodeId>| {
        let sum = g.add_n(&nodes);
        g.scale(sum, stage_scale)
    };

    let align_terms: Vec<NodeId> = hr_nodes
        .iter()
        .zip(aligned)
        .map(|(&h, &a)| g.cosine_align(h, a))
        .collect();
    let align = mean_term(g, align_terms);
    let mut total = align;

    let mut l1 = None;
    if weights.lambda_l1 > 0.0 {
        let terms: Vec<NodeId> = hr_nodes
            .iter()
            .zip(aligned)
            .enumerate()
            .map(|(i, (&h, &a))| match frozen_focal {
                Some(maps) => g.weighted_l1(h, a, maps[i].clone()),
                None => g.focal_l1(h, a, weights.focal_gamma),
            })
            .collect();
        let node = mean_term(g, terms);
        l1 = Some(node);
        let weighted = g.scale(node, weights.lambda_l1);
        total = g.add(total, weighted);
    }
    let mut js = None;
    if weights.lambda_js > 0.0 {
        let terms: Vec<NodeId> = hr_nodes
            .iter()
            .zip(aligned)
            .map(|(&h, &a)| g.js_divergence(h, a))
            .collect();
        let node = mean_term(g, terms);
        js = Some(node);
        let weighted = g.scale(node, weights.lambda_js);
        total = g.add(total, weighted);
    }
    let mut gram = None;
    if weights.lambda_gram > 0.0 {
        let terms: Vec<NodeId> = hr_nodes
            .iter()
            .zip(aligned)
            .map(|(&h, &a)| g.gram(h, a))
            .collect();
        let node = mean_term(g, terms);
        gram = Some(node);
        let weighted = g.scale(node, weights.lambda_gram);
        total = g.add(total, weighted);
    }

    LossNodes {
        align,
        l1,
        js,
        gram,
        total,
    }
}

/// One full differentiable evaluation: align the pyramids under `params`,
/// apply the composite objective, and backpropagate into every guidance
/// parameter. Returns the per-term report and the gradients keyed by
/// parameter name.
pub fn composite_loss_and_grads(
    lr_pyramid: &FeaturePyramid,
    hr_pyramid: &FeaturePyramid,
    params: &GuidanceParameters,
    weights: &LossWeights,
) -> Result<(LossReport, NamedTensors)> {
    let mut g = Graph::new();
    let built = align_graph(&mut g, lr_pyramid, hr_pyramid, params, true)?;
    let aligned: Vec<NodeId> = built.stages.iter().map(|s| s.refined).collect();
    let nodes = total_loss_graph(&mut g, hr_pyramid, &aligned, weights);
    g.backward(nodes.total);
    let mut grads = NamedTensors::new();
    for (name, id) in &built.param_nodes {
        let grad = match g.grad(*id) {
            Some(t) => t.clone(),
            None => crate::tensor::Tensor::zeros(g.value(*id).shape()),
        };
        grads.insert(name.clone(), grad);
    }
    let report = LossReport {
        align: g.scalar(nodes.align),
        l1: nodes.l1.map_or(0.0, |n| g.scalar(n)),
        js: nodes.js.map_or(0.0, |n| g.scalar(n)),
        gram: nodes.gram.map_or(0.0, |n| g.scalar(n)),
        total: g.scalar(nodes.total),
    };
    Ok((report, grads))
}

/// Forward-only counterpart of [`composite_loss_and_grads`].
pub fn composite_loss(
    lr_pyramid: &FeaturePyramid,
    hr_pyramid: &FeaturePyramid,
    params: &GuidanceParameters,
    weights: &LossWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let built = align_graph(&mut g, lr_pyramid, hr_pyramid, params, false)?;
    let aligned: Vec<NodeId> = built.stages.iter().map(|s| s.refined).collect();
    let nodes = total_loss_graph(&mut g, hr_pyramid, &aligned, weights);
    Ok(g.scalar(nodes.total))
}

/// Finite-difference check of the analytic gradient of the composite loss
/// through the complete alignment pipeline.
///
/// The focal weights of the L1 term carry no gradient flow, so the
/// difference quotient must hold them fixed: they are computed once at the
/// evaluation point and the probed loss uses those frozen maps. Everything
/// else (every conv, the FiLM path, the gate, and the cosine/JS/Gram terms)
/// is differenced live.
pub fn gradcheck_composite(
    lr_pyramid: &FeaturePyramid,
    hr_pyramid: &FeaturePyramid,
    params: &GuidanceParameters,
    weights: &LossWeights,
    config: &crate::gradcheck::GradCheckConfig,
) -> Result<crate::gradcheck::GradCheckReport> {
    weights.validate()?;
    let frozen: Option<Vec<crate::tensor::Tensor>> = if weights.lambda_l1 > 0.0 {
        let out = align(lr_pyramid, hr_pyramid, params)?;
        Some(
            hr_pyramid
                .stages
                .iter()
                .zip(&out.stages)
                .map(|(h, a)| crate::graph::focal_weight_map(&h.data, &a.data, weights.focal_gamma))
                .collect(),
        )
    } else {
        None
    };
    let named = params.to_named();
    let template = params.clone();
    let loss_fn = |probe: &crate::tensor::NamedTensors| -> f64 {
        let mut p = template.clone();
        p.apply_named(probe)
            .expect("probe matches parameter layout");
        let mut g = Graph::new();
        let built = align_graph(&mut g, lr_pyramid, hr_pyramid, &p, false).expect("align pipeline");
        let aligned: Vec<NodeId> = built.stages.iter().map(|s| s.refined).collect();
        let nodes =
            total_loss_graph_inner(&mut g, hr_pyramid, &aligned, weights, frozen.as_deref());
        g.scalar(nodes.total)
    };
    let analytic = |probe: &crate::tensor::NamedTensors| -> crate::tensor::NamedTensors {
        let mut p = template.clone();
        p.apply_named(probe)
            .expect("probe matches parameter layout");
        composite_loss_and_grads(lr_pyramid, hr_pyramid, &p, weights)
            .expect("analytic gradients")
            .1
    };
    crate::gradcheck::finite_difference_gradcheck(&named, loss_fn, analytic, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;
    use crate::tensor::Tensor;

    fn pyramid(stages: Vec<Tensor>) -> FeaturePyramid {
        FeaturePyramid {
            stages: stages
                .into_iter()
                .enumerate()
                .map(|(i, data)| FeatureMap {
                    data,
                    stage_index: i + 1,
                    stride: 4 << i,
                })
                .collect(),
            backbone_id: "test".into(),
            input_resolution: (32, 32),
            original_resolution: (32, 32),
        }
    }

    fn maps_of(pyr: &FeaturePyramid) -> Vec<FeatureMap> {
        pyr.stages.clone()
    }

    fn random_pyramid(shapes: &[[usize; 3]], seed: u64) -> FeaturePyramid {
        let mut rng = XorShift64Star::new(seed);
        pyramid(
            shapes
                .iter()
                .map(|s| {
                    let len = s.iter().product();
                    Tensor::from_vec(s, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect())
                })
                .collect(),
        )
    }

    #[test]
    fn cosine_loss_identities() {
        // identical nonzero features -> 0
        let hr = random_pyramid(&[[3, 4, 4]], 1);
        let loss = cosine_align_loss(&hr, &maps_of(&hr)).unwrap();
        assert!(loss.abs() < 1e-9, "self-similarity loss {loss}");

        // orthogonal unit vectors -> 1
        let h = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0])]);
        let a = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![0.0, 1.0])]);
        let loss = cosine_align_loss(&h, &maps_of(&a)).unwrap();
        assert!((loss - 1.0).abs() < 1e-7);

        // anti-parallel -> 2
        let v = Tensor::from_vec(&[2, 1, 1], vec![0.6, -0.8]);
        let h = pyramid(vec![v.clone()]);
        let a = pyramid(vec![v.map(|x| -x)]);
        let loss = cosine_align_loss(&h, &maps_of(&a)).unwrap();
        assert!((loss - 2.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_loss_zero_vector_gives_loss_one() {
        let h = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![0.0, 0.0])]);
        let a = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![0.3, 0.4])]);
        let loss = cosine_align_loss(&h, &maps_of(&a)).unwrap();
        assert!((loss - 1.0).abs() < 1e-9);
    }

    #[test]
    fn focal_l1_identities_and_hand_case() {
        let hr = random_pyramid(&[[2, 3, 3]], 2);
        assert_eq!(focal_l1_loss(&hr, &maps_of(&hr), 2.0).unwrap(), 0.0);

        // gamma = 0 reduces to plain mean absolute error
        let h = pyramid(vec![Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0])]);
        let a = pyramid(vec![Tensor::from_vec(&[1, 1, 2], vec![0.5, -1.0])]);
        let plain = focal_l1_loss(&h, &maps_of(&a), 0.0).unwrap();
        assert!((plain - 0.75).abs() < 1e-12);

        // residuals (0.5, 1.0) at gamma 2: weights (0.25, 1), loss 0.5625
        let loss = focal_l1_loss(&h, &maps_of(&a), 2.0).unwrap();
        assert!((loss - 0.5625).abs() < 1e-6, "got {loss}");
    }

    #[test]
    fn js_identities_and_reference_value() {
        let hr = random_pyramid(&[[4, 3, 3]], 3);
        let js = js_divergence_loss(&hr, &maps_of(&hr)).unwrap();
        assert!(js.abs() < 1e-12);

        // P = (0.5, 0.5) vs Q ~ (1, 0) via a large logit gap:
        // JS = 0.5*KL(P||M) + 0.5*KL(Q||M) with M = (0.75, 0.25) = 0.21576
        let h = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![0.0, 0.0])]);
        let a = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![40.0, 0.0])]);
        let js = js_divergence_loss(&h, &maps_of(&a)).unwrap();
        assert!((js - 0.21576).abs() < 1e-4, "got {js}");
    }

    #[test]
    fn js_survives_softmax_underflow() {
        // logit gap far beyond exp underflow: one distribution collapses to
        // an exact one-hot; JS must hit its ln 2 bound, not NaN
        let h = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![0.0, 2000.0])]);
        let a = pyramid(vec![Tensor::from_vec(&[2, 1, 1], vec![2000.0, 0.0])]);
        let js = js_divergence_loss(&h, &maps_of(&a)).unwrap();
        assert!(js.is_finite());
        assert!((js - std::f64::consts::LN_2).abs() < 1e-9, "got {js}");
        // and the gradient path stays finite
        let mut g = Graph::new();
        let hn = g.leaf(h.stages[0].data.clone(), false);
        let an = g.leaf(a.stages[0].data.clone(), true);
        let loss = g.js_divergence(hn, an);
        g.backward(loss);
        assert!(g.grad(an).unwrap().all_finite());
    }

    #[test]
    fn js_never_exceeds_ln2() {
        for seed in 0..20 {
            let h = random_pyramid(&[[5, 4, 4]], 100 + seed);
            let a = random_pyramid(&[[5, 4, 4]], 200 + seed);
            let js = js_divergence_loss(&h, &maps_of(&a)).unwrap();
            assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&js));
        }
    }

    #[test]
    fn gram_identities_and_hand_case() {
        let hr = random_pyramid(&[[3, 4, 4]], 4);
        assert_eq!(gram_loss(&hr, &maps_of(&hr)).unwrap(), 0.0);

        // Gram is invariant to permutation of spatial locations.
        let t = random_pyramid(&[[3, 2, 2]], 5);
        let mut permuted = t.stages[0].data.clone();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).map(|i| t.stages[0].data.data()[c * 4 + i]).collect();
            let perm = [2, 0, 3, 1];
            for (i, &p) in perm.iter().enumerate() {
                permuted.data_mut()[c * 4 + i] = vals[p];
            }
        }
        let loss = gram_loss(&t, &maps_of(&pyramid(vec![permuted]))).unwrap();
        assert!(loss.abs() < 1e-12);

        // C=2, two locations: G1 = I/2, G2 = [[1,0],[0,0]] -> loss 0.125
        let h = pyramid(vec![Tensor::from_vec(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0])]);
        let a = pyramid(vec![Tensor::from_vec(&[2, 1, 2], vec![1.0, 1.0, 0.0, 0.0])]);
        let loss = gram_loss(&h, &maps_of(&a)).unwrap();
        assert!((loss - 0.125).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn presets_match_ablation_table() {
        let full = LossWeights::preset(LossPreset::Full);
        assert_eq!(
            (full.lambda_l1, full.lambda_js, full.lambda_gram),
            (0.5, 0.5, 0.5)
        );
        let js = LossWeights::preset(LossPreset::CosineJs);
        assert_eq!(
            (js.lambda_l1, js.lambda_js, js.lambda_gram),
            (0.0, 0.1, 0.0)
        );
        let gram = LossWeights::preset(LossPreset::CosineGram);
        assert_eq!(
            (gram.lambda_l1, gram.lambda_js, gram.lambda_gram),
            (0.0, 0.0, 0.5)
        );
        let l1 = LossWeights::preset(LossPreset::CosineL1);
        assert_eq!(
            (l1.lambda_l1, l1.lambda_js, l1.lambda_gram),
            (0.5, 0.0, 0.0)
        );
        let cos = LossWeights::preset(LossPreset::Cosine);
        assert_eq!(
            (cos.lambda_l1, cos.lambda_js, cos.lambda_gram),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn total_loss_composes_and_validates() {
        let hr = random_pyramid(&[[3, 4, 4], [5, 2, 2]], 6);
        let al = random_pyramid(&[[3, 4, 4], [5, 2, 2]], 7);
        let weights = LossWeights::preset(LossPreset::Full);
        let report = total_loss(&hr, &maps_of(&al), &weights).unwrap();
        let recomputed = report.align
            + weights.lambda_l1 * report.l1
            + weights.lambda_js * report.js
            + weights.lambda_gram * report.gram;
        assert!((report.total - recomputed).abs() < 1e-9);

        // all-zero weights: total == align
        let zero = LossWeights::preset(LossPreset::Cosine);
        let report = total_loss(&hr, &maps_of(&al), &zero).unwrap();
        assert_eq!(report.total, report.align);

        // negative weight rejected
        let mut bad = weights;
        bad.lambda_gram = -0.1;
        assert!(total_loss(&hr, &maps_of(&al), &bad).is_err());
        let mut cls = weights;
        cls.lambda_cls = 0.5;
        assert!(total_loss(&hr, &maps_of(&al), &cls).is_err());
    }

    #[test]
    fn js_loss_is_symmetric() {
        let a = random_pyramid(&[[4, 3, 3]], 8);
        let b = random_pyramid(&[[4, 3, 3]], 9);
        let ab = js_divergence_loss(&a, &maps_of(&b)).unwrap();
        let ba = js_divergence_loss(&b, &maps_of(&a)).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn cosine_scale_invariance_vs_l1_gram_sensitivity() {
        let hr = random_pyramid(&[[3, 4, 4]], 10);
        let al = random_pyramid(&[[3, 4, 4]], 11);
        let aligned = maps_of(&al);
        let scaled: Vec<FeatureMap> = aligned
            .iter()
            .map(|m| FeatureMap {
                data: m.data.map(|v| 2.0 * v),
                stage_index: m.stage_index,
                stride: m.stride,
            })
            .collect();
        let cos_a = cosine_align_loss(&hr, &aligned).unwrap();
        let cos_b = cosine_align_loss(&hr, &scaled).unwrap();
        assert!((cos_a - cos_b).abs() < 1e-6);

        let l1_a = focal_l1_loss(&hr, &aligned, 2.0).unwrap();
        let l1_b = focal_l1_loss(&hr, &scaled, 2.0).unwrap();
        assert!(l1_b > l1_a);
        let gram_a = gram_loss(&hr, &aligned).unwrap();
        let gram_b = gram_loss(&hr, &scaled).unwrap();
        assert!(gram_b > gram_a);
    }

    #[test]
    fn composite_gradcheck_on_tiny_backbone() {
        use crate::backbone::{make_dual_views, Backbone, BackboneSpec};
        use crate::gradcheck::GradCheckConfig;
        use crate::guidance::DEFAULT_STRUCTURE_KERNELS;
        use crate::rng::XorShift64Star;

        let backbone = Backbone::from_spec(&BackboneSpec::tiny(3)).unwrap();
        let image = crate::synthetic::texture_image(64, 11);
        let (high, low) = make_dual_views(&image, 0.5).unwrap();
        let hr = backbone.extract(&high).unwrap();
        let lr = backbone.extract(&low).unwrap();
        let mut params = GuidanceParameters::init(&[4, 8], &DEFAULT_STRUCTURE_KERNELS, 3);
        // move off the identity point so every branch carries gradient
        let mut rng = XorShift64Star::new(77);
        let mut named = params.to_named();
        for tensor in named.0.values_mut() {
            for v in tensor.data_mut() {
                *v += rng.uniform(-0.05, 0.05);
            }
        }
        params.apply_named(&named).unwrap();

        // every preset must pass on the full align -> loss composition
        let presets = [
            LossPreset::Cosine,
            LossPreset::CosineJs,
            LossPreset::CosineGram,
            LossPreset::CosineL1,
            LossPreset::Full,
        ];
        for preset in presets {
            let weights = LossWeights::preset(preset);
            let config = GradCheckConfig {
                samples_per_tensor: if preset == LossPreset::Full { 3 } else { 2 },
                ..Default::default()
            };
            let report = gradcheck_composite(&lr, &hr, &params, &weights, &config).unwrap();
            assert!(
                report.passed(),
                "{preset:?}: max rel err {} at {} ({} failures of {} checked)",
                report.max_rel_err,
                report.worst_param,
                report.failures.len(),
                report.checked
            );
        }
    }

    #[test]
    fn loss_bounds_on_random_pairs() {
        for seed in 0..100 {
            let h = random_pyramid(&[[4, 4, 4]], 1000 + seed);
            let a = random_pyramid(&[[4, 4, 4]], 2000 + seed);
            let align = cosine_align_loss(&h, &maps_of(&a)).unwrap();
            assert!((0.0..=2.0 + 1e-12).contains(&align));
            let js = js_divergence_loss(&h, &maps_of(&a)).unwrap();
            assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&js));
            assert!(focal_l1_loss(&h, &maps_of(&a), 2.0).unwrap() >= 0.0);
            assert!(gram_loss(&h, &maps_of(&a)).unwrap() >= 0.0);
        }
    }
}
