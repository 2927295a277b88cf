//! Frozen multi-stage feature extraction.
//!
//! Dual-resolution views of an image are pushed through the same frozen
//! convolutional extractor, producing a [`FeaturePyramid`] per view. The
//! built-in reference backbone is a small residual CNN whose weights come
//! from the documented xorshift generator, so every test and demo runs
//! without downloading pretrained weights. Real deployments load an
//! exported archive instead (see [`crate::archive`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive, DType};
use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::{pad_to_multiple, reflect_index, NamedTensors, Tensor};

pub const MIN_IMAGE_SIDE: usize = 32;

/// Input normalization applied inside the extractor, mapping [0,1] pixel
/// values to roughly [-1,1].
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionTag {
    High,
    Low,
}

/// An image as a `[3, H, W]` tensor with values in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageTensor {
    pub data: Tensor,
    pub source_path: Option<PathBuf>,
    pub resolution_tag: ResolutionTag,
}

impl ImageTensor {
    pub fn new(data: Tensor, source_path: Option<PathBuf>, tag: ResolutionTag) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != 3 {
            return Err(Error::InvalidImage(format!(
                "expected [3, H, W], got {:?}",
                data.shape()
            )));
        }
        let (h, w) = data.hw();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::InvalidImage(format!(
                "{h}x{w} is below the {MIN_IMAGE_SIDE}-pixel minimum"
            )));
        }
        if !data
            .data()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidImage(
                "values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self {
            data,
            source_path,
            resolution_tag: tag,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        self.data.hw()
    }
}

/// One stage of a feature pyramid.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    /// 1-based stage number.
    pub stage_index: usize,
    /// Input pixels per feature cell.
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn hw(&self) -> (usize, usize) {
        self.data.hw()
    }
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<FeatureMap>,
    pub backbone_id: String,
    /// Resolution the extractor consumed, i.e. after reflect padding to a
    /// multiple of the largest stride. Every stage satisfies
    /// `H_s = input_resolution.0 / stride` exactly.
    pub input_resolution: (usize, usize),
    /// Resolution of the image before padding; score maps are cropped back
    /// to this size.
    pub original_resolution: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightsSource {
    ReferenceSeeded { seed: u64 },
    Archive { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone_id: String,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub weights_source: WeightsSource,
}

impl BackboneSpec {
    /// The default 3-stage reference extractor: channels 16/32/64 at
    /// strides 4/8/16.
    pub fn reference(seed: u64) -> Self {
        Self {
            backbone_id: "reference".into(),
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![4, 8, 16],
            weights_source: WeightsSource::ReferenceSeeded { seed },
        }
    }

    /// A tiny 2-stage variant for cheap tests.
    pub fn tiny(seed: u64) -> Self {
        Self {
            backbone_id: "tiny".into(),
            stage_channels: vec![4, 8],
            stage_strides: vec![2, 4],
            weights_source: WeightsSource::ReferenceSeeded { seed },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::InvalidConfig(
                "stage_channels and stage_strides must have equal length".into(),
            ));
        }
        if self.stage_channels.len() < 2 {
            return Err(Error::InvalidConfig("need at least two stages".into()));
        }
        if !self.stage_strides.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidConfig(
                "stage strides must be strictly increasing".into(),
            ));
        }
        for w in self.stride_steps()? {
            if w != 2 {
                return Err(Error::InvalidConfig(
                    "stage stride ratios must be powers of two".into(),
                ));
            }
        }
        Ok(())
    }

    /// Expands the stage strides into the per-conv stride-2 steps. E.g.
    /// strides [4, 8, 16] become stage step counts [2, 1, 1].
    fn stride_steps(&self) -> Result<Vec<usize>> {
        let mut steps = Vec::new();
        let mut current = 1usize;
        for &target in &self.stage_strides {
            let mut s = current;
            while s < target {
                if target % s != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "stride {target} is not reachable by stride-2 steps from {current}"
                    )));
                }
                steps.push(2);
                s *= 2;
            }
            if s != target {
                return Err(Error::InvalidConfig(format!("bad stride {target}")));
            }
            current = target;
        }
        Ok(steps)
    }

    pub fn max_stride(&self) -> usize {
        *self.stage_strides.last().unwrap()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    weight: Tensor, // [O, I, 3, 3]
    bias: Tensor,   // [O]
    stride: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    downs: Vec<ConvLayer>,
    res1: ConvLayer,
    res2: ConvLayer,
}

/// A frozen extractor. Weights never change after construction; extraction
/// takes `&self` and is safe to run concurrently.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadSummary {
    pub tensor_count: usize,
    pub parameter_count: usize,
}

/// Describes the conv layers a spec implies: `(name, out_ch, in_ch, stride)`
/// in forward order.
fn layer_plan(spec: &BackboneSpec) -> Vec<(String, usize, usize, usize)> {
    let mut plan = Vec::new();
    let mut in_ch = 3usize;
    let mut stride = 1usize;
    for (i, (&ch, &target)) in spec
        .stage_channels
        .iter()
        .zip(&spec.stage_strides)
        .enumerate()
    {
        let mut j = 0;
        while stride < target {
            plan.push((format!("backbone/stage{}/down{}", i + 1, j), ch, in_ch, 2));
            in_ch = ch;
            stride *= 2;
            j += 1;
        }
        plan.push((format!("backbone/stage{}/res1", i + 1), ch, ch, 1));
        plan.push((format!("backbone/stage{}/res2", i + 1), ch, ch, 1));
        in_ch = ch;
    }
    plan
}

impl Backbone {
    /// Builds the extractor from a spec, generating or loading weights.
    pub fn from_spec(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = match &spec.weights_source {
            WeightsSource::ReferenceSeeded { seed } => reference_weights(spec, *seed),
            WeightsSource::Archive { path } => load_weights_archive(path, spec)?,
        };
        Self::from_tensors(spec, &tensors)
    }

    fn from_tensors(spec: &BackboneSpec, tensors: &NamedTensors) -> Result<Self> {
        let plan = layer_plan(spec);
        let mut layers = Vec::new();
        for (name, out_ch, in_ch, stride) in &plan {
            let weight = tensors.get(&format!("{name}/weight"))?.clone();
            let bias = tensors.get(&format!("{name}/bias"))?.clone();
            let expect = [*out_ch, *in_ch, 3, 3];
            if weight.shape() != expect {
                return Err(Error::TensorShape {
                    name: format!("{name}/weight"),
                    expected: expect.to_vec(),
                    found: weight.shape().to_vec(),
                });
            }
            if bias.shape() != [*out_ch] {
                return Err(Error::TensorShape {
                    name: format!("{name}/bias"),
                    expected: vec![*out_ch],
                    found: bias.shape().to_vec(),
                });
            }
            layers.push(ConvLayer {
                name: name.clone(),
                weight,
                bias,
                stride: *stride,
            });
        }
        let mut stages = Vec::new();
        let mut it = layers.into_iter().peekable();
        for i in 0..spec.stage_channels.len() {
            let prefix = format!("backbone/stage{}/down", i + 1);
            let mut downs = Vec::new();
            while it.peek().map(|l| l.name.starts_with(&prefix)) == Some(true) {
                downs.push(it.next().unwrap());
            }
            let res1 = it.next().expect("res1 layer");
            let res2 = it.next().expect("res2 layer");
            stages.push(Stage { downs, res1, res2 });
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn summary(&self) -> LoadSummary {
        let tensors = self.weights();
        LoadSummary {
            tensor_count: tensors.len(),
            parameter_count: tensors.total_values(),
        }
    }

    /// All weights as named tensors (archive layout).
    pub fn weights(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for stage in &self.stages {
            for layer in stage.downs.iter().chain([&stage.res1, &stage.res2]) {
                out.insert(format!("{}/weight", layer.name), layer.weight.clone());
                out.insert(format!("{}/bias", layer.name), layer.bias.clone());
            }
        }
        out
    }

    /// FNV-1a hash over all weight bytes; used to assert frozen-ness.
    pub fn weights_hash(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for (name, tensor) in self.weights().iter() {
            for b in name.as_bytes() {
                hash = (hash ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in tensor.data() {
                for b in v.to_le_bytes() {
                    hash = (hash ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        hash
    }

    pub fn save_archive(&self, path: &Path) -> Result<()> {
        archive::save(path, &self.weights(), DType::F32)
    }

    /// Runs the frozen extractor. The image is reflect-padded to a multiple
    /// of the largest stride, normalized, and pushed through every stage.
    pub fn extract(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        let (orig_h, orig_w) = image.hw();
        let padded = pad_to_multiple(&image.data, self.spec.max_stride());
        let (in_h, in_w) = padded.hw();
        let mut x = padded.map(|v| (v - NORM_MEAN) / NORM_STD);
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            for down in &stage.downs {
                x = conv2d_strided_relu(&x, &down.weight, &down.bias, down.stride);
            }
            x = residual_block(&x, &stage.res1, &stage.res2);
            stages.push(FeatureMap {
                data: x.clone(),
                stage_index: i + 1,
                stride: self.spec.stage_strides[i],
            });
        }
        Ok(FeaturePyramid {
            stages,
            backbone_id: self.spec.backbone_id.clone(),
            input_resolution: (in_h, in_w),
            original_resolution: (orig_h, orig_w),
        })
    }
}

/// Strided reflect-padded 3x3 convolution followed by ReLU.
fn conv2d_strided_relu(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = weight.shape()[0];
    let out_h = h.div_ceil(stride);
    let out_w = w.div_ceil(stride);
    let mut out = Tensor::zeros(&[c_out, out_h, out_w]);
    for co in 0..c_out {
        let b = bias.data()[co];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..3 {
                        let sy = reflect_index((oy * stride + ky) as isize - 1, h);
                        for kx in 0..3 {
                            let sx = reflect_index((ox * stride + kx) as isize - 1, w);
                            acc += weight.data()[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                * input.at3(ci, sy, sx);
                        }
                    }
                }
                out.set3(co, oy, ox, acc.max(0.0));
            }
        }
    }
    out
}

/// `relu(x + conv2(relu(conv1(x))))` with stride-1 convs.
fn residual_block(x: &Tensor, res1: &ConvLayer, res2: &ConvLayer) -> Tensor {
    let t = conv2d_strided_relu(x, &res1.weight, &res1.bias, 1);
    let r = crate::tensor::conv2d_same(&t, &res2.weight, &res2.bias);
    let mut out = x.clone();
    for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
        *o = (*o + v).max(0.0);
    }
    out
}

/// Seeded reference weights. One xorshift generator is seeded with `seed`
/// and tensors are drawn in forward layer order, weight (row-major) before
/// bias, each value uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` and
/// rounded to f32 so an f32 archive round trip is lossless.
pub fn reference_weights(spec: &BackboneSpec, seed: u64) -> NamedTensors {
    let mut rng = XorShift64Star::new(seed);
    let mut out = NamedTensors::new();
    for (name, out_ch, in_ch, _) in layer_plan(spec) {
        let fan_in = in_ch * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wlen = out_ch * in_ch * 9;
        let wdata: Vec<f64> = (0..wlen)
            .map(|_| rng.uniform(-bound, bound) as f32 as f64)
            .collect();
        let bdata: Vec<f64> = (0..out_ch)
            .map(|_| rng.uniform(-bound, bound) as f32 as f64)
            .collect();
        out.insert(
            format!("{name}/weight"),
            Tensor::from_vec(&[out_ch, in_ch, 3, 3], wdata),
        );
        out.insert(format!("{name}/bias"), Tensor::from_vec(&[out_ch], bdata));
    }
    out
}

/// Loads and validates a weights archive against a spec. Every tensor the
/// architecture needs must be present with the right shape; extra tensors
/// are rejected as unknown.
pub fn load_weights_archive(path: &Path, spec: &BackboneSpec) -> Result<NamedTensors> {
    let archive = Archive::read(path)?;
    let mut expected: Vec<String> = Vec::new();
    for (name, _, _, _) in layer_plan(spec) {
        expected.push(format!("{name}/weight"));
        expected.push(format!("{name}/bias"));
    }
    for name in archive.names() {
        if !expected.iter().any(|e| e == name) {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                message: format!("unknown tensor name `{name}`"),
            });
        }
    }
    let mut out = NamedTensors::new();
    for name in &expected {
        out.insert(name.clone(), archive.tensor(name)?);
    }
    Ok(out)
}

/// Builds the high/low resolution view pair. The low view is produced by
/// antialiased bilinear downsampling with `round(dim * lr_factor)` output
/// dimensions; `lr_factor == 1.0` yields an identical copy (used by the
/// identity-at-initialization checks).
pub fn make_dual_views(image: &ImageTensor, lr_factor: f64) -> Result<(ImageTensor, ImageTensor)> {
    if !(lr_factor > 0.0 && lr_factor <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "lr_factor must be in (0, 1], got {lr_factor}"
        )));
    }
    if image.resolution_tag != ResolutionTag::High {
        return Err(Error::InvalidImage(
            "dual views are built from a HIGH-tagged image".into(),
        ));
    }
    let (h, w) = image.hw();
    let low_h = (h as f64 * lr_factor).round() as usize;
    let low_w = (w as f64 * lr_factor).round() as usize;
    if low_h < MIN_IMAGE_SIDE || low_w < MIN_IMAGE_SIDE {
        return Err(Error::InvalidImage(format!(
            "low view {low_h}x{low_w} is below the {MIN_IMAGE_SIDE}-pixel minimum"
        )));
    }
    let low_data = crate::tensor::resize_bilinear(&image.data, low_h, low_w);
    // Antialiased averaging of in-range values stays in range, up to
    // rounding; clamp defensively before the invariant check.
    let low_data = low_data.map(|v| v.clamp(0.0, 1.0));
    let high = image.clone();
    let low = ImageTensor::new(low_data, image.source_path.clone(), ResolutionTag::Low)?;
    Ok((high, low))
}
