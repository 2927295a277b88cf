//! Dense row-major f64 tensors and the shared numeric kernels built on them.
//!
//! Feature maps and images are `[C, H, W]`, convolution weights are
//! `[C_out, C_in, kh, kw]` (or `[C, kh, kw]` for depthwise filters), score
//! maps are `[H, W]`. All spatial kernels use reflect padding ("101" style,
//! the border pixel is not repeated).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel count for `[C, H, W]` tensors.
    pub fn channels(&self) -> usize {
        assert_eq!(self.shape.len(), 3);
        self.shape[0]
    }

    /// Spatial size `(H, W)` for `[C, H, W]` or `[H, W]` tensors.
    pub fn hw(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            3 => (self.shape[1], self.shape[2]),
            n => panic!("hw() on {n}-d tensor"),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    #[inline]
    pub fn at2(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.shape[1] + x]
    }

    #[inline]
    pub fn set2(&mut self, y: usize, x: usize, v: f64) {
        let w = self.shape[1];
        self.data[y * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; requires equal shapes.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Named tensor collection used for weight archives, optimizer state and
/// gradient reports. BTreeMap keeps iteration order deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors(pub BTreeMap<String, Tensor>);

impl NamedTensors {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }
}

/// Reflect ("101") index: -1 -> 1, n -> n-2; collapses to 0 when n == 1.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// One axis of a separable triangle-filter resize.
///
/// Sample positions follow the align-corners=false convention: output cell
/// `i` is centered at `(i + 0.5) * scale` in source coordinates. When
/// downsampling the filter widens by the scale factor (antialiasing); taps
/// falling outside the source are dropped and the remaining weights
/// renormalized. For upsampling this reduces to ordinary bilinear
/// interpolation with clamped borders.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, Vec<(usize, f64)>)> {
    let scale = src as f64 / dst as f64;
    let filter_scale = scale.max(1.0);
    let support = filter_scale; // triangle filter has radius 1 before scaling
    let mut rows = Vec::with_capacity(dst);
    for i in 0..dst {
        let center = (i as f64 + 0.5) * scale;
        let lo = (center - support - 0.5).ceil().max(0.0) as usize;
        let hi = ((center + support - 0.5).floor() as isize).min(src as isize - 1);
        let hi = hi.max(lo as isize) as usize;
        let mut taps = Vec::with_capacity(hi - lo + 1);
        let mut total = 0.0;
        for j in lo..=hi {
            let t = ((j as f64 + 0.5) - center) / filter_scale;
            let w = (1.0 - t.abs()).max(0.0);
            if w > 0.0 {
                taps.push((j, w));
                total += w;
            }
        }
        if taps.is_empty() {
            // Degenerate window (very large scale); fall back to nearest.
            let j = (center as usize).min(src - 1);
            taps.push((j, 1.0));
            total = 1.0;
        }
        for t in &mut taps {
            t.1 /= total;
        }
        rows.push((i, taps));
    }
    rows
}

/// Per-output-cell source taps of one resize axis; used by the autodiff
/// upsampling backward pass (the transpose of the forward interpolation).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    resize_taps(src, dst).into_iter().map(|(_, t)| t).collect()
}

/// Antialiased bilinear resize of a `[C, H, W]` tensor. Identity when the
/// size already matches (bit-exact passthrough).
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(src.shape().len(), 3);
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h == out_h && w == out_w {
        return src.clone();
    }
    let x_taps = resize_taps(w, out_w);
    let y_taps = resize_taps(h, out_h);
    // Horizontal pass, then vertical.
    let mut mid = Tensor::zeros(&[c, h, out_w]);
    for ch in 0..c {
        for y in 0..h {
            for (ox, taps) in &x_taps {
                let mut acc = 0.0;
                for &(sx, wgt) in taps {
                    acc += wgt * src.at3(ch, y, sx);
                }
                mid.set3(ch, y, *ox, acc);
            }
        }
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for (oy, taps) in &y_taps {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for &(sy, wgt) in taps {
                    acc += wgt * mid.at3(ch, sy, ox);
                }
                out.set3(ch, *oy, ox, acc);
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a `[H, W]` map (used for masks).
pub fn resize_nearest_2d(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(src.shape().len(), 2);
    let (h, w) = src.hw();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.set2(oy, ox, src.at2(sy, sx));
        }
    }
    out
}

/// Reflect-pads a `[C, H, W]` tensor on the bottom/right so both spatial
/// dimensions are multiples of `multiple`.
pub fn pad_to_multiple(src: &Tensor, multiple: usize) -> Tensor {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return src.clone();
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize, w);
                out.set3(ch, y, x, src.at3(ch, sy, sx));
            }
        }
    }
    out
}

/// Crops the top-left `[out_h, out_w]` window of a `[H, W]` map.
pub fn crop_2d(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = src.hw();
    assert!(out_h <= h && out_w <= w);
    if out_h == h && out_w == w {
        return src.clone();
    }
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for y in 0..out_h {
        for x in 0..out_w {
            out.set2(y, x, src.at2(y, x));
        }
    }
    out
}

/// Dense stride-1 "same" convolution with reflect padding.
/// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, k, k]`, `bias` is
/// `[C_out]`. Odd kernel sizes only.
pub fn conv2d_same(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    assert_eq!(c_in, wc_in);
    assert_eq!(kh, kw);
    assert_eq!(kh % 2, 1);
    assert_eq!(bias.shape(), [c_out]);
    let pad = (kh / 2) as isize;
    let mut out = Tensor::zeros(&[c_out, h, w]);
    for co in 0..c_out {
        let b = bias.data()[co];
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let sy = reflect_index(y as isize + ky as isize - pad, h);
                        for kx in 0..kw {
                            let sx = reflect_index(x as isize + kx as isize - pad, w);
                            acc += weight.data()[((co * c_in + ci) * kh + ky) * kw + kx]
                                * input.at3(ci, sy, sx);
                        }
                    }
                }
                out.set3(co, y, x, acc);
            }
        }
    }
    out
}

/// Depthwise stride-1 "same" convolution with reflect padding.
/// `input` is `[C, H, W]`, `weight` is `[C, k, k]`, `bias` is `[C]`.
pub fn depthwise_conv_same(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    assert_eq!(c, wc);
    assert_eq!(kh, kw);
    assert_eq!(kh % 2, 1);
    assert_eq!(bias.shape(), [c]);
    let pad = (kh / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let b = bias.data()[ch];
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for ky in 0..kh {
                    let sy = reflect_index(y as isize + ky as isize - pad, h);
                    for kx in 0..kw {
                        let sx = reflect_index(x as isize + kx as isize - pad, w);
                        acc += weight.data()[(ch * kh + ky) * kw + kx] * input.at3(ch, sy, sx);
                    }
                }
                out.set3(ch, y, x, acc);
            }
        }
    }
    out
}

/// Per-channel mean/std normalization over the spatial extent:
/// `(x - mean_c) / (std_c + eps)` with the population standard deviation.
pub fn channel_norm(input: &Tensor, eps: f64) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let n = (h * w) as f64;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let base = ch * h * w;
        let slice = &input.data()[base..base + h * w];
        let mean = slice.iter().sum::<f64>() / n;
        let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = var.sqrt() + eps;
        for (i, &v) in slice.iter().enumerate() {
            out.data_mut()[base + i] = (v - mean) / denom;
        }
    }
    out
}

/// Concatenates two `[C, H, W]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (cb, hb, wb) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!((h, w), (hb, wb));
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

/// Extracts channels `[start, start+len)` of a `[C, H, W]` tensor.
pub fn slice_channels(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(start + len <= c);
    let from = start * h * w;
    let to = (start + len) * h * w;
    Tensor::from_vec(&[len, h, w], t.data()[from..to].to_vec())
}

/// Separable Gaussian smoothing of a `[H, W]` map with reflect borders.
/// The kernel is a sampled Gaussian truncated at `4*sigma`, renormalized to
/// sum to one. `sigma == 0` returns the input unchanged.
pub fn gaussian_smooth_2d(src: &Tensor, sigma: f64) -> Tensor {
    assert_eq!(src.shape().len(), 2);
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut total = 0.0;
    for i in -radius..=radius {
        let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }
    let (h, w) = src.hw();
    let mut mid = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + ki as isize - radius, w);
                acc += kv * src.at2(y, sx);
            }
            mid.set2(y, x, acc);
        }
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + ki as isize - radius, h);
                acc += kv * mid.at2(sy, x);
            }
            out.set2(y, x, acc);
        }
    }
    out
}
