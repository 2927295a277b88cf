//! Noise-aware training augmentation.
//!
//! Sparse point noise and structured stripe noise imitate benign
//! contamination (dust, hairs, stains) on normal samples. Noise is injected
//! into the high-resolution image first and the low-resolution view is then
//! produced by downsampling the noised image, so the two views are
//! consistent by construction. Everything is a pure function of
//! `(seed, spec, image)`.
//!
//! An atomic invocation counter backs the train/eval isolation check: the
//! evaluation path must never touch this module.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::backbone::{make_dual_views, ImageTensor, ResolutionTag};
use crate::error::{Error, Result};
use crate::rng::XorShift64Star;

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of augmentation calls made on the current thread. Training and
/// evaluation pipelines are single-threaded per call, so this is the hook
/// for asserting that evaluation never augments.
pub fn invocation_count() -> u64 {
    INVOCATIONS.with(Cell::get)
}

fn record_invocation() {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Bernoulli probability that a pixel receives point noise.
    pub point_density: f64,
    /// Grayscale amplitude range of point noise.
    pub point_amplitude_range: (f64, f64),
    /// Inclusive range of stripes per image.
    pub stripe_count_range: (usize, usize),
    /// Stripe width range in pixels (inclusive).
    pub stripe_width_range: (usize, usize),
    /// Stripe alpha-blend opacity range.
    pub stripe_opacity_range: (f64, f64),
    /// Probability that a training sample is augmented at all.
    pub apply_probability: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            point_density: 0.002,
            point_amplitude_range: (0.0, 1.0),
            stripe_count_range: (0, 3),
            stripe_width_range: (1, 5),
            stripe_opacity_range: (0.3, 0.9),
            apply_probability: 0.5,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.05).contains(&self.point_density) {
            return Err(Error::InvalidConfig(format!(
                "point_density must be in [0, 0.05], got {}",
                self.point_density
            )));
        }
        let ordered = |name: &str, lo: f64, hi: f64| -> Result<()> {
            // negated form so NaN bounds fail validation
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("{name} range is not ordered")));
            }
            Ok(())
        };
        ordered(
            "point_amplitude",
            self.point_amplitude_range.0,
            self.point_amplitude_range.1,
        )?;
        ordered(
            "stripe_opacity",
            self.stripe_opacity_range.0,
            self.stripe_opacity_range.1,
        )?;
        if self.stripe_count_range.0 > self.stripe_count_range.1 {
            return Err(Error::InvalidConfig(
                "stripe_count range is not ordered".into(),
            ));
        }
        if self.stripe_width_range.0 > self.stripe_width_range.1 {
            return Err(Error::InvalidConfig(
                "stripe_width range is not ordered".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.point_amplitude_range.0)
            || !(0.0..=1.0).contains(&self.point_amplitude_range.1)
        {
            return Err(Error::InvalidConfig(
                "point amplitudes must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::InvalidConfig(
                "apply_probability must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Copy with a different seed, for per-sample stream derivation.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Sparse point noise: a Bernoulli mask selects pixels (row-major draw
/// order, one extra draw per hit for the amplitude); selected pixels are
/// replaced by a grayscale value from the amplitude range.
pub fn inject_point_noise(
    image: &ImageTensor,
    spec: &NoiseSpec,
    rng: &mut XorShift64Star,
) -> Result<ImageTensor> {
    spec.validate()?;
    if image.resolution_tag != ResolutionTag::High {
        return Err(Error::InvalidImage(
            "point noise expects the HIGH view".into(),
        ));
    }
    record_invocation();
    let (h, w) = image.hw();
    let mut data = image.data.clone();
    for y in 0..h {
        for x in 0..w {
            if rng.next_f64() < spec.point_density {
                let amp = rng
                    .uniform(spec.point_amplitude_range.0, spec.point_amplitude_range.1)
                    .clamp(0.0, 1.0);
                for c in 0..3 {
                    data.set3(c, y, x, amp);
                }
            }
        }
    }
    ImageTensor::new(data, image.source_path.clone(), ResolutionTag::High)
}

/// Distance from a point to a segment, for anti-aliased stripe coverage.
fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Structured stripe noise: `n` random line segments with random width,
/// grayscale tone and opacity, alpha-blended with anti-aliased edges.
/// Per-stripe draw order: x0, y0, x1, y1, width, opacity, tone.
pub fn inject_stripe_noise(
    image: &ImageTensor,
    spec: &NoiseSpec,
    rng: &mut XorShift64Star,
) -> Result<ImageTensor> {
    spec.validate()?;
    if image.resolution_tag != ResolutionTag::High {
        return Err(Error::InvalidImage(
            "stripe noise expects the HIGH view".into(),
        ));
    }
    record_invocation();
    let (h, w) = image.hw();
    let mut data = image.data.clone();
    let count = rng.uniform_usize(spec.stripe_count_range.0, spec.stripe_count_range.1);
    for _ in 0..count {
        let ax = rng.uniform(0.0, w as f64);
        let ay = rng.uniform(0.0, h as f64);
        let bx = rng.uniform(0.0, w as f64);
        let by = rng.uniform(0.0, h as f64);
        let width = rng.uniform_usize(spec.stripe_width_range.0, spec.stripe_width_range.1) as f64;
        let opacity = rng.uniform(spec.stripe_opacity_range.0, spec.stripe_opacity_range.1);
        let tone = rng.next_f64();
        let reach = width / 2.0 + 1.0;
        let x_lo = (ax.min(bx) - reach).floor().max(0.0) as usize;
        let x_hi = (ax.max(bx) + reach).ceil().min(w as f64 - 1.0) as usize;
        let y_lo = (ay.min(by) - reach).floor().max(0.0) as usize;
        let y_hi = (ay.max(by) + reach).ceil().min(h as f64 - 1.0) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, ax, ay, bx, by);
                let coverage = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if coverage == 0.0 {
                    continue;
                }
                let alpha = opacity * coverage;
                for c in 0..3 {
                    let v = data.at3(c, y, x);
                    data.set3(c, y, x, ((1.0 - alpha) * v + alpha * tone).clamp(0.0, 1.0));
                }
            }
        }
    }
    ImageTensor::new(data, image.source_path.clone(), ResolutionTag::High)
}

/// Noise-consistent dual views: with probability `apply_probability` the HR
/// image receives point then stripe noise; the LOW view is produced by
/// downsampling the (possibly noised) HR image, so
/// `low == downsample(high)` holds bit-exactly for every output pair.
pub fn paired_augment(
    image: &ImageTensor,
    spec: &NoiseSpec,
    lr_factor: f64,
) -> Result<(ImageTensor, ImageTensor)> {
    spec.validate()?;
    record_invocation();
    let mut rng = XorShift64Star::new(spec.seed);
    let apply = rng.next_f64() < spec.apply_probability;
    if !apply {
        return make_dual_views(image, lr_factor);
    }
    let noised = inject_point_noise(image, spec, &mut rng)?;
    let noised = inject_stripe_noise(&noised, spec, &mut rng)?;
    make_dual_views(&noised, lr_factor)
}
