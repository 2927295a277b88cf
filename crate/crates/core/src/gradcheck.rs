//! Finite-difference verification of analytic gradients.
//!
//! Central differences per sampled parameter, in double precision, against
//! whatever analytic gradient routine the caller supplies. Relative error is
//! `|a - n| / max(|a|, |n|)` with an absolute fallback when both sides are
//! tiny.

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::NamedTensors;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// How many entries to probe per parameter tensor (all entries when the
    /// tensor is smaller).
    pub samples_per_tensor: usize,
    /// Seed for selecting probe entries.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            samples_per_tensor: 24,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

/// Checks `analytic(params)` against central differences of `loss(params)`.
///
/// `loss` must be a pure function of the parameter values. Fails early with
/// an error if any analytic gradient is non-finite.
pub fn finite_difference_gradcheck(
    params: &NamedTensors,
    mut loss: impl FnMut(&NamedTensors) -> f64,
    analytic: impl FnOnce(&NamedTensors) -> NamedTensors,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let grads = analytic(params);
    if !grads.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let mut rng = XorShift64Star::new(config.seed);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for (name, tensor) in params.iter() {
        let grad = grads.get(name)?;
        let len = tensor.len();
        let indices: Vec<usize> = if len <= config.samples_per_tensor {
            (0..len).collect()
        } else {
            (0..config.samples_per_tensor)
                .map(|_| (rng.next_u64() % len as u64) as usize)
                .collect()
        };
        for idx in indices {
            let mut probe = params.clone();
            let base = probe.0.get_mut(name).unwrap().data()[idx];
            probe.0.get_mut(name).unwrap().data_mut()[idx] = base + config.step;
            let plus = loss(&probe);
            probe.0.get_mut(name).unwrap().data_mut()[idx] = base - config.step;
            let minus = loss(&probe);
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.data()[idx];
            let e = rel_err(a, numeric);
            checked += 1;
            if e > max_rel {
                max_rel = e;
                worst = format!("{name}[{idx}]");
            }
            if e > config.tolerance {
                failures.push(GradCheckFailure {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        checked,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_params() -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert("p", Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.01]));
        p
    }

    fn quadratic_loss(params: &NamedTensors) -> f64 {
        params.get("p").unwrap().data().iter().map(|v| v * v).sum()
    }

    fn quadratic_grad(params: &NamedTensors) -> NamedTensors {
        let mut g = NamedTensors::new();
        g.insert("p", params.get("p").unwrap().map(|v| 2.0 * v));
        g
    }

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        let config = GradCheckConfig {
            tolerance: 1e-8,
            ..Default::default()
        };
        let report = finite_difference_gradcheck(
            &quadratic_params(),
            quadratic_loss,
            quadratic_grad,
            &config,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let report = finite_difference_gradcheck(
            &quadratic_params(),
            quadratic_loss,
            |p| {
                let mut g = quadratic_grad(p);
                let t = g.0.get_mut("p").unwrap();
                for v in t.data_mut() {
                    *v *= 2.0;
                }
                g
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let result = finite_difference_gradcheck(
            &quadratic_params(),
            quadratic_loss,
            |p| {
                let mut g = quadratic_grad(p);
                g.0.get_mut("p").unwrap().data_mut()[0] = f64::NAN;
                g
            },
            &GradCheckConfig::default(),
        );
        assert!(matches!(result, Err(Error::NonFinite(_))));
    }
}
