//! Scaled conjugate gradient minimization (Møller's algorithm, following the layout of
//! the Netlab implementation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScgConfig {
    pub max_iterations: usize,
    /// Stop when the relative objective change stays below this on two successive
    /// successful steps.
    pub objective_tolerance: f64,
    /// Stop when the gradient Euclidean norm falls below this.
    pub gradient_tolerance: f64,
    /// Step used for the finite-difference curvature estimate along the search direction.
    pub initial_scale: f64,
}

impl Default for ScgConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            objective_tolerance: 1e-8,
            gradient_tolerance: 1e-6,
            initial_scale: 1e-4,
        }
    }
}

impl ScgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || !(self.objective_tolerance > 0.0)
            || !(self.gradient_tolerance > 0.0)
            || !(self.initial_scale > 0.0)
        {
            return Err(Error::Config(format!("invalid SCG configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    MaxIterations,
    ObjectiveTolerance,
    GradientTolerance,
    /// Search direction collapsed to zero length.
    ZeroDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScgTrace {
    /// Objective at the current point after each iteration (index 0 is the start).
    pub objective: Vec<f64>,
    pub termination: Termination,
    pub iterations: usize,
}

impl ScgTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,objective\n");
        for (i, f) in self.objective.iter().enumerate() {
            s.push_str(&format!("{i},{f:e}\n"));
        }
        s
    }
}

/// Objective and gradient of a smooth function of a flat parameter vector.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn gradient(&mut self, x: &[f64]) -> Vec<f64>;
}

/// Adapter for a pair of closures.
pub struct FnObjective<F, G> {
    pub f: F,
    pub g: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn value(&mut self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        (self.g)(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite_or(iteration: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            iteration,
            what: what.to_string(),
        })
    }
}

fn finite_vec(iteration: usize, what: &str, v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            iteration,
            what: what.to_string(),
        })
    }
}

const BETA_MIN: f64 = 1e-15;
const BETA_MAX: f64 = 1e100;

/// Minimizes `objective` from `start`.
///
/// Only steps that reduce the objective are accepted, so the returned point is never
/// worse than `start`.
pub fn minimize<O: Objective + ?Sized>(
    objective: &mut O,
    start: &[f64],
    config: &ScgConfig,
) -> Result<(Vec<f64>, ScgTrace)> {
    config.validate()?;
    let n = start.len();
    let mut x = start.to_vec();
    let mut f_old = finite_or(0, "objective at start", objective.value(&x))?;
    let mut f_now = f_old;
    let mut grad_new = finite_vec(0, "gradient at start", objective.gradient(&x))?;
    let mut grad_old = grad_new.clone();
    let mut trace = ScgTrace {
        objective: vec![f_now],
        termination: Termination::MaxIterations,
        iterations: 0,
    };
    if dot(&grad_new, &grad_new).sqrt() < config.gradient_tolerance {
        trace.termination = Termination::GradientTolerance;
        return Ok((x, trace));
    }

    let mut d: Vec<f64> = grad_new.iter().map(|g| -g).collect();
    let mut success = true;
    let mut n_success = 0usize;
    let mut small_changes = 0usize;
    let mut beta = 1.0;
    let (mut mu, mut kappa, mut theta) = (0.0, 0.0, 0.0);

    for it in 1..=config.max_iterations {
        trace.iterations = it;
        if success {
            mu = dot(&d, &grad_new);
            if mu >= 0.0 {
                d = grad_new.iter().map(|g| -g).collect();
                mu = dot(&d, &grad_new);
            }
            kappa = dot(&d, &d);
            if kappa < f64::EPSILON {
                trace.termination = Termination::ZeroDirection;
                trace.objective.push(f_now);
                return Ok((x, trace));
            }
            let sigma = config.initial_scale / kappa.sqrt();
            let x_plus: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + sigma * di).collect();
            let g_plus = finite_vec(it, "gradient at curvature probe", objective.gradient(&x_plus))?;
            theta = d
                .iter()
                .zip(g_plus.iter().zip(&grad_new))
                .map(|(di, (gp, gn))| di * (gp - gn))
                .sum::<f64>()
                / sigma;
        }

        // Scale the curvature so the local quadratic model is positive definite.
        let mut delta = theta + beta * kappa;
        if delta <= 0.0 {
            delta = beta * kappa;
            beta -= theta / kappa;
        }
        let alpha = -mu / delta;

        let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
        let f_new = finite_or(it, "objective at trial point", objective.value(&x_new))?;
        let comparison = 2.0 * (f_new - f_old) / (alpha * mu);

        if comparison >= 0.0 && f_new <= f_old {
            success = true;
            n_success += 1;
            x = x_new;
            f_now = f_new;
        } else {
            success = false;
            f_now = f_old;
        }
        trace.objective.push(f_now);

        if success {
            let rel = (f_new - f_old).abs() / f_old.abs().max(f64::MIN_POSITIVE);
            small_changes = if rel < config.objective_tolerance {
                small_changes + 1
            } else {
                0
            };
            f_old = f_new;
            grad_old = grad_new;
            grad_new = finite_vec(it, "gradient", objective.gradient(&x))?;
            if small_changes >= 2 {
                trace.termination = Termination::ObjectiveTolerance;
                return Ok((x, trace));
            }
            if dot(&grad_new, &grad_new).sqrt() < config.gradient_tolerance {
                trace.termination = Termination::GradientTolerance;
                return Ok((x, trace));
            }
        }

        if comparison < 0.25 {
            beta = (4.0 * beta).min(BETA_MAX);
        }
        if comparison > 0.75 {
            beta = (0.5 * beta).max(BETA_MIN);
        }

        if n_success == n {
            d = grad_new.iter().map(|g| -g).collect();
            n_success = 0;
        } else if success {
            let gamma = grad_old
                .iter()
                .zip(&grad_new)
                .map(|(go, gn)| (go - gn) * gn)
                .sum::<f64>()
                / mu;
            d = d.iter().zip(&grad_new).map(|(di, gn)| gamma * di - gn).collect();
        }
    }
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> FnObjective<impl FnMut(&[f64]) -> f64, impl FnMut(&[f64]) -> Vec<f64>> {
        FnObjective {
            f: |x: &[f64]| x.iter().map(|v| v * v).sum(),
            g: |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(),
        }
    }

    fn rosenbrock_value(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_gradient(x: &[f64]) -> Vec<f64> {
        vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ]
    }

    #[test]
    fn quadratic_converges_to_origin() {
        let (x, trace) = minimize(&mut quadratic(), &[3.0, 4.0], &ScgConfig::default()).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-8), "{x:?}");
        assert!(trace.iterations <= 50);
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let mut obj = FnObjective {
            f: rosenbrock_value,
            g: rosenbrock_gradient,
        };
        let cfg = ScgConfig {
            max_iterations: 2000,
            objective_tolerance: 1e-14,
            gradient_tolerance: 1e-9,
            ..ScgConfig::default()
        };
        let (x, _) = minimize(&mut obj, &[-1.2, 1.0], &cfg).unwrap();
        // the known minimum is f(1, 1) = 0
        assert!(rosenbrock_value(&x) < 1e-6, "{x:?}");
        assert_eq!(rosenbrock_value(&[1.0, 1.0]), 0.0);
    }

    #[test]
    fn stationary_start_is_returned_unchanged() {
        let (x, trace) = minimize(&mut quadratic(), &[0.0, 0.0], &ScgConfig::default()).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert_eq!(trace.termination, Termination::GradientTolerance);
        assert_eq!(trace.iterations, 0);
    }

    #[test]
    fn trace_is_non_increasing_and_deterministic() {
        let mut obj = FnObjective {
            f: rosenbrock_value,
            g: rosenbrock_gradient,
        };
        let cfg = ScgConfig {
            max_iterations: 60,
            ..ScgConfig::default()
        };
        let (x1, t1) = minimize(&mut obj, &[-1.2, 1.0], &cfg).unwrap();
        let (x2, t2) = minimize(&mut obj, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(t1, t2);
        assert!(t1.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(rosenbrock_value(&x1) <= rosenbrock_value(&[-1.2, 1.0]));
    }

    #[test]
    fn non_finite_aborts() {
        let mut obj = FnObjective {
            f: |_: &[f64]| f64::NAN,
            g: |x: &[f64]| x.to_vec(),
        };
        assert!(matches!(
            minimize(&mut obj, &[1.0], &ScgConfig::default()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ScgConfig {
            max_iterations: 0,
            ..ScgConfig::default()
        };
        assert!(minimize(&mut quadratic(), &[1.0], &cfg).is_err());
    }
}
