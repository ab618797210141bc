//! L1-penalized logistic regression over partial-response columns.
//!
//! The objective is `-loglik(b0, b) + lambda * |b|_1` with an unpenalized intercept.
//! Columns are used as given, without standardization. Each outer iteration forms the
//! weighted least-squares approximation of the log-likelihood at the current fit and
//! solves it by cyclic coordinate descent, with step halving on the true objective.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anova::PartialResponseBasis;
use crate::error::{Error, Result};
use crate::mlp::{logit, sigmoid, PROB_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub folds: usize,
    pub n_lambdas: usize,
    pub lambda_min_ratio: f64,
    /// Outer (reweighting) iterations per fit.
    pub max_sweeps: usize,
    /// Largest coefficient change accepted as converged.
    pub tolerance: f64,
    pub kkt_tolerance: f64,
    pub seed: u64,
    /// Fit at this lambda instead of choosing one by cross-validation.
    pub lambda_override: Option<f64>,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            n_lambdas: 100,
            lambda_min_ratio: 1e-4,
            max_sweeps: 1000,
            tolerance: 1e-8,
            kkt_tolerance: 1e-6,
            seed: 0,
            lambda_override: None,
        }
    }
}

/// Smallest irls weight; keeps the quadratic approximation bounded on near-separable data.
const MIN_WEIGHT: f64 = 1e-5;
/// The path stops early once the fit explains this fraction of the null deviance.
const MAX_DEVIANCE_RATIO: f64 = 0.999;
/// ...or once one more lambda improves the deviance by less than this fraction.
const MIN_DEVIANCE_CHANGE: f64 = 1e-5;
const MIN_PATH_POINTS: usize = 5;

/// Column-major copy of a design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n_rows: usize,
    n_cols: usize,
    cols: Vec<f64>,
}

impl Design {
    pub fn from_rows(row_major: &[f64], n_cols: usize) -> Result<Self> {
        if n_cols == 0 && !row_major.is_empty() || n_cols > 0 && row_major.len() % n_cols != 0 {
            return Err(Error::Dimension {
                expected: n_cols,
                got: row_major.len(),
            });
        }
        if row_major.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "design matrix".into(),
            });
        }
        let n_rows = if n_cols == 0 { 0 } else { row_major.len() / n_cols };
        let mut cols = vec![0.0; row_major.len()];
        for m in 0..n_rows {
            for j in 0..n_cols {
                cols[j * n_rows + m] = row_major[m * n_cols + j];
            }
        }
        Ok(Self { n_rows, n_cols, cols })
    }

    pub fn from_columns(columns: &[Vec<f64>], n_rows: usize) -> Result<Self> {
        let mut cols = Vec::with_capacity(columns.len() * n_rows);
        for c in columns {
            if c.len() != n_rows {
                return Err(Error::Dimension {
                    expected: n_rows,
                    got: c.len(),
                });
            }
            cols.extend_from_slice(c);
        }
        if cols.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "design matrix".into(),
            });
        }
        Ok(Self {
            n_rows,
            n_cols: columns.len(),
            cols,
        })
    }

    pub fn from_basis(basis: &PartialResponseBasis) -> Result<Self> {
        Self::from_rows(basis.design(), basis.n_terms())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn subset_rows(&self, rows: &[usize]) -> Self {
        let mut cols = Vec::with_capacity(rows.len() * self.n_cols);
        for j in 0..self.n_cols {
            let c = self.column(j);
            cols.extend(rows.iter().map(|&m| c[m]));
        }
        Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    /// Indices of the nonzero coefficients.
    pub selected: Vec<usize>,
}

impl LassoModel {
    pub fn null(n_cols: usize, targets: &[f64], lambda: f64) -> Self {
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        Self {
            intercept: logit(mean.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)),
            coefficients: vec![0.0; n_cols],
            lambda,
            selected: Vec::new(),
        }
    }

    fn from_parts(intercept: f64, coefficients: Vec<f64>, lambda: f64) -> Self {
        let selected = coefficients
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            intercept,
            coefficients,
            lambda,
            selected,
        }
    }

    pub fn linear_predictor(&self, design: &Design) -> Vec<f64> {
        let mut eta = vec![self.intercept; design.n_rows()];
        for &j in &self.selected {
            let b = self.coefficients[j];
            for (e, x) in eta.iter_mut().zip(design.column(j)) {
                *e += b * x;
            }
        }
        eta
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.intercept + self.selected.iter().map(|&j| self.coefficients[j] * row[j]).sum::<f64>())
    }

    /// Largest violation of the optimality conditions.
    ///
    /// With `s_t = sum_m x_mt (t_m - p_m)`, a zero coefficient needs `|s_t| <= lambda`, a
    /// nonzero one needs `s_t = lambda * sign(b_t)`, and the intercept needs
    /// `sum_m (t_m - p_m) = 0`.
    pub fn kkt_violation(&self, design: &Design, targets: &[f64]) -> f64 {
        let eta = self.linear_predictor(design);
        let resid: Vec<f64> = eta.iter().zip(targets).map(|(&e, &t)| t - sigmoid(e)).collect();
        let mut worst = resid.iter().sum::<f64>().abs();
        for (j, &b) in self.coefficients.iter().enumerate() {
            let s: f64 = design.column(j).iter().zip(&resid).map(|(x, r)| x * r).sum();
            let v = if b == 0.0 {
                (s.abs() - self.lambda).max(0.0)
            } else {
                (s - self.lambda * b.signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    pub fn to_json(&self, labels: &[String]) -> Result<String> {
        let out = ModelJson {
            lambda: self.lambda,
            intercept: self.intercept,
            terms: self
                .coefficients
                .iter()
                .enumerate()
                .map(|(index, &beta)| TermJson {
                    index,
                    term: labels.get(index).cloned().unwrap_or_default(),
                    beta,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))
    }

    /// Reads the format written by [`LassoModel::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelJson = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let mut coefficients = vec![0.0; m.terms.len()];
        for t in &m.terms {
            *coefficients
                .get_mut(t.index)
                .ok_or_else(|| Error::Format(format!("term index {} out of range", t.index)))? = t.beta;
        }
        Ok(Self::from_parts(m.intercept, coefficients, m.lambda))
    }
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    index: usize,
    term: String,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    lambda: f64,
    intercept: f64,
    terms: Vec<TermJson>,
}

/// Negative log-likelihood with probabilities clamped away from 0 and 1.
fn neg_loglik(eta: &[f64], targets: &[f64]) -> f64 {
    eta.iter()
        .zip(targets)
        .map(|(&e, &t)| {
            let p = sigmoid(e).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

pub fn deviance(eta: &[f64], targets: &[f64]) -> f64 {
    2.0 * neg_loglik(eta, targets)
}

pub fn penalized_objective(model: &LassoModel, design: &Design, targets: &[f64]) -> f64 {
    neg_loglik(&model.linear_predictor(design), targets)
        + model.lambda * model.coefficients.iter().map(|b| b.abs()).sum::<f64>()
}

/// Smallest lambda at which the null model is optimal.
pub fn lambda_max(design: &Design, targets: &[f64]) -> f64 {
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    (0..design.n_cols())
        .map(|j| {
            design
                .column(j)
                .iter()
                .zip(targets)
                .map(|(x, t)| x * (t - mean))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

fn check_inputs(design: &Design, targets: &[f64], lambda: f64) -> Result<()> {
    if targets.len() != design.n_rows() {
        return Err(Error::Dimension {
            expected: design.n_rows(),
            got: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::TooFewRows(0));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// Coordinate descent for `0.5 sum_m w_m (r_m)^2 + lambda |b|_1`, where `r` is the
/// working residual kept in sync with `b0` and `b`. Returns the number of passes.
#[allow(clippy::too_many_arguments)]
fn weighted_cd(
    design: &Design,
    w: &[f64],
    w_sum: f64,
    xw_sq: &[f64],
    lambda: f64,
    b0: &mut f64,
    b: &mut [f64],
    r: &mut [f64],
    tol: f64,
    max_passes: usize,
) -> usize {
    let p = design.n_cols();
    let mut passes = 0;
    let pass = |coords: &mut dyn Iterator<Item = usize>, b0: &mut f64, b: &mut [f64], r: &mut [f64]| {
        let mut max_change = 0.0f64;
        for j in coords {
            if xw_sq[j] == 0.0 {
                b[j] = 0.0;
                continue;
            }
            let x = design.column(j);
            let old = b[j];
            let g: f64 = x.iter().zip(r.iter()).zip(w).map(|((x, r), w)| w * x * r).sum::<f64>() + old * xw_sq[j];
            let new = soft_threshold(g, lambda) / xw_sq[j];
            if new != old {
                let delta = new - old;
                for (rm, xm) in r.iter_mut().zip(x) {
                    *rm -= delta * xm;
                }
                b[j] = new;
                max_change = max_change.max(xw_sq[j] * delta * delta);
            }
        }
        let d0 = r.iter().zip(w).map(|(r, w)| w * r).sum::<f64>() / w_sum;
        if d0 != 0.0 {
            *b0 += d0;
            for rm in r.iter_mut() {
                *rm -= d0;
            }
            max_change = max_change.max(w_sum * d0 * d0);
        }
        max_change
    };
    loop {
        passes += 1;
        let full = pass(&mut (0..p), b0, b, r);
        if full < tol || passes >= max_passes {
            return passes;
        }
        loop {
            let active: Vec<usize> = (0..p).filter(|&j| b[j] != 0.0).collect();
            passes += 1;
            let change = pass(&mut active.into_iter(), b0, b, r);
            if change < tol || passes >= max_passes {
                break;
            }
        }
        if passes >= max_passes {
            return passes;
        }
    }
}

/// One proximal-Newton pass: a quadratic model at `model`, minimized by
/// coordinate descent, then backtracked on the true penalized objective.
fn prox_newton_step(
    design: &Design,
    targets: &[f64],
    model: &LassoModel,
    objective: f64,
    inner_tol: f64,
) -> (LassoModel, f64) {
    let n = design.n_rows();
    let p = design.n_cols();
    let lambda = model.lambda;
    let eta = model.linear_predictor(design);
    let mut w = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for (&e, &t) in eta.iter().zip(targets) {
        let prob = sigmoid(e);
        let wm = (prob * (1.0 - prob)).max(MIN_WEIGHT);
        w.push(wm);
        r.push((t - prob) / wm);
    }
    let w_sum: f64 = w.iter().sum();
    let xw_sq: Vec<f64> = (0..p)
        .map(|j| design.column(j).iter().zip(&w).map(|(x, w)| w * x * x).sum())
        .collect();
    let mut b0 = model.intercept;
    let mut b = model.coefficients.clone();
    weighted_cd(design, &w, w_sum, &xw_sq, lambda, &mut b0, &mut b, &mut r, inner_tol, 10_000);

    let mut step = 1.0;
    let mut candidate = LassoModel::from_parts(b0, b.clone(), lambda);
    let mut cand_obj = penalized_objective(&candidate, design, targets);
    while !(cand_obj <= objective) && step > 1e-10 {
        step *= 0.5;
        let nb0 = model.intercept + step * (b0 - model.intercept);
        let nb: Vec<f64> = model
            .coefficients
            .iter()
            .zip(&b)
            .map(|(o, c)| o + step * (c - o))
            .collect();
        candidate = LassoModel::from_parts(nb0, nb, lambda);
        cand_obj = penalized_objective(&candidate, design, targets);
    }
    (candidate, cand_obj)
}

/// Zeroes coefficients whose largest contribution to the linear predictor is pure
/// rounding. They appear when two columns are (nearly) identical and would otherwise
/// carry an arbitrary sign into the optimality check.
fn prune_roundoff(design: &Design, model: &mut LassoModel) {
    let mut changed = false;
    for j in 0..model.coefficients.len() {
        let b = model.coefficients[j];
        if b == 0.0 {
            continue;
        }
        let scale = design.column(j).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if (b * scale).abs() <= 1e-13 * (1.0 + model.intercept.abs()) {
            model.coefficients[j] = 0.0;
            changed = true;
        }
    }
    if changed {
        *model = LassoModel::from_parts(model.intercept, std::mem::take(&mut model.coefficients), model.lambda);
    }
}

/// Newton refinement on the current active set with the signs held fixed.
///
/// Inside an orthant the penalty is linear, so the objective is smooth and
/// Newton converges quadratically; coordinate descent alone crawls when
/// columns are nearly collinear. Steps are only accepted if the true
/// penalized objective decreases, so a sign change can never make things worse.
fn polish(design: &Design, targets: &[f64], model: &LassoModel, objective: f64) -> (LassoModel, f64) {
    let active: Vec<usize> = (0..model.coefficients.len())
        .filter(|&j| model.coefficients[j] != 0.0)
        .collect();
    let k = active.len() + 1;
    let signs: Vec<f64> = active.iter().map(|&j| model.coefficients[j].signum()).collect();
    let n = design.n_rows();
    let mut best = model.clone();
    let mut best_obj = objective;
    let mut prev: Option<(LassoModel, f64, f64)> = None;
    for _ in 0..50 {
        let eta = best.linear_predictor(design);
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        let mut row = vec![0.0; k];
        for m in 0..n {
            let prob = sigmoid(eta[m]);
            let wm = prob * (1.0 - prob);
            let res = prob - targets[m];
            row[0] = 1.0;
            for (a, &j) in active.iter().enumerate() {
                row[a + 1] = design.column(j)[m];
            }
            for a in 0..k {
                grad[a] += res * row[a];
                let wa = wm * row[a];
                for c in a..k {
                    hess[(a, c)] += wa * row[c];
                }
            }
        }
        for (a, s) in signs.iter().enumerate() {
            grad[a + 1] += best.lambda * s;
        }
        for a in 0..k {
            for c in 0..a {
                hess[(a, c)] = hess[(c, a)];
            }
        }
        let gnorm = grad.amax();
        if let Some((m, o, g)) = prev.take() {
            // a step accepted on round-off grounds must at least shrink the gradient
            if gnorm >= g {
                best = m;
                best_obj = o;
                break;
            }
        }
        if gnorm < 1e-13 * (1.0 + best.lambda) {
            break;
        }
        let scale = hess.diagonal().amax().max(1e-300);
        let mut ridge = 0.0;
        let step = loop {
            let mut h = hess.clone();
            for a in 0..k {
                h[(a, a)] += ridge;
            }
            if let Some(ch) = h.cholesky() {
                break Some(ch.solve(&grad));
            }
            ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
            if ridge > scale {
                break None;
            }
        };
        let Some(step) = step else { break };
        // near the optimum the objective change drowns in round-off
        let slack = 1e-12 * (1.0 + best_obj.abs());
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-8 {
            let mut cand = best.clone();
            cand.intercept -= t * step[0];
            for (a, &j) in active.iter().enumerate() {
                cand.coefficients[j] -= t * step[a + 1];
            }
            let same_signs = active
                .iter()
                .zip(&signs)
                .all(|(&j, &s)| cand.coefficients[j] * s > 0.0);
            let obj = penalized_objective(&cand, design, targets);
            if obj < best_obj || (same_signs && obj <= best_obj + slack) {
                prev = Some((best.clone(), best_obj, gnorm));
                best = cand;
                best_obj = obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (best, best_obj)
}

fn solve(
    design: &Design,
    targets: &[f64],
    lambda: f64,
    start: &LassoModel,
    config: &LassoConfig,
) -> Result<LassoModel> {
    let n = design.n_rows();
    let mut model = LassoModel::from_parts(start.intercept, start.coefficients.clone(), lambda);
    let mut objective = penalized_objective(&model, design, targets);
    // squared weighted change, so relative to the scale of the deviance
    let mut inner_tol = 1e-10 * n as f64;
    let mut sweeps = 0;
    let mut violation = f64::INFINITY;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let (candidate, cand_obj) = prox_newton_step(design, targets, &model, objective, inner_tol);
        if !cand_obj.is_finite() {
            return Err(Error::NonFinite {
                iteration: sweeps,
                what: "lasso objective".into(),
            });
        }
        let change = candidate
            .coefficients
            .iter()
            .zip(&model.coefficients)
            .map(|(a, b)| (a - b).abs())
            .fold((candidate.intercept - model.intercept).abs(), f64::max);
        if cand_obj <= objective {
            model = candidate;
            objective = cand_obj;
        }
        if change < config.tolerance || sweeps % 25 == 0 {
            prune_roundoff(design, &mut model);
            objective = penalized_objective(&model, design, targets);
            let (polished, pobj) = polish(design, targets, &model, objective);
            model = polished;
            objective = pobj;
            violation = model.kkt_violation(design, targets);
            log::debug!("lambda {lambda:e} sweep {sweeps} change {change:e} kkt {violation:e}");
            if violation <= 0.1 * config.kkt_tolerance {
                break;
            }
            inner_tol = (inner_tol * 1e-2).max(1e-30);
        }
    }
    if !violation.is_finite() || violation > 0.1 * config.kkt_tolerance {
        violation = model.kkt_violation(design, targets);
    }
    if violation > config.kkt_tolerance {
        return Err(Error::LassoNonConvergence {
            sweeps,
            kkt_violation: violation,
        });
    }
    Ok(model)
}

/// Penalized fit at a single `lambda`, warm-started from `start` when given.
pub fn fit_lasso_from(
    design: &Design,
    targets: &[f64],
    lambda: f64,
    start: Option<&LassoModel>,
    config: &LassoConfig,
) -> Result<LassoModel> {
    check_inputs(design, targets, lambda)?;
    if lambda >= lambda_max(design, targets) {
        return Ok(LassoModel::null(design.n_cols(), targets, lambda));
    }
    let null = LassoModel::null(design.n_cols(), targets, lambda);
    solve(design, targets, lambda, start.unwrap_or(&null), config)
}

pub fn fit_lasso(design: &Design, targets: &[f64], lambda: f64, config: &LassoConfig) -> Result<LassoModel> {
    fit_lasso_from(design, targets, lambda, None, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub models: Vec<LassoModel>,
    /// Per-lambda validation deviance per row, averaged over folds.
    pub cv_scores: Vec<CvScore>,
    pub chosen: usize,
}

impl LassoPath {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,active,cv_deviance_mean,cv_deviance_se,chosen\n");
        for (k, (l, m)) in self.lambdas.iter().zip(&self.models).enumerate() {
            let cv = self.cv_scores.get(k);
            s.push_str(&format!(
                "{l:e},{},{},{},{}\n",
                m.selected.len(),
                cv.map_or(String::new(), |c| format!("{:e}", c.mean)),
                cv.map_or(String::new(), |c| format!("{:e}", c.se)),
                u8::from(k == self.chosen)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn lambda_grid(lambda_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    (0..n)
        .map(|k| lambda_max * min_ratio.powf(k as f64 / (n - 1) as f64))
        .collect()
}

/// Fits the path over `lambdas` with warm starts, stopping early once the deviance
/// saturates when `early_stop` is set.
pub fn fit_path(
    design: &Design,
    targets: &[f64],
    lambdas: &[f64],
    early_stop: bool,
    config: &LassoConfig,
) -> Result<Vec<LassoModel>> {
    let null_dev = deviance(&vec![LassoModel::null(0, targets, 0.0).intercept; targets.len()], targets);
    let mut models: Vec<LassoModel> = Vec::with_capacity(lambdas.len());
    let mut prev_dev = null_dev;
    for (k, &lambda) in lambdas.iter().enumerate() {
        let m = fit_lasso_from(design, targets, lambda, models.last(), config)?;
        let dev = deviance(&m.linear_predictor(design), targets);
        models.push(m);
        if early_stop && k + 1 >= MIN_PATH_POINTS && null_dev > 0.0 {
            let ratio = 1.0 - dev / null_dev;
            if ratio >= MAX_DEVIANCE_RATIO || (prev_dev - dev) < MIN_DEVIANCE_CHANGE * dev {
                break;
            }
        }
        prev_dev = dev;
    }
    Ok(models)
}

/// Stratified fold labels: each class is shuffled and dealt round-robin.
pub fn stratified_folds(targets: &[f64], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Folds(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0; targets.len()];
    for class in [0.0, 1.0] {
        let mut idx: Vec<usize> = (0..targets.len()).filter(|&m| targets[m] == class).collect();
        if idx.len() < folds {
            return Err(Error::Folds(format!(
                "class {class} has {} rows, fewer than {folds} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (k, m) in idx.into_iter().enumerate() {
            labels[m] = k % folds;
        }
    }
    Ok(labels)
}

/// Chooses the largest lambda whose mean score is within one standard error of the
/// minimum. Ties resolve to the larger lambda.
pub fn one_se_rule(scores: &[CvScore]) -> usize {
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .map_or(0, |(k, _)| k);
    let threshold = scores[best].mean + scores[best].se;
    scores.iter().position(|s| s.mean <= threshold).unwrap_or(best)
}

/// Regularization path with cross-validated choice of lambda.
pub fn path_and_select(design: &Design, targets: &[f64], config: &LassoConfig) -> Result<(LassoPath, LassoModel)> {
    check_inputs(design, targets, 0.0)?;
    if config.n_lambdas == 0 || !(config.lambda_min_ratio > 0.0 && config.lambda_min_ratio < 1.0) {
        return Err(Error::Config("lambda grid needs n_lambdas > 0 and a ratio in (0, 1)".into()));
    }
    let fold_of = stratified_folds(targets, config.folds, config.seed)?;
    let lmax = lambda_max(design, targets);
    let mut lambdas = lambda_grid(lmax, config.n_lambdas, config.lambda_min_ratio);
    let models = fit_path(design, targets, &lambdas, true, config)?;
    lambdas.truncate(models.len());

    let mut per_fold = vec![vec![0.0; lambdas.len()]; config.folds];
    for (f, fold_scores) in per_fold.iter_mut().enumerate() {
        let train: Vec<usize> = (0..targets.len()).filter(|&m| fold_of[m] != f).collect();
        let valid: Vec<usize> = (0..targets.len()).filter(|&m| fold_of[m] == f).collect();
        let xt = design.subset_rows(&train);
        let tt: Vec<f64> = train.iter().map(|&m| targets[m]).collect();
        let xv = design.subset_rows(&valid);
        let tv: Vec<f64> = valid.iter().map(|&m| targets[m]).collect();
        let mut prev: Option<LassoModel> = None;
        for (k, &lambda) in lambdas.iter().enumerate() {
            let m = match fit_lasso_from(&xt, &tt, lambda, prev.as_ref(), config) {
                Ok(m) => m,
                Err(e) => {
                    // keep the last converged fit for the rest of this fold
                    warn!("fold {f}: fit at lambda {lambda:e} failed ({e}); reusing previous fit");
                    prev.clone().unwrap_or_else(|| LassoModel::null(xt.n_cols(), &tt, lambda))
                }
            };
            fold_scores[k] = deviance(&m.linear_predictor(&xv), &tv) / tv.len() as f64;
            prev = Some(m);
        }
    }
    let k = config.folds as f64;
    let cv_scores: Vec<CvScore> = (0..lambdas.len())
        .map(|l| {
            let vals: Vec<f64> = per_fold.iter().map(|f| f[l]).collect();
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            CvScore {
                mean,
                se: (var / k).sqrt(),
            }
        })
        .collect();
    let chosen = one_se_rule(&cv_scores);
    let model = models[chosen].clone();
    Ok((
        LassoPath {
            lambdas,
            models,
            cv_scores,
            chosen,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design_from_fn(n: usize, p: usize, f: impl Fn(usize, usize) -> f64) -> Design {
        let rows: Vec<f64> = (0..n).flat_map(|m| (0..p).map(move |j| (m, j))).map(|(m, j)| f(m, j)).collect();
        Design::from_rows(&rows, p).unwrap()
    }

    #[test]
    fn layout_round_trip() {
        let d = Design::from_rows(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.column(1), &[2.0, 4.0, 6.0]);
        assert_eq!(d.subset_rows(&[2, 0]).column(0), &[5.0, 1.0]);
        assert!(Design::from_rows(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn null_model_above_lambda_max() {
        let x = design_from_fn(6, 2, |m, j| (m as f64 - 2.5) * (j as f64 + 1.0));
        let t = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let lmax = lambda_max(&x, &t);
        let m = fit_lasso(&x, &t, lmax * 1.01, &LassoConfig::default()).unwrap();
        assert!(m.selected.is_empty());
        assert!((m.intercept - logit(0.5)).abs() < 1e-15);
        let m = fit_lasso(&x, &t, lmax, &LassoConfig::default()).unwrap();
        assert!(m.coefficients.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn kkt_holds_along_path() {
        let x = design_from_fn(40, 3, |m, j| ((m * 7 + j * 13) as f64 * 0.31).sin());
        let t: Vec<f64> = (0..40).map(|m| f64::from(((m * 7) as f64 * 0.31).sin() + 0.3 * (m as f64).cos() > 0.0)).collect();
        let cfg = LassoConfig::default();
        let lambdas = lambda_grid(lambda_max(&x, &t), 20, 1e-2);
        for m in fit_path(&x, &t, &lambdas, false, &cfg).unwrap() {
            assert!(m.kkt_violation(&x, &t) <= 1e-6);
        }
    }

    #[test]
    fn one_se_prefers_larger_lambda() {
        let s = |mean, se| CvScore { mean, se };
        let scores = [s(1.0, 0.0), s(0.9, 0.05), s(0.8, 0.05), s(0.82, 0.1)];
        assert_eq!(one_se_rule(&scores), 2);
        let scores = [s(1.0, 0.0), s(0.85, 0.0), s(0.8, 0.06)];
        assert_eq!(one_se_rule(&scores), 1);
        let flat = [s(0.5, 0.0), s(0.5, 0.0)];
        assert_eq!(one_se_rule(&flat), 0);
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let t: Vec<f64> = (0..23).map(|m| f64::from(m % 3 == 0)).collect();
        let f = stratified_folds(&t, 5, 4).unwrap();
        assert_eq!(f, stratified_folds(&t, 5, 4).unwrap());
        for k in 0..5 {
            assert!((0..23).any(|m| f[m] == k && t[m] == 1.0));
            assert!((0..23).any(|m| f[m] == k && t[m] == 0.0));
        }
        assert!(stratified_folds(&[0.0, 1.0, 1.0], 2, 0).is_err());
        assert!(stratified_folds(&t, 1, 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = LassoModel::from_parts(-0.5, vec![0.0, 1.25, -3.0], 0.01);
        let back = LassoModel::from_json(&m.to_json(&["a".into(), "b".into(), "a:b".into()]).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.selected, vec![1, 2]);
    }

    #[test]
    fn grid_is_geometric() {
        let g = lambda_grid(10.0, 100, 1e-4);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 10.0);
        assert!((g[99] - 1e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }
}
