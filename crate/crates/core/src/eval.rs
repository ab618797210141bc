//! Ranking and classification metrics on held-out data.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

/// Below this many discordant pairs the McNemar p-value is computed exactly.
pub const MCNEMAR_EXACT_BELOW: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub cutpoint: f64,
    pub confusion: Confusion,
    pub n_test: usize,
}

fn check(scores: &[f64], targets: &[f64]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(Error::Dimension {
            expected: targets.len(),
            got: scores.len(),
        });
    }
    if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::TargetNotBinary(format!("{t}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "scores".into(),
        });
    }
    Ok(())
}

/// Mann–Whitney estimate with average ranks, so ties count one half.
pub fn auroc_value(scores: &[f64], targets: &[f64]) -> Result<f64> {
    check(scores, targets)?;
    let n_pos = targets.iter().filter(|&&t| t == 1.0).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        // ranks k+1..=end share their mean
        let avg = (k + 1 + end) as f64 / 2.0;
        rank_sum_pos += avg * order[k..end].iter().filter(|&&m| targets[m] == 1.0).count() as f64;
        k = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Hanley–McNeil standard error of an AUROC estimate.
pub fn hanley_mcneil_se(auc: f64, n_pos: usize, n_neg: usize) -> f64 {
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let var = (auc * (1.0 - auc)
        + (n_pos as f64 - 1.0) * (q1 - auc * auc)
        + (n_neg as f64 - 1.0) * (q2 - auc * auc))
        / (n_pos as f64 * n_neg as f64);
    var.max(0.0).sqrt()
}

/// AUROC with a 95% interval clipped to `[0, 1]`.
pub fn auroc(scores: &[f64], targets: &[f64]) -> Result<(f64, (f64, f64))> {
    let a = auroc_value(scores, targets)?;
    let n_pos = targets.iter().filter(|&&t| t == 1.0).count();
    let se = hanley_mcneil_se(a, n_pos, targets.len() - n_pos);
    Ok((a, ((a - Z_95 * se).max(0.0), (a + Z_95 * se).min(1.0))))
}

/// Counts with `score >= cutpoint` predicted positive.
pub fn confusion_at(scores: &[f64], targets: &[f64], cutpoint: f64) -> Result<Confusion> {
    check(scores, targets)?;
    let mut c = Confusion::default();
    for (&s, &t) in scores.iter().zip(targets) {
        match (s >= cutpoint, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn evaluate(scores: &[f64], targets: &[f64], cutpoint: f64) -> Result<EvalReport> {
    let (auroc, auroc_ci) = auroc(scores, targets)?;
    Ok(EvalReport {
        auroc,
        auroc_ci,
        cutpoint,
        confusion: confusion_at(scores, targets, cutpoint)?,
        n_test: scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Rows where the first classifier is right and the second wrong.
    pub b: u64,
    /// Rows where the first classifier is wrong and the second right.
    pub c: u64,
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub note: Option<String>,
}

/// Continuity-corrected McNemar test from discordant counts.
pub fn mcnemar_from_counts(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult {
            b,
            c,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
            note: Some("no discordant pairs".into()),
        };
    }
    let diff = (b as f64 - c as f64).abs();
    let statistic = (diff - 1.0).powi(2) / n as f64;
    let (p_value, exact) = if n < MCNEMAR_EXACT_BELOW {
        let binom = Binomial::new(0.5, n).expect("valid binomial");
        ((2.0 * binom.cdf(b.min(c))).min(1.0), true)
    } else {
        let chi = ChiSquared::new(1.0).expect("valid chi-square");
        (chi.sf(statistic), false)
    };
    McNemarResult {
        b,
        c,
        statistic,
        p_value,
        exact,
        note: None,
    }
}

pub fn mcnemar(pred_a: &[bool], pred_b: &[bool], targets: &[f64]) -> Result<McNemarResult> {
    if pred_a.len() != targets.len() || pred_b.len() != targets.len() {
        return Err(Error::Dimension {
            expected: targets.len(),
            got: pred_a.len().min(pred_b.len()),
        });
    }
    let (mut b, mut c) = (0, 0);
    for ((&a, &bb), &t) in pred_a.iter().zip(pred_b).zip(targets) {
        let truth = t == 1.0;
        match (a == truth, bb == truth) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

pub fn predictions(scores: &[f64], cutpoint: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= cutpoint).collect()
}
