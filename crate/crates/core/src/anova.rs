//! Functional ANOVA decomposition of an MLP logit anchored at the origin.
//!
//! With inputs normalized so the training median is zero, the constant term is the
//! logit at the origin, a univariate term is the logit with one coordinate set minus
//! the constant, and a bivariate term additionally removes both univariate terms.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;

/// Largest index set accepted by [`phi_general`]; its cost is exponential in the set size.
pub const GENERAL_MAX_ORDER: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnovaTerm {
    Univariate(usize),
    /// Indices are strictly increasing.
    Bivariate(usize, usize),
}

impl AnovaTerm {
    pub fn pair(i: usize, j: usize) -> Result<Self> {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => Ok(Self::Bivariate(i, j)),
            std::cmp::Ordering::Greater => Ok(Self::Bivariate(j, i)),
            std::cmp::Ordering::Equal => Err(Error::Index(format!("pair ({i}, {j}) repeats an input"))),
        }
    }

    pub fn inputs(&self) -> Vec<usize> {
        match *self {
            Self::Univariate(i) => vec![i],
            Self::Bivariate(i, j) => vec![i, j],
        }
    }

    pub fn label(&self, names: &[String]) -> String {
        match *self {
            Self::Univariate(i) => names[i].clone(),
            Self::Bivariate(i, j) => format!("{}:{}", names[i], names[j]),
        }
    }
}

impl fmt::Display for AnovaTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Univariate(i) => write!(f, "phi_{i}"),
            Self::Bivariate(i, j) => write!(f, "phi_{i}_{j}"),
        }
    }
}

fn check_index(model: &MlpModel, i: usize) -> Result<()> {
    if i >= model.n_inputs() {
        return Err(Error::Index(format!(
            "input {i} out of range for a {}-input model",
            model.n_inputs()
        )));
    }
    Ok(())
}

/// Logit with only the listed coordinates set and every other input at the anchor.
fn sparse_logit(model: &MlpModel, coords: &[(usize, f64)]) -> f64 {
    let mut a = model.output_bias;
    for j in 0..model.n_hidden() {
        let u = model.hidden_bias[j]
            + coords
                .iter()
                .map(|&(i, v)| model.weight(j, i) * v)
                .sum::<f64>();
        a += model.output_weights[j] * u.tanh();
    }
    a
}

/// Logit at the anchor (all-zero input).
pub fn phi0(model: &MlpModel) -> f64 {
    sparse_logit(model, &[])
}

pub fn phi_univariate(model: &MlpModel, i: usize, value: f64) -> Result<f64> {
    check_index(model, i)?;
    Ok(sparse_logit(model, &[(i, value)]) - phi0(model))
}

pub fn phi_bivariate(model: &MlpModel, i: usize, j: usize, values: (f64, f64)) -> Result<f64> {
    check_index(model, i)?;
    check_index(model, j)?;
    if i == j {
        return Err(Error::Index(format!("bivariate term needs two distinct inputs, got ({i}, {i})")));
    }
    let p0 = phi0(model);
    let joint = sparse_logit(model, &[(i, values.0), (j, values.1)]);
    let ui = sparse_logit(model, &[(i, values.0)]) - p0;
    let uj = sparse_logit(model, &[(j, values.1)]) - p0;
    Ok(joint - ui - uj - p0)
}

/// Component for an arbitrary strictly increasing index set, by recursion over all
/// proper non-empty subsets. Intended for small sets only.
pub fn phi_general(model: &MlpModel, indices: &[usize], values: &[f64]) -> Result<f64> {
    if indices.is_empty() || indices.len() != values.len() {
        return Err(Error::Index("index set must be non-empty and match the values".into()));
    }
    if indices.len() > GENERAL_MAX_ORDER {
        return Err(Error::Index(format!(
            "order {} exceeds the limit of {GENERAL_MAX_ORDER}",
            indices.len()
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Index("index set must be strictly increasing".into()));
    }
    for &i in indices {
        check_index(model, i)?;
    }
    let p0 = phi0(model);
    let n = indices.len();
    // memoized components over subset bitmasks, in increasing mask order so every
    // proper subset is ready when its superset is evaluated
    let mut comp = vec![0.0; 1 << n];
    for mask in 1usize..(1 << n) {
        let coords: Vec<(usize, f64)> = (0..n)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| (indices[b], values[b]))
            .collect();
        let mut v = sparse_logit(model, &coords) - p0;
        let mut sub = (mask - 1) & mask;
        while sub > 0 {
            v -= comp[sub];
            sub = (sub - 1) & mask;
        }
        comp[mask] = v;
    }
    Ok(comp[(1 << n) - 1])
}

/// Value of `term` for a full input row.
pub fn term_value(model: &MlpModel, phi0: f64, term: AnovaTerm, x: &[f64]) -> f64 {
    match term {
        AnovaTerm::Univariate(i) => sparse_logit(model, &[(i, x[i])]) - phi0,
        AnovaTerm::Bivariate(i, j) => {
            let joint = sparse_logit(model, &[(i, x[i]), (j, x[j])]);
            let ui = sparse_logit(model, &[(i, x[i])]);
            let uj = sparse_logit(model, &[(j, x[j])]);
            joint - ui - uj + phi0
        }
    }
}

/// Which bivariate terms enter the design matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairPolicy {
    /// All pairs when `d <= 40`, otherwise the top 15 inputs by ARD relevance.
    Auto,
    All,
    None,
    /// All pairs among the `m` most relevant inputs.
    TopRanked(usize),
    Explicit(Vec<(usize, usize)>),
}

impl std::str::FromStr for PairPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "auto" => Ok(Self::Auto),
            "all" => Ok(Self::All),
            "none" => Ok(Self::None),
            _ => {
                if let Some(m) = s.strip_prefix("top:") {
                    return m
                        .parse()
                        .map(Self::TopRanked)
                        .map_err(|_| Error::Config(format!("bad pair policy `{s}`")));
                }
                Err(Error::Config(format!("bad pair policy `{s}`")))
            }
        }
    }
}

pub const AUTO_ALL_PAIRS_MAX_D: usize = 40;
pub const AUTO_TOP_M: usize = 15;

/// Inputs ranked by `sum_j w_ji^2 / alpha_i`, most relevant first.
pub fn relevance_ranking(model: &MlpModel, alphas: Option<&[f64]>) -> Vec<usize> {
    let norms = model.group_sq_norms();
    let score = |i: usize| norms[i] / alphas.map_or(1.0, |a| a[i]);
    let mut order: Vec<usize> = (0..model.n_inputs()).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order
}

/// Canonical term list: univariates by index, then pairs in lexicographic order.
///
/// When `restrict` is given only terms whose inputs all lie in it are kept.
pub fn select_terms(
    model: &MlpModel,
    policy: &PairPolicy,
    restrict: Option<&[usize]>,
    alphas: Option<&[f64]>,
) -> Result<Vec<AnovaTerm>> {
    let d = model.n_inputs();
    if let Some(r) = restrict {
        for &i in r {
            check_index(model, i)?;
        }
    }
    let allowed = |i: usize| restrict.is_none_or(|r| r.contains(&i));
    let mut terms: Vec<AnovaTerm> = (0..d).filter(|&i| allowed(i)).map(AnovaTerm::Univariate).collect();
    let all_pairs_among = |inputs: &[usize]| {
        let mut v = Vec::new();
        for (a, &i) in inputs.iter().enumerate() {
            for &j in &inputs[a + 1..] {
                v.push((i.min(j), i.max(j)));
            }
        }
        v
    };
    let mut pairs: Vec<(usize, usize)> = match policy {
        PairPolicy::None => Vec::new(),
        PairPolicy::All => all_pairs_among(&(0..d).collect::<Vec<_>>()),
        PairPolicy::Auto if d <= AUTO_ALL_PAIRS_MAX_D => all_pairs_among(&(0..d).collect::<Vec<_>>()),
        PairPolicy::Auto => {
            let top: Vec<usize> = relevance_ranking(model, alphas).into_iter().take(AUTO_TOP_M).collect();
            all_pairs_among(&top)
        }
        PairPolicy::TopRanked(m) => {
            let top: Vec<usize> = relevance_ranking(model, alphas).into_iter().take(*m).collect();
            all_pairs_among(&top)
        }
        PairPolicy::Explicit(list) => {
            let mut v = Vec::new();
            for &(i, j) in list {
                check_index(model, i)?;
                check_index(model, j)?;
                if let AnovaTerm::Bivariate(a, b) = AnovaTerm::pair(i, j)? {
                    v.push((a, b));
                }
            }
            v
        }
    };
    pairs.sort_unstable();
    pairs.dedup();
    terms.extend(
        pairs
            .into_iter()
            .filter(|&(i, j)| allowed(i) && allowed(j))
            .map(|(i, j)| AnovaTerm::Bivariate(i, j)),
    );
    Ok(terms)
}

/// ANOVA terms of a fitted model and their values at each training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialResponseBasis {
    pub phi0: f64,
    pub terms: Vec<AnovaTerm>,
    n_rows: usize,
    /// Row-major `n_rows x terms.len()`.
    design: Vec<f64>,
}

impl PartialResponseBasis {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn design(&self) -> &[f64] {
        &self.design
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let t = self.terms.len();
        &self.design[m * t..(m + 1) * t]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.n_rows).map(|m| self.row(m)[t]).collect()
    }

    pub fn term_index(&self, term: AnovaTerm) -> Option<usize> {
        self.terms.iter().position(|&t| t == term)
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = self
            .terms
            .iter()
            .map(|t| t.label(names))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for m in 0..self.n_rows {
            let line: Vec<String> = self.row(m).iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Evaluates `terms` at every row of `data`, one row at a time.
pub fn build_basis(model: &MlpModel, data: &Dataset, terms: Vec<AnovaTerm>) -> Result<PartialResponseBasis> {
    if data.n_features() != model.n_inputs() {
        return Err(Error::Dimension {
            expected: model.n_inputs(),
            got: data.n_features(),
        });
    }
    for t in &terms {
        for i in t.inputs() {
            check_index(model, i)?;
        }
    }
    let h = model.n_hidden();
    let d = model.n_inputs();
    let p0 = phi0(model);
    let mut design = Vec::with_capacity(data.len() * terms.len());
    let mut uni_logit = vec![0.0; d];
    let mut contrib = vec![0.0; d * h];
    for x in data.rows() {
        for i in 0..d {
            let mut a = model.output_bias;
            for j in 0..h {
                let c = model.weight(j, i) * x[i];
                contrib[i * h + j] = c;
                a += model.output_weights[j] * (model.hidden_bias[j] + c).tanh();
            }
            uni_logit[i] = a;
        }
        for term in &terms {
            let v = match *term {
                AnovaTerm::Univariate(i) => uni_logit[i] - p0,
                AnovaTerm::Bivariate(i, k) => {
                    let mut a = model.output_bias;
                    for j in 0..h {
                        let u = model.hidden_bias[j] + contrib[i * h + j] + contrib[k * h + j];
                        a += model.output_weights[j] * u.tanh();
                    }
                    a - uni_logit[i] - uni_logit[k] + p0
                }
            };
            design.push(v);
        }
    }
    Ok(PartialResponseBasis {
        phi0: p0,
        terms,
        n_rows: data.len(),
        design,
    })
}

pub fn build_design_matrix(model: &MlpModel, train: &Dataset, policy: &PairPolicy) -> Result<PartialResponseBasis> {
    let terms = select_terms(model, policy, None, None)?;
    build_basis(model, train, terms)
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
        .collect()
}

pub const UNIVARIATE_GRID: usize = 101;
pub const BIVARIATE_GRID: usize = 41;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExportedTerm {
    term: AnovaTerm,
    label: String,
    file: String,
    /// Observed training range of each input, in normalized units.
    ranges: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExportIndex {
    phi0: f64,
    terms: Vec<ExportedTerm>,
}

/// Writes one CSV per term over the training range plus `index.json`.
pub fn export_partial_responses(
    model: &MlpModel,
    basis: &PartialResponseBasis,
    train: &Dataset,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let range = |i: usize| {
        train
            .rows()
            .map(|r| r[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let names = &train.feature_names;
    let mut index = ExportIndex {
        phi0: basis.phi0,
        terms: Vec::new(),
    };
    for (t, term) in basis.terms.iter().enumerate() {
        let file = format!("term_{t:03}.csv");
        let mut csv = String::new();
        let ranges: Vec<(f64, f64)> = term.inputs().iter().map(|&i| range(i)).collect();
        match *term {
            AnovaTerm::Univariate(i) => {
                csv.push_str(&format!("{},phi\n", names[i]));
                for v in linspace(ranges[0].0, ranges[0].1, UNIVARIATE_GRID) {
                    csv.push_str(&format!("{v:e},{:e}\n", phi_univariate(model, i, v)?));
                }
            }
            AnovaTerm::Bivariate(i, j) => {
                csv.push_str(&format!("{},{},phi\n", names[i], names[j]));
                for a in linspace(ranges[0].0, ranges[0].1, BIVARIATE_GRID) {
                    for b in linspace(ranges[1].0, ranges[1].1, BIVARIATE_GRID) {
                        csv.push_str(&format!("{a:e},{b:e},{:e}\n", phi_bivariate(model, i, j, (a, b))?));
                    }
                }
            }
        }
        let path = dir.join(&file);
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        index.terms.push(ExportedTerm {
            term: *term,
            label: term.label(names),
            file,
            ranges,
        });
    }
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn additive_model() -> MlpModel {
        let mut m = MlpModel::zeros(2, 4);
        // units 0,1 see input 0; units 2,3 see input 1
        m.first_layer = vec![0.8, 0.0, -1.3, 0.0, 0.0, 0.5, 0.0, 2.0];
        m.hidden_bias = vec![0.1, -0.2, 0.3, 0.0];
        m.output_weights = vec![1.0, 0.7, -0.4, 1.1];
        m.output_bias = 0.25;
        m
    }

    #[test]
    fn zero_model_constant() {
        assert_eq!(phi0(&MlpModel::zeros(3, 2)), 0.0);
    }

    #[test]
    fn phi0_is_logit_at_origin() {
        let m = MlpModel::random(4, 5, 3);
        assert_eq!(phi0(&m), m.logit_output(&[0.0; 4]).unwrap());
        let p = m.forward(&[0.0; 4]).unwrap();
        assert!((phi0(&m) - (p / (1.0 - p)).ln()).abs() < 1e-12);
    }

    #[test]
    fn anchor_values_vanish() {
        let m = MlpModel::random(3, 5, 7);
        for i in 0..3 {
            assert_eq!(phi_univariate(&m, i, 0.0).unwrap(), 0.0);
        }
        assert!(phi_bivariate(&m, 0, 2, (0.0, 1.3)).unwrap().abs() < 1e-12);
        assert!(phi_bivariate(&m, 0, 2, (-0.7, 0.0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn additive_model_branches_and_no_interaction() {
        let m = additive_model();
        let branch0 = |x: f64| 1.0 * (0.1 + 0.8 * x).tanh() + 0.7 * (-0.2 - 1.3 * x).tanh();
        for &x in &[-2.0, -0.5, 0.3, 1.7] {
            let expect = branch0(x) - branch0(0.0);
            assert!((phi_univariate(&m, 0, x).unwrap() - expect).abs() < 1e-14);
        }
        for a in linspace(-3.0, 3.0, 50) {
            for b in linspace(-3.0, 3.0, 50) {
                assert!(phi_bivariate(&m, 0, 1, (a, b)).unwrap().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_input_identity() {
        let m = MlpModel::random(1, 6, 2);
        for &x in &[-1.5, 0.2, 3.0] {
            let lhs = phi_univariate(&m, 0, x).unwrap() + phi0(&m);
            assert!((lhs - m.logit_output(&[x]).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn general_recursion_base_cases() {
        let m = MlpModel::random(2, 4, 5);
        assert_eq!(
            phi_general(&m, &[1], &[0.6]).unwrap(),
            phi_univariate(&m, 1, 0.6).unwrap()
        );
        let x = [0.4, -1.1];
        let full = m.logit_output(&x).unwrap()
            - phi_univariate(&m, 0, x[0]).unwrap()
            - phi_univariate(&m, 1, x[1]).unwrap()
            - phi0(&m);
        assert!((phi_general(&m, &[0, 1], &x).unwrap() - full).abs() < 1e-13);
        assert!((phi_bivariate(&m, 0, 1, (x[0], x[1])).unwrap() - full).abs() < 1e-13);
    }

    #[test]
    fn index_errors() {
        let m = MlpModel::random(3, 2, 1);
        assert!(phi_univariate(&m, 3, 1.0).is_err());
        assert!(phi_bivariate(&m, 1, 1, (1.0, 1.0)).is_err());
        assert!(phi_general(&m, &[2, 1], &[1.0, 1.0]).is_err());
        assert!(phi_general(&m, &[], &[]).is_err());
    }

    #[test]
    fn term_layout() {
        let m = MlpModel::random(3, 2, 1);
        let terms = select_terms(&m, &PairPolicy::All, None, None).unwrap();
        assert_eq!(
            terms,
            vec![
                AnovaTerm::Univariate(0),
                AnovaTerm::Univariate(1),
                AnovaTerm::Univariate(2),
                AnovaTerm::Bivariate(0, 1),
                AnovaTerm::Bivariate(0, 2),
                AnovaTerm::Bivariate(1, 2),
            ]
        );
        let restricted = select_terms(&m, &PairPolicy::All, Some(&[0, 2]), None).unwrap();
        assert_eq!(
            restricted,
            vec![AnovaTerm::Univariate(0), AnovaTerm::Univariate(2), AnovaTerm::Bivariate(0, 2)]
        );
        let top = select_terms(&m, &PairPolicy::TopRanked(2), None, None).unwrap();
        assert_eq!(top.len(), 4);
    }

    #[test]
    fn design_matrix_matches_pointwise_terms() {
        let m = MlpModel::random(3, 4, 9);
        let data = Dataset::new(
            "d",
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.0, 0.0, 0.0, 0.5, -1.0, 2.0, -0.3, 0.0, 1.1, 1.4, 0.9, -0.6],
            vec![0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let basis = build_design_matrix(&m, &data, &PairPolicy::All).unwrap();
        assert_eq!(basis.n_terms(), 6);
        assert!(basis.row(0).iter().all(|&v| v == 0.0));
        for (r, x) in data.rows().enumerate() {
            for (t, &term) in basis.terms.iter().enumerate() {
                let oracle = match term {
                    AnovaTerm::Univariate(i) => phi_univariate(&m, i, x[i]).unwrap(),
                    AnovaTerm::Bivariate(i, j) => phi_bivariate(&m, i, j, (x[i], x[j])).unwrap(),
                };
                assert!((basis.row(r)[t] - oracle).abs() < 1e-12);
                assert!((term_value(&m, basis.phi0, term, x) - oracle).abs() < 1e-12);
            }
        }
        // row 2 has x_b = 0: the (a,b) and (b,c) interactions vanish there
        assert!(basis.row(2)[3].abs() < 1e-10 && basis.row(2)[5].abs() < 1e-10);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-1.0, 2.0, 101);
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[100], 2.0);
    }
}
