//! Partial response networks: additive sums of small subnetworks copied from an MLP.
//!
//! Each selected univariate or bivariate term becomes a subnetwork that replicates the
//! MLP's hidden layer restricted to one or two inputs, with output weights scaled by
//! the Lasso coefficient. Terms sharing an input merge their univariate parts.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anova::{AnovaTerm, PartialResponseBasis};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lasso::{self, Design, LassoConfig, LassoModel, LassoPath};
use crate::mlp::{cross_entropy_term, sigmoid, MlpModel};
use crate::scg::{self, Objective, ScgConfig, ScgTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubNetwork {
    /// One or two strictly increasing input indices.
    pub inputs: Vec<usize>,
    /// Row-major `h x inputs.len()`.
    pub hidden_weights: Vec<f64>,
    pub hidden_biases: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

impl SubNetwork {
    pub fn n_hidden(&self) -> usize {
        self.hidden_biases.len()
    }

    pub fn n_params(&self) -> usize {
        self.hidden_weights.len() + 2 * self.n_hidden() + 1
    }

    pub fn term(&self) -> AnovaTerm {
        match self.inputs[..] {
            [i] => AnovaTerm::Univariate(i),
            [i, j] => AnovaTerm::Bivariate(i, j),
            _ => unreachable!("subnetworks have one or two inputs"),
        }
    }

    /// Logit contribution given the values of this subnetwork's own inputs.
    pub fn eval_local(&self, values: &[f64]) -> f64 {
        let k = self.inputs.len();
        let mut out = self.output_bias;
        for j in 0..self.n_hidden() {
            let w = &self.hidden_weights[j * k..(j + 1) * k];
            let u = self.hidden_biases[j] + w.iter().zip(values).map(|(w, v)| w * v).sum::<f64>();
            out += self.output_weights[j] * u.tanh();
        }
        out
    }

    /// Logit contribution for a full input row.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.inputs[..] {
            [i] => self.eval_local(&[x[i]]),
            [i, j] => self.eval_local(&[x[i], x[j]]),
            _ => unreachable!("subnetworks have one or two inputs"),
        }
    }

    pub fn anchor_value(&self) -> f64 {
        self.eval_local(&vec![0.0; self.inputs.len()])
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.hidden_weights);
        out.extend_from_slice(&self.hidden_biases);
        out.extend_from_slice(&self.output_weights);
        out.push(self.output_bias);
    }

    fn set_params_from(&mut self, p: &[f64]) -> usize {
        let (nw, h) = (self.hidden_weights.len(), self.n_hidden());
        self.hidden_weights.copy_from_slice(&p[..nw]);
        self.hidden_biases.copy_from_slice(&p[nw..nw + h]);
        self.output_weights.copy_from_slice(&p[nw + h..nw + 2 * h]);
        self.output_bias = p[nw + 2 * h];
        self.n_params()
    }

    /// Adds `r * d(contribution)/d(params)` into `grad`.
    fn accumulate_gradient(&self, x: &[f64], r: f64, grad: &mut [f64]) {
        let k = self.inputs.len();
        let h = self.n_hidden();
        let nw = self.hidden_weights.len();
        let vals: Vec<f64> = self.inputs.iter().map(|&i| x[i]).collect();
        for j in 0..h {
            let w = &self.hidden_weights[j * k..(j + 1) * k];
            let z = (self.hidden_biases[j] + w.iter().zip(&vals).map(|(w, v)| w * v).sum::<f64>()).tanh();
            let delta = r * self.output_weights[j] * (1.0 - z * z);
            for (a, v) in vals.iter().enumerate() {
                grad[j * k + a] += delta * v;
            }
            grad[nw + j] += delta;
            grad[nw + h + j] += r * z;
        }
        grad[nw + 2 * h] += r;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the source MLP's text serialization.
    pub mlp_hash: String,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrnModel {
    pub n_inputs: usize,
    pub subnetworks: Vec<SubNetwork>,
    pub global_bias: f64,
    pub source: Provenance,
}

/// Builds the network whose logit equals `b0 + sum_t b_t phi_t(x)` exactly.
///
/// A univariate subnetwork for input `i` carries weight
/// `b_i - sum of b_kl over selected pairs containing i`; each selected pair adds a
/// coupled subnetwork scaled by `b_kl` that reproduces the full two-input logit.
pub fn build_prn(mlp: &MlpModel, basis: &PartialResponseBasis, lasso: &LassoModel, seed: u64) -> Result<PrnModel> {
    if lasso.coefficients.len() != basis.n_terms() {
        return Err(Error::Dimension {
            expected: basis.n_terms(),
            got: lasso.coefficients.len(),
        });
    }
    let d = mlp.n_inputs();
    let h = mlp.n_hidden();
    let mut uni_scale: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (t, &beta) in lasso.coefficients.iter().enumerate() {
        if beta == 0.0 {
            continue;
        }
        let term = basis.terms[t];
        for i in term.inputs() {
            if i >= d {
                return Err(Error::Index(format!("term {term} references input {i} of a {d}-input model")));
            }
        }
        match term {
            AnovaTerm::Univariate(i) => *uni_scale.entry(i).or_insert(0.0) += beta,
            AnovaTerm::Bivariate(i, j) => {
                *uni_scale.entry(i).or_insert(0.0) -= beta;
                *uni_scale.entry(j).or_insert(0.0) -= beta;
                pairs.push((i, j, beta));
            }
        }
    }
    let offset = mlp.output_bias - basis.phi0;
    let mut subnetworks = Vec::with_capacity(uni_scale.len() + pairs.len());
    for (&i, &c) in &uni_scale {
        subnetworks.push(SubNetwork {
            inputs: vec![i],
            hidden_weights: (0..h).map(|j| mlp.weight(j, i)).collect(),
            hidden_biases: mlp.hidden_bias.clone(),
            output_weights: mlp.output_weights.iter().map(|v| c * v).collect(),
            output_bias: c * offset,
        });
    }
    for (i, k, beta) in pairs {
        subnetworks.push(SubNetwork {
            inputs: vec![i, k],
            hidden_weights: (0..h).flat_map(|j| [mlp.weight(j, i), mlp.weight(j, k)]).collect(),
            hidden_biases: mlp.hidden_bias.clone(),
            output_weights: mlp.output_weights.iter().map(|v| beta * v).collect(),
            output_bias: beta * offset,
        });
    }
    Ok(PrnModel {
        n_inputs: d,
        subnetworks,
        global_bias: lasso.intercept,
        source: Provenance {
            mlp_hash: mlp.hash(),
            lambda: lasso.lambda,
            seed,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrnOutput {
    pub probability: f64,
    pub logit: f64,
    /// One entry per subnetwork, in model order.
    pub contributions: Vec<f64>,
}

impl PrnModel {
    pub fn intercept_only(n_inputs: usize, global_bias: f64, source: Provenance) -> Self {
        Self {
            n_inputs,
            subnetworks: Vec::new(),
            global_bias,
            source,
        }
    }

    pub fn n_params(&self) -> usize {
        self.subnetworks.iter().map(SubNetwork::n_params).sum::<usize>() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for s in &self.subnetworks {
            s.params_into(&mut p);
        }
        p.push(self.global_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let mut at = 0;
        for s in &mut self.subnetworks {
            at += s.set_params_from(&p[at..]);
        }
        self.global_bias = p[at];
        Ok(())
    }

    pub fn logit_unchecked(&self, x: &[f64]) -> f64 {
        self.global_bias + self.subnetworks.iter().map(|s| s.eval(x)).sum::<f64>()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_row(x)?;
        Ok(self.logit_unchecked(x))
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs {
            return Err(Error::Dimension {
                expected: self.n_inputs,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<PrnOutput> {
        self.check_row(x)?;
        let contributions: Vec<f64> = self.subnetworks.iter().map(|s| s.eval(x)).collect();
        let logit = self.global_bias + contributions.iter().sum::<f64>();
        Ok(PrnOutput {
            probability: sigmoid(logit),
            logit,
            contributions,
        })
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.n_features() != self.n_inputs {
            return Err(Error::Dimension {
                expected: self.n_inputs,
                got: data.n_features(),
            });
        }
        Ok(data.rows().map(|x| sigmoid(self.logit_unchecked(x))).collect())
    }

    /// Sorted, de-duplicated inputs used by any subnetwork.
    pub fn inputs_used(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.subnetworks.iter().flat_map(|s| s.inputs.clone()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Inputs of subnetworks with at least one nonzero output weight.
    pub fn active_inputs(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .subnetworks
            .iter()
            .filter(|s| s.output_weights.iter().any(|&w| w != 0.0))
            .flat_map(|s| s.inputs.clone())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut s = String::from("prn-model 1\n");
        s.push_str(&format!("inputs {}\n", self.n_inputs));
        s.push_str(&format!("global_bias {:e}\n", self.global_bias));
        s.push_str(&format!("mlp_hash {}\n", self.source.mlp_hash));
        s.push_str(&format!("lambda {:e}\n", self.source.lambda));
        s.push_str(&format!("seed {}\n", self.source.seed));
        s.push_str(&format!("subnetworks {}\n", self.subnetworks.len()));
        for sub in &self.subnetworks {
            let inputs: Vec<String> = sub.inputs.iter().map(|i| i.to_string()).collect();
            s.push_str(&format!("subnetwork {} hidden {}\n", inputs.join(" "), sub.n_hidden()));
            s.push_str(&format!("hidden_weights {}\n", join(&sub.hidden_weights)));
            s.push_str(&format!("hidden_biases {}\n", join(&sub.hidden_biases)));
            s.push_str(&format!("output_weights {}\n", join(&sub.output_weights)));
            s.push_str(&format!("output_bias {:e}\n", sub.output_bias));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |msg: &str| Error::Format(format!("prn model: {msg}"));
        if lines.next().map(str::trim) != Some("prn-model 1") {
            return Err(bad("missing `prn-model 1` header"));
        }
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{key}`")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`, got `{line}`")));
            }
            Ok(parts.map(String::from).collect())
        };
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Format(format!("prn model: bad number `{s}`")))
        }
        fn single(v: &[String]) -> Result<&str> {
            match v {
                [s] => Ok(s),
                _ => Err(Error::Format("prn model: expected one value".into())),
            }
        }
        let n_inputs: usize = num(single(&field("inputs")?)?)?;
        let global_bias: f64 = num(single(&field("global_bias")?)?)?;
        let mlp_hash = single(&field("mlp_hash")?)?.to_string();
        let lambda: f64 = num(single(&field("lambda")?)?)?;
        let seed: u64 = num(single(&field("seed")?)?)?;
        let count: usize = num(single(&field("subnetworks")?)?)?;
        let mut subnetworks = Vec::with_capacity(count);
        for _ in 0..count {
            let head = field("subnetwork")?;
            let pos = head.iter().position(|s| s == "hidden").ok_or_else(|| bad("subnetwork without hidden size"))?;
            let inputs: Vec<usize> = head[..pos].iter().map(|s| num(s)).collect::<Result<_>>()?;
            let h: usize = num(single(&head[pos + 1..])?)?;
            let nums = |v: Vec<String>| v.iter().map(|s| num::<f64>(s)).collect::<Result<Vec<f64>>>();
            let hidden_weights = nums(field("hidden_weights")?)?;
            let hidden_biases = nums(field("hidden_biases")?)?;
            let output_weights = nums(field("output_weights")?)?;
            let output_bias: f64 = num(single(&field("output_bias")?)?)?;
            if inputs.is_empty()
                || inputs.len() > 2
                || inputs.windows(2).any(|w| w[0] >= w[1])
                || inputs.iter().any(|&i| i >= n_inputs)
                || hidden_weights.len() != h * inputs.len()
                || hidden_biases.len() != h
                || output_weights.len() != h
            {
                return Err(bad("inconsistent subnetwork block"));
            }
            subnetworks.push(SubNetwork {
                inputs,
                hidden_weights,
                hidden_biases,
                output_weights,
                output_bias,
            });
        }
        Ok(Self {
            n_inputs,
            subnetworks,
            global_bias,
            source: Provenance { mlp_hash, lambda, seed },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn prn_forward(prn: &PrnModel, x: &[f64]) -> Result<PrnOutput> {
    prn.forward(x)
}

/// Training objective: summed cross-entropy plus `decay/2` times the squared norm of
/// all subnetwork parameters. The global bias is not decayed.
pub fn prn_objective(prn: &PrnModel, data: &Dataset, decay: f64) -> f64 {
    let ce: f64 = data
        .rows()
        .zip(data.targets())
        .map(|(x, &t)| cross_entropy_term(sigmoid(prn.logit_unchecked(x)), t))
        .sum();
    let p = prn.params();
    ce + 0.5 * decay * p[..p.len() - 1].iter().map(|w| w * w).sum::<f64>()
}

pub fn prn_cross_entropy(prn: &PrnModel, data: &Dataset) -> f64 {
    prn_objective(prn, data, 0.0)
}

pub fn prn_gradient(prn: &PrnModel, data: &Dataset, decay: f64) -> Vec<f64> {
    let n = prn.n_params();
    let mut grad = vec![0.0; n];
    for (x, &t) in data.rows().zip(data.targets()) {
        let r = sigmoid(prn.logit_unchecked(x)) - t;
        let mut at = 0;
        for s in &prn.subnetworks {
            let k = s.n_params();
            s.accumulate_gradient(x, r, &mut grad[at..at + k]);
            at += k;
        }
        grad[n - 1] += r;
    }
    if decay > 0.0 {
        let p = prn.params();
        for (g, w) in grad[..n - 1].iter_mut().zip(&p) {
            *g += decay * w;
        }
    }
    grad
}

struct RetrainObjective<'a> {
    model: PrnModel,
    data: &'a Dataset,
    decay: f64,
}

impl Objective for RetrainObjective<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.model.set_params(x).expect("parameter length is fixed");
        prn_objective(&self.model, self.data, self.decay)
    }

    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        self.model.set_params(x).expect("parameter length is fixed");
        prn_gradient(&self.model, self.data, self.decay)
    }
}

/// Retrains every subnetwork parameter and the global bias jointly with SCG.
pub fn retrain_prn(prn: &PrnModel, train: &Dataset, decay: f64, scg_config: &ScgConfig) -> Result<(PrnModel, ScgTrace)> {
    if !(decay >= 0.0) {
        return Err(Error::Config(format!("decay must be non-negative, got {decay}")));
    }
    if train.n_features() != prn.n_inputs {
        return Err(Error::Dimension {
            expected: prn.n_inputs,
            got: train.n_features(),
        });
    }
    let mut obj = RetrainObjective {
        model: prn.clone(),
        data: train,
        decay,
    };
    let (params, trace) = scg::minimize(&mut obj, &prn.params(), scg_config)?;
    let mut out = prn.clone();
    out.set_params(&params)?;
    Ok((out, trace))
}

/// Moves each subnetwork's value at the anchor into the global bias.
pub fn recenter(prn: &PrnModel) -> PrnModel {
    let mut out = prn.clone();
    for s in &mut out.subnetworks {
        let a = s.anchor_value();
        // rounding residue from an earlier recenter is left alone so the map is idempotent
        if a.abs() > 4.0 * f64::EPSILON * (1.0 + s.output_bias.abs()) {
            s.output_bias -= a;
            out.global_bias += a;
        }
    }
    out
}

/// Subnetwork contributions at each row, as Lasso design columns.
pub fn contribution_design(prn: &PrnModel, data: &Dataset) -> Result<Design> {
    if data.n_features() != prn.n_inputs {
        return Err(Error::Dimension {
            expected: prn.n_inputs,
            got: data.n_features(),
        });
    }
    let cols: Vec<Vec<f64>> = prn
        .subnetworks
        .iter()
        .map(|s| data.rows().map(|x| s.eval(x)).collect())
        .collect();
    Design::from_columns(&cols, data.len())
}

/// Rescales each subnetwork by its coefficient and drops those at zero.
pub fn reweight(prn: &PrnModel, lasso: &LassoModel) -> Result<PrnModel> {
    if lasso.coefficients.len() != prn.subnetworks.len() {
        return Err(Error::Dimension {
            expected: prn.subnetworks.len(),
            got: lasso.coefficients.len(),
        });
    }
    let subnetworks = prn
        .subnetworks
        .iter()
        .zip(&lasso.coefficients)
        .filter(|(_, &c)| c != 0.0)
        .map(|(s, &c)| SubNetwork {
            output_weights: s.output_weights.iter().map(|v| c * v).collect(),
            output_bias: c * s.output_bias,
            ..s.clone()
        })
        .collect();
    Ok(PrnModel {
        n_inputs: prn.n_inputs,
        subnetworks,
        global_bias: lasso.intercept,
        source: Provenance {
            lambda: lasso.lambda,
            ..prn.source.clone()
        },
    })
}

/// Second Lasso pass over the subnetwork outputs of a retrained network.
pub fn relasso(prn: &PrnModel, train: &Dataset, config: &LassoConfig) -> Result<(PrnModel, LassoModel, Option<LassoPath>)> {
    let design = contribution_design(prn, train)?;
    let targets = train.targets();
    let (model, path) = match config.lambda_override {
        Some(l) => (lasso::fit_lasso(&design, targets, l, config)?, None),
        None => {
            let (path, chosen) = lasso::path_and_select(&design, targets, config)?;
            (chosen, Some(path))
        }
    };
    if model.selected.is_empty() && !prn.subnetworks.is_empty() {
        warn!("second Lasso pass dropped every subnetwork; the result is intercept-only");
    }
    Ok((reweight(prn, &model)?, model, path))
}
