//! One-hidden-layer tanh/sigmoid classifier with grouped weight decay.
//!
//! Parameters are kept in one canonical order so the optimizer and the evidence
//! code can address them as a flat vector:
//! first-layer weights row-major by (hidden, input), hidden biases, output weights,
//! output bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Probabilities inside the cross-entropy are clamped to `[CLAMP, 1 - CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cross-entropy of one observation with probability clamping.
pub fn cross_entropy_term(y: f64, t: f64) -> f64 {
    let y = y.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
}

impl Default for MlpConfig {
    /// Three hidden units. Wider networks let the evidence loop drift along the
    /// tanh scale symmetry (input weights shrink while output weights grow), which
    /// hurt both accuracy and selection stability on the benchmark sets.
    fn default() -> Self {
        Self { hidden: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    n_inputs: usize,
    n_hidden: usize,
    /// `n_hidden x n_inputs`, row-major.
    pub first_layer: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

impl MlpModel {
    pub fn zeros(n_inputs: usize, n_hidden: usize) -> Self {
        Self {
            n_inputs,
            n_hidden,
            first_layer: vec![0.0; n_inputs * n_hidden],
            hidden_bias: vec![0.0; n_hidden],
            output_weights: vec![0.0; n_hidden],
            output_bias: 0.0,
        }
    }

    /// Gaussian initialization with standard deviation `1/sqrt(fan_in)` per layer.
    pub fn random(n_inputs: usize, n_hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = Normal::new(0.0, 1.0 / (n_inputs as f64).sqrt()).unwrap();
        let second = Normal::new(0.0, 1.0 / (n_hidden as f64).sqrt()).unwrap();
        let mut m = Self::zeros(n_inputs, n_hidden);
        m.first_layer.iter_mut().for_each(|w| *w = first.sample(&mut rng));
        m.hidden_bias.iter_mut().for_each(|w| *w = first.sample(&mut rng));
        m.output_weights.iter_mut().for_each(|w| *w = second.sample(&mut rng));
        m.output_bias = second.sample(&mut rng);
        m
    }

    pub fn from_params(n_inputs: usize, n_hidden: usize, params: &[f64]) -> Result<Self> {
        let mut m = Self::zeros(n_inputs, n_hidden);
        m.set_params(params)?;
        Ok(m)
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn n_params(&self) -> usize {
        self.n_hidden * self.n_inputs + 2 * self.n_hidden + 1
    }

    #[inline]
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        self.first_layer[j * self.n_inputs + i]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.first_layer);
        p.extend_from_slice(&self.hidden_bias);
        p.extend_from_slice(&self.output_weights);
        p.push(self.output_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let (hd, h) = (self.n_hidden * self.n_inputs, self.n_hidden);
        self.first_layer.copy_from_slice(&p[..hd]);
        self.hidden_bias.copy_from_slice(&p[hd..hd + h]);
        self.output_weights.copy_from_slice(&p[hd + h..hd + 2 * h]);
        self.output_bias = p[hd + 2 * h];
        Ok(())
    }

    /// Number of ARD groups: one per input, hidden biases, output weights, output bias.
    pub fn n_groups(&self) -> usize {
        self.n_inputs + 3
    }

    /// ARD group of the parameter at canonical position `p`.
    pub fn group_of(&self, p: usize) -> usize {
        let hd = self.n_hidden * self.n_inputs;
        let h = self.n_hidden;
        if p < hd {
            p % self.n_inputs
        } else if p < hd + h {
            self.n_inputs
        } else if p < hd + 2 * h {
            self.n_inputs + 1
        } else {
            self.n_inputs + 2
        }
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.n_hidden; self.n_inputs];
        sizes.extend([self.n_hidden, self.n_hidden, 1]);
        sizes
    }

    /// Sum of squared weights in each group.
    pub fn group_sq_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_groups()];
        for (p, w) in self.params().iter().enumerate() {
            out[self.group_of(p)] += w * w;
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs {
            return Err(Error::Dimension {
                expected: self.n_inputs,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-sigmoid activation without a length check.
    pub(crate) fn logit_unchecked(&self, x: &[f64]) -> f64 {
        let mut a = self.output_bias;
        for j in 0..self.n_hidden {
            let row = &self.first_layer[j * self.n_inputs..(j + 1) * self.n_inputs];
            let u = self.hidden_bias[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            a += self.output_weights[j] * u.tanh();
        }
        a
    }

    pub fn logit_output(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.logit_unchecked(x))
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit_output(x)?))
    }

    /// Writes the gradient of the logit with respect to every parameter into `grad`
    /// and returns the logit.
    pub fn logit_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (d, h) = (self.n_inputs, self.n_hidden);
        let hd = h * d;
        let mut a = self.output_bias;
        for j in 0..h {
            let row = &self.first_layer[j * d..(j + 1) * d];
            let u = self.hidden_bias[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            let z = u.tanh();
            a += self.output_weights[j] * z;
            let delta = self.output_weights[j] * (1.0 - z * z);
            for i in 0..d {
                grad[j * d + i] = delta * x[i];
            }
            grad[hd + j] = delta;
            grad[hd + h + j] = z;
        }
        grad[hd + 2 * h] = 1.0;
        a
    }

    pub fn to_text(&self) -> String {
        let line = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        s.push_str("prn-mlp 1\n");
        s.push_str(&format!("inputs {}\nhidden {}\n", self.n_inputs, self.n_hidden));
        s.push_str("first_layer\n");
        for j in 0..self.n_hidden {
            s.push_str(&line(&self.first_layer[j * self.n_inputs..(j + 1) * self.n_inputs]));
            s.push('\n');
        }
        s.push_str("hidden_bias\n");
        s.push_str(&line(&self.hidden_bias));
        s.push_str("\noutput_weights\n");
        s.push_str(&line(&self.output_weights));
        s.push_str(&format!("\noutput_bias\n{:e}\n", self.output_bias));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("unexpected end of file, expected {what}")))
        };
        if next("header")? != "prn-mlp 1" {
            return Err(Error::Format("not a prn-mlp v1 file".into()));
        }
        let count = |line: &str, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("expected `{key} <count>`")))
        };
        let d = count(next("inputs")?, "inputs")?;
        let h = count(next("hidden")?, "hidden")?;
        let nums = |line: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(e.to_string()))?;
            if v.len() != n {
                return Err(Error::Format(format!("expected {n} values, got {}", v.len())));
            }
            Ok(v)
        };
        let expect = |line: &str, key: &str| -> Result<()> {
            if line == key {
                Ok(())
            } else {
                Err(Error::Format(format!("expected section `{key}`, got `{line}`")))
            }
        };
        let mut m = Self::zeros(d, h);
        expect(next("first_layer")?, "first_layer")?;
        for j in 0..h {
            let row = nums(next("weights")?, d)?;
            m.first_layer[j * d..(j + 1) * d].copy_from_slice(&row);
        }
        expect(next("hidden_bias")?, "hidden_bias")?;
        m.hidden_bias = nums(next("hidden biases")?, h)?;
        expect(next("output_weights")?, "output_weights")?;
        m.output_weights = nums(next("output weights")?, h)?;
        expect(next("output_bias")?, "output_bias")?;
        m.output_bias = nums(next("output bias")?, 1)?[0];
        if m.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(m)
    }

    /// Hex SHA-256 of the serialized model, used as a provenance tag.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub cross_entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

fn check_alphas(model: &MlpModel, data: &Dataset, alphas: &[f64]) -> Result<()> {
    if alphas.len() != model.n_groups() {
        return Err(Error::Dimension {
            expected: model.n_groups(),
            got: alphas.len(),
        });
    }
    if data.n_features() != model.n_inputs() {
        return Err(Error::Dimension {
            expected: model.n_inputs(),
            got: data.n_features(),
        });
    }
    Ok(())
}

/// Grouped weight-decay penalty `1/2 sum_k alpha_k sum_l w_kl^2`.
pub fn penalty(model: &MlpModel, alphas: &[f64]) -> f64 {
    model
        .group_sq_norms()
        .iter()
        .zip(alphas)
        .map(|(s, a)| 0.5 * a * s)
        .sum()
}

pub fn objective(model: &MlpModel, data: &Dataset, alphas: &[f64]) -> Result<ObjectiveValue> {
    check_alphas(model, data, alphas)?;
    let cross_entropy: f64 = data
        .rows()
        .zip(data.targets())
        .map(|(x, &t)| cross_entropy_term(sigmoid(model.logit_unchecked(x)), t))
        .sum();
    let penalty = penalty(model, alphas);
    Ok(ObjectiveValue {
        cross_entropy,
        penalty,
        total: cross_entropy + penalty,
    })
}

/// Gradient of [`objective`]'s total in canonical parameter order.
///
/// The data term uses `dS/da = y - t`, the derivative of the unclamped cross-entropy.
pub fn gradient(model: &MlpModel, data: &Dataset, alphas: &[f64]) -> Result<Vec<f64>> {
    check_alphas(model, data, alphas)?;
    let p = model.n_params();
    let mut grad = vec![0.0; p];
    let mut g = vec![0.0; p];
    for (x, &t) in data.rows().zip(data.targets()) {
        let a = model.logit_gradient(x, &mut g);
        let r = sigmoid(a) - t;
        grad.iter_mut().zip(&g).for_each(|(acc, gi)| *acc += r * gi);
    }
    for (k, w) in model.params().iter().enumerate() {
        grad[k] += alphas[model.group_of(k)] * w;
    }
    Ok(grad)
}

/// Per-parameter weight-decay coefficients from group alphas.
pub fn expand_alphas(model: &MlpModel, alphas: &[f64]) -> Vec<f64> {
    (0..model.n_params())
        .map(|p| alphas[model.group_of(p)])
        .collect()
}
