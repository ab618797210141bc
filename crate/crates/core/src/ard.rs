//! Evidence-framework training with automatic relevance determination.
//!
//! Each cycle minimizes the regularized cross-entropy with SCG, forms the Hessian of
//! the objective at the optimum, and re-estimates one weight-decay coefficient per
//! group from the trace of the inverse Hessian over that group.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mlp::{self, sigmoid, MlpConfig, MlpModel};
use crate::scg::{self, Objective, ScgConfig, ScgTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HessianKind {
    /// Outer-product approximation `sum_m y(1-y) g gᵀ`; always positive semidefinite.
    GaussNewton,
    /// Full second derivative of the cross-entropy.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArdConfig {
    pub alpha_init: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub max_cycles: usize,
    /// Stop when every alpha moves by less than this fraction in one cycle.
    pub cycle_tolerance: f64,
    pub eigenvalue_floor: f64,
    pub hessian: HessianKind,
}

impl Default for ArdConfig {
    fn default() -> Self {
        Self {
            alpha_init: 0.01,
            alpha_min: 1e-6,
            alpha_max: 1e6,
            max_cycles: 12,
            cycle_tolerance: 1e-3,
            eigenvalue_floor: 1e-8,
            hessian: HessianKind::GaussNewton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdState {
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub cycle: usize,
}

impl ArdState {
    pub fn initial(model: &MlpModel, config: &ArdConfig) -> Self {
        let group_sizes = model.group_sizes();
        Self {
            alphas: vec![config.alpha_init; group_sizes.len()],
            gammas: group_sizes.iter().map(|&n| n as f64).collect(),
            group_sizes,
            cycle: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HessianInfo {
    pub matrix: DMatrix<f64>,
    pub eigenvalue_floor: f64,
    /// Trace of the inverse Hessian restricted to each group's parameters.
    pub group_inverse_traces: Vec<f64>,
}

impl HessianInfo {
    /// Eigendecomposes `matrix`, floors its eigenvalues and sums the diagonal of the
    /// inverse over each group. `group_of[p]` is the group of parameter `p`.
    pub fn from_matrix(
        matrix: DMatrix<f64>,
        group_of: &[usize],
        n_groups: usize,
        floor: f64,
    ) -> Result<Self> {
        let p = matrix.nrows();
        if matrix.ncols() != p || group_of.len() != p {
            return Err(Error::Dimension {
                expected: p,
                got: group_of.len(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigen("Hessian has non-finite entries".into()));
        }
        let eig = SymmetricEigen::try_new(matrix.clone(), f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigen(format!("no convergence for {p}x{p} Hessian")))?;
        let inv_eigs: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| 1.0 / l.max(floor))
            .collect();
        let mut traces = vec![0.0; n_groups];
        for (q, &g) in group_of.iter().enumerate() {
            let diag: f64 = (0..p)
                .map(|r| {
                    let v = eig.eigenvectors[(q, r)];
                    v * v * inv_eigs[r]
                })
                .sum();
            traces[g] += diag;
        }
        Ok(Self {
            matrix,
            eigenvalue_floor: floor,
            group_inverse_traces: traces,
        })
    }

    pub fn max_asymmetry(&self) -> f64 {
        let a = &self.matrix;
        let mut worst = 0.0f64;
        for i in 0..a.nrows() {
            for j in 0..i {
                worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
        worst
    }
}

/// Data term of the Hessian (no penalty), accumulated over rows.
pub fn data_hessian(model: &MlpModel, data: &Dataset, kind: HessianKind) -> DMatrix<f64> {
    let p = model.n_params();
    let (d, h) = (model.n_inputs(), model.n_hidden());
    let hd = h * d;
    let mut acc = vec![0.0; p * p];
    let mut g = vec![0.0; p];
    for (x, &t) in data.rows().zip(data.targets()) {
        let a = model.logit_gradient(x, &mut g);
        let y = sigmoid(a);
        let s = y * (1.0 - y);
        for i in 0..p {
            let si = s * g[i];
            if si == 0.0 {
                continue;
            }
            let row = &mut acc[i * p..i * p + i + 1];
            for (j, r) in row.iter_mut().enumerate() {
                *r += si * g[j];
            }
        }
        if kind == HessianKind::Exact {
            let r = y - t;
            for j in 0..h {
                let w = &model.first_layer[j * d..(j + 1) * d];
                let u = model.hidden_bias[j] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                let z = u.tanh();
                let z1 = 1.0 - z * z;
                let z2 = -2.0 * z * z1;
                let vj = model.output_weights[j];
                // indices of this unit's first-layer weights plus its bias, with inputs
                let idx: Vec<(usize, f64)> = (0..d)
                    .map(|i| (j * d + i, x[i]))
                    .chain(std::iter::once((hd + j, 1.0)))
                    .collect();
                let v_idx = hd + h + j;
                for (a_pos, &(pa, xa)) in idx.iter().enumerate() {
                    for &(pb, xb) in &idx[..=a_pos] {
                        let (hi, lo) = if pa >= pb { (pa, pb) } else { (pb, pa) };
                        acc[hi * p + lo] += r * vj * z2 * xa * xb;
                    }
                    // cross term with the output weight of the same unit; v_idx > pa
                    acc[v_idx * p + pa] += r * z1 * xa;
                }
            }
        }
    }
    DMatrix::from_fn(p, p, |i, j| if i >= j { acc[i * p + j] } else { acc[j * p + i] })
}

/// Hessian of the regularized objective at the current weights.
pub fn hessian(
    model: &MlpModel,
    data: &Dataset,
    alphas: &[f64],
    config: &ArdConfig,
) -> Result<HessianInfo> {
    if alphas.len() != model.n_groups() {
        return Err(Error::Dimension {
            expected: model.n_groups(),
            got: alphas.len(),
        });
    }
    let mut a = data_hessian(model, data, config.hessian);
    let group_of: Vec<usize> = (0..model.n_params()).map(|p| model.group_of(p)).collect();
    for (p, &g) in group_of.iter().enumerate() {
        a[(p, p)] += alphas[g];
    }
    HessianInfo::from_matrix(a, &group_of, model.n_groups(), config.eigenvalue_floor)
}

/// Closed-form re-estimation from per-group squared weight norms.
///
/// `1/alpha_k = (sum_l w_kl^2 + Tr_k(A^-1)) / N_k`, then
/// `gamma_k = N_k - alpha_k Tr_k(A^-1)` with the updated alpha, so that
/// `1/alpha_k = sum_l w_kl^2 / gamma_k` holds whenever no clamp is active.
pub fn update_from_norms(
    state: &ArdState,
    sq_norms: &[f64],
    hessian: &HessianInfo,
    config: &ArdConfig,
) -> ArdState {
    let mut alphas = Vec::with_capacity(state.alphas.len());
    let mut gammas = Vec::with_capacity(state.alphas.len());
    for (k, &n_k) in state.group_sizes.iter().enumerate() {
        let n = n_k as f64;
        let tr = hessian.group_inverse_traces[k];
        let inv_alpha = (sq_norms[k] + tr) / n;
        let raw = 1.0 / inv_alpha;
        let alpha = if inv_alpha > 0.0 {
            raw.clamp(config.alpha_min, config.alpha_max)
        } else {
            config.alpha_max
        };
        // unclamped, N - alpha Tr equals N w2 / (w2 + Tr), which does not cancel when Tr dominates
        let gamma = if inv_alpha > 0.0 && alpha == raw {
            n * sq_norms[k] / (sq_norms[k] + tr)
        } else {
            n - alpha * tr
        };
        alphas.push(alpha);
        gammas.push(gamma.clamp(0.0, n));
    }
    ArdState {
        alphas,
        gammas,
        group_sizes: state.group_sizes.clone(),
        cycle: state.cycle + 1,
    }
}

pub fn update_hyperparameters(
    state: &ArdState,
    model: &MlpModel,
    hessian: &HessianInfo,
    config: &ArdConfig,
) -> ArdState {
    update_from_norms(state, &model.group_sq_norms(), hessian, config)
}

struct RegularizedCrossEntropy<'a> {
    model: MlpModel,
    data: &'a Dataset,
    alphas: &'a [f64],
}

impl Objective for RegularizedCrossEntropy<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.model.set_params(x).expect("parameter length is fixed");
        mlp::objective(&self.model, self.data, self.alphas)
            .map(|o| o.total)
            .unwrap_or(f64::NAN)
    }

    fn gradient(&mut self, x: &[f64]) -> Vec<f64> {
        self.model.set_params(x).expect("parameter length is fixed");
        mlp::gradient(&self.model, self.data, self.alphas)
            .unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

/// Minimizes the regularized cross-entropy with fixed group alphas.
pub fn train_fixed(
    model: &MlpModel,
    data: &Dataset,
    alphas: &[f64],
    scg_config: &ScgConfig,
) -> Result<(MlpModel, ScgTrace)> {
    mlp::objective(model, data, alphas)?;
    let mut obj = RegularizedCrossEntropy {
        model: model.clone(),
        data,
        alphas,
    };
    let (params, trace) = scg::minimize(&mut obj, &model.params(), scg_config)?;
    let mut out = model.clone();
    out.set_params(&params)?;
    Ok((out, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdCycle {
    pub cycle: usize,
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub sq_norms: Vec<f64>,
    pub objective: f64,
}

/// Per-cycle hyperparameter history; the soft feature-selection diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdReport {
    pub group_names: Vec<String>,
    pub cycles: Vec<ArdCycle>,
    pub converged: bool,
}

impl ArdReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cycle,group,alpha,gamma,sum_sq_weights\n");
        for c in &self.cycles {
            for (k, name) in self.group_names.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{:e},{:e},{:e}\n",
                    c.cycle, name, c.alphas[k], c.gammas[k], c.sq_norms[k]
                ));
            }
        }
        s
    }
}

pub fn group_names(feature_names: &[String]) -> Vec<String> {
    feature_names
        .iter()
        .map(|f| format!("input:{f}"))
        .chain(["hidden_bias", "output_weights", "output_bias"].map(String::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ArdFit {
    pub model: MlpModel,
    pub state: ArdState,
    pub report: ArdReport,
}

/// Alternates SCG training and hyperparameter updates until the alphas settle.
pub fn train_ard(
    data: &Dataset,
    mlp_config: &MlpConfig,
    scg_config: &ScgConfig,
    ard_config: &ArdConfig,
    seed: u64,
) -> Result<ArdFit> {
    if mlp_config.hidden == 0 || ard_config.max_cycles == 0 || !(ard_config.alpha_init > 0.0) {
        return Err(Error::Config("invalid MLP/ARD configuration".into()));
    }
    let mut model = MlpModel::random(data.n_features(), mlp_config.hidden, seed);
    let mut state = ArdState::initial(&model, ard_config);
    let mut report = ArdReport {
        group_names: group_names(&data.feature_names),
        cycles: Vec::new(),
        converged: false,
    };
    for _ in 0..ard_config.max_cycles {
        let (trained, _) = train_fixed(&model, data, &state.alphas, scg_config)?;
        model = trained;
        let hess = hessian(&model, data, &state.alphas, ard_config)?;
        let next = update_hyperparameters(&state, &model, &hess, ard_config);
        let change = next
            .alphas
            .iter()
            .zip(&state.alphas)
            .map(|(a, b)| (a - b).abs() / b)
            .fold(0.0, f64::max);
        report.cycles.push(ArdCycle {
            cycle: next.cycle,
            alphas: next.alphas.clone(),
            gammas: next.gammas.clone(),
            sq_norms: model.group_sq_norms(),
            objective: mlp::objective(&model, data, &state.alphas)?.total,
        });
        state = next;
        if change < ard_config.cycle_tolerance {
            report.converged = true;
            break;
        }
    }
    Ok(ArdFit {
        model,
        state,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data() -> Dataset {
        Dataset::new("t", vec!["x".into()], vec![-1.0, 0.5, 2.0], vec![0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn penalty_only_hessian() {
        let model = MlpModel::random(2, 3, 1);
        let empty = Dataset::from_parts("e", vec!["a".into(), "b".into()], vec![], vec![]).unwrap();
        let alphas = [0.5, 2.0, 3.0, 4.0, 5.0];
        let info = hessian(&model, &empty, &alphas, &ArdConfig::default()).unwrap();
        for p in 0..model.n_params() {
            assert_eq!(info.matrix[(p, p)], alphas[model.group_of(p)]);
        }
        for (k, &n) in model.group_sizes().iter().enumerate() {
            assert!((info.group_inverse_traces[k] - n as f64 / alphas[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_double_the_data_term() {
        let model = MlpModel::random(1, 2, 5);
        let one = Dataset::new("o", vec!["x".into()], vec![0.7, -0.2], vec![1.0, 0.0]).unwrap();
        let two = one.subset(&[0, 0, 1, 1]);
        for kind in [HessianKind::GaussNewton, HessianKind::Exact] {
            let a = data_hessian(&model, &one, kind);
            let b = data_hessian(&model, &two, kind);
            assert!((b - a * 2.0).abs().max() < 1e-12);
        }
    }

    #[test]
    fn exact_hessian_matches_gradient_differences() {
        let model = MlpModel::random(1, 1, 3);
        let data = tiny_data();
        let alphas = [0.1, 0.2, 0.3, 0.4];
        let cfg = ArdConfig {
            hessian: HessianKind::Exact,
            ..ArdConfig::default()
        };
        let info = hessian(&model, &data, &alphas, &cfg).unwrap();
        let p0 = model.params();
        let step = 1e-5;
        for j in 0..p0.len() {
            let mut plus = p0.clone();
            let mut minus = p0.clone();
            plus[j] += step;
            minus[j] -= step;
            let gp = mlp::gradient(&MlpModel::from_params(1, 1, &plus).unwrap(), &data, &alphas).unwrap();
            let gm = mlp::gradient(&MlpModel::from_params(1, 1, &minus).unwrap(), &data, &alphas).unwrap();
            for i in 0..p0.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((info.matrix[(i, j)] - fd).abs() < 1e-4, "({i},{j})");
            }
        }
    }

    #[test]
    fn gauss_newton_matches_finite_difference_jacobian() {
        let model = MlpModel::random(2, 3, 8);
        let data = Dataset::new(
            "g",
            vec!["a".into(), "b".into()],
            vec![0.1, -0.4, 1.2, 0.3, -0.9, 2.0],
            vec![0.0, 1.0, 1.0],
        )
        .unwrap();
        let gn = data_hessian(&model, &data, HessianKind::GaussNewton);
        let p0 = model.params();
        let np = p0.len();
        let mut oracle = DMatrix::zeros(np, np);
        let step = 1e-6;
        for x in data.rows() {
            let jac: Vec<f64> = (0..np)
                .map(|j| {
                    let mut plus = p0.clone();
                    let mut minus = p0.clone();
                    plus[j] += step;
                    minus[j] -= step;
                    let lp = MlpModel::from_params(2, 3, &plus).unwrap().logit_output(x).unwrap();
                    let lm = MlpModel::from_params(2, 3, &minus).unwrap().logit_output(x).unwrap();
                    (lp - lm) / (2.0 * step)
                })
                .collect();
            let y = model.forward(x).unwrap();
            for i in 0..np {
                for j in 0..np {
                    oracle[(i, j)] += y * (1.0 - y) * jac[i] * jac[j];
                }
            }
        }
        assert!((gn - oracle).abs().max() < 1e-7);
    }

    #[test]
    fn hessian_is_symmetric() {
        let model = MlpModel::random(3, 4, 2);
        let data = Dataset::new(
            "s",
            vec!["a".into(), "b".into(), "c".into()],
            (0..30).map(|v| (v as f64 * 0.37).sin()).collect(),
            (0..10).map(|m| (m % 2) as f64).collect(),
        )
        .unwrap();
        for kind in [HessianKind::GaussNewton, HessianKind::Exact] {
            let cfg = ArdConfig {
                hessian: kind,
                ..ArdConfig::default()
            };
            let info = hessian(&model, &data, &[0.1; 6], &cfg).unwrap();
            assert!(info.max_asymmetry() < 1e-10);
        }
    }

    fn state(sizes: Vec<usize>) -> ArdState {
        ArdState {
            alphas: vec![1.0; sizes.len()],
            gammas: sizes.iter().map(|&n| n as f64).collect(),
            group_sizes: sizes,
            cycle: 0,
        }
    }

    fn info_with_traces(traces: Vec<f64>) -> HessianInfo {
        HessianInfo {
            matrix: DMatrix::identity(1, 1),
            eigenvalue_floor: 1e-8,
            group_inverse_traces: traces,
        }
    }

    #[test]
    fn vanishing_trace_limit() {
        let cfg = ArdConfig::default();
        let next = update_from_norms(&state(vec![4]), &[2.0], &info_with_traces(vec![0.0]), &cfg);
        assert_eq!(next.gammas[0], 4.0);
        assert!((1.0 / next.alphas[0] - 2.0 / 4.0).abs() < 1e-15);
        assert_eq!(next.cycle, 1);
    }

    #[test]
    fn zero_weights_update() {
        let cfg = ArdConfig::default();
        let next = update_from_norms(&state(vec![3]), &[0.0], &info_with_traces(vec![0.6]), &cfg);
        assert!((1.0 / next.alphas[0] - 0.6 / 3.0).abs() < 1e-15);
        assert!((next.gammas[0] - (3.0 - next.alphas[0] * 0.6)).abs() < 1e-12);
    }

    #[test]
    fn two_parameter_quadratic_matches_closed_form() {
        let (a, b, c) = (3.0, 1.0, 2.0);
        let m = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
        let info = HessianInfo::from_matrix(m, &[0, 1], 2, 1e-8).unwrap();
        let det = a * c - b * b;
        let inv = [c / det, a / det];
        assert!((info.group_inverse_traces[0] - inv[0]).abs() < 1e-12);
        assert!((info.group_inverse_traces[1] - inv[1]).abs() < 1e-12);

        let w2 = [0.25, 1.5];
        let next = update_from_norms(&state(vec![1, 1]), &w2, &info, &ArdConfig::default());
        for k in 0..2 {
            let alpha = 1.0 / (w2[k] + inv[k]);
            assert!((next.alphas[k] - alpha).abs() < 1e-12);
            assert!((next.gammas[k] - (1.0 - alpha * inv[k])).abs() < 1e-12);
            // both forms of the alpha re-estimate agree
            assert!((w2[k] / next.gammas[k] - 1.0 / next.alphas[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn alphas_are_clamped() {
        let cfg = ArdConfig::default();
        let next = update_from_norms(
            &state(vec![2, 2]),
            &[0.0, 1e9],
            &info_with_traces(vec![0.0, 0.0]),
            &cfg,
        );
        assert_eq!(next.alphas[0], cfg.alpha_max);
        assert_eq!(next.alphas[1], cfg.alpha_min);
        assert!(next.gammas.iter().zip(&next.group_sizes).all(|(g, &n)| *g >= 0.0 && *g <= n as f64));
    }
}
