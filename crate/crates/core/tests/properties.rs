use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prn::anova::{self, AnovaTerm, PairPolicy};
use prn::ard::{self, ArdConfig, HessianKind};
use prn::data::{self, Dataset, NormalizationMode, NormalizationSpec, SplitSpec, SplitStrategy};
use prn::eval;
use prn::lasso::{self, Design, LassoConfig, LassoModel};
use prn::mlp::{self, MlpModel};
use prn::nomogram;
use prn::prn::{self as network, PrnModel};
use prn::scg::ScgConfig;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random MLP with its parameters stretched by `scale` so tanh units leave the linear regime.
fn scaled_mlp(d: usize, h: usize, seed: u64, scale: f64) -> MlpModel {
    let mut m = MlpModel::random(d, h, seed);
    let p: Vec<f64> = m.params().iter().map(|v| v * scale).collect();
    m.set_params(&p).unwrap();
    m
}

fn random_point(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-3.0..3.0)).collect()
}

/// Gaussian-ish features with a logistic target that depends on the first input.
fn random_dataset(r: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let mut features = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    for m in 0..n {
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let p = mlp::sigmoid(1.5 * x[0] - 0.5 * x[d - 1]);
        // guarantee both classes
        let t = if m < 2 { m as f64 } else { f64::from(r.random::<f64>() < p) };
        features.extend(x);
        targets.push(t);
    }
    let names = (0..d).map(|i| format!("x{i}")).collect();
    Dataset::new("synthetic", names, features, targets).unwrap()
}

fn subsets(d: usize) -> impl Iterator<Item = Vec<usize>> {
    (1usize..(1 << d)).map(move |mask| (0..d).filter(|b| mask & (1 << b) != 0).collect())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// Lasso model with the given coefficients; `selected` follows the nonzeros.
fn lasso_model(intercept: f64, coefficients: Vec<f64>) -> LassoModel {
    let selected = (0..coefficients.len()).filter(|&j| coefficients[j] != 0.0).collect();
    LassoModel {
        intercept,
        coefficients,
        lambda: 0.0,
        selected,
    }
}

/// MLP, data, basis over all terms, sparse random coefficients and the resulting PRN.
fn constructed(d: usize, h: usize, seed: u64) -> (MlpModel, Dataset, anova::PartialResponseBasis, LassoModel, PrnModel) {
    let mut r = rng(seed ^ 0x5eed);
    let mlp = scaled_mlp(d, h, seed, 1.5);
    let data = random_dataset(&mut r, 40, d);
    let terms = anova::select_terms(&mlp, &PairPolicy::All, None, None).unwrap();
    let basis = anova::build_basis(&mlp, &data, terms).unwrap();
    let coefs: Vec<f64> = (0..basis.n_terms())
        .map(|_| if r.random::<f64>() < 0.5 { r.random_range(-2.0..2.0) } else { 0.0 })
        .collect();
    let lasso = lasso_model(r.random_range(-1.0..1.0), coefs);
    let prn = network::build_prn(&mlp, &basis, &lasso, seed).unwrap();
    (mlp, data, basis, lasso, prn)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(25))]

    #[test]
    fn anova_components_sum_to_logit(d in 1usize..=4, h in 1usize..=5, seed in any::<u64>(), scale in 0.5f64..3.0) {
        let model = scaled_mlp(d, h, seed, scale);
        let p0 = anova::phi0(&model);
        let mut r = rng(seed);
        for _ in 0..100 {
            let x = random_point(&mut r, d);
            let mut total = p0;
            for s in subsets(d) {
                let vals: Vec<f64> = s.iter().map(|&i| x[i]).collect();
                total += anova::phi_general(&model, &s, &vals).unwrap();
            }
            let logit = model.logit_output(&x).unwrap();
            prop_assert!((total - logit).abs() < 1e-9, "sum {total} vs logit {logit}");
        }
    }

    #[test]
    fn low_order_components_match_general_recursion(d in 2usize..=4, seed in any::<u64>()) {
        let model = scaled_mlp(d, 4, seed, 2.0);
        let mut r = rng(seed);
        let x = random_point(&mut r, d);
        let p0 = anova::phi0(&model);
        for i in 0..d {
            let u = anova::phi_univariate(&model, i, x[i]).unwrap();
            prop_assert!((u - anova::phi_general(&model, &[i], &[x[i]]).unwrap()).abs() < 1e-12);
            prop_assert!((u - anova::term_value(&model, p0, AnovaTerm::Univariate(i), &x)).abs() < 1e-12);
            for j in i + 1..d {
                let b = anova::phi_bivariate(&model, i, j, (x[i], x[j])).unwrap();
                prop_assert!((b - anova::phi_general(&model, &[i, j], &[x[i], x[j]]).unwrap()).abs() < 1e-12);
                prop_assert!((b - anova::term_value(&model, p0, AnovaTerm::Bivariate(i, j), &x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basis_columns_vanish_at_the_anchor(d in 2usize..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = scaled_mlp(d, 3, seed, 2.0);
        let mut data = random_dataset(&mut r, 30, d);
        // zero out a few cells so anchored rows exist for every feature
        let mut feats = data.features().to_vec();
        for m in 0..30 {
            for i in 0..d {
                if (m + i) % 4 == 0 {
                    feats[m * d + i] = 0.0;
                }
            }
        }
        data = Dataset::new("z", data.feature_names.clone(), feats, data.targets().to_vec()).unwrap();
        let terms = anova::select_terms(&model, &PairPolicy::All, None, None).unwrap();
        let basis = anova::build_basis(&model, &data, terms).unwrap();
        for (t, term) in basis.terms.iter().enumerate() {
            let col = basis.column(t);
            for m in 0..data.len() {
                let x = data.row(m);
                if term.inputs().iter().any(|&i| x[i] == 0.0) {
                    prop_assert!(col[m].abs() < 1e-10, "term {term} row {m}: {}", col[m]);
                }
            }
        }
    }

    #[test]
    fn additive_models_have_no_pair_terms(d in 2usize..=4, seed in any::<u64>()) {
        // each hidden unit sees exactly one input
        let h = 2 * d;
        let mut model = scaled_mlp(d, h, seed, 2.0);
        for j in 0..h {
            for i in 0..d {
                if i != j % d {
                    model.first_layer[j * d + i] = 0.0;
                }
            }
        }
        let grid = anova::linspace(-3.0, 3.0, 50);
        for i in 0..d {
            for k in i + 1..d {
                for &a in &grid {
                    for &b in &grid {
                        let v = anova::phi_bivariate(&model, i, k, (a, b)).unwrap();
                        prop_assert!(v.abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn construction_is_exact(d in 2usize..=5, h in 1usize..=4, seed in any::<u64>()) {
        let (mlp, data, basis, lasso, prn) = constructed(d, h, seed);
        for m in 0..data.len() {
            let want = lasso.intercept
                + basis.row(m).iter().zip(&lasso.coefficients).map(|(x, b)| x * b).sum::<f64>();
            let got = prn.logit(data.row(m)).unwrap();
            prop_assert!((want - got).abs() < 1e-10, "row {m}: {got} vs {want}");
        }
        let mut r = rng(seed.wrapping_add(1));
        for _ in 0..1000 {
            let x = random_point(&mut r, d);
            let want = lasso.intercept
                + basis.terms.iter().zip(&lasso.coefficients)
                    .map(|(&t, &b)| b * anova::term_value(&mlp, basis.phi0, t, &x))
                    .sum::<f64>();
            let got = prn.logit(&x).unwrap();
            prop_assert!((want - got).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn subnetworks_vanish_at_the_anchor(d in 2usize..=5, seed in any::<u64>()) {
        let (_, data, _, _, prn) = constructed(d, 3, seed);
        for s in &prn.subnetworks {
            prop_assert!(s.anchor_value().abs() < 1e-10);
        }
        // after retraining moves things around, recentering restores the property
        let cfg = ScgConfig { max_iterations: 15, ..ScgConfig::default() };
        let (retrained, _) = network::retrain_prn(&prn, &data, 1e-3, &cfg).unwrap();
        let centered = network::recenter(&retrained);
        for s in &centered.subnetworks {
            prop_assert!(s.anchor_value().abs() < 1e-10);
        }
        let mut r = rng(seed);
        for _ in 0..20 {
            let x = random_point(&mut r, d);
            prop_assert!((centered.logit(&x).unwrap() - retrained.logit(&x).unwrap()).abs() < 1e-10);
        }
        prop_assert_eq!(network::recenter(&centered), centered);
    }

    #[test]
    fn pair_decomposition_algebra(d in 2usize..=5, seed in any::<u64>(), bk in -2.0f64..2.0, bl in -2.0f64..2.0, bkl in -2.0f64..2.0) {
        let model = scaled_mlp(d, 4, seed, 2.0);
        let p0 = anova::phi0(&model);
        let mut r = rng(seed);
        let (k, l) = (0, d - 1);
        for _ in 0..50 {
            let (xk, xl) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let fk = anova::phi_univariate(&model, k, xk).unwrap();
            let fl = anova::phi_univariate(&model, l, xl).unwrap();
            let fkl = anova::phi_bivariate(&model, k, l, (xk, xl)).unwrap();
            let mut x = vec![0.0; d];
            x[k] = xk;
            x[l] = xl;
            let joint = model.logit_output(&x).unwrap() - p0;
            let lhs = (bk - bkl) * fk + (bl - bkl) * fl + bkl * joint;
            let rhs = bk * fk + bl * fl + bkl * fkl;
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn retraining_does_not_increase_the_objective(d in 2usize..=4, seed in any::<u64>()) {
        let (_, data, _, _, prn) = constructed(d, 3, seed);
        let cfg = ScgConfig { max_iterations: 30, ..ScgConfig::default() };
        let before = network::prn_objective(&prn, &data, 1e-3);
        let (after, trace) = network::retrain_prn(&prn, &data, 1e-3, &cfg).unwrap();
        prop_assert!(network::prn_objective(&after, &data, 1e-3) <= before);
        prop_assert!(trace.objective.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn explanation_itemizes_the_logit(d in 2usize..=4, seed in any::<u64>()) {
        let (_, data, _, _, prn) = constructed(d, 3, seed);
        let (_, spec) = data::normalize(&data, NormalizationMode::ZScoreMedian).unwrap();
        let mut r = rng(seed);
        for _ in 0..20 {
            let record = random_point(&mut r, d);
            let e = nomogram::explain_record(&prn, &spec, &record).unwrap();
            let sum = e.global_bias + e.contributions.iter().map(|c| c.contribution).sum::<f64>();
            prop_assert!((sum - e.logit).abs() < 1e-10);
            prop_assert!((mlp::sigmoid(e.logit) - e.probability).abs() < 1e-12);
            prop_assert!(e.contributions.windows(2).all(|w| w[0].contribution.abs() >= w[1].contribution.abs()));
        }
    }

    #[test]
    fn nomogram_curves_pass_through_zero_at_the_anchor(d in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let raw = random_dataset(&mut r, 41, d);
        let (train, spec) = data::normalize(&raw, NormalizationMode::ZScoreMedian).unwrap();
        let mlp = scaled_mlp(d, 3, seed, 1.5);
        let terms: Vec<AnovaTerm> = (0..d).map(AnovaTerm::Univariate).collect();
        let basis = anova::build_basis(&mlp, &train, terms).unwrap();
        let coefs = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
        let prn = network::build_prn(&mlp, &basis, &lasso_model(0.1, coefs), seed).unwrap();
        for s in &prn.subnetworks {
            let i = s.inputs[0];
            let col = raw.column(i);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let curve = nomogram::univariate_curve(s, &spec, (lo, hi));
            let at_anchor = curve.iter().find(|(v, _)| *v == spec.center[i]);
            prop_assert!(at_anchor.is_some(), "grid misses the anchor");
            prop_assert!(at_anchor.unwrap().1.abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mlp_gradient_matches_finite_differences(d in 1usize..=4, h in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, 15, d);
        let model = scaled_mlp(d, h, seed, 1.0);
        let alphas: Vec<f64> = (0..model.n_groups()).map(|_| r.random_range(0.01..2.0)).collect();
        let analytic = mlp::gradient(&model, &data, &alphas).unwrap();
        let mut work = model.clone();
        let numeric = central_difference(&mut |p| {
            work.set_params(p).unwrap();
            mlp::objective(&work, &data, &alphas).unwrap().total
        }, &model.params());
        let e = rel_err(&analytic, &numeric);
        prop_assert!(e < 1e-6, "relative error {e}");
    }

    #[test]
    fn prn_gradient_matches_finite_differences(d in 2usize..=4, h in 1usize..=3, seed in any::<u64>()) {
        let (_, data, _, _, prn) = constructed(d, h, seed);
        prop_assume!(!prn.subnetworks.is_empty());
        let analytic = network::prn_gradient(&prn, &data, 1e-2);
        let mut work = prn.clone();
        let numeric = central_difference(&mut |p| {
            work.set_params(p).unwrap();
            network::prn_objective(&work, &data, 1e-2)
        }, &prn.params());
        let e = rel_err(&analytic, &numeric);
        prop_assert!(e < 1e-6, "relative error {e}");
    }

    #[test]
    fn auroc_matches_pair_counting(n in 4usize..60, levels in 2u32..50, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut targets: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
        targets[0] = 0.0;
        targets[1] = 1.0;
        // coarse levels force ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / 7.0).collect();
        let mut wins = 0.0;
        let (mut np, mut nn) = (0.0, 0.0);
        for (&sp, &tp) in scores.iter().zip(&targets) {
            if tp != 1.0 { continue; }
            np += 1.0;
            for (&sn, &tn) in scores.iter().zip(&targets) {
                if tn != 0.0 { continue; }
                wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        nn += targets.iter().filter(|&&t| t == 0.0).count() as f64;
        let oracle = wins / (np * nn);
        let a = eval::auroc_value(&scores, &targets).unwrap();
        prop_assert!((a - oracle).abs() < 1e-12);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + eval::auroc_value(&neg, &targets).unwrap() - 1.0).abs() < 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect();
        prop_assert!((a - eval::auroc_value(&warped, &targets).unwrap()).abs() < 1e-12);
        let (est, (lo, hi)) = eval::auroc(&scores, &targets).unwrap();
        prop_assert!(lo <= est && est <= hi && lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn mcnemar_is_label_symmetric(n in 1usize..80, seed in any::<u64>()) {
        let mut r = rng(seed);
        let t: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
        let a: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let b: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let ab = eval::mcnemar(&a, &b, &t).unwrap();
        let ba = eval::mcnemar(&b, &a, &t).unwrap();
        prop_assert_eq!((ab.b, ab.c), (ba.c, ba.b));
        prop_assert_eq!(ab.statistic, ba.statistic);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn lasso_fits_satisfy_kkt(n in 20usize..80, p in 1usize..8, frac in 0.005f64..1.0, dup in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut rows = Vec::with_capacity(n * p);
        let mut t = Vec::with_capacity(n);
        for m in 0..n {
            let x: Vec<f64> = (0..p).map(|_| r.random_range(-2.0..2.0)).collect();
            let pr = mlp::sigmoid(x[0] - 0.5 * x[p - 1]);
            t.push(if m < 2 { m as f64 } else { f64::from(r.random::<f64>() < pr) });
            rows.extend(x);
        }
        if dup && p > 1 {
            // an exact copy of an informative column
            for m in 0..n {
                rows[m * p + 1] = rows[m * p];
            }
        }
        let design = Design::from_rows(&rows, p).unwrap();
        let cfg = LassoConfig::default();
        let lmax = lasso::lambda_max(&design, &t);
        let top = lasso::fit_lasso(&design, &t, lmax, &cfg).unwrap();
        prop_assert!(top.coefficients.iter().all(|&b| b == 0.0));
        prop_assert!(top.selected.is_empty());
        let fit = lasso::fit_lasso(&design, &t, frac * lmax, &cfg).unwrap();
        prop_assert!(fit.kkt_violation(&design, &t) <= 1e-6);
        let null = LassoModel::null(p, &t, frac * lmax);
        prop_assert!(lasso::penalized_objective(&fit, &design, &t) <= lasso::penalized_objective(&null, &design, &t) + 1e-12);
    }

    #[test]
    fn ard_update_is_consistent(d in 1usize..=3, h in 1usize..=3, seed in any::<u64>(), exact in any::<bool>()) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, 25, d);
        let model = scaled_mlp(d, h, seed, 1.0);
        let config = ArdConfig {
            hessian: if exact { HessianKind::Exact } else { HessianKind::GaussNewton },
            ..ArdConfig::default()
        };
        let mut state = ard::ArdState::initial(&model, &config);
        state.alphas = (0..model.n_groups()).map(|_| r.random_range(0.01..5.0)).collect();
        let hess = ard::hessian(&model, &data, &state.alphas, &config).unwrap();
        prop_assert!(hess.max_asymmetry() < 1e-10);
        let next = ard::update_hyperparameters(&state, &model, &hess, &config);
        let norms = model.group_sq_norms();
        for k in 0..next.alphas.len() {
            let n = next.group_sizes[k] as f64;
            let (a, g) = (next.alphas[k], next.gammas[k]);
            prop_assert!(a > 0.0);
            prop_assert!((0.0..=n).contains(&g));
            let clamped = a <= config.alpha_min || a >= config.alpha_max;
            if g > 0.0 && g < n && !clamped {
                let lhs = norms[k] / g;
                let rhs = (norms[k] + hess.group_inverse_traces[k]) / n;
                prop_assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1.0), "group {k}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn normalization_round_trips(n in 3usize..40, d in 1usize..4, seed in any::<u64>(), mode in 0usize..3) {
        let mut r = rng(seed);
        let raw = random_dataset(&mut r, n, d);
        let mode = [NormalizationMode::ZScoreMedian, NormalizationMode::RangeSymmetric, NormalizationMode::RangeUnit][mode];
        let (z, spec): (Dataset, NormalizationSpec) = data::normalize(&raw, mode).unwrap();
        for i in 0..d {
            prop_assert!(data::median(&z.column(i)).abs() < 1e-12);
        }
        let x = random_point(&mut r, d);
        let back = spec.denormalize_row(&spec.normalize_row(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..200, frac in 0.05f64..0.95, seed in any::<u64>(), random in any::<bool>()) {
        let train = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let spec = SplitSpec {
            train_size: train,
            test_size: n - train,
            strategy: if random { SplitStrategy::SeededRandom } else { SplitStrategy::FirstK },
            seed,
        };
        let (a, b) = data::split_indices(n, &spec).unwrap();
        prop_assert_eq!(a.len(), train);
        prop_assert_eq!(b.len(), n - train);
        let mut all: Vec<usize> = a.iter().chain(&b).cloned().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(data::split_indices(n, &spec).unwrap(), (a, b));
    }
}

#[test]
fn ard_cycles_keep_their_invariants() {
    let mut r = rng(7);
    let data = random_dataset(&mut r, 60, 3);
    let config = ArdConfig {
        max_cycles: 4,
        ..ArdConfig::default()
    };
    let scg = ScgConfig {
        max_iterations: 40,
        ..ScgConfig::default()
    };
    let fit = ard::train_ard(&data, &mlp::MlpConfig { hidden: 2 }, &scg, &config, 3).unwrap();
    assert!(!fit.report.cycles.is_empty());
    let sizes = fit.state.group_sizes.clone();
    for c in &fit.report.cycles {
        for k in 0..sizes.len() {
            assert!(c.alphas[k] > 0.0);
            assert!(c.gammas[k] >= 0.0 && c.gammas[k] <= sizes[k] as f64);
        }
    }
}

#[test]
fn every_model_on_a_path_satisfies_kkt() {
    let mut r = rng(11);
    let data = random_dataset(&mut r, 120, 4);
    let mlp = scaled_mlp(4, 3, 5, 1.5);
    let basis = anova::build_design_matrix(&mlp, &data, &PairPolicy::All).unwrap();
    let design = Design::from_basis(&basis).unwrap();
    let (path, chosen) = lasso::path_and_select(&design, data.targets(), &LassoConfig::default()).unwrap();
    assert!(path.models[0].coefficients.iter().all(|&b| b == 0.0));
    for m in &path.models {
        assert!(m.kkt_violation(&design, data.targets()) <= 1e-6);
    }
    assert_eq!(&path.models[path.chosen], &chosen);
}

fn small_pipeline(dir: &std::path::Path) -> prn::pipeline::PipelineConfig {
    let mut r = rng(21);
    let mut csv = String::from("a,b,c,y\n");
    for _ in 0..150 {
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let p = mlp::sigmoid(2.0 * x[0] - x[1] * x[1] + 0.5);
        csv.push_str(&format!("{},{},{},{}\n", x[0], x[1], x[2], u8::from(r.random::<f64>() < p)));
    }
    std::fs::write(dir.join("toy.csv"), csv).unwrap();
    std::fs::write(
        dir.join("toy.manifest"),
        "name = toy\npath = toy.csv\ntarget = y\nsplit = seeded-random\ntrain_size = 100\ntest_size = 50\n",
    )
    .unwrap();
    let mut cfg = prn::pipeline::PipelineConfig::new(data::Manifest::load(dir.join("toy.manifest")).unwrap());
    cfg.mlp.hidden = 2;
    cfg.ard.max_cycles = 3;
    cfg.scg.max_iterations = 50;
    cfg.retrain_scg.max_iterations = 50;
    cfg.lasso.n_lambdas = 30;
    cfg.seeds = vec![1, 2, 3];
    cfg
}

fn tree_hashes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_reproducible_and_aggregates_match_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_pipeline(tmp.path());
    cfg.output = Some(tmp.path().join("a"));
    let first = prn::pipeline::run_pipeline(&cfg).unwrap();
    cfg.output = Some(tmp.path().join("b"));
    cfg.threads = Some(1);
    let second = prn::pipeline::run_pipeline(&cfg).unwrap();
    assert!(first.failures.is_empty());
    for (x, y) in first.runs.iter().zip(&second.runs) {
        assert_eq!(x.prn.hash(), y.prn.hash());
    }
    let a = tree_hashes(&tmp.path().join("a"));
    let b = tree_hashes(&tmp.path().join("b"));
    assert!(a.len() > 10);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs between runs", x.0);
    }

    // mean and SD recomputed from the raw per-seed test scores
    let aucs: Vec<f64> = first
        .runs
        .iter()
        .map(|r| eval::auroc_value(&r.scores.prn, &r.scores.targets).unwrap())
        .collect();
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    let sd = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let agg = first.aggregate.prn.unwrap();
    assert!((agg.mean - mean).abs() < 1e-12);
    assert!((agg.sd - sd).abs() < 1e-12);
    assert_eq!(agg.n, 3);
}
