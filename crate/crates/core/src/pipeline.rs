//! End-to-end runs: MLP with ARD, decomposition, Lasso, PRN construction, retraining,
//! the optional second Lasso, and evaluation, over one or more seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anova::{self, PairPolicy, PartialResponseBasis};
use crate::ard::{self, ArdConfig, ArdFit};
use crate::data::{parse_key_values, Dataset, Manifest, PreparedData};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, McNemarResult};
use crate::lasso::{self, Design, LassoConfig, LassoModel, LassoPath};
use crate::mlp::MlpConfig;
use crate::nomogram;
use crate::prn::{self, PrnModel};
use crate::scg::ScgConfig;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub manifest: Manifest,
    pub mlp: MlpConfig,
    pub ard: ArdConfig,
    pub scg: ScgConfig,
    pub retrain_scg: ScgConfig,
    pub pair_policy: PairPolicy,
    /// Only terms over these features enter the decomposition.
    pub restrict: Option<Vec<String>>,
    pub lasso: LassoConfig,
    pub decay: f64,
    pub relasso: bool,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Worker threads for seeds; `None` uses every core.
    pub threads: Option<usize>,
    pub cutpoint: f64,
}

impl PipelineConfig {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            mlp: MlpConfig::default(),
            ard: ArdConfig::default(),
            scg: ScgConfig::default(),
            retrain_scg: ScgConfig::default(),
            pair_policy: PairPolicy::Auto,
            restrict: None,
            lasso: LassoConfig::default(),
            decay: 1e-3,
            relasso: true,
            seeds: (1..=10).collect(),
            output: None,
            threads: None,
            cutpoint: 0.5,
        }
    }

    /// Reads a key-value config file. `manifest` is required; other keys override
    /// defaults. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let manifest_path = kv
            .get("manifest")
            .ok_or_else(|| Error::Config("config missing `manifest`".into()))?;
        let mut cfg = Self::new(Manifest::load(base.join(manifest_path))?);
        for (k, v) in &kv {
            if k == "manifest" {
                continue;
            }
            cfg.set(k, v, base)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")))
        }
        match key {
            "hidden" => self.mlp.hidden = p(key, value)?,
            "ard_cycles" => self.ard.max_cycles = p(key, value)?,
            "alpha_init" => self.ard.alpha_init = p(key, value)?,
            "hessian" => {
                self.ard.hessian = match value {
                    "gauss-newton" => ard::HessianKind::GaussNewton,
                    "exact" => ard::HessianKind::Exact,
                    _ => return Err(Error::Config(format!("unknown hessian `{value}`"))),
                }
            }
            "max_iterations" => self.scg.max_iterations = p(key, value)?,
            "retrain_iterations" => self.retrain_scg.max_iterations = p(key, value)?,
            "pair_policy" => self.pair_policy = value.parse()?,
            "restrict" => self.restrict = Some(split_list(value)),
            "folds" => self.lasso.folds = p(key, value)?,
            "lambda" => self.lasso.lambda_override = Some(p(key, value)?),
            "decay" => self.decay = p(key, value)?,
            "relasso" => self.relasso = parse_bool(key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "output" => self.output = Some(base.join(value)),
            "threads" => self.threads = Some(p(key, value)?),
            "cutpoint" => self.cutpoint = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::Config("decay must be non-negative".into()));
        }
        self.scg.validate()?;
        self.retrain_scg.validate()
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn parse_bool(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{k}` must be true or false"))),
    }
}

/// Parses `3`, `1,4,9` or an inclusive range `1-10`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{v}`"));
    let mut out = Vec::new();
    for part in split_list(v) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if b < a {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Everything one seed produces, kept in memory.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub data: PreparedData,
    pub ard: ArdFit,
    pub basis: PartialResponseBasis,
    pub path: Option<LassoPath>,
    pub lasso: LassoModel,
    pub prn_initial: PrnModel,
    /// Retrained and recentered.
    pub prn: PrnModel,
    pub prn_lasso: Option<PrnModel>,
    pub relasso_model: Option<LassoModel>,
    pub relasso_path: Option<LassoPath>,
    pub summary: SeedSummary,
    pub scores: TestScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScores {
    pub targets: Vec<f64>,
    pub mlp: Vec<f64>,
    pub prn_initial: Vec<f64>,
    pub prn: Vec<f64>,
    pub prn_lasso: Option<Vec<f64>>,
}

impl TestScores {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,target,mlp,prn_initial,prn,prn_lasso\n");
        for m in 0..self.targets.len() {
            s.push_str(&format!(
                "{m},{},{:e},{:e},{:e},{}\n",
                self.targets[m],
                self.mlp[m],
                self.prn_initial[m],
                self.prn[m],
                self.prn_lasso.as_ref().map_or(String::new(), |v| format!("{:e}", v[m]))
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub dataset: String,
    pub seed: u64,
    pub mlp: EvalReport,
    pub prn_initial: EvalReport,
    pub prn: EvalReport,
    pub prn_lasso: Option<EvalReport>,
    /// Terms with nonzero first-Lasso coefficients.
    pub selected_terms: Vec<String>,
    /// Features appearing in any selected term.
    pub selected_inputs: Vec<String>,
    pub prn_lasso_terms: Option<Vec<String>>,
    pub lambda: f64,
    pub mcnemar_prn_vs_mlp: McNemarResult,
    pub retrain_objective: (f64, f64),
}

fn restrict_indices(names: &Option<Vec<String>>, data: &Dataset) -> Result<Option<Vec<usize>>> {
    names
        .as_ref()
        .map(|list| {
            list.iter()
                .map(|n| {
                    data.feature_index(n)
                        .ok_or_else(|| Error::Config(format!("unknown feature `{n}` in restriction")))
                })
                .collect()
        })
        .transpose()
}

/// Runs every stage for one seed on an already loaded dataset.
pub fn run_seed(config: &PipelineConfig, full: &Dataset, seed: u64) -> Result<SeedRun> {
    let started = Instant::now();
    let data = config.manifest.prepare_from(full, seed)?;
    let (train, test) = (&data.train, &data.test);
    let names = &train.feature_names;

    let ard_fit = ard::train_ard(train, &config.mlp, &config.scg, &config.ard, seed)?;
    let mlp = &ard_fit.model;

    let restrict = restrict_indices(&config.restrict, train)?;
    let terms = anova::select_terms(mlp, &config.pair_policy, restrict.as_deref(), Some(&ard_fit.state.alphas))?;
    let basis = anova::build_basis(mlp, train, terms)?;
    let design = Design::from_basis(&basis)?;
    let lasso_cfg = LassoConfig {
        seed,
        ..config.lasso
    };
    let (path, chosen) = match lasso_cfg.lambda_override {
        Some(l) => (None, lasso::fit_lasso(&design, train.targets(), l, &lasso_cfg)?),
        None => {
            let (p, m) = lasso::path_and_select(&design, train.targets(), &lasso_cfg)?;
            (Some(p), m)
        }
    };
    if chosen.selected.is_empty() {
        warn!("seed {seed}: the Lasso kept no terms; the network is intercept-only");
    }

    let prn_initial = prn::build_prn(mlp, &basis, &chosen, seed)?;
    let before = prn::prn_objective(&prn_initial, train, config.decay);
    let (retrained, _) = prn::retrain_prn(&prn_initial, train, config.decay, &config.retrain_scg)?;
    let after = prn::prn_objective(&retrained, train, config.decay);
    let prn_model = prn::recenter(&retrained);

    let (prn_lasso, relasso_model, relasso_path) = if config.relasso && !prn_model.subnetworks.is_empty() {
        let (m, l, p) = prn::relasso(&prn_model, train, &lasso_cfg)?;
        (Some(m), Some(l), p)
    } else {
        (None, None, None)
    };

    let targets = test.targets().to_vec();
    let mlp_scores: Vec<f64> = test.rows().map(|x| mlp.forward(x)).collect::<Result<_>>()?;
    let scores = TestScores {
        mlp: mlp_scores,
        prn_initial: prn_initial.predict(test)?,
        prn: prn_model.predict(test)?,
        prn_lasso: prn_lasso.as_ref().map(|m| m.predict(test)).transpose()?,
        targets,
    };
    let cut = config.cutpoint;
    let t = &scores.targets;
    let label = |m: &LassoModel, terms: &dyn Fn(usize) -> String| m.selected.iter().map(|&k| terms(k)).collect::<Vec<_>>();
    let selected_terms = label(&chosen, &|k| basis.terms[k].label(names));
    let mut inputs: Vec<usize> = chosen.selected.iter().flat_map(|&k| basis.terms[k].inputs()).collect();
    inputs.sort_unstable();
    inputs.dedup();
    let summary = SeedSummary {
        dataset: config.manifest.name.clone(),
        seed,
        mlp: eval::evaluate(&scores.mlp, t, cut)?,
        prn_initial: eval::evaluate(&scores.prn_initial, t, cut)?,
        prn: eval::evaluate(&scores.prn, t, cut)?,
        prn_lasso: scores.prn_lasso.as_ref().map(|s| eval::evaluate(s, t, cut)).transpose()?,
        selected_terms,
        selected_inputs: inputs.iter().map(|&i| names[i].clone()).collect(),
        prn_lasso_terms: prn_lasso
            .as_ref()
            .map(|m| m.subnetworks.iter().map(|s| s.term().label(names)).collect()),
        lambda: chosen.lambda,
        mcnemar_prn_vs_mlp: eval::mcnemar(
            &eval::predictions(&scores.prn, cut),
            &eval::predictions(&scores.mlp, cut),
            t,
        )?,
        retrain_objective: (before, after),
    };
    info!(
        "{} seed {seed}: MLP {:.4} PRN {:.4}{} terms [{}] in {:.1}s",
        summary.dataset,
        summary.mlp.auroc,
        summary.prn.auroc,
        summary.prn_lasso.map_or(String::new(), |r| format!(" PRN-Lasso {:.4}", r.auroc)),
        summary.selected_terms.join(", "),
        started.elapsed().as_secs_f64()
    );
    Ok(SeedRun {
        seed,
        data,
        ard: ard_fit,
        basis,
        path,
        lasso: chosen,
        prn_initial,
        prn: prn_model,
        prn_lasso,
        relasso_model,
        relasso_path,
        summary,
        scores,
    })
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes one seed's artifacts under `dir`.
pub fn write_seed_artifacts(run: &SeedRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = &run.data.train.feature_names;
    let labels: Vec<String> = run.basis.terms.iter().map(|t| t.label(names)).collect();
    write(&dir.join("normalization.json"), &json(&run.data.normalization)?)?;
    let mut split = String::from("row,set\n");
    for (rows, set) in [(&run.data.train_rows, "train"), (&run.data.test_rows, "test")] {
        for r in rows.iter() {
            split.push_str(&format!("{r},{set}\n"));
        }
    }
    write(&dir.join("split.csv"), &split)?;
    write(&dir.join("mlp.txt"), &run.ard.model.to_text())?;
    write(&dir.join("ard.csv"), &run.ard.report.to_csv())?;
    anova::export_partial_responses(&run.ard.model, &run.basis, &run.data.train, &dir.join("partial_responses"))?;
    if let Some(p) = &run.path {
        p.write_csv(&dir.join("lasso_path.csv"))?;
    }
    write(&dir.join("lasso.json"), &run.lasso.to_json(&labels)?)?;
    run.prn_initial.save(&dir.join("prn_initial.txt"))?;
    run.prn.save(&dir.join("prn.txt"))?;
    if let (Some(m), Some(l)) = (&run.prn_lasso, &run.relasso_model) {
        m.save(&dir.join("prn_lasso.txt"))?;
        let sub_labels: Vec<String> = run.prn.subnetworks.iter().map(|s| s.term().label(names)).collect();
        write(&dir.join("relasso.json"), &l.to_json(&sub_labels)?)?;
        if let Some(p) = &run.relasso_path {
            p.write_csv(&dir.join("relasso_path.csv"))?;
        }
    }
    write(&dir.join("scores.csv"), &run.scores.to_csv())?;
    write(&dir.join("eval.json"), &json(&run.summary)?)?;
    nomogram::export_nomogram(&run.prn, &run.data.normalization, &run.data.raw_train, &dir.join("nomogram"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub failures: Vec<(u64, String)>,
    pub mlp: Option<MeanSd>,
    pub prn_initial: Option<MeanSd>,
    pub prn: Option<MeanSd>,
    pub prn_lasso: Option<MeanSd>,
    /// Seeds in which each term was selected by the first Lasso.
    pub term_frequency: BTreeMap<String, usize>,
    /// Seeds in which each feature appeared in a selected term.
    pub input_frequency: BTreeMap<String, usize>,
}

pub fn aggregate(dataset: &str, summaries: &[SeedSummary], failures: Vec<(u64, String)>) -> Aggregate {
    let stat = |f: &dyn Fn(&SeedSummary) -> Option<f64>| MeanSd::of(&summaries.iter().filter_map(f).collect::<Vec<_>>());
    let mut term_frequency = BTreeMap::new();
    let mut input_frequency = BTreeMap::new();
    for s in summaries {
        for t in &s.selected_terms {
            *term_frequency.entry(t.clone()).or_insert(0) += 1;
        }
        for i in &s.selected_inputs {
            *input_frequency.entry(i.clone()).or_insert(0) += 1;
        }
    }
    Aggregate {
        dataset: dataset.to_string(),
        seeds: summaries.iter().map(|s| s.seed).collect(),
        failures,
        mlp: stat(&|s| Some(s.mlp.auroc)),
        prn_initial: stat(&|s| Some(s.prn_initial.auroc)),
        prn: stat(&|s| Some(s.prn.auroc)),
        prn_lasso: stat(&|s| s.prn_lasso.map(|r| r.auroc)),
        term_frequency,
        input_frequency,
    }
}

/// Per-seed CSV rows: one per model variant.
pub fn summaries_csv(summaries: &[SeedSummary]) -> String {
    let mut s = String::from("dataset,seed,variant,auroc,ci_lo,ci_hi,terms\n");
    for r in summaries {
        let variants = [
            ("mlp", Some(r.mlp), None),
            ("prn_initial", Some(r.prn_initial), Some(&r.selected_terms)),
            ("prn", Some(r.prn), Some(&r.selected_terms)),
            ("prn_lasso", r.prn_lasso, r.prn_lasso_terms.as_ref()),
        ];
        for (name, rep, terms) in variants {
            if let Some(e) = rep {
                s.push_str(&format!(
                    "{},{},{name},{:e},{:e},{:e},\"{}\"\n",
                    r.dataset,
                    r.seed,
                    e.auroc,
                    e.auroc_ci.0,
                    e.auroc_ci.1,
                    terms.map_or(String::new(), |t| t.join(";"))
                ));
            }
        }
    }
    s
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub runs: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
    pub aggregate: Aggregate,
}

/// Runs all seeds, in parallel, and writes artifacts when an output directory is set.
///
/// A failing seed is recorded and does not stop the others.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let full = config.manifest.load_dataset()?;
    let work = || -> Vec<(u64, Result<SeedRun>)> {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let run = run_seed(config, &full, seed).and_then(|run| {
                    if let Some(out) = &config.output {
                        write_seed_artifacts(&run, &out.join(format!("seed_{seed}")))?;
                    }
                    Ok(run)
                });
                (seed, run)
            })
            .collect()
    };
    let results = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    let summaries: Vec<SeedSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let aggregate = aggregate(&config.manifest.name, &summaries, failures.clone());
    if let Some(out) = &config.output {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write(&out.join("aggregate.json"), &json(&aggregate)?)?;
        write(&out.join("per_seed.csv"), &summaries_csv(&summaries))?;
    }
    Ok(PipelineOutcome {
        runs,
        failures,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("1-4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_seeds("5, 2,9").unwrap(), vec![5, 2, 9]);
        assert!(parse_seeds("4-1").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.sd, 1.0);
        assert_eq!(MeanSd::of(&[4.0]).unwrap().sd, 0.0);
        assert!(MeanSd::of(&[]).is_none());
    }
}
