use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use prn::anova::{self, PartialResponseBasis};
use prn::ard::{self, ArdState};
use prn::data::{Manifest, PreparedData};
use prn::eval;
use prn::lasso::{self, Design, LassoModel};
use prn::mlp::MlpModel;
use prn::nomogram;
use prn::pipeline::{self, PipelineConfig};
use prn::prn::{self as network, PrnModel};

#[derive(Parser)]
#[command(name = "prn", version, about = "Partial response networks: sparse, additive explanations of an MLP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Working directory holding the artifacts of earlier steps.
    #[arg(long, default_value = "prn-work")]
    dir: PathBuf,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Key-value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    ard_cycles: Option<usize>,
    /// SCG iterations per ARD cycle.
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    retrain_iterations: Option<usize>,
    /// gauss-newton or exact.
    #[arg(long)]
    hessian: Option<String>,
    /// auto, all, none or top:<m>.
    #[arg(long)]
    pair_policy: Option<String>,
    /// Comma-separated features; only terms over these are considered.
    #[arg(long)]
    restrict: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fixed Lasso penalty instead of cross-validation.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    relasso: Option<bool>,
    /// `1-10` or `1,3,5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    cutpoint: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the MLP with ARD.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Evaluate the ANOVA terms of the trained MLP on the training rows.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Fit the Lasso path over the partial responses and pick a penalty.
    Select {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Build the partial response network from the Lasso selection.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain the network and re-anchor its terms.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Second Lasso pass over the retrained terms.
    Relasso {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Test-set AUROC, confusion counts and McNemar against the MLP.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file in the working directory.
        #[arg(long, default_value = "prn.txt")]
        model: String,
        #[arg(long, default_value_t = 0.5)]
        cutpoint: f64,
    },
    /// Write nomogram CSV and SVG files.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "prn.txt")]
        model: String,
    },
    /// Explain one record given in original units.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "prn.txt")]
        model: String,
        /// Comma-separated feature values in manifest column order.
        #[arg(long)]
        record: String,
    },
    /// Run every step for each seed.
    Run {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "prn-out")]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Like `run`, then print the aggregate table.
    Bench {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "prn-out")]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
}

fn config_for(manifest: Option<&Path>, opts: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match (&opts.config, manifest) {
        (Some(c), m) => {
            let mut cfg = PipelineConfig::load(c).with_context(|| format!("reading config {}", c.display()))?;
            if let Some(m) = m {
                cfg.manifest = Manifest::load(m)?;
            }
            cfg
        }
        (None, Some(m)) => PipelineConfig::new(Manifest::load(m).with_context(|| format!("reading manifest {}", m.display()))?),
        (None, None) => bail!("either --manifest or --config is required"),
    };
    let here = Path::new(".");
    let mut set = |k: &str, v: Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(k, &v, here)?;
        }
        Ok(())
    };
    set("hidden", opts.hidden.map(|v| v.to_string()))?;
    set("ard_cycles", opts.ard_cycles.map(|v| v.to_string()))?;
    set("max_iterations", opts.max_iterations.map(|v| v.to_string()))?;
    set("retrain_iterations", opts.retrain_iterations.map(|v| v.to_string()))?;
    set("hessian", opts.hessian.clone())?;
    set("pair_policy", opts.pair_policy.clone())?;
    set("restrict", opts.restrict.clone())?;
    set("folds", opts.folds.map(|v| v.to_string()))?;
    set("lambda", opts.lambda.map(|v| v.to_string()))?;
    set("decay", opts.decay.map(|v| v.to_string()))?;
    set("relasso", opts.relasso.map(|v| v.to_string()))?;
    set("seeds", opts.seeds.clone())?;
    set("threads", opts.threads.map(|v| v.to_string()))?;
    set("cutpoint", opts.cutpoint.map(|v| v.to_string()))?;
    Ok(cfg)
}

fn prepared(common: &Common) -> Result<PreparedData> {
    let manifest = Manifest::load(&common.manifest)?;
    Ok(manifest.prepare(common.seed)?)
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    std::fs::read_to_string(&p).with_context(|| format!("reading {} (run the earlier step first)", p.display()))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

fn train(common: &Common, opts: &Overrides) -> Result<()> {
    let cfg = config_for(Some(&common.manifest), opts)?;
    let data = prepared(common)?;
    let fit = ard::train_ard(&data.train, &cfg.mlp, &cfg.scg, &cfg.ard, common.seed)?;
    write(&common.dir, "mlp.txt", &fit.model.to_text())?;
    write(&common.dir, "ard.csv", &fit.report.to_csv())?;
    write(&common.dir, "ard_state.json", &json(&fit.state)?)?;
    write(&common.dir, "normalization.json", &json(&data.normalization)?)?;
    println!(
        "trained {} cycles (converged: {}), mlp {}",
        fit.report.cycles.len(),
        fit.report.converged,
        fit.model.hash()
    );
    Ok(())
}

fn decompose(common: &Common, opts: &Overrides) -> Result<()> {
    let cfg = config_for(Some(&common.manifest), opts)?;
    let data = prepared(common)?;
    let mlp = MlpModel::from_text(&read(&common.dir, "mlp.txt")?)?;
    let state: ArdState = from_json(&read(&common.dir, "ard_state.json")?)?;
    let restrict = cfg
        .restrict
        .as_ref()
        .map(|names| {
            names
                .iter()
                .map(|n| data.train.feature_index(n).with_context(|| format!("unknown feature {n}")))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let terms = anova::select_terms(&mlp, &cfg.pair_policy, restrict.as_deref(), Some(&state.alphas))?;
    let basis = anova::build_basis(&mlp, &data.train, terms)?;
    write(&common.dir, "basis.json", &json(&basis)?)?;
    write(&common.dir, "basis.csv", &basis.to_csv(&data.train.feature_names))?;
    anova::export_partial_responses(&mlp, &basis, &data.train, &common.dir.join("partial_responses"))?;
    println!("{} terms, phi0 = {:.6}", basis.n_terms(), basis.phi0);
    Ok(())
}

fn select(common: &Common, opts: &Overrides) -> Result<()> {
    let cfg = config_for(Some(&common.manifest), opts)?;
    let data = prepared(common)?;
    let basis: PartialResponseBasis = from_json(&read(&common.dir, "basis.json")?)?;
    let design = Design::from_basis(&basis)?;
    let lcfg = lasso::LassoConfig {
        seed: common.seed,
        ..cfg.lasso
    };
    let model = match lcfg.lambda_override {
        Some(l) => lasso::fit_lasso(&design, data.train.targets(), l, &lcfg)?,
        None => {
            let (path, m) = lasso::path_and_select(&design, data.train.targets(), &lcfg)?;
            path.write_csv(&common.dir.join("lasso_path.csv"))?;
            m
        }
    };
    let labels: Vec<String> = basis.terms.iter().map(|t| t.label(&data.train.feature_names)).collect();
    write(&common.dir, "lasso.json", &model.to_json(&labels)?)?;
    let chosen: Vec<&str> = model.selected.iter().map(|&k| labels[k].as_str()).collect();
    println!("lambda {:.6e}: {}", model.lambda, chosen.join(", "));
    Ok(())
}

fn build(common: &Common) -> Result<()> {
    let mlp = MlpModel::from_text(&read(&common.dir, "mlp.txt")?)?;
    let basis: PartialResponseBasis = from_json(&read(&common.dir, "basis.json")?)?;
    let model = LassoModel::from_json(&read(&common.dir, "lasso.json")?)?;
    let prn = network::build_prn(&mlp, &basis, &model, common.seed)?;
    write(&common.dir, "prn_initial.txt", &prn.to_text())?;
    println!("{} subnetworks", prn.subnetworks.len());
    Ok(())
}

fn retrain(common: &Common, opts: &Overrides) -> Result<()> {
    let cfg = config_for(Some(&common.manifest), opts)?;
    let data = prepared(common)?;
    let initial = PrnModel::from_text(&read(&common.dir, "prn_initial.txt")?)?;
    let (trained, trace) = network::retrain_prn(&initial, &data.train, cfg.decay, &cfg.retrain_scg)?;
    let prn = network::recenter(&trained);
    write(&common.dir, "prn.txt", &prn.to_text())?;
    write(&common.dir, "retrain_trace.csv", &trace.to_csv())?;
    println!(
        "objective {:.6} -> {:.6} in {} iterations",
        trace.objective[0],
        trace.objective[trace.objective.len() - 1],
        trace.iterations
    );
    Ok(())
}

fn relasso(common: &Common, opts: &Overrides) -> Result<()> {
    let cfg = config_for(Some(&common.manifest), opts)?;
    let data = prepared(common)?;
    let prn = PrnModel::from_text(&read(&common.dir, "prn.txt")?)?;
    let lcfg = lasso::LassoConfig {
        seed: common.seed,
        ..cfg.lasso
    };
    let (reweighted, model, path) = network::relasso(&prn, &data.train, &lcfg)?;
    if let Some(p) = path {
        p.write_csv(&common.dir.join("relasso_path.csv"))?;
    }
    let labels: Vec<String> = prn
        .subnetworks
        .iter()
        .map(|s| s.term().label(&data.train.feature_names))
        .collect();
    write(&common.dir, "relasso.json", &model.to_json(&labels)?)?;
    write(&common.dir, "prn_lasso.txt", &reweighted.to_text())?;
    println!("{} of {} subnetworks kept", reweighted.subnetworks.len(), prn.subnetworks.len());
    Ok(())
}

fn evaluate(common: &Common, model: &str, cutpoint: f64) -> Result<()> {
    let data = prepared(common)?;
    let prn = PrnModel::from_text(&read(&common.dir, model)?)?;
    let targets = data.test.targets();
    let scores = prn.predict(&data.test)?;
    let report = eval::evaluate(&scores, targets, cutpoint)?;
    write(&common.dir, &format!("{}.eval.json", model.trim_end_matches(".txt")), &json(&report)?)?;
    println!(
        "AUROC {:.4} [{:.4}, {:.4}] n={} tp={} fp={} tn={} fn={}",
        report.auroc,
        report.auroc_ci.0,
        report.auroc_ci.1,
        report.n_test,
        report.confusion.tp,
        report.confusion.fp,
        report.confusion.tn,
        report.confusion.fn_
    );
    if let Ok(text) = read(&common.dir, "mlp.txt") {
        let mlp = MlpModel::from_text(&text)?;
        let mlp_scores = data.test.rows().map(|x| mlp.forward(x)).collect::<prn::Result<Vec<f64>>>()?;
        let m = eval::mcnemar(
            &eval::predictions(&scores, cutpoint),
            &eval::predictions(&mlp_scores, cutpoint),
            targets,
        )?;
        println!(
            "McNemar vs MLP: b={} c={} statistic={:.4} p={:.4}{}",
            m.b,
            m.c,
            m.statistic,
            m.p_value,
            if m.exact { " (exact)" } else { "" }
        );
    }
    Ok(())
}

fn export(common: &Common, model: &str) -> Result<()> {
    let data = prepared(common)?;
    let prn = PrnModel::from_text(&read(&common.dir, model)?)?;
    let out = common.dir.join("nomogram");
    nomogram::export_nomogram(&prn, &data.normalization, &data.raw_train, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn explain(common: &Common, model: &str, record: &str) -> Result<()> {
    let data = prepared(common)?;
    let prn = PrnModel::from_text(&read(&common.dir, model)?)?;
    let values = record
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad value `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    let e = nomogram::explain_record(&prn, &data.normalization, &values)?;
    println!("{}", json(&e)?);
    Ok(())
}

fn run(manifest: Option<&Path>, out: &Path, opts: &Overrides, table: bool) -> Result<bool> {
    let mut cfg = config_for(manifest, opts)?;
    if cfg.output.is_none() {
        cfg.output = Some(out.to_path_buf());
    }
    let outcome = pipeline::run_pipeline(&cfg)?;
    for (seed, e) in &outcome.failures {
        warn!("seed {seed}: {e}");
    }
    let a = &outcome.aggregate;
    if table {
        println!("{}: {} seeds ok, {} failed", a.dataset, a.seeds.len(), a.failures.len());
        for (name, s) in [("MLP", a.mlp), ("PRN (built)", a.prn_initial), ("PRN", a.prn), ("PRN-Lasso", a.prn_lasso)] {
            if let Some(s) = s {
                println!("  {name:<12} AUROC {:.2} ({:.2})", 100.0 * s.mean, 100.0 * s.sd);
            }
        }
        println!("  features selected (seeds):");
        for (f, n) in &a.input_frequency {
            println!("    {f:<28} {n}");
        }
    } else {
        println!("{}", json(a)?);
    }
    Ok(outcome.failures.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, result): (u8, Result<bool>) = match &cli.command {
        Command::Train { common, opts } => (2, train(common, opts).map(|_| true)),
        Command::Decompose { common, opts } => (3, decompose(common, opts).map(|_| true)),
        Command::Select { common, opts } => (4, select(common, opts).map(|_| true)),
        Command::Build { common } => (5, build(common).map(|_| true)),
        Command::Retrain { common, opts } => (6, retrain(common, opts).map(|_| true)),
        Command::Relasso { common, opts } => (7, relasso(common, opts).map(|_| true)),
        Command::Eval { common, model, cutpoint } => (8, evaluate(common, model, *cutpoint).map(|_| true)),
        Command::Export { common, model } => (9, export(common, model).map(|_| true)),
        Command::Explain { common, model, record } => (9, explain(common, model, record).map(|_| true)),
        Command::Run { manifest, out, opts } => (10, run(manifest.as_deref(), out, opts, false)),
        Command::Bench { manifest, out, opts } => (10, run(manifest.as_deref(), out, opts, true)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(stage),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(stage)
        }
    }
}
