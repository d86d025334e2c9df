use std::fs;
use std::path::{Path, PathBuf};

use ctsel::config::{load_config, Override, RunConfig};
use ctsel::data::{generate_dataset, load_dataset, save_dataset, Dataset};
use ctsel::eval::{
    deferral_curve, read_records, run_confounding_sweep, run_lambda_sweep, select_and_evaluate, selection_seed,
    summarize, write_curves_svg, write_deferral, write_summary, EvalContext, RecordSink, SummaryRow, SweepPlan,
    DEFAULT_PERCENTILES,
};
use ctsel::uncertainty::{build_handle, EnsembleHandle, Method};
use serde::{Deserialize, Serialize};

use crate::{Cli, CliError, CliResult, Command, Common};

/// Written next to a trained handle so `select` can find its dataset.
const SOURCE_FILE: &str = "source.json";
const FINGERPRINT_FILE: &str = "fingerprint.json";

#[derive(Serialize, Deserialize)]
struct Source {
    data: PathBuf,
}

pub(crate) fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli.common, flag_overrides(&cli.command))?;
    eprintln!("resolved config:\n{}", cfg.to_json()?);
    match cli.command {
        Command::Simulate { out, .. } => simulate(&cfg, out),
        Command::Train { data, out, .. } => train(&cfg, &data, out),
        Command::Select {
            model_dir, data, patient, ..
        } => select(&cfg, &model_dir, data, patient),
        Command::Sweep { data, model_cache, out } => sweep(&cfg, data, model_cache, out),
        Command::Deferral { records, out } => deferral(&cfg, &records, out),
        Command::Confounding { data, out } => confounding(&cfg, data, out),
        Command::Report { records, out } => report(&records, &out, &cfg),
    }
}

/// Flags that stand in for configuration keys. They are applied last.
fn flag_overrides(cmd: &Command) -> Vec<Override> {
    let mut o = Vec::new();
    let out_key = |o: &mut Vec<Override>, out: &Option<PathBuf>| {
        if let Some(p) = out {
            o.push(Override::new("output", p.display().to_string()));
        }
    };
    match cmd {
        Command::Simulate { dataset, out } => {
            o.extend(dataset.clone().map(|d| Override::new("simulation.system", d)));
            out_key(&mut o, out);
        }
        Command::Train {
            model,
            ensemble,
            method,
            out,
            ..
        } => {
            o.extend(model.clone().map(|m| Override::new("training.model", m)));
            match *ensemble {
                Some(n) if n > 1 => {
                    o.push(Override::new("uncertainty.method", "ensemble"));
                    o.push(Override::new("uncertainty.members", n as i64));
                }
                Some(_) => o.push(Override::new("uncertainty.method", "mc-dropout")),
                None => {}
            }
            o.extend(method.clone().map(|m| Override::new("uncertainty.method", m)));
            out_key(&mut o, out);
        }
        Command::Select { lambda, constraint, .. } => {
            o.extend(lambda.map(|l| Override::new("selection.lambda", l)));
            o.extend(constraint.clone().map(|c| Override::new("selection.constraint", c)));
        }
        Command::Sweep { out, .. } | Command::Confounding { out, .. } => out_key(&mut o, out),
        Command::Deferral { .. } | Command::Report { .. } => {}
    }
    o
}

fn resolve(common: &Common, flags: Vec<Override>) -> CliResult<RunConfig> {
    if let Some(p) = &common.config {
        if !p.is_file() {
            return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
        }
    }
    let mut overrides = common
        .set
        .iter()
        .map(|s| Override::parse(s))
        .collect::<ctsel::Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Usage("--seed is too large".into()))?;
        overrides.push(Override::new("seed", seed));
    }
    if let Some(w) = common.workers {
        overrides.push(Override::new("workers", w as i64));
    }
    overrides.extend(flags);
    Ok(load_config(common.config.as_deref(), &overrides)?)
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Run(ctsel::Error::Io { context, source })
}

fn require_dir(dir: &Path, what: &str) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", dir.display())))
    }
}

fn require_file(file: &Path, what: &str) -> CliResult<()> {
    if file.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", file.display())))
    }
}

fn output_dir(cfg: &RunConfig, out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output.join(sub))
}

fn open_dataset(dir: &Path) -> CliResult<Dataset> {
    require_dir(dir, "dataset directory")?;
    Ok(load_dataset(dir)?)
}

/// Loads `data`, or generates the configured cohort and saves it under
/// `out/data`.
fn dataset_for(cfg: &RunConfig, data: Option<PathBuf>, out: &Path) -> CliResult<Dataset> {
    match data {
        Some(dir) => open_dataset(&dir),
        None => {
            let ds = generate_dataset(&cfg.generation(), cfg.seed)?;
            save_dataset(&ds, &out.join("data"))?;
            Ok(ds)
        }
    }
}

fn simulate(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let dir = output_dir(cfg, out, "data");
    let ds = generate_dataset(&cfg.generation(), cfg.seed)?;
    save_dataset(&ds, &dir)?;
    cfg.write_resolved(&dir)?;
    println!(
        "{} cohort (seed {}): {} train, {} val, {} test patients, {} resampled -> {}",
        ds.system(),
        ds.master_seed,
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.resampled,
        dir.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let ds = open_dataset(data)?;
    let dir = output_dir(cfg, out, "model");
    let arch = cfg.training.architecture(ds.grid());
    let handle = build_handle(
        &cfg.uncertainty,
        arch,
        &ds.train,
        &ds.val,
        &cfg.training.train_config(cfg.seed),
        cfg.workers,
    )?;
    handle.save(&dir)?;
    let source = Source {
        data: fs::canonicalize(data).map_err(io_err(format!("resolving {}", data.display())))?,
    };
    let path = dir.join(SOURCE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&source)? + "\n").map_err(io_err(format!("writing {}", path.display())))?;
    cfg.write_resolved(&dir)?;
    println!(
        "{} {} handle: {} member(s), {} passes -> {}",
        arch.flavor,
        handle.method(),
        handle.members().len(),
        handle.passes(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectionReport<'a> {
    patient: usize,
    lambda: f64,
    constraint: String,
    a_star: &'a [f64],
    mu: &'a [f64],
    var: &'a [f64],
    counterfactual: Vec<f64>,
    target: Vec<f64>,
    best_step: usize,
    best_objective: f64,
    rmse_selection: f64,
    rmse_target: f64,
}

fn select(cfg: &RunConfig, model_dir: &Path, data: Option<PathBuf>, patient: usize) -> CliResult<()> {
    require_dir(model_dir, "model directory")?;
    let data = match data {
        Some(d) => d,
        None => {
            let path = model_dir.join(SOURCE_FILE);
            require_file(&path, "dataset pointer (pass --data)")?;
            let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
            serde_json::from_str::<Source>(&text)?.data
        }
    };
    let ds = open_dataset(&data)?;
    let p = ds.test.get(patient).ok_or_else(|| {
        CliError::Usage(format!("--patient {patient} is out of range (test split has {})", ds.test.len()))
    })?;
    let handle = EnsembleHandle::load(model_dir)?;
    let ctx = EvalContext::from_dataset(&ds);
    let seed = selection_seed(cfg.seed, 0, patient);
    let (res, rec) = select_and_evaluate(&ctx, &handle, p, patient, &cfg.selection, 0, seed)?;
    let report = SelectionReport {
        patient,
        lambda: cfg.selection.lambda,
        constraint: cfg.selection.constraint.to_string(),
        a_star: &res.a_star,
        mu: &res.estimate.mu,
        var: &res.estimate.var,
        counterfactual: ctx.counterfactual(p, &res.a_star)?,
        target: cfg.selection.target_trajectory(ds.system(), ds.grid().n_horizon),
        best_step: res.best_step,
        best_objective: res.best_objective(),
        rmse_selection: rec.rmse_selection,
        rmse_target: rec.rmse_target,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Trained handles keyed by (method, replicate), valid for one training
/// configuration.
struct ModelCache {
    dir: PathBuf,
}

impl ModelCache {
    fn open(dir: PathBuf, fingerprint: &serde_json::Value) -> CliResult<Self> {
        let path = dir.join(FINGERPRINT_FILE);
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
            let stored: serde_json::Value = serde_json::from_str(&text)?;
            if &stored != fingerprint {
                return Err(CliError::Usage(format!(
                    "model cache {} was built with a different dataset or training configuration; remove it or choose another --model-cache",
                    dir.display()
                )));
            }
        } else {
            fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
            fs::write(&path, serde_json::to_string_pretty(fingerprint)? + "\n")
                .map_err(io_err(format!("writing {}", path.display())))?;
        }
        Ok(Self { dir })
    }

    fn get_or_train(
        &self,
        method: Method,
        replicate: usize,
        train: impl FnOnce() -> ctsel::Result<EnsembleHandle>,
    ) -> ctsel::Result<EnsembleHandle> {
        let dir = self.dir.join(format!("{method}-r{replicate}"));
        if dir.join("handle.json").is_file() {
            log::info!("reusing cached handle {}", dir.display());
            return EnsembleHandle::load(&dir);
        }
        let handle = train()?;
        handle.save(&dir)?;
        Ok(handle)
    }
}

fn plan<'a>(cfg: &RunConfig, ds: &'a Dataset) -> SweepPlan<'a> {
    SweepPlan {
        dataset: ds,
        arch: cfg.training.architecture(ds.grid()),
        training: cfg.training.train_config(cfg.seed),
        uncertainty: cfg.uncertainty.clone(),
        selection: cfg.selection.clone(),
        spec: cfg.sweep.clone(),
        seed: cfg.seed,
        workers: cfg.workers,
    }
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<7} {:<11} {:<10} {:>8} {:>4} {:>22} {:>22} {:>12}",
        "dataset", "method", "constraint", "lambda", "reps", "rmse_selection", "rmse_target", "variance"
    );
    for r in rows {
        println!(
            "{:<7} {:<11} {:<10} {:>8} {:>4} {:>12.5} ± {:<7.5} {:>12.5} ± {:<7.5} {:>12.3e}",
            r.dataset.to_string(),
            r.method.to_string(),
            r.constraint.to_string(),
            r.lambda,
            r.replicates,
            r.rmse_selection_mean,
            r.rmse_selection_stderr,
            r.rmse_target_mean,
            r.rmse_target_stderr,
            r.mean_variance_mean
        );
    }
}

fn sweep(cfg: &RunConfig, data: Option<PathBuf>, cache: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<()> {
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    cfg.write_resolved(&dir)?;
    let ds = dataset_for(cfg, data, &dir)?;
    let plan = plan(cfg, &ds);
    let cache = cache
        .map(|c| {
            let fingerprint = serde_json::json!({
                "system": ds.system(),
                "master_seed": ds.master_seed,
                "sizes": ds.config.sizes,
                "policy": ds.config.policy,
                "seed": cfg.seed,
                "training": cfg.training,
                "uncertainty": cfg.uncertainty,
            });
            ModelCache::open(c, &fingerprint)
        })
        .transpose()?;

    let records_path = dir.join("records.csv");
    let mut sink = RecordSink::create(&records_path)?;
    let records = run_lambda_sweep(
        &plan,
        |m, r| match &cache {
            Some(c) => c.get_or_train(m, r, || plan.train_handle(m, r)),
            None => plan.train_handle(m, r),
        },
        |batch| sink.write(batch),
    )?;
    let rows = summarize(&records);
    write_summary(&dir.join("summary.csv"), &rows)?;
    write_curves_svg(&dir.join("curves.svg"), &rows)?;
    print_summary(&rows);
    println!("{} records -> {}", records.len(), records_path.display());
    Ok(())
}

fn deferral(cfg: &RunConfig, records: &Path, out: Option<PathBuf>) -> CliResult<()> {
    require_file(records, "records file")?;
    let recs = read_records(records)?;
    let points = deferral_curve(&recs, &DEFAULT_PERCENTILES, cfg.seed)?;
    let out = out.unwrap_or_else(|| records.with_file_name("deferral.csv"));
    write_deferral(&out, &points)?;
    println!(
        "{:<11} {:<10} {:>8} {:>4} {:>6} {:>4} {:>15} {:>10}",
        "method", "constraint", "lambda", "rep", "pct", "n", "least_uncertain", "random"
    );
    for p in &points {
        println!(
            "{:<11} {:<10} {:>8} {:>4} {:>6} {:>4} {:>15.5} {:>10.5}",
            p.method.to_string(),
            p.constraint.to_string(),
            p.lambda,
            p.replicate,
            p.percentile,
            p.n,
            p.least_uncertain,
            p.random
        );
    }
    println!("-> {}", out.display());
    Ok(())
}

fn confounding(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<()> {
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    cfg.write_resolved(&dir)?;
    let ds = dataset_for(cfg, data, &dir)?;
    let result = run_confounding_sweep(&plan(cfg, &ds))?;
    let path = dir.join("confounding.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &result.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))?;
    println!("{:>11} {:>22} {:>12}", "hsic_weight", "rmse_selection", "HSIC");
    for (weight, mean, se, hsic) in result.by_weight() {
        println!("{weight:>11} {mean:>12.5} ± {se:<7.5} {hsic:>12.3e}");
    }
    println!("-> {}", path.display());
    Ok(())
}

fn report(records: &Path, out: &Path, cfg: &RunConfig) -> CliResult<()> {
    require_file(records, "records file")?;
    let recs = read_records(records)?;
    let rows = summarize(&recs);
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    write_summary(&out.join("summary.csv"), &rows)?;
    write_curves_svg(&out.join("curves.svg"), &rows)?;
    cfg.write_resolved(out)?;
    print_summary(&rows);
    println!("-> {}", out.display());
    Ok(())
}
