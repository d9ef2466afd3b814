//! Command-line entry point.

mod artifacts;
mod render;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bootstrap::{derive_seed, resample, summarize, ReplicateEstimate, ResamplePlan};
use crate::cimetest::{bootstrap_test, conditional_test_suite, DEFAULT_MIN_CELL, DEFAULT_REPLICATES};
use crate::cmle::{fit_with_start, CmleConfig, OrdConstraint};
use crate::dataset::{frequency_pmf, ingest, tabulate, Dataset, ExclusionReport, Schema};
use crate::error::{Error, Result};
use crate::latent::{estimate, latent_conditional, reported_conditional, FitKind, ParametricFit, Target, DEFAULT_CLAMP};
use crate::model::MisclassificationModel;
use crate::simulate::{draw, make_model, GeneratorSpec};
use crate::spectral::{eigendecompose_identify, SpectralOptions};

pub use artifacts::{
    read_artifact, read_manifest, Artifact, BootInfo, CellModel, CmleFitInfo, FitArtifact, Method,
    ModelsArtifact, RunManifest, TestArtifact, SCHEMA_VERSION,
};

pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "misreport", version, about = "Detect and correct misclassification in discrete survey responses")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset from a generator spec.
    Simulate(SimulateArgs),
    /// Bootstrap test of Y independent of Z given X.
    Test(TestArgs),
    /// Identify the misclassification model per covariate cell.
    Identify(IdentifyArgs),
    /// Fit linear or ordered-probit models of the outcome on covariates.
    Estimate(EstimateArgs),
    /// Render JSON artifacts as tables.
    Report(ReportArgs),
    /// Rerun an invocation from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Generator spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the hidden latent states.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write a schema that reads `--out` back.
    #[arg(long)]
    schema_out: Option<PathBuf>,
    /// Also write the generating models as a models artifact.
    #[arg(long)]
    models_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Schema (TOML).
    #[arg(long)]
    schema: PathBuf,
    /// Test every covariate cell as well as the pooled sample.
    #[arg(long)]
    by_cell: bool,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = DEFAULT_REPLICATES)]
    b: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Cells with fewer records are skipped.
    #[arg(long, default_value_t = DEFAULT_MIN_CELL)]
    min_cell: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OrdArg {
    Enforce,
    CheckOnly,
}

#[derive(Debug, Args, Serialize)]
struct IdentifyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// One model per covariate cell instead of one pooled model.
    #[arg(long)]
    by_cell: bool,
    #[arg(long, value_enum, default_value_t = Method::Cmle)]
    method: Method,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    /// Required for CMLE and for the bootstrap.
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap replicates for standard errors; 0 skips the bootstrap.
    #[arg(long, default_value_t = 0)]
    boot: usize,
    #[arg(long, value_enum, default_value_t = OrdArg::CheckOnly)]
    ord: OrdArg,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    gradient_tolerance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModelArg {
    Linear,
    /// Homoskedastic ordered probit.
    Oprobit,
    /// Heteroskedastic ordered probit.
    Hoprobit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TargetArg {
    Latent,
    Reported,
}

#[derive(Debug, Args, Serialize)]
struct EstimateArgs {
    /// Models artifact from `identify --by-cell`; required for the latent target.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, value_enum)]
    target: TargetArg,
    /// Bootstrap replicates for standard errors; 0 skips the bootstrap.
    #[arg(long, default_value_t = 0)]
    boot: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Cumulative probabilities are clamped to [clamp, 1 - clamp].
    #[arg(long, default_value_t = DEFAULT_CLAMP)]
    clamp: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fail unless every output is byte-identical to the recorded one.
    #[arg(long)]
    check: bool,
}

/// What a finished command hands back for its manifest.
#[derive(Default)]
struct RunRecord {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
    resolved: serde_json::Map<String, serde_json::Value>,
    seed: Option<u64>,
    /// The manifest goes next to this file.
    primary: Option<PathBuf>,
}

impl RunRecord {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
        Ok(out)
    }

    fn resolve<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.resolved.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }
}

/// Runs the command line (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| execute(cli.command, argv, threads))
}

fn execute(command: Command, argv: Vec<String>, threads: usize) -> Result<()> {
    let (name, config, record) = match command {
        Command::Simulate(a) => ("simulate", serde_json::to_value(&a)?, simulate_cmd(&a)?),
        Command::Test(a) => ("test", serde_json::to_value(&a)?, test_cmd(&a)?),
        Command::Identify(a) => ("identify", serde_json::to_value(&a)?, identify_cmd(&a)?),
        Command::Estimate(a) => ("estimate", serde_json::to_value(&a)?, estimate_cmd(&a)?),
        Command::Report(a) => ("report", serde_json::to_value(&a)?, report_cmd(&a)?),
        Command::Replay(a) => return replay_cmd(&a),
    };
    let Some(primary) = record.primary.clone() else {
        return Ok(());
    };
    let mut config = match config {
        serde_json::Value::Object(m) => m,
        _ => serde_json::Map::new(),
    };
    config.extend(record.resolved.clone());
    let digest_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((p.display().to_string(), artifacts::sha256_file(p)?))).collect()
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        kind: artifacts::KIND_MANIFEST.into(),
        command: name.into(),
        argv,
        working_directory: std::env::current_dir()?.display().to_string(),
        config: serde_json::Value::Object(config),
        seed: record.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        threads,
        timings: record.timings.clone(),
        inputs: digest_all(&record.inputs)?,
        outputs: digest_all(&record.outputs)?,
    };
    artifacts::write_json(&manifest_path(&primary), &manifest)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn guard_outputs(inputs: &[PathBuf], outputs: &[&Path]) -> Result<()> {
    for o in outputs {
        if inputs.iter().any(|i| i == o) {
            return Err(Error::Config(format!("output {} would overwrite an input", o.display())));
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_data(input: &Path, schema_path: &Path) -> Result<(Dataset, ExclusionReport)> {
    let schema = Schema::from_toml_str(&read_text(schema_path)?)?;
    let file = File::open(input).map_err(|e| Error::Data(format!("cannot read {}: {e}", input.display())))?;
    let (data, excl) = ingest(BufReader::new(file), &schema)?;
    if excl.excluded() > 0 {
        log::warn!("{} of {} rows excluded: {excl:?}", excl.excluded(), excl.rows_read);
    }
    Ok((data, excl))
}

fn require_seed(seed: Option<u64>, why: &str) -> Result<u64> {
    seed.ok_or_else(|| Error::Config(format!("--seed is required {why}")))
}

fn simulate_cmd(a: &SimulateArgs) -> Result<RunRecord> {
    let mut rec = RunRecord { inputs: vec![a.spec.clone()], seed: Some(a.seed), ..RunRecord::default() };
    let outs: Vec<&Path> = [Some(&a.out), a.truth.as_ref(), a.schema_out.as_ref(), a.models_out.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| p.as_path())
        .collect();
    guard_outputs(&rec.inputs, &outs)?;
    let spec = GeneratorSpec::from_toml_str(&read_text(&a.spec)?)?;
    rec.resolve("generator", &spec)?;
    let models = rec.time("make_model", || make_model(&spec))?;
    let w_names = spec.w_names();
    let sample = rec.time("draw", || draw(&models, &spec.weights(), &w_names, a.n, a.seed))?;
    sample.data.write_csv(create(&a.out)?)?;
    rec.outputs.push(a.out.clone());
    if let Some(t) = &a.truth {
        sample.write_truth_csv(create(t)?)?;
        rec.outputs.push(t.clone());
    }
    if let Some(s) = &a.schema_out {
        std::fs::write(s, spec.schema().to_toml_string())?;
        rec.outputs.push(s.clone());
    }
    if let Some(m) = &a.models_out {
        let counts = sample.data.cell_counts();
        let cells = models
            .iter()
            .enumerate()
            .map(|(c, model)| CellModel {
                w_cell: Some(c),
                w_label: sample.data.cell_label(c),
                n: counts[c] as u64,
                parameter_names: model.parameter_names(),
                model: model.clone(),
                std_errors: None,
                diagnostics: None,
                cmle: None,
            })
            .collect();
        let art = ModelsArtifact {
            schema_version: SCHEMA_VERSION,
            kind: artifacts::KIND_MODELS.into(),
            method: Method::Spectral,
            by_cell: true,
            w_names: w_names.clone(),
            spectral_options: SpectralOptions::default(),
            cmle_config: None,
            exclusions: ExclusionReport { rows_read: a.n, rows_kept: a.n, ..ExclusionReport::default() },
            cells,
            boot: None,
        };
        artifacts::write_json(m, &art)?;
        rec.outputs.push(m.clone());
    }
    eprintln!(
        "wrote {} records to {} (misclassification rate {:.4})",
        a.n,
        a.out.display(),
        sample.misclassification_rate()
    );
    rec.primary = Some(a.out.clone());
    Ok(rec)
}

fn test_cmd(a: &TestArgs) -> Result<RunRecord> {
    let mut rec = RunRecord { inputs: vec![a.input.clone(), a.schema.clone()], seed: Some(a.seed), ..RunRecord::default() };
    guard_outputs(&rec.inputs, &[&a.out])?;
    let (data, exclusions) = rec.time("ingest", || load_data(&a.input, &a.schema))?;
    let (reports, skipped) = rec.time("test", || {
        if a.by_cell {
            let suite = conditional_test_suite(&data, a.b, a.seed, a.min_cell)?;
            Ok((suite.reports().into_iter().cloned().collect::<Vec<_>>(), suite.skipped))
        } else {
            Ok((vec![bootstrap_test(&data, None, a.b, a.seed)?], Vec::new()))
        }
    })?;
    let art = TestArtifact {
        schema_version: SCHEMA_VERSION,
        kind: artifacts::KIND_TESTS.into(),
        exclusions,
        reports,
        skipped,
    };
    artifacts::write_json(&a.out, &art)?;
    print!("{}", render::test_table(&art.reports, &art.skipped));
    rec.outputs.push(a.out.clone());
    rec.primary = Some(a.out.clone());
    Ok(rec)
}

/// Identification of one table by one method.
fn identify_table(
    table: &crate::dataset::ContingencyTable,
    method: Method,
    opts: &SpectralOptions,
    config: &CmleConfig,
    warm: Option<&MisclassificationModel>,
) -> Result<(MisclassificationModel, Option<crate::cmle::CmleResult>, Option<crate::spectral::IdentificationDiagnostics>)> {
    match method {
        Method::Spectral => {
            let (mut m, d) = eigendecompose_identify(&frequency_pmf(table), opts)?;
            m.w_cell = table.w_cell();
            Ok((m, None, Some(d)))
        }
        Method::Cmle => {
            let r = fit_with_start(table, config, warm)?;
            Ok((r.model.clone(), Some(r), None))
        }
    }
}

fn model_cells(data: &Dataset, by_cell: bool) -> Vec<Option<usize>> {
    if by_cell {
        let counts = data.cell_counts();
        (0..data.n_cells()).filter(|&c| counts[c] > 0).map(Some).collect()
    } else {
        vec![None]
    }
}

/// Refits every cell of `art` on a replicate dataset, warm-started from the
/// artifact's models.
fn refit_models(
    art: &ModelsArtifact,
    data: &Dataset,
    master: u64,
    replicate: usize,
) -> Option<(Vec<MisclassificationModel>, bool)> {
    let base = art.cmle_config.clone().unwrap_or_default();
    let mut models = Vec::with_capacity(art.cells.len());
    let mut boundary = false;
    for (i, cell) in art.cells.iter().enumerate() {
        let table = tabulate(data, cell.w_cell).ok()?;
        let config = CmleConfig { seed: derive_seed(master, replicate as u64, i as u64 + 1), ..base.clone() };
        let (m, r, _) = identify_table(&table, art.method, &art.spectral_options, &config, Some(&cell.model)).ok()?;
        boundary |= r.is_some_and(|r| r.at_boundary());
        models.push(m);
    }
    Some((models, boundary))
}

fn identify_cmd(a: &IdentifyArgs) -> Result<RunRecord> {
    let mut rec = RunRecord { inputs: vec![a.input.clone(), a.schema.clone()], ..RunRecord::default() };
    guard_outputs(&rec.inputs, &[&a.out])?;
    let seed = match (a.method, a.boot) {
        (Method::Spectral, 0) => a.seed,
        (Method::Cmle, _) => Some(require_seed(a.seed, "with --method cmle")?),
        _ => Some(require_seed(a.seed, "with --boot")?),
    };
    rec.seed = seed;
    let mut config = CmleConfig {
        n_starts: a.starts,
        seed: seed.unwrap_or(0),
        ord_constraint: match a.ord {
            OrdArg::Enforce => OrdConstraint::Enforce,
            OrdArg::CheckOnly => OrdConstraint::CheckOnly,
        },
        ..CmleConfig::default()
    };
    if let Some(m) = a.max_iterations {
        config.max_iterations = m;
    }
    if let Some(g) = a.gradient_tolerance {
        config.gradient_tolerance = g;
    }
    config.validate()?;
    let opts = SpectralOptions::default();
    let (data, exclusions) = rec.time("ingest", || load_data(&a.input, &a.schema))?;

    let cells = model_cells(&data, a.by_cell);
    let fitted = rec.time("identify", || {
        cells
            .iter()
            .enumerate()
            .map(|(i, &cell)| {
                let table = tabulate(&data, cell)?;
                let cell_config = CmleConfig { seed: derive_seed(config.seed, 0, i as u64), ..config.clone() };
                let label = cell.map(|c| data.cell_label(c)).unwrap_or_else(|| "pooled".into());
                let (model, r, d) = identify_table(&table, a.method, &opts, &cell_config, None).map_err(|e| {
                    match e {
                        Error::Identification(m) => Error::Identification(format!("cell {label}: {m}")),
                        Error::Optimization(m) => Error::Optimization(format!("cell {label}: {m}")),
                        other => other,
                    }
                })?;
                Ok(CellModel {
                    w_cell: cell,
                    w_label: label,
                    n: table.n(),
                    parameter_names: model.parameter_names(),
                    model,
                    std_errors: None,
                    diagnostics: d,
                    cmle: r.as_ref().map(CmleFitInfo::from),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut art = ModelsArtifact {
        schema_version: SCHEMA_VERSION,
        kind: artifacts::KIND_MODELS.into(),
        method: a.method,
        by_cell: a.by_cell,
        w_names: data.w_names().to_vec(),
        spectral_options: opts,
        cmle_config: (a.method == Method::Cmle).then(|| config.clone()),
        exclusions,
        cells: fitted,
        boot: None,
    };
    if a.boot > 0 {
        let master = seed.expect("seed checked above");
        let plan = ResamplePlan::new(a.boot, master, a.by_cell)?;
        let art_ref = &art;
        let outcomes = rec.time("bootstrap", || {
            Ok(plan.run(|r, s| {
                let d = resample(&data, s, plan.stratify_by_cell);
                let (models, at_boundary) = refit_models(art_ref, &d, master, r)?;
                let values = models.iter().flat_map(|m| m.flatten()).collect();
                Some(ReplicateEstimate { values, at_boundary })
            }))
        })?;
        let summary = summarize(outcomes)?;
        let mut at = 0;
        for cell in &mut art.cells {
            let k = cell.parameter_names.len();
            cell.std_errors = Some(summary.std_errors[at..at + k].to_vec());
            at += k;
        }
        art.boot = Some(BootInfo { replicates: a.boot, seed: master, stratified: a.by_cell, summary });
    }
    artifacts::write_json(&a.out, &art)?;
    print!("{}", render::models_table(&art));
    rec.resolve("cmle", &art.cmle_config)?;
    rec.outputs.push(a.out.clone());
    rec.primary = Some(a.out.clone());
    Ok(rec)
}

fn fit_kind(m: ModelArg) -> FitKind {
    match m {
        ModelArg::Linear => FitKind::Linear,
        ModelArg::Oprobit => FitKind::OrderedProbitHomoskedastic,
        ModelArg::Hoprobit => FitKind::OrderedProbitHeteroskedastic,
    }
}

fn estimate_names(fit: &ParametricFit) -> Vec<String> {
    let mut names = fit.coefficient_names.clone();
    let free = fit.estimates().len() - names.len();
    let first = fit.cutpoints.len() - free;
    names.extend((first..fit.cutpoints.len()).map(|i| format!("mu_{}", i + 1)));
    names
}

fn models_for(art: &ModelsArtifact, data: &Dataset) -> Result<Vec<MisclassificationModel>> {
    if !art.by_cell && data.n_cells() > 1 {
        return Err(Error::Config(
            "the latent target needs one model per covariate cell; run identify with --by-cell".into(),
        ));
    }
    if art.w_names != data.w_names() {
        return Err(Error::Config(format!(
            "models were identified with covariates {:?}, the data has {:?}",
            art.w_names,
            data.w_names()
        )));
    }
    Ok(art.cells.iter().map(|c| c.model.clone().with_cell(Some(c.w_cell.unwrap_or(0)))).collect())
}

fn estimate_cmd(a: &EstimateArgs) -> Result<RunRecord> {
    let mut rec = RunRecord { inputs: vec![a.data.clone(), a.schema.clone()], ..RunRecord::default() };
    if let Some(m) = &a.models {
        rec.inputs.push(m.clone());
    }
    guard_outputs(&rec.inputs, &[&a.out])?;
    if !(a.clamp > 0.0 && a.clamp < 0.5) {
        return Err(Error::Config("--clamp must lie in (0, 0.5)".into()));
    }
    let seed = if a.boot > 0 { Some(require_seed(a.seed, "with --boot")?) } else { a.seed };
    rec.seed = seed;
    let kind = fit_kind(a.model);
    let target = match a.target {
        TargetArg::Latent => Target::Latent,
        TargetArg::Reported => Target::Reported,
    };
    let (data, _) = rec.time("ingest", || load_data(&a.data, &a.schema))?;
    let models_art = match (target, &a.models) {
        (Target::Latent, None) => return Err(Error::Config("--models is required for the latent target".into())),
        (Target::Latent, Some(p)) => Some(artifacts::read_models(p)?),
        (Target::Reported, _) => None,
    };
    let fit_once = |d: &Dataset, models: Option<&[MisclassificationModel]>| -> Result<ParametricFit> {
        let lc = match models {
            Some(ms) => latent_conditional(ms, &d.cell_weights(), d.w_names())?,
            None => reported_conditional(d)?,
        };
        estimate(&lc, kind, target, a.clamp)
    };
    let models = models_art.as_ref().map(|m| models_for(m, &data)).transpose()?;
    let mut fit = rec.time("estimate", || fit_once(&data, models.as_deref()))?;
    let mut boot = None;
    if a.boot > 0 {
        let master = seed.expect("seed checked above");
        let stratified = data.n_cells() > 1;
        let plan = ResamplePlan::new(a.boot, master, stratified)?;
        let outcomes = rec.time("bootstrap", || {
            Ok(plan.run(|r, s| {
                let d = resample(&data, s, stratified);
                let (ms, at_boundary) = match &models_art {
                    Some(art) => {
                        let (ms, b) = refit_models(art, &d, master, r)?;
                        (Some(ms), b)
                    }
                    None => (None, false),
                };
                let f = fit_once(&d, ms.as_deref()).ok()?;
                Some(ReplicateEstimate { values: f.estimates(), at_boundary })
            }))
        })?;
        let summary = summarize(outcomes)?;
        fit.std_errors = Some(summary.std_errors.clone());
        boot = Some(BootInfo { replicates: a.boot, seed: master, stratified, summary });
    }
    let art = FitArtifact {
        schema_version: SCHEMA_VERSION,
        kind: artifacts::KIND_FIT.into(),
        model: kind,
        target,
        n: data.n(),
        clamp: a.clamp,
        estimate_names: estimate_names(&fit),
        fit,
        boot,
    };
    artifacts::write_json(&a.out, &art)?;
    print!("{}", render::fit_table(&[&art]));
    rec.outputs.push(a.out.clone());
    rec.primary = Some(a.out.clone());
    Ok(rec)
}

fn report_cmd(a: &ReportArgs) -> Result<RunRecord> {
    let mut rec = RunRecord { inputs: a.inputs.clone(), ..RunRecord::default() };
    if let Some(o) = &a.out {
        guard_outputs(&rec.inputs, &[o])?;
    }
    let arts = a.inputs.iter().map(|p| read_artifact(p)).collect::<Result<Vec<_>>>()?;
    let mut sections = Vec::new();
    let fits: Vec<&FitArtifact> = arts
        .iter()
        .filter_map(|x| match x {
            Artifact::Fit(f) => Some(f),
            _ => None,
        })
        .collect();
    for x in &arts {
        match x {
            Artifact::Tests(t) => sections.push(match a.format {
                Format::Text => render::test_table(&t.reports, &t.skipped),
                Format::Csv => render::test_csv(&t.reports)?,
            }),
            Artifact::Models(m) => sections.push(match a.format {
                Format::Text => render::models_table(m),
                Format::Csv => render::models_csv(m)?,
            }),
            Artifact::Fit(_) => {}
        }
    }
    if !fits.is_empty() {
        sections.push(match a.format {
            Format::Text => render::fit_table(&fits),
            Format::Csv => render::fit_csv(&fits)?,
        });
    }
    let text = sections.join("\n");
    match &a.out {
        Some(o) => {
            std::fs::write(o, &text).map_err(|e| Error::Data(format!("cannot write {}: {e}", o.display())))?;
            rec.outputs.push(o.clone());
            rec.primary = Some(o.clone());
        }
        None => print!("{text}"),
    }
    Ok(rec)
}

fn replay_cmd(a: &ReplayArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let cwd = std::env::current_dir()?;
    std::env::set_current_dir(&manifest.working_directory).map_err(|e| {
        Error::Data(format!("cannot enter recorded directory {}: {e}", manifest.working_directory))
    })?;
    let result = replay_in_place(&manifest, a.check);
    std::env::set_current_dir(cwd)?;
    result
}

fn replay_in_place(manifest: &RunManifest, check: bool) -> Result<()> {
    for (path, digest) in &manifest.inputs {
        if &artifacts::sha256_file(Path::new(path))? != digest {
            return Err(Error::Data(format!("input {path} changed since the recorded run")));
        }
    }
    let mut argv = vec!["misreport".to_string()];
    argv.extend(manifest.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| Error::Config(format!("recorded command line no longer parses: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Config("a replay manifest cannot replay itself".into()));
    }
    let threads = cli.threads;
    dispatch(Cli { threads: threads.or(Some(manifest.threads)), command: cli.command }, manifest.argv.clone())?;
    if check {
        let mut differing = Vec::new();
        for (path, digest) in &manifest.outputs {
            if &artifacts::sha256_file(Path::new(path))? != digest {
                differing.push(path.clone());
            }
        }
        if !differing.is_empty() {
            return Err(Error::Estimation(format!("replay outputs differ: {}", differing.join(", "))));
        }
        eprintln!("replay reproduced {} outputs byte for byte", manifest.outputs.len());
    }
    Ok(())
}
