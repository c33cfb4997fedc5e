//! The `nsum` command line.
//!
//! Every command writes a `manifest.json` beside its outputs recording the
//! command and its arguments (minus the output directory); `nsum replay`
//! reruns a manifest and reproduces the same files byte for byte.

mod svg;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use nsum_core::ard::{self, ARDataset, PairRule};
use nsum_core::diagnostics;
use nsum_core::estimator::{self, KnownPrevalence};
use nsum_core::model::{HyperConfig, NsumModel};
use nsum_core::sampler::{self, PosteriorDraws, SamplerConfig};
use nsum_core::simulator::{self, SimTemplate, StudyConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<ard::ArdError> for CliError {
    fn from(e: ard::ArdError) -> Self {
        match e {
            ard::ArdError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "nsum", version, about = "Partially pooled network scale-up estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic survey with known truth.
    Simulate(SimulateArgs),
    /// Fit the pooled model by HMC.
    Fit(FitArgs),
    /// Scale posterior draws and summarise population sizes.
    Estimate(EstimateArgs),
    /// Compare the pooled and standard estimators over a grid of sample sizes.
    Study(StudyArgs),
    /// Rerun a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 150)]
    pub municipalities: usize,
    /// Respondents per municipality.
    #[arg(long, default_value_t = 24)]
    pub respondents: usize,
    /// Population of every municipality.
    #[arg(long, default_value_t = 50_000)]
    pub population: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Count table (CSV).
    #[arg(long)]
    pub ard: PathBuf,
    /// Metadata sidecar (JSON).
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub chains: usize,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 3000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub target_accept: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_steps: usize,
    /// Fill one-sided reports of a linked pair of groups before fitting.
    #[arg(long)]
    pub impute_pairs: bool,
    /// Group ids `a,b` of the pair; defaults to the metadata pair rule.
    #[arg(long, value_delimiter = ',')]
    pub pair: Option<Vec<usize>>,
    /// Fill for a missing `b` count, per reported `a`.
    #[arg(long)]
    pub b_per_a: Option<f64>,
    /// Fill for a missing `a` count, per reported `b`.
    #[arg(long)]
    pub a_per_b: Option<f64>,
    /// Parameters to export as a trace, comma separated (e.g. `mu_rho[0],w[5]`).
    #[arg(long, value_delimiter = ',')]
    pub trace: Vec<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    /// Binary draws written by `fit`.
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StudyArgs {
    /// Respondents per municipality, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,30,50,100")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, default_value_t = 150)]
    pub municipalities: usize,
    #[arg(long, default_value_t = 2)]
    pub chains: usize,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 3000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "lowercase")]
pub enum Recorded {
    Simulate(SimulateArgs),
    Fit(FitArgs),
    Estimate(EstimateArgs),
    Study(StudyArgs),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    #[serde(flatten)]
    recorded: Recorded,
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("NSUM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("NSUM_THREADS must be a positive integer, got `{v}`")))?;
        // A second call in the same process (tests) finds the pool already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => run_recorded(Recorded::Simulate(a.clone()), &a.out),
        Command::Fit(a) => run_recorded(Recorded::Fit(absolute_fit(a.clone())?), &a.out),
        Command::Estimate(a) => run_recorded(Recorded::Estimate(absolute_estimate(a.clone())?), &a.out),
        Command::Study(a) => run_recorded(Recorded::Study(a.clone()), &a.out),
        Command::Replay(a) => {
            let text = fs::read_to_string(&a.manifest)
                .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", a.manifest.display())))?;
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("malformed manifest: {e}")))?;
            run_recorded(manifest.recorded, &a.out)
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<PathBuf, CliError> {
    fs::canonicalize(path)
        .ok()
        .filter(|p| p.is_file())
        .ok_or_else(|| CliError::Usage(format!("{what} file {} does not exist", path.display())))
}

fn absolute_fit(mut a: FitArgs) -> Result<FitArgs, CliError> {
    a.ard = require_file(&a.ard, "count table")?;
    a.meta = require_file(&a.meta, "metadata")?;
    Ok(a)
}

fn absolute_estimate(mut a: EstimateArgs) -> Result<EstimateArgs, CliError> {
    a.draws = require_file(&a.draws, "draws")?;
    a.meta = require_file(&a.meta, "metadata")?;
    Ok(a)
}

fn run_recorded(recorded: Recorded, out: &Path) -> Result<(), CliError> {
    if out.as_os_str().is_empty() {
        return Err(CliError::Usage("--out is required".into()));
    }
    fs::create_dir_all(out)?;
    let mut outputs = Outputs::new(out);
    match &recorded {
        Recorded::Simulate(a) => cmd_simulate(a, &mut outputs)?,
        Recorded::Fit(a) => cmd_fit(a, &mut outputs)?,
        Recorded::Estimate(a) => cmd_estimate(a, &mut outputs)?,
        Recorded::Study(a) => cmd_study(a, &mut outputs)?,
    }
    let manifest = Manifest {
        tool: "nsum".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        recorded,
    };
    outputs.write_json(MANIFEST, &manifest)?;
    outputs.commit();
    Ok(())
}

/// Files written by a command, removed again unless the command succeeds.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            committed: false,
        }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path)?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    /// Register a file written by someone else.
    fn track(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        path
    }

    fn with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Io(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    fn write_str(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.with(name, |w| Ok(w.write_all(text.as_bytes())?))
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[derive(Serialize)]
struct Truth<'a> {
    params: &'a simulator::TrueParams,
    /// `[k][m]`
    sizes: Vec<Vec<f64>>,
}

fn cmd_simulate(a: &SimulateArgs, out: &mut Outputs) -> Result<(), CliError> {
    if a.municipalities == 0 || a.respondents == 0 {
        return Err(CliError::Usage("--municipalities and --respondents must be positive".into()));
    }
    let template = SimTemplate {
        population: a.population,
        ..SimTemplate::default()
    };
    let assignment = simulator::balanced_assignment(a.municipalities, a.respondents);
    let params = simulator::draw_true_params(&template, a.municipalities, assignment.len(), a.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let data = simulator::simulate_ard(&params, &assignment, a.seed).map_err(data_err)?;
    out.with("ard.csv", |w| Ok(ard::write_ard(&data, w)?))?;
    ard::save_metadata(data.metadata(), &out.track("meta.json"))?;
    out.write_json(
        "truth.json",
        &Truth {
            params: &params,
            sizes: params.true_sizes(),
        },
    )?;
    eprintln!(
        "simulated {} respondents in {} municipalities",
        data.n_respondents(),
        data.n_municipalities()
    );
    Ok(())
}

fn pair_rule(a: &FitArgs, data: &ARDataset) -> Result<PairRule, CliError> {
    let from_meta = data.metadata().pair_rule;
    let (group_a, group_b) = match (&a.pair, from_meta) {
        (Some(p), _) if p.len() == 2 => (p[0], p[1]),
        (Some(_), _) => return Err(CliError::Usage("--pair takes exactly two group ids `a,b`".into())),
        (None, Some(r)) => (r.group_a, r.group_b),
        (None, None) => {
            return Err(CliError::Usage(
                "--impute-pairs needs --pair or a pair_rule in the metadata".into(),
            ))
        }
    };
    let b_per_a = a.b_per_a.or(from_meta.map(|r| r.b_per_a));
    let a_per_b = a.a_per_b.or(from_meta.map(|r| r.a_per_b));
    let (Some(b_per_a), Some(a_per_b)) = (b_per_a, a_per_b) else {
        return Err(CliError::Usage(
            "--impute-pairs needs both fill constants (--b-per-a and --a-per-b)".into(),
        ));
    };
    let rule = PairRule {
        group_a,
        group_b,
        b_per_a,
        a_per_b,
    };
    rule.validate(data.n_groups())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(rule)
}

#[derive(Serialize)]
struct FitSummary {
    sampler: SamplerConfig,
    imputation: Option<ard::ImputationReport>,
    divergences: usize,
    warmup_divergences: Vec<usize>,
    mean_accept_stat: f64,
    max_rhat: f64,
    min_ess: f64,
}

fn cmd_fit(a: &FitArgs, out: &mut Outputs) -> Result<(), CliError> {
    let cfg = SamplerConfig {
        chains: a.chains,
        iterations: a.iters,
        warmup: a.warmup,
        target_accept: a.target_accept,
        leapfrog_max_steps: a.max_steps,
        seed: a.seed,
        ..SamplerConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut data = ard::load_ard(&a.ard, &a.meta)?;
    let mut imputation = None;
    if a.impute_pairs {
        let rule = pair_rule(a, &data)?;
        let (imputed, report) = ard::impute_paired_counts(&data, &rule)?;
        eprintln!(
            "imputed {} cells of group {} and {} of group {}",
            report.filled_b_from_a, rule.group_b, report.filled_a_from_b, rule.group_a
        );
        data = imputed;
        imputation = Some(report);
    }
    let model = NsumModel::from_dataset(&data, HyperConfig::default()).map_err(data_err)?;
    let trace: Vec<usize> = a
        .trace
        .iter()
        .map(|name| {
            model
                .layout()
                .param_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::Usage(format!("unknown parameter `{name}` in --trace")))
        })
        .collect::<Result<_, _>>()?;
    eprintln!(
        "fitting {} parameters: {} chains x {} iterations ({} warmup)",
        model.layout().dim(),
        cfg.chains,
        cfg.iterations,
        cfg.warmup
    );
    let draws = sampler::sample(&model, &cfg).map_err(data_err)?;
    let diag = diagnostics::summarize(&draws);

    out.with("draws.bin", |w| draws.write_binary(w).map_err(data_err))?;
    out.with("draws.csv", |w| draws.write_csv(w).map_err(data_err))?;
    out.with("stats.csv", |w| draws.write_stats_csv(w).map_err(data_err))?;
    out.with("diagnostics.csv", |w| Ok(diagnostics::write_diagnostics_csv(&diag, w)?))?;
    if !trace.is_empty() {
        out.with("trace.csv", |w| Ok(diagnostics::write_trace_csv(&draws, &trace, w)?))?;
    }
    let max_rhat = diag.iter().map(|d| d.rhat).fold(f64::NEG_INFINITY, f64::max);
    let min_ess = diag.iter().map(|d| d.ess).fold(f64::INFINITY, f64::min);
    let summary = FitSummary {
        sampler: cfg,
        imputation,
        divergences: draws.divergences(),
        warmup_divergences: draws.warmup_divergences().to_vec(),
        mean_accept_stat: draws.mean_accept_stat(),
        max_rhat,
        min_ess,
    };
    out.write_json("fit_summary.json", &summary)?;
    eprintln!(
        "done: max R-hat {max_rhat:.3}, min ESS {min_ess:.0}, {} divergent transitions",
        summary.divergences
    );
    Ok(())
}

#[derive(Serialize)]
struct Headline {
    group: String,
    total: estimator::Summary,
    formatted: String,
}

#[derive(Serialize)]
struct EstimateSummary<'a> {
    sampler: &'a SamplerConfig,
    draws: usize,
    known_cells: usize,
    clamped_cells: usize,
    divergences: usize,
    totals: Vec<Headline>,
}

fn cmd_estimate(a: &EstimateArgs, out: &mut Outputs) -> Result<(), CliError> {
    let draws = PosteriorDraws::read_binary(std::io::BufReader::new(File::open(&a.draws)?)).map_err(data_err)?;
    let meta = ard::load_metadata(&a.meta)?;
    let layout = draws
        .layout()
        .ok_or_else(|| CliError::Data("draws carry no model layout".into()))?;
    if layout.groups != meta.n_groups() || layout.munis != meta.n_municipalities() {
        return Err(CliError::Data(format!(
            "draws cover {} groups x {} municipalities but metadata has {} x {}",
            layout.groups,
            layout.munis,
            meta.n_groups(),
            meta.n_municipalities()
        )));
    }
    let known = KnownPrevalence::from_metadata(&meta).map_err(data_err)?;
    let scaled = estimator::scale_draws(&draws, &known).map_err(data_err)?;
    let table = estimator::estimates_from_draws(&scaled, &meta.municipalities).map_err(data_err)?;
    let hyper = estimator::hyper_summary(&draws).map_err(data_err)?;
    let names: Vec<String> = meta.groups.iter().map(|g| g.name.clone()).collect();

    out.with("estimates.csv", |w| Ok(table.write_csv(&names, w)?))?;
    out.with("totals.csv", |w| Ok(table.write_totals_csv(&names, w)?))?;
    out.with("hyper.csv", |w| Ok(estimator::write_hyper_csv(&hyper, &names, w)?))?;
    for (k, name) in names.iter().enumerate() {
        let cells: Vec<_> = (0..table.munis()).map(|m| table.cell(k, m).clone()).collect();
        let labels: Vec<String> = meta.municipalities.iter().map(|m| m.name.clone()).collect();
        let doc = svg::caterpillar(name, &cells, &labels);
        out.write_str(&format!("caterpillar_{k}_{}.svg", svg::file_safe(name)), &doc)?;
    }
    out.write_str("hyper.svg", &svg::hyper_intervals(&hyper, &names))?;

    let totals = names
        .iter()
        .zip(table.totals())
        .map(|(name, s)| Headline {
            group: name.clone(),
            total: *s,
            formatted: estimator::format_headline(s),
        })
        .collect::<Vec<_>>();
    for h in totals.iter().filter(|h| !meta.groups.iter().any(|g| g.known && g.name == h.group)) {
        eprintln!("{}: {}", h.group, h.formatted);
    }
    if scaled.clamped_cells() > 0 {
        eprintln!(
            "warning: {} (draw, cell) prevalences exceeded 1 and were clamped",
            scaled.clamped_cells()
        );
    }
    let summary = EstimateSummary {
        sampler: draws.config(),
        draws: draws.n_draws(),
        known_cells: known.cells().len(),
        clamped_cells: scaled.clamped_cells(),
        divergences: draws.divergences(),
        totals,
    };
    out.write_json("summary.json", &summary)
}

#[derive(Serialize)]
struct StudySummary<'a> {
    config: &'a StudyConfig,
    failures: &'a [simulator::CellFailure],
}

fn cmd_study(a: &StudyArgs, out: &mut Outputs) -> Result<(), CliError> {
    let cfg = StudyConfig {
        sizes: a.sizes.clone(),
        replicates: a.replicates,
        municipalities: a.municipalities,
        template: SimTemplate::default(),
        sampler: SamplerConfig {
            chains: a.chains,
            iterations: a.iters,
            warmup: a.warmup,
            ..SamplerConfig::default()
        },
        hyper: HyperConfig::default(),
        seed: a.seed,
    };
    let result = simulator::run_simulation_study(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    out.with("study.csv", |w| Ok(result.write_csv(w)?))?;
    out.with("study_all_groups.csv", |w| Ok(result.write_all_groups_csv(w)?))?;
    out.write_str("study.svg", &svg::study_boxplot(&result, &cfg.sizes))?;
    out.write_json(
        "study_summary.json",
        &StudySummary {
            config: &cfg,
            failures: &result.failures,
        },
    )?;
    for f in &result.failures {
        eprintln!(
            "cell size={} replicate={} ({}) failed: {}",
            f.size, f.replicate, f.model, f.message
        );
    }
    eprintln!("{} rows, {} failed cells", result.rows.len(), result.failures.len());
    Ok(())
}
