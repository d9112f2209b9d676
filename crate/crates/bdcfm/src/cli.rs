//! Batch front end: flat-file configuration, CSV panel ingestion, chain
//! persistence, and the simulate / fit / summarize workflow.
//!
//! Each invocation runs one command against an output directory. `simulate`
//! writes `data.csv` and `truth.json`; `fit` ingests a panel, builds
//! empirical-Bayes priors, runs the sampler, and spools the chain into
//! `chains/`; `summarize` reloads a chain directory and writes
//! `report.json`, scoring against the truth file when one is available.
//! Every failure exits non-zero with one machine-readable JSON object on
//! standard error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ebinit::empirical_bayes_init;
use crate::error::{Error, Result};
use crate::gibbs::{run_gibbs, SamplerConfig};
use crate::model::{ChainOutput, ChainStorage, Dataset, ModelDims};
use crate::numkit::RngStream;
use crate::posterior::{self, AssignmentTable, SummaryReport};
use crate::simgen::{simulate_dataset, SimConfig, SimTruth};

/// Stream id feeding the empirical-Bayes clustering; far from both the
/// generator's streams and the sampler's per-sweep range.
const EB_STREAM: u64 = 1 << 30;

const DATA_FILE: &str = "data.csv";
const TRUTH_FILE: &str = "truth.json";
const CHAIN_DIR: &str = "chains";
const META_FILE: &str = "meta.json";
const Z_PROBS_FILE: &str = "z_probs.csv";
const MODE_PATH_FILE: &str = "mode_path.csv";
const REPORT_FILE: &str = "report.json";

/// Which workflow step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Fit,
    Summarize,
}

impl Mode {
    fn parse(text: &str) -> Result<Mode> {
        match text {
            "simulate" => Ok(Mode::Simulate),
            "fit" => Ok(Mode::Fit),
            "summarize" => Ok(Mode::Summarize),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected simulate, fit, or summarize"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Fit => "fit",
            Mode::Summarize => "summarize",
        }
    }
}

/// The configuration file as written: a flat key = value table in which
/// everything is optional. Command-line flags override these values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    mode: Option<String>,
    clusters: Option<usize>,
    factors: Option<usize>,
    subjects: Option<usize>,
    times: Option<usize>,
    iterations: Option<usize>,
    burn_in: Option<usize>,
    thin: Option<usize>,
    seed: Option<u64>,
    parallel: Option<bool>,
    standardize: Option<bool>,
    include_initial_prob_in_z1: Option<bool>,
    data: Option<PathBuf>,
    truth: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// One command's fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    /// Number of clusters to fit.
    pub clusters: usize,
    /// Number of factors to fit.
    pub factors: usize,
    /// Panel size for `simulate`.
    pub subjects: usize,
    pub times: usize,
    pub sampler: SamplerConfig,
    /// Z-score each variable at ingestion. Defaults on for `fit` and off
    /// otherwise, so simulated data stays in model units.
    pub standardize: bool,
    pub data: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    /// Merge defaults, the optional config file, and flag overrides
    /// (highest precedence), then validate.
    pub fn resolve(mode: Mode, file: &FileConfig, flags: &CommonArgs) -> Result<RunConfig> {
        if let Some(text) = &file.mode {
            Mode::parse(text)?; // validated even though the subcommand wins
        }
        let defaults = SamplerConfig::default();
        let sampler = SamplerConfig {
            total_iterations: file.iterations.unwrap_or(defaults.total_iterations),
            burn_in: file.burn_in.unwrap_or(defaults.burn_in),
            thin: file.thin.unwrap_or(defaults.thin),
            seed: flags.seed.or(file.seed).unwrap_or(defaults.seed),
            parallel_subjects: file.parallel.unwrap_or(defaults.parallel_subjects),
            include_initial_prob_in_z1: file
                .include_initial_prob_in_z1
                .unwrap_or(defaults.include_initial_prob_in_z1),
        };
        let config = RunConfig {
            mode,
            clusters: file.clusters.unwrap_or(4),
            factors: file.factors.unwrap_or(3),
            subjects: file.subjects.unwrap_or(200),
            times: file.times.unwrap_or(5),
            sampler,
            standardize: file.standardize.unwrap_or(mode == Mode::Fit),
            data: flags.data.clone().or_else(|| file.data.clone()),
            truth: flags.truth.clone().or_else(|| file.truth.clone()),
            out: flags
                .out
                .clone()
                .or_else(|| file.out.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.factors == 0 {
            return Err(Error::Config(
                "clusters and factors must both be at least 1".into(),
            ));
        }
        if self.subjects == 0 || self.times == 0 {
            return Err(Error::Config(
                "subjects and times must both be at least 1".into(),
            ));
        }
        self.sampler.validate()?;
        if self.mode == Mode::Fit && self.sampler.n_kept() == 0 {
            return Err(Error::Config(format!(
                "no draws would be stored: {} iterations after {} burn-in at thin {}",
                self.sampler.total_iterations, self.sampler.burn_in, self.sampler.thin
            )));
        }
        Ok(())
    }

    /// Digest of the settings that determine what a run computes (paths
    /// are excluded: where files live never changes their content).
    /// Recorded in `meta.json` so a rerun can be checked against the
    /// settings that produced a chain.
    fn sha256(&self) -> String {
        let mut text = String::new();
        let s = &self.sampler;
        let _ = write!(
            text,
            "mode={}\nclusters={}\nfactors={}\nsubjects={}\ntimes={}\niterations={}\n\
             burn_in={}\nthin={}\nseed={}\nparallel={}\nstandardize={}\n\
             include_initial_prob_in_z1={}\n",
            self.mode.name(),
            self.clusters,
            self.factors,
            self.subjects,
            self.times,
            s.total_iterations,
            s.burn_in,
            s.thin,
            s.seed,
            s.parallel_subjects,
            self.standardize,
            s.include_initial_prob_in_z1,
        );
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Provenance record written next to the chain files.
#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    tool: String,
    version: String,
    command: String,
    seed: u64,
    config_sha256: String,
    dims: ModelDims,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    n_stored: usize,
    standardized: bool,
    include_initial_prob_in_z1: bool,
    parallel: bool,
    data_file: String,
    wall_time_seconds: f64,
}

#[derive(Parser)]
#[command(name = "bdcfm", version)]
#[command(about = "Dynamic clustering factor models: simulate panels, fit by Gibbs sampling, summarize chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic panel and its generating truth into the output directory
    Simulate(CommonArgs),
    /// Ingest a panel CSV, build empirical-Bayes priors, and run the sampler
    Fit(CommonArgs),
    /// Summarize a fitted chain directory into report.json
    Summarize(CommonArgs),
}

/// Flags shared by every subcommand; each overrides its config-file key.
#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Panel CSV to fit
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Truth JSON for calibration scoring
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Parse the process arguments, run the selected command, and report any
/// failure as one JSON object on standard error.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match &cli.command {
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Fit(a) => (Mode::Fit, a),
        Command::Summarize(a) => (Mode::Summarize, a),
    };
    let run = || -> Result<()> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let config = RunConfig::resolve(mode, &file, args)?;
        run_command(&config)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

/// One failure as a machine-readable JSON object.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": { "code": e.code(), "message": e.to_string() }
    })
    .to_string()
}

/// Run one resolved command against its output directory.
pub fn run_command(config: &RunConfig) -> Result<()> {
    match config.mode {
        Mode::Simulate => run_simulate(config),
        Mode::Fit => run_fit(config),
        Mode::Summarize => run_summarize(config),
    }
}

fn run_simulate(config: &RunConfig) -> Result<()> {
    let mut sim = SimConfig::four_cluster_benchmark(config.sampler.seed);
    sim.dims.n_subjects = config.subjects;
    sim.dims.n_times = config.times;
    let (data, truth) = simulate_dataset(&sim)?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let data_path = config.out.join(DATA_FILE);
    write_data_csv(&data, &data_path)?;
    let truth_path = config.out.join(TRUTH_FILE);
    fs::write(&truth_path, truth.to_json_string()?).map_err(|e| Error::io(&truth_path, e))?;
    println!(
        "simulated {} subjects x {} times x {} variables into {} and {}",
        data.n_subjects(),
        data.n_times(),
        data.n_vars(),
        data_path.display(),
        truth_path.display(),
    );
    Ok(())
}

fn run_fit(config: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let data_path = match &config.data {
        Some(path) => path.clone(),
        None => {
            let fallback = config.out.join(DATA_FILE);
            if !fallback.exists() {
                return Err(Error::Config(format!(
                    "no panel to fit: pass --data or place {DATA_FILE} in {}",
                    config.out.display()
                )));
            }
            fallback
        }
    };
    let data = ingest_csv(&data_path, config.standardize)?;
    let init = empirical_bayes_init(
        &data,
        config.factors,
        config.clusters,
        &RngStream::new(config.sampler.seed, EB_STREAM),
    )?;
    let chain_dir = config.out.join(CHAIN_DIR);
    let chain = run_gibbs(
        &data,
        &init.priors,
        init.state,
        &config.sampler,
        ChainStorage::Disk(chain_dir.clone()),
    )?;
    let table = posterior::assignment_probabilities(&chain)?;
    write_z_probs(&table, data.subject_ids(), &chain_dir.join(Z_PROBS_FILE))?;
    write_mode_path(&table, data.subject_ids(), &chain_dir.join(MODE_PATH_FILE))?;
    let meta = Meta {
        tool: "bdcfm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: config.mode.name().into(),
        seed: config.sampler.seed,
        config_sha256: config.sha256(),
        dims: *chain.dims(),
        iterations: config.sampler.total_iterations,
        burn_in: config.sampler.burn_in,
        thin: config.sampler.thin,
        n_stored: chain.n_stored(),
        standardized: config.standardize,
        include_initial_prob_in_z1: config.sampler.include_initial_prob_in_z1,
        parallel: config.sampler.parallel_subjects,
        data_file: data_path.display().to_string(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let meta_path = chain_dir.join(META_FILE);
    let meta_text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("could not encode {META_FILE}: {e}")))?;
    fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;
    println!(
        "stored {} draws from {} sweeps into {}",
        chain.n_stored(),
        config.sampler.total_iterations,
        chain_dir.display(),
    );
    Ok(())
}

fn run_summarize(config: &RunConfig) -> Result<()> {
    let chain_dir = config.out.join(CHAIN_DIR);
    let meta_path = chain_dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingChains(chain_dir));
    }
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
    let z_counts = read_z_counts(&chain_dir.join(Z_PROBS_FILE), &meta.dims, meta.n_stored)?;
    let chain = ChainOutput::reopen(&chain_dir, meta.dims, z_counts)?;
    let mut report = posterior::summarize(&chain)?;

    let truth_path = match &config.truth {
        Some(path) => Some(path.clone()),
        None => {
            let fallback = config.out.join(TRUTH_FILE);
            fallback.exists().then_some(fallback)
        }
    };
    if let Some(path) = &truth_path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let truth = SimTruth::from_json_str(&text)?;
        report.truth = Some(posterior::compare_with_truth(&chain, &truth)?);
    }

    let report_path = config.out.join(REPORT_FILE);
    write_report(&report, &meta, &report_path)?;
    match &report.truth {
        Some(t) => println!(
            "wrote {} (coverage {:.3}, misclassification {:.4})",
            report_path.display(),
            t.coverage.fraction,
            t.misclassification,
        ),
        None => println!("wrote {}", report_path.display()),
    }
    Ok(())
}

/// Read a long-format panel CSV with header `subject,time,<var...>`. Rows
/// may arrive in any order; every subject must cover the same set of times.
/// With `standardize` set, each variable is z-scored over all cells.
pub fn ingest_csv(path: &Path, standardize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Config(format!("{}: {e}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 3
        || !headers[0].eq_ignore_ascii_case("subject")
        || !headers[1].eq_ignore_ascii_case("time")
    {
        return Err(Error::Config(format!(
            "{}: expected header subject,time,<variable...>, got {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let n_vars = headers.len() - 2;

    let mut subjects: Vec<String> = Vec::new();
    let mut subject_index: HashMap<String, usize> = HashMap::new();
    let mut times: Vec<i64> = Vec::new();
    let mut cells: HashMap<(usize, i64), Vec<f64>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Config(format!(
                "{}: record {:?} has {} fields, expected {}",
                path.display(),
                record.position().map(|p| p.line()).unwrap_or(0),
                record.len(),
                headers.len()
            )));
        }
        let subject = record[0].to_string();
        let time: i64 = record[1].parse().map_err(|_| {
            Error::NonFiniteValue(format!(
                "{}: time {:?} for subject {subject}",
                path.display(),
                &record[1]
            ))
        })?;
        let mut row = Vec::with_capacity(n_vars);
        for (k, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::NonFiniteValue(format!(
                    "subject {subject}, time {time}, column {}",
                    &headers[k + 2]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(format!(
                    "subject {subject}, time {time}, column {}",
                    &headers[k + 2]
                )));
            }
            row.push(v);
        }
        let si = *subject_index.entry(subject.clone()).or_insert_with(|| {
            subjects.push(subject.clone());
            subjects.len() - 1
        });
        if !times.contains(&time) {
            times.push(time);
        }
        if cells.insert((si, time), row).is_some() {
            return Err(Error::DuplicateCell { subject, time });
        }
    }
    times.sort_unstable();

    let mut missing: Vec<(String, i64)> = Vec::new();
    for (si, subject) in subjects.iter().enumerate() {
        for &t in &times {
            if !cells.contains_key(&(si, t)) {
                missing.push((subject.clone(), t));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompletePanel(missing));
    }

    let mut values = Vec::with_capacity(subjects.len() * times.len() * n_vars);
    for si in 0..subjects.len() {
        for &t in &times {
            values.extend_from_slice(&cells[&(si, t)]);
        }
    }
    let dataset = Dataset::new(subjects, times.len(), n_vars, values)?;
    if standardize {
        Ok(dataset.standardized()?.0)
    } else {
        Ok(dataset)
    }
}

/// Shortest float text that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Write a panel as `subject,time,var1..varR` with times numbered from 1.
pub fn write_data_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut text = String::from("subject,time");
    for r in 1..=data.n_vars() {
        let _ = write!(text, ",var{r}");
    }
    text.push('\n');
    for (i, id) in data.subject_ids().iter().enumerate() {
        for t in 0..data.n_times() {
            let _ = write!(text, "{id},{}", t + 1);
            for v in data.obs(i, t) {
                let _ = write!(text, ",{}", fmt_f64(*v));
            }
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write per-cell assignment probabilities in long format:
/// `subject,time,cluster,probability`, clusters numbered from 1.
fn write_z_probs(table: &AssignmentTable, ids: &[String], path: &Path) -> Result<()> {
    let mut text = String::from("subject,time,cluster,probability\n");
    for (i, id) in ids.iter().enumerate() {
        for t in 0..table.dims.n_times {
            let cell = table.dims.cell(i, t);
            for g in 0..table.dims.n_clusters {
                let _ = writeln!(
                    text,
                    "{id},{},{},{}",
                    t + 1,
                    g + 1,
                    fmt_f64(table.probabilities[(cell, g)])
                );
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the modal cluster path: `subject,time,cluster`.
fn write_mode_path(table: &AssignmentTable, ids: &[String], path: &Path) -> Result<()> {
    let mut text = String::from("subject,time,cluster\n");
    for (i, id) in ids.iter().enumerate() {
        for t in 0..table.dims.n_times {
            let cell = table.dims.cell(i, t);
            let _ = writeln!(text, "{id},{},{}", t + 1, table.mode_path[cell] + 1);
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rebuild the per-cell assignment counts from a written probability table.
fn read_z_counts(path: &Path, dims: &ModelDims, n_stored: usize) -> Result<Vec<u64>> {
    if !path.exists() {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        return Err(Error::MissingChains(dir));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut counts = vec![0u64; dims.n_cells() * dims.n_clusters];
    let mut seen = vec![false; counts.len()];
    let mut subjects: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let bad = |what: &str| {
            Error::Config(format!("{}: line {}: {what}", path.display(), lineno + 1))
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad("expected subject,time,cluster,probability"));
        }
        let next = subjects.len();
        let si = *subjects.entry(fields[0].to_string()).or_insert(next);
        let t: usize = fields[1].parse().map_err(|_| bad("unreadable time"))?;
        let g: usize = fields[2].parse().map_err(|_| bad("unreadable cluster"))?;
        let p: f64 = fields[3].parse().map_err(|_| bad("unreadable probability"))?;
        if si >= dims.n_subjects
            || !(1..=dims.n_times).contains(&t)
            || !(1..=dims.n_clusters).contains(&g)
        {
            return Err(bad("cell outside the panel recorded in meta.json"));
        }
        let idx = dims.cell(si, t - 1) * dims.n_clusters + (g - 1);
        if seen[idx] {
            return Err(bad("duplicate cell"));
        }
        seen[idx] = true;
        counts[idx] = (p * n_stored as f64).round() as u64;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Config(format!(
            "{}: probability table does not cover every (subject, time, cluster)",
            path.display()
        )));
    }
    Ok(counts)
}

fn write_report(report: &SummaryReport, meta: &Meta, path: &Path) -> Result<()> {
    let body = serde_json::json!({
        "tool": meta.tool,
        "version": meta.version,
        "seed": meta.seed,
        "n_stored": meta.n_stored,
        "dims": meta.dims,
        "parameters": report.parameters,
        "truth_comparison": report.truth,
    });
    let text = serde_json::to_string_pretty(&body)
        .map_err(|e| Error::Config(format!("could not encode {REPORT_FILE}: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
