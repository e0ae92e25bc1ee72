//! Command line front end: flat `key=value` arguments, an optional config
//! file, deterministic CSV/JSON artifacts and a one-screen text summary.
//!
//! Grammar: `homog <command> [key=value ...]`, where the command may also be
//! spelled `command=<name>`. Flags use the config-file syntax verbatim, so
//! any invocation can be copied into a file and replayed with `config=FILE`;
//! explicit flags override file values (with a warning on stderr).
//!
//! Every run writes `<out>/<command>.csv` and `<out>/<command>.json`. The
//! JSON document always has the shape `{config, results, timings}`: `config`
//! echoes the fully resolved parameters, `results` is the command-specific
//! payload, and wall-clock measurements live only under `timings`. With a
//! fixed config, `config` and `results` (and every CSV column except the
//! wall-time ones) are byte-identical across runs and thread budgets.
//!
//! Exit codes by failure category: 0 success, 2 config, 3 coverage,
//! 4 solver, 5 statistics, 6 io.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::cell::{verify_lemma_properties, CellError, LemmaDiagnostics};
use crate::dirichlet::{error_experiment, write_dirichlet_csv, BoundaryData, DirichletError};
use crate::field::{sample_seed, CheckerboardField, FieldError, MarginalLaw, TriadicCube};
use crate::grid::{BoxDomain, GridError};
use crate::matrix::SymMat;
use crate::norms::{check_max_moment, NormError};
use crate::sparse::SolveError;
use crate::stats::{
    attach_omega, check_monotonicity, convergence_study, run_scale_study, suppressive_profile,
    write_study_csv, StatsError,
};

/// Failure categories, each with a fixed process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad or missing parameters, unknown keys, malformed values.
    Config,
    /// A coefficient was requested outside the sampled extent.
    Coverage,
    /// A linear solve or quadrature failed to converge.
    Solver,
    /// A mathematical identity or statistical bound failed.
    Statistics,
    /// Filesystem trouble reading or writing artifacts.
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Coverage => 3,
            ErrorCategory::Solver => 4,
            ErrorCategory::Statistics => 5,
            ErrorCategory::Io => 6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Coverage => "coverage",
            ErrorCategory::Solver => "solver",
            ErrorCategory::Statistics => "statistics",
            ErrorCategory::Io => "io",
        }
    }
}

/// A categorized front-end error; printed as `error[category]: message`.
#[derive(Debug)]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { category: ErrorCategory::Config, message: message.into() }
    }

    fn statistics(message: impl Into<String>) -> Self {
        CliError { category: ErrorCategory::Statistics, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        CliError { category: ErrorCategory::Io, message: message.into() }
    }
}

fn category_of_field(e: &FieldError) -> ErrorCategory {
    match e {
        FieldError::Coverage(_) => ErrorCategory::Coverage,
        FieldError::Quadrature(_) => ErrorCategory::Solver,
        _ => ErrorCategory::Config,
    }
}

fn category_of_grid(e: &GridError) -> ErrorCategory {
    match e {
        GridError::Field(f) => category_of_field(f),
        GridError::Solve(_) => ErrorCategory::Solver,
        _ => ErrorCategory::Config,
    }
}

fn category_of_cell(e: &CellError) -> ErrorCategory {
    match e {
        CellError::Grid(g) => category_of_grid(g),
        CellError::Field(f) => category_of_field(f),
        CellError::Inconsistent(_) => ErrorCategory::Statistics,
    }
}

fn category_of_stats(e: &StatsError) -> ErrorCategory {
    match e {
        StatsError::Sample { source, .. } => category_of_cell(source),
        StatsError::Cell(c) => category_of_cell(c),
        StatsError::Field(f) => category_of_field(f),
        StatsError::Inconsistent(_) => ErrorCategory::Statistics,
        StatsError::Io(_) => ErrorCategory::Io,
    }
}

fn category_of_norm(e: &NormError) -> ErrorCategory {
    match e {
        NormError::Grid(g) => category_of_grid(g),
        NormError::Cell(c) => category_of_cell(c),
        NormError::Field(f) => category_of_field(f),
        NormError::Solve(_) => ErrorCategory::Solver,
        NormError::NonHarmonic(_) | NormError::MomentBound { .. } => ErrorCategory::Statistics,
        NormError::Mismatch(_) => ErrorCategory::Config,
    }
}

fn category_of_dirichlet(e: &DirichletError) -> ErrorCategory {
    match e {
        DirichletError::Grid(g) => category_of_grid(g),
        DirichletError::Cell(c) => category_of_cell(c),
        DirichletError::Field(f) => category_of_field(f),
        DirichletError::Norm(n) => category_of_norm(n),
        DirichletError::Stats(s) => category_of_stats(s),
        DirichletError::Io(_) => ErrorCategory::Io,
        DirichletError::Sample { source, .. } => category_of_dirichlet(source),
        DirichletError::Resolution { .. }
        | DirichletError::Cutoff { .. }
        | DirichletError::Config(_) => ErrorCategory::Config,
    }
}

macro_rules! cli_error_from {
    ($ty:ty, $cat:path) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError { category: $cat(&e), message: e.to_string() }
            }
        }
    };
}

cli_error_from!(FieldError, category_of_field);
cli_error_from!(GridError, category_of_grid);
cli_error_from!(CellError, category_of_cell);
cli_error_from!(StatsError, category_of_stats);
cli_error_from!(NormError, category_of_norm);
cli_error_from!(DirichletError, category_of_dirichlet);

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        CliError { category: ErrorCategory::Solver, message: e.to_string() }
    }
}

/// The six supported commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckInvariants,
    StudyCell,
    StudyConvergence,
    StudyDirichlet,
    SuppressiveProfile,
    MaxMoment,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckInvariants => "check-invariants",
            Command::StudyCell => "study-cell",
            Command::StudyConvergence => "study-convergence",
            Command::StudyDirichlet => "study-dirichlet",
            Command::SuppressiveProfile => "suppressive-profile",
            Command::MaxMoment => "max-moment",
        }
    }

    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "check-invariants" => Ok(Command::CheckInvariants),
            "study-cell" => Ok(Command::StudyCell),
            "study-convergence" => Ok(Command::StudyConvergence),
            "study-dirichlet" => Ok(Command::StudyDirichlet),
            "suppressive-profile" => Ok(Command::SuppressiveProfile),
            "max-moment" => Ok(Command::MaxMoment),
            other => Err(CliError::config(format!(
                "unknown command `{other}` (expected one of check-invariants, study-cell, \
                 study-convergence, study-dirichlet, suppressive-profile, max-moment)"
            ))),
        }
    }

    /// Default `n` key per command; empty means the command ignores scales.
    fn default_scales(self) -> &'static str {
        match self {
            Command::CheckInvariants => "1",
            Command::StudyCell => "3",
            Command::StudyConvergence => "0..3",
            Command::StudyDirichlet => "1..3",
            Command::SuppressiveProfile => "4",
            Command::MaxMoment => "",
        }
    }
}

const KNOWN_KEYS: [&str; 18] = [
    "command", "config", "law", "dim", "n", "N", "res", "seed", "out", "threads", "box", "f",
    "r_grid", "probes", "count", "power", "beta_prime", "gamma_prime",
];

const ALLOWED_RES: [usize; 4] = [2, 4, 8, 16];

/// Fully resolved run parameters. Serialized verbatim as the `config`
/// section of the JSON report; runtime plumbing (output directory, thread
/// budget) is deliberately excluded so reports from different machines and
/// budgets compare byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub law: MarginalLaw,
    pub dim: usize,
    /// Triadic scales the command touches; a single entry for point studies,
    /// empty for max-moment.
    pub scales: Vec<u32>,
    /// Monte Carlo sample count (the `N` key).
    pub samples: usize,
    pub res: usize,
    pub seed: u64,
    /// Domain for boundary-value experiments, one interval per axis.
    pub u_box: BoxDomain,
    /// Boundary data for boundary-value experiments.
    pub f: BoundaryData,
    /// Cutoff radii for the two-scale expansion.
    pub r_grid: Vec<f64>,
    /// Duality probes per invariant sample.
    pub probes: usize,
    /// Draw count for the max-moment bound.
    pub count: usize,
    /// Moment power for the max-moment bound.
    pub power: f64,
    /// Tail-truncation cap exponent.
    pub beta_prime: f64,
    /// Tail-truncation threshold exponent.
    pub gamma_prime: f64,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Serialize)]
struct Stage {
    label: String,
    wall_ms: u128,
}

#[derive(Serialize)]
struct Timings {
    wall_ms: u128,
    stages: Vec<Stage>,
}

#[derive(Serialize)]
struct Report<'a> {
    config: &'a ExperimentConfig,
    results: serde_json::Value,
    timings: Timings,
}

struct Artifacts {
    results: serde_json::Value,
    csv: String,
    summary: String,
    stages: Vec<Stage>,
    /// Set when results were produced but a gate failed; artifacts are still
    /// written before the error is reported.
    failure: Option<CliError>,
}

pub fn usage() -> String {
    "homog <command> [key=value ...]

commands:
  check-invariants     structural identities of the cell quantities on random samples
  study-cell           Monte Carlo moments of the effective matrices at one scale
  study-convergence    squared-error decay of the effective matrices across scales
  study-dirichlet      boundary-value error experiment across eps = 3^-n
  suppressive-profile  tail-truncation moment profile in the scale index
  max-moment           moment bound for the maximum of i.i.d. coefficient draws

keys (defaults in parentheses):
  law=SPEC             constant:V | two_point:LO,HI,P | bounded_log_uniform:S |
                       weibull_tail:KU,KL,FLOOR,SCALE      (two_point:1,4,0.5)
  dim=D                spatial dimension, 1 or 2 (2)
  n=K | n=A..B         triadic scale, or an inclusive ladder (per command)
  N=COUNT              Monte Carlo sample count (100)
  res=R                grid elements per unit cell, one of 2,4,8,16 (4)
  seed=S               master seed (1)
  out=DIR              artifact directory (out)
  threads=T            rayon worker count (HOMOG_THREADS, else all cores)
  config=PATH          key=value file, `#` comments; flags override the file
  box=LO,HI            domain interval per axis, decimals (-0.45,0.45)
  f=SPEC               affine:P,.. | quadratic:P,..;Q,.. | sin_sin (affine:1,0)
  r_grid=R1,R2,..      cutoff radii in (0,1) (0.05,0.1,0.2,0.4)
  probes=P             duality probes per invariant sample (8)
  count=C              max-moment draw count (9)
  power=P              max-moment power, at least 1 (2)
  beta_prime=B         truncation cap exponent (1.5)
  gamma_prime=G        truncation threshold exponent (0.5)

artifacts: <out>/<command>.csv and <out>/<command>.json; the JSON shape is
{config, results, timings} with wall-clock times only under timings.

exit codes: 0 ok, 2 config, 3 coverage, 4 solver, 5 statistics, 6 io
"
    .to_string()
}

/// Entry point used by the binary: parse `args`, run, print, map errors to
/// exit codes.
pub fn run_with(args: &[String]) -> i32 {
    match execute(args) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.category.label(), e.message);
            e.category.exit_code()
        }
    }
}

/// Parse, dispatch, write artifacts; returns the text summary for stdout.
pub fn execute(args: &[String]) -> Result<String, CliError> {
    if args.iter().any(|a| a == "help" || a == "--help" || a == "-h") {
        return Ok(usage());
    }
    if args.is_empty() {
        return Err(CliError::config(format!("missing command\n\n{}", usage())));
    }
    let cfg = parse_config(args)?;

    if let Some(t) = cfg.threads {
        // Only the first initialization in a process wins; later calls fail
        // harmlessly (results do not depend on the worker count).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }

    let t0 = Instant::now();
    let mut art = match cfg.command {
        Command::CheckInvariants => cmd_check_invariants(&cfg)?,
        Command::StudyCell => cmd_study_cell(&cfg)?,
        Command::StudyConvergence => cmd_study_convergence(&cfg)?,
        Command::StudyDirichlet => cmd_study_dirichlet(&cfg)?,
        Command::SuppressiveProfile => cmd_suppressive_profile(&cfg)?,
        Command::MaxMoment => cmd_max_moment(&cfg)?,
    };
    let wall_ms = t0.elapsed().as_millis();

    fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::io(format!("cannot create output directory {}: {e}", cfg.out_dir.display()))
    })?;
    let csv_path = cfg.out_dir.join(format!("{}.csv", cfg.command.name()));
    let json_path = cfg.out_dir.join(format!("{}.json", cfg.command.name()));
    fs::write(&csv_path, &art.csv)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", csv_path.display())))?;
    let report = Report {
        config: &cfg,
        results: art.results,
        timings: Timings { wall_ms, stages: std::mem::take(&mut art.stages) },
    };
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::io(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    fs::write(&json_path, json)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", json_path.display())))?;

    if let Some(failure) = art.failure {
        eprintln!("{}", art.summary.trim_end());
        eprintln!("wrote {}", csv_path.display());
        eprintln!("wrote {}", json_path.display());
        return Err(failure);
    }

    let mut summary = art.summary;
    let _ = writeln!(summary, "wall time {wall_ms} ms");
    let _ = writeln!(summary, "wrote {}", csv_path.display());
    let _ = writeln!(summary, "wrote {}", json_path.display());
    Ok(summary)
}

// ---------------------------------------------------------------- parsing

fn parse_config(args: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut flags: Vec<(String, String)> = Vec::new();
    for (i, raw) in args.iter().enumerate() {
        if i == 0 && !raw.contains('=') {
            flags.push(("command".into(), raw.clone()));
            continue;
        }
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("expected key=value, got `{raw}`")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }

    let mut seen = BTreeSet::new();
    for (k, _) in &flags {
        if !seen.insert(k.clone()) {
            return Err(CliError::config(format!("flag `{k}` given more than once")));
        }
    }

    let mut map: BTreeMap<String, String> = BTreeMap::new();
    let mut from_file: BTreeSet<String> = BTreeSet::new();
    if let Some((_, path)) = flags.iter().find(|(k, _)| k == "config") {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config file {path}: {e}")))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("{path}:{}: expected key=value, got `{line}`", idx + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "config" {
                return Err(CliError::config(format!("{path}:{}: config files cannot nest", idx + 1)));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(CliError::config(format!("{path}:{}: duplicate key `{k}`", idx + 1)));
            }
            from_file.insert(k);
        }
    }
    for (k, v) in flags {
        if k == "config" {
            continue;
        }
        if from_file.contains(&k) {
            eprintln!("warning: flag {k}={v} overrides the config file value");
        }
        map.insert(k, v);
    }

    let unknown: Vec<String> =
        map.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())).cloned().collect();
    if !unknown.is_empty() {
        return Err(CliError::config(format!(
            "unknown key{} {} (known keys: {})",
            if unknown.len() > 1 { "s" } else { "" },
            unknown.join(", "),
            KNOWN_KEYS.join(", ")
        )));
    }

    let command = Command::parse(
        map.get("command").ok_or_else(|| CliError::config("missing command"))?,
    )?;

    let law = parse_law(map.get("law").map_or("two_point:1,4,0.5", String::as_str))?;
    law.validate()?;

    let dim = parse_usize(&map, "dim", 2)?;
    if dim != 1 && dim != 2 {
        return Err(CliError::config(format!("dim must be 1 or 2, got {dim}")));
    }
    let samples = parse_usize(&map, "N", 100)?;
    if samples == 0 {
        return Err(CliError::config("N must be a positive integer, got 0"));
    }
    let res = parse_usize(&map, "res", 4)?;
    if !ALLOWED_RES.contains(&res) {
        return Err(CliError::config(format!("res must be one of 2, 4, 8, 16, got {res}")));
    }
    let seed = parse_u64(&map, "seed", 1)?;
    let out_dir = PathBuf::from(map.get("out").map_or("out", String::as_str));

    let threads = match map.get("threads") {
        Some(v) => Some(parse_positive_usize("threads", v)?),
        None => match std::env::var("HOMOG_THREADS") {
            Ok(v) => Some(parse_positive_usize("HOMOG_THREADS", &v)?),
            Err(_) => None,
        },
    };

    let scales = parse_scales(
        map.get("n").map_or(command.default_scales(), String::as_str),
    )?;
    match command {
        Command::CheckInvariants => {
            if scales.len() != 1 {
                return Err(CliError::config("check-invariants takes a single n, not a ladder"));
            }
            if scales[0] == 0 {
                return Err(CliError::config(
                    "check-invariants needs n >= 1: the subadditivity checks split the cube \
                     into its triadic children",
                ));
            }
        }
        Command::StudyCell | Command::SuppressiveProfile => {
            if scales.len() != 1 {
                return Err(CliError::config(format!(
                    "{} takes a single n, not a ladder",
                    command.name()
                )));
            }
        }
        Command::StudyConvergence => {
            if scales.len() < 2 {
                return Err(CliError::config(
                    "study-convergence needs an ascending ladder, e.g. n=0..3",
                ));
            }
            if samples < 30 {
                return Err(CliError::config(format!(
                    "study-convergence needs N >= 30 for usable standard errors, got {samples}"
                )));
            }
        }
        Command::StudyDirichlet => {
            if scales.is_empty() {
                return Err(CliError::config("study-dirichlet needs at least one scale"));
            }
        }
        Command::MaxMoment => {}
    }

    let u_box = match map.get("box") {
        Some(v) => parse_box(v, dim)?,
        None => BoxDomain::new(vec![-9; dim], vec![9; dim], 20).expect("default box is valid"),
    };
    let f = match map.get("f") {
        Some(v) => parse_boundary(v, dim)?,
        None => {
            let mut p = vec![0.0; dim];
            p[0] = 1.0;
            BoundaryData::Affine { p }
        }
    };
    if command == Command::StudyDirichlet {
        f.validate(dim)?;
    }
    let r_grid = match map.get("r_grid") {
        Some(v) => parse_f64_list("r_grid", v)?,
        None => vec![0.05, 0.1, 0.2, 0.4],
    };

    let probes = parse_usize(&map, "probes", 8)?;
    if probes == 0 {
        return Err(CliError::config("probes must be a positive integer, got 0"));
    }
    let count = parse_usize(&map, "count", 9)?;
    if count == 0 {
        return Err(CliError::config("count must be a positive integer, got 0"));
    }
    let power = parse_f64(&map, "power", 2.0)?;
    if power < 1.0 {
        return Err(CliError::config(format!("power must be at least 1, got {power}")));
    }
    let beta_prime = parse_f64(&map, "beta_prime", 1.5)?;
    let gamma_prime = parse_f64(&map, "gamma_prime", 0.5)?;
    if beta_prime <= 0.0 || gamma_prime <= 0.0 {
        return Err(CliError::config("beta_prime and gamma_prime must be positive"));
    }

    Ok(ExperimentConfig {
        command,
        law,
        dim,
        scales,
        samples,
        res,
        seed,
        u_box,
        f,
        r_grid,
        probes,
        count,
        power,
        beta_prime,
        gamma_prime,
        out_dir,
        threads,
    })
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str, default: usize) -> Result<usize, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| CliError::config(format!("{key} must be a nonnegative integer, got `{v}`"))),
    }
}

fn parse_positive_usize(key: &str, v: &str) -> Result<usize, CliError> {
    match v.parse::<usize>() {
        Ok(t) if t >= 1 => Ok(t),
        _ => Err(CliError::config(format!("{key} must be a positive integer, got `{v}`"))),
    }
}

fn parse_u64(map: &BTreeMap<String, String>, key: &str, default: u64) -> Result<u64, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<u64>()
            .map_err(|_| CliError::config(format!("{key} must be a nonnegative integer, got `{v}`"))),
    }
}

fn parse_f64(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => parse_f64_value(key, v),
    }
}

fn parse_f64_value(key: &str, v: &str) -> Result<f64, CliError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(CliError::config(format!("{key} must be a finite number, got `{v}`"))),
    }
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    if v.is_empty() {
        return Err(CliError::config(format!("{key} must not be empty")));
    }
    v.split(',').map(|t| parse_f64_value(key, t.trim())).collect()
}

/// `A..B` (inclusive, ascending) or a single `K`; empty means no scales.
fn parse_scales(spec: &str) -> Result<Vec<u32>, CliError> {
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    let parse_one = |t: &str| {
        t.parse::<u32>()
            .map_err(|_| CliError::config(format!("n must be a small nonnegative integer, got `{t}`")))
    };
    let scales: Vec<u32> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (parse_one(a.trim())?, parse_one(b.trim())?);
        if a > b {
            return Err(CliError::config(format!("n range {a}..{b} must be ascending")));
        }
        (a..=b).collect()
    } else {
        vec![parse_one(spec.trim())?]
    };
    if let Some(&top) = scales.iter().find(|&&s| s > 8) {
        return Err(CliError::config(format!(
            "n = {top} is out of range: scales above 8 are not supported"
        )));
    }
    Ok(scales)
}

/// `name:comma,separated,params`.
fn parse_law(spec: &str) -> Result<MarginalLaw, CliError> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let nums: Vec<f64> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',')
            .map(|t| parse_f64_value("law", t.trim()))
            .collect::<Result<_, _>>()?
    };
    let arity = |want: usize| {
        if nums.len() == want {
            Ok(())
        } else {
            Err(CliError::config(format!(
                "law {name} takes {want} parameter{}, got {} in `{spec}`",
                if want == 1 { "" } else { "s" },
                nums.len()
            )))
        }
    };
    match name {
        "constant" => {
            arity(1)?;
            Ok(MarginalLaw::Constant { value: nums[0] })
        }
        "two_point" => {
            arity(3)?;
            Ok(MarginalLaw::TwoPoint { lo: nums[0], hi: nums[1], p_hi: nums[2] })
        }
        "bounded_log_uniform" => {
            arity(1)?;
            Ok(MarginalLaw::BoundedLogUniform { spread: nums[0] })
        }
        "weibull_tail" => {
            arity(4)?;
            Ok(MarginalLaw::WeibullTail {
                k_upper: nums[0],
                k_lower: nums[1],
                floor: nums[2],
                scale: nums[3],
            })
        }
        other => Err(CliError::config(format!(
            "unknown law `{other}` (expected constant, two_point, bounded_log_uniform, \
             weibull_tail)"
        ))),
    }
}

/// Plain decimal to an exact rational (num, den), den a power of ten.
fn parse_decimal(key: &str, s: &str) -> Result<(i64, i64), CliError> {
    let err = || CliError::config(format!("{key} must be a plain decimal like -0.45, got `{s}`"));
    let t = s.trim();
    let (sign, digits) = match t.strip_prefix('-') {
        Some(d) => (-1i64, d),
        None => (1i64, t.strip_prefix('+').unwrap_or(t)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if frac_part.len() > 9 || int_part.len() > 9 {
        return Err(CliError::config(format!("{key}: `{s}` has too many digits")));
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return Err(err());
    }
    let mut num: i64 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| err())? };
    let mut den: i64 = 1;
    for c in frac_part.chars() {
        num = num * 10 + (c as i64 - '0' as i64);
        den *= 10;
    }
    let g = gcd_i64(num.abs().max(1), den);
    Ok((sign * num / g, den / g))
}

fn gcd_i64(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `LO,HI` decimals; the same interval is used on every axis.
fn parse_box(spec: &str, dim: usize) -> Result<BoxDomain, CliError> {
    let (lo_s, hi_s) = spec
        .split_once(',')
        .ok_or_else(|| CliError::config(format!("box must be LO,HI, got `{spec}`")))?;
    let (lo_num, lo_den) = parse_decimal("box", lo_s)?;
    let (hi_num, hi_den) = parse_decimal("box", hi_s)?;
    let den = lo_den / gcd_i64(lo_den, hi_den) * hi_den;
    let (lo, hi) = (lo_num * (den / lo_den), hi_num * (den / hi_den));
    if lo >= hi {
        return Err(CliError::config(format!("box interval `{spec}` must have LO < HI")));
    }
    Ok(BoxDomain::new(vec![lo; dim], vec![hi; dim], den)?)
}

/// `affine:p1,..` | `quadratic:p1,..;q11[,q12,q22]` | `sin_sin`.
fn parse_boundary(spec: &str, dim: usize) -> Result<BoundaryData, CliError> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match name {
        "affine" => Ok(BoundaryData::Affine { p: parse_f64_list("f", rest)? }),
        "quadratic" => {
            let (p_s, q_s) = rest.split_once(';').ok_or_else(|| {
                CliError::config(format!(
                    "quadratic data needs `p1,..;q11[,q12,q22]`, got `{spec}`"
                ))
            })?;
            let p = parse_f64_list("f", p_s)?;
            let qs = parse_f64_list("f", q_s)?;
            let want = if dim == 1 { 1 } else { 3 };
            if qs.len() != want {
                return Err(CliError::config(format!(
                    "quadratic data in dim {dim} needs {want} matrix entr{}, got {}",
                    if want == 1 { "y" } else { "ies" },
                    qs.len()
                )));
            }
            let mut q = SymMat::zero(dim);
            q.set(0, 0, qs[0]);
            if dim == 2 {
                q.set(0, 1, qs[1]);
                q.set(1, 1, qs[2]);
            }
            Ok(BoundaryData::Quadratic { p, q })
        }
        "sin_sin" => {
            if !rest.is_empty() {
                return Err(CliError::config("sin_sin takes no parameters"));
            }
            Ok(BoundaryData::SinSin)
        }
        other => Err(CliError::config(format!(
            "unknown boundary data `{other}` (expected affine, quadratic, sin_sin)"
        ))),
    }
}

// ------------------------------------------------------------- commands

#[derive(Serialize)]
struct InvariantRow {
    diagnostic: &'static str,
    /// Worst value over all samples (and probes): the minimum for floor-type
    /// diagnostics, the maximum for residual-type ones.
    worst: f64,
    mean: f64,
    ok: bool,
}

#[derive(Serialize)]
struct InvariantResults {
    n: u32,
    samples: usize,
    probes: usize,
    rows: Vec<InvariantRow>,
    pass: bool,
    violations: Vec<String>,
}

fn cmd_check_invariants(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let n = cfg.scales[0];
    let cube = TriadicCube::centered(n, cfg.dim);
    let diags: Vec<LemmaDiagnostics> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let field = CheckerboardField::sample(
                cfg.law.clone(),
                cfg.dim,
                sample_seed(cfg.seed, i as u64),
                cube.clone(),
            )?;
            verify_lemma_properties(&field, &cube, cfg.res, cfg.probes)
        })
        .collect::<Result<Vec<_>, CellError>>()?;

    // (name, per-sample worst pick, gate) with floor-type diagnostics
    // negated nowhere: `min` rows must stay above the gate, `max` rows below.
    let min_stat = |values: Vec<f64>| {
        let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (worst, mean)
    };
    let max_stat = |values: Vec<f64>| {
        let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (worst, mean)
    };

    let subadd: Vec<f64> =
        diags.iter().flat_map(|d| d.subadditivity_slack.iter().copied()).collect();
    let (sub_worst, sub_mean) = min_stat(subadd);
    let (qr_worst, qr_mean) =
        max_stat(diags.iter().map(|d| d.quadratic_response_residual).collect());
    let (fv_worst, fv_mean) =
        max_stat(diags.iter().map(|d| d.first_variation_residual).collect());
    let (en_worst, en_mean) =
        max_stat(diags.iter().map(|d| d.energy_identity_residual).collect());
    let (sc_worst, sc_mean) = max_stat(diags.iter().map(|d| d.scaling_residual).collect());
    let (gb_worst, gb_mean) =
        max_stat(diags.iter().map(|d| d.gradient_bound_excess).collect());
    let (du_worst, du_mean) = min_stat(diags.iter().map(|d| d.duality_floor).collect());
    let (or_worst, or_mean) = min_stat(diags.iter().map(|d| d.ordering_slack).collect());
    let (mc_worst, mc_mean) = max_stat(diags.iter().map(|d| d.matrix_distance_c).collect());

    let rows = vec![
        InvariantRow {
            diagnostic: "subadditivity_slack",
            worst: sub_worst,
            mean: sub_mean,
            ok: sub_worst >= -1e-6,
        },
        InvariantRow {
            diagnostic: "quadratic_response_residual",
            worst: qr_worst,
            mean: qr_mean,
            ok: qr_worst <= 1e-5,
        },
        InvariantRow {
            diagnostic: "first_variation_residual",
            worst: fv_worst,
            mean: fv_mean,
            ok: fv_worst <= 1e-6,
        },
        InvariantRow {
            diagnostic: "energy_identity_residual",
            worst: en_worst,
            mean: en_mean,
            ok: en_worst <= 1e-6,
        },
        InvariantRow {
            diagnostic: "scaling_residual",
            worst: sc_worst,
            mean: sc_mean,
            ok: sc_worst <= 1e-8,
        },
        InvariantRow {
            diagnostic: "gradient_bound_excess",
            worst: gb_worst,
            mean: gb_mean,
            ok: gb_worst <= 1e-6,
        },
        InvariantRow {
            diagnostic: "duality_floor",
            worst: du_worst,
            mean: du_mean,
            ok: du_worst >= -1e-8,
        },
        InvariantRow {
            diagnostic: "ordering_slack",
            worst: or_worst,
            mean: or_mean,
            ok: or_worst >= -1e-8,
        },
        InvariantRow {
            diagnostic: "matrix_distance_c",
            worst: mc_worst,
            mean: mc_mean,
            ok: mc_worst.is_finite(),
        },
    ];

    let violations: Vec<String> = rows
        .iter()
        .filter(|r| !r.ok)
        .map(|r| format!("{} worst value {:.6e} is out of tolerance", r.diagnostic, r.worst))
        .collect();
    let pass = violations.is_empty();

    let mut csv = String::from("diagnostic,worst,mean\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.12e},{:.12e}", r.diagnostic, r.worst, r.mean);
    }

    let mut summary = format!(
        "check-invariants: law {}, dim {}, n {}, {} samples, res {}, {} probes\n",
        cfg.law, cfg.dim, n, cfg.samples, cfg.res, cfg.probes
    );
    let _ = writeln!(summary, "  {:<28} {:>18} {:>18}", "diagnostic", "worst", "mean");
    for r in &rows {
        let _ = writeln!(
            summary,
            "  {:<28} {:>18.6e} {:>18.6e}{}",
            r.diagnostic,
            r.worst,
            r.mean,
            if r.ok { "" } else { "  VIOLATION" }
        );
    }
    let _ = writeln!(
        summary,
        "  {}",
        if pass { "all invariants within tolerance" } else { "invariant violations detected" }
    );

    let failure = if pass {
        None
    } else {
        Some(CliError::statistics(format!("invariant violations: {}", violations.join("; "))))
    };
    Ok(Artifacts {
        results: serde_json::to_value(InvariantResults {
            n,
            samples: cfg.samples,
            probes: cfg.probes,
            rows,
            pass,
            violations,
        })
        .expect("serializable"),
        csv,
        summary,
        stages: Vec::new(),
        failure,
    })
}

fn fmt_mat(m: &SymMat) -> String {
    SymMat::entry_labels(m.dim)
        .iter()
        .zip(m.flat_entries())
        .map(|(l, v)| format!("{l} {v:.6}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Serialize)]
struct CellResults {
    abar_ref: SymMat,
    abar_ref_source: &'static str,
    study: crate::stats::ScaleStudy,
}

fn cmd_study_cell(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let n = cfg.scales[0];
    let mut study = run_scale_study(&cfg.law, cfg.dim, n, cfg.samples, cfg.res, cfg.seed)?;
    let (abar_ref, abar_ref_source) = match cfg.law.closed_form_effective(cfg.dim) {
        Some(m) => (m, "closed_form"),
        None => (study.abar_n, "self"),
    };
    attach_omega(&mut study, &abar_ref)?;

    let mut buf = Vec::new();
    write_study_csv(&mut buf, std::slice::from_ref(&study))?;
    let csv = String::from_utf8(buf).expect("csv is utf-8");

    let mut summary = format!(
        "study-cell: law {}, dim {}, n {}, {} samples, res {}\n",
        cfg.law, cfg.dim, n, cfg.samples, cfg.res
    );
    let _ = writeln!(summary, "  effective matrix estimate: {}", fmt_mat(&study.abar_n));
    let _ = writeln!(summary, "  mean dirichlet form:       {}", fmt_mat(&study.mean_a));
    let _ = writeln!(summary, "  se (dual form entries):    {}", fmt_mat(&study.se_astar_inv));
    let _ = writeln!(
        summary,
        "  mean Lambda {:.6}, mean 1/lambda {:.6}",
        study.mean_big_lam, study.mean_lam_inv
    );
    if let (Some(om), Some(se)) = (study.omega_mean, study.omega_se) {
        let _ = writeln!(
            summary,
            "  weak-norm fluctuation Omega: {om:.6e} (se {se:.1e}, reference {abar_ref_source})"
        );
    }

    let stages = vec![Stage { label: format!("n={n}"), wall_ms: study.wall_ms }];
    Ok(Artifacts {
        results: serde_json::to_value(CellResults { abar_ref, abar_ref_source, study })
            .expect("serializable"),
        csv,
        summary,
        stages,
        failure: None,
    })
}

#[derive(Serialize)]
struct ConvergenceResults {
    rate: crate::stats::RateReport,
    subadditive: crate::stats::MonotonicityReport,
}

fn cmd_study_convergence(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let report = convergence_study(&cfg.law, cfg.dim, &cfg.scales, cfg.samples, cfg.res, cfg.seed)?;
    let subadditive = check_monotonicity(&report.studies)?;

    let mut csv = String::from("n,err_sq,stderr\n");
    for r in &report.rows {
        let _ = writeln!(csv, "{},{:.12e},{:.12e}", r.n, r.err_sq, r.stderr);
    }

    let mut summary = format!(
        "study-convergence: law {}, dim {}, n {}..{}, {} samples, res {}\n",
        cfg.law,
        cfg.dim,
        cfg.scales[0],
        cfg.scales[cfg.scales.len() - 1],
        cfg.samples,
        cfg.res
    );
    let _ = writeln!(
        summary,
        "  reference matrix ({}): {}",
        if report.oracle_used { "closed form" } else { "largest-scale mean" },
        fmt_mat(&report.abar_ref)
    );
    let _ = writeln!(summary, "  {:<4} {:>16} {:>16}", "n", "err_sq", "stderr");
    for r in &report.rows {
        let _ = writeln!(summary, "  {:<4} {:>16.6e} {:>16.6e}", r.n, r.err_sq, r.stderr);
    }
    let _ = writeln!(
        summary,
        "  squared error decreasing beyond 2 se: {}",
        if report.monotone { "yes" } else { "NO" }
    );
    for v in &report.violations {
        let _ = writeln!(summary, "    {v}");
    }
    if let Some(fit) = &report.fit_stretched {
        let _ = writeln!(
            summary,
            "  stretched-exponential fit: slope {:.4}, r^2 {:.4}",
            fit.slope, fit.r_squared
        );
    }
    if let Some(fit) = &report.fit_exponential {
        let _ = writeln!(
            summary,
            "  exponential fit:           slope {:.4}, r^2 {:.4}",
            fit.slope, fit.r_squared
        );
    }
    let _ = writeln!(
        summary,
        "  subadditive ordering across scales: mu {}, mu* {}, J {}",
        if subadditive.mu_ok { "ok" } else { "VIOLATED" },
        if subadditive.mu_star_ok { "ok" } else { "VIOLATED" },
        if subadditive.j_ok { "ok" } else { "VIOLATED" },
    );

    let stages = report
        .studies
        .iter()
        .map(|s| Stage { label: format!("n={}", s.n), wall_ms: s.wall_ms })
        .collect();
    Ok(Artifacts {
        results: serde_json::to_value(ConvergenceResults { rate: report, subadditive })
            .expect("serializable"),
        csv,
        summary,
        stages,
        failure: None,
    })
}

fn cmd_study_dirichlet(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let study = error_experiment(
        &cfg.law,
        &cfg.u_box,
        &cfg.f,
        &cfg.scales,
        &cfg.r_grid,
        cfg.samples,
        cfg.res,
        cfg.seed,
    )?;

    let mut buf = Vec::new();
    write_dirichlet_csv(&mut buf, &study)?;
    let csv = String::from_utf8(buf).expect("csv is utf-8");

    let mut summary = format!(
        "study-dirichlet: law {}, dim {}, f {}, {} samples, res {} (grid res {})\n",
        cfg.law,
        cfg.dim,
        study.f.label(),
        cfg.samples,
        cfg.res,
        study.grid_res
    );
    let _ = writeln!(
        summary,
        "  effective matrix ({}): {}",
        study.abar_source,
        fmt_mat(&study.abar)
    );
    let _ = writeln!(summary, "  {:<4} {:>10} {:>16} {:>16}", "n", "eps", "mean L2^2", "se");
    for a in &study.aggregates {
        let _ = writeln!(
            summary,
            "  {:<4} {:>10.6} {:>16.6e} {:>16.6e}",
            a.n,
            a.eps,
            a.mean_sq,
            a.se_sq.sqrt()
        );
    }
    let _ = writeln!(
        summary,
        "  L2 error decreasing beyond 2 se: {}",
        if study.monotone_within_2se { "yes" } else { "NO" }
    );
    for v in &study.violations {
        let _ = writeln!(summary, "    {v}");
    }
    if !study.two_scale.is_empty() {
        let _ = writeln!(
            summary,
            "  {:<4} {:>6} {:>16} {:>16} {:>10}",
            "n", "r", "H1 two-scale", "H1 homogenized", "halved"
        );
        for t in &study.two_scale {
            let _ = writeln!(
                summary,
                "  {:<4} {:>6} {:>16.6e} {:>16.6e} {:>7}/{}",
                t.n, t.r, t.mean_h1_two_scale, t.mean_h1_homog, t.halved, t.samples
            );
        }
    }
    for o in &study.omitted {
        let _ = writeln!(
            summary,
            "  omitted n={} r={}: collar spans only {:.2} grid nodes",
            o.n, o.r, o.collar_nodes
        );
    }

    Ok(Artifacts {
        results: serde_json::to_value(&study).expect("serializable"),
        csv,
        summary,
        stages: Vec::new(),
        failure: None,
    })
}

fn cmd_suppressive_profile(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let profile =
        suppressive_profile(&cfg.law, cfg.dim, cfg.beta_prime, cfg.gamma_prime, cfg.scales[0])?;

    let mut csv = String::from("n,delta,cap,moment_bad,moment_total\n");
    for r in &profile.rows {
        let _ = writeln!(
            csv,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.n, r.delta, r.cap, r.moment_bad, r.moment_total
        );
    }

    let mut summary = format!(
        "suppressive-profile: law {}, dim {}, beta' {}, gamma' {}, n 0..{}\n",
        cfg.law, cfg.dim, cfg.beta_prime, cfg.gamma_prime, cfg.scales[0]
    );
    let _ = writeln!(
        summary,
        "  {:<4} {:>12} {:>12} {:>16} {:>16}",
        "n", "delta", "cap", "moment_bad", "moment_total"
    );
    for r in &profile.rows {
        let _ = writeln!(
            summary,
            "  {:<4} {:>12.6e} {:>12.6e} {:>16.6e} {:>16.6e}",
            r.n, r.delta, r.cap, r.moment_bad, r.moment_total
        );
    }
    let _ = writeln!(
        summary,
        "  smallest L with moment_bad(n) <= L e^-n: {:.6e} (trend {})",
        profile.l_fit,
        if profile.trend_consistent { "consistent" } else { "driven by the last scale" }
    );

    Ok(Artifacts {
        results: serde_json::to_value(&profile).expect("serializable"),
        csv,
        summary,
        stages: Vec::new(),
        failure: None,
    })
}

#[derive(Serialize)]
struct MaxMomentResults {
    count: usize,
    power: f64,
    samples: usize,
    lhs: f64,
    rhs: f64,
    stderr: f64,
    exp_moment: f64,
    margin: f64,
}

fn cmd_max_moment(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let check = check_max_moment(&cfg.law, cfg.count, cfg.power, cfg.samples, cfg.seed)?;

    let mut csv = String::from("count,power,lhs,rhs,stderr,exp_moment,margin\n");
    let _ = writeln!(
        csv,
        "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
        cfg.count, cfg.power, check.lhs, check.rhs, check.stderr, check.exp_moment, check.margin
    );

    let mut summary = format!(
        "max-moment: law {}, count {}, power {}, {} samples\n",
        cfg.law, cfg.count, cfg.power, cfg.samples
    );
    let _ = writeln!(
        summary,
        "  E[max^p] = {:.6e} (se {:.1e}) <= bound {:.6e}, margin {:.6e}",
        check.lhs, check.stderr, check.rhs, check.margin
    );
    let _ = writeln!(summary, "  exponential moment E e^|X| = {:.6e}", check.exp_moment);

    Ok(Artifacts {
        results: serde_json::to_value(MaxMomentResults {
            count: cfg.count,
            power: cfg.power,
            samples: cfg.samples,
            lhs: check.lhs,
            rhs: check.rhs,
            stderr: check.stderr,
            exp_moment: check.exp_moment,
            margin: check.margin,
        })
        .expect("serializable"),
        csv,
        summary,
        stages: Vec::new(),
        failure: None,
    })
}
