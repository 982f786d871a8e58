//! Command-line front end: configuration, span cache, CSV and run manifest.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apps::{
    chsh_bound, classical_fidelity, default_grid, fidelity_threshold, is_saturated, oracle_checks,
    qrac_bound, qrac_scenario, selftest_fidelity, sig9, tsr_bound, tsr_curve, tsr_point, write_csv,
    Bound, ConstraintRegime, OutputRow, SelftestTarget, CLASSICAL_QRAC,
};
use crate::error::{Error, Result};
use crate::moment::{build_model, CorrelationTable, MomentModel, Scenario};
use crate::realizations::{
    build_span, projector, qrac_reference_states, CMatrix, SamplingMode, SpanBasis, SpanMeta, C64,
    DEFAULT_BATCH, DEFAULT_MAX_BATCHES,
};
use crate::sdp::{SolveStatus, DEFAULT_TOL};

/// Worker count for curve sweeps.
pub const WORKERS_ENV: &str = "IMM_WORKERS";
pub const DEFAULT_CURVE_POINTS: usize = 41;
pub const DEFAULT_SEED: u64 = 1;
/// Tolerance of the Born-rule cross-checks.
pub const ORACLE_TOL: f64 = 1e-10;
/// Resolution of the self-testing threshold bisection.
pub const THRESHOLD_XTOL: f64 = 1e-4;

const TSIRELSON: f64 = 2.0 * std::f64::consts::SQRT_2;

#[derive(Debug, Parser)]
#[command(
    name = "imm",
    version,
    about = "Instrument moment matrix bounds on temporal quantum correlations"
)]
#[command(args_conflicts_with_subcommands = true)]
pub struct Cli {
    /// Read the run from a TOML file (`application = "..."` plus the flag names as keys).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upper bound on the temporal CHSH value.
    Chsh(Options),
    /// Lower bound on the temporal steering robustness of a table or a CHSH value.
    Tsr(Options),
    /// Steering robustness bound over a grid of CHSH values.
    TsrCurve(Options),
    /// Upper bound on the success probability of a 2→1 or 3→1 random access code.
    Qrac(Options),
    /// Lower bound on the fidelity with the 2→1 code reference states.
    Selftest(Options),
    /// Best fidelity reachable with classical (diagonal) states.
    ClassicalFidelity(Options),
    /// Build a span artifact ahead of time.
    SampleSpan(Options),
    /// Born-rule cross-checks of the bundled realizations.
    VerifyOracle(Options),
}

impl Command {
    fn split(self) -> (Application, Options) {
        match self {
            Command::Chsh(o) => (Application::Chsh, o),
            Command::Tsr(o) => (Application::Tsr, o),
            Command::TsrCurve(o) => (Application::TsrCurve, o),
            Command::Qrac(o) => (Application::Qrac, o),
            Command::Selftest(o) => (Application::Selftest, o),
            Command::ClassicalFidelity(o) => (Application::ClassicalFidelity, o),
            Command::SampleSpan(o) => (Application::SampleSpan, o),
            Command::VerifyOracle(o) => (Application::VerifyOracle, o),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Application {
    Chsh,
    Tsr,
    TsrCurve,
    Qrac,
    Selftest,
    ClassicalFidelity,
    SampleSpan,
    VerifyOracle,
}

impl Application {
    pub fn as_str(&self) -> &'static str {
        match self {
            Application::Chsh => "chsh",
            Application::Tsr => "tsr",
            Application::TsrCurve => "tsr-curve",
            Application::Qrac => "qrac",
            Application::Selftest => "selftest",
            Application::ClassicalFidelity => "classical-fidelity",
            Application::SampleSpan => "sample-span",
            Application::VerifyOracle => "verify-oracle",
        }
    }

    /// Option names that mean something for this application.
    fn accepts(&self) -> Vec<&'static str> {
        const SOLVE: [&str; 9] = [
            "regime",
            "dim",
            "rank",
            "seed",
            "batch",
            "max-batches",
            "span-dir",
            "level",
            "tol",
        ];
        let extra: &[&str] = match self {
            Application::Chsh => &[],
            Application::Tsr => &["chsh", "table"],
            Application::TsrCurve => &["grid"],
            Application::Qrac => &["n"],
            Application::Selftest => &["pobs", "grid", "table", "threshold"],
            Application::ClassicalFidelity => return vec!["states"],
            Application::SampleSpan => {
                return vec![
                    "regime",
                    "dim",
                    "rank",
                    "seed",
                    "batch",
                    "max-batches",
                    "span-dir",
                    "level",
                    "scenario",
                ]
            }
            Application::VerifyOracle => return vec!["level"],
        };
        SOLVE.iter().chain(extra).copied().collect()
    }
}

impl fmt::Display for Application {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flags shared by every subcommand; the config file uses the same names.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Options {
    /// di, nsit, dim or dim-rank; `dim:<d>` and `dim-rank:<d>:<k>` are also accepted.
    #[arg(long)]
    pub regime: Option<String>,
    /// Hilbert-space dimension of the span regimes.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Rank of every measurement element (dim-rank only).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Hierarchy level.
    #[arg(long)]
    pub level: Option<usize>,
    /// Span sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Solver tolerance on the relative gap and residuals.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Number of encoded bits (2 or 3).
    #[arg(long)]
    pub n: Option<usize>,
    /// Temporal CHSH value imposed on the robustness problem.
    #[arg(long)]
    pub chsh: Option<f64>,
    /// Correlation table in JSON.
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
    /// Reference states in JSON: a list of kets, each a list of `[re, im]`.
    #[arg(long, value_name = "FILE")]
    pub states: Option<PathBuf>,
    /// Observed 2→1 success probability.
    #[arg(long)]
    pub pobs: Option<f64>,
    /// Grid `lo:hi:points`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Report the smallest success probability whose fidelity bound reaches this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Scenario of a pre-built span: chsh, qrac2 or qrac3.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Samples per span batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Give up on span saturation after this many batches.
    #[arg(long)]
    pub max_batches: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Run manifest destination (JSON).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Directory of cached span artifacts.
    #[arg(long, value_name = "DIR")]
    pub span_dir: Option<PathBuf>,
}

impl Options {
    fn given(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let mut mark = |name, set: bool| {
            if set {
                v.push(name)
            }
        };
        mark("regime", self.regime.is_some());
        mark("dim", self.dim.is_some());
        mark("rank", self.rank.is_some());
        mark("level", self.level.is_some());
        mark("seed", self.seed.is_some());
        mark("tol", self.tol.is_some());
        mark("n", self.n.is_some());
        mark("chsh", self.chsh.is_some());
        mark("table", self.table.is_some());
        mark("states", self.states.is_some());
        mark("pobs", self.pobs.is_some());
        mark("grid", self.grid.is_some());
        mark("threshold", self.threshold.is_some());
        mark("scenario", self.scenario.is_some());
        mark("batch", self.batch.is_some());
        mark("max-batches", self.max_batches.is_some());
        v
    }
}

/// An input file identified by its content.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputFile {
    #[serde(skip)]
    pub path: PathBuf,
    #[serde(skip)]
    pub text: String,
    pub sha256: String,
}

impl InputFile {
    fn read(field: &str, path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path)
            .map_err(|e| field_error(field, format!("{}: {e}", path.display())))?;
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Ok((
            InputFile {
                path: path.to_path_buf(),
                text: text.clone(),
                sha256,
            },
            text,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        default_grid(self.lo, self.hi, self.points)
    }
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, n] = parts.as_slice() else {
            return Err(Error::invalid(format!(
                "expected `lo:hi:points`, got `{s}`"
            )));
        };
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number `{p}`")))
        };
        let (lo, hi) = (num(lo)?, num(hi)?);
        let points = n
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad point count `{n}`")))?;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::invalid(format!(
                "empty or non-finite range [{lo}, {hi}]"
            )));
        }
        if points == 0 || (points == 1 && lo != hi) {
            return Err(Error::invalid("a range needs at least two points"));
        }
        Ok(Grid { lo, hi, points })
    }
}

/// Scenario and sampling mode of a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanTarget {
    Chsh,
    Qrac2,
    Qrac3,
}

impl SpanTarget {
    fn scenario(&self) -> Scenario {
        match self {
            SpanTarget::Chsh => Scenario::chsh(),
            SpanTarget::Qrac2 => qrac_scenario(2).expect("n = 2"),
            SpanTarget::Qrac3 => qrac_scenario(3).expect("n = 3"),
        }
    }

    /// Temporal sampling for the temporal CHSH scenario, measure-and-prepare
    /// instruments for the prepare-and-measure tasks.
    fn mode(&self) -> SamplingMode {
        match self {
            SpanTarget::Chsh => SamplingMode::Temporal,
            _ => SamplingMode::Prepare,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Chsh,
    TsrTable { table: InputFile },
    TsrPoint { chsh: f64 },
    TsrCurve { grid: Grid },
    Qrac { n: usize },
    Selftest { pobs: f64 },
    SelftestCurve { grid: Grid },
    SelftestTable { table: InputFile },
    SelftestThreshold { threshold: f64 },
    ClassicalFidelity { states: Option<InputFile> },
    SampleSpan { target: SpanTarget },
    VerifyOracle,
}

/// Validated run description. Paths are not part of its identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub application: Application,
    pub regime: Option<ConstraintRegime>,
    pub level: usize,
    pub seed: u64,
    pub tol: f64,
    pub batch: usize,
    pub max_batches: usize,
    pub task: Task,
    #[serde(skip)]
    pub options: Options,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
    #[serde(skip)]
    pub span_dir: Option<PathBuf>,
}

fn field_error(field: &str, e: impl fmt::Display) -> Error {
    Error::InvalidArgument(format!("`{field}`: {e}"))
}

/// The message of an error without its category prefix.
fn message(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

fn resolve_regime(o: &Options, default: ConstraintRegime) -> Result<ConstraintRegime> {
    if o.rank.is_some() && o.dim.is_none() && !o.regime.as_deref().is_some_and(|r| r.contains(':'))
    {
        return Err(field_error("rank", "a rank requires a dimension (`dim`)"));
    }
    match o.regime.as_deref() {
        None if o.dim.is_none() && o.rank.is_none() => Ok(default),
        None => Err(field_error(
            "regime",
            "`dim` and `rank` need an explicit regime",
        )),
        Some(s) if s.contains(':') => {
            if o.dim.is_some() || o.rank.is_some() {
                return Err(field_error(
                    "regime",
                    format!("`{s}` already fixes the dimension and rank"),
                ));
            }
            s.parse().map_err(|e| field_error("regime", message(e)))
        }
        Some(s) => {
            ConstraintRegime::new(s, o.dim, o.rank).map_err(|e| field_error("regime", message(e)))
        }
    }
}

fn parse_grid(s: &str) -> Result<Grid> {
    s.parse().map_err(|e| field_error("grid", message(e)))
}

/// Largest temporal CHSH value compatible with the regime.
fn chsh_ceiling(regime: &ConstraintRegime) -> f64 {
    match regime {
        ConstraintRegime::Di | ConstraintRegime::DiDim { .. } => 4.0,
        _ => TSIRELSON,
    }
}

fn check_probability(field: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(field_error(field, format!("{v} is not a probability")))
    }
}

/// Validate `options` for `application`; every diagnostic names its field.
pub fn parse_config(application: Application, options: Options) -> Result<RunConfig> {
    let o = &options;
    if let Some(f) = o
        .given()
        .into_iter()
        .find(|f| !application.accepts().contains(f))
    {
        return Err(field_error(f, format!("not used by `{application}`")));
    }
    let qubit_rank1 = ConstraintRegime::DiDimRank { dim: 2, rank: 1 };
    let regime = match application {
        Application::Chsh | Application::Tsr | Application::TsrCurve => {
            Some(resolve_regime(o, ConstraintRegime::Di)?)
        }
        Application::Qrac | Application::Selftest | Application::SampleSpan => {
            Some(resolve_regime(o, qubit_rank1)?)
        }
        Application::ClassicalFidelity | Application::VerifyOracle => None,
    };
    let default_level = if application == Application::Selftest {
        2
    } else {
        1
    };
    let level = o.level.unwrap_or(default_level);
    if level == 0 {
        return Err(field_error("level", "the hierarchy starts at level 1"));
    }
    let tol = o.tol.unwrap_or(DEFAULT_TOL);
    if !(1e-10..=1e-4).contains(&tol) {
        return Err(field_error("tol", format!("{tol:e} outside [1e-10, 1e-4]")));
    }
    let batch = o.batch.unwrap_or(DEFAULT_BATCH);
    if batch == 0 {
        return Err(field_error("batch", "must be positive"));
    }
    let max_batches = o.max_batches.unwrap_or(DEFAULT_MAX_BATCHES);
    if max_batches == 0 {
        return Err(field_error("max-batches", "must be positive"));
    }

    let task = match application {
        Application::Chsh => Task::Chsh,
        Application::Tsr => {
            let ceiling = chsh_ceiling(regime.as_ref().expect("regime"));
            match (&o.table, o.chsh) {
                (Some(path), None) => {
                    let (table, text) = InputFile::read("table", path)?;
                    CorrelationTable::from_json(&text).map_err(|e| field_error("table", e))?;
                    Task::TsrTable { table }
                }
                (None, Some(k)) if (2.0..=ceiling).contains(&k) => Task::TsrPoint { chsh: k },
                (None, Some(k)) => {
                    return Err(field_error("chsh", format!("{k} outside [2, {ceiling}]")))
                }
                (Some(_), Some(_)) => {
                    return Err(field_error(
                        "table",
                        "give either `table` or `chsh`, not both",
                    ))
                }
                (None, None) => {
                    return Err(field_error("chsh", "one of `chsh` or `table` is required"))
                }
            }
        }
        Application::TsrCurve => {
            let ceiling = chsh_ceiling(regime.as_ref().expect("regime"));
            let grid = match &o.grid {
                Some(s) => parse_grid(s)?,
                None => Grid {
                    lo: 2.0,
                    hi: ceiling,
                    points: DEFAULT_CURVE_POINTS,
                },
            };
            if grid.lo < 2.0 || grid.hi > ceiling + 1e-12 {
                return Err(field_error(
                    "grid",
                    format!("values must lie in [2, {ceiling}] for this regime"),
                ));
            }
            Task::TsrCurve { grid }
        }
        Application::Qrac => {
            let n = o.n.unwrap_or(2);
            qrac_scenario(n).map_err(|e| field_error("n", message(e)))?;
            Task::Qrac { n }
        }
        Application::Selftest => {
            if level < 2 {
                return Err(field_error(
                    "level",
                    format!("the fidelity functional has words of length 3 and needs level >= 2 (got {level})"),
                ));
            }
            if regime != Some(qubit_rank1) {
                return Err(field_error(
                    "regime",
                    "self-testing is defined for dim-rank:2:1",
                ));
            }
            let given = [
                o.pobs.is_some(),
                o.grid.is_some(),
                o.table.is_some(),
                o.threshold.is_some(),
            ];
            if given.iter().filter(|&&g| g).count() > 1 {
                return Err(field_error(
                    "pobs",
                    "give at most one of `pobs`, `grid`, `table`, `threshold`",
                ));
            }
            if let Some(p) = o.pobs {
                Task::Selftest {
                    pobs: check_probability("pobs", p)?,
                }
            } else if let Some(s) = &o.grid {
                let grid = parse_grid(s)?;
                check_probability("grid", grid.lo)?;
                check_probability("grid", grid.hi)?;
                Task::SelftestCurve { grid }
            } else if let Some(path) = &o.table {
                let (table, text) = InputFile::read("table", path)?;
                let t = CorrelationTable::from_json(&text).map_err(|e| field_error("table", e))?;
                if t.scenario() != qrac_scenario(2)? {
                    return Err(field_error(
                        "table",
                        "self-testing needs a table with nA = nX = nB = nY = 2",
                    ));
                }
                Task::SelftestTable { table }
            } else if let Some(t) = o.threshold {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(field_error("threshold", format!("{t} outside (0, 1]")));
                }
                Task::SelftestThreshold { threshold: t }
            } else {
                Task::Selftest {
                    pobs: (1.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0,
                }
            }
        }
        Application::ClassicalFidelity => {
            let states = match &o.states {
                Some(path) => {
                    let (file, text) = InputFile::read("states", path)?;
                    parse_states(&text).map_err(|e| field_error("states", message(e)))?;
                    Some(file)
                }
                None => None,
            };
            Task::ClassicalFidelity { states }
        }
        Application::SampleSpan => {
            let target = match o.scenario.as_deref().unwrap_or("chsh") {
                "chsh" => SpanTarget::Chsh,
                "qrac2" => SpanTarget::Qrac2,
                "qrac3" => SpanTarget::Qrac3,
                other => {
                    return Err(field_error(
                        "scenario",
                        format!("unknown scenario `{other}`"),
                    ))
                }
            };
            if regime.and_then(|r| r.sample_spec(target.mode())).is_none() {
                return Err(field_error(
                    "regime",
                    "only the dim and dim-rank regimes use a span",
                ));
            }
            Task::SampleSpan { target }
        }
        Application::VerifyOracle => Task::VerifyOracle,
    };

    Ok(RunConfig {
        application,
        regime,
        level,
        seed: o.seed.unwrap_or(DEFAULT_SEED),
        tol,
        batch,
        max_batches,
        task,
        out: o.out.clone(),
        manifest: o.manifest.clone(),
        span_dir: o.span_dir.clone(),
        options,
    })
}

fn clap_error(e: clap::Error) -> Error {
    Error::InvalidArgument(e.to_string().trim_end().to_string())
}

/// Parse a command line (including the program name).
pub fn parse_args<I, T>(args: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    from_cli(Cli::try_parse_from(args).map_err(clap_error)?)
}

fn from_cli(cli: Cli) -> Result<RunConfig> {
    match (cli.config, cli.command) {
        (Some(path), None) => load_config(&path),
        (None, Some(cmd)) => {
            let (app, opts) = cmd.split();
            parse_config(app, opts)
        }
        _ => Err(Error::invalid("give a subcommand or `--config FILE`")),
    }
}

/// Parse a TOML run description.
pub fn parse_config_text(text: &str) -> Result<RunConfig> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
    let app = table
        .remove("application")
        .ok_or_else(|| field_error("application", "missing"))?;
    let app: Application = app.try_into().map_err(|e| field_error("application", e))?;
    let options: Options = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Parse(format!("config: {e}")))?;
    parse_config(app, options)
}

/// Parse a TOML file; relative paths inside it are taken relative to the file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("config: {e}")))?;
    for key in ["table", "states", "out", "manifest", "span-dir"] {
        if let Some(toml::Value::String(p)) = table.get_mut(key) {
            let joined = base.join(&*p);
            *p = joined.to_string_lossy().into_owned();
        }
    }
    parse_config_text(&toml::to_string(&table).map_err(|e| Error::Parse(format!("config: {e}")))?)
}

/// Kets as lists of `[re, im]` pairs; each must be normalized.
pub fn parse_states(text: &str) -> Result<Vec<CMatrix>> {
    let kets: Vec<Vec<[f64; 2]>> = serde_json::from_str(text)?;
    if kets.is_empty() {
        return Err(Error::invalid("no states"));
    }
    kets.iter()
        .enumerate()
        .map(|(i, k)| {
            let v: Vec<C64> = k.iter().map(|&[re, im]| C64::new(re, im)).collect();
            let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            if v.is_empty() || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "state {i} is not normalized (norm² = {norm})"
                )));
            }
            Ok(projector(&v))
        })
        .collect()
}

impl RunConfig {
    /// First 16 hex digits of the SHA-256 of the canonical JSON of the
    /// config; output paths do not enter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    fn span_target(&self) -> SpanTarget {
        match (&self.task, self.application) {
            (Task::SampleSpan { target }, _) => *target,
            (Task::Qrac { n: 3 }, _) => SpanTarget::Qrac3,
            (_, Application::Qrac | Application::Selftest) => SpanTarget::Qrac2,
            _ => SpanTarget::Chsh,
        }
    }
}

/// How the span of a run was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanRecord {
    pub id: String,
    pub rank: usize,
    pub ambient: usize,
    pub meta: SpanMeta,
    pub path: Option<PathBuf>,
    pub reused: bool,
    pub seconds: f64,
}

fn span_key(
    meta_spec: &impl Serialize,
    scenario: Scenario,
    level: usize,
    seed: u64,
    batch: usize,
) -> String {
    let key = serde_json::json!({
        "spec": meta_spec,
        "scenario": scenario,
        "level": level,
        "seed": seed,
        "batch": batch,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
}

/// Load the span from the cache when its parameters match, otherwise
/// sample it and store it.
fn acquire_span(cfg: &RunConfig, model: &MomentModel) -> Result<Option<(SpanBasis, SpanRecord)>> {
    let target = cfg.span_target();
    let Some(spec) = cfg.regime.and_then(|r| r.sample_spec(target.mode())) else {
        return Ok(None);
    };
    let start = Instant::now();
    let path = cfg.span_dir.as_ref().map(|dir| {
        dir.join(format!(
            "span-{}.bin",
            span_key(&spec, model.scenario(), model.level(), cfg.seed, cfg.batch)
        ))
    });
    let cached = path
        .as_ref()
        .filter(|p| p.exists())
        .and_then(|p| SpanBasis::load(p).ok())
        .filter(|sb| {
            sb.meta.spec == spec
                && sb.meta.scenario == model.scenario()
                && sb.meta.level == model.level()
                && sb.meta.seed == cfg.seed
                && sb.meta.batch == cfg.batch
                && sb.ambient == model.n_vars()
                && is_saturated(sb)
        });
    let reused = cached.is_some();
    let sb = match cached {
        Some(sb) => sb,
        None => {
            let sb = build_span(spec, model, cfg.seed, cfg.batch, cfg.max_batches)?;
            if let Some(p) = &path {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir)?;
                }
                sb.save(p)?;
            }
            sb
        }
    };
    let record = SpanRecord {
        id: sb.id(),
        rank: sb.rank(),
        ambient: sb.ambient,
        meta: sb.meta.clone(),
        path,
        reused,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Some((sb, record)))
}

/// Manifest entry: the CSV row plus the solver report where there is one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestRow {
    #[serde(flatten)]
    pub row: OutputRow,
    pub solver: Option<Bound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub application: Application,
    pub options: Options,
    pub config: RunConfig,
    pub config_hash: String,
    pub span: Option<SpanRecord>,
    pub rows: Vec<ManifestRow>,
    pub notes: Vec<String>,
    pub success: bool,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub rows: Vec<OutputRow>,
    pub manifest: Manifest,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        self.manifest.success
    }
}

/// Statuses that count as a successful row.
pub fn status_ok(status: &str) -> bool {
    matches!(
        status,
        "optimal" | "exact" | "pass" | "saturated" | "converged"
    )
}

struct Rows<'a> {
    cfg: &'a RunConfig,
    hash: String,
    span: Option<&'a SpanRecord>,
    rows: Vec<ManifestRow>,
}

impl Rows<'_> {
    fn push(
        &mut self,
        application: &str,
        parameter: Option<f64>,
        value: f64,
        gap: Option<f64>,
        status: &str,
        solver: Option<Bound>,
    ) {
        let regime = self.cfg.regime.map(|r| r.to_string()).unwrap_or_default();
        let level = match self.cfg.application {
            Application::ClassicalFidelity => None,
            _ => Some(self.cfg.level),
        };
        self.rows.push(ManifestRow {
            row: OutputRow {
                application: application.into(),
                regime,
                level,
                parameter,
                value,
                gap,
                status: status.into(),
                span_id: self.span.map(|s| s.id[..16].to_string()),
                seed: self.span.map(|s| s.meta.seed),
                config_hash: self.hash.clone(),
            },
            solver,
        });
    }

    fn bound(&mut self, application: &str, parameter: Option<f64>, r: Result<Bound>) -> Result<()> {
        match r {
            Ok(b) => {
                let status = b.status.to_string();
                self.push(
                    application,
                    parameter,
                    b.value,
                    Some(b.gap),
                    &status,
                    Some(b),
                );
                Ok(())
            }
            Err(Error::Solver { status, .. }) => {
                self.push(application, parameter, f64::NAN, None, &status, None);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Run the application, write the CSV (to `out` or stdout) and the
/// manifest if requested.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let hash = cfg.hash();
    let mut notes = Vec::new();

    let model = match cfg.application {
        Application::ClassicalFidelity | Application::VerifyOracle => None,
        _ => Some(build_model(cfg.span_target().scenario(), cfg.level)?),
    };
    let span = match &model {
        Some(m) => acquire_span(cfg, m)?,
        None => None,
    };
    let (sb, record) = match span {
        Some((sb, rec)) => (Some(sb), Some(rec)),
        None => (None, None),
    };
    let sb = sb.as_ref();
    let regime = cfg.regime.unwrap_or(ConstraintRegime::Di);
    let mut rows = Rows {
        cfg,
        hash: hash.clone(),
        span: record.as_ref(),
        rows: Vec::new(),
    };
    let app = cfg.application.as_str();

    match &cfg.task {
        Task::Chsh => rows.bound(app, None, chsh_bound(&regime, cfg.level, sb, cfg.tol))?,
        Task::TsrPoint { chsh } => rows.bound(
            app,
            Some(*chsh),
            tsr_point(*chsh, &regime, cfg.level, sb, cfg.tol),
        )?,
        Task::TsrTable { table } => {
            let t = CorrelationTable::from_json(&table.text)?;
            rows.bound(app, None, tsr_bound(&t, &regime, cfg.level, sb, cfg.tol))?
        }
        Task::TsrCurve { grid } => {
            for p in tsr_curve(&regime, cfg.level, &grid.values(), sb, cfg.tol)? {
                rows.push(
                    app,
                    Some(p.parameter),
                    p.value,
                    Some(p.gap),
                    &p.status,
                    None,
                );
            }
        }
        Task::Qrac { n } => {
            rows.bound(
                app,
                Some(*n as f64),
                qrac_bound(*n, &regime, cfg.level, sb, cfg.tol),
            )?;
            rows.push(
                "qrac-classical",
                Some(*n as f64),
                CLASSICAL_QRAC,
                None,
                "exact",
                None,
            );
        }
        Task::Selftest { pobs } => {
            let r = selftest_fidelity(
                &SelftestTarget::Pobs(*pobs),
                &regime,
                cfg.level,
                sb,
                cfg.tol,
            );
            rows.bound(app, Some(*pobs), r)?
        }
        Task::SelftestCurve { grid } => {
            let results: Vec<(f64, Result<Bound>)> = grid
                .values()
                .into_par_iter()
                .map(|p| {
                    (
                        p,
                        selftest_fidelity(
                            &SelftestTarget::Pobs(p),
                            &regime,
                            cfg.level,
                            sb,
                            cfg.tol,
                        ),
                    )
                })
                .collect();
            for (p, r) in results {
                rows.bound(app, Some(p), r)?;
            }
        }
        Task::SelftestTable { table } => {
            let t = CorrelationTable::from_json(&table.text)?;
            rows.bound(
                app,
                None,
                selftest_fidelity(&SelftestTarget::Table(t), &regime, cfg.level, sb, cfg.tol),
            )?
        }
        Task::SelftestThreshold { threshold } => {
            let hi = (1.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0;
            let p = fidelity_threshold(
                *threshold,
                &regime,
                cfg.level,
                sb,
                CLASSICAL_QRAC,
                hi,
                THRESHOLD_XTOL,
                cfg.tol,
            )?;
            notes.push(format!(
                "bisection on [{CLASSICAL_QRAC}, {hi}] to {THRESHOLD_XTOL}"
            ));
            rows.push(
                "selftest-threshold",
                Some(*threshold),
                p,
                Some(THRESHOLD_XTOL),
                "converged",
                None,
            );
        }
        Task::ClassicalFidelity { states } => {
            let rhos = match states {
                Some(f) => parse_states(&f.text)?,
                None => qrac_reference_states()
                    .iter()
                    .map(|k| projector(k))
                    .collect(),
            };
            let f = classical_fidelity(&rhos)?;
            notes.push(format!("closed form {}", sig9(f.closed_form)));
            rows.push(
                app,
                None,
                f.lp,
                Some((f.lp - f.closed_form).abs()),
                SolveStatus::Optimal.as_str(),
                None,
            );
        }
        Task::SampleSpan { .. } => {
            let rec = record.as_ref().expect("span regime");
            notes.push(format!("rank trace {:?}", rec.meta.trace));
            rows.push(app, None, rec.rank as f64, None, "saturated", None);
        }
        Task::VerifyOracle => {
            let checks = oracle_checks(cfg.level)?;
            let mut err = io::stderr().lock();
            writeln!(
                err,
                "{:<16} {:<8} {:>16} {:>16} {:>16} {:>16} {:>16}  result",
                "realization",
                "quantity",
                "value",
                "expected",
                "error",
                "min eigenvalue",
                "binding resid."
            )?;
            for c in &checks {
                let pass = c.passes(ORACLE_TOL);
                writeln!(
                    err,
                    "{:<16} {:<8} {:>16} {:>16} {:>16} {:>16} {:>16}  {}",
                    c.realization,
                    c.quantity,
                    sig9(c.value),
                    sig9(c.expected),
                    sig9(c.error()),
                    sig9(c.min_eigenvalue),
                    sig9(c.binding_residual),
                    if pass { "pass" } else { "fail" }
                )?;
                let worst = c.error().max(c.binding_residual).max(-c.min_eigenvalue);
                let name = format!("{app}:{}", c.realization);
                rows.push(
                    &name,
                    Some(c.expected),
                    c.value,
                    Some(worst),
                    if pass { "pass" } else { "fail" },
                    None,
                );
            }
        }
    }

    let manifest_rows = rows.rows;
    let csv_rows: Vec<OutputRow> = manifest_rows.iter().map(|r| r.row.clone()).collect();
    let success = !csv_rows.is_empty() && csv_rows.iter().all(|r| status_ok(&r.status));
    match &cfg.out {
        Some(path) => write_csv(io::BufWriter::new(fs::File::create(path)?), &csv_rows)?,
        None => write_csv(io::stdout().lock(), &csv_rows)?,
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        application: cfg.application,
        options: cfg.options.clone(),
        config: cfg.clone(),
        config_hash: hash,
        span: record,
        rows: manifest_rows,
        notes,
        success,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(path) = &cfg.manifest {
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(RunOutcome {
        rows: csv_rows,
        manifest,
    })
}

fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::invalid(format!(
            "{WORKERS_ENV} must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

/// Entry point of the binary; returns the process exit code: 0 when every
/// row is optimal, 1 when some row is not, 2 on errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = init_workers()
        .and_then(|_| from_cli(cli))
        .and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) if outcome.success() => 0,
        Ok(_) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
