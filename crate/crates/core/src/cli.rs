//! Command-line front end: argument parsing, the canonical run configuration, the series
//! cache, and output formatting.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numeric failure (including failed checks),
//! 3 I/O.

use crate::error::Error;
use crate::kernels::KernelKind;
use crate::qpert::{
    brute_oracle, solve_series, tilde_to_plain, Direction, SeriesBasis, SeriesMode, SeriesSolution, DEGREE_CAP,
};
use crate::specfun::{energy, theta, EllipticModulus, ModelParams};
use crate::transforms::{
    pipeline, validate_request, PipelineRequest, QuadScheme, QuadratureSpec, TransformScheme,
};
use crate::verify::{
    check_theta_identities, check_kernel_identity, check_projection_q0, check_trig_limit, pipeline_l2_bounds, pipeline_residual,
    series_residual, verification_grid, CheckReport, TrigSubject,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Environment variable that overrides the cache directory.
pub const CACHE_ENV: &str = "NSLAME_CACHE";
const DEFAULT_CACHE_DIR: &str = ".nslame-cache";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) | CliError::CheckFailed(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Domain(_)
            | Error::Branch(_)
            | Error::InvalidMode(_)
            | Error::DegreeUnderflow { .. }
            | Error::Resonance { .. }
            | Error::Precision(_) => CliError::Validation(e.to_string()),
            Error::Pole(_)
            | Error::SingularSystem(_)
            | Error::NonConvergence { .. }
            | Error::Normalization(_)
            | Error::Enclosure(_)
            | Error::DegreeCap(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `a+bi`, `bi`, `a-bi` (also `a+b*i`, `a+ib`) into a complex modular parameter with
/// positive imaginary part.
pub fn parse_tau(s: &str) -> std::result::Result<C64, String> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().replace('*', "");
    if t.is_empty() {
        return Err("empty tau".into());
    }
    let bad = || format!("cannot parse tau = {s:?}; expected a+bi, e.g. 0.3+1.1i or 1.0i");
    let tau = if let Some(body) = t.strip_suffix('i').or_else(|| t.strip_suffix('I')) {
        // Split at the last sign that is not the leading one or part of an exponent.
        let bytes = body.as_bytes();
        let split = (1..bytes.len())
            .rev()
            .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
        let (re, im) = match split {
            Some(k) => (&body[..k], &body[k..]),
            None => ("0", body),
        };
        let im = match im {
            "" | "+" => "1".to_string(),
            "-" => "-1".to_string(),
            other => other.to_string(),
        };
        let re: f64 = re.parse().map_err(|_| bad())?;
        let im: f64 = im.parse().map_err(|_| bad())?;
        C64::new(re, im)
    } else {
        C64::new(t.parse::<f64>().map_err(|_| bad())?, 0.0)
    };
    if !(tau.im > 0.0) || !tau.re.is_finite() || !tau.im.is_finite() {
        return Err(format!(
            "Im(tau) must be positive (got tau = {tau}); the equation lives on the upper half-plane"
        ));
    }
    Ok(tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Constants,
    Theta,
    SeriesSolve,
    Transform,
    Iterate,
    Verify,
    PlotData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    /// Generalised kernel function identity at random points.
    KernelIdentity,
    /// Theta-function relations, heat equations and the k₁/k₄ bridge.
    ThetaIdentities,
    /// The q = 0 projection identity.
    Projection,
    /// PDE residual of a pipeline output.
    PdeResidual,
    /// PDE residual of a series solution.
    SeriesResidual,
    /// Series solver against the dense Galerkin oracle.
    SeriesOracle,
    /// Trigonometric limit of a pipeline output at q = 1e-3.
    TrigLimit,
    /// L² bound of every θ₄-transform step.
    L2Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlotSource {
    Pipeline,
    Series,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub path: Option<PathBuf>,
    pub format: OutputFormat,
}

/// Everything a run depends on. Identical configurations produce identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub tau: C64,
    pub params: ModelParams,
    #[serde(rename = "L")]
    pub l: usize,
    pub quadrature: QuadratureSpec,
    pub grid: usize,
    pub output: OutputSpec,
    pub cache_dir: PathBuf,
    pub seed: u64,
    pub numb: usize,
    pub p: u8,
    pub scheme: TransformScheme,
    pub mode: SeriesMode,
    pub basis: SeriesBasis,
    pub check: Option<CheckName>,
    pub mu: i64,
    pub nu: u8,
    pub n_max: i64,
    pub samples: usize,
    pub use_cache: bool,
    pub source: PlotSource,
}

impl RunConfig {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config JSON")
    }

    pub fn from_json(s: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn modulus(&self) -> CliResult<EllipticModulus> {
        Ok(EllipticModulus::new(self.tau)?)
    }

    pub fn pipeline_request(&self) -> PipelineRequest {
        PipelineRequest {
            numb: self.numb,
            kappa: self.params.kappa,
            g0: self.params.g,
            p: self.p,
            n: self.params.n,
            scheme: self.scheme,
            quad: self.quadrature,
        }
    }

    /// Re-check every precondition the command will rely on.
    pub fn validate(&self) -> CliResult<()> {
        parse_tau(&format!("{}+{}i", self.tau.re, self.tau.im)).map_err(CliError::Validation)?;
        if self.grid == 0 {
            return Err(CliError::Validation("grid must contain at least one point".into()));
        }
        let m = self.modulus()?;
        let uses_pipeline = matches!(self.command, CommandKind::Transform | CommandKind::Iterate)
            || (self.command == CommandKind::PlotData && self.source == PlotSource::Pipeline)
            || (self.command == CommandKind::Verify
                && matches!(self.check, Some(CheckName::PdeResidual | CheckName::TrigLimit | CheckName::L2Bound)));
        let uses_series = self.command == CommandKind::SeriesSolve
            || (self.command == CommandKind::PlotData && self.source == PlotSource::Series)
            || (self.command == CommandKind::Verify
                && matches!(self.check, Some(CheckName::SeriesResidual | CheckName::SeriesOracle)));
        if uses_pipeline {
            if self.scheme == TransformScheme::K && self.quadrature.scheme != QuadScheme::TrapezoidShifted {
                return Err(CliError::Validation("scheme K integrates over shifted contours; use --quad trapezoid".into()));
            }
            validate_request(&self.pipeline_request(), &m)?;
        } else if self.command != CommandKind::Verify || self.check != Some(CheckName::KernelIdentity) {
            if self.command != CommandKind::Constants {
                self.params.validate_basic()?;
            }
        }
        if uses_series {
            self.params.validate_basic()?;
            if self.params.n as usize + 2 * self.l > DEGREE_CAP {
                return Err(CliError::Validation(Error::DegreeCap(self.params.n as usize + 2 * self.l).to_string()));
            }
            if self.mode == SeriesMode::Lame && self.params.kappa != 0.0 {
                return Err(CliError::Validation("--mode lame is the kappa = 0 equation; pass --kappa 0".into()));
            }
        }
        match self.command {
            CommandKind::Theta if !(1..=4).contains(&self.nu) => {
                Err(CliError::Validation(format!("--nu must be 1..4, got {}", self.nu)))
            }
            CommandKind::Constants if self.n_max < 0 => Err(CliError::Validation("--n-max must be >= 0".into())),
            CommandKind::Verify => match self.check {
                None => Err(CliError::Validation("verify needs a check name".into())),
                Some(CheckName::KernelIdentity) => {
                    KernelKind::from_index(self.mu)?;
                    if self.samples == 0 {
                        return Err(CliError::Validation("--samples must be >= 1".into()));
                    }
                    Ok(())
                }
                Some(CheckName::Projection) => {
                    if !(self.params.kappa > 0.0 && self.params.kappa.fract() == 0.0) || self.params.n < self.params.kappa as i64 {
                        return Err(CliError::Validation("projection needs integer kappa >= 1 and n >= kappa".into()));
                    }
                    Ok(())
                }
                Some(CheckName::L2Bound) if self.scheme != TransformScheme::FrakK => {
                    Err(CliError::Validation("the L2 bound concerns --scheme frakK".into()))
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "nslame", version, about = "Solutions of the non-stationary Lamé equation: constants, series, integral transforms and checks")]
pub struct Cli {
    /// Print the canonical run configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Modular parameter, `a+bi` with b > 0.
    #[arg(long, default_value = "1.0i", value_parser = parse_tau)]
    pub tau: C64,
    /// Degree (seed degree for transforms).
    #[arg(long, default_value_t = 2, allow_negative_numbers = true)]
    pub n: i64,
    /// Coupling g (the seed coupling g0 for transforms; defaults to p there).
    #[arg(long, allow_negative_numbers = true)]
    pub g: Option<f64>,
    /// Coupling shift Λ.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub kappa: f64,
    /// Number of x-points.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Output file (stem for transform output); stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    /// Seed for random sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// Number of transform steps.
    #[arg(long, default_value_t = 1)]
    pub numb: usize,
    /// Seed index: 0 (cos ny at g = 0) or 1 (sin((n+1)y) at g = 1).
    #[arg(long, default_value_t = 0)]
    pub p: u8,
    #[arg(long, value_enum, default_value = "k")]
    pub scheme: SchemeArg,
    /// Contour shift ε of the first step (scheme K); defaults to 0.4·π·Im τ.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Initial quadrature point count.
    #[arg(long = "N")]
    pub points: Option<usize>,
    /// Quadrature for scheme frakK.
    #[arg(long, value_enum, default_value = "gauss-jacobi")]
    pub quad: QuadArg,
    /// Fix the point count (no refinement).
    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    #[value(name = "k", alias = "K")]
    K,
    #[value(name = "frakk", alias = "frakK")]
    FrakK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuadArg {
    Trapezoid,
    GaussJacobi,
}

#[derive(Args, Debug, Clone)]
pub struct SeriesArgs {
    /// Truncation order in q².
    #[arg(long = "L", default_value_t = 2)]
    pub l: usize,
    #[arg(long, value_enum, default_value = "nonstationary")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "tilde")]
    pub basis: BasisArg,
    /// Cache directory (NSLAME_CACHE overrides).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Nonstationary,
    Lame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Tilde,
    Plain,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// q, G, η₁/π and a table of E_{n,g}.
    Constants {
        #[command(flatten)]
        common: Common,
        /// Largest degree in the energy table.
        #[arg(long, default_value_t = 4)]
        n_max: i64,
    },
    /// θ_ν on a uniform grid.
    Theta {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        nu: u8,
    },
    /// Perturbative solution in the Gegenbauer basis (cached).
    SeriesSolve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        series: SeriesArgs,
    },
    /// One transform step from a seed.
    Transform {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipe: PipelineArgs,
    },
    /// Iterated transform (--numb steps).
    Iterate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipe: PipelineArgs,
    },
    /// Run a named check; exit 2 when it fails.
    Verify {
        #[arg(value_enum)]
        check: CheckName,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipe: PipelineArgs,
        #[command(flatten)]
        series: SeriesArgs,
        /// Kernel: 0 for the normalised θ₁ kernel, 1..4 for k_μ.
        #[arg(long, default_value_t = 1)]
        mu: i64,
        /// Random points (kernel identity) or samples (theta identities).
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Dense samples of a pipeline or series solution for plotting.
    PlotData {
        #[arg(long, value_enum, default_value = "pipeline")]
        source: PlotSource,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipe: PipelineArgs,
        #[command(flatten)]
        series: SeriesArgs,
    },
}

fn cache_dir_for(flag: Option<PathBuf>) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR)),
    }
}

fn base_config(command: CommandKind, c: &Common, m_default_grid: usize) -> RunConfig {
    RunConfig {
        command,
        tau: c.tau,
        params: ModelParams::new(c.n, c.g.unwrap_or(1.0), c.kappa),
        l: 0,
        quadrature: QuadratureSpec { scheme: QuadScheme::TrapezoidShifted, n: 256, epsilon: 0.0, refine: true },
        grid: c.grid.unwrap_or(m_default_grid),
        output: OutputSpec { path: c.output.clone(), format: c.format.unwrap_or(OutputFormat::Json) },
        cache_dir: cache_dir_for(None),
        seed: c.seed,
        numb: 1,
        p: 0,
        scheme: TransformScheme::K,
        mode: SeriesMode::Nonstationary,
        basis: SeriesBasis::Tilde,
        check: None,
        mu: 1,
        nu: 1,
        n_max: 4,
        samples: 10,
        use_cache: true,
        source: PlotSource::Pipeline,
    }
}

fn apply_pipeline(cfg: &mut RunConfig, c: &Common, p: &PipelineArgs) {
    cfg.numb = p.numb;
    cfg.p = p.p;
    cfg.params.g = c.g.unwrap_or(p.p as f64);
    cfg.scheme = match p.scheme {
        SchemeArg::K => TransformScheme::K,
        SchemeArg::FrakK => TransformScheme::FrakK,
    };
    cfg.quadrature = match cfg.scheme {
        TransformScheme::K => QuadratureSpec {
            scheme: QuadScheme::TrapezoidShifted,
            n: p.points.unwrap_or(256),
            epsilon: p.epsilon.unwrap_or(0.4 * PI * c.tau.im),
            refine: !p.no_refine,
        },
        TransformScheme::FrakK => QuadratureSpec {
            scheme: match p.quad {
                QuadArg::Trapezoid => QuadScheme::TrapezoidShifted,
                QuadArg::GaussJacobi => QuadScheme::GaussJacobi,
            },
            n: p.points.unwrap_or(32),
            epsilon: 0.0,
            refine: !p.no_refine,
        },
    };
}

fn apply_series(cfg: &mut RunConfig, s: &SeriesArgs) {
    cfg.l = s.l;
    cfg.mode = match s.mode {
        ModeArg::Nonstationary => SeriesMode::Nonstationary,
        ModeArg::Lame => SeriesMode::Lame,
    };
    cfg.basis = match s.basis {
        BasisArg::Tilde => SeriesBasis::Tilde,
        BasisArg::Plain => SeriesBasis::Plain,
    };
    cfg.cache_dir = cache_dir_for(s.cache_dir.clone());
    cfg.use_cache = !s.no_cache;
}

impl Cli {
    /// The canonical configuration for the parsed command line.
    pub fn to_config(&self) -> CliResult<RunConfig> {
        let cfg = match &self.command {
            Command::Constants { common, n_max } => {
                let mut c = base_config(CommandKind::Constants, common, 17);
                c.n_max = *n_max;
                c
            }
            Command::Theta { common, nu } => {
                let mut c = base_config(CommandKind::Theta, common, 65);
                c.nu = *nu;
                c
            }
            Command::SeriesSolve { common, series } => {
                let mut c = base_config(CommandKind::SeriesSolve, common, 17);
                apply_series(&mut c, series);
                c
            }
            Command::Transform { common, pipe } => {
                let mut c = base_config(CommandKind::Transform, common, 17);
                if pipe.numb != 1 {
                    return Err(CliError::Validation("transform is a single step; use iterate for --numb > 1".into()));
                }
                apply_pipeline(&mut c, common, pipe);
                c
            }
            Command::Iterate { common, pipe } => {
                let mut c = base_config(CommandKind::Iterate, common, 17);
                apply_pipeline(&mut c, common, pipe);
                c
            }
            Command::Verify { check, common, pipe, series, mu, samples } => {
                let mut c = base_config(CommandKind::Verify, common, 17);
                apply_pipeline(&mut c, common, pipe);
                apply_series(&mut c, series);
                if !matches!(check, CheckName::PdeResidual | CheckName::TrigLimit | CheckName::L2Bound) {
                    c.params.g = common.g.unwrap_or(1.0);
                }
                c.check = Some(*check);
                c.mu = *mu;
                c.samples = *samples;
                c
            }
            Command::PlotData { source, common, pipe, series } => {
                let mut c = base_config(CommandKind::PlotData, common, 401);
                apply_pipeline(&mut c, common, pipe);
                apply_series(&mut c, series);
                if *source == PlotSource::Series {
                    c.params.g = common.g.unwrap_or(1.0);
                }
                c.source = *source;
                c
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Key of a cached series solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheKey {
    pub n: i64,
    pub g: f64,
    pub kappa: f64,
    pub l: usize,
    pub mode: SeriesMode,
}

impl CacheKey {
    pub fn hash(&self) -> String {
        let canonical = format!(
            "n={};g={:016x};kappa={:016x};L={};mode={:?}",
            self.n,
            self.g.to_bits(),
            self.kappa.to_bits(),
            self.l,
            self.mode
        );
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn matches(&self, s: &SeriesSolution) -> bool {
        s.params.n == self.n
            && s.params.g.to_bits() == self.g.to_bits()
            && s.params.kappa.to_bits() == self.kappa.to_bits()
            && s.l == self.l
            && s.mode == self.mode
            && s.basis == SeriesBasis::Tilde
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
    Repaired,
}

/// A cached solve together with the exact JSON payload on disk.
#[derive(Debug, Clone)]
pub struct Cached {
    pub solution: SeriesSolution,
    pub payload: String,
    pub outcome: CacheOutcome,
}

/// Cached `solve_series`: returns the stored JSON when it parses, validates and matches the
/// key; otherwise solves and writes atomically (temp file + rename). A corrupt entry is
/// reported on stderr and replaced.
pub fn cache_get_or_solve(key: CacheKey, dir: &Path) -> CliResult<Cached> {
    let path = dir.join(format!("{}.json", key.hash()));
    let mut outcome = CacheOutcome::Miss;
    if path.exists() {
        let read = std::fs::read_to_string(&path);
        let parsed = read
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|s| SeriesSolution::from_json(s).map_err(|e| e.to_string()))
            .and_then(|sol| if key.matches(&sol) { Ok(sol) } else { Err("entry does not match its key".into()) });
        match (read, parsed) {
            (Ok(payload), Ok(solution)) => return Ok(Cached { solution, payload, outcome: CacheOutcome::Hit }),
            (_, Err(why)) => {
                eprintln!("warning: corrupt cache entry {} ({why}); recomputing", path.display());
                outcome = CacheOutcome::Repaired;
            }
            (Err(_), Ok(_)) => unreachable!(),
        }
    }
    let solution = solve_series(ModelParams::new(key.n, key.g, key.kappa), key.l, key.mode)?;
    let payload = solution.to_json();
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(payload.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(&path).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(Cached { solution, payload, outcome })
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Text written to stdout (or the output file).
    pub text: String,
    /// Present for checks: whether every report passed.
    pub passed: Option<bool>,
}

fn emit_table(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn uniform_grid(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count).map(|k| -PI + 2.0 * PI * k as f64 / (count - 1) as f64).collect()
}

fn series_solution(cfg: &RunConfig) -> CliResult<(SeriesSolution, Option<String>)> {
    let key = CacheKey { n: cfg.params.n, g: cfg.params.g, kappa: cfg.params.kappa, l: cfg.l, mode: cfg.mode };
    let (sol, payload) = if cfg.use_cache {
        let c = cache_get_or_solve(key, &cfg.cache_dir)?;
        (c.solution, Some(c.payload))
    } else {
        (solve_series(cfg.params, cfg.l, cfg.mode)?, None)
    };
    match cfg.basis {
        SeriesBasis::Tilde => Ok((sol, payload)),
        SeriesBasis::Plain => Ok((tilde_to_plain(&sol, Direction::ToPlain)?, None)),
    }
}

fn report_json(reports: &[CheckReport]) -> String {
    serde_json::to_string_pretty(reports).expect("report JSON") + "\n"
}

/// Run one named check and return its reports.
pub fn run_check(cfg: &RunConfig) -> CliResult<Vec<CheckReport>> {
    let m = cfg.modulus()?;
    let check = cfg.check.ok_or_else(|| CliError::Validation("no check named".into()))?;
    let tau = json!({"re": cfg.tau.re, "im": cfg.tau.im});
    let p = cfg.params;
    let reports = match check {
        CheckName::KernelIdentity => {
            let kind = KernelKind::from_index(cfg.mu)?;
            let worst = check_kernel_identity(kind, p.g, p.kappa, &m, cfg.samples, cfg.seed, 1e-3)?;
            let params = json!({"mu": cfg.mu, "g": p.g, "kappa": p.kappa, "tau": tau, "points": cfg.samples, "h": 1e-3});
            vec![CheckReport::new("kernel-identity", params, worst, 1e-6, cfg.seed)]
        }
        CheckName::ThetaIdentities => {
            let rep = check_theta_identities(&m, cfg.samples, cfg.seed)?;
            rep.identities
                .iter()
                .map(|d| {
                    CheckReport::new(
                        &format!("theta-identities: {}", d.name),
                        json!({"tau": tau, "samples": cfg.samples}),
                        d.max_deviation,
                        d.tolerance,
                        cfg.seed,
                    )
                })
                .collect()
        }
        CheckName::Projection => {
            let dev = check_projection_q0(p.n, p.g, p.kappa)?;
            vec![CheckReport::new("projection-q0", json!({"n": p.n, "g": p.g, "kappa": p.kappa}), dev, 1e-10, cfg.seed)]
        }
        CheckName::PdeResidual => {
            let pl = pipeline(&cfg.pipeline_request(), &m)?;
            let r = pipeline_residual(&pl, &verification_grid(cfg.grid), 1e-3, 1e-3, 1e-5)?;
            let params = json!({"request": cfg.pipeline_request(), "tau": tau, "final": pl.params});
            vec![CheckReport::new("pde-residual", params, r.max_residual, r.tolerance, cfg.seed)]
        }
        CheckName::SeriesResidual => {
            let (sol, _) = series_solution(&RunConfig { basis: SeriesBasis::Plain, ..cfg.clone() })?;
            let r = series_residual(&sol, &m, &verification_grid(cfg.grid), 1e-3, 1e-3, 1e-5)?;
            let params = json!({"n": p.n, "g": p.g, "kappa": p.kappa, "L": cfg.l, "tau": tau});
            vec![CheckReport::new("series-residual", params, r.max_residual, r.tolerance, cfg.seed)]
        }
        CheckName::SeriesOracle => {
            let a = solve_series(p, cfg.l, cfg.mode)?;
            let b = brute_oracle(p, cfg.l, p.n as usize + 2 * cfg.l + 5)?;
            let mut worst: f64 = 0.0;
            for (k, v) in &a.d {
                worst = worst.max((v - b.get(k.0, k.1)).abs());
            }
            for (ea, eb) in a.e.iter().zip(&b.e) {
                worst = worst.max((ea - eb).abs());
            }
            let params = json!({"n": p.n, "g": p.g, "kappa": p.kappa, "L": cfg.l, "mode": cfg.mode});
            vec![CheckReport::new("series-oracle", params, worst, 1e-10, cfg.seed)]
        }
        CheckName::TrigLimit => {
            let q = 1e-3;
            let ms = EllipticModulus::from_real_nome(q)?;
            let mut req = cfg.pipeline_request();
            if req.scheme == TransformScheme::K {
                req.quad.epsilon = 0.4 * PI * ms.tau.im;
            }
            let s = pipeline(&req, &ms)?.sample(&verification_grid(cfg.grid))?;
            let dev = check_trig_limit(TrigSubject::Sampled(&s), q)?;
            vec![CheckReport::new("trig-limit", json!({"request": req, "q": q}), dev, 1e-4, cfg.seed)]
        }
        CheckName::L2Bound => {
            let bounds = pipeline_l2_bounds(&cfg.pipeline_request(), &m)?;
            bounds
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let params = json!({"request": cfg.pipeline_request(), "tau": tau, "step": j + 1,
                        "lhs": b.lhs, "rhs": b.rhs, "C": b.c});
                    // Deviation is lhs/rhs; the bound holds when it stays below 1.
                    CheckReport::new("l2-bound", params, b.lhs / b.rhs, 1.0 + 1e-12, cfg.seed)
                })
                .collect()
        }
    };
    Ok(reports)
}

/// Execute a validated configuration.
pub fn execute(cfg: &RunConfig) -> CliResult<Outcome> {
    cfg.validate()?;
    let m = cfg.modulus()?;
    let csv = cfg.output.format == OutputFormat::Csv;
    let text = match cfg.command {
        CommandKind::Constants => {
            let gs = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0];
            let rows: Vec<(i64, f64, C64)> = (0..=cfg.n_max)
                .flat_map(|n| gs.iter().map(move |&g| (n, g)))
                .map(|(n, g)| (n, g, energy(n, g, &m)))
                .collect();
            if csv {
                emit_table("n,g,E_re,E_im", rows.iter().map(|(n, g, e)| format!("{n},{g},{:.17e},{:.17e}", e.re, e.im)))
            } else {
                let v = json!({
                    "tau": m.tau, "q": m.q, "G": m.big_g, "eta1_over_pi": m.eta1_over_pi,
                    "series_terms": m.series_terms,
                    "energies": rows.iter().map(|(n, g, e)| json!({"n": n, "g": g, "E": e})).collect::<Vec<_>>(),
                });
                serde_json::to_string_pretty(&v).expect("json") + "\n"
            }
        }
        CommandKind::Theta => {
            let xs = uniform_grid(cfg.grid);
            let vals: Vec<C64> = xs.iter().map(|&x| theta(cfg.nu, C64::new(x, 0.0), &m)).collect::<Result<_, _>>()?;
            if csv {
                emit_table("x,theta_re,theta_im", xs.iter().zip(&vals).map(|(x, v)| format!("{x:.17e},{:.17e},{:.17e}", v.re, v.im)))
            } else {
                let v = json!({"nu": cfg.nu, "tau": m.tau, "x": xs, "values": vals});
                serde_json::to_string_pretty(&v).expect("json") + "\n"
            }
        }
        CommandKind::SeriesSolve => {
            let (sol, payload) = series_solution(cfg)?;
            if csv {
                emit_table("ell,m,value", sol.d.iter().map(|(&(l, mm), v)| format!("{l},{mm},{:.17e}", v + 0.0)))
            } else {
                payload.unwrap_or_else(|| sol.to_json()) + "\n"
            }
        }
        CommandKind::Transform | CommandKind::Iterate => {
            let pl = pipeline(&cfg.pipeline_request(), &m)?;
            let s = pl.sample(&verification_grid(cfg.grid))?;
            if let Some(stem) = &cfg.output.path {
                s.write(stem)?;
                return Ok(Outcome {
                    text: format!("wrote {} and {}\n", stem.with_extension("csv").display(), stem.with_extension("json").display()),
                    passed: None,
                });
            }
            if csv {
                s.to_csv()
            } else {
                serde_json::to_string_pretty(&s).expect("json") + "\n"
            }
        }
        CommandKind::Verify => {
            let reports = run_check(cfg)?;
            let passed = reports.iter().all(|r| r.passed);
            let text = report_json(&reports);
            write_out(cfg, &text)?;
            return Ok(Outcome { text, passed: Some(passed) });
        }
        CommandKind::PlotData => {
            let xs = uniform_grid(cfg.grid);
            let vals: Vec<C64> = match cfg.source {
                PlotSource::Pipeline => pipeline(&cfg.pipeline_request(), &m)?.eval_psi_many(&xs)?,
                PlotSource::Series => {
                    let (sol, _) = series_solution(&RunConfig { basis: SeriesBasis::Plain, ..cfg.clone() })?;
                    xs.iter().map(|&x| crate::qpert::eval_series(&sol, C64::new(x, 0.0), &m)).collect::<Result<_, _>>()?
                }
            };
            if csv {
                emit_table("x,psi_re,psi_im", xs.iter().zip(&vals).map(|(x, v)| format!("{x:.17e},{:.17e},{:.17e}", v.re, v.im)))
            } else {
                serde_json::to_string_pretty(&json!({"x": xs, "psi": vals})).expect("json") + "\n"
            }
        }
    };
    write_out(cfg, &text)?;
    Ok(Outcome { text, passed: None })
}

fn write_out(cfg: &RunConfig, text: &str) -> CliResult<()> {
    match &cfg.output.path {
        Some(p) if cfg.command != CommandKind::Transform && cfg.command != CommandKind::Iterate => {
            std::fs::write(p, text)?;
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Full command-line entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.to_config().and_then(|cfg| {
        if cli.dump_config {
            return Ok(Outcome { text: cfg.to_canonical_json() + "\n", passed: None });
        }
        let out = execute(&cfg)?;
        if cfg.output.path.is_some() && cfg.command != CommandKind::Verify {
            return Ok(Outcome { text: String::new(), ..out });
        }
        Ok(out)
    });
    match result {
        Ok(out) => {
            print!("{}", out.text);
            match out.passed {
                Some(false) => {
                    eprintln!("check failed");
                    2
                }
                _ => 0,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
