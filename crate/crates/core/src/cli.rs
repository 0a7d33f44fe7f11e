//! Command-line front end.
//!
//! Reads a CSV with header `unit,y,d[,x]`, runs one procedure and writes a
//! JSON report. Exit codes: 0 on success, 2 on configuration errors, 3 on
//! data errors. Summaries for humans go to standard error.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::Error;
use crate::estimators::{control_residuals, diff_in_means, mean};
use crate::intervals::{closed_form_interval, invert_tests, Grid, Interpretation};
use crate::model::{validate, Dataset, Hypothesis, IntervalSet, Level, RawRecord, TestResult};
use crate::quantile_models::{empirical_convolution, ferman_fit, ferman_psi, QuantileModel};
use crate::sharp_tests::{
    conley_taber_pvalue, permutation_pvalue, quantile_test, PermutationPlan, ResidualMode,
};
use crate::simulation::{
    appendix_b_iota, draw, error_decomposition, run, DgpKind, DgpSpec, Method, SimConfig, SimReport,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Draws used for the max-gap critical value when it is not supplied.
const IOTA_DRAWS: usize = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        use Error::*;
        match e {
            InvalidLevel(_)
            | NonFiniteNull(_)
            | BudgetZero
            | EmptyGrid
            | InvalidParameter(_)
            | UnknownKind(_)
            | MethodIncompatible(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("missing header row")]
    MissingHeader,
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error(transparent)]
    Invalid(#[from] Error),
}

/// Parses CSV text with header `unit,y,d[,x]` in any column order.
pub fn parse_csv(text: &str) -> Result<Dataset, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| IngestError::ParseError {
        line: 1,
        message: e.to_string(),
    })?;
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(IngestError::MissingHeader);
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let col = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));
    let (iu, iy, id) = (col("unit")?, col("y")?, col("d")?);
    let ix = find("x");

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| IngestError::ParseError {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize, name: &str| -> Result<f64, IngestError> {
            let cell = rec.get(i).unwrap_or("");
            cell.parse::<f64>().map_err(|_| IngestError::ParseError {
                line,
                message: format!("column {name}: cannot parse {cell:?} as a number"),
            })
        };
        let x = match ix {
            Some(i) if !rec.get(i).unwrap_or("").is_empty() => Some(num(i, "x")?),
            _ => None,
        };
        rows.push(RawRecord::new(
            rec.get(iu).unwrap_or(""),
            num(iy, "y")?,
            num(id, "d")?,
            x,
        ));
    }
    Ok(validate(&rows)?)
}

pub fn ingest_csv(path: &Path) -> Result<Dataset, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_csv(&text)
}

/// Canonical CSV for a dataset; [`parse_csv`] reads it back exactly.
pub fn write_csv(ds: &Dataset) -> String {
    let mut out = String::from(if ds.has_covariates() {
        "unit,y,d,x\n"
    } else {
        "unit,y,d\n"
    });
    for r in ds.to_rows() {
        out.push_str(&format!("{},{:?},{}", r.unit, r.y, r.d as u8));
        if let Some(x) = r.x {
            out.push_str(&format!(",{x:?}"));
        }
        out.push('\n');
    }
    out
}

/// Pretty JSON with every float printed to 17 significant digits.
struct SigFormatter(PrettyFormatter<'static>);

impl Formatter for SigFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, SigFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory serialization");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[derive(Debug, Parser)]
#[command(name = "fewtreat", version, about = "Inference with few treated units")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test a hypothesized effect on a dataset.
    Test(Flags),
    /// Closed-form quantile interval for the effect on the treated.
    Interval(Flags),
    /// Invert a family of tests over a grid of hypothesized effects.
    Invert(Flags),
    /// Monte Carlo study of a simulated design.
    Simulate(Flags),
    /// Split the estimation error of simulated draws into its three sources.
    Decompose(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Test,
    Interval,
    Invert,
    Simulate,
    Decompose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Perm,
    Ct,
    Quantile,
    Ferman,
    /// Simulation only: known normal quantiles.
    OracleBand,
    /// Simulation only: max-gap rule for two treated units.
    MaxGap,
    /// Simulation only: unequal-variance t interval.
    WelchT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InterpretationArg {
    Prediction,
    Realized,
}

impl From<InterpretationArg> for Interpretation {
    fn from(a: InterpretationArg) -> Self {
        match a {
            InterpretationArg::Prediction => Interpretation::PredictionSet,
            InterpretationArg::Realized => Interpretation::RealizedEffectCi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ResidualModeArg {
    /// Controls plus null-imposed treated residuals.
    All,
    Controls,
}

impl From<ResidualModeArg> for ResidualMode {
    fn from(a: ResidualModeArg) -> Self {
        match a {
            ResidualModeArg::All => ResidualMode::AllNNullImposed,
            ResidualModeArg::Controls => ResidualMode::ControlsOnly,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// CSV with header unit,y,d[,x].
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write JSON here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Hypothesized effect.
    #[arg(long, allow_hyphen_values = true)]
    pub null: Option<f64>,
    /// Confidence level; gamma = 1 - level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = InterpretationArg::Prediction)]
    pub interpretation: InterpretationArg,
    /// Tuple or reassignment budget.
    #[arg(long, default_value_t = 200_000)]
    pub budget: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replications (simulate, decompose).
    #[arg(long)]
    pub reps: Option<u64>,
    /// Simulation design, e.g. appendix_a or weather_mixture.
    #[arg(long)]
    pub dgp: Option<String>,
    /// Design or method parameter override, repeatable.
    #[arg(long = "param", value_name = "K=V")]
    pub params: Vec<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_hi: Option<f64>,
    #[arg(long, default_value_t = 2001)]
    pub grid_n: usize,
    #[arg(long, value_enum, default_value_t = ResidualModeArg::All)]
    pub residual_mode: ResidualModeArg,
}

/// Effective configuration, echoed in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub input_path: Option<PathBuf>,
    pub method: Option<MethodName>,
    pub null_c: Option<f64>,
    pub level: f64,
    pub interpretation: InterpretationArg,
    pub budget: u64,
    pub seed: u64,
    pub reps: Option<u64>,
    pub dgp: Option<String>,
    pub params: Vec<(String, String)>,
    pub output: Option<PathBuf>,
    pub grid_lo: Option<f64>,
    pub grid_hi: Option<f64>,
    pub grid_n: usize,
    pub residual_mode: ResidualModeArg,
    /// Worker threads from `FEWTREAT_THREADS`; not part of the report since
    /// results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let (command, f) = match cli.command {
            Command::Test(f) => (CommandKind::Test, f),
            Command::Interval(f) => (CommandKind::Interval, f),
            Command::Invert(f) => (CommandKind::Invert, f),
            Command::Simulate(f) => (CommandKind::Simulate, f),
            Command::Decompose(f) => (CommandKind::Decompose, f),
        };
        let params = f
            .params
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| CliError::Config(format!("--param expects K=V, got {kv:?}")))
            })
            .collect::<Result<_, _>>()?;
        let cfg = Self {
            command,
            input_path: f.input,
            method: f.method,
            null_c: f.null,
            level: f.level,
            interpretation: f.interpretation,
            budget: f.budget,
            seed: f.seed,
            reps: f.reps,
            dgp: f.dgp,
            params,
            output: f.output,
            grid_lo: f.grid_lo,
            grid_hi: f.grid_hi,
            grid_n: f.grid_n,
            residual_mode: f.residual_mode,
            workers: threads_from_env()?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "{:?} requires {what}",
                    self.command
                )))
            }
        };
        Level::from_confidence(self.level)?;
        match self.command {
            CommandKind::Test => {
                need(self.input_path.is_some(), "--input")?;
                need(self.method.is_some(), "--method")?;
                need(self.null_c.is_some(), "--null")
            }
            CommandKind::Interval | CommandKind::Invert => {
                need(self.input_path.is_some(), "--input")?;
                need(self.method.is_some(), "--method")
            }
            CommandKind::Simulate | CommandKind::Decompose => {
                need(self.dgp.is_some(), "--dgp")?;
                need(self.input_path.is_none(), "simulated data, not --input")
            }
        }
    }

    fn gamma(&self) -> Level {
        Level::from_confidence(self.level).expect("checked")
    }

    fn data_method(&self) -> Result<MethodName, CliError> {
        match self.method.expect("checked") {
            m @ (MethodName::Perm | MethodName::Ct | MethodName::Quantile | MethodName::Ferman) => {
                Ok(m)
            }
            m => Err(CliError::Config(format!(
                "method {m:?} is only available to simulate"
            ))),
        }
    }
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("FEWTREAT_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("FEWTREAT_THREADS={v:?} is not a count"))),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    seed: u64,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct TestOut {
    estimate: f64,
    #[serde(flatten)]
    result: TestResult,
}

#[derive(Serialize)]
struct IntervalOut<'a> {
    estimate: f64,
    intervals: &'a IntervalSet,
    interpretation: Interpretation,
    level: f64,
    gamma: f64,
    valid_under: &'a crate::model::AssumptionSet,
    method: &'a str,
}

#[derive(Serialize)]
struct InvertOut {
    estimate: f64,
    intervals: IntervalSet,
    grid: Grid,
    refine_tol: f64,
    method: MethodName,
}

#[derive(Serialize)]
struct SimulateOut {
    #[serde(flatten)]
    report: SimReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    companion: Option<SimReport>,
}

#[derive(Serialize)]
struct DecomposeRow {
    replication: u64,
    beta_dm: f64,
    att: f64,
    satt: f64,
    heterogeneity: f64,
    treated_noise: f64,
    control_noise: f64,
}

#[derive(Serialize)]
struct DecomposeOut {
    dgp: DgpSpec,
    rows: Vec<DecomposeRow>,
}

/// Quantile model of the chosen method together with its effect estimate.
fn quantile_model(
    ds: &Dataset,
    method: MethodName,
    cfg: &RunConfig,
) -> Result<(f64, QuantileModel), CliError> {
    Ok(match method {
        MethodName::Ferman => {
            let fit = ferman_fit(ds)?;
            let qm = ferman_psi(
                &fit,
                &ds.treated_covariates().unwrap_or_default(),
                cfg.budget,
                cfg.seed,
            )?;
            (mean(&ds.treated_outcomes()) - fit.mu_hat, qm)
        }
        _ => {
            let resid = control_residuals(ds, None);
            (
                diff_in_means(ds),
                empirical_convolution(&resid, ds.n1(), cfg.budget, cfg.seed)?,
            )
        }
    })
}

fn hypothesis(cfg: &RunConfig, c: f64) -> Result<Hypothesis, Error> {
    match cfg.interpretation {
        InterpretationArg::Prediction => Hypothesis::sharp(c),
        InterpretationArg::Realized => Hypothesis::realized(c),
    }
}

fn run_test(ds: &Dataset, cfg: &RunConfig, c: f64) -> Result<TestResult, CliError> {
    let level = cfg.gamma();
    Ok(match cfg.data_method()? {
        MethodName::Perm => {
            permutation_pvalue(ds, c, &PermutationPlan::new(cfg.budget, cfg.seed), level)?
        }
        MethodName::Ct => conley_taber_pvalue(ds, c, cfg.residual_mode.into(), level),
        m => {
            let (alpha_hat, qm) = quantile_model(ds, m, cfg)?;
            quantile_test(alpha_hat, hypothesis(cfg, c)?, &qm, level)?
        }
    })
}

fn sim_spec(cfg: &RunConfig) -> Result<(DgpSpec, Vec<(String, String)>), CliError> {
    let kind = DgpKind::parse(cfg.dgp.as_deref().expect("checked"))?;
    let mut spec = DgpSpec::new(kind, cfg.seed);
    let mut method_params = Vec::new();
    for (k, v) in &cfg.params {
        match k.as_str() {
            "iota" | "iota_draws" | "lower" | "upper" | "proxy" => {
                method_params.push((k.clone(), v.clone()))
            }
            _ => spec.set_param(k, v)?,
        }
    }
    spec.validate()?;
    Ok((spec, method_params))
}

fn sim_method(
    name: Option<MethodName>,
    kind: DgpKind,
    cfg: &RunConfig,
    extra: &[(String, String)],
) -> Result<Method, CliError> {
    let level = cfg.gamma();
    let get = |key: &str| -> Result<Option<f64>, CliError> {
        extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| {
                v.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{key}={v}")))
            })
            .transpose()
    };
    let budget = cfg.budget;
    let mut method = match name {
        None => Method::default_for(kind, budget, level),
        Some(MethodName::Perm) => Method::Permutation { budget },
        Some(MethodName::Ct) => Method::ConleyTaber {
            residual_mode: cfg.residual_mode.into(),
        },
        Some(MethodName::Quantile) => Method::Quantile { budget },
        Some(MethodName::Ferman) => Method::Ferman { budget },
        Some(MethodName::WelchT) => Method::WelchT,
        Some(MethodName::MaxGap) => Method::MaxGap { iota: f64::NAN },
        Some(MethodName::OracleBand) => Method::default_for(DgpKind::AppendixA, budget, level),
    };
    match &mut method {
        Method::MaxGap { iota } => {
            *iota = match get("iota")? {
                Some(v) => v,
                None => {
                    let draws = get("iota_draws")?.map_or(IOTA_DRAWS, |v| v as usize);
                    appendix_b_iota(level.gamma(), draws, cfg.seed)?
                }
            };
        }
        Method::OracleBand {
            lower,
            upper,
            proxy,
        } => {
            *lower = get("lower")?.unwrap_or(*lower);
            *upper = get("upper")?.unwrap_or(*upper);
            *proxy = get("proxy")?.unwrap_or(*proxy);
        }
        _ => {}
    }
    Ok(method)
}

/// Runs the configured command and returns the JSON report and a one-line
/// summary.
pub fn dispatch(cfg: &RunConfig) -> Result<(String, String), CliError> {
    match cfg.command {
        CommandKind::Test => {
            let ds = ingest_csv(cfg.input_path.as_deref().expect("checked"))?;
            let c = cfg.null_c.expect("checked");
            let result = run_test(&ds, cfg, c)?;
            let summary = format!(
                "{}: statistic {:.6}, p-value {:.6}, {}",
                result.method,
                result.statistic,
                result.p_value,
                if result.reject {
                    "reject"
                } else {
                    "do not reject"
                }
            );
            let out = TestOut {
                estimate: diff_in_means(&ds),
                result,
            };
            Ok((render(cfg, &out), summary))
        }
        CommandKind::Interval => {
            let ds = ingest_csv(cfg.input_path.as_deref().expect("checked"))?;
            let method = cfg.data_method()?;
            if matches!(method, MethodName::Perm | MethodName::Ct) {
                return Err(CliError::Config(
                    "closed-form intervals need a quantile method; use invert for perm or ct"
                        .into(),
                ));
            }
            let (alpha_hat, qm) = quantile_model(&ds, method, cfg)?;
            let report =
                closed_form_interval(alpha_hat, &qm, cfg.gamma(), cfg.interpretation.into())?;
            let summary = format!("{}: {:?}", report.method, report.set.intervals());
            let out = IntervalOut {
                estimate: alpha_hat,
                intervals: &report.set,
                interpretation: report.interpretation,
                level: report.level.confidence(),
                gamma: report.level.gamma(),
                valid_under: &report.valid_under,
                method: &report.method,
            };
            Ok((render(cfg, &out), summary))
        }
        CommandKind::Invert => {
            let ds = ingest_csv(cfg.input_path.as_deref().expect("checked"))?;
            let method = cfg.data_method()?;
            let (alpha_hat, qm) = match method {
                MethodName::Perm | MethodName::Ct => {
                    let resid = control_residuals(&ds, None);
                    (
                        diff_in_means(&ds),
                        empirical_convolution(&resid, ds.n1(), cfg.budget, cfg.seed)?,
                    )
                }
                m => quantile_model(&ds, m, cfg)?,
            };
            let auto = Grid::around(alpha_hat, &qm, cfg.grid_n)?;
            let grid = Grid::new(
                cfg.grid_lo.unwrap_or(auto.lo),
                cfg.grid_hi.unwrap_or(auto.hi),
                cfg.grid_n,
            )?;
            let tol = grid.default_refine_tol();
            let level = cfg.gamma();
            let intervals = match method {
                MethodName::Perm => {
                    let plan = PermutationPlan::new(cfg.budget, cfg.seed);
                    invert_tests(
                        |c| permutation_pvalue(&ds, c, &plan, level).map_or(true, |r| r.reject),
                        grid,
                        tol,
                    )?
                }
                MethodName::Ct => {
                    let mode = cfg.residual_mode.into();
                    invert_tests(
                        |c| conley_taber_pvalue(&ds, c, mode, level).reject,
                        grid,
                        tol,
                    )?
                }
                _ => {
                    let band = qm.band(level)?;
                    invert_tests(
                        |c| crate::sharp_tests::quantile_decision_band(alpha_hat, c, band),
                        grid,
                        tol,
                    )?
                }
            };
            let summary = format!(
                "{method:?} inverted on [{}, {}]: {:?}",
                grid.lo,
                grid.hi,
                intervals.intervals()
            );
            let out = InvertOut {
                estimate: alpha_hat,
                intervals,
                grid,
                refine_tol: tol,
                method,
            };
            Ok((render(cfg, &out), summary))
        }
        CommandKind::Simulate => {
            let (spec, extra) = sim_spec(cfg)?;
            let reps = cfg.reps.unwrap_or(if spec.kind == DgpKind::AppendixA {
                100_000
            } else {
                10_000
            });
            let method = sim_method(cfg.method, spec.kind, cfg, &extra)?;
            let sim = |method: Method| -> Result<SimReport, CliError> {
                let mut sc = SimConfig::new(method, cfg.gamma(), reps);
                sc.null = cfg.null_c;
                sc.interpretation = cfg.interpretation.into();
                sc.workers = cfg.workers;
                Ok(run(&spec, &sc)?)
            };
            let report = sim(method)?;
            let companion = if spec.kind == DgpKind::UnequalVarianceDemo && cfg.method.is_none() {
                Some(sim(Method::Quantile { budget: cfg.budget })?)
            } else {
                None
            };
            let mut summary = format!("{:?}, {} replications", spec.kind, report.replications);
            if let Some(c) = report.unconditional_coverage {
                summary.push_str(&format!(", coverage {c:.4}"));
            }
            if let Some(r) = report.rejection_rate {
                summary.push_str(&format!(", rejection rate {r:.4}"));
            }
            if let Some(e) = report.empty_set_frequency {
                summary.push_str(&format!(", empty sets {e:.4}"));
            }
            Ok((render(cfg, &SimulateOut { report, companion }), summary))
        }
        CommandKind::Decompose => {
            let (spec, _) = sim_spec(cfg)?;
            let reps = cfg.reps.unwrap_or(1);
            let rows = (0..reps)
                .map(|i| {
                    let d = draw(&spec, i)?;
                    let parts = error_decomposition(&d, d.att);
                    Ok(DecomposeRow {
                        replication: i,
                        beta_dm: diff_in_means(&d.dataset),
                        att: d.att,
                        satt: d.satt,
                        heterogeneity: parts.heterogeneity,
                        treated_noise: parts.treated_noise,
                        control_noise: parts.control_noise,
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let summary = format!("{:?}: {} decomposed draws", spec.kind, rows.len());
            Ok((render(cfg, &DecomposeOut { dgp: spec, rows }), summary))
        }
    }
}

fn render<T: Serialize>(cfg: &RunConfig, body: &T) -> String {
    to_json(&Envelope {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        config: cfg,
        body,
    })
}

fn emit(cfg: &RunConfig, json: &str) -> Result<(), CliError> {
    match &cfg.output {
        Some(path) => File::create(path)
            .and_then(|mut f| f.write_all(json.as_bytes()))
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display()))),
        None => io::stdout()
            .write_all(json.as_bytes())
            .map_err(|e| CliError::Config(format!("cannot write output: {e}"))),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = RunConfig::from_cli(cli).and_then(|cfg| {
        if cfg.workers > 0 {
            // ignore failure: the pool may already exist in embedding processes
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build_global();
        }
        let (json, summary) = dispatch(&cfg)?;
        emit(&cfg, &json)?;
        eprintln!("{summary}");
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fewtreat: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
