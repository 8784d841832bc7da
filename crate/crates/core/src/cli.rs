//! Command-line front end.
//!
//! Every subcommand reads a `v1` problem document and prints one JSON
//! payload on stdout carrying `status`, `schema_version` and the tolerance
//! set. Exit codes: 0 success, 2 not stabilizable, 3 invalid input,
//! 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::ddare::{solve_ddare, solve_ddare_with, synthesize_gain, SolveOptions};
use crate::error::Error;
use crate::lyapunov::{certificate_from_ddare, exact_ms_check, verify_certificate, StabilizationCertificate};
use crate::margin::{diagonal_delay_margin, diagonal_subsystems, general_delay_margin_search, DEFAULT_D_CAP};
use crate::model::{load_spec, validate_system, ProblemSpec, SCHEMA_VERSION};
use crate::numerics::ToleranceSet;
use crate::reduction::{AuxGain, FeedbackLaw, Reduction};
use crate::serde_rows::{from_rows, to_rows};
use crate::sim::{check_ms_decay, simulate_closed_loop_with, write_ms_csv, write_trajectories_csv, SimOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_STABILIZABLE: i32 = 2;
pub const EXIT_INVALID_INPUT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CliOutcome {
    pub exit_code: i32,
    /// Text destined for stdout.
    pub payload: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "delaystab", version, about = "Mean-square stabilization of multi-delay stochastic systems")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Problem document (JSON).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Also write the payload to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Largest delay tried by the margin search.
    #[arg(long = "d-cap", global = true)]
    d_cap: Option<usize>,
    /// Relative fixed-point tolerance of the Riccati iteration.
    #[arg(long = "tol-fp", global = true)]
    tol_fp: Option<f64>,
    #[arg(long, value_enum, global = true, default_value = "json")]
    format: Format,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the system invariants.
    Validate,
    /// Aggregate input matrices and predictor weights of the delay-free form.
    Reduce,
    /// Solve the delay-dependent Riccati equation.
    SolveDdare {
        /// Record iterate norms and check monotonicity.
        #[arg(long)]
        trace: bool,
    },
    /// Solve, build the stabilizing law and certify it.
    Synthesize,
    /// Build a Lyapunov/LMI certificate from the Riccati solution.
    Certify,
    /// Check an externally supplied certificate.
    VerifyCertificate {
        /// Certificate JSON, or the output of `synthesize`/`certify`.
        #[arg(long)]
        cert: PathBuf,
    },
    /// Delay margin of a restricted single-delay system.
    DelayMargin,
    /// Monte Carlo simulation of the closed loop.
    Simulate {
        /// Law JSON (`K`, or `L0`/`Ltau`, or a `synthesize` payload); defaults to the synthesized law.
        #[arg(long)]
        law: Option<PathBuf>,
        /// Write per-trial state trajectories as CSV here.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Tail window for the decay verdict (default: a fifth of the horizon).
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        ratio: f64,
    },
}

fn status_of(code: i32) -> &'static str {
    match code {
        EXIT_OK => "ok",
        EXIT_NOT_STABILIZABLE => "not_stabilizable",
        EXIT_INVALID_INPUT => "invalid_input",
        _ => "numerical_failure",
    }
}

fn exit_code_of(err: &Error) -> i32 {
    match err {
        Error::NotStabilizable { .. } | Error::Unstable { .. } => EXIT_NOT_STABILIZABLE,
        Error::NumericalFailure(_)
        | Error::ConsistencyFailure { .. }
        | Error::NonFiniteState { .. }
        | Error::TooLarge { .. }
        | Error::MonotonicityAnomaly(_) => EXIT_NUMERICAL,
        _ => EXIT_INVALID_INPUT,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::SingularMatrix(_) => "singular_matrix",
        Error::NotStabilizable { .. } => "not_stabilizable",
        Error::NumericalFailure(_) => "numerical_failure",
        Error::ConsistencyFailure { .. } => "consistency_failure",
        Error::Unstable { .. } => "unstable",
        Error::HistoryLengthMismatch { .. } => "history_length_mismatch",
        Error::MissingNoise { .. } => "missing_noise",
        Error::DuplicateDelay(_) => "duplicate_delay",
        Error::InvalidVariance(_) => "invalid_variance",
        Error::AssumptionViolated(_) => "assumption_violated",
        Error::InvalidSystem(_) => "invalid_system",
        Error::CapReached(_) => "cap_reached",
        Error::MonotonicityAnomaly(_) => "monotonicity_anomaly",
        Error::TooLarge { .. } => "too_large",
        Error::DegenerateInput(_) => "degenerate_input",
        Error::Parse { .. } => "parse_error",
        Error::Schema(_) => "schema_error",
        Error::NonFiniteState { .. } => "non_finite_state",
        Error::Io(_) => "io_error",
    }
}

struct Ctx {
    spec: ProblemSpec,
    d_cap: usize,
    quiet: bool,
}

impl Ctx {
    fn tol(&self) -> &ToleranceSet {
        &self.spec.tolerances
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

/// Output of a subcommand before the common envelope is added.
enum Body {
    Json(i32, Map<String, Value>),
    Text(String),
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn envelope(code: i32, command: &str, tol: Option<&ToleranceSet>, mut body: Map<String, Value>) -> String {
    let mut out = Map::new();
    out.insert("status".into(), json!(status_of(code)));
    out.insert("schema_version".into(), json!(SCHEMA_VERSION));
    out.insert("command".into(), json!(command));
    out.insert("tolerances".into(), tol.map_or(Value::Null, to_value));
    out.append(&mut body);
    serde_json::to_string(&Value::Object(out)).unwrap_or_else(|_| "{}".into())
}

fn error_payload(err: &Error, command: &str, tol: Option<&ToleranceSet>) -> CliOutcome {
    let code = exit_code_of(err);
    let mut body = Map::new();
    let mut e = Map::new();
    e.insert("kind".into(), json!(error_kind(err)));
    e.insert("message".into(), json!(err.to_string().replace('\n', " ")));
    match err {
        Error::Parse { line, column, .. } => {
            e.insert("line".into(), json!(line));
            e.insert("column".into(), json!(column));
        }
        Error::InvalidSystem(report) => {
            e.insert("issues".into(), to_value(report));
        }
        Error::NotStabilizable { reason, iterations, last_norm, .. } => {
            e.insert("reason".into(), to_value(reason));
            e.insert("iterations".into(), json!(iterations));
            e.insert("last_norm".into(), json!(last_norm));
        }
        Error::Unstable { rho } => {
            e.insert("rho".into(), json!(rho));
        }
        Error::MonotonicityAnomaly(res) => {
            body.insert("margin".into(), to_value(res.as_ref()));
        }
        _ => {}
    }
    body.insert("error".into(), Value::Object(e));
    CliOutcome { exit_code: code, payload: envelope(code, command, tol, body) }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate => "validate",
        Command::Reduce => "reduce",
        Command::SolveDdare { .. } => "solve-ddare",
        Command::Synthesize => "synthesize",
        Command::Certify => "certify",
        Command::VerifyCertificate { .. } => "verify-certificate",
        Command::DelayMargin => "delay-margin",
        Command::Simulate { .. } => "simulate",
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> CliOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return CliOutcome { exit_code: EXIT_OK, payload: e.to_string() };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return error_payload(&Error::Schema(format!("command line: {first}")), "", None);
        }
    };
    let name = command_name(&args.command);
    let ctx = match load_ctx(&args) {
        Ok(c) => c,
        Err(e) => return error_payload(&e, name, None),
    };
    if args.format == Format::Csv && !matches!(args.command, Command::Simulate { .. }) {
        return error_payload(&Error::Schema("--format csv is only available for simulate".into()), name, Some(ctx.tol()));
    }
    let body = match dispatch(&args, &ctx) {
        Ok(b) => b,
        Err(e) => return error_payload(&e, name, Some(ctx.tol())),
    };
    let outcome = match body {
        Body::Json(code, map) => CliOutcome { exit_code: code, payload: envelope(code, name, Some(ctx.tol()), map) },
        Body::Text(text) => CliOutcome { exit_code: EXIT_OK, payload: text },
    };
    if let Some(path) = &args.out {
        if let Err(e) = std::fs::write(path, format!("{}\n", outcome.payload.trim_end())) {
            return error_payload(&Error::Io(e), name, Some(ctx.tol()));
        }
    }
    outcome
}

fn load_ctx(args: &Args) -> crate::Result<Ctx> {
    let path = args.spec.as_ref().ok_or_else(|| Error::Schema("--spec <path> is required".into()))?;
    let bytes = std::fs::read(path)?;
    let mut spec = load_spec(&bytes)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(t) = args.trials {
        if t == 0 {
            return Err(Error::Schema("--trials must be positive".into()));
        }
        spec.trials = t;
    }
    if let Some(h) = args.horizon {
        if h == 0 {
            return Err(Error::Schema("--horizon must be positive".into()));
        }
        spec.horizon = h;
    }
    if let Some(f) = args.tol_fp {
        spec.tolerances.fp_rel = f;
        let bad = spec.tolerances.violations();
        if !bad.is_empty() {
            return Err(Error::Schema(bad.join("; ")));
        }
    }
    Ok(Ctx { spec, d_cap: args.d_cap.unwrap_or(DEFAULT_D_CAP), quiet: args.quiet })
}

fn dispatch(args: &Args, ctx: &Ctx) -> crate::Result<Body> {
    let spec = &ctx.spec;
    let sys = &spec.system;
    let tol = ctx.tol();
    if !matches!(args.command, Command::Validate) {
        sys.ensure_valid(tol)?;
    }
    match &args.command {
        Command::Validate => {
            let report = validate_system(sys, tol);
            let code = if report.is_empty() { EXIT_OK } else { EXIT_INVALID_INPUT };
            Ok(Body::Json(
                code,
                obj(json!({
                    "valid": report.is_empty(),
                    "issues": report,
                    "n": sys.n(), "m": sys.m(), "D": sys.delay(),
                })),
            ))
        }
        Command::Reduce => {
            let red = Reduction::new(sys, tol)?;
            let eta0 = red.predictor(&spec.x0, &spec.u_init)?;
            let weights: Vec<_> = red.predictor_weights().iter().map(to_rows).collect();
            Ok(Body::Json(
                EXIT_OK,
                obj(json!({
                    "L": to_rows(&red.input_matrix_l()),
                    "H": to_rows(&red.input_matrix_h()),
                    "predictor_weights": weights,
                    "predictor_at_start": eta0.as_slice(),
                })),
            ))
        }
        Command::SolveDdare { trace } => {
            let opts = SolveOptions { trace: *trace, ..Default::default() };
            let sol = solve_ddare_with(sys, &spec.q, &spec.r, tol, &opts)?;
            Ok(Body::Json(EXIT_OK, obj(json!({ "solution": sol }))))
        }
        Command::Synthesize => {
            let sol = solve_ddare(sys, &spec.q, &spec.r, tol)?;
            let law = synthesize_gain(sys, &sol)?;
            let cert = certificate_from_ddare(sys, &spec.q, &spec.r, &sol, tol)?;
            let moment = match exact_ms_check(sys, &law) {
                Ok(m) => to_value(&m),
                Err(Error::TooLarge { .. }) => Value::Null,
                Err(e) => return Err(e),
            };
            Ok(Body::Json(
                EXIT_OK,
                obj(json!({ "law": law, "solution": sol, "certificate": cert, "moment": moment })),
            ))
        }
        Command::Certify => {
            let sol = solve_ddare(sys, &spec.q, &spec.r, tol)?;
            let cert = certificate_from_ddare(sys, &spec.q, &spec.r, &sol, tol)?;
            let report = verify_certificate(sys, &cert, tol);
            Ok(Body::Json(EXIT_OK, obj(json!({ "certificate": cert, "verification": report }))))
        }
        Command::VerifyCertificate { cert } => {
            let cert = read_certificate(cert, sys, tol)?;
            let report = verify_certificate(sys, &cert, tol);
            Ok(Body::Json(EXIT_OK, obj(json!({ "verification": report }))))
        }
        Command::DelayMargin => {
            let r = spec
                .restricted
                .as_ref()
                .ok_or_else(|| Error::Schema("delay-margin needs a document in restricted form".into()))?;
            let (res, lower_bound) = if r.is_diagonal() {
                (diagonal_delay_margin(&diagonal_subsystems(r)?)?, false)
            } else {
                ctx.progress(&format!("scanning delays 0..={}", ctx.d_cap));
                match general_delay_margin_search(r, &spec.q, &spec.r, ctx.d_cap, tol) {
                    Ok(res) => (res, false),
                    Err(Error::CapReached(res)) => (*res, true),
                    Err(e) => return Err(e),
                }
            };
            Ok(Body::Json(EXIT_OK, obj(json!({ "margin": res, "lower_bound": lower_bound }))))
        }
        Command::Simulate { law, trajectories, window, ratio } => {
            let law = match law {
                Some(path) => read_law(path, sys, tol)?,
                None => {
                    let sol = solve_ddare(sys, &spec.q, &spec.r, tol)?;
                    synthesize_gain(sys, &sol)?
                }
            };
            ctx.progress(&format!("simulating {} trials over {} steps", spec.trials, spec.horizon));
            let opts = SimOptions { keep_trajectories: trajectories.is_some() };
            let res = simulate_closed_loop_with(spec, &law, &opts)?;
            if let (Some(path), Some(paths)) = (trajectories, res.trajectories.as_ref()) {
                write_trajectories_csv(paths, std::fs::File::create(path)?)?;
            }
            if args.format == Format::Csv {
                let mut buf = Vec::new();
                write_ms_csv(&res, &mut buf)?;
                return Ok(Body::Text(String::from_utf8_lossy(&buf).into_owned()));
            }
            let w = window.unwrap_or((spec.horizon / 5).max(1)).min(spec.horizon);
            let decay = check_ms_decay(&res.ms, w, *ratio).ok();
            let moment = exact_ms_check(sys, &law).ok();
            Ok(Body::Json(
                EXIT_OK,
                obj(json!({
                    "simulation": res,
                    "aborted_count": res.aborted.len(),
                    "decay": decay,
                    "moment": moment,
                })),
            ))
        }
    }
}

fn read_json(path: &Path) -> crate::Result<Value> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse { line: e.line(), column: e.column(), message: e.to_string() })
}

fn matrix_field(v: &Value, key: &str) -> crate::Result<Option<DMatrix<f64>>> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(x) => {
            let rows = Vec::<Vec<f64>>::deserialize(x).map_err(|e| Error::Schema(format!("{key}: {e}")))?;
            from_rows(&rows, None).map(Some).map_err(|e| Error::Schema(format!("{key}: {e}")))
        }
    }
}

fn read_certificate(path: &Path, sys: &crate::model::MultiDelaySystem, tol: &ToleranceSet) -> crate::Result<StabilizationCertificate> {
    let doc = read_json(path)?;
    let v = doc.get("certificate").cloned().unwrap_or(doc);
    StabilizationCertificate::complete(
        sys,
        matrix_field(&v, "K")?,
        matrix_field(&v, "P")?,
        matrix_field(&v, "S")?,
        matrix_field(&v, "Y")?,
        tol,
    )
}

fn read_law(path: &Path, sys: &crate::model::MultiDelaySystem, tol: &ToleranceSet) -> crate::Result<FeedbackLaw> {
    let doc = read_json(path)?;
    let v = doc.get("law").cloned().unwrap_or(doc);
    let law = if v.get("K").is_some() {
        FeedbackLaw::deserialize(&v).map_err(|e| Error::Schema(format!("law: {e}")))?
    } else if v.get("L0").is_some() {
        let g = AuxGain::deserialize(&v).map_err(|e| Error::Schema(format!("law: {e}")))?;
        Reduction::new(sys, tol)?.realize_controller(&g)?
    } else {
        return Err(Error::Schema("law file needs K or L0/Ltau".into()));
    };
    law.check(sys)?;
    Ok(law)
}
