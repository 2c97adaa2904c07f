//! Command-line front end: `simulate`, `plm`, `hte-test`, `hte-estimate`,
//! `funcdiff`, `verify` and `mc`.
//!
//! Results go to stdout as pretty JSON carrying `schema_version`. Failures
//! print `{"schema_version", "code", "message"}` to stderr and exit with 1
//! (usage), 2 (data) or 3 (numerical degeneracy).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{load_csv, Dataset, DgpSpec, Family, Roles};
use crate::diagnostics::{
    random_bumps, random_density_directions, verify_orthogonality, HteMoment, HteMomentKind, MixtureMoment,
    NuisanceComponent, OrthogonalityReport, PathFunctional, PerturbationPath, PlmMoment, PlmMomentKind, DEFAULT_STEP,
};
use crate::error::{Error, Result};
use crate::funcdiff::{build_moment, nf_residual, relevance_constant, theta_sensitivity, ModelFile, MomentKind, RieszSpec};
use crate::hte::{control_index, hte_estimate, hte_test, HteConfig, HteOracle, HteResult};
use crate::mc::{self, McConfig};
use crate::plm::{cross_fit_nuisances, estimate, score_test_theta, PlmConfig, PlmEstimator, PlmNuisances};

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "ORTHOMOM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "orthomom", version, about = "Orthogonal moment construction, estimation and verification")]
struct Cli {
    /// Worker threads (falls back to ORTHOMOM_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset.
    Simulate(SimulateArgs),
    /// Estimate `theta` in the partly linear model.
    Plm(PlmArgs),
    /// Test one interaction coefficient.
    HteTest(HteArgs),
    /// Estimate one interaction coefficient.
    HteEstimate(HteArgs),
    /// Build a moment for a discrete mixture model.
    Funcdiff(FuncdiffArgs),
    /// Check orthogonality along random perturbation paths.
    Verify(VerifyArgs),
    /// Run a Monte Carlo study.
    Mc(McArgs),
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    /// plm, hte, random-coefficient, logit-panel, normal-means or ame.
    #[arg(long)]
    family: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// JSON object of family parameters; defaults otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Write the full generator spec here.
    #[arg(long)]
    dgp_out: Option<PathBuf>,
    /// Write the column roles here.
    #[arg(long)]
    roles_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Roles JSON; by default `y1`, `y2`, `z2` and every column starting with `x`.
    #[arg(long)]
    roles: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct PlmArgs {
    #[command(flatten)]
    data: DataArgs,
    /// lr-2sls, fs-2sls, nlr or plug-in.
    #[arg(long, default_value = "lr-2sls")]
    estimator: String,
    /// Learner configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the true nuisances of this plm generator spec.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Also test `theta = theta_bar` with the estimator's moment.
    #[arg(long, allow_hyphen_values = true)]
    theta_bar: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct HteArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Name of the control interacted with the treatment.
    #[arg(long)]
    l: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    null: f64,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Learner configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the true propensity and control means of this hte generator spec.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Nf,
    Partial,
    Fully,
}

impl From<Mode> for MomentKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Nf => MomentKind::Nf,
            Mode::Partial => MomentKind::Partial,
            Mode::Fully => MomentKind::FullyRobust,
        }
    }
}

#[derive(Debug, clap::Args)]
struct FuncdiffArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated parameter vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    theta: Vec<f64>,
    /// Representer JSON `{"r": [...]}`; the mean of alpha when omitted.
    #[arg(long)]
    functional: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nf")]
    mode: Mode,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    Plm,
    Hte,
    Funcdiff,
}

#[derive(Debug, clap::Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    target: Target,
    #[arg(long, default_value_t = 20)]
    paths: usize,
    #[arg(long)]
    seed: u64,
    /// Generator spec (plm or hte); defaults otherwise.
    #[arg(long)]
    dgp: Option<PathBuf>,
    /// Model file for funcdiff; the default logit panel otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "nf")]
    mode: Mode,
    /// Check the non-orthogonal contrast moment instead.
    #[arg(long)]
    contrast: bool,
    /// Zero-based control index for hte.
    #[arg(long, default_value_t = 0)]
    l: usize,
    #[arg(long, default_value_t = 20_000)]
    draws: usize,
    #[arg(long, default_value_t = 0.5)]
    bump_scale: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Tolerance relative to the moment scale times the path size.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct McArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-replication CSV.
    #[arg(long)]
    records: Option<PathBuf>,
}

/// Run with process stdout and stderr.
pub fn main<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    run(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, W, E>(args: I, out: &mut W, err: &mut E) -> i32
where
    I: IntoIterator<Item = OsString>,
    W: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let rendered = e.render().to_string();
            let _ = write!(err, "{rendered}");
            let msg = match e.kind() {
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
                    "missing subcommand".to_string()
                }
                _ => rendered
                    .lines()
                    .take_while(|l| !l.starts_with("Usage:"))
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
                    .trim_start_matches("error: ")
                    .to_string(),
            };
            report_error(err, "Usage", &msg);
            return 1;
        }
    };
    let threads = match cli.threads.map(Ok).or_else(env_threads) {
        Some(Ok(0)) => {
            report_error(err, "Usage", "threads must be at least 1");
            return 1;
        }
        Some(Ok(t)) => Some(t),
        Some(Err(msg)) => {
            report_error(err, "Usage", &msg);
            return 1;
        }
        None => None,
    };
    let result = match threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, Some(t))),
            Err(e) => Err(Error::BadSpec(e.to_string())),
        },
        None => dispatch(cli.command, None),
    };
    match result.and_then(|v| emit(out, &v)) {
        Ok(()) => 0,
        Err(e) => {
            report_error(err, e.code(), &e.to_string());
            e.exit_code()
        }
    }
}

fn env_threads() -> Option<std::result::Result<usize, String>> {
    let v = std::env::var(THREADS_ENV).ok()?;
    Some(v.trim().parse().map_err(|_| format!("{THREADS_ENV}={v} is not a thread count")))
}

fn report_error<E: Write>(err: &mut E, code: &str, message: &str) {
    let v = json!({"schema_version": SCHEMA_VERSION, "code": code, "message": message});
    let _ = writeln!(err, "{v}");
}

fn emit<W: Write>(out: &mut W, v: &Option<Value>) -> Result<()> {
    if let Some(v) = v {
        serde_json::to_writer_pretty(&mut *out, v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn with_schema<T: Serialize>(body: &T) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    if let Value::Object(m) = &mut v {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    Ok(v)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Json(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn dispatch(cmd: Command, threads: Option<usize>) -> Result<Option<Value>> {
    match cmd {
        Command::Simulate(a) => simulate(a).map(Some),
        Command::Plm(a) => plm(a).map(Some),
        Command::HteTest(a) => hte(a, false).map(Some),
        Command::HteEstimate(a) => hte(a, true).map(Some),
        Command::Funcdiff(a) => funcdiff(a).map(Some),
        Command::Verify(a) => verify(a).map(Some),
        Command::Mc(a) => mc_cmd(a, threads).map(|_| None),
    }
}

fn simulate(a: SimulateArgs) -> Result<Value> {
    let mut obj = match &a.params {
        Some(p) => match read_json::<Value>(p)? {
            Value::Object(m) => m,
            _ => return Err(Error::BadSpec("parameters must be a JSON object".into())),
        },
        None => serde_json::Map::new(),
    };
    obj.insert("family".into(), json!(a.family));
    obj.insert("n".into(), json!(a.n));
    obj.insert("seed".into(), json!(a.seed));
    let spec: DgpSpec = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::BadSpec(e.to_string()))?;
    spec.validate()?;
    let data = spec.generate()?;
    data.write_csv_file(&a.out)?;
    if let Some(p) = &a.dgp_out {
        write_json(p, &spec)?;
    }
    if let Some(p) = &a.roles_out {
        write_json(p, data.roles())?;
    }
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "family": spec.family.name(),
        "n": data.n(),
        "seed": spec.seed,
        "columns": data.names(),
        "roles": data.roles(),
    }))
}

fn default_roles(path: &Path) -> Result<Roles> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let x: Vec<&str> = names.iter().copied().filter(|n| n.starts_with('x')).collect();
    Ok(Roles::new("y1", "y2", &["z2"], &x))
}

fn load(a: &DataArgs) -> Result<Dataset> {
    let roles = match &a.roles {
        Some(p) => Roles::from_json_file(p)?,
        None => default_roles(&a.data)?,
    };
    load_csv(&a.data, roles)
}

fn parse_estimator(name: &str) -> Result<PlmEstimator> {
    serde_json::from_value(json!(name)).map_err(|_| {
        Error::BadSpec(format!("unknown estimator `{name}` (lr-2sls, fs-2sls, nlr, plug-in)"))
    })
}

fn plm(a: PlmArgs) -> Result<Value> {
    let estimator = parse_estimator(&a.estimator)?;
    let data = load(&a.data)?;
    let mut cfg: PlmConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PlmConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let nuis = match &a.oracle {
        Some(p) => {
            let spec: DgpSpec = read_json(p)?;
            let Family::Plm(dgp) = &spec.family else {
                return Err(Error::BadSpec(format!("oracle needs a plm spec, got {}", spec.family.name())));
            };
            PlmNuisances::from_oracle(&dgp.oracle(&data)?)
        }
        None => cross_fit_nuisances(&data, &cfg)?,
    };
    let fit = estimate(&data, &nuis, estimator)?;
    let z = crate::linalg::normal_quantile(1.0 - a.level / 2.0);
    let mut v = json!({
        "schema_version": SCHEMA_VERSION,
        "estimator": estimator.name(),
        "n": data.n(),
        "theta_hat": fit.theta_hat,
        "se": fit.se,
        "ci": [fit.theta_hat - z * fit.se, fit.theta_hat + z * fit.se],
        "level": a.level,
        "relevance_denominator": fit.relevance_denominator,
        "oracle": a.oracle.is_some(),
    });
    if let Some(tb) = a.theta_bar {
        let t = score_test_theta(&data, &nuis, tb, a.level)?;
        v["score_test"] = json!({
            "theta_bar": tb,
            "statistic": t.statistic,
            "p_value": t.p_value,
            "reject": t.reject,
        });
    }
    Ok(v)
}

fn hte(a: HteArgs, estimate: bool) -> Result<Value> {
    let data = load(&a.data)?;
    let mut cfg: HteConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => HteConfig::default(),
    };
    cfg.l = control_index(&data, &a.l)?;
    cfg.null = a.null;
    cfg.level = a.level;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.oracle {
        let spec: DgpSpec = read_json(p)?;
        let Family::Hte(dgp) = &spec.family else {
            return Err(Error::BadSpec(format!("oracle needs an hte spec, got {}", spec.family.name())));
        };
        cfg.oracle = Some(HteOracle {
            propensity: dgp.oracle_propensity(&data)?,
            eta03: dgp.eta03.clone(),
        });
    }
    let r: HteResult = if estimate { hte_estimate(&data, &cfg)? } else { hte_test(&data, &cfg)? };
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "l": a.l,
        "null": a.null,
        "level": a.level,
        "statistic": r.statistic,
        "p_value": r.p_value,
        "reject": r.reject,
        "ci": r.ci,
        "ci_min_p_point": r.ci_min_p_point,
        "eta4_hat": r.eta4_hat,
        "se": r.se,
        "degenerate_flag": false,
    }))
}

fn funcdiff(a: FuncdiffArgs) -> Result<Value> {
    let model = ModelFile::from_path(&a.model)?.build()?;
    let theta = a.theta;
    let eta = model.resolve_weights(None)?.to_vec();
    let kind = MomentKind::from(a.mode);
    let r = match (&a.functional, kind) {
        (Some(p), _) => Some(read_json::<RieszSpec>(p)?),
        (None, MomentKind::Nf) => None,
        (None, _) => Some(RieszSpec::mean_alpha(&model)),
    };
    let g = build_moment(&model, &theta, &eta, kind, r.as_ref())?;
    let cond = model.conditional_expectation(&theta, &g.values)?;
    let h = 1e-5 * (1.0 + theta.iter().fold(0.0_f64, |m, t| m.max(t.abs())));
    let sens = theta_sensitivity(&model, &theta, &eta, &g.values, h)?;
    let mut v = json!({
        "schema_version": SCHEMA_VERSION,
        "mode": kind,
        "theta": theta,
        "n_cells": g.n_cells,
        "n_outcomes": g.n_outcomes,
        "g": g.values,
        "nf_residual": nf_residual(&model, &theta, &g)?,
        "theta_sensitivity": sens,
    });
    if let Some(r) = &r {
        let c = relevance_constant(&model, &theta, &eta, &g, r)?;
        let psi = r.psi(&eta);
        let prop = cond
            .iter()
            .zip(&r.r)
            .map(|(e, rk)| (e - c * (rk - psi)).abs())
            .fold(0.0_f64, f64::max);
        v["C"] = json!(c);
        v["psi"] = json!(psi);
        v["proportionality_residual"] = json!(prop);
    }
    Ok(v)
}

fn bump_paths(components: &[(NuisanceComponent, usize)], count: usize, scale: f64, seed: u64) -> Vec<PerturbationPath> {
    (0..count)
        .map(|i| {
            let (component, dim) = components[i % components.len()];
            let bump = random_bumps(dim, 1, scale, seed.wrapping_add(i as u64)).remove(0);
            PerturbationPath::Additive { component, bump }
        })
        .collect()
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    target: &'a str,
    moment: &'a str,
    paths: usize,
    seed: u64,
    step: f64,
    scale: f64,
    #[serde(flatten)]
    report: OrthogonalityReport,
}

fn verify(a: VerifyArgs) -> Result<Value> {
    if a.paths == 0 {
        return Err(Error::BadSpec("need at least one path".into()));
    }
    let spec: Option<DgpSpec> = a.dgp.as_deref().map(read_json).transpose()?;
    let (target, moment, f, paths, rel): (&str, &str, Box<dyn PathFunctional>, Vec<PerturbationPath>, f64) =
        match a.target {
            Target::Plm => {
                let dgp = match spec.map(|s| s.family) {
                    Some(Family::Plm(p)) => p,
                    None => Default::default(),
                    Some(f) => return Err(Error::BadSpec(format!("verify plm needs a plm spec, got {}", f.name()))),
                };
                let kind = if a.contrast { PlmMomentKind::PlugIn } else { PlmMomentKind::Orthogonal };
                let m = PlmMoment::new(&dgp, kind, a.draws, a.seed)?;
                let d = dgp.d;
                let comps: &[(NuisanceComponent, usize)] = if a.contrast {
                    &[(NuisanceComponent::Eta, d)]
                } else {
                    &[
                        (NuisanceComponent::Eta, d),
                        (NuisanceComponent::FirstStage, d),
                        (NuisanceComponent::LongRegression, d + 1),
                    ]
                };
                let name = if a.contrast { "plug-in" } else { "orthogonal" };
                ("plm", name, Box::new(m), bump_paths(comps, a.paths, a.bump_scale, a.seed), 1e-3 * a.bump_scale)
            }
            Target::Hte => {
                let dgp = match spec.map(|s| s.family) {
                    Some(Family::Hte(h)) => h,
                    None => Default::default(),
                    Some(f) => return Err(Error::BadSpec(format!("verify hte needs an hte spec, got {}", f.name()))),
                };
                let kind = if a.contrast { HteMomentKind::XiResidual } else { HteMomentKind::Orthogonal };
                let m = HteMoment::new(&dgp, kind, a.l, a.draws, a.seed)?;
                let comps = [(NuisanceComponent::Propensity, m.feature_dim())];
                let name = if a.contrast { "xi-residual" } else { "orthogonal" };
                let paths = bump_paths(&comps, a.paths, a.bump_scale, a.seed);
                ("hte", name, Box::new(m), paths, 1e-3 * a.bump_scale)
            }
            Target::Funcdiff => {
                let model = match &a.model {
                    Some(p) => ModelFile::from_path(p)?.build()?,
                    None => crate::dataset::LogitPanelDgp::default().model()?,
                };
                let theta = a.theta.clone().unwrap_or_else(|| vec![0.5; model.n_params()]);
                let eta = model.resolve_weights(None)?.to_vec();
                let kind = MomentKind::from(a.mode);
                let r = (kind != MomentKind::Nf).then(|| RieszSpec::mean_alpha(&model));
                let g = build_moment(&model, &theta, &eta, kind, r.as_ref())?;
                let paths = match kind {
                    MomentKind::Nf => random_density_directions(&eta, a.paths, a.seed)
                        .into_iter()
                        .map(|d| PerturbationPath::MultiplicativeDensity { direction: d })
                        .collect(),
                    _ => parameter_paths(theta.len(), a.paths, a.seed),
                };
                let name = match kind {
                    MomentKind::Nf => "nf",
                    MomentKind::Partial => "partial",
                    MomentKind::FullyRobust => "fully-robust",
                };
                let m = MixtureMoment::new(model, theta, Some(eta), g.values)?;
                ("funcdiff", name, Box::new(m), paths, 1e-10)
            }
        };
    let scale = f.scale();
    let tolerance = a.tolerance.unwrap_or(rel) * scale;
    let report = verify_orthogonality(f.as_ref(), &paths, a.step, tolerance)?;
    with_schema(&VerifyOutput {
        target,
        moment,
        paths: paths.len(),
        seed: a.seed,
        step: a.step,
        scale,
        report,
    })
}

fn parameter_paths(dim: usize, count: usize, seed: u64) -> Vec<PerturbationPath> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::linalg::norm(&d);
            PerturbationPath::Parameter {
                delta: d.iter().map(|v| v / n).collect(),
            }
        })
        .collect()
}

fn mc_cmd(a: McArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = McConfig::from_path(&a.config)?;
    if threads.is_some() {
        cfg.threads = None;
    }
    let report = mc::run(&cfg)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    mc::write_report_json(&report, &mut f)?;
    f.flush()?;
    if let Some(p) = &a.records {
        mc::write_records_csv(&report.records, std::fs::File::create(p)?)?;
    }
    Ok(())
}
