//! Deterministic parallel Monte Carlo driver.
//!
//! Replication `i` draws its data from [`replication_seed`]`(seed, i)`, so
//! every record depends only on the configuration and its index. Records
//! are collected in index order and aggregated with compensated sums, which
//! makes reports identical for any thread count.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{gen_logit_panel, DgpSpec, Family};
use crate::diagnostics::{LocalAlternative, PlmLocal};
use crate::error::{Error, Result};
use crate::funcdiff::{build_moment, MomentKind, MomentVector, RieszSpec};
use crate::hte::{hte_estimate, hte_test, HteConfig, HteOracle};
use crate::linalg;
use crate::plm::{cross_fit_nuisances, estimate, estimator_moment, PlmConfig, PlmEstimator, PlmNuisances};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed of replication `i`: the splitmix64 finalizer applied to
/// `master + (i + 1) * 0x9E3779B97F4A7C15` (wrapping arithmetic).
pub fn replication_seed(master: u64, i: u64) -> u64 {
    let mut z = master.wrapping_add((i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn default_estimator() -> PlmEstimator {
    PlmEstimator::Lr2sls
}

/// What each replication computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "kebab-case")]
pub enum Pipeline {
    /// Partly linear model: estimate `theta` and test `theta = theta_bar`
    /// (the truth when omitted).
    PlmTest {
        #[serde(default = "default_estimator")]
        estimator: PlmEstimator,
        #[serde(default)]
        config: PlmConfig,
        #[serde(default)]
        theta_bar: Option<f64>,
        #[serde(default)]
        oracle: bool,
    },
    /// Interacted model: test `eta04_l = config.null`.
    HteTest {
        #[serde(default)]
        config: HteConfig,
        #[serde(default)]
        oracle: bool,
    },
    /// Interacted model: estimate `eta04_l`.
    HteEstimate {
        #[serde(default)]
        config: HteConfig,
        #[serde(default)]
        oracle: bool,
    },
    /// Logit panel: test that the sample mean of a moment built at the
    /// truth is zero.
    Funcdiff {
        mode: MomentKind,
        #[serde(default)]
        functional: Option<RieszSpec>,
    },
    /// Partly linear model at `theta0 + delta / sqrt(n)`: the scaled mean
    /// of the oracle orthogonal moment at `theta0`.
    Diagnostics { delta: f64 },
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::PlmTest { .. } => "plm-test",
            Pipeline::HteTest { .. } => "hte-test",
            Pipeline::HteEstimate { .. } => "hte-estimate",
            Pipeline::Funcdiff { .. } => "funcdiff",
            Pipeline::Diagnostics { .. } => "diagnostics",
        }
    }
}

fn default_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub replications: usize,
    pub n: usize,
    /// Data-generating process; its own `n` and `seed` are replaced per
    /// replication.
    pub dgp: DgpSpec,
    #[serde(flatten)]
    pub pipeline: Pipeline,
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Worker threads; `None` uses the ambient pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl McConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::BadSpec("replications must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::BadSpec(format!("level {} outside (0, 1)", self.level)));
        }
        if self.threads == Some(0) {
            return Err(Error::BadSpec("threads must be at least 1".into()));
        }
        self.dgp.with_seed(0).validate()
    }
}

/// One replication. Missing fields are left empty in CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub index: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

impl McRecord {
    fn failed(index: usize, seed: u64, e: &Error) -> Self {
        McRecord {
            index,
            seed,
            estimate: None,
            se: None,
            statistic: None,
            p_value: None,
            reject: None,
            ci_lo: None,
            ci_hi: None,
            covered: None,
            error: Some(format!("{}: {e}", e.code())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema_version: u32,
    pub pipeline: String,
    pub replications: usize,
    pub n: usize,
    pub seed: u64,
    pub level: f64,
    pub truth: f64,
    pub successes: usize,
    pub failures: usize,
    /// Share of successful replications that reject.
    pub rejection_rate: Option<f64>,
    pub rejection_se: Option<f64>,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub sd: Option<f64>,
    pub rmse: Option<f64>,
    /// Share of successful replications whose interval contains `truth`;
    /// an empty interval counts as not covering.
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub records: Vec<McRecord>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Everything fixed across replications.
enum Prepared {
    Plm {
        estimator: PlmEstimator,
        config: PlmConfig,
        theta_bar: f64,
        oracle: bool,
    },
    Hte {
        config: HteConfig,
        oracle: bool,
        estimate: bool,
    },
    Funcdiff {
        moment: MomentVector,
    },
    Drift {
        sim: PlmLocal,
        delta: f64,
    },
}

fn prepare(cfg: &McConfig) -> Result<(Prepared, f64)> {
    Ok(match (&cfg.pipeline, &cfg.dgp.family) {
        (
            Pipeline::PlmTest {
                estimator,
                config,
                theta_bar,
                oracle,
            },
            Family::Plm(p),
        ) => (
            Prepared::Plm {
                estimator: *estimator,
                config: config.clone(),
                theta_bar: theta_bar.unwrap_or(p.theta0),
                oracle: *oracle,
            },
            p.theta0,
        ),
        (Pipeline::HteTest { config, oracle }, Family::Hte(h)) | (Pipeline::HteEstimate { config, oracle }, Family::Hte(h)) => {
            if config.l >= h.d {
                return Err(Error::IndexOutOfRange(format!("covariate index {} with {} controls", config.l, h.d)));
            }
            (
                Prepared::Hte {
                    config: HteConfig {
                        level: cfg.level,
                        ..config.clone()
                    },
                    oracle: *oracle,
                    estimate: matches!(cfg.pipeline, Pipeline::HteEstimate { .. }),
                },
                h.eta04[config.l],
            )
        }
        (Pipeline::Funcdiff { mode, functional }, Family::LogitPanel(lp)) => {
            let model = lp.model()?;
            let r = match functional {
                Some(r) => Some(r.clone()),
                None if *mode != MomentKind::Nf => Some(RieszSpec::mean_alpha(&model)),
                None => None,
            };
            let moment = build_moment(&model, &[lp.theta0], &lp.alpha_weights, *mode, r.as_ref())?;
            (Prepared::Funcdiff { moment }, 0.0)
        }
        (Pipeline::Diagnostics { delta }, Family::Plm(p)) => {
            let sim = PlmLocal::new(p.clone(), 200_000, cfg.seed)?;
            let truth = sim.predicted_drift(*delta);
            (Prepared::Drift { sim, delta: *delta }, truth)
        }
        (p, f) => {
            return Err(Error::BadSpec(format!(
                "pipeline {} does not apply to family {}",
                p.name(),
                f.name()
            )))
        }
    })
}

struct Outcome {
    estimate: f64,
    se: f64,
    statistic: f64,
    p_value: f64,
    reject: bool,
    ci: Option<[f64; 2]>,
}

fn replicate(cfg: &McConfig, prep: &Prepared, seed: u64) -> Result<Outcome> {
    let spec = DgpSpec {
        n: cfg.n,
        ..cfg.dgp.with_seed(seed)
    };
    let z = linalg::normal_quantile(1.0 - cfg.level / 2.0);
    match prep {
        Prepared::Plm {
            estimator,
            config,
            theta_bar,
            oracle,
        } => {
            let data = spec.generate()?;
            let nuis = if *oracle {
                let Family::Plm(p) = &spec.family else { unreachable!() };
                PlmNuisances::from_oracle(&p.oracle(&data)?)
            } else {
                cross_fit_nuisances(&data, &PlmConfig { seed, ..config.clone() })?
            };
            let fit = estimate(&data, &nuis, *estimator)?;
            let test = linalg::mean_zero_test(&estimator_moment(&data, &nuis, *estimator, *theta_bar)?, cfg.level)?;
            Ok(Outcome {
                estimate: fit.theta_hat,
                se: fit.se,
                statistic: test.statistic,
                p_value: test.p_value,
                reject: test.reject,
                ci: Some([fit.theta_hat - z * fit.se, fit.theta_hat + z * fit.se]),
            })
        }
        Prepared::Hte {
            config,
            oracle,
            estimate,
        } => {
            let data = spec.generate()?;
            let mut c = HteConfig { seed, ..config.clone() };
            if *oracle {
                let Family::Hte(h) = &spec.family else { unreachable!() };
                c.oracle = Some(HteOracle {
                    propensity: h.oracle_propensity(&data)?,
                    eta03: h.eta03.clone(),
                });
            }
            let r = if *estimate { hte_estimate(&data, &c)? } else { hte_test(&data, &c)? };
            Ok(Outcome {
                estimate: r.eta4_hat,
                se: r.se,
                statistic: r.statistic,
                p_value: r.p_value,
                reject: r.reject,
                ci: r.ci,
            })
        }
        Prepared::Funcdiff { moment } => {
            let (_, data) = gen_logit_panel(&spec)?;
            let m = moment.n_outcomes;
            let (c, y1, y2) = (data.column("cell")?, data.column("y_t1")?, data.column("y_t2")?);
            let g: Vec<f64> = (0..data.n())
                .map(|i| moment.values[c[i] as usize * m + y1[i] as usize + 2 * y2[i] as usize])
                .collect();
            test_mean(&g, cfg.level, z)
        }
        Prepared::Drift { sim, delta } => {
            let g = sim.moment_sample(*delta, cfg.n, seed)?;
            let mut out = test_mean(&g, cfg.level, z)?;
            let sn = (g.len() as f64).sqrt();
            out.estimate *= sn;
            out.se *= sn;
            out.ci = out.ci.map(|[a, b]| [a * sn, b * sn]);
            Ok(out)
        }
    }
}

fn test_mean(g: &[f64], level: f64, z: f64) -> Result<Outcome> {
    let t = linalg::mean_zero_test(g, level)?;
    let m = linalg::mean(g);
    let se = linalg::sd(g) / (g.len() as f64).sqrt();
    Ok(Outcome {
        estimate: m,
        se,
        statistic: t.statistic,
        p_value: t.p_value,
        reject: t.reject,
        ci: Some([m - z * se, m + z * se]),
    })
}

/// Run on `config.threads` workers (or the ambient pool).
pub fn run(config: &McConfig) -> Result<McReport> {
    match config.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::BadSpec(e.to_string()))?;
            pool.install(|| run_inner(config))
        }
        None => run_inner(config),
    }
}

fn run_inner(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (prep, truth) = prepare(cfg)?;
    let records: Vec<McRecord> = (0..cfg.replications)
        .into_par_iter()
        .map(|i| {
            let seed = replication_seed(cfg.seed, i as u64);
            match replicate(cfg, &prep, seed) {
                Ok(o) => McRecord {
                    index: i,
                    seed,
                    estimate: Some(o.estimate),
                    se: Some(o.se),
                    statistic: Some(o.statistic),
                    p_value: Some(o.p_value),
                    reject: Some(o.reject),
                    ci_lo: o.ci.map(|c| c[0]),
                    ci_hi: o.ci.map(|c| c[1]),
                    covered: Some(o.ci.is_some_and(|c| c[0] <= truth && truth <= c[1])),
                    error: None,
                },
                Err(e) => McRecord::failed(i, seed, &e),
            }
        })
        .collect();
    let mut report = aggregate(cfg, truth, records);
    report.wall_clock = start.elapsed();
    Ok(report)
}

fn rate(flags: &[bool]) -> (Option<f64>, Option<f64>) {
    if flags.is_empty() {
        return (None, None);
    }
    let p = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
    (Some(p), Some((p * (1.0 - p) / flags.len() as f64).sqrt()))
}

fn aggregate(cfg: &McConfig, truth: f64, records: Vec<McRecord>) -> McReport {
    let est: Vec<f64> = records.iter().filter_map(|r| r.estimate).collect();
    let rejects: Vec<bool> = records.iter().filter_map(|r| r.reject).collect();
    let covered: Vec<bool> = records.iter().filter_map(|r| r.covered).collect();
    let (rejection_rate, rejection_se) = rate(&rejects);
    let (coverage, coverage_se) = rate(&covered);
    let successes = est.len();
    let (mean_estimate, bias, sd, rmse) = if est.is_empty() {
        (None, None, None, None)
    } else {
        let m = linalg::mean(&est);
        let mse = linalg::neumaier_sum(est.iter().map(|e| (e - truth).powi(2))) / est.len() as f64;
        let sd = if est.len() > 1 { Some(linalg::sd(&est)) } else { None };
        (Some(m), Some(m - truth), sd, Some(mse.sqrt()))
    };
    McReport {
        schema_version: SCHEMA_VERSION,
        pipeline: cfg.pipeline.name().into(),
        replications: cfg.replications,
        n: cfg.n,
        seed: cfg.seed,
        level: cfg.level,
        truth,
        successes,
        failures: records.len() - successes,
        rejection_rate,
        rejection_se,
        mean_estimate,
        bias,
        sd,
        rmse,
        coverage,
        coverage_se,
        records,
        wall_clock: Duration::ZERO,
    }
}

/// Pretty JSON of the whole report, records included.
pub fn write_report_json<W: Write>(report: &McReport, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// One CSV row per replication plus a header.
pub fn write_records_csv<W: Write>(records: &[McRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<McRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{HteDgp, LogitPanelDgp, PlmDgp};

    fn plm_config(threads: Option<usize>) -> McConfig {
        McConfig {
            replications: 12,
            n: 300,
            dgp: DgpSpec::new(Family::Plm(PlmDgp::default()), 300, 0),
            pipeline: Pipeline::PlmTest {
                estimator: PlmEstimator::Lr2sls,
                config: PlmConfig::default(),
                theta_bar: None,
                oracle: false,
            },
            seed: 42,
            level: 0.05,
            threads,
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s: Vec<u64> = (0..1000).map(|i| replication_seed(7, i)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 1000);
        assert_eq!(replication_seed(0, 0), replication_seed(0, 0));
        assert_ne!(replication_seed(0, 0), replication_seed(1, 0));
    }

    #[test]
    fn serial_and_parallel_agree() {
        let mut a = run(&plm_config(Some(1))).unwrap();
        let mut b = run(&plm_config(Some(4))).unwrap();
        a.wall_clock = Duration::ZERO;
        b.wall_clock = Duration::ZERO;
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        assert_eq!(a.failures, 0);
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let r = run(&plm_config(None)).unwrap();
        let mut a = Vec::new();
        write_report_json(&r, &mut a).unwrap();
        let back: McReport = serde_json::from_slice(&a).unwrap();
        let mut b = Vec::new();
        write_report_json(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rates_match_report() {
        let r = run(&plm_config(None)).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&r.records, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 13);
        let back = read_records_csv(&buf[..]).unwrap();
        let rej: Vec<bool> = back.iter().filter_map(|x| x.reject).collect();
        let rate = rej.iter().filter(|x| **x).count() as f64 / rej.len() as f64;
        assert_eq!(Some(rate), r.rejection_rate);
    }

    #[test]
    fn failures_are_counted() {
        let mut cfg = plm_config(None);
        cfg.dgp = DgpSpec::new(
            Family::Plm(PlmDgp {
                pi: 0.0,
                ..PlmDgp::default()
            }),
            300,
            0,
        );
        cfg.pipeline = Pipeline::PlmTest {
            estimator: PlmEstimator::Lr2sls,
            config: PlmConfig::default(),
            theta_bar: None,
            oracle: true,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.failures, 12);
        assert!(r.rejection_rate.is_none());
        assert!(r.records[0].error.as_deref().unwrap().starts_with("IrrelevantInstrument"));
    }

    #[test]
    fn mismatched_pipeline_is_rejected() {
        let mut cfg = plm_config(None);
        cfg.pipeline = Pipeline::HteTest {
            config: HteConfig::default(),
            oracle: false,
        };
        assert!(matches!(run(&cfg), Err(Error::BadSpec(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = McConfig {
            replications: 5,
            n: 200,
            dgp: DgpSpec::new(Family::Hte(HteDgp::default()), 200, 0),
            pipeline: Pipeline::HteTest {
                config: HteConfig::default(),
                oracle: true,
            },
            seed: 1,
            level: 0.05,
            threads: None,
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(McConfig::from_json_str(&text).unwrap(), cfg);
    }

    #[test]
    fn funcdiff_pipeline_runs() {
        let cfg = McConfig {
            replications: 20,
            n: 500,
            dgp: DgpSpec::new(Family::LogitPanel(LogitPanelDgp::default()), 500, 0),
            pipeline: Pipeline::Funcdiff {
                mode: MomentKind::FullyRobust,
                functional: None,
            },
            seed: 3,
            level: 0.05,
            threads: None,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.failures, 0);
        assert!(r.mean_estimate.unwrap().abs() < 0.2);
    }
}
