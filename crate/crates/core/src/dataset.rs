//! Column-typed tables with variable roles, CSV ingestion and the synthetic
//! data-generating processes used throughout the toolkit.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdiff::model::{DiscreteMixtureModel, PmfFamily};
use crate::linalg::normal_cdf;

/// Which column plays which part in the model.
///
/// Serialized as `{"y1": "...", "y2": "...", "z2": ["..."], "x": ["...", ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y2: Option<String>,
    #[serde(default)]
    pub z2: Vec<String>,
    #[serde(default)]
    pub x: Vec<String>,
}

impl Roles {
    pub fn new(y1: &str, y2: &str, z2: &[&str], x: &[&str]) -> Self {
        Roles {
            y1: Some(y1.to_string()),
            y2: Some(y2.to_string()),
            z2: z2.iter().map(|s| s.to_string()).collect(),
            x: x.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn all(&self) -> Vec<&str> {
        let mut out = Vec::new();
        out.extend(self.y1.as_deref());
        out.extend(self.y2.as_deref());
        out.extend(self.z2.iter().map(String::as_str));
        out.extend(self.x.iter().map(String::as_str));
        out
    }
}

/// Immutable table of named real columns of common length `n >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    roles: Roles,
}

impl Dataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, roles: Roles) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                found: columns.len(),
            });
        }
        let n = columns.first().map(Vec::len).unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidDataset("dataset needs at least one row".into()));
        }
        let mut seen = HashSet::new();
        for (name, col) in names.iter().zip(&columns) {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate column name `{name}`")));
            }
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: col.len(),
                });
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("column `{name}`, row {}", i + 1)));
            }
        }
        let data = Dataset {
            n,
            names,
            columns,
            roles: Roles::default(),
        };
        data.with_roles(roles)
    }

    /// Replace the role map, validating that every role column exists and that
    /// roles are disjoint.
    pub fn with_roles(mut self, roles: Roles) -> Result<Self> {
        let mut used = HashSet::new();
        for name in roles.all() {
            if !self.names.iter().any(|n| n == name) {
                return Err(Error::MissingColumn(name.to_string()));
            }
            if !used.insert(name) {
                return Err(Error::InvalidDataset(format!(
                    "column `{name}` assigned to more than one role"
                )));
            }
        }
        self.roles = roles;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn role_column(&self, role: &Option<String>, label: &str) -> Result<&[f64]> {
        let name = role
            .as_deref()
            .ok_or_else(|| Error::BadSpec(format!("role `{label}` is not assigned")))?;
        self.column(name)
    }

    pub fn y1(&self) -> Result<&[f64]> {
        self.role_column(&self.roles.y1, "y1")
    }

    pub fn y2(&self) -> Result<&[f64]> {
        self.role_column(&self.roles.y2, "y2")
    }

    pub fn z2_columns(&self) -> Result<Vec<&[f64]>> {
        if self.roles.z2.is_empty() {
            return Err(Error::BadSpec("role `z2` is not assigned".into()));
        }
        self.roles.z2.iter().map(|n| self.column(n)).collect()
    }

    pub fn x_columns(&self) -> Result<Vec<&[f64]>> {
        self.roles.x.iter().map(|n| self.column(n)).collect()
    }

    /// Control matrix `X` (n x d_X).
    pub fn x_matrix(&self) -> Result<DMatrix<f64>> {
        let cols = self.x_columns()?;
        Ok(DMatrix::from_fn(self.n, cols.len(), |i, j| cols[j][i]))
    }

    /// Exogenous matrix `W = (X, Z2)`.
    ///
    /// Instrument columns that are exact copies of a control column are
    /// dropped: they add no information to `E[. | W]` beyond `X`.
    pub fn w_matrix(&self) -> Result<DMatrix<f64>> {
        let mut cols = self.x_columns()?;
        for z in self.z2_columns()? {
            if !cols.iter().any(|c| *c == z) {
                cols.push(z);
            }
        }
        Ok(DMatrix::from_fn(self.n, cols.len(), |i, j| cols[j][i]))
    }

    /// Sub-dataset with the given rows, same roles.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&i| c[i]).collect())
            .collect();
        Dataset::new(self.names.clone(), columns, self.roles.clone())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        let mut row = Vec::with_capacity(self.names.len());
        for i in 0..self.n {
            row.clear();
            row.extend(self.columns.iter().map(|c| format!("{}", c[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Parse CSV text (header row, comma separated, `.` decimals) into a dataset.
pub fn read_csv<R: Read>(reader: R, roles: Roles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(_) => return Err(Error::EmptyFile),
    };
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::EmptyFile);
    }
    for name in roles.all() {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::MissingColumn(name.to_string()));
        }
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: r + 1,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: headers[j].clone(),
                message: format!("`{cell}` is not a real number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: headers[j].clone(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::EmptyFile);
    }
    Dataset::new(headers, columns, roles)
}

pub fn load_csv(path: impl AsRef<Path>, roles: Roles) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(std::io::BufReader::new(file), roles)
}

// ---------------------------------------------------------------------------
// Data-generating processes
// ---------------------------------------------------------------------------

/// A seeded synthetic data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    Plm(PlmDgp),
    Hte(HteDgp),
    RandomCoefficient(RandomCoefficientDgp),
    LogitPanel(LogitPanelDgp),
    NormalMeans(NormalMeansDgp),
    Ame(AmeDgp),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Plm(_) => "plm",
            Family::Hte(_) => "hte",
            Family::RandomCoefficient(_) => "random-coefficient",
            Family::LogitPanel(_) => "logit-panel",
            Family::NormalMeans(_) => "normal-means",
            Family::Ame(_) => "ame",
        }
    }
}

impl DgpSpec {
    pub fn new(family: Family, n: usize, seed: u64) -> Self {
        DgpSpec { n, seed, family }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DgpSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::BadSpec("n must be at least 1".into()));
        }
        match &self.family {
            Family::Plm(p) => p.validate(),
            Family::Hte(h) => h.validate(),
            Family::RandomCoefficient(r) => r.validate(),
            Family::LogitPanel(l) => l.validate(),
            Family::NormalMeans(m) => m.validate(),
            Family::Ame(a) => a.validate(),
        }
    }

    /// Generate the dataset (for the logit panel, the model is discarded).
    pub fn generate(&self) -> Result<Dataset> {
        match &self.family {
            Family::Plm(_) => gen_plm(self),
            Family::Hte(_) => gen_hte(self),
            Family::RandomCoefficient(_) => gen_random_coefficient(self),
            Family::LogitPanel(_) => gen_logit_panel(self).map(|(_, d)| d),
            Family::NormalMeans(_) => gen_normal_means(self),
            Family::Ame(_) => gen_ame(self),
        }
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_correlation(rho: f64) -> Result<()> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::BadSpec(format!("correlation {rho} outside (-1, 1)")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::BadSpec(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::BadSpec(format!(
            "{name} has length {}, expected {d}",
            v.len()
        )));
    }
    Ok(())
}

fn x_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

// ---- partly linear model --------------------------------------------------

/// Partly linear model with an endogenous regressor and a binary instrument:
/// `Y1 = theta0 Y2 + eta0(X) + eps`, `Y2 = m0'X + pi Z2 + u`,
/// `Z2 = 1{X'beta + nu > 0}`, `corr(u, eps) = rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlmDgp {
    pub theta0: f64,
    pub d: usize,
    pub pi: f64,
    pub rho: f64,
    pub sigma_u: f64,
    pub sigma_eps: f64,
    /// Propensity index coefficients for the instrument.
    pub beta: Vec<f64>,
    /// Linear part of `eta0(X)`.
    pub eta_linear: Vec<f64>,
    /// Coefficient on `X1^2` in `eta0(X)`.
    pub eta_quadratic: f64,
    /// Linear coefficients of `X` in the first stage.
    pub m0: Vec<f64>,
    /// Reject `pi = 0` at validation time.
    pub require_relevance: bool,
    /// Make the instrument a deterministic function of `X` and add a copy of
    /// it to the controls (no exclusion restriction).
    pub instrument_in_controls: bool,
}

impl Default for PlmDgp {
    fn default() -> Self {
        PlmDgp {
            theta0: 1.0,
            d: 5,
            pi: 1.0,
            rho: 0.5,
            sigma_u: 1.0,
            sigma_eps: 1.0,
            beta: vec![1.0, 0.5, 0.0, 0.0, 0.0],
            eta_linear: vec![1.0, -0.5, 0.0, 0.0, 0.0],
            eta_quadratic: 0.5,
            m0: vec![0.5, 0.0, 0.5, 0.0, 0.0],
            require_relevance: false,
            instrument_in_controls: false,
        }
    }
}

/// Conditional means evaluated at the true nuisance functions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlmOracle {
    /// `E[Y1 | X]`
    pub r1: Vec<f64>,
    /// `E[Y2 | X]`
    pub r2: Vec<f64>,
    /// `E[Y2 | W]`
    pub mu: Vec<f64>,
    /// `eta0(X)`
    pub eta: Vec<f64>,
    /// `E[Z2 | X]`
    pub propensity: Vec<f64>,
}

impl PlmDgp {
    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::BadSpec("d must be at least 1".into()));
        }
        check_correlation(self.rho)?;
        check_positive("sigma_u", self.sigma_u)?;
        check_positive("sigma_eps", self.sigma_eps)?;
        check_len("beta", &self.beta, self.d)?;
        check_len("eta_linear", &self.eta_linear, self.d)?;
        check_len("m0", &self.m0, self.d)?;
        if self.require_relevance && self.pi == 0.0 {
            return Err(Error::BadSpec(
                "pi = 0 gives an irrelevant instrument but relevance is required".into(),
            ));
        }
        Ok(())
    }

    pub fn eta0(&self, x: &[f64]) -> f64 {
        crate::linalg::dot(&self.eta_linear, &x[..self.d]) + self.eta_quadratic * x[0] * x[0]
    }

    fn index(&self, x: &[f64]) -> f64 {
        crate::linalg::dot(&self.beta, &x[..self.d])
    }

    /// `E[Z2 | X = x]`.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        if self.instrument_in_controls {
            if self.index(x) > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf(self.index(x))
        }
    }

    pub fn first_stage_mean(&self, x: &[f64]) -> f64 {
        crate::linalg::dot(&self.m0, &x[..self.d])
    }

    /// True conditional means for every row of a dataset produced by `gen_plm`.
    pub fn oracle(&self, data: &Dataset) -> Result<PlmOracle> {
        let names = x_names(self.d);
        let xs: Vec<&[f64]> = names
            .iter()
            .map(|n| data.column(n))
            .collect::<Result<_>>()?;
        let z2 = data.column("z2")?;
        let n = data.n();
        let mut out = PlmOracle {
            r1: Vec::with_capacity(n),
            r2: Vec::with_capacity(n),
            mu: Vec::with_capacity(n),
            eta: Vec::with_capacity(n),
            propensity: Vec::with_capacity(n),
        };
        let mut row = vec![0.0; self.d];
        for i in 0..n {
            for (j, c) in xs.iter().enumerate() {
                row[j] = c[i];
            }
            let p = self.propensity(&row);
            let m = self.first_stage_mean(&row);
            let eta = self.eta0(&row);
            let r2 = m + self.pi * p;
            out.r1.push(self.theta0 * r2 + eta);
            out.r2.push(r2);
            out.mu.push(m + self.pi * z2[i]);
            out.eta.push(eta);
            out.propensity.push(p);
        }
        Ok(out)
    }

    /// Population-weighted sample for exact conditional expectations given
    /// `X`: each of `draws` control vectors appears twice (`Z2 = 0, 1`) with
    /// weights `(1 - p(X))/draws` and `p(X)/draws`, and the outcomes are set
    /// to `E[Y | W]`. Sample averages of moments affine in `Y` over this
    /// sample equal Monte Carlo expectations over `X` only.
    pub fn conditional_sample(&self, draws: usize, seed: u64) -> Result<(Dataset, Vec<f64>)> {
        self.validate()?;
        if self.instrument_in_controls {
            return Err(Error::BadSpec(
                "conditional sample requires an excluded instrument".into(),
            ));
        }
        let mut rng = rng_for(seed);
        let mut xs = vec![Vec::with_capacity(2 * draws); self.d];
        let (mut y1, mut y2, mut z2, mut w) = (vec![], vec![], vec![], vec![]);
        let mut row = vec![0.0; self.d];
        for _ in 0..draws {
            for v in row.iter_mut() {
                *v = std_normal(&mut rng);
            }
            let p = self.propensity(&row);
            for z in [0.0, 1.0] {
                for (j, c) in xs.iter_mut().enumerate() {
                    c.push(row[j]);
                }
                let mean_y2 = self.first_stage_mean(&row) + self.pi * z;
                y2.push(mean_y2);
                y1.push(self.theta0 * mean_y2 + self.eta0(&row));
                z2.push(z);
                w.push(if z == 1.0 { p } else { 1.0 - p } / draws as f64);
            }
        }
        let data = plm_table(self.d, y1, y2, z2, xs, false)?;
        Ok((data, w))
    }
}

fn plm_table(
    d: usize,
    y1: Vec<f64>,
    y2: Vec<f64>,
    z2: Vec<f64>,
    xs: Vec<Vec<f64>>,
    duplicate_instrument: bool,
) -> Result<Dataset> {
    let xn = x_names(d);
    let mut names = vec!["y1".to_string(), "y2".to_string(), "z2".to_string()];
    names.extend(xn.iter().cloned());
    let mut x_roles: Vec<&str> = xn.iter().map(String::as_str).collect();
    let mut columns = vec![y1, y2, z2.clone()];
    columns.extend(xs);
    if duplicate_instrument {
        names.push("x_z2".into());
        columns.push(z2);
        x_roles.push("x_z2");
    }
    let roles = Roles::new("y1", "y2", &["z2"], &x_roles);
    Dataset::new(names, columns, roles)
}

pub fn gen_plm(spec: &DgpSpec) -> Result<Dataset> {
    let Family::Plm(p) = &spec.family else {
        return Err(Error::BadSpec("gen_plm needs family = plm".into()));
    };
    spec.validate()?;
    let n = spec.n;
    let mut rng = rng_for(spec.seed);
    let mut xs = vec![Vec::with_capacity(n); p.d];
    let (mut y1, mut y2, mut z2) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut row = vec![0.0; p.d];
    let s = (1.0 - p.rho * p.rho).sqrt();
    for _ in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = std_normal(&mut rng);
            xs[j].push(*v);
        }
        let nu = std_normal(&mut rng);
        let e1 = std_normal(&mut rng);
        let e2 = std_normal(&mut rng);
        let idx = p.index(&row);
        let z = if p.instrument_in_controls {
            (idx > 0.0) as u8 as f64
        } else {
            (idx + nu > 0.0) as u8 as f64
        };
        let u = p.sigma_u * e1;
        let eps = p.sigma_eps * (p.rho * e1 + s * e2);
        let y2i = p.first_stage_mean(&row) + p.pi * z + u;
        y1.push(p.theta0 * y2i + p.eta0(&row) + eps);
        y2.push(y2i);
        z2.push(z);
    }
    plm_table(p.d, y1, y2, z2, xs, p.instrument_in_controls)
}

// ---- heterogeneous treatment effects --------------------------------------

/// Interacted model
/// `Y1 = theta0 Y2 + eta01 + eta02'(X - eta03) + sum_l eta04_l Y2 (X_l - eta03_l) + eps`
/// with first stage `Y2 = c + pi Z2 + gamma'(X - eta03) + u`, `Z2 ~ N(0,1)`
/// and `X ~ N(eta03, x_sd^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HteDgp {
    pub d: usize,
    pub theta0: f64,
    pub eta01: f64,
    pub eta02: Vec<f64>,
    pub eta03: Vec<f64>,
    pub eta04: Vec<f64>,
    pub pi: f64,
    pub y2_intercept: f64,
    pub gamma: Vec<f64>,
    pub rho: f64,
    pub sigma_u: f64,
    pub sigma_eps: f64,
    pub x_sd: f64,
}

impl Default for HteDgp {
    fn default() -> Self {
        let d = 10;
        let mut eta02 = vec![0.0; d];
        eta02[0] = 0.5;
        eta02[1] = -0.5;
        let mut gamma = vec![0.0; d];
        gamma[0] = 0.3;
        gamma[2] = 0.3;
        HteDgp {
            d,
            theta0: 1.0,
            eta01: 0.5,
            eta02,
            eta03: vec![0.0; d],
            eta04: vec![0.0; d],
            pi: 1.0,
            y2_intercept: 0.5,
            gamma,
            rho: 0.5,
            sigma_u: 1.0,
            sigma_eps: 1.0,
            x_sd: 1.0,
        }
    }
}

impl HteDgp {
    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::BadSpec("d must be at least 1".into()));
        }
        check_len("eta02", &self.eta02, self.d)?;
        check_len("eta03", &self.eta03, self.d)?;
        check_len("eta04", &self.eta04, self.d)?;
        check_len("gamma", &self.gamma, self.d)?;
        check_correlation(self.rho)?;
        check_positive("sigma_u", self.sigma_u)?;
        check_positive("sigma_eps", self.sigma_eps)?;
        check_positive("x_sd", self.x_sd)?;
        Ok(())
    }

    /// True `p0(W) = E[Y2 | W]` for every row of a dataset produced by `gen_hte`.
    pub fn oracle_propensity(&self, data: &Dataset) -> Result<Vec<f64>> {
        let z2 = data.column("z2")?;
        let xs: Vec<&[f64]> = x_names(self.d)
            .iter()
            .map(|n| data.column(n))
            .collect::<Result<_>>()?;
        Ok((0..data.n())
            .map(|i| {
                let lin: f64 = (0..self.d)
                    .map(|j| self.gamma[j] * (xs[j][i] - self.eta03[j]))
                    .sum();
                self.y2_intercept + self.pi * z2[i] + lin
            })
            .collect())
    }
}

impl HteDgp {
    /// Coefficients of `Q_l`: `(theta0, eta01, eta02, eta04 without entry l)`.
    pub fn step_two_coefficients(&self, l: usize) -> Vec<f64> {
        let mut g = vec![self.theta0, self.eta01];
        g.extend(&self.eta02);
        g.extend(self.eta04.iter().enumerate().filter(|(j, _)| *j != l).map(|(_, v)| *v));
        g
    }

    /// `draws` rows of `W` with both outcomes replaced by `E[Y | W]`.
    /// Sample means of moments affine in `(Y1, Y2)` given `W` equal Monte
    /// Carlo expectations over `W` only.
    pub fn conditional_sample(&self, draws: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = rng_for(seed);
        let d = self.d;
        let mut xs = vec![Vec::with_capacity(draws); d];
        let (mut y1, mut y2, mut z2) = (vec![], vec![], vec![]);
        let mut xc = vec![0.0; d];
        for _ in 0..draws {
            for j in 0..d {
                xc[j] = self.x_sd * std_normal(&mut rng);
                xs[j].push(self.eta03[j] + xc[j]);
            }
            let z = std_normal(&mut rng);
            let p = self.y2_intercept + self.pi * z + crate::linalg::dot(&self.gamma, &xc);
            y2.push(p);
            y1.push(
                self.theta0 * p
                    + self.eta01
                    + crate::linalg::dot(&self.eta02, &xc)
                    + p * crate::linalg::dot(&self.eta04, &xc),
            );
            z2.push(z);
        }
        plm_table(d, y1, y2, z2, xs, false)
    }
}

pub fn gen_hte(spec: &DgpSpec) -> Result<Dataset> {
    let Family::Hte(h) = &spec.family else {
        return Err(Error::BadSpec("gen_hte needs family = hte".into()));
    };
    spec.validate()?;
    let n = spec.n;
    let d = h.d;
    let mut rng = rng_for(spec.seed);
    let mut xs = vec![Vec::with_capacity(n); d];
    let (mut y1, mut y2, mut z2) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let s = (1.0 - h.rho * h.rho).sqrt();
    let mut xc = vec![0.0; d];
    for _ in 0..n {
        for j in 0..d {
            xc[j] = h.x_sd * std_normal(&mut rng);
            xs[j].push(h.eta03[j] + xc[j]);
        }
        let z = std_normal(&mut rng);
        let e1 = std_normal(&mut rng);
        let e2 = std_normal(&mut rng);
        let u = h.sigma_u * e1;
        let eps = h.sigma_eps * (h.rho * e1 + s * e2);
        let y2i = h.y2_intercept + h.pi * z + crate::linalg::dot(&h.gamma, &xc) + u;
        let y1i = h.theta0 * y2i
            + h.eta01
            + crate::linalg::dot(&h.eta02, &xc)
            + y2i * crate::linalg::dot(&h.eta04, &xc)
            + eps;
        y1.push(y1i);
        y2.push(y2i);
        z2.push(z);
    }
    plm_table(d, y1, y2, z2, xs, false)
}

// ---- linear random coefficients -------------------------------------------

/// `Y = theta0 X1 + alpha0 + alpha1 W` with `(alpha0, alpha1)` drawn from a
/// finite grid independently of `(X1, W)`, `W ~ N(0,1)` and
/// `X1 = a + b W + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomCoefficientDgp {
    pub theta0: f64,
    /// Support points `(alpha0, alpha1)`.
    pub alpha_grid: Vec<[f64; 2]>,
    pub alpha_weights: Vec<f64>,
    pub x1_intercept: f64,
    pub x1_slope: f64,
    pub x1_noise: f64,
}

impl Default for RandomCoefficientDgp {
    fn default() -> Self {
        RandomCoefficientDgp {
            theta0: 1.0,
            alpha_grid: vec![[-1.0, 0.5], [0.0, 1.5], [1.0, -0.5], [2.0, 1.0]],
            alpha_weights: vec![0.25, 0.25, 0.25, 0.25],
            x1_intercept: 0.5,
            x1_slope: 0.8,
            x1_noise: 1.0,
        }
    }
}

impl RandomCoefficientDgp {
    fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(Error::BadSpec("alpha grid is empty".into()));
        }
        check_len("alpha_weights", &self.alpha_weights, self.alpha_grid.len())?;
        check_weights(&self.alpha_weights)?;
        check_positive("x1_noise", self.x1_noise)
    }

    pub fn mean_alpha(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (a, w) in self.alpha_grid.iter().zip(&self.alpha_weights) {
            m[0] += w * a[0];
            m[1] += w * a[1];
        }
        m
    }

    /// `E[X1 | X2]` and `E[Y | X2]` at each row of a generated dataset.
    pub fn oracle_means(&self, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = data.column("w")?;
        let ma = self.mean_alpha();
        let ex1: Vec<f64> = w
            .iter()
            .map(|&wi| self.x1_intercept + self.x1_slope * wi)
            .collect();
        let ey = ex1
            .iter()
            .zip(w)
            .map(|(e, &wi)| self.theta0 * e + ma[0] + ma[1] * wi)
            .collect();
        Ok((ex1, ey))
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::BadSpec("weights must be non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::BadSpec(format!(
            "weights sum to {s}, expected 1 within 1e-12"
        )));
    }
    Ok(())
}

fn draw_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rand::Rng::random(rng);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub fn gen_random_coefficient(spec: &DgpSpec) -> Result<Dataset> {
    let Family::RandomCoefficient(rc) = &spec.family else {
        return Err(Error::BadSpec("needs family = random-coefficient".into()));
    };
    spec.validate()?;
    let mut rng = rng_for(spec.seed);
    let n = spec.n;
    let (mut y, mut x1, mut w, mut bin) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let wi = std_normal(&mut rng);
        let x1i = rc.x1_intercept + rc.x1_slope * wi + rc.x1_noise * std_normal(&mut rng);
        let k = draw_index(&mut rng, &rc.alpha_weights);
        let a = rc.alpha_grid[k];
        y.push(rc.theta0 * x1i + a[0] + a[1] * wi);
        x1.push(x1i);
        w.push(wi);
        bin.push(k as f64);
    }
    let roles = Roles {
        y1: Some("y".into()),
        y2: None,
        z2: vec![],
        x: vec!["x1".into(), "w".into()],
    };
    Dataset::new(
        vec!["y".into(), "x1".into(), "w".into(), "alpha_bin".into()],
        vec![y, x1, w, bin],
        roles,
    )
}

// ---- two-period binary logit panel ----------------------------------------

/// Two-period logit with fixed effects on a finite grid:
/// `P(Y_t = 1 | alpha, x_t) = logistic(alpha + theta0 x_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitPanelDgp {
    pub theta0: f64,
    pub alpha_grid: Vec<f64>,
    pub alpha_weights: Vec<f64>,
    /// Covariate paths `(x_1, x_2)`, one per cell.
    pub cells: Vec<[f64; 2]>,
    pub cell_weights: Vec<f64>,
}

impl Default for LogitPanelDgp {
    fn default() -> Self {
        LogitPanelDgp {
            theta0: 0.5,
            alpha_grid: vec![-1.0, 0.0, 1.0],
            alpha_weights: vec![0.3, 0.4, 0.3],
            cells: vec![[0.0, 1.0]],
            cell_weights: vec![1.0],
        }
    }
}

impl LogitPanelDgp {
    fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.cells.is_empty() {
            return Err(Error::BadSpec("empty alpha grid or cell list".into()));
        }
        check_len("alpha_weights", &self.alpha_weights, self.alpha_grid.len())?;
        check_len("cell_weights", &self.cell_weights, self.cells.len())?;
        check_weights(&self.alpha_weights)?;
        check_weights(&self.cell_weights)
    }

    pub fn model(&self) -> Result<DiscreteMixtureModel> {
        self.validate()?;
        DiscreteMixtureModel::new(
            PmfFamily::LogitPanelT2 {
                cells: self.cells.clone(),
            },
            self.alpha_grid.clone(),
            Some(self.alpha_weights.clone()),
            self.cell_weights.clone(),
        )
    }
}

/// Sample a two-period logit panel; returns the model and the data
/// (`y_t1`, `y_t2`, `x_t1`, `x_t2`, `cell`).
pub fn gen_logit_panel(spec: &DgpSpec) -> Result<(DiscreteMixtureModel, Dataset)> {
    let Family::LogitPanel(lp) = &spec.family else {
        return Err(Error::BadSpec("needs family = logit-panel".into()));
    };
    spec.validate()?;
    let model = lp.model()?;
    let mut rng = rng_for(spec.seed);
    let n = spec.n;
    let mut cols = vec![Vec::with_capacity(n); 5];
    let logistic = |v: f64| 1.0 / (1.0 + (-v).exp());
    for _ in 0..n {
        let c = draw_index(&mut rng, &lp.cell_weights);
        let a = lp.alpha_grid[draw_index(&mut rng, &lp.alpha_weights)];
        let x = lp.cells[c];
        for t in 0..2 {
            let u: f64 = rand::Rng::random(&mut rng);
            let y = (u < logistic(a + lp.theta0 * x[t])) as u8 as f64;
            cols[t].push(y);
        }
        cols[2].push(x[0]);
        cols[3].push(x[1]);
        cols[4].push(c as f64);
    }
    let data = Dataset::new(
        ["y_t1", "y_t2", "x_t1", "x_t2", "cell"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        cols,
        Roles::default(),
    )?;
    Ok((model, data))
}

// ---- normal means ----------------------------------------------------------

/// `Z = alpha + sqrt(theta0) u` with discrete `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalMeansDgp {
    pub theta0: f64,
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for NormalMeansDgp {
    fn default() -> Self {
        NormalMeansDgp {
            theta0: 1.0,
            support: vec![-1.0, 1.0],
            weights: vec![0.5, 0.5],
        }
    }
}

impl NormalMeansDgp {
    fn validate(&self) -> Result<()> {
        check_positive("theta0", self.theta0)?;
        if self.support.is_empty() {
            return Err(Error::BadSpec("empty support".into()));
        }
        check_len("weights", &self.weights, self.support.len())?;
        check_weights(&self.weights)
    }
}

pub fn gen_normal_means(spec: &DgpSpec) -> Result<Dataset> {
    let Family::NormalMeans(nm) = &spec.family else {
        return Err(Error::BadSpec("needs family = normal-means".into()));
    };
    spec.validate()?;
    let mut rng = rng_for(spec.seed);
    let sd = nm.theta0.sqrt();
    let (mut z, mut alpha) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n));
    for _ in 0..spec.n {
        let a = nm.support[draw_index(&mut rng, &nm.weights)];
        z.push(a + sd * std_normal(&mut rng));
        alpha.push(a);
    }
    Dataset::new(
        vec!["z".into(), "alpha".into()],
        vec![z, alpha],
        Roles::default(),
    )
}

// ---- average marginal effects ---------------------------------------------

/// `Y = alpha1 + alpha2 X`, `X | Z2 ~ N(pi Z2, x_sd^2)`, `Z2 ~ Bernoulli(p_z)`,
/// `alpha_k ~ N(mean_k, sd_k^2)` independent of `(X, Z2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmeDgp {
    pub pi: f64,
    pub x_sd: f64,
    pub p_z: f64,
    pub alpha1_mean: f64,
    pub alpha1_sd: f64,
    pub alpha2_mean: f64,
    pub alpha2_sd: f64,
}

impl Default for AmeDgp {
    fn default() -> Self {
        AmeDgp {
            pi: 1.0,
            x_sd: 1.0,
            p_z: 0.5,
            alpha1_mean: 1.0,
            alpha1_sd: 0.5,
            alpha2_mean: 0.7,
            alpha2_sd: 0.3,
        }
    }
}

impl AmeDgp {
    fn validate(&self) -> Result<()> {
        check_positive("x_sd", self.x_sd)?;
        if !(0.0..=1.0).contains(&self.p_z) {
            return Err(Error::BadSpec("p_z must lie in [0, 1]".into()));
        }
        if self.alpha1_sd < 0.0 || self.alpha2_sd < 0.0 {
            return Err(Error::BadSpec("alpha scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Conditional density of `X` given `Z2` and its `x`-derivative.
    pub fn density(&self, x: f64, z2: f64) -> (f64, f64) {
        let s = self.x_sd;
        let t = (x - self.pi * z2) / s;
        let f = crate::linalg::normal_pdf(t) / s;
        (f, -t / s * f)
    }
}

pub fn gen_ame(spec: &DgpSpec) -> Result<Dataset> {
    let Family::Ame(a) = &spec.family else {
        return Err(Error::BadSpec("needs family = ame".into()));
    };
    spec.validate()?;
    let mut rng = rng_for(spec.seed);
    let n = spec.n;
    let (mut y, mut x, mut z) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let u: f64 = rand::Rng::random(&mut rng);
        let zi = (u < a.p_z) as u8 as f64;
        let xi = a.pi * zi + a.x_sd * std_normal(&mut rng);
        let a1 = a.alpha1_mean + a.alpha1_sd * std_normal(&mut rng);
        let a2 = a.alpha2_mean + a.alpha2_sd * std_normal(&mut rng);
        y.push(a1 + a2 * xi);
        x.push(xi);
        z.push(zi);
    }
    let roles = Roles {
        y1: Some("y".into()),
        y2: None,
        z2: vec!["z2".into()],
        x: vec!["x".into()],
    };
    Dataset::new(vec!["y".into(), "x".into(), "z2".into()], vec![y, x, z], roles)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "y1,y2,x1\n1.0,2.0,3.0\n4.5,-1,0\n7,8e-1,9\n";

    #[test]
    fn parses_three_rows() {
        let roles = Roles {
            y1: Some("y1".into()),
            y2: Some("y2".into()),
            z2: vec![],
            x: vec!["x1".into()],
        };
        let d = read_csv(CSV.as_bytes(), roles).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.y2().unwrap(), &[2.0, -1.0, 0.8]);
    }

    #[test]
    fn absent_role_column_is_reported() {
        let roles = Roles {
            z2: vec!["z9".into()],
            ..Roles::default()
        };
        assert_eq!(
            read_csv(CSV.as_bytes(), roles).unwrap_err(),
            Error::MissingColumn("z9".into())
        );
    }

    #[test]
    fn parse_error_reports_row_and_column() {
        let bad = "a,b\n1,2\n3,oops\n";
        match read_csv(bad.as_bytes(), Roles::default()).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(
            read_csv("".as_bytes(), Roles::default()).unwrap_err(),
            Error::EmptyFile
        );
        assert_eq!(
            read_csv("a,b\n".as_bytes(), Roles::default()).unwrap_err(),
            Error::EmptyFile
        );
    }

    #[test]
    fn missing_cells_are_rejected() {
        let bad = "a,b\n1,\n";
        assert!(matches!(
            read_csv(bad.as_bytes(), Roles::default()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn overlapping_roles_are_rejected() {
        let roles = Roles {
            y1: Some("y1".into()),
            y2: Some("y1".into()),
            ..Roles::default()
        };
        assert!(matches!(
            read_csv(CSV.as_bytes(), roles),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = DgpSpec::new(Family::Plm(PlmDgp::default()), 50, 3);
        let d = gen_plm(&spec).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), d.roles().clone()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn generators_are_deterministic() {
        for family in [
            Family::Plm(PlmDgp::default()),
            Family::Hte(HteDgp::default()),
            Family::RandomCoefficient(RandomCoefficientDgp::default()),
            Family::LogitPanel(LogitPanelDgp::default()),
            Family::NormalMeans(NormalMeansDgp::default()),
            Family::Ame(AmeDgp::default()),
        ] {
            let spec = DgpSpec::new(family, 200, 11);
            assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
            assert_ne!(spec.generate().unwrap(), spec.with_seed(12).generate().unwrap());
        }
    }

    #[test]
    fn relevance_required_rejects_zero_pi() {
        let p = PlmDgp {
            pi: 0.0,
            require_relevance: true,
            ..PlmDgp::default()
        };
        let spec = DgpSpec::new(Family::Plm(p), 10, 1);
        assert!(matches!(gen_plm(&spec), Err(Error::BadSpec(_))));
    }

    #[test]
    fn hte_dimension_mismatch() {
        let h = HteDgp {
            eta04: vec![0.0; 3],
            ..HteDgp::default()
        };
        let spec = DgpSpec::new(Family::Hte(h), 10, 1);
        assert!(matches!(gen_hte(&spec), Err(Error::BadSpec(_))));
    }

    #[test]
    fn logit_weights_must_sum_to_one() {
        let lp = LogitPanelDgp {
            alpha_weights: vec![0.3, 0.4, 0.3 + 1e-9],
            ..LogitPanelDgp::default()
        };
        let spec = DgpSpec::new(Family::LogitPanel(lp), 10, 1);
        assert!(matches!(gen_logit_panel(&spec), Err(Error::BadSpec(_))));
    }

    #[test]
    fn dgp_spec_json_round_trip() {
        let spec = DgpSpec::new(Family::Hte(HteDgp::default()), 100, 5);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"family\":\"hte\""));
        let back: DgpSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn duplicate_instrument_is_dropped_from_w() {
        let p = PlmDgp {
            instrument_in_controls: true,
            ..PlmDgp::default()
        };
        let d = gen_plm(&DgpSpec::new(Family::Plm(p), 20, 1)).unwrap();
        assert_eq!(d.x_matrix().unwrap().ncols(), 6);
        assert_eq!(d.w_matrix().unwrap().ncols(), 6);
    }
}
