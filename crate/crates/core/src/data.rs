//! Datasets, model specifications, parameter containers and fit reports.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;
const X_TOLERANCE: f64 = 1e-9;

/// Per-point covariates, `M` values for every (replicate, point) pair. The
/// intercept of the logistic state model is implicit and not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    n_points: usize,
    m: usize,
    values: Vec<f64>,
}

impl Covariates {
    /// `values` is laid out replicate-major, then point, then covariate.
    pub fn new(n_replicates: usize, n_points: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if m == 0 || values.len() != n_replicates * n_points * m {
            return Err(Error::InvalidData(format!(
                "covariate array has {} values, expected {n_replicates} x {n_points} x {m}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate".into()));
        }
        Ok(Covariates { n_points, m, values })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, k: usize, i: usize) -> &[f64] {
        let start = (k * self.n_points + i) * self.m;
        &self.values[start..start + self.m]
    }

    /// Covariate row with the leading intercept, `(1, v_1, ..., v_M)`.
    pub fn design_row(&self, k: usize, i: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.m + 1);
        row.push(1.0);
        row.extend_from_slice(self.get(k, i));
        row
    }
}

/// `N` replicate curves observed on a common grid of `n` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: DMatrix<f64>,
    covariates: Option<Covariates>,
}

impl Dataset {
    /// `y` is `N x n`, one replicate per row.
    pub fn new(x: Vec<f64>, y: DMatrix<f64>, covariates: Option<Covariates>) -> Result<Self> {
        if x.len() < 4 {
            return Err(Error::GridTooSmall(x.len()));
        }
        Self::new_short(x, y, covariates)
    }

    /// Same checks as [`Dataset::new`] except the minimum grid length; such a
    /// dataset supports the latent-state computations but not a spline basis.
    pub fn new_short(x: Vec<f64>, y: DMatrix<f64>, covariates: Option<Covariates>) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::GridTooSmall(n));
        }
        if let Some(i) = (1..n).find(|&i| !(x[i] > x[i - 1])) {
            return Err(Error::NonIncreasingGrid(i));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite grid value".into()));
        }
        if y.nrows() == 0 {
            return Err(Error::InvalidData("no replicates".into()));
        }
        if y.ncols() != n {
            return Err(Error::InvalidData(format!(
                "responses have {} columns, grid has {n} points",
                y.ncols()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("missing or non-finite response".into()));
        }
        if let Some(c) = &covariates {
            if c.n_points != n || c.values.len() != y.nrows() * n * c.m {
                return Err(Error::InvalidData("covariate dimensions do not match (N, n, M)".into()));
            }
        }
        Ok(Dataset { x, y, covariates })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n_replicates(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.x.len()
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    pub fn replicate(&self, k: usize) -> Vec<f64> {
        self.y.row(k).iter().copied().collect()
    }

    /// Reads the long-format CSV: `replicate, point, x, y, v1..vM`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?
            .clone();
        let expected = ["replicate", "point", "x", "y"];
        if headers.len() < 4 || headers.iter().take(4).zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse {
                row: 1,
                msg: "header must start with replicate,point,x,y".into(),
            });
        }
        let m = headers.len() - 4;
        for (c, h) in headers.iter().skip(4).enumerate() {
            if h != format!("v{}", c + 1) {
                return Err(Error::Parse {
                    row: 1,
                    msg: format!("covariate column {} must be named v{}", c + 5, c + 1),
                });
            }
        }

        struct Row {
            k: usize,
            i: usize,
            x: f64,
            y: f64,
            v: Vec<f64>,
        }
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Parse { row: line, msg: e.to_string() })?;
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    row: line,
                    msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            let int = |s: &str, name: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v),
                    _ => Err(Error::Parse { row: line, msg: format!("{name} must be a positive integer, got {s:?}") }),
                }
            };
            let real = |s: &str, name: &str| -> Result<f64> {
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Parse { row: line, msg: format!("{name} must be a finite number, got {s:?}") }),
                }
            };
            let v = (0..m)
                .map(|c| real(&rec[4 + c], &format!("v{}", c + 1)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(Row {
                k: int(&rec[0], "replicate")?,
                i: int(&rec[1], "point")?,
                x: real(&rec[2], "x")?,
                y: real(&rec[3], "y")?,
                v,
            });
        }
        let n_rep = rows.iter().map(|r| r.k).max().unwrap_or(0);
        let n = rows.iter().map(|r| r.i).max().unwrap_or(0);
        if n_rep == 0 {
            return Err(Error::InvalidData("no data rows".into()));
        }
        let mut seen = vec![false; n_rep * n];
        let mut x: Vec<Option<f64>> = vec![None; n];
        let mut y = DMatrix::zeros(n_rep, n);
        let mut cov = vec![0.0; n_rep * n * m];
        for (idx, r) in rows.iter().enumerate() {
            let slot = (r.k - 1) * n + (r.i - 1);
            if seen[slot] {
                return Err(Error::Parse {
                    row: idx + 2,
                    msg: format!("duplicate (replicate {}, point {})", r.k, r.i),
                });
            }
            seen[slot] = true;
            match x[r.i - 1] {
                None => x[r.i - 1] = Some(r.x),
                Some(x0) if (x0 - r.x).abs() > X_TOLERANCE => {
                    return Err(Error::XInconsistent { point: r.i, replicate: r.k });
                }
                _ => {}
            }
            y[(r.k - 1, r.i - 1)] = r.y;
            cov[slot * m..slot * m + m].copy_from_slice(&r.v);
        }
        if let Some(slot) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidData(format!(
                "missing (replicate {}, point {})",
                slot / n + 1,
                slot % n + 1
            )));
        }
        let x: Vec<f64> = x.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let covariates = if m > 0 { Some(Covariates::new(n_rep, n, m, cov)?) } else { None };
        Dataset::new(x, y, covariates)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.covariates.as_ref().map_or(0, |c| c.m);
        let mut header = vec!["replicate".to_string(), "point".into(), "x".into(), "y".into()];
        header.extend((1..=m).map(|c| format!("v{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for k in 0..self.n_replicates() {
            for i in 0..self.n_points() {
                let mut rec = vec![
                    (k + 1).to_string(),
                    (i + 1).to_string(),
                    fmt_f64(self.x[i]),
                    fmt_f64(self.y[(k, i)]),
                ];
                if let Some(c) = &self.covariates {
                    rec.extend(c.get(k, i).iter().map(|v| fmt_f64(*v)));
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LatentKind {
    #[serde(alias = "iid")]
    Iid,
    #[serde(alias = "markov")]
    Markov,
    #[serde(alias = "covariate")]
    Covariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub kind: LatentKind,
    #[serde(rename = "J")]
    pub n_states: usize,
}

/// Parameters of the hidden-state process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LatentParams {
    Iid { p: Vec<f64> },
    Markov { pi: Vec<f64>, a: Vec<Vec<f64>> },
    /// Row `j - 1` holds the coefficients of state `j + 1` against state 1,
    /// intercept first.
    Covariate { beta: Vec<Vec<f64>> },
}

impl LatentParams {
    pub fn kind(&self) -> LatentKind {
        match self {
            LatentParams::Iid { .. } => LatentKind::Iid,
            LatentParams::Markov { .. } => LatentKind::Markov,
            LatentParams::Covariate { .. } => LatentKind::Covariate,
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            LatentParams::Iid { p } => p.len(),
            LatentParams::Markov { pi, .. } => pi.len(),
            LatentParams::Covariate { beta } => beta.len() + 1,
        }
    }

    pub fn check(&self) -> Result<()> {
        let simplex = |v: &[f64], what: &str| -> Result<()> {
            let s: f64 = v.iter().sum();
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParams(format!("{what} is not a probability vector")));
            }
            Ok(())
        };
        match self {
            LatentParams::Iid { p } => simplex(p, "p"),
            LatentParams::Markov { pi, a } => {
                simplex(pi, "pi")?;
                if a.len() != pi.len() || a.iter().any(|r| r.len() != pi.len()) {
                    return Err(Error::InvalidParams("transition matrix must be J x J".into()));
                }
                a.iter().try_for_each(|row| simplex(row, "transition row"))
            }
            LatentParams::Covariate { beta } => {
                if beta.is_empty() || beta.iter().any(|r| r.len() != beta[0].len() || r.len() < 2) {
                    return Err(Error::InvalidParams("beta must be (J-1) x (M+1) with M >= 1".into()));
                }
                if beta.iter().flatten().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidParams("beta must be finite".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CovKind {
    #[serde(alias = "iso_diag")]
    IsoDiag,
    #[serde(alias = "state_diag")]
    StateDiag,
    #[serde(alias = "unrestricted")]
    Unrestricted,
    #[serde(alias = "homog_ri")]
    HomogRi,
    #[serde(alias = "nonhomog_ri")]
    NonhomogRi,
}

impl CovKind {
    pub fn is_diagonal(self) -> bool {
        matches!(self, CovKind::IsoDiag | CovKind::StateDiag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovSpec {
    pub kind: CovKind,
}

/// Residual covariance parameters. Random-intercept variances are stored as
/// ratios to `sigma2` (`tau^2 = d * sigma^2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CovParams {
    IsoDiag { sigma2: f64 },
    StateDiag { sigma2: Vec<f64> },
    Unrestricted { v: Vec<Vec<f64>> },
    HomogRi { sigma2: f64, d: f64 },
    NonhomogRi { sigma2: f64, d1: f64, d2: f64 },
}

impl CovParams {
    pub fn kind(&self) -> CovKind {
        match self {
            CovParams::IsoDiag { .. } => CovKind::IsoDiag,
            CovParams::StateDiag { .. } => CovKind::StateDiag,
            CovParams::Unrestricted { .. } => CovKind::Unrestricted,
            CovParams::HomogRi { .. } => CovKind::HomogRi,
            CovParams::NonhomogRi { .. } => CovKind::NonhomogRi,
        }
    }

    pub fn check(&self, n_points: usize, n_states: usize) -> Result<()> {
        let pos = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{what} must be positive, got {v}")))
            }
        };
        let nonneg = |v: f64, what: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{what} must be nonnegative, got {v}")))
            }
        };
        match self {
            CovParams::IsoDiag { sigma2 } => pos(*sigma2, "sigma2"),
            CovParams::StateDiag { sigma2 } => {
                if sigma2.len() != n_states {
                    return Err(Error::InvalidParams("one variance per state required".into()));
                }
                sigma2.iter().try_for_each(|s| pos(*s, "sigma2_j"))
            }
            CovParams::Unrestricted { v } => {
                if v.len() != n_points || v.iter().any(|r| r.len() != n_points) {
                    return Err(Error::InvalidParams("V must be n x n".into()));
                }
                let m = rows_to_matrix(v);
                if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                    return Err(Error::InvalidParams("V must be symmetric".into()));
                }
                if m.cholesky().is_none() {
                    return Err(Error::NotSpd);
                }
                Ok(())
            }
            CovParams::HomogRi { sigma2, d } => {
                pos(*sigma2, "sigma2")?;
                nonneg(*d, "d")
            }
            CovParams::NonhomogRi { sigma2, d1, d2 } => {
                if n_states != 2 {
                    return Err(Error::SpecMismatch("NONHOMOG_RI requires J = 2".into()));
                }
                pos(*sigma2, "sigma2")?;
                nonneg(*d1, "d1")?;
                nonneg(*d2, "d2")
            }
        }
    }
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Full parameter set: spline coefficients per state, latent parameters,
/// covariance parameters and the smoothing parameters they were fitted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub phi: Vec<Vec<f64>>,
    pub alpha: LatentParams,
    pub cov: CovParams,
    pub lambdas: Vec<f64>,
}

impl Theta {
    pub fn n_states(&self) -> usize {
        self.phi.len()
    }
}

/// How the smoothing parameters are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Fixed(Vec<f64>),
    Keyword(String),
}

impl LambdaSetting {
    pub fn is_cv(&self) -> bool {
        matches!(self, LambdaSetting::Keyword(s) if s.eq_ignore_ascii_case("cv"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    #[default]
    QuantileSplit,
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InitConfig {
    #[serde(default)]
    pub strategy: InitStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Theta>,
}

/// Which E-step machinery to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationPath {
    /// Pointwise / forward–backward for diagonal covariances, enumeration otherwise.
    #[default]
    Auto,
    /// Exact sums over all state vectors.
    Enumeration,
    /// Pointwise posteriors; diagonal covariance kinds only.
    Diagonal,
}

fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    500
}
fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}
fn default_true() -> bool {
    true
}
fn default_lambdas() -> LambdaSetting {
    LambdaSetting::Keyword("cv".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent: LatentSpec,
    pub covariance: CovSpec,
    #[serde(default = "default_lambdas")]
    pub lambdas: LambdaSetting,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub path: EstimationPath,
    #[serde(default = "default_true")]
    pub standard_errors: bool,
}

impl ModelConfig {
    pub fn new(kind: LatentKind, n_states: usize, cov: CovKind, lambdas: Vec<f64>) -> Self {
        ModelConfig {
            latent: LatentSpec { kind, n_states },
            covariance: CovSpec { kind: cov },
            lambdas: LambdaSetting::Fixed(lambdas),
            k: None,
            tol: default_tol(),
            max_iter: default_max_iter(),
            seed: 0,
            enumeration_cap: default_cap(),
            init: InitConfig::default(),
            path: EstimationPath::Auto,
            standard_errors: true,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { row: e.line(), msg: e.to_string() })
    }
}

/// A configuration that has passed [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedConfig {
    pub config: ModelConfig,
    pub n_basis: usize,
    /// Whether the E-step enumerates every state vector.
    pub enumerate: bool,
    pub n_state_vectors: Option<u64>,
}

fn state_vector_count(j: usize, n: usize, cap: u64) -> Option<u64> {
    let mut total: u64 = 1;
    for _ in 0..n {
        total = total.checked_mul(j as u64)?;
        if total > cap {
            return None;
        }
    }
    Some(total)
}

/// Checks a dataset against a model configuration, collecting every violation.
pub fn validate(data: &Dataset, config: &ModelConfig) -> std::result::Result<CheckedConfig, Vec<Error>> {
    let mut errs = Vec::new();
    let n = data.n_points();
    let j = config.latent.n_states;
    let cov = config.covariance.kind;
    if j == 0 {
        errs.push(Error::SpecMismatch("J must be at least 1".into()));
    }
    if j == 1 && config.latent.kind != LatentKind::Iid {
        errs.push(Error::SpecMismatch("a single-state model must use the IID latent kind".into()));
    }
    if cov == CovKind::NonhomogRi && j != 2 {
        errs.push(Error::SpecMismatch("NONHOMOG_RI requires J = 2".into()));
    }
    if config.latent.kind == LatentKind::Covariate && data.covariates().is_none() {
        errs.push(Error::SpecMismatch("COVARIATE latent model requires covariate columns".into()));
    }
    if config.path == EstimationPath::Diagonal && !cov.is_diagonal() {
        errs.push(Error::SpecMismatch("diagonal path requires ISO_DIAG or STATE_DIAG".into()));
    }
    let n_basis = config.k.unwrap_or_else(|| crate::basis::default_k(n));
    if n_basis < 4 || n_basis > n + 2 {
        errs.push(Error::BadK { k: n_basis, max: n + 2 });
    }
    if !(config.tol > 0.0) {
        errs.push(Error::SpecMismatch("tol must be positive".into()));
    }
    match &config.lambdas {
        LambdaSetting::Fixed(l) => {
            if l.len() != j {
                errs.push(Error::SpecMismatch(format!("{} lambdas given for J = {j}", l.len())));
            }
            if l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                errs.push(Error::SpecMismatch("lambdas must be finite and nonnegative".into()));
            }
        }
        kw if kw.is_cv() => {
            if !cov.is_diagonal() {
                errs.push(Error::Unsupported("CV unsupported for this covariance kind".into()));
            }
        }
        LambdaSetting::Keyword(s) => errs.push(Error::SpecMismatch(format!("unknown lambda keyword {s:?}"))),
    }

    let enumerate = match config.path {
        EstimationPath::Enumeration => true,
        EstimationPath::Diagonal => false,
        EstimationPath::Auto => !cov.is_diagonal(),
    };
    let count = state_vector_count(j.max(1), n, config.enumeration_cap);
    if enumerate && count.is_none() {
        errs.push(Error::EnumerationTooLarge { states: j, points: n, cap: config.enumeration_cap });
    }

    if config.init.strategy == InitStrategy::Supplied {
        match &config.init.theta {
            None => errs.push(Error::BadInit("strategy 'supplied' requires init.theta".into())),
            Some(t) => {
                if let Err(e) = check_theta(t, config, n_basis, n) {
                    errs.push(Error::BadInit(e.to_string()));
                }
            }
        }
    }

    if errs.is_empty() {
        Ok(CheckedConfig { config: config.clone(), n_basis, enumerate, n_state_vectors: count })
    } else {
        Err(errs)
    }
}

fn check_theta(t: &Theta, config: &ModelConfig, n_basis: usize, n: usize) -> Result<()> {
    let j = config.latent.n_states;
    if t.phi.len() != j || t.phi.iter().any(|p| p.len() != n_basis) {
        return Err(Error::InvalidParams(format!("phi must be {j} x {n_basis}")));
    }
    if t.phi.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("phi must be finite".into()));
    }
    if t.alpha.kind() != config.latent.kind || t.alpha.n_states() != j {
        return Err(Error::InvalidParams("alpha does not match the latent specification".into()));
    }
    t.alpha.check()?;
    if t.cov.kind() != config.covariance.kind {
        return Err(Error::InvalidParams("covariance does not match the specification".into()));
    }
    t.cov.check(n, j)
}

/// Louis-method standard errors for the free latent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdErrors {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub information: Vec<Vec<f64>>,
}

/// Everything produced by one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub theta: Theta,
    pub x: Vec<f64>,
    pub knots: Vec<f64>,
    /// `J x n` fitted function values on the grid.
    pub fitted: Vec<Vec<f64>>,
    /// `N x n x J` marginal posterior state probabilities.
    pub posteriors: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_posteriors: Option<Vec<Vec<f64>>>,
    pub loglik_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<StdErrors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error_note: Option<String>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default)]
    pub events: Vec<String>,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { row: e.line(), msg: e.to_string() })
    }

    pub fn final_objective(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NAN)
    }
}
