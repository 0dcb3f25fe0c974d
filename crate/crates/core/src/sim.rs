//! Simulation designs, data generation and the Monte-Carlo study driver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::SplineBasis;
use crate::data::{
    validate, CovKind, CovParams, Covariates, Dataset, FitReport, InitConfig, InitStrategy, LatentKind, LatentParams,
    ModelConfig, Theta,
};
use crate::error::{Error, Result};
use crate::inference::free_coordinates;
use crate::latent::covariate_probs;

/// Stand-in upper function `f_2(x) = 0.05 + 0.05 sin(2 pi (x - 1) / 99)` on
/// `[1, 100]`: range `[0, 0.1]`, one maximum and one minimum.
pub fn f2(x: f64) -> f64 {
    0.05 + 0.05 * (2.0 * std::f64::consts::PI * (x - 1.0) / 99.0).sin()
}

/// `f_1 = f_2 - 0.1`.
pub fn f1(x: f64) -> f64 {
    f2(x) - 0.1
}

/// The two true functions, lower state first.
pub fn default_true_functions() -> (fn(f64) -> f64, fn(f64) -> f64) {
    (f1, f2)
}

/// The ten-point grid `1, 12, ..., 100`.
pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| 1.0 + 11.0 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub id: u8,
    pub n_replicates: usize,
    pub x: Vec<f64>,
    pub alpha: LatentParams,
    pub cov: CovParams,
    pub replications: usize,
    pub seed: u64,
    pub lambda: f64,
}

impl SimDesign {
    /// Design 1: iid states, design 2: Markov states, design 3: logistic
    /// states driven by a standard normal covariate.
    pub fn preset(id: u8) -> Result<Self> {
        let (alpha, cov) = match id {
            1 => (LatentParams::Iid { p: vec![0.5, 0.5] }, CovParams::HomogRi { sigma2: 1e-5, d: 10.0 }),
            2 => (
                LatentParams::Markov { pi: vec![0.5, 0.5], a: vec![vec![0.7, 0.3], vec![0.4, 0.6]] },
                CovParams::HomogRi { sigma2: 1e-5, d: 10.0 },
            ),
            3 => (LatentParams::Covariate { beta: vec![vec![2.0, 5.0]] }, CovParams::IsoDiag { sigma2: 5e-5 }),
            _ => return Err(Error::InvalidParams(format!("unknown design {id}; expected 1, 2 or 3"))),
        };
        Ok(SimDesign { id, n_replicates: 100, x: default_grid(), alpha, cov, replications: 300, seed: 0, lambda: 1e-4 })
    }

    pub fn check(&self) -> Result<()> {
        if self.n_replicates == 0 || self.x.len() < 4 {
            return Err(Error::InvalidParams("design needs at least one replicate and four grid points".into()));
        }
        let ok = match (&self.alpha, &self.cov) {
            (LatentParams::Iid { p }, _) => p.len() == 2 && p.iter().all(|v| (0.0..=1.0).contains(v)) && (p[0] + p[1] - 1.0).abs() < 1e-12,
            (LatentParams::Markov { pi, a }, _) => {
                pi.len() == 2
                    && a.len() == 2
                    && pi.iter().chain(a.iter().flatten()).all(|v| (0.0..=1.0).contains(v))
                    && (pi[0] + pi[1] - 1.0).abs() < 1e-12
                    && a.iter().all(|r| r.len() == 2 && (r[0] + r[1] - 1.0).abs() < 1e-12)
            }
            (LatentParams::Covariate { beta }, _) => beta.len() == 1 && beta[0].len() == 2,
        };
        let cov_ok = match &self.cov {
            CovParams::HomogRi { sigma2, d } => *sigma2 > 0.0 && *d >= 0.0,
            CovParams::IsoDiag { sigma2 } => *sigma2 > 0.0,
            _ => false,
        };
        if !ok || !cov_ok || !(self.lambda > 0.0) {
            return Err(Error::InvalidParams("invalid simulation design parameters".into()));
        }
        Ok(())
    }

    fn latent_kind(&self) -> LatentKind {
        match self.alpha {
            LatentParams::Iid { .. } => LatentKind::Iid,
            LatentParams::Markov { .. } => LatentKind::Markov,
            LatentParams::Covariate { .. } => LatentKind::Covariate,
        }
    }

    fn cov_kind(&self) -> CovKind {
        match self.cov {
            CovParams::HomogRi { .. } => CovKind::HomogRi,
            _ => CovKind::IsoDiag,
        }
    }

    /// True function values `J x n` on the design grid.
    pub fn true_curves(&self) -> Vec<Vec<f64>> {
        vec![self.x.iter().map(|&v| f1(v)).collect(), self.x.iter().map(|&v| f2(v)).collect()]
    }

    /// Data-generating parameters, with coefficients from the least-squares
    /// projection of the true functions on the default basis.
    pub fn true_theta(&self) -> Result<Theta> {
        let basis = SplineBasis::new(&self.x, crate::basis::default_k(self.x.len()))?;
        let b = basis.basis_matrix(&self.x)?;
        let svd = b.clone().svd(true, true);
        let phi = self
            .true_curves()
            .into_iter()
            .map(|f| svd.solve(&DVector::from_vec(f), 1e-12).map(|c| c.iter().copied().collect()).map_err(|_| Error::SingularSystem))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Theta { phi, alpha: self.alpha.clone(), cov: self.cov.clone(), lambdas: vec![self.lambda; 2] })
    }

    /// Fit configuration matching the design, started at the truth.
    pub fn fit_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.latent_kind(), 2, self.cov_kind(), vec![self.lambda; 2]);
        cfg.seed = self.seed;
        cfg.init = InitConfig { strategy: InitStrategy::Supplied, theta: Some(self.true_theta()?) };
        Ok(cfg)
    }
}

/// A generated dataset with its latent states (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub data: Dataset,
    pub states: Vec<Vec<usize>>,
}

/// Generator for replicate `k` of replication `rep`: the key encodes
/// `(seed, rep)` and the stream is `k`.
fn replicate_rng(seed: u64, rep: u64, k: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&rep.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(k);
    rng
}

fn draw_state<R: Rng>(rng: &mut R, p_first: f64) -> usize {
    if rng.random::<f64>() < p_first {
        0
    } else {
        1
    }
}

/// One dataset from the design. Each replicate draws, in order, its
/// covariates, states, random intercept and point noise.
pub fn generate_dataset(design: &SimDesign, rep: u64) -> Result<SimData> {
    design.check()?;
    let (n_rep, n) = (design.n_replicates, design.x.len());
    let curves = design.true_curves();
    let rows: Vec<(Vec<f64>, Vec<usize>, Vec<f64>)> = (0..n_rep)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(design.seed, rep, k as u64);
            let v: Vec<f64> = match design.alpha {
                LatentParams::Covariate { .. } => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                _ => Vec::new(),
            };
            let states: Vec<usize> = match &design.alpha {
                LatentParams::Iid { p } => (0..n).map(|_| draw_state(&mut rng, p[0])).collect(),
                LatentParams::Markov { pi, a } => {
                    let mut s = Vec::with_capacity(n);
                    s.push(draw_state(&mut rng, pi[0]));
                    for i in 1..n {
                        let prev = s[i - 1];
                        s.push(draw_state(&mut rng, a[prev][0]));
                    }
                    s
                }
                LatentParams::Covariate { beta } => (0..n).map(|i| draw_state(&mut rng, covariate_probs(beta, &[1.0, v[i]])[0])).collect(),
            };
            let (sigma2, tau2) = match design.cov {
                CovParams::HomogRi { sigma2, d } => (sigma2, d * sigma2),
                CovParams::IsoDiag { sigma2 } => (sigma2, 0.0),
                _ => unreachable!("checked design"),
            };
            let delta = tau2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let y = (0..n)
                .map(|i| curves[states[i]][i] + delta + sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (y, states, v)
        })
        .collect();
    let y = DMatrix::from_fn(n_rep, n, |k, i| rows[k].0[i]);
    let covariates = match design.alpha {
        LatentParams::Covariate { .. } => Some(Covariates::new(n_rep, n, 1, rows.iter().flat_map(|r| r.2.iter().copied()).collect())?),
        _ => None,
    };
    let data = Dataset::new(design.x.clone(), y, covariates)?;
    Ok(SimData { data, states: rows.into_iter().map(|r| r.1).collect() })
}

/// Swaps the two state labels of a fit.
pub fn swap_labels(theta: &Theta) -> Theta {
    let alpha = match &theta.alpha {
        LatentParams::Iid { p } => LatentParams::Iid { p: vec![p[1], p[0]] },
        LatentParams::Markov { pi, a } => LatentParams::Markov { pi: vec![pi[1], pi[0]], a: vec![vec![a[1][1], a[1][0]], vec![a[0][1], a[0][0]]] },
        LatentParams::Covariate { beta } => LatentParams::Covariate { beta: vec![beta[0].iter().map(|b| -b).collect()] },
    };
    let cov = match &theta.cov {
        CovParams::StateDiag { sigma2 } => CovParams::StateDiag { sigma2: vec![sigma2[1], sigma2[0]] },
        other => other.clone(),
    };
    Theta { phi: vec![theta.phi[1].clone(), theta.phi[0].clone()], alpha, cov, lambdas: vec![theta.lambdas[1], theta.lambdas[0]] }
}

/// Whether swapping the fitted labels lowers the total squared error to truth.
pub fn labels_swapped(fitted: &[Vec<f64>], truth: &[Vec<f64>]) -> bool {
    let sse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let keep = sse(&fitted[0], &truth[0]) + sse(&fitted[1], &truth[1]);
    let swap = sse(&fitted[1], &truth[0]) + sse(&fitted[0], &truth[1]);
    swap < keep
}

/// Scored outcome of one replication after label alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sigma2: f64,
    /// Random-intercept variance (not the ratio to `sigma2`).
    pub tau2: Option<f64>,
    /// `J x n` squared errors of the fitted curves.
    pub squared_errors: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Aligns and scores one fit against the design truth.
pub fn score_fit(design: &SimDesign, index: usize, report: &FitReport) -> Result<Replication> {
    let truth = design.true_curves();
    let swapped = labels_swapped(&report.fitted, &truth);
    let (theta, fitted) = if swapped {
        (swap_labels(&report.theta), vec![report.fitted[1].clone(), report.fitted[0].clone()])
    } else {
        (report.theta.clone(), report.fitted.clone())
    };
    let se = report
        .std_errors
        .as_ref()
        .ok_or_else(|| Error::Unsupported(report.std_error_note.clone().unwrap_or_else(|| "no standard errors".into())))?;
    let (names, estimates) = free_coordinates(&theta.alpha);
    // free coordinates of the swapped fit are the same quantities with the
    // two transition probabilities exchanged
    let std_errors = names
        .iter()
        .map(|name| {
            let source = match (swapped, name.as_str()) {
                (true, "a12") => "a21",
                (true, "a21") => "a12",
                (_, other) => other,
            };
            se.names.iter().position(|m| m == source).map(|p| se.std_errors[p]).ok_or_else(|| Error::Unsupported(format!("missing standard error for {name}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sigma2, tau2) = match theta.cov {
        CovParams::HomogRi { sigma2, d } => (sigma2, Some(d * sigma2)),
        CovParams::IsoDiag { sigma2 } => (sigma2, None),
        _ => return Err(Error::Unsupported("simulation scoring expects the design covariance".into())),
    };
    let squared_errors = fitted.iter().zip(&truth).map(|(f, t)| f.iter().zip(t).map(|(a, b)| (a - b).powi(2)).collect()).collect();
    Ok(Replication { index, estimates, std_errors, sigma2, tau2, squared_errors, iterations: report.iterations })
}

/// Generates, fits and scores replication `rep`.
pub fn run_replication(design: &SimDesign, config: &ModelConfig, rep: usize) -> Result<Replication> {
    let sim = generate_dataset(design, rep as u64)?;
    let checked = validate(&sim.data, config).map_err(|mut e| e.remove(0))?;
    let report = crate::em::ecm_fit(&sim.data, &checked, &[design.lambda; 2])?;
    score_fit(design, rep, &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub mean_se: f64,
    /// Percent of 90% Wald intervals covering the truth.
    pub coverage90: f64,
    pub coverage95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub design: SimDesign,
    pub completed: usize,
    /// `(replication, message)` for every failed replication.
    pub failures: Vec<(usize, String)>,
    pub parameters: Vec<ParameterSummary>,
    pub covariance: Vec<CovarianceSummary>,
    pub x: Vec<f64>,
    /// `J x n` pointwise empirical mean squared error.
    pub emse: Vec<Vec<f64>>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Aggregates scored replications (already in index order).
pub fn summarize(design: &SimDesign, reps: &[Replication], failures: Vec<(usize, String)>) -> Result<StudyReport> {
    if reps.is_empty() {
        return Err(Error::InvalidParams("no replication completed".into()));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let z90 = normal.inverse_cdf(0.95);
    let z95 = normal.inverse_cdf(0.975);
    let (names, truths) = free_coordinates(&design.alpha);
    let parameters = names
        .into_iter()
        .zip(truths)
        .enumerate()
        .map(|(c, (name, truth))| {
            let est: Vec<f64> = reps.iter().map(|r| r.estimates[c]).collect();
            let ses: Vec<f64> = reps.iter().map(|r| r.std_errors[c]).collect();
            let (mean, sd) = mean_sd(&est);
            let covered = |z: f64| {
                100.0 * est.iter().zip(&ses).filter(|(e, s)| (*e - truth).abs() <= z * **s).count() as f64 / est.len() as f64
            };
            ParameterSummary { name, truth, mean, sd, mean_se: mean_sd(&ses).0, coverage90: covered(z90), coverage95: covered(z95) }
        })
        .collect();
    let mut covariance = Vec::new();
    let (s_truth, t_truth) = match design.cov {
        CovParams::HomogRi { sigma2, d } => (sigma2, Some(d * sigma2)),
        CovParams::IsoDiag { sigma2 } => (sigma2, None),
        _ => unreachable!("checked design"),
    };
    let (mean, sd) = mean_sd(&reps.iter().map(|r| r.sigma2).collect::<Vec<_>>());
    covariance.push(CovarianceSummary { name: "sigma2".into(), truth: s_truth, mean, sd });
    if let Some(t) = t_truth {
        let (mean, sd) = mean_sd(&reps.iter().map(|r| r.tau2.unwrap_or(f64::NAN)).collect::<Vec<_>>());
        covariance.push(CovarianceSummary { name: "tau2".into(), truth: t, mean, sd });
    }
    let n = design.x.len();
    let emse = (0..2)
        .map(|j| (0..n).map(|i| reps.iter().map(|r| r.squared_errors[j][i]).sum::<f64>() / reps.len() as f64).collect())
        .collect();
    Ok(StudyReport { design: design.clone(), completed: reps.len(), failures, parameters, covariance, x: design.x.clone(), emse })
}

/// Runs every replication of the design; failed replications are recorded
/// and excluded.
pub fn run_study(design: &SimDesign, config: &ModelConfig) -> Result<StudyReport> {
    design.check()?;
    let outcomes: Vec<Result<Replication>> = (0..design.replications).into_par_iter().map(|r| run_replication(design, config, r)).collect();
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rep) => reps.push(rep),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    summarize(design, &reps, failures)
}

impl StudyReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// Latent-parameter table: truth, mean, SD, mean SE and coverages.
    pub fn latent_table_csv(&self) -> String {
        let mut s = String::from("parameter,truth,mean,sd,mean_se,coverage90,coverage95\n");
        for p in &self.parameters {
            s.push_str(&format!("{},{},{},{},{},{},{}\n", p.name, p.truth, p.mean, p.sd, p.mean_se, p.coverage90, p.coverage95));
        }
        s
    }

    pub fn covariance_table_csv(&self) -> String {
        let mut s = String::from("parameter,truth,mean,sd\n");
        for c in &self.covariance {
            s.push_str(&format!("{},{},{},{}\n", c.name, c.truth, c.mean, c.sd));
        }
        s
    }

    /// One row per grid point with the EMSE of each function.
    pub fn emse_csv(&self) -> String {
        let mut s = String::from("x,emse_f1,emse_f2\n");
        for (i, x) in self.x.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", x, self.emse[0][i], self.emse[1][i]));
        }
        s
    }
}

/// Parameters of the synthetic power-usage look-alike: daily curves on an
/// eight-point grid that switch between an "off" and an "on" level, with the
/// "on" probability driven by the day's temperature. The "on" level carries
/// a day-specific shift that grows with temperature, so hot days have both
/// more "on" points and a higher "on" level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerDesign {
    pub n_days: usize,
    pub n_points: usize,
    pub gap: f64,
    pub sigma2: f64,
    pub day_sd: f64,
    pub on_shift_slope: f64,
    pub on_shift_sd: f64,
    pub beta: Vec<f64>,
    pub seed: u64,
}

impl Default for PowerDesign {
    fn default() -> Self {
        PowerDesign { n_days: 44, n_points: 8, gap: 2.0, sigma2: 0.01, day_sd: 0.1, on_shift_slope: 0.6, on_shift_sd: 0.2, beta: vec![-0.5, 1.5], seed: 0 }
    }
}

/// Off-level curve of the power-usage look-alike.
pub fn power_off_curve(x: f64) -> f64 {
    1.0 + 0.3 * (std::f64::consts::PI * x / 7.0).sin()
}

/// Generates the power-usage look-alike; the temperature is the single
/// covariate, constant within a day.
pub fn power_usage_lookalike(design: &PowerDesign) -> Result<SimData> {
    let n = design.n_points;
    if design.n_days == 0 || n < 4 || design.beta.len() != 2 {
        return Err(Error::InvalidParams("invalid power-usage design".into()));
    }
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut temps = Vec::with_capacity(design.n_days * n);
    let mut states = Vec::with_capacity(design.n_days);
    let mut y = DMatrix::zeros(design.n_days, n);
    let beta = vec![design.beta.clone()];
    for k in 0..design.n_days {
        let mut rng = replicate_rng(design.seed, u64::MAX, k as u64);
        let t: f64 = rng.sample(StandardNormal);
        let p_off = covariate_probs(&beta, &[1.0, t])[0];
        let s: Vec<usize> = (0..n).map(|_| draw_state(&mut rng, p_off)).collect();
        let day = design.day_sd * rng.sample::<f64, _>(StandardNormal);
        let shift = design.on_shift_slope * t + design.on_shift_sd * rng.sample::<f64, _>(StandardNormal);
        for i in 0..n {
            let on = if s[i] == 1 { design.gap + shift } else { 0.0 };
            y[(k, i)] = power_off_curve(x[i]) + on + day + design.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            temps.push(t);
        }
        states.push(s);
    }
    let covariates = Covariates::new(design.n_days, n, 1, temps)?;
    Ok(SimData { data: Dataset::new(x, y, Some(covariates))?, states })
}
