//! The ECM driver: E-step dispatch, spline-coefficient updates, the penalized
//! observed-data objective, initialization and the iteration loop.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::SplineBasis;
use crate::covariance::{self, CovStructure, CovUpdate};
use crate::data::{CheckedConfig, CovParams, Dataset, FitReport, InitStrategy, LatentKind, LatentParams, Theta};
use crate::error::{Error, Result};
use crate::latent::{self, Marginals, Posteriors, StateSpace};

/// Joint posteriors are stored in reports only up to this many state vectors.
const JOINT_REPORT_LIMIT: usize = 4096;
const PROB_FLOOR: f64 = 0.05;

/// Everything fixed across ECM iterations for one dataset and configuration.
#[derive(Debug, Clone)]
pub struct Model<'a> {
    pub data: &'a Dataset,
    pub checked: CheckedConfig,
    pub basis: SplineBasis,
    /// `n x K` basis matrix on the grid.
    pub bmat: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    /// Present when the E-step enumerates state vectors.
    pub space: Option<StateSpace>,
}

impl<'a> Model<'a> {
    pub fn new(data: &'a Dataset, checked: &CheckedConfig) -> Result<Self> {
        let basis = SplineBasis::new(data.x(), checked.n_basis)?;
        let bmat = basis.basis_matrix(data.x())?;
        let penalty = basis.penalty_matrix();
        let space = if checked.enumerate {
            Some(StateSpace::new(checked.config.latent.n_states, data.n_points(), checked.config.enumeration_cap)?)
        } else {
            None
        };
        Ok(Model { data, checked: checked.clone(), basis, bmat, penalty, space })
    }

    pub fn n_states(&self) -> usize {
        self.checked.config.latent.n_states
    }

    /// State space for enumeration, built on demand when the E-step itself
    /// does not enumerate.
    pub fn state_space(&self) -> Result<StateSpace> {
        match &self.space {
            Some(s) => Ok(s.clone()),
            None => StateSpace::new(self.n_states(), self.data.n_points(), self.checked.config.enumeration_cap),
        }
    }

    /// `J x n` values `f_j(x_i)`.
    pub fn fitted(&self, phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        fitted_values(&self.bmat, phi)
    }

    pub fn e_step(&self, theta: &Theta) -> Result<Posteriors> {
        let fitted = self.fitted(&theta.phi);
        let cov = CovStructure::new(&theta.cov, self.data.n_points())?;
        if let Some(space) = &self.space {
            return latent::joint_posterior(self.data, space, &fitted, &cov, &theta.alpha);
        }
        let sigma2 = cov
            .diagonal_variances(self.n_states())
            .ok_or_else(|| Error::SpecMismatch("diagonal E-step needs a diagonal covariance".into()))?;
        match &theta.alpha {
            LatentParams::Markov { pi, a } => latent::forward_backward(self.data, &fitted, &sigma2, pi, a),
            alpha => latent::marginal_posterior_pointwise(self.data, &fitted, &sigma2, alpha),
        }
    }

    /// `sum_j lambda_j phi_j^T R phi_j`.
    pub fn penalty_value(&self, theta: &Theta) -> f64 {
        theta.phi.iter().zip(&theta.lambdas).map(|(p, l)| l * quad_form(&self.penalty, p)).sum()
    }

    /// Penalized observed-data log-likelihood.
    pub fn objective(&self, theta: &Theta) -> Result<f64> {
        Ok(self.e_step(theta)?.total_loglik() - self.penalty_value(theta))
    }

    /// One f update on the path matching the E-step.
    pub fn update_f(&self, theta: &Theta, post: &Posteriors) -> Result<FUpdate> {
        let cov = CovStructure::new(&theta.cov, self.data.n_points())?;
        match (&self.space, &post.joint) {
            (Some(space), Some(joint)) => update_f_general(self.data, &self.bmat, &self.penalty, space, joint, &cov, &theta.lambdas),
            _ => {
                let sigma2 = cov
                    .diagonal_variances(self.n_states())
                    .ok_or_else(|| Error::SpecMismatch("diagonal f update needs a diagonal covariance".into()))?;
                update_f_diagonal(self.data, &self.bmat, &self.penalty, &post.marginal, &sigma2, &theta.lambdas)
            }
        }
    }

    /// Covariance conditional maximization at fitted values `fitted`.
    pub fn update_cov(&self, previous: &CovParams, post: &Posteriors, fitted: &[Vec<f64>]) -> Result<CovUpdate> {
        let joint = || {
            let space = self.space.as_ref().ok_or_else(|| Error::SpecMismatch("covariance update needs enumeration".into()))?;
            let joint = post.joint.as_ref().ok_or_else(|| Error::SpecMismatch("covariance update needs joint posteriors".into()))?;
            Ok::<_, Error>((space, joint))
        };
        match previous {
            CovParams::IsoDiag { .. } => covariance::update_iso(self.data, &post.marginal, fitted),
            CovParams::StateDiag { sigma2 } => covariance::update_state_diag(self.data, &post.marginal, fitted, sigma2),
            CovParams::Unrestricted { .. } => {
                let (space, joint) = joint()?;
                covariance::update_unrestricted(self.data, space, joint, fitted)
            }
            CovParams::HomogRi { .. } => {
                let (space, joint) = joint()?;
                covariance::update_homog_ri(self.data, space, joint, fitted)
            }
            CovParams::NonhomogRi { sigma2, d1, d2 } => {
                let (space, joint) = joint()?;
                covariance::update_nonhomog_ri(self.data, space, joint, fitted, (*sigma2, *d1, *d2))
            }
        }
    }
}

pub fn fitted_values(bmat: &DMatrix<f64>, phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    phi.iter()
        .map(|p| {
            let v = bmat * DVector::from_column_slice(p);
            v.iter().copied().collect()
        })
        .collect()
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let x = DVector::from_column_slice(v);
    x.dot(&(m * &x))
}

/// Spline-coefficient update result.
#[derive(Debug, Clone, PartialEq)]
pub struct FUpdate {
    pub phi: Vec<Vec<f64>>,
    pub events: Vec<String>,
}

/// Solves a symmetric positive-definite system, adding a ridge of
/// `1e-10 * trace / dim` when the Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, Option<String>)> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch.solve(b), None));
    }
    let dim = a.nrows();
    let ridge = 1e-10 * a.trace() / dim as f64;
    let mut reg = a.clone();
    for d in 0..dim {
        reg[(d, d)] += ridge;
    }
    match reg.cholesky() {
        Some(ch) => Ok((ch.solve(b), Some(format!("normal matrix singular; ridge {ridge:.3e} added")))),
        None => Err(Error::SingularSystem),
    }
}

/// Normal equations `(B^T sum_k W_kj B + 2 lambda R) phi_j = B^T sum_k W_kj y_k`
/// for state `j`, with `W_kj = diag(p_ik(j)) / sigma_j^2`.
pub fn diagonal_normal_system(
    data: &Dataset,
    bmat: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    marg: &Marginals,
    j: usize,
    sigma2: f64,
    lambda: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.n_points();
    let mut w = vec![0.0; n];
    let mut t = vec![0.0; n];
    for k in 0..data.n_replicates() {
        for i in 0..n {
            let p = marg.get(k, i, j);
            w[i] += p;
            t[i] += p * data.y()[(k, i)];
        }
    }
    let kb = bmat.ncols();
    let mut a = penalty * (2.0 * lambda);
    let mut rhs = DVector::zeros(kb);
    for i in 0..n {
        let wi = w[i] / sigma2;
        let ti = t[i] / sigma2;
        for p in 0..kb {
            let bp = bmat[(i, p)];
            if bp == 0.0 {
                continue;
            }
            rhs[p] += bp * ti;
            for q in 0..kb {
                a[(p, q)] += wi * bp * bmat[(i, q)];
            }
        }
    }
    (a, rhs)
}

/// Diagonal-path f update, one `K x K` system per state.
pub fn update_f_diagonal(
    data: &Dataset,
    bmat: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    marg: &Marginals,
    sigma2: &[f64],
    lambdas: &[f64],
) -> Result<FUpdate> {
    let mut phi = Vec::with_capacity(sigma2.len());
    let mut events = Vec::new();
    for j in 0..sigma2.len() {
        let (a, rhs) = diagonal_normal_system(data, bmat, penalty, marg, j, sigma2[j], lambdas[j]);
        let (sol, ev) = solve_spd(&a, &rhs)?;
        if let Some(e) = ev {
            events.push(format!("state {}: {e}", j + 1));
        }
        phi.push(sol.iter().copied().collect());
    }
    Ok(FUpdate { phi, events })
}

/// Normal equations of the general path in the stacked coefficient vector
/// `(phi_1, ..., phi_J)`.
pub fn general_normal_system(
    data: &Dataset,
    bmat: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    space: &StateSpace,
    joint: &[Vec<f64>],
    cov: &CovStructure,
    lambdas: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.n_points();
    let j = space.n_states();
    let kb = bmat.ncols();
    let constant_inverse = (!cov.state_dependent()).then(|| cov.inverse(space.get(0)));

    // per state vector: total weight and weighted response sum
    let partials: Vec<(DMatrix<f64>, DVector<f64>)> = (0..space.len())
        .into_par_iter()
        .with_min_len(64)
        .fold(
            || (DMatrix::zeros(j * n, j * n), DVector::zeros(j * n)),
            |(mut g, mut h), idx| {
                let s = space.get(idx);
                let mut w = 0.0;
                let mut ybar = DVector::zeros(n);
                for (k, probs) in joint.iter().enumerate() {
                    let p = probs[idx];
                    if p == 0.0 {
                        continue;
                    }
                    w += p;
                    for i in 0..n {
                        ybar[i] += p * data.y()[(k, i)];
                    }
                }
                if w == 0.0 {
                    return (g, h);
                }
                let owned;
                let vinv = match &constant_inverse {
                    Some(v) => v,
                    None => {
                        owned = cov.inverse(s);
                        &owned
                    }
                };
                let vy = vinv * &ybar;
                for a in 0..n {
                    let ra = s[a] as usize * n + a;
                    h[ra] += vy[a];
                    for b in 0..n {
                        g[(ra, s[b] as usize * n + b)] += w * vinv[(a, b)];
                    }
                }
                (g, h)
            },
        )
        .collect();
    let mut g = DMatrix::zeros(j * n, j * n);
    let mut h = DVector::zeros(j * n);
    for (pg, ph) in partials {
        g += pg;
        h += ph;
    }

    // block-diagonal B* maps coefficients to point values per state
    let mut a = DMatrix::zeros(j * kb, j * kb);
    let mut rhs = DVector::zeros(j * kb);
    for l in 0..j {
        let hl = h.rows(l * n, n);
        rhs.rows_mut(l * kb, kb).copy_from(&(bmat.transpose() * hl));
        for m in 0..j {
            let block = g.view((l * n, m * n), (n, n));
            let abl = bmat.transpose() * block * bmat;
            a.view_mut((l * kb, m * kb), (kb, kb)).copy_from(&abl);
        }
        let mut diag = a.view_mut((l * kb, l * kb), (kb, kb));
        diag += penalty * (2.0 * lambdas[l]);
    }
    (a, rhs)
}

/// General-path f update: one `JK x JK` system.
pub fn update_f_general(
    data: &Dataset,
    bmat: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    space: &StateSpace,
    joint: &[Vec<f64>],
    cov: &CovStructure,
    lambdas: &[f64],
) -> Result<FUpdate> {
    let (a, rhs) = general_normal_system(data, bmat, penalty, space, joint, cov, lambdas);
    let (sol, ev) = solve_spd(&a, &rhs)?;
    let kb = bmat.ncols();
    let phi = (0..space.n_states()).map(|l| sol.rows(l * kb, kb).iter().copied().collect()).collect();
    Ok(FUpdate { phi, events: ev.into_iter().collect() })
}

/// Provisional state labels from residual bands of a pooled fit.
fn provisional_labels(residuals: &DMatrix<f64>, n_states: usize) -> Vec<Vec<u8>> {
    let (n_rep, n) = residuals.shape();
    let mut sorted: Vec<f64> = residuals.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let cuts: Vec<f64> = (1..n_states).map(|j| q(j as f64 / n_states as f64)).collect();
    let band = |v: f64| cuts.iter().filter(|&&c| v > c).count();
    let mut labels: Vec<Vec<usize>> = (0..n_rep).map(|k| (0..n).map(|i| band(residuals[(k, i)])).collect()).collect();

    // one-dimensional k-means refinement of the bands
    for _ in 0..20 {
        let mut sum = vec![0.0; n_states];
        let mut cnt = vec![0usize; n_states];
        for k in 0..n_rep {
            for i in 0..n {
                sum[labels[k][i]] += residuals[(k, i)];
                cnt[labels[k][i]] += 1;
            }
        }
        if cnt.contains(&0) {
            break;
        }
        let centres: Vec<f64> = (0..n_states).map(|j| sum[j] / cnt[j] as f64).collect();
        let nearest = |v: f64| {
            (0..n_states).min_by(|&a, &b| (v - centres[a]).abs().total_cmp(&(v - centres[b]).abs())).unwrap_or(0)
        };
        let next: Vec<Vec<usize>> = (0..n_rep).map(|k| (0..n).map(|i| nearest(residuals[(k, i)])).collect()).collect();
        let mut cnt_next = vec![0usize; n_states];
        next.iter().flatten().for_each(|&l| cnt_next[l] += 1);
        if cnt_next.contains(&0) || next == labels {
            break;
        }
        labels = next;
    }
    labels.into_iter().map(|row| row.into_iter().map(|l| l as u8).collect()).collect()
}

fn floored_distribution(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let raw: Vec<f64> = if total > 0.0 {
        counts.iter().map(|c| (c / total).max(PROB_FLOOR)).collect()
    } else {
        vec![1.0; counts.len()]
    };
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn initial_alpha(data: &Dataset, kind: LatentKind, n_states: usize, labels: &[Vec<u8>]) -> LatentParams {
    let j = n_states;
    match kind {
        LatentKind::Iid => {
            let mut c = vec![0.0; j];
            labels.iter().flatten().for_each(|&l| c[l as usize] += 1.0);
            LatentParams::Iid { p: floored_distribution(&c) }
        }
        LatentKind::Markov => {
            let mut first = vec![0.0; j];
            let mut trans = vec![vec![0.0; j]; j];
            for s in labels {
                first[s[0] as usize] += 1.0;
                for w in s.windows(2) {
                    trans[w[0] as usize][w[1] as usize] += 1.0;
                }
            }
            LatentParams::Markov { pi: floored_distribution(&first), a: trans.iter().map(|r| floored_distribution(r)).collect() }
        }
        LatentKind::Covariate => {
            let cov = data.covariates().expect("validated covariate model");
            let (n_rep, n) = (data.n_replicates(), data.n_points());
            let mut soft = Marginals::zeros(n_rep, n, j);
            let hi = 1.0 - PROB_FLOOR * (j - 1) as f64;
            for k in 0..n_rep {
                for i in 0..n {
                    for st in 0..j {
                        soft.set(k, i, st, if st == labels[k][i] as usize { hi } else { PROB_FLOOR });
                    }
                }
            }
            let start = vec![vec![0.0; cov.m() + 1]; j - 1];
            LatentParams::Covariate { beta: latent::newton_multinomial(&soft, cov, &start).beta }
        }
    }
}

fn initial_cov(kind: crate::data::CovKind, residuals: &DMatrix<f64>, labels: &[Vec<u8>], n_states: usize, floor: f64) -> CovParams {
    use crate::data::CovKind;
    let (n_rep, n) = residuals.shape();
    let mean_sq = residuals.iter().map(|v| v * v).sum::<f64>() / (n_rep * n) as f64;
    let pooled = mean_sq.max(floor);
    match kind {
        CovKind::IsoDiag => CovParams::IsoDiag { sigma2: pooled },
        CovKind::StateDiag => {
            let mut ss = vec![0.0; n_states];
            let mut cnt = vec![0usize; n_states];
            for k in 0..n_rep {
                for i in 0..n {
                    let l = labels[k][i] as usize;
                    ss[l] += residuals[(k, i)].powi(2);
                    cnt[l] += 1;
                }
            }
            let sigma2 = (0..n_states).map(|j| if cnt[j] > 0 { (ss[j] / cnt[j] as f64).max(floor) } else { pooled }).collect();
            CovParams::StateDiag { sigma2 }
        }
        CovKind::Unrestricted => {
            let mut s = residuals.transpose() * residuals / n_rep as f64;
            // shrink toward the diagonal so the start is positive definite
            for a in 0..n {
                s[(a, a)] = s[(a, a)].max(floor);
                for b in 0..n {
                    if a != b {
                        s[(a, b)] *= 0.9;
                    }
                }
            }
            if s.clone().cholesky().is_none() {
                s = DMatrix::from_diagonal(&s.diagonal());
            }
            CovParams::Unrestricted { v: crate::data::matrix_to_rows(&s) }
        }
        CovKind::HomogRi | CovKind::NonhomogRi => {
            let nf = n as f64;
            let nr = n_rep as f64;
            let ss: f64 = residuals.iter().map(|v| v * v).sum();
            let tt: f64 = residuals.row_iter().map(|r| r.sum().powi(2)).sum();
            let mut sigma2 = (ss - tt / nf) / (nr * (nf - 1.0));
            let mut d = if sigma2 > 0.0 { tt / (sigma2 * nr * nf * nf) - 1.0 / nf } else { 0.0 };
            if !(sigma2 > floor) || d < 0.0 {
                sigma2 = pooled;
                d = 0.0;
            }
            if kind == CovKind::HomogRi {
                CovParams::HomogRi { sigma2, d }
            } else {
                let d = d.max(1e-3);
                CovParams::NonhomogRi { sigma2, d1: d, d2: d }
            }
        }
    }
}

/// Starting parameters: either the supplied `theta` or a quantile split of
/// pooled-fit residuals.
pub fn initialize(model: &Model, lambdas: &[f64]) -> Result<(Theta, Vec<String>)> {
    let cfg = &model.checked.config;
    if cfg.init.strategy == InitStrategy::Supplied {
        let mut theta = cfg.init.theta.clone().ok_or_else(|| Error::BadInit("no initial parameters supplied".into()))?;
        theta.lambdas = lambdas.to_vec();
        return Ok((theta, Vec::new()));
    }
    let data = model.data;
    let (n_rep, n) = (data.n_replicates(), data.n_points());
    let j = model.n_states();
    let mut events = Vec::new();

    let ybar = data.y().row_mean();
    let spread = data.y().iter().map(|v| v * v).sum::<f64>() / (n_rep * n) as f64 - ybar.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let floor = 1e-12 * spread.abs().max(1e-300);
    let pooled_var = data
        .y()
        .row_iter()
        .map(|r| (r - &ybar).norm_squared())
        .sum::<f64>()
        / (n_rep * n) as f64;
    let pooled_var = pooled_var.max(floor).max(f64::MIN_POSITIVE);
    let lam_pool = lambdas.iter().sum::<f64>() / j as f64;
    let ones = Marginals::from_states(&vec![vec![0u8; n]; n_rep], 1);
    let pooled = update_f_diagonal(data, &model.bmat, &model.penalty, &ones, &[pooled_var], &[lam_pool])?;
    events.extend(pooled.events);
    let f0 = model.fitted(&pooled.phi).remove(0);
    let resid0 = DMatrix::from_fn(n_rep, n, |k, i| data.y()[(k, i)] - f0[i]);

    let labels = if j == 1 { vec![vec![0u8; n]; n_rep] } else { provisional_labels(&resid0, j) };

    // per-state fits with 0/1 weights
    let marg = Marginals::from_states(&labels, j);
    let mut sigma_fit = vec![pooled_var; j];
    for st in 0..j {
        let vals: Vec<f64> = (0..n_rep)
            .flat_map(|k| (0..n).map(move |i| (k, i)))
            .filter(|&(k, i)| labels[k][i] as usize == st)
            .map(|(k, i)| resid0[(k, i)])
            .collect();
        if vals.len() > 1 {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            sigma_fit[st] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).max(floor).max(f64::MIN_POSITIVE);
        }
    }
    let per_state = update_f_diagonal(data, &model.bmat, &model.penalty, &marg, &sigma_fit, lambdas)?;
    events.extend(per_state.events);
    let fitted = model.fitted(&per_state.phi);
    let resid = DMatrix::from_fn(n_rep, n, |k, i| data.y()[(k, i)] - fitted[labels[k][i] as usize][i]);

    let alpha = initial_alpha(data, cfg.latent.kind, j, &labels);
    let cov = initial_cov(cfg.covariance.kind, &resid, &labels, j, floor.max(f64::MIN_POSITIVE));
    Ok((Theta { phi: per_state.phi, alpha, cov, lambdas: lambdas.to_vec() }, events))
}

/// Iteration state after each completed ECM step.
#[derive(Debug, Clone)]
pub struct EcmState {
    pub theta: Theta,
    pub posteriors: Posteriors,
    pub objective: f64,
    pub iteration: usize,
}

/// Outcome of the ECM loop before report assembly.
#[derive(Debug, Clone)]
pub struct EcmRun {
    pub state: EcmState,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub events: Vec<String>,
}

/// Runs ECM iterations from `theta0`.
pub fn run_ecm(model: &Model, theta0: Theta) -> Result<EcmRun> {
    let cfg = &model.checked.config;
    let mut theta = theta0;
    let mut post = model.e_step(&theta)?;
    let mut objective = post.total_loglik() - model.penalty_value(&theta);
    let mut trace = vec![objective];
    let mut events = Vec::new();
    let mut converged = false;
    let mut iteration = 0;
    while iteration < cfg.max_iter {
        iteration += 1;
        let f = model.update_f(&theta, &post)?;
        events.extend(f.events.into_iter().map(|e| format!("iteration {iteration}: {e}")));
        let fitted = model.fitted(&f.phi);
        let cov = model.update_cov(&theta.cov, &post, &fitted)?;
        events.extend(cov.events.into_iter().map(|e| format!("iteration {iteration}: {e}")));
        let alpha = latent::update_alpha(&post, &theta.alpha, model.data.covariates())?;
        events.extend(alpha.events.into_iter().map(|e| format!("iteration {iteration}: {e}")));
        let next = Theta { phi: f.phi, alpha: alpha.alpha, cov: cov.params, lambdas: theta.lambdas.clone() };

        let next_post = model.e_step(&next)?;
        let next_obj = next_post.total_loglik() - model.penalty_value(&next);
        if !next_obj.is_finite() || next_obj < objective - 1e-8 * objective.abs() {
            return Err(Error::MonotonicityViolation { iteration, previous: objective, current: next_obj });
        }
        let change = (next_obj - objective).abs();
        theta = next;
        post = next_post;
        let previous = objective;
        objective = next_obj;
        trace.push(objective);
        if change <= cfg.tol * previous.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    log::debug!("ECM stopped after {iteration} iterations (converged: {converged})");
    Ok(EcmRun { state: EcmState { theta, posteriors: post, objective, iteration }, trace, converged, events })
}

/// Full fit at fixed smoothing parameters, including standard errors when
/// requested.
pub fn ecm_fit(data: &Dataset, checked: &CheckedConfig, lambdas: &[f64]) -> Result<FitReport> {
    let model = Model::new(data, checked)?;
    let (theta0, mut events) = initialize(&model, lambdas)?;
    let run = run_ecm(&model, theta0)?;
    events.extend(run.events);
    let EcmState { theta, posteriors, iteration, .. } = run.state;

    let (std_errors, std_error_note) = if !checked.config.standard_errors {
        (None, None)
    } else if model.n_states() < 2 {
        (None, Some("a single-state model has no latent parameters".to_string()))
    } else {
        match crate::inference::standard_errors(&model, &theta, &posteriors) {
            Ok(se) => (Some(se), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };

    let fitted = model.fitted(&theta.phi);
    let joint_posteriors = match (&model.space, posteriors.joint) {
        (Some(space), Some(joint)) if space.len() <= JOINT_REPORT_LIMIT => Some(joint),
        _ => None,
    };
    Ok(FitReport {
        theta,
        x: data.x().to_vec(),
        knots: model.basis.knots().to_vec(),
        fitted,
        posteriors: posteriors.marginal.to_nested(),
        joint_posteriors,
        loglik_trace: run.trace,
        std_errors,
        std_error_note,
        iterations: iteration,
        converged: run.converged,
        events,
    })
}

/// Marginal posteriors (`N x n x J`) under fixed parameters.
pub fn posterior_marginals(data: &Dataset, checked: &CheckedConfig, theta: &Theta) -> Result<Vec<Vec<Vec<f64>>>> {
    let model = Model::new(data, checked)?;
    if theta.n_states() != model.n_states() || theta.phi.iter().any(|p| p.len() != model.basis.n_basis()) {
        return Err(Error::InvalidParams("parameters do not match the configuration".into()));
    }
    Ok(model.e_step(theta)?.marginal.to_nested())
}

/// Most probable state of one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub state: usize,
    /// Another state has the same probability within `1e-12`.
    pub tie: bool,
}

/// Argmax classification; ties go to the lowest state index.
pub fn classify(posteriors: &[Vec<Vec<f64>>]) -> Vec<Vec<Classification>> {
    posteriors
        .iter()
        .map(|rep| {
            rep.iter()
                .map(|p| {
                    let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] + 1e-12 { j } else { b });
                    let tie = (0..p.len()).any(|j| j != best && (p[j] - p[best]).abs() <= 1e-12);
                    Classification { state: best, tie }
                })
                .collect()
        })
        .collect()
}
