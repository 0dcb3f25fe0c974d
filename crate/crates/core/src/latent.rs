//! Hidden-state process: priors, posteriors and M-step updates for the state
//! parameters.
//!
//! States are 0-based internally. State vectors are enumerated in
//! lexicographic order with the first grid position varying fastest, so index
//! `idx` decodes to `s_i = (idx / J^i) mod J`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::CovStructure;
use crate::data::{Covariates, Dataset, LatentParams};
use crate::error::{Error, Result};

/// Every state vector of length `n` over `J` states.
#[derive(Debug, Clone)]
pub struct StateSpace {
    n_states: usize,
    n_points: usize,
    states: Vec<u8>,
}

impl StateSpace {
    pub fn new(n_states: usize, n_points: usize, cap: u64) -> Result<Self> {
        let too_large = Error::EnumerationTooLarge { states: n_states, points: n_points, cap };
        let mut count: u64 = 1;
        for _ in 0..n_points {
            count = count.checked_mul(n_states as u64).ok_or(too_large.clone())?;
            if count > cap {
                return Err(too_large);
            }
        }
        if n_states > u8::MAX as usize {
            return Err(Error::Unsupported("at most 255 states".into()));
        }
        let count = count as usize;
        let mut states = vec![0u8; count * n_points];
        let mut current = vec![0u8; n_points];
        for idx in 0..count {
            states[idx * n_points..(idx + 1) * n_points].copy_from_slice(&current);
            // odometer, position 0 fastest
            for digit in current.iter_mut() {
                *digit += 1;
                if (*digit as usize) < n_states {
                    break;
                }
                *digit = 0;
            }
        }
        Ok(StateSpace { n_states, n_points, states })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn get(&self, idx: usize) -> &[u8] {
        &self.states[idx * self.n_points..(idx + 1) * self.n_points]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.states.chunks_exact(self.n_points)
    }
}

/// `n_{s,j}`: occurrences of each state.
pub fn state_counts(s: &[u8], n_states: usize) -> Vec<usize> {
    let mut c = vec![0; n_states];
    for &v in s {
        c[v as usize] += 1;
    }
    c
}

/// `n_{s,lj}`: transitions from `l` to `j` along the vector.
pub fn transition_counts(s: &[u8], n_states: usize) -> Vec<Vec<usize>> {
    let mut c = vec![vec![0; n_states]; n_states];
    for w in s.windows(2) {
        c[w[0] as usize][w[1] as usize] += 1;
    }
    c
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// State probabilities under the multinomial logistic model with state 1 as
/// reference. `design` includes the leading intercept.
pub fn covariate_probs(beta: &[Vec<f64>], design: &[f64]) -> Vec<f64> {
    let mut eta = Vec::with_capacity(beta.len() + 1);
    eta.push(0.0);
    eta.extend(beta.iter().map(|b| b.iter().zip(design).map(|(u, v)| u * v).sum::<f64>()));
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = eta.iter().map(|e| (e - m).exp()).sum();
    eta.iter().map(|e| (e - m).exp() / z).collect()
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Per-point log state probabilities `log p(z_ik = j)` for a replicate under
/// the independent state models (`n x J`).
pub fn pointwise_log_probs(alpha: &LatentParams, covariates: Option<&Covariates>, k: usize, n: usize) -> Vec<Vec<f64>> {
    match alpha {
        LatentParams::Iid { p } => vec![p.iter().map(|&v| ln(v)).collect(); n],
        LatentParams::Covariate { beta } => {
            let c = covariates.expect("covariate model requires covariates");
            (0..n)
                .map(|i| covariate_probs(beta, &c.design_row(k, i)).into_iter().map(ln).collect())
                .collect()
        }
        LatentParams::Markov { .. } => panic!("Markov states are not pointwise independent"),
    }
}

/// `log p(z_k = s | alpha)`; `-inf` for impossible vectors.
pub fn log_prior(s: &[u8], alpha: &LatentParams, covariates: Option<&Covariates>, k: usize) -> f64 {
    match alpha {
        LatentParams::Iid { p } => s.iter().map(|&j| ln(p[j as usize])).sum(),
        LatentParams::Markov { pi, a } => {
            let mut v = ln(pi[s[0] as usize]);
            for w in s.windows(2) {
                v += ln(a[w[0] as usize][w[1] as usize]);
            }
            v
        }
        LatentParams::Covariate { beta } => {
            let c = covariates.expect("covariate model requires covariates");
            s.iter()
                .enumerate()
                .map(|(i, &j)| ln(covariate_probs(beta, &c.design_row(k, i))[j as usize]))
                .sum()
        }
    }
}

/// `N x n x J` marginal posteriors `p(z_ik = j | y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    n_replicates: usize,
    n_points: usize,
    n_states: usize,
    data: Vec<f64>,
}

impl Marginals {
    pub fn zeros(n_replicates: usize, n_points: usize, n_states: usize) -> Self {
        Marginals { n_replicates, n_points, n_states, data: vec![0.0; n_replicates * n_points * n_states] }
    }

    /// Point masses on known states.
    pub fn from_states(states: &[Vec<u8>], n_states: usize) -> Self {
        let n = states.first().map_or(0, |s| s.len());
        let mut m = Marginals::zeros(states.len(), n, n_states);
        for (k, s) in states.iter().enumerate() {
            for (i, &j) in s.iter().enumerate() {
                m.set(k, i, j as usize, 1.0);
            }
        }
        m
    }

    pub fn n_replicates(&self) -> usize {
        self.n_replicates
    }
    pub fn n_points(&self) -> usize {
        self.n_points
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n_points + i) * self.n_states + j]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.data[(k * self.n_points + i) * self.n_states + j] = v;
    }

    pub fn point(&self, k: usize, i: usize) -> &[f64] {
        let start = (k * self.n_points + i) * self.n_states;
        &self.data[start..start + self.n_states]
    }

    fn replicate_mut(&mut self, k: usize) -> &mut [f64] {
        let len = self.n_points * self.n_states;
        &mut self.data[k * len..(k + 1) * len]
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_replicates)
            .map(|k| (0..self.n_points).map(|i| self.point(k, i).to_vec()).collect())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Marginals) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `N x (n-1) x J x J` posteriors of consecutive state pairs; entry
/// `(k, i, l, j)` is `p(z_(i)k = l, z_(i+1)k = j | y_k)` with 0-based `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairwise {
    n_points: usize,
    n_states: usize,
    data: Vec<f64>,
}

impl Pairwise {
    pub fn zeros(n_replicates: usize, n_points: usize, n_states: usize) -> Self {
        let len = n_replicates * (n_points - 1) * n_states * n_states;
        Pairwise { n_points, n_states, data: vec![0.0; len] }
    }

    fn index(&self, k: usize, i: usize, l: usize, j: usize) -> usize {
        ((k * (self.n_points - 1) + i) * self.n_states + l) * self.n_states + j
    }

    pub fn get(&self, k: usize, i: usize, l: usize, j: usize) -> f64 {
        self.data[self.index(k, i, l, j)]
    }

    fn replicate_mut(&mut self, k: usize) -> &mut [f64] {
        let len = (self.n_points - 1) * self.n_states * self.n_states;
        &mut self.data[k * len..(k + 1) * len]
    }

    pub fn max_abs_diff(&self, other: &Pairwise) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Output of an E-step.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// Per replicate, probabilities over the canonical state-vector order.
    pub joint: Option<Vec<Vec<f64>>>,
    pub marginal: Marginals,
    pub pairwise: Option<Pairwise>,
    /// `log p(y_k | theta)` per replicate.
    pub loglik: Vec<f64>,
}

impl Posteriors {
    pub fn total_loglik(&self) -> f64 {
        self.loglik.iter().sum()
    }
}

fn fill_from_joint(
    space: &StateSpace,
    probs: &[f64],
    marg: &mut [f64],
    pair: Option<&mut [f64]>,
) {
    let j = space.n_states();
    for (idx, s) in space.iter().enumerate() {
        let p = probs[idx];
        if p == 0.0 {
            continue;
        }
        for (i, &st) in s.iter().enumerate() {
            marg[i * j + st as usize] += p;
        }
    }
    if let Some(pair) = pair {
        for (idx, s) in space.iter().enumerate() {
            let p = probs[idx];
            if p == 0.0 {
                continue;
            }
            for (i, w) in s.windows(2).enumerate() {
                pair[(i * j + w[0] as usize) * j + w[1] as usize] += p;
            }
        }
    }
}

/// Exact posterior over every state vector for each replicate.
///
/// `fitted` is `J x n` (`f_j(x_i)`). Marginals are always filled; pairwise
/// tables only for the Markov model.
pub fn joint_posterior(
    data: &Dataset,
    space: &StateSpace,
    fitted: &[Vec<f64>],
    cov: &CovStructure,
    alpha: &LatentParams,
) -> Result<Posteriors> {
    let n_rep = data.n_replicates();
    let n = data.n_points();
    let j = space.n_states();
    let markov = matches!(alpha, LatentParams::Markov { .. });
    let covariates = data.covariates();

    let per_rep: Vec<Result<(Vec<f64>, f64)>> = (0..n_rep)
        .into_par_iter()
        .map(|k| {
            let y = data.replicate(k);
            let pointwise = (!markov).then(|| pointwise_log_probs(alpha, covariates, k, n));
            let mut r = vec![0.0; n];
            let mut logs = Vec::with_capacity(space.len());
            for s in space.iter() {
                for i in 0..n {
                    r[i] = y[i] - fitted[s[i] as usize][i];
                }
                let lp = match &pointwise {
                    Some(t) => s.iter().enumerate().map(|(i, &st)| t[i][st as usize]).sum(),
                    None => log_prior(s, alpha, covariates, k),
                };
                let term = if lp == f64::NEG_INFINITY { lp } else { lp + cov.log_density(&r, s) };
                logs.push(term);
            }
            let total = log_sum_exp(&logs);
            if !total.is_finite() {
                return Err(Error::DegenerateLikelihood(k));
            }
            for v in logs.iter_mut() {
                *v = (*v - total).exp();
            }
            Ok((logs, total))
        })
        .collect();

    let mut joint = Vec::with_capacity(n_rep);
    let mut loglik = Vec::with_capacity(n_rep);
    for res in per_rep {
        let (p, l) = res?;
        joint.push(p);
        loglik.push(l);
    }
    let mut marginal = Marginals::zeros(n_rep, n, j);
    let mut pairwise = markov.then(|| Pairwise::zeros(n_rep, n, j));
    for (k, probs) in joint.iter().enumerate() {
        let pair = pairwise.as_mut().map(|p| p.replicate_mut(k));
        fill_from_joint(space, probs, marginal.replicate_mut(k), pair);
    }
    Ok(Posteriors { joint: Some(joint), marginal, pairwise, loglik })
}

fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + var.ln() + r * r / var)
}

/// `n x J` Gaussian log emission densities for one replicate.
fn log_emissions(y: &[f64], fitted: &[Vec<f64>], sigma2: &[f64]) -> Vec<Vec<f64>> {
    (0..y.len())
        .map(|i| (0..fitted.len()).map(|j| log_normal(y[i], fitted[j][i], sigma2[j])).collect())
        .collect()
}

/// Pointwise Bayes rule for independent states with diagonal covariance.
/// `sigma2` holds one variance per state.
pub fn marginal_posterior_pointwise(
    data: &Dataset,
    fitted: &[Vec<f64>],
    sigma2: &[f64],
    alpha: &LatentParams,
) -> Result<Posteriors> {
    let n_rep = data.n_replicates();
    let n = data.n_points();
    let j = fitted.len();
    let covariates = data.covariates();
    let mut marginal = Marginals::zeros(n_rep, n, j);
    let mut loglik = vec![0.0; n_rep];
    for k in 0..n_rep {
        let y = data.replicate(k);
        let prior = pointwise_log_probs(alpha, covariates, k, n);
        let emit = log_emissions(&y, fitted, sigma2);
        let mut total = 0.0;
        let mut terms = vec![0.0; j];
        for i in 0..n {
            for st in 0..j {
                let lp = prior[i][st];
                terms[st] = if lp == f64::NEG_INFINITY { lp } else { lp + emit[i][st] };
            }
            let z = log_sum_exp(&terms);
            if !z.is_finite() {
                return Err(Error::DegenerateLikelihood(k));
            }
            total += z;
            for st in 0..j {
                marginal.set(k, i, st, (terms[st] - z).exp());
            }
        }
        loglik[k] = total;
    }
    Ok(Posteriors { joint: None, marginal, pairwise: None, loglik })
}

/// Log-space forward–backward recursions for Markov states with diagonal
/// covariance.
pub fn forward_backward(data: &Dataset, fitted: &[Vec<f64>], sigma2: &[f64], pi: &[f64], a: &[Vec<f64>]) -> Result<Posteriors> {
    let n_rep = data.n_replicates();
    let n = data.n_points();
    let j = fitted.len();
    let log_pi: Vec<f64> = pi.iter().map(|&v| ln(v)).collect();
    let log_a: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|&v| ln(v)).collect()).collect();
    let mut marginal = Marginals::zeros(n_rep, n, j);
    let mut pairwise = Pairwise::zeros(n_rep, n, j);
    let mut loglik = vec![0.0; n_rep];
    let mut buf = vec![0.0; j];

    for k in 0..n_rep {
        let y = data.replicate(k);
        let emit = log_emissions(&y, fitted, sigma2);
        let add = |a: f64, b: f64| if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY { f64::NEG_INFINITY } else { a + b };

        let mut fwd = vec![vec![0.0; j]; n];
        for st in 0..j {
            fwd[0][st] = add(log_pi[st], emit[0][st]);
        }
        for i in 1..n {
            for st in 0..j {
                for l in 0..j {
                    buf[l] = add(fwd[i - 1][l], log_a[l][st]);
                }
                fwd[i][st] = add(log_sum_exp(&buf), emit[i][st]);
            }
        }
        let mut bwd = vec![vec![0.0; j]; n];
        for i in (0..n - 1).rev() {
            for l in 0..j {
                for st in 0..j {
                    buf[st] = add(add(log_a[l][st], emit[i + 1][st]), bwd[i + 1][st]);
                }
                bwd[i][l] = log_sum_exp(&buf);
            }
        }
        let total = log_sum_exp(&fwd[n - 1]);
        if !total.is_finite() {
            return Err(Error::DegenerateLikelihood(k));
        }
        loglik[k] = total;
        for i in 0..n {
            for st in 0..j {
                marginal.set(k, i, st, add(fwd[i][st], bwd[i][st]).exp_minus(total));
            }
        }
        let pair = pairwise.replicate_mut(k);
        for i in 1..n {
            for l in 0..j {
                for st in 0..j {
                    let v = add(add(fwd[i - 1][l], log_a[l][st]), add(emit[i][st], bwd[i][st]));
                    pair[((i - 1) * j + l) * j + st] = v.exp_minus(total);
                }
            }
        }
    }
    Ok(Posteriors { joint: None, marginal, pairwise: Some(pairwise), loglik })
}

trait ExpMinus {
    fn exp_minus(self, z: f64) -> f64;
}

impl ExpMinus for f64 {
    fn exp_minus(self, z: f64) -> f64 {
        if self == f64::NEG_INFINITY {
            0.0
        } else {
            (self - z).exp()
        }
    }
}

/// Expected complete-data log prior of the states, `E(L2 | y)`, evaluated
/// from marginal (and for Markov, pairwise) posteriors. Terms with zero
/// posterior weight contribute nothing even where the log probability is
/// `-inf`.
pub fn expected_log_prior(post: &Posteriors, alpha: &LatentParams, covariates: Option<&Covariates>) -> f64 {
    let m = &post.marginal;
    let (n_rep, n, j) = (m.n_replicates(), m.n_points(), m.n_states());
    let wlog = |w: f64, p: f64| if w == 0.0 { 0.0 } else { w * ln(p) };
    let mut total = 0.0;
    match alpha {
        LatentParams::Iid { p } => {
            for k in 0..n_rep {
                for i in 0..n {
                    for st in 0..j {
                        total += wlog(m.get(k, i, st), p[st]);
                    }
                }
            }
        }
        LatentParams::Covariate { beta } => {
            let c = covariates.expect("covariate model requires covariates");
            for k in 0..n_rep {
                for i in 0..n {
                    let probs = covariate_probs(beta, &c.design_row(k, i));
                    for st in 0..j {
                        total += wlog(m.get(k, i, st), probs[st]);
                    }
                }
            }
        }
        LatentParams::Markov { pi, a } => {
            let pair = post.pairwise.as_ref().expect("Markov model requires pairwise posteriors");
            for k in 0..n_rep {
                for st in 0..j {
                    total += wlog(m.get(k, 0, st), pi[st]);
                }
                for i in 0..n - 1 {
                    for l in 0..j {
                        for st in 0..j {
                            total += wlog(pair.get(k, i, l, st), a[l][st]);
                        }
                    }
                }
            }
        }
    }
    total
}

/// Result of a latent-parameter M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaUpdate {
    pub alpha: LatentParams,
    /// Diagnostic messages (retained transition rows, Newton trouble).
    pub events: Vec<String>,
}

/// Maximizes `E(L2 | y)` over the latent parameters given posteriors.
/// `previous` selects the model kind and seeds retained rows / warm starts.
pub fn update_alpha(post: &Posteriors, previous: &LatentParams, covariates: Option<&Covariates>) -> Result<AlphaUpdate> {
    let m = &post.marginal;
    let (n_rep, n, j) = (m.n_replicates(), m.n_points(), m.n_states());
    let mut events = Vec::new();
    let alpha = match previous {
        LatentParams::Iid { .. } => {
            let mut p = vec![0.0; j];
            for k in 0..n_rep {
                for i in 0..n {
                    for (st, v) in m.point(k, i).iter().enumerate() {
                        p[st] += v;
                    }
                }
            }
            let total = (n_rep * n) as f64;
            LatentParams::Iid { p: p.into_iter().map(|v| v / total).collect() }
        }
        LatentParams::Markov { a: prev_a, .. } => {
            let pair = post.pairwise.as_ref().ok_or_else(|| Error::SpecMismatch("Markov update needs pairwise posteriors".into()))?;
            let mut pi = vec![0.0; j];
            for k in 0..n_rep {
                for (st, v) in m.point(k, 0).iter().enumerate() {
                    pi[st] += v;
                }
            }
            pi.iter_mut().for_each(|v| *v /= n_rep as f64);
            let mut a = vec![vec![0.0; j]; j];
            let mut occupancy = vec![0.0; j];
            for k in 0..n_rep {
                for i in 0..n - 1 {
                    for l in 0..j {
                        occupancy[l] += m.get(k, i, l);
                        for st in 0..j {
                            a[l][st] += pair.get(k, i, l, st);
                        }
                    }
                }
            }
            for l in 0..j {
                if occupancy[l] < 1e-12 {
                    a[l] = prev_a[l].clone();
                    events.push(format!("state {} has no expected occupancy; transition row kept", l + 1));
                    continue;
                }
                // normalize by the row sum, which equals the occupancy up to rounding
                let row_sum: f64 = a[l].iter().sum();
                a[l].iter_mut().for_each(|v| *v /= row_sum);
            }
            LatentParams::Markov { pi, a }
        }
        LatentParams::Covariate { beta } => {
            let c = covariates.ok_or_else(|| Error::SpecMismatch("covariate update needs covariates".into()))?;
            let fit = newton_multinomial(m, c, beta);
            if let Some(msg) = &fit.trouble {
                events.push(msg.clone());
            }
            if fit.diverged {
                return Err(Error::NewtonDiverged);
            }
            LatentParams::Covariate { beta: fit.beta }
        }
    };
    Ok(AlphaUpdate { alpha, events })
}

#[derive(Debug, Clone)]
pub struct NewtonFit {
    pub beta: Vec<Vec<f64>>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub diverged: bool,
    pub trouble: Option<String>,
}

/// Weighted multinomial logistic objective, gradient and negative Hessian
/// over the flattened `(J-1) x P` coefficients.
fn multinomial_terms(weights: &Marginals, cov: &Covariates, beta: &[Vec<f64>]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let (n_rep, n, j) = (weights.n_replicates(), weights.n_points(), weights.n_states());
    let p = cov.m() + 1;
    let dim = (j - 1) * p;
    let mut obj = 0.0;
    let mut grad = DVector::zeros(dim);
    let mut neg_hess = DMatrix::zeros(dim, dim);
    for k in 0..n_rep {
        for i in 0..n {
            let v = cov.design_row(k, i);
            let probs = covariate_probs(beta, &v);
            let w = weights.point(k, i);
            for st in 0..j {
                if w[st] != 0.0 {
                    obj += w[st] * ln(probs[st]);
                }
            }
            for a in 1..j {
                let ra = w[a] - probs[a];
                for (u, vu) in v.iter().enumerate() {
                    grad[(a - 1) * p + u] += ra * vu;
                }
                for b in 1..j {
                    let c = if a == b { probs[a] * (1.0 - probs[a]) } else { -probs[a] * probs[b] };
                    for (u, vu) in v.iter().enumerate() {
                        for (t, vt) in v.iter().enumerate() {
                            neg_hess[((a - 1) * p + u, (b - 1) * p + t)] += c * vu * vt;
                        }
                    }
                }
            }
        }
    }
    (obj, grad, neg_hess)
}

fn flatten(beta: &[Vec<f64>]) -> DVector<f64> {
    DVector::from_iterator(beta.iter().map(|r| r.len()).sum(), beta.iter().flatten().copied())
}

fn unflatten(v: &DVector<f64>, rows: usize) -> Vec<Vec<f64>> {
    let p = v.len() / rows;
    (0..rows).map(|r| v.rows(r * p, p).iter().copied().collect()).collect()
}

/// Newton–Raphson with step halving on the expected multinomial logistic
/// log-likelihood. Stops at gradient sup-norm 1e-10 or after 50 steps.
pub fn newton_multinomial(weights: &Marginals, cov: &Covariates, start: &[Vec<f64>]) -> NewtonFit {
    const MAX_STEPS: usize = 50;
    const MAX_HALVINGS: usize = 30;
    const GRAD_TOL: f64 = 1e-10;
    let rows = start.len();
    let mut beta = start.to_vec();
    let (mut obj, mut grad, mut neg_hess) = multinomial_terms(weights, cov, &beta);
    let mut iterations = 0;
    let mut trouble = None;
    while iterations < MAX_STEPS && grad.amax() > GRAD_TOL {
        iterations += 1;
        let step = match neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let ridge = 1e-10 * neg_hess.diagonal().amax().max(1e-300);
                let mut reg = neg_hess.clone();
                for d in 0..reg.nrows() {
                    reg[(d, d)] += ridge;
                }
                match reg.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => grad.clone(),
                }
            }
        };
        let current = flatten(&beta);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = unflatten(&(&current + &step * t), rows);
            let (o, g, h) = multinomial_terms(weights, cov, &candidate);
            if o.is_finite() && o >= obj {
                beta = candidate;
                obj = o;
                grad = g;
                neg_hess = h;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // cannot improve further in floating point; treat as converged when
            // the gradient is already small relative to the curvature
            let scaled = grad.amax() / neg_hess.diagonal().amax().max(1.0);
            if scaled > 1e-8 {
                trouble = Some(format!("Newton step halving exhausted with gradient {:.3e}", grad.amax()));
                return NewtonFit { beta, iterations, gradient_norm: grad.amax(), diverged: true, trouble };
            }
            break;
        }
    }
    if grad.amax() > GRAD_TOL && iterations >= MAX_STEPS {
        trouble = Some(format!("Newton stopped after {MAX_STEPS} steps with gradient {:.3e}", grad.amax()));
    }
    NewtonFit { beta, iterations, gradient_norm: grad.amax(), diverged: false, trouble }
}
