//! Louis-method observed information and standard errors for the latent
//! process parameters, holding the functions and covariance fixed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::CovStructure;
use crate::data::{Covariates, LatentParams, StdErrors, Theta};
use crate::em::Model;
use crate::error::{Error, Result};
use crate::latent::{self, covariate_probs, Marginals, Posteriors, StateSpace};

const BOUNDARY: f64 = 1e-8;

/// Information over the free latent coordinates together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationMatrix {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub information: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub std_errors: Vec<f64>,
}

impl InformationMatrix {
    pub fn new(names: Vec<String>, estimates: Vec<f64>, mut information: DMatrix<f64>) -> Result<Self> {
        let dim = information.nrows();
        for a in 0..dim {
            for b in 0..a {
                let v = 0.5 * (information[(a, b)] + information[(b, a)]);
                information[(a, b)] = v;
                information[(b, a)] = v;
            }
        }
        let chol = information.clone().cholesky().ok_or(Error::SingularInformation)?;
        let covariance = chol.inverse();
        let std_errors: Vec<f64> = covariance.diagonal().iter().map(|v| v.sqrt()).collect();
        if std_errors.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::SingularInformation);
        }
        Ok(InformationMatrix { names, estimates, information, covariance, std_errors })
    }

    pub fn to_std_errors(&self) -> StdErrors {
        StdErrors {
            names: self.names.clone(),
            estimates: self.estimates.clone(),
            std_errors: self.std_errors.clone(),
            information: crate::data::matrix_to_rows(&self.information),
        }
    }
}

/// Names and values of the free coordinates: `p_1..p_{J-1}`,
/// `(pi_1, a_12, a_21)`, or every logistic coefficient.
pub fn free_coordinates(alpha: &LatentParams) -> (Vec<String>, Vec<f64>) {
    match alpha {
        LatentParams::Iid { p } => ((1..p.len()).map(|j| format!("p{j}")).collect(), p[..p.len() - 1].to_vec()),
        LatentParams::Markov { pi, a } => (vec!["pi1".into(), "a12".into(), "a21".into()], vec![pi[0], a[0][1], a[1][0]]),
        LatentParams::Covariate { beta } => {
            let two = beta.len() == 1;
            let mut names = Vec::new();
            for (l, row) in beta.iter().enumerate() {
                for c in 0..row.len() {
                    names.push(if two { format!("beta{c}") } else { format!("beta{}_{c}", l + 2) });
                }
            }
            (names, beta.iter().flatten().copied().collect())
        }
    }
}

/// Rebuilds latent parameters from free coordinates (inverse of
/// [`free_coordinates`] for a given shape).
pub fn from_free_coordinates(shape: &LatentParams, v: &[f64]) -> LatentParams {
    match shape {
        LatentParams::Iid { .. } => {
            let mut p = v.to_vec();
            p.push(1.0 - v.iter().sum::<f64>());
            LatentParams::Iid { p }
        }
        LatentParams::Markov { .. } => LatentParams::Markov {
            pi: vec![v[0], 1.0 - v[0]],
            a: vec![vec![1.0 - v[1], v[1]], vec![v[2], 1.0 - v[2]]],
        },
        LatentParams::Covariate { beta } => {
            let width = beta[0].len();
            LatentParams::Covariate { beta: v.chunks(width).map(|c| c.to_vec()).collect() }
        }
    }
}

fn check_supported(alpha: &LatentParams) -> Result<()> {
    match alpha {
        LatentParams::Iid { p } if p.len() < 2 => Err(Error::Unsupported("a single-state model has no latent parameters".into())),
        LatentParams::Markov { pi, .. } if pi.len() != 2 => Err(Error::Unsupported("Markov standard errors require J = 2".into())),
        _ => Ok(()),
    }
}

fn check_boundary(alpha: &LatentParams) -> Result<()> {
    let (names, values) = match alpha {
        LatentParams::Iid { p } => ((1..=p.len()).map(|j| format!("p{j}")).collect::<Vec<_>>(), p.clone()),
        LatentParams::Markov { .. } => free_coordinates(alpha),
        LatentParams::Covariate { .. } => return Ok(()),
    };
    for (name, value) in names.into_iter().zip(values) {
        if value < BOUNDARY || value > 1.0 - BOUNDARY {
            return Err(Error::BoundaryParameter { name, value });
        }
    }
    Ok(())
}

/// Gradient and Hessian of `log p(z_ik = c)` for the pointwise models.
fn point_terms(alpha: &LatentParams, covariates: Option<&Covariates>, k: usize, i: usize, c: usize) -> (DVector<f64>, DMatrix<f64>) {
    match alpha {
        LatentParams::Iid { p } => {
            let last = p.len() - 1;
            let dim = last;
            let mut g = DVector::zeros(dim);
            let mut h = DMatrix::zeros(dim, dim);
            if c < last {
                g[c] = 1.0 / p[c];
                h[(c, c)] = -1.0 / (p[c] * p[c]);
            } else {
                let inv = 1.0 / p[last];
                for a in 0..dim {
                    g[a] = -inv;
                    for b in 0..dim {
                        h[(a, b)] = -inv * inv;
                    }
                }
            }
            (g, h)
        }
        LatentParams::Covariate { beta } => {
            let v = covariates.expect("covariate model requires covariates").design_row(k, i);
            let probs = covariate_probs(beta, &v);
            let (rows, width) = (beta.len(), v.len());
            let mut g = DVector::zeros(rows * width);
            let mut h = DMatrix::zeros(rows * width, rows * width);
            for l in 0..rows {
                let ind = if c == l + 1 { 1.0 } else { 0.0 };
                for a in 0..width {
                    g[l * width + a] = (ind - probs[l + 1]) * v[a];
                }
                for m in 0..rows {
                    let w = if l == m { probs[l + 1] * (1.0 - probs[l + 1]) } else { -probs[l + 1] * probs[m + 1] };
                    for a in 0..width {
                        for b in 0..width {
                            h[(l * width + a, m * width + b)] = -w * v[a] * v[b];
                        }
                    }
                }
            }
            (g, h)
        }
        LatentParams::Markov { .. } => unreachable!("Markov terms are not pointwise"),
    }
}

/// Gradient and Hessian of `log p(z_k = s)` in the free coordinates.
fn vector_terms(alpha: &LatentParams, covariates: Option<&Covariates>, k: usize, s: &[u8]) -> (DVector<f64>, DMatrix<f64>) {
    match alpha {
        LatentParams::Markov { pi, a } => {
            let first = s[0] == 0;
            let t = latent::transition_counts(s, 2);
            let (n11, n12, n21, n22) = (t[0][0] as f64, t[0][1] as f64, t[1][0] as f64, t[1][1] as f64);
            let (p, a12, a21) = (pi[0], a[0][1], a[1][0]);
            let mut g = DVector::zeros(3);
            let mut h = DMatrix::zeros(3, 3);
            if first {
                g[0] = 1.0 / p;
                h[(0, 0)] = -1.0 / (p * p);
            } else {
                g[0] = -1.0 / (1.0 - p);
                h[(0, 0)] = -1.0 / ((1.0 - p) * (1.0 - p));
            }
            g[1] = n12 / a12 - n11 / (1.0 - a12);
            h[(1, 1)] = -n12 / (a12 * a12) - n11 / ((1.0 - a12) * (1.0 - a12));
            g[2] = n21 / a21 - n22 / (1.0 - a21);
            h[(2, 2)] = -n21 / (a21 * a21) - n22 / ((1.0 - a21) * (1.0 - a21));
            (g, h)
        }
        _ => {
            let dim = free_coordinates(alpha).1.len();
            let mut g = DVector::zeros(dim);
            let mut h = DMatrix::zeros(dim, dim);
            for (i, &c) in s.iter().enumerate() {
                let (gi, hi) = point_terms(alpha, covariates, k, i, c as usize);
                g += gi;
                h += hi;
            }
            (g, h)
        }
    }
}

/// Per-replicate expectations `E(-H)`, `E(g)` and `E(g g^T)`.
struct ReplicateMoments {
    neg_hess: DMatrix<f64>,
    mean: DVector<f64>,
    second: DMatrix<f64>,
}

/// `sum_k E_k(-H) - [sum_k E_k(g g^T) + sum_{k != k'} E_k g E_k' g^T]`.
fn assemble(moments: &[ReplicateMoments], dim: usize) -> DMatrix<f64> {
    let mut neg_hess = DMatrix::zeros(dim, dim);
    let mut second = DMatrix::zeros(dim, dim);
    let mut total_mean = DVector::zeros(dim);
    let mut own = DMatrix::zeros(dim, dim);
    for m in moments {
        neg_hess += &m.neg_hess;
        second += &m.second;
        total_mean += &m.mean;
        own += &m.mean * m.mean.transpose();
    }
    let cross = &total_mean * total_mean.transpose() - own;
    neg_hess - (second + cross)
}

/// Louis information by exact enumeration over state vectors.
pub fn louis_information_generic(
    space: &StateSpace,
    joint: &[Vec<f64>],
    alpha: &LatentParams,
    covariates: Option<&Covariates>,
) -> Result<InformationMatrix> {
    check_supported(alpha)?;
    check_boundary(alpha)?;
    let (names, estimates) = free_coordinates(alpha);
    let dim = estimates.len();
    let moments: Vec<ReplicateMoments> = joint
        .par_iter()
        .enumerate()
        .map(|(k, probs)| {
            let mut m = ReplicateMoments { neg_hess: DMatrix::zeros(dim, dim), mean: DVector::zeros(dim), second: DMatrix::zeros(dim, dim) };
            for (idx, s) in space.iter().enumerate() {
                let p = probs[idx];
                if p == 0.0 {
                    continue;
                }
                let (g, h) = vector_terms(alpha, covariates, k, s);
                m.neg_hess -= h * p;
                m.second += &g * g.transpose() * p;
                m.mean += g * p;
            }
            m
        })
        .collect();
    InformationMatrix::new(names, estimates, assemble(&moments, dim))
}

/// Louis information when posteriors factorize over points (independent
/// states with diagonal covariance): per-replicate score covariance is the
/// sum of per-point covariances.
pub fn louis_information_factorized(marg: &Marginals, alpha: &LatentParams, covariates: Option<&Covariates>) -> Result<InformationMatrix> {
    check_supported(alpha)?;
    if matches!(alpha, LatentParams::Markov { .. }) {
        return Err(Error::Unsupported("Markov posteriors do not factorize over points".into()));
    }
    check_boundary(alpha)?;
    let (names, estimates) = free_coordinates(alpha);
    let dim = estimates.len();
    let (n_rep, n, j) = (marg.n_replicates(), marg.n_points(), marg.n_states());
    let moments: Vec<ReplicateMoments> = (0..n_rep)
        .into_par_iter()
        .map(|k| {
            let mut neg_hess = DMatrix::zeros(dim, dim);
            let mut mean = DVector::zeros(dim);
            let mut cov = DMatrix::zeros(dim, dim);
            for i in 0..n {
                let mut pm = DVector::zeros(dim);
                let mut ps = DMatrix::zeros(dim, dim);
                for c in 0..j {
                    let p = marg.get(k, i, c);
                    if p == 0.0 {
                        continue;
                    }
                    let (g, h) = point_terms(alpha, covariates, k, i, c);
                    neg_hess -= h * p;
                    ps += &g * g.transpose() * p;
                    pm += g * p;
                }
                cov += ps - &pm * pm.transpose();
                mean += pm;
            }
            let second = cov + &mean * mean.transpose();
            ReplicateMoments { neg_hess, mean, second }
        })
        .collect();
    InformationMatrix::new(names, estimates, assemble(&moments, dim))
}

/// IID closed forms with counts `n_{s,j}`.
pub fn louis_information_iid_closed(space: &StateSpace, joint: &[Vec<f64>], alpha: &LatentParams) -> Result<InformationMatrix> {
    check_supported(alpha)?;
    check_boundary(alpha)?;
    let p = match alpha {
        LatentParams::Iid { p } => p,
        _ => return Err(Error::SpecMismatch("closed IID information needs IID parameters".into())),
    };
    let (names, estimates) = free_coordinates(alpha);
    let jn = p.len();
    let dim = jn - 1;
    let nn = (joint.len() * space.n_points()) as f64;
    let pj = p[jn - 1];
    let mut neg_hess = DMatrix::from_element(dim, dim, nn / pj);
    for a in 0..dim {
        neg_hess[(a, a)] = nn * (1.0 / p[a] + 1.0 / pj);
    }
    let counts: Vec<Vec<usize>> = space.iter().map(|s| latent::state_counts(s, jn)).collect();
    let term = |c: &[usize], a: usize| c[a] as f64 / p[a] - c[jn - 1] as f64 / pj;
    let mut outer = DMatrix::zeros(dim, dim);
    for probs in joint {
        let mut first = DVector::<f64>::zeros(dim);
        for (idx, c) in counts.iter().enumerate() {
            let w = probs[idx];
            if w == 0.0 {
                continue;
            }
            for a in 0..dim {
                let ta = term(c, a);
                first[a] += w * ta;
                for b in 0..dim {
                    outer[(a, b)] += w * ta * term(c, b);
                }
            }
        }
        outer -= &first * first.transpose();
    }
    InformationMatrix::new(names, estimates, neg_hess - outer)
}

/// Markov (`J = 2`) information: closed diagonal `E(-H)` with the score
/// outer-product expectation by enumeration.
pub fn louis_information_markov_closed(space: &StateSpace, joint: &[Vec<f64>], alpha: &LatentParams) -> Result<InformationMatrix> {
    check_supported(alpha)?;
    check_boundary(alpha)?;
    let (pi, a) = match alpha {
        LatentParams::Markov { pi, a } => (pi, a),
        _ => return Err(Error::SpecMismatch("closed Markov information needs Markov parameters".into())),
    };
    let (names, estimates) = free_coordinates(alpha);
    let (p, a12, a21) = (pi[0], a[0][1], a[1][0]);
    let n_rep = joint.len() as f64;
    let mut occ = [0.0; 2];
    for probs in joint {
        for (idx, s) in space.iter().enumerate() {
            let w = probs[idx];
            if w == 0.0 {
                continue;
            }
            for &st in &s[..s.len() - 1] {
                occ[st as usize] += w;
            }
        }
    }
    let neg_hess = DMatrix::from_diagonal(&DVector::from_vec(vec![
        n_rep / (p * (1.0 - p)),
        occ[0] / (a12 * (1.0 - a12)),
        occ[1] / (a21 * (1.0 - a21)),
    ]));
    let generic = louis_information_generic(space, joint, alpha, None)?;
    // generic = E(-H) - E(L' L'^T) with exact E(-H); recover the outer term
    let mut exact_neg_hess = DMatrix::zeros(3, 3);
    for (k, probs) in joint.iter().enumerate() {
        for (idx, s) in space.iter().enumerate() {
            let w = probs[idx];
            if w != 0.0 {
                exact_neg_hess -= vector_terms(alpha, None, k, s).1 * w;
            }
        }
    }
    let outer = exact_neg_hess - &generic.information;
    InformationMatrix::new(names, estimates, neg_hess - outer)
}

/// Standard errors for a fitted model, choosing the cheapest exact path.
pub fn standard_errors(model: &Model, theta: &Theta, post: &Posteriors) -> Result<StdErrors> {
    let covariates = model.data.covariates();
    let info = match (&theta.alpha, &post.joint, &model.space) {
        (LatentParams::Iid { .. }, Some(joint), Some(space)) => louis_information_iid_closed(space, joint, &theta.alpha)?,
        (LatentParams::Markov { .. }, Some(joint), Some(space)) => louis_information_markov_closed(space, joint, &theta.alpha)?,
        (LatentParams::Covariate { .. }, Some(joint), Some(space)) => louis_information_generic(space, joint, &theta.alpha, covariates)?,
        (LatentParams::Markov { .. }, _, _) => {
            check_supported(&theta.alpha)?;
            let space = model.state_space()?;
            let fitted = model.fitted(&theta.phi);
            let cov = CovStructure::new(&theta.cov, model.data.n_points())?;
            let full = latent::joint_posterior(model.data, &space, &fitted, &cov, &theta.alpha)?;
            let joint = full.joint.as_ref().expect("enumerated posteriors");
            louis_information_markov_closed(&space, joint, &theta.alpha)?
        }
        (alpha, _, _) => louis_information_factorized(&post.marginal, alpha, covariates)?,
    };
    Ok(info.to_std_errors())
}
