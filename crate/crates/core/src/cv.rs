//! Leave-one-replicate-out cross-validation of the smoothing parameters for
//! diagonal covariance models.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CheckedConfig, CovParams, Dataset, FitReport, LambdaSetting};
use crate::em::{self, Model};
use crate::error::{Error, Result};

/// Condition number of `I - H_k` above which the literal refit is used. The
/// shortcut loses about `cond * eps` relative accuracy, so this keeps it
/// near `1e-10`.
const CONDITION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub grid: Vec<f64>,
    pub outer_max_iter: usize,
    pub outer_tol: f64,
    /// Starting smoothing parameter for every state.
    pub initial: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { grid: log_grid(1e-6, 1e2, 25), outer_max_iter: 20, outer_tol: 1e-3, initial: 0.01 }
    }
}

impl CvConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::SpecMismatch("CV grid values must be finite and positive".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::SpecMismatch("CV grid must be strictly increasing".into()));
        }
        if self.outer_max_iter == 0 {
            return Err(Error::SpecMismatch("outer_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect();
    g[0] = lo;
    g[count - 1] = hi;
    g
}

/// Frozen diagonal weights `W_kj` for one state: `w[k][i] = p_ik(j) / sigma_j^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub w: Vec<Vec<f64>>,
}

impl FrozenWeights {
    /// Weights for state `j` from a fit's marginal posteriors and variances.
    pub fn from_fit(report: &FitReport, j: usize) -> Result<Self> {
        let sigma2 = match &report.theta.cov {
            CovParams::IsoDiag { sigma2 } => *sigma2,
            CovParams::StateDiag { sigma2 } => sigma2[j],
            _ => return Err(Error::Unsupported("CV unsupported for this covariance kind".into())),
        };
        let w = report.posteriors.iter().map(|rep| rep.iter().map(|p| p[j] / sigma2).collect()).collect();
        Ok(FrozenWeights { w })
    }
}

/// One CV evaluation with any per-replicate fallbacks taken.
#[derive(Debug, Clone, PartialEq)]
pub struct CvScore {
    pub score: f64,
    /// Replicates whose term came from a literal refit.
    pub fallbacks: Vec<usize>,
}

/// `CV_j(lambda)` via smoother matrices `H_k = B A^{-1} B^T W_k`, with a
/// literal refit for replicates where `I - H_k` is numerically singular.
pub fn cv_score(data: &Dataset, bmat: &DMatrix<f64>, penalty: &DMatrix<f64>, weights: &FrozenWeights, lambda: f64) -> Result<CvScore> {
    let n = data.n_points();
    let n_rep = data.n_replicates();
    let a = normal_matrix(bmat, penalty, &weights.w, lambda, None);
    let rhs = normal_rhs(data, bmat, &weights.w, None);
    let chol = match a.clone().cholesky() {
        Some(c) => c,
        None => return literal_score(data, bmat, penalty, weights, lambda),
    };
    // M = B A^{-1} B^T, so H_k = M W_k and f = B A^{-1} rhs
    let m = bmat * chol.solve(&bmat.transpose());
    let fitted = bmat * chol.solve(&rhs);
    let totals: Vec<f64> = (0..n).map(|i| weights.w.iter().map(|wk| wk[i]).sum()).collect();
    let scale = totals.iter().cloned().fold(0.0, f64::max);

    let terms: Vec<(f64, bool)> = (0..n_rep)
        .into_par_iter()
        .map(|k| {
            let wk = &weights.w[k];
            // with fewer than two weighted points left, affine components of
            // the leave-one-out fit are unidentified and I - H_k is singular
            let support = (0..n).filter(|&i| totals[i] - wk[i] > 1e-12 * scale).count();
            if support < 2 {
                return Ok((literal_term(data, bmat, penalty, &weights.w, lambda, k)?, true));
            }
            let ih = DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { 0.0 } - m[(a, b)] * wk[b]);
            let sv = ih.clone().svd(false, false).singular_values;
            let (smax, smin) = (sv.max(), sv.min());
            if !(smin > 0.0) || smax / smin > CONDITION_LIMIT {
                return Ok((literal_term(data, bmat, penalty, &weights.w, lambda, k)?, true));
            }
            let d = DVector::from_fn(n, |i, _| fitted[i] - data.y()[(k, i)]);
            let e = ih.lu().solve(&d).ok_or(Error::SingularSystem)?;
            Ok((e.iter().zip(wk).map(|(v, w)| w * v * v).sum(), false))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut score = 0.0;
    let mut fallbacks = Vec::new();
    for (k, (t, fb)) in terms.into_iter().enumerate() {
        score += t;
        if fb {
            fallbacks.push(k);
        }
    }
    Ok(CvScore { score, fallbacks })
}

fn normal_matrix(bmat: &DMatrix<f64>, penalty: &DMatrix<f64>, w: &[Vec<f64>], lambda: f64, skip: Option<usize>) -> DMatrix<f64> {
    let n = bmat.nrows();
    let mut total = vec![0.0; n];
    for (k, wk) in w.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        for i in 0..n {
            total[i] += wk[i];
        }
    }
    let wd = DMatrix::from_diagonal(&DVector::from_vec(total));
    bmat.transpose() * wd * bmat + penalty * (2.0 * lambda)
}

fn normal_rhs(data: &Dataset, bmat: &DMatrix<f64>, w: &[Vec<f64>], skip: Option<usize>) -> DVector<f64> {
    let n = bmat.nrows();
    let mut t = DVector::zeros(n);
    for (k, wk) in w.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        for i in 0..n {
            t[i] += wk[i] * data.y()[(k, i)];
        }
    }
    bmat.transpose() * t
}

/// Square-root factor `L` of the penalty, `R = L^T L`.
fn penalty_root(penalty: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(penalty.clone());
    let mut l = eig.eigenvectors.transpose();
    for (r, ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        l.row_mut(r).scale_mut(s);
    }
    l
}

/// Leave-one-out fit without replicate `k`, solved by QR on the stacked
/// least-squares system `[sqrt(W) B; sqrt(2 lambda) L]`. When fewer than two
/// points keep weight, the minimizer set is an affine subspace; the member
/// closest to `y_k` in the `W_k` norm is returned.
pub fn leave_one_out_fit(data: &Dataset, bmat: &DMatrix<f64>, penalty: &DMatrix<f64>, w: &[Vec<f64>], lambda: f64, k: usize) -> DVector<f64> {
    let (n, kb) = (bmat.nrows(), bmat.ncols());
    let mut total = vec![0.0; n];
    let mut weighted_y = vec![0.0; n];
    for (r, wr) in w.iter().enumerate().filter(|(r, _)| *r != k) {
        for i in 0..n {
            total[i] += wr[i];
            weighted_y[i] += wr[i] * data.y()[(r, i)];
        }
    }
    let scale = total.iter().cloned().fold(0.0, f64::max);
    let support = total.iter().filter(|&&t| t > 1e-12 * scale).count();
    if support >= 2 {
        let l = penalty_root(penalty);
        let root = (2.0 * lambda).sqrt();
        let mut lhs = DMatrix::zeros(n + kb, kb);
        let mut target = DVector::zeros(n + kb);
        for i in 0..n {
            let sw = total[i].max(0.0).sqrt();
            for c in 0..kb {
                lhs[(i, c)] = sw * bmat[(i, c)];
            }
            if total[i] > 0.0 {
                target[i] = weighted_y[i] / sw;
            }
        }
        for r in 0..kb {
            for c in 0..kb {
                lhs[(n + r, c)] = root * l[(r, c)];
            }
        }
        let qr = lhs.qr();
        let rhs = qr.q().transpose() * target;
        if let Some(phi) = qr.r().solve_upper_triangular(&rhs) {
            if phi.iter().all(|v| v.is_finite()) {
                return bmat * phi;
            }
        }
    }
    let a = normal_matrix(bmat, penalty, w, lambda, Some(k));
    let rhs = normal_rhs(data, bmat, w, Some(k));
    let eig = SymmetricEigen::new(a);
    let top = eig.eigenvalues.amax();
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut phi = DVector::zeros(kb);
    let mut null = Vec::new();
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        if ev > tol {
            phi += v * (v.dot(&rhs) / ev);
        } else {
            null.push(v.into_owned());
        }
    }
    if !null.is_empty() {
        // choose the null-space component to fit y_k in the W_k norm
        let nb = DMatrix::from_columns(&null);
        let bn = bmat * &nb;
        let resid = DVector::from_fn(n, |i, _| data.y()[(k, i)]) - bmat * &phi;
        let sw = DVector::from_iterator(n, w[k].iter().map(|v| v.max(0.0).sqrt()));
        let lhs = DMatrix::from_fn(n, bn.ncols(), |i, c| sw[i] * bn[(i, c)]);
        let target = resid.component_mul(&sw);
        if let Ok(c) = lhs.svd(true, true).solve(&target, 1e-12) {
            phi += nb * c;
        }
    }
    bmat * phi
}

fn literal_term(data: &Dataset, bmat: &DMatrix<f64>, penalty: &DMatrix<f64>, w: &[Vec<f64>], lambda: f64, k: usize) -> Result<f64> {
    let f = leave_one_out_fit(data, bmat, penalty, w, lambda, k);
    let v: f64 = (0..data.n_points()).map(|i| w[k][i] * (f[i] - data.y()[(k, i)]).powi(2)).sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::SingularSystem)
    }
}

/// `CV_j(lambda)` computed by refitting without each replicate in turn.
pub fn literal_score(data: &Dataset, bmat: &DMatrix<f64>, penalty: &DMatrix<f64>, weights: &FrozenWeights, lambda: f64) -> Result<CvScore> {
    let terms = (0..data.n_replicates())
        .into_par_iter()
        .map(|k| literal_term(data, bmat, penalty, &weights.w, lambda, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvScore { score: terms.iter().sum(), fallbacks: (0..data.n_replicates()).collect() })
}

/// CV curves computed in one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvIteration {
    /// Smoothing parameters of the fit that produced the frozen weights.
    pub lambdas_in: Vec<f64>,
    /// `J x grid` CV values.
    pub curves: Vec<Vec<f64>>,
    pub selected: Vec<f64>,
    /// Per state, the number of literal-refit fallbacks summed over the grid.
    pub fallbacks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub iterations: Vec<CvIteration>,
    pub selected: Vec<f64>,
    pub converged: bool,
}

/// CV curve and minimizer for every state given one fit.
pub fn cv_curves(model: &Model, report: &FitReport, grid: &[f64]) -> Result<CvIteration> {
    let j = model.n_states();
    let mut curves = Vec::with_capacity(j);
    let mut selected = Vec::with_capacity(j);
    let mut fallbacks = Vec::with_capacity(j);
    for st in 0..j {
        let weights = FrozenWeights::from_fit(report, st)?;
        let mut curve = Vec::with_capacity(grid.len());
        let mut fb = 0;
        for &lambda in grid {
            let s = cv_score(model.data, &model.bmat, &model.penalty, &weights, lambda)?;
            fb += s.fallbacks.len();
            curve.push(s.score);
        }
        // first minimum wins ties
        let best = (0..grid.len()).fold(0, |b, i| if curve[i] < curve[b] { i } else { b });
        selected.push(grid[best]);
        curves.push(curve);
        fallbacks.push(fb);
    }
    Ok(CvIteration { lambdas_in: report.theta.lambdas.clone(), curves, selected, fallbacks })
}

/// Iterates fit, frozen-weight CV and re-selection until the selected values
/// stop changing, then returns the fit at the selected values.
pub fn select_lambdas(data: &Dataset, checked: &CheckedConfig, cv: &CvConfig) -> Result<(FitReport, CvReport)> {
    cv.check()?;
    if !checked.config.covariance.kind.is_diagonal() {
        return Err(Error::Unsupported("CV unsupported for this covariance kind".into()));
    }
    let j = checked.config.latent.n_states;
    let mut inner = checked.clone();
    inner.config.standard_errors = false;
    let model = Model::new(data, &inner)?;

    let mut lambdas = vec![cv.initial; j];
    let mut iterations = Vec::new();
    let mut converged = false;
    for _ in 0..cv.outer_max_iter {
        let fit = em::ecm_fit(data, &inner, &lambdas)?;
        let it = cv_curves(&model, &fit, &cv.grid)?;
        let stable = it.selected.iter().zip(&lambdas).all(|(new, old)| ((new - old) / old).abs() < cv.outer_tol);
        lambdas = it.selected.clone();
        iterations.push(it);
        if stable {
            converged = true;
            break;
        }
    }
    let report = em::ecm_fit(data, checked, &lambdas)?;
    Ok((report, CvReport { grid: cv.grid.clone(), iterations, selected: lambdas, converged }))
}

/// Fits a validated configuration, selecting smoothing parameters by CV when
/// the configuration asks for it.
pub fn fit(data: &Dataset, checked: &CheckedConfig, cv: &CvConfig) -> Result<(FitReport, Option<CvReport>)> {
    match &checked.config.lambdas {
        LambdaSetting::Fixed(l) => Ok((em::ecm_fit(data, checked, l)?, None)),
        _ => {
            let (report, cv_report) = select_lambdas(data, checked, cv)?;
            Ok((report, Some(cv_report)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineBasis;
    use rand::{Rng, SeedableRng};

    struct Instance {
        data: Dataset,
        bmat: DMatrix<f64>,
        penalty: DMatrix<f64>,
        weights: FrozenWeights,
    }

    fn instance(n_rep: usize, n: usize, seed: u64) -> Instance {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random_range(0.0..0.5)) / n as f64).collect();
        let y = DMatrix::from_fn(n_rep, n, |_, i| (x[i] * 4.0).sin() + rng.random_range(-0.3..0.3));
        let data = Dataset::new(x.clone(), y, None).unwrap();
        let basis = SplineBasis::new(&x, n.min(8)).unwrap();
        let w = (0..n_rep).map(|_| (0..n).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
        Instance { bmat: basis.basis_matrix(&x).unwrap(), penalty: basis.penalty_matrix(), data, weights: FrozenWeights { w } }
    }

    /// Leave-one-out fit written out from scratch: penalized weighted least
    /// squares over every replicate except `k`, solved by LU.
    fn oracle_refit(t: &Instance, lambda: f64, k: usize) -> DVector<f64> {
        let (n_rep, n) = (t.data.n_replicates(), t.data.n_points());
        let kb = t.bmat.ncols();
        let mut a = DMatrix::zeros(kb, kb);
        let mut b = DVector::zeros(kb);
        for r in (0..n_rep).filter(|&r| r != k) {
            for i in 0..n {
                let w = t.weights.w[r][i];
                for p in 0..kb {
                    b[p] += t.bmat[(i, p)] * w * t.data.y()[(r, i)];
                    for q in 0..kb {
                        a[(p, q)] += t.bmat[(i, p)] * w * t.bmat[(i, q)];
                    }
                }
            }
        }
        for p in 0..kb {
            for q in 0..kb {
                a[(p, q)] += 2.0 * lambda * t.penalty[(p, q)];
            }
        }
        &t.bmat * a.lu().solve(&b).unwrap()
    }

    fn oracle_score(t: &Instance, lambda: f64) -> f64 {
        (0..t.data.n_replicates())
            .map(|k| {
                let f = oracle_refit(t, lambda, k);
                (0..t.data.n_points()).map(|i| t.weights.w[k][i] * (f[i] - t.data.y()[(k, i)]).powi(2)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn shortcut_matches_literal_refits() {
        let t = instance(6, 8, 1);
        for lambda in log_grid(1e-6, 1e2, 10) {
            let fast = cv_score(&t.data, &t.bmat, &t.penalty, &t.weights, lambda).unwrap();
            assert!(fast.fallbacks.is_empty());
            let slow = oracle_score(&t, lambda);
            assert!((fast.score - slow).abs() <= 1e-8 * slow.abs(), "{lambda}: {} vs {slow}", fast.score);
        }
    }

    #[test]
    fn zero_weights_contribute_nothing() {
        let mut t = instance(5, 8, 2);
        for i in 0..8 {
            t.weights.w[2][i] = 0.0;
        }
        t.weights.w[0][3] = 0.0;
        let fast = cv_score(&t.data, &t.bmat, &t.penalty, &t.weights, 0.01).unwrap();
        let slow = oracle_score(&t, 0.01);
        assert!((fast.score - slow).abs() <= 1e-8 * slow.abs());
    }

    /// Weighted least-squares line through `(x, y)`.
    fn affine_fit(x: &[f64], y: &[f64], w: &[f64]) -> Vec<f64> {
        let sw: f64 = w.iter().sum();
        let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - mx) * (y[i] - my)).sum();
        let sxx: f64 = (0..x.len()).map(|i| w[i] * (x[i] - mx).powi(2)).sum();
        let slope = sxy / sxx;
        x.iter().map(|v| my + slope * (v - mx)).collect()
    }

    #[test]
    fn single_replicate_scores_affine_projection() {
        let t = instance(1, 8, 3);
        let y: Vec<f64> = t.data.replicate(0);
        let w = &t.weights.w[0];
        let line = affine_fit(t.data.x(), &y, w);
        let expected: f64 = (0..8).map(|i| w[i] * (y[i] - line[i]).powi(2)).sum();
        let s = cv_score(&t.data, &t.bmat, &t.penalty, &t.weights, 0.5).unwrap();
        assert_eq!(s.fallbacks, vec![0]);
        assert!((s.score - expected).abs() <= 1e-8 * expected);
    }

    #[test]
    fn heavy_penalty_approaches_affine_residual() {
        let mut t = instance(2, 8, 4);
        t.weights.w[0] = vec![0.0; 8];
        // only replicate 1 carries weight; its own score uses the fit from
        // replicate 0, which has none, so the literal path is the affine projection
        let y: Vec<f64> = t.data.replicate(1);
        let w = t.weights.w[1].clone();
        let line = affine_fit(t.data.x(), &y, &w);
        let expected: f64 = (0..8).map(|i| w[i] * (y[i] - line[i]).powi(2)).sum();
        let s = cv_score(&t.data, &t.bmat, &t.penalty, &t.weights, 1e8).unwrap();
        assert!((s.score - expected).abs() <= 1e-6 * expected, "{} vs {expected}", s.score);
    }

    #[test]
    fn leave_one_out_lemmas() {
        let t = instance(6, 8, 5);
        let lambda = 0.03;
        let kb = t.bmat.ncols();
        let a = normal_matrix(&t.bmat, &t.penalty, &t.weights.w, lambda, None);
        let rhs = normal_rhs(&t.data, &t.bmat, &t.weights.w, None);
        let full = &t.bmat * a.clone().cholesky().unwrap().solve(&rhs);
        let m = &t.bmat * a.clone().cholesky().unwrap().solve(&t.bmat.transpose());
        for k in 0..6 {
            let loo = leave_one_out_fit(&t.data, &t.bmat, &t.penalty, &t.weights.w, lambda, k);
            // replacing y_k by its leave-one-out fit reproduces that fit
            let mut y = t.data.y().clone();
            for i in 0..8 {
                y[(k, i)] = loo[i];
            }
            let swapped = Dataset::new(t.data.x().to_vec(), y, None).unwrap();
            let refit = &t.bmat * a.clone().cholesky().unwrap().solve(&normal_rhs(&swapped, &t.bmat, &t.weights.w, None));
            assert!((&refit - &loo).amax() <= 1e-8 * loo.amax());
            // (I - H_k)(f^(-k) - y_k) = f - y_k
            let h = DMatrix::from_fn(8, 8, |p, q| m[(p, q)] * t.weights.w[k][q]);
            let yk = DVector::from_fn(8, |i, _| t.data.y()[(k, i)]);
            let lhs = (DMatrix::identity(8, 8) - h) * (&loo - &yk);
            assert!((lhs - (&full - &yk)).amax() <= 1e-8 * (1.0 + full.amax()));
        }
        assert_eq!(kb, 8);
    }

    #[test]
    fn curve_is_smooth_in_lambda() {
        let t = instance(6, 8, 6);
        let grid = log_grid(1e-4, 1e1, 40);
        let vals: Vec<f64> = grid.iter().map(|&l| cv_score(&t.data, &t.bmat, &t.penalty, &t.weights, l).unwrap().score).collect();
        let span = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        for w in vals.windows(2) {
            assert!((w[1] - w[0]).abs() <= 0.5 * span.max(1e-12));
        }
    }

    #[test]
    fn grid_validation() {
        let mut c = CvConfig::default();
        assert_eq!(c.grid.len(), 25);
        assert!((c.grid[0] - 1e-6).abs() < 1e-20 && (c.grid[24] - 1e2).abs() < 1e-10);
        c.check().unwrap();
        c.grid = vec![1.0, 0.5];
        assert!(c.check().is_err());
        c.grid = vec![0.0];
        assert!(c.check().is_err());
    }
}
