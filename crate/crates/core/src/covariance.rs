//! Residual covariance structures: Gaussian log-densities and conditional
//! M-step updates for every covariance model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{matrix_to_rows, rows_to_matrix, CovParams, Dataset};
use crate::error::{Error, Result};
use crate::latent::{Marginals, StateSpace};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Index of the state whose random intercept is extra in the non-homogeneous
/// model (state 2 in 1-based labels).
const SECOND_STATE: u8 = 1;

/// A covariance model prepared for repeated density evaluation.
#[derive(Debug, Clone)]
pub enum CovStructure {
    Iso { sigma2: f64 },
    StateDiag { sigma2: Vec<f64> },
    Dense { chol: Cholesky<f64, Dyn>, inverse: DMatrix<f64>, logdet: f64 },
    HomogRi { sigma2: f64, d: f64, n: usize },
    /// `woodbury[m]` and `logdet[m]` cache the rank-2 correction for state
    /// vectors with `m` points in the second state.
    NonhomogRi { sigma2: f64, d1: f64, d2: f64, woodbury: Vec<[[f64; 2]; 2]>, logdet: Vec<f64> },
}

/// `(I + D G)^{-1} D` and `log det(I + D G)` with `G = U^T U` for
/// `U = [1, 1_s]`, `m` points in the second state.
fn rank2_terms(n: usize, m: usize, d1: f64, d2: f64) -> ([[f64; 2]; 2], f64) {
    let (nf, mf) = (n as f64, m as f64);
    // I + D G with G = [[n, m], [m, m]]
    let a = 1.0 + d1 * nf;
    let b = d1 * mf;
    let c = d2 * mf;
    let d = 1.0 + d2 * mf;
    let det = a * d - b * c;
    // inverse of [[a, b], [c, d]] times diag(d1, d2)
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let m2 = [[inv[0][0] * d1, inv[0][1] * d2], [inv[1][0] * d1, inv[1][1] * d2]];
    (m2, det.ln())
}

impl CovStructure {
    pub fn new(params: &CovParams, n: usize) -> Result<Self> {
        Ok(match params {
            CovParams::IsoDiag { sigma2 } => CovStructure::Iso { sigma2: *sigma2 },
            CovParams::StateDiag { sigma2 } => CovStructure::StateDiag { sigma2: sigma2.clone() },
            CovParams::Unrestricted { v } => {
                let m = rows_to_matrix(v);
                if m.nrows() != n {
                    return Err(Error::InvalidParams("V must be n x n".into()));
                }
                let chol = m.cholesky().ok_or(Error::NotSpd)?;
                let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let inverse = chol.inverse();
                CovStructure::Dense { chol, inverse, logdet }
            }
            CovParams::HomogRi { sigma2, d } => CovStructure::HomogRi { sigma2: *sigma2, d: *d, n },
            CovParams::NonhomogRi { sigma2, d1, d2 } => {
                let (woodbury, logdet) = (0..=n).map(|m| rank2_terms(n, m, *d1, *d2)).unzip();
                CovStructure::NonhomogRi { sigma2: *sigma2, d1: *d1, d2: *d2, woodbury, logdet }
            }
        })
    }

    /// Whether `V_s` varies with the state vector.
    pub fn state_dependent(&self) -> bool {
        matches!(self, CovStructure::StateDiag { .. } | CovStructure::NonhomogRi { .. })
    }

    /// Per-state variances for the diagonal kinds.
    pub fn diagonal_variances(&self, n_states: usize) -> Option<Vec<f64>> {
        match self {
            CovStructure::Iso { sigma2 } => Some(vec![*sigma2; n_states]),
            CovStructure::StateDiag { sigma2 } => Some(sigma2.clone()),
            _ => None,
        }
    }

    /// `(r^T V_s^{-1} r, log |V_s|)`.
    pub fn quad_logdet(&self, r: &[f64], s: &[u8]) -> (f64, f64) {
        let n = r.len();
        match self {
            CovStructure::Iso { sigma2 } => {
                let ss: f64 = r.iter().map(|v| v * v).sum();
                (ss / sigma2, n as f64 * sigma2.ln())
            }
            CovStructure::StateDiag { sigma2 } => {
                let mut q = 0.0;
                let mut ld = 0.0;
                for (v, &st) in r.iter().zip(s) {
                    let var = sigma2[st as usize];
                    q += v * v / var;
                    ld += var.ln();
                }
                (q, ld)
            }
            CovStructure::Dense { chol, logdet, .. } => {
                let z = chol.l_dirty().solve_lower_triangular(&DVector::from_column_slice(r)).expect("nonsingular factor");
                (z.norm_squared(), *logdet)
            }
            CovStructure::HomogRi { sigma2, d, .. } => {
                let nf = n as f64;
                let ss: f64 = r.iter().map(|v| v * v).sum();
                let total: f64 = r.iter().sum();
                let c = d / (1.0 + nf * d);
                ((ss - c * total * total) / sigma2, nf * sigma2.ln() + (1.0 + nf * d).ln())
            }
            CovStructure::NonhomogRi { sigma2, woodbury, logdet, .. } => {
                let mut ss = 0.0;
                let mut u0 = 0.0;
                let mut u1 = 0.0;
                let mut m = 0;
                for (v, &st) in r.iter().zip(s) {
                    ss += v * v;
                    u0 += v;
                    if st == SECOND_STATE {
                        u1 += v;
                        m += 1;
                    }
                }
                let w = &woodbury[m];
                let corr = u0 * (w[0][0] * u0 + w[0][1] * u1) + u1 * (w[1][0] * u0 + w[1][1] * u1);
                ((ss - corr) / sigma2, n as f64 * sigma2.ln() + logdet[m])
            }
        }
    }

    /// Gaussian log-density of residual `r` under `V_s`.
    pub fn log_density(&self, r: &[f64], s: &[u8]) -> f64 {
        let (q, ld) = self.quad_logdet(r, s);
        -0.5 * (r.len() as f64 * LN_2PI + ld + q)
    }

    /// Dense `V_s` (used by tests and diagnostics).
    pub fn matrix(&self, s: &[u8]) -> DMatrix<f64> {
        let n = s.len();
        match self {
            CovStructure::Iso { sigma2 } => DMatrix::identity(n, n) * *sigma2,
            CovStructure::StateDiag { sigma2 } => {
                DMatrix::from_diagonal(&DVector::from_iterator(n, s.iter().map(|&st| sigma2[st as usize])))
            }
            CovStructure::Dense { chol, .. } => {
                let l = chol.l();
                &l * l.transpose()
            }
            CovStructure::HomogRi { sigma2, d, .. } => {
                DMatrix::from_fn(n, n, |i, j| sigma2 * (if i == j { 1.0 } else { 0.0 } + d))
            }
            CovStructure::NonhomogRi { sigma2, d1, d2, .. } => DMatrix::from_fn(n, n, |i, j| {
                let both = s[i] == SECOND_STATE && s[j] == SECOND_STATE;
                sigma2 * (if i == j { 1.0 } else { 0.0 } + d1 + if both { *d2 } else { 0.0 })
            }),
        }
    }

    /// Dense `V_s^{-1}`.
    pub fn inverse(&self, s: &[u8]) -> DMatrix<f64> {
        let n = s.len();
        match self {
            CovStructure::Iso { sigma2 } => DMatrix::identity(n, n) / *sigma2,
            CovStructure::StateDiag { sigma2 } => {
                DMatrix::from_diagonal(&DVector::from_iterator(n, s.iter().map(|&st| 1.0 / sigma2[st as usize])))
            }
            CovStructure::Dense { inverse, .. } => inverse.clone(),
            CovStructure::HomogRi { sigma2, d, .. } => {
                let c = d / (1.0 + n as f64 * d);
                DMatrix::from_fn(n, n, |i, j| (if i == j { 1.0 } else { 0.0 } - c) / sigma2)
            }
            CovStructure::NonhomogRi { sigma2, woodbury, .. } => {
                let m = s.iter().filter(|&&st| st == SECOND_STATE).count();
                let w = &woodbury[m];
                DMatrix::from_fn(n, n, |i, j| {
                    let ui = [1.0, if s[i] == SECOND_STATE { 1.0 } else { 0.0 }];
                    let uj = [1.0, if s[j] == SECOND_STATE { 1.0 } else { 0.0 }];
                    let mut corr = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            corr += ui[a] * w[a][b] * uj[b];
                        }
                    }
                    (if i == j { 1.0 } else { 0.0 } - corr) / sigma2
                })
            }
        }
    }
}

/// Residual `y_k - f_s(x)` into `out`.
fn residual(y: &[f64], fitted: &[Vec<f64>], s: &[u8], out: &mut [f64]) {
    for i in 0..y.len() {
        out[i] = y[i] - fitted[s[i] as usize][i];
    }
}

/// Expected Gaussian term `-1/2 sum_k sum_s p_k(s) [r^T V_s^{-1} r + log|V_s|]`
/// (constant `2 pi` part omitted).
pub fn expected_gaussian_term(data: &Dataset, space: &StateSpace, joint: &[Vec<f64>], fitted: &[Vec<f64>], cov: &CovStructure) -> f64 {
    let n = data.n_points();
    let mut r = vec![0.0; n];
    let mut total = 0.0;
    for (k, probs) in joint.iter().enumerate() {
        let y = data.replicate(k);
        for (idx, s) in space.iter().enumerate() {
            let p = probs[idx];
            if p == 0.0 {
                continue;
            }
            residual(&y, fitted, s, &mut r);
            let (q, ld) = cov.quad_logdet(&r, s);
            total += p * (q + ld);
        }
    }
    -0.5 * total
}

/// Same expectation for diagonal kinds, written with marginal posteriors.
pub fn expected_gaussian_term_diagonal(data: &Dataset, marg: &Marginals, fitted: &[Vec<f64>], sigma2: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..data.n_replicates() {
        for i in 0..data.n_points() {
            let y = data.y()[(k, i)];
            for (j, f) in fitted.iter().enumerate() {
                let p = marg.get(k, i, j);
                if p != 0.0 {
                    total += p * ((y - f[i]).powi(2) / sigma2[j] + sigma2[j].ln());
                }
            }
        }
    }
    -0.5 * total
}

/// Covariance M-step result with any diagnostic events.
#[derive(Debug, Clone, PartialEq)]
pub struct CovUpdate {
    pub params: CovParams,
    pub events: Vec<String>,
}

/// Posterior-weighted residual outer-product mean.
pub fn update_unrestricted(data: &Dataset, space: &StateSpace, joint: &[Vec<f64>], fitted: &[Vec<f64>]) -> Result<CovUpdate> {
    let n = data.n_points();
    let n_rep = data.n_replicates();
    let mut v = DMatrix::zeros(n, n);
    let mut r = vec![0.0; n];
    for (k, probs) in joint.iter().enumerate() {
        let y = data.replicate(k);
        for (idx, s) in space.iter().enumerate() {
            let p = probs[idx];
            if p == 0.0 {
                continue;
            }
            residual(&y, fitted, s, &mut r);
            for a in 0..n {
                let pa = p * r[a];
                for b in 0..=a {
                    v[(a, b)] += pa * r[b];
                }
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            v[(b, a)] = v[(a, b)];
        }
    }
    v /= n_rep as f64;
    let mut events = Vec::new();
    if v.clone().cholesky().is_none() {
        let ridge = 1e-10 * v.trace() / n as f64;
        for a in 0..n {
            v[(a, a)] += ridge;
        }
        events.push(format!("unrestricted V singular; ridge {ridge:.3e} added"));
        if v.clone().cholesky().is_none() {
            return Err(Error::NotSpd);
        }
    }
    Ok(CovUpdate { params: CovParams::Unrestricted { v: matrix_to_rows(&v) }, events })
}

/// Posterior sums of `r^T r` and `(1^T r)^2` over replicates and state vectors.
fn random_intercept_sums(data: &Dataset, space: &StateSpace, joint: &[Vec<f64>], fitted: &[Vec<f64>]) -> (f64, f64) {
    let n = data.n_points();
    let mut r = vec![0.0; n];
    let (mut ss, mut tt) = (0.0, 0.0);
    for (k, probs) in joint.iter().enumerate() {
        let y = data.replicate(k);
        for (idx, s) in space.iter().enumerate() {
            let p = probs[idx];
            if p == 0.0 {
                continue;
            }
            residual(&y, fitted, s, &mut r);
            let total: f64 = r.iter().sum();
            ss += p * r.iter().map(|v| v * v).sum::<f64>();
            tt += p * total * total;
        }
    }
    (ss, tt)
}

/// Smallest admissible variance estimate: `1e-12` times the mean squared
/// deviation of the responses from their pointwise means. Estimates at or
/// below it signal a collapsing (unbounded) likelihood.
pub fn variance_floor(data: &Dataset) -> f64 {
    let y = data.y();
    let means = y.row_mean();
    let spread = y.row_iter().map(|r| (r - &means).norm_squared()).sum::<f64>() / y.len() as f64;
    let scale = if spread > 0.0 { spread } else { y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64 };
    1e-12 * scale
}

/// Homogeneous random-intercept update.
///
/// When the moment formula for `d` goes negative, the constrained maximum on
/// the boundary `d = 0` is used, which is `sigma^2 = sum p r^T r / (N n)`.
pub fn update_homog_ri(data: &Dataset, space: &StateSpace, joint: &[Vec<f64>], fitted: &[Vec<f64>]) -> Result<CovUpdate> {
    let (ss, tt) = random_intercept_sums(data, space, joint, fitted);
    let nf = data.n_points() as f64;
    let nrep = data.n_replicates() as f64;
    let sigma2 = (ss - tt / nf) / (nrep * (nf - 1.0));
    if !(sigma2 > variance_floor(data)) {
        return Err(Error::NonPositiveSigma(sigma2));
    }
    let d = tt / (sigma2 * nrep * nf * nf) - 1.0 / nf;
    let mut events = Vec::new();
    if d < 0.0 {
        let sigma2 = ss / (nrep * nf);
        events.push(format!("random-intercept ratio estimate {d:.3e} negative; clamped to 0"));
        return Ok(CovUpdate { params: CovParams::HomogRi { sigma2, d: 0.0 }, events });
    }
    Ok(CovUpdate { params: CovParams::HomogRi { sigma2, d }, events })
}

/// Sufficient statistics for the non-homogeneous random-intercept objective,
/// grouped by the number `m` of points in the second state: posterior weight,
/// `sum p r^T r` and `sum p u u^T` with `u = (1^T r, 1_s^T r)`.
#[derive(Debug, Clone)]
struct RankTwoStats {
    n: usize,
    weight: Vec<f64>,
    ss: Vec<f64>,
    uu: Vec<[[f64; 2]; 2]>,
}

impl RankTwoStats {
    fn collect(data: &Dataset, space: &StateSpace, joint: &[Vec<f64>], fitted: &[Vec<f64>]) -> Self {
        let n = data.n_points();
        let mut st = RankTwoStats { n, weight: vec![0.0; n + 1], ss: vec![0.0; n + 1], uu: vec![[[0.0; 2]; 2]; n + 1] };
        let mut r = vec![0.0; n];
        for (k, probs) in joint.iter().enumerate() {
            let y = data.replicate(k);
            for (idx, s) in space.iter().enumerate() {
                let p = probs[idx];
                if p == 0.0 {
                    continue;
                }
                residual(&y, fitted, s, &mut r);
                let (mut ss, mut u0, mut u1, mut m) = (0.0, 0.0, 0.0, 0);
                for (v, &state) in r.iter().zip(s) {
                    ss += v * v;
                    u0 += v;
                    if state == SECOND_STATE {
                        u1 += v;
                        m += 1;
                    }
                }
                st.weight[m] += p;
                st.ss[m] += p * ss;
                st.uu[m][0][0] += p * u0 * u0;
                st.uu[m][0][1] += p * u0 * u1;
                st.uu[m][1][1] += p * u1 * u1;
            }
        }
        for u in st.uu.iter_mut() {
            u[1][0] = u[0][1];
        }
        st
    }

    /// `-1/2 sum p [r^T V_s^{-1} r + log |V_s|]`.
    fn objective(&self, sigma2: f64, d1: f64, d2: f64) -> f64 {
        let nf = self.n as f64;
        let mut total = 0.0;
        for m in 0..=self.n {
            if self.weight[m] == 0.0 {
                continue;
            }
            let (w, logdet) = rank2_terms(self.n, m, d1, d2);
            let q = &self.uu[m];
            let mut corr = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    corr += w[a][b] * q[b][a];
                }
            }
            total += (self.ss[m] - corr) / sigma2 + self.weight[m] * (nf * sigma2.ln() + logdet);
        }
        -0.5 * total
    }
}

const RATIO_FLOOR: f64 = 1e-12;

/// Non-homogeneous random-intercept update by Nelder–Mead conditional
/// maximization over `(log sigma^2, log d1, log d2)` started at `previous`.
pub fn update_nonhomog_ri(
    data: &Dataset,
    space: &StateSpace,
    joint: &[Vec<f64>],
    fitted: &[Vec<f64>],
    previous: (f64, f64, f64),
) -> Result<CovUpdate> {
    let stats = RankTwoStats::collect(data, space, joint, fitted);
    let floor = RATIO_FLOOR.ln();
    let decode = |t: &[f64]| (t[0].exp(), t[1].max(floor).exp(), t[2].max(floor).exp());
    let objective = |t: &[f64]| {
        let (s2, d1, d2) = decode(t);
        let v = stats.objective(s2, d1, d2);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let (s0, d10, d20) = previous;
    if !(s0 > 0.0) {
        return Err(Error::NonPositiveSigma(s0));
    }
    let start = [s0.ln(), d10.max(RATIO_FLOOR).ln(), d20.max(RATIO_FLOOR).ln()];
    let result = nelder_mead(&objective, &start, 0.5, 400, 1e-10);
    let mut events = Vec::new();
    if !result.converged {
        events.push(format!("Nelder-Mead stalled after {} evaluations", result.evaluations));
    }
    // keep the previous point unless strictly improved (conditional ascent)
    let start_value = objective(&start);
    let best = if result.value <= start_value { result.point } else { start.to_vec() };
    let (sigma2, d1, d2) = decode(&best);
    if !(sigma2 > variance_floor(data)) {
        return Err(Error::NonPositiveSigma(sigma2));
    }
    let clip = |d: f64| if d <= RATIO_FLOOR { 0.0 } else { d };
    let candidate = (sigma2, clip(d1), clip(d2));
    // clipping to exact zero must not lose ascent
    let (d1, d2) = if -stats.objective(candidate.0, candidate.1, candidate.2) <= result.value.min(start_value) {
        (candidate.1, candidate.2)
    } else {
        (d1, d2)
    };
    Ok(CovUpdate { params: CovParams::NonhomogRi { sigma2, d1, d2 }, events })
}

pub(crate) struct NelderMeadResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` with reflection 1, expansion 2, contraction 0.5 and shrink 0.5.
/// Converges when the spread of simplex values drops below
/// `tol * (1 + |best|)`.
pub(crate) fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64], step: f64, max_evals: usize, tol: f64) -> NelderMeadResult {
    let dim = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for d in 0..dim {
        let mut p = start.to_vec();
        p[d] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = dim + 1;
    let mut converged = false;

    loop {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let (best, worst) = (values[0], values[dim]);
        if (worst - best).abs() <= tol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        if evals >= max_evals {
            break;
        }
        let centroid: Vec<f64> = (0..dim).map(|c| simplex[..dim].iter().map(|p| p[c]).sum::<f64>() / dim as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..dim).map(|c| centroid[c] + t * (simplex[dim][c] - centroid[c])).collect() };

        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[dim] {
            let c = along(-0.5);
            let v = f(&c);
            (c, v)
        } else {
            let c = along(0.5);
            let v = f(&c);
            (c, v)
        };
        evals += 1;
        if fc < values[dim].min(fr) {
            simplex[dim] = contracted;
            values[dim] = fc;
            continue;
        }
        for i in 1..=dim {
            for c in 0..dim {
                simplex[i][c] = simplex[0][c] + 0.5 * (simplex[i][c] - simplex[0][c]);
            }
            values[i] = f(&simplex[i]);
        }
        evals += dim;
    }
    let best = (0..=dim).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    NelderMeadResult { point: simplex[best].clone(), value: values[best], evaluations: evals, converged }
}

/// Per-state variance update from marginal posteriors. A state with no
/// posterior mass keeps its previous variance.
pub fn update_state_diag(data: &Dataset, marg: &Marginals, fitted: &[Vec<f64>], previous: &[f64]) -> Result<CovUpdate> {
    let j = fitted.len();
    let mut num = vec![0.0; j];
    let mut den = vec![0.0; j];
    for k in 0..data.n_replicates() {
        for i in 0..data.n_points() {
            let y = data.y()[(k, i)];
            for st in 0..j {
                let p = marg.get(k, i, st);
                num[st] += p * (y - fitted[st][i]).powi(2);
                den[st] += p;
            }
        }
    }
    let mut events = Vec::new();
    let mut sigma2 = Vec::with_capacity(j);
    let floor = variance_floor(data);
    for st in 0..j {
        if den[st] < 1e-12 {
            events.push(format!("state {} has no posterior mass; variance kept", st + 1));
            sigma2.push(previous[st]);
            continue;
        }
        let v = num[st] / den[st];
        if !(v > floor) {
            return Err(Error::NonPositiveSigma(v));
        }
        sigma2.push(v);
    }
    Ok(CovUpdate { params: CovParams::StateDiag { sigma2 }, events })
}

/// Pooled variance update for `V = sigma^2 I`.
pub fn update_iso(data: &Dataset, marg: &Marginals, fitted: &[Vec<f64>]) -> Result<CovUpdate> {
    let mut num = 0.0;
    for k in 0..data.n_replicates() {
        for i in 0..data.n_points() {
            let y = data.y()[(k, i)];
            for (st, f) in fitted.iter().enumerate() {
                num += marg.get(k, i, st) * (y - f[i]).powi(2);
            }
        }
    }
    let sigma2 = num / (data.n_replicates() * data.n_points()) as f64;
    if !(sigma2 > variance_floor(data)) {
        return Err(Error::NonPositiveSigma(sigma2));
    }
    Ok(CovUpdate { params: CovParams::IsoDiag { sigma2 }, events: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn dense_log_density(v: &DMatrix<f64>, r: &[f64]) -> f64 {
        let n = r.len();
        let rv = DVector::from_column_slice(r);
        let inv = v.clone().try_inverse().unwrap();
        let quad = (rv.transpose() * inv * &rv)[(0, 0)];
        let det = v.clone().determinant();
        -0.5 * (n as f64 * LN_2PI + det.ln() + quad)
    }

    #[test]
    fn collapsing_state_variance_is_an_error() {
        // state 2 reproduces its single curve exactly
        let x: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let y = DMatrix::from_row_slice(2, 5, &[0.0, 0.3, -0.2, 0.1, 0.05, 5.0, 5.0, 5.0, 5.0, 5.0]);
        let data = Dataset::new(x, y, None).unwrap();
        let marg = Marginals::from_states(&[vec![0; 5], vec![1; 5]], 2);
        let fitted = vec![vec![0.0; 5], vec![5.0 + 1e-9; 5]];
        assert!(matches!(update_state_diag(&data, &marg, &fitted, &[1.0, 1.0]), Err(Error::NonPositiveSigma(_))));
        let fitted = vec![vec![0.0; 5], vec![5.01; 5]];
        assert!(update_state_diag(&data, &marg, &fitted, &[1.0, 1.0]).is_ok());
    }

    #[test]
    fn scalar_standard_normal() {
        let c = CovStructure::new(&CovParams::IsoDiag { sigma2: 1.0 }, 1).unwrap();
        assert!((c.log_density(&[0.0], &[0]) + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn sherman_morrison_matches_dense() {
        let c = CovStructure::new(&CovParams::HomogRi { sigma2: 2.0, d: 0.5 }, 8).unwrap();
        let r = [0.3, -1.2, 0.5, 2.2, -0.7, 0.1, 0.9, -0.4];
        let s = [0u8; 8];
        let dense = dense_log_density(&c.matrix(&s), &r);
        assert!((c.log_density(&r, &s) - dense).abs() < 1e-10);
        let prod = c.matrix(&s) * c.inverse(&s);
        assert!((prod - DMatrix::identity(8, 8)).amax() < 1e-12);
    }

    #[test]
    fn woodbury_matches_dense() {
        let c = CovStructure::new(&CovParams::NonhomogRi { sigma2: 0.7, d1: 0.3, d2: 1.9 }, 6).unwrap();
        let r = [0.3, -1.2, 0.5, 2.2, -0.7, 0.1];
        for s in [[0u8, 1, 1, 0, 1, 0], [0; 6], [1; 6]] {
            let dense = dense_log_density(&c.matrix(&s), &r);
            let fast = c.log_density(&r, &s);
            assert!((fast - dense).abs() <= 1e-9 * dense.abs());
            let prod = c.matrix(&s) * c.inverse(&s);
            assert!((prod - DMatrix::identity(6, 6)).amax() < 1e-12);
        }
    }

    #[test]
    fn nonhomogeneous_reduces_to_homogeneous() {
        let a = CovStructure::new(&CovParams::NonhomogRi { sigma2: 1.3, d1: 0.4, d2: 0.0 }, 5).unwrap();
        let b = CovStructure::new(&CovParams::HomogRi { sigma2: 1.3, d: 0.4 }, 5).unwrap();
        let r = [0.2, 0.1, -0.3, 0.8, 0.05];
        let s = [1u8, 0, 1, 1, 0];
        assert!((a.log_density(&r, &s) - b.log_density(&r, &s)).abs() < 1e-14);
    }

    #[test]
    fn unrestricted_matches_dense() {
        let v = vec![vec![2.0, 0.3, 0.1], vec![0.3, 1.0, -0.2], vec![0.1, -0.2, 0.5]];
        let c = CovStructure::new(&CovParams::Unrestricted { v: v.clone() }, 3).unwrap();
        let r = [0.4, -0.1, 0.3];
        let dense = dense_log_density(&rows_to_matrix(&v), &r);
        assert!((c.log_density(&r, &[0, 0, 0]) - dense).abs() < 1e-12);
        let bad = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(CovStructure::new(&CovParams::Unrestricted { v: bad }, 2), Err(Error::NotSpd)));
    }

    fn random_instance(n_rep: usize, n: usize, seed: u64) -> (Dataset, StateSpace, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y = DMatrix::from_fn(n_rep, n, |_, _| rng.random_range(-1.0..1.0));
        let data = Dataset::new(x, y, None).unwrap();
        let space = StateSpace::new(2, n, 1 << 20).unwrap();
        let joint: Vec<Vec<f64>> = (0..n_rep)
            .map(|_| {
                let raw: Vec<f64> = (0..space.len()).map(|_| rng.random_range(0.0..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let fitted = vec![(0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()];
        (data, space, joint, fitted)
    }

    #[test]
    fn unrestricted_matches_naive_double_sum() {
        let (data, space, joint, fitted) = random_instance(3, 4, 1);
        let up = update_unrestricted(&data, &space, &joint, &fitted).unwrap();
        let v = match up.params {
            CovParams::Unrestricted { v } => rows_to_matrix(&v),
            _ => unreachable!(),
        };
        let mut oracle = DMatrix::zeros(4, 4);
        for k in 0..3 {
            for (idx, s) in space.iter().enumerate() {
                let r = DVector::from_fn(4, |i, _| data.y()[(k, i)] - fitted[s[i] as usize][i]);
                oracle += &r * r.transpose() * joint[k][idx];
            }
        }
        oracle /= 3.0;
        assert!((v - oracle).amax() < 1e-12);
    }

    #[test]
    fn unrestricted_single_state_vector_is_rank_one() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let data = Dataset::new(x, y, None).unwrap();
        let space = StateSpace::new(1, 4, 16).unwrap();
        let fitted = vec![vec![0.0; 4]];
        let up = update_unrestricted(&data, &space, &[vec![1.0]], &fitted).unwrap();
        // a rank-one outer product is singular, so a ridge is added and logged
        assert_eq!(up.events.len(), 1);
        let v = match up.params {
            CovParams::Unrestricted { v } => rows_to_matrix(&v),
            _ => unreachable!(),
        };
        let r = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        let outer = &r * r.transpose();
        assert!((v - outer).amax() < 1e-8);
    }

    #[test]
    fn homogeneous_matches_literal_formulas() {
        let (data, space, joint, fitted) = random_instance(3, 4, 2);
        let up = update_homog_ri(&data, &space, &joint, &fitted).unwrap();
        let (n, nrep) = (4.0, 3.0);
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..3 {
            for (idx, s) in space.iter().enumerate() {
                let r: Vec<f64> = (0..4).map(|i| data.y()[(k, i)] - fitted[s[i] as usize][i]).collect();
                a += joint[k][idx] * r.iter().map(|v| v * v).sum::<f64>();
                b += joint[k][idx] * r.iter().sum::<f64>().powi(2);
            }
        }
        let sigma2 = (a - b / n) / (nrep * (n - 1.0));
        let d = b / (sigma2 * nrep * n * n) - 1.0 / n;
        match up.params {
            CovParams::HomogRi { sigma2: s, d: dd } => {
                if d >= 0.0 {
                    assert!((s - sigma2).abs() < 1e-12 && (dd - d).abs() < 1e-12);
                } else {
                    assert_eq!(dd, 0.0);
                    assert!((s - a / (nrep * n)).abs() < 1e-12);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_residuals_are_rejected() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = DMatrix::zeros(2, 4);
        let data = Dataset::new(x, y, None).unwrap();
        let space = StateSpace::new(1, 4, 16).unwrap();
        let fitted = vec![vec![0.0; 4]];
        let joint = vec![vec![1.0]; 2];
        assert!(matches!(update_homog_ri(&data, &space, &joint, &fitted), Err(Error::NonPositiveSigma(_))));
    }

    /// Delta posteriors on a single state; residuals follow the random
    /// intercept model exactly.
    fn delta_ri_data(n_rep: usize, n: usize, sigma2: f64, tau2: f64, tau2_extra: f64, states: &dyn Fn(usize) -> Vec<u8>, seed: u64) -> (Dataset, Vec<Vec<u8>>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut y = DMatrix::zeros(n_rep, n);
        let mut all = Vec::new();
        for k in 0..n_rep {
            let s = states(k);
            let delta: f64 = rng.sample::<f64, _>(StandardNormal) * tau2.sqrt();
            let extra: f64 = rng.sample::<f64, _>(StandardNormal) * tau2_extra.sqrt();
            for i in 0..n {
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * sigma2.sqrt();
                y[(k, i)] = delta + if s[i] == 1 { extra } else { 0.0 } + e;
            }
            all.push(s);
        }
        (Dataset::new(x, y, None).unwrap(), all)
    }

    fn delta_joint(space: &StateSpace, states: &[Vec<u8>]) -> Vec<Vec<f64>> {
        states
            .iter()
            .map(|s| {
                let idx = space.iter().position(|t| t == s.as_slice()).unwrap();
                let mut p = vec![0.0; space.len()];
                p[idx] = 1.0;
                p
            })
            .collect()
    }

    #[test]
    fn homogeneous_moment_consistency() {
        let (n_rep, n) = (2000, 10);
        let (sigma2, tau2) = (1e-5, 1e-4);
        let (data, states) = delta_ri_data(n_rep, n, sigma2, tau2, 0.0, &|_| vec![0; 10], 7);
        let space = StateSpace::new(1, n, 1 << 20).unwrap();
        let joint = delta_joint(&space, &states);
        let fitted = vec![vec![0.0; n]];
        let up = update_homog_ri(&data, &space, &joint, &fitted).unwrap();
        let (s, d) = match up.params {
            CovParams::HomogRi { sigma2, d } => (sigma2, d),
            _ => unreachable!(),
        };
        // Monte-Carlo standard errors of the moment estimators
        let se_sigma = sigma2 * (2.0 / (n_rep as f64 * (n as f64 - 1.0))).sqrt();
        let se_tau = (tau2 + sigma2 / n as f64) * (2.0 / n_rep as f64).sqrt();
        assert!((s - sigma2).abs() < 3.0 * se_sigma, "{s}");
        assert!((d * s - tau2).abs() < 3.0 * se_tau, "{}", d * s);
    }

    #[test]
    fn nonhomogeneous_ascends_and_recovers() {
        let (n_rep, n) = (1500, 6);
        let (sigma2, tau1, tau2) = (0.5, 0.8, 2.0);
        let pattern = |k: usize| -> Vec<u8> { (0..6).map(|i| ((k + i) % 3 == 0) as u8).collect() };
        let (data, states) = delta_ri_data(n_rep, n, sigma2, tau1, tau2, &pattern, 9);
        let space = StateSpace::new(2, n, 1 << 20).unwrap();
        let joint = delta_joint(&space, &states);
        let fitted = vec![vec![0.0; n]; 2];
        let prev = (1.0, 0.2, 0.2);
        let up = update_nonhomog_ri(&data, &space, &joint, &fitted, prev).unwrap();
        let stats = RankTwoStats::collect(&data, &space, &joint, &fitted);
        let (s, d1, d2) = match up.params {
            CovParams::NonhomogRi { sigma2, d1, d2 } => (sigma2, d1, d2),
            _ => unreachable!(),
        };
        assert!(stats.objective(s, d1, d2) >= stats.objective(prev.0, prev.1, prev.2));
        // generic objective agrees with the grouped statistics
        let cov = CovStructure::new(&up.params, n).unwrap();
        let direct = expected_gaussian_term(&data, &space, &joint, &fitted, &cov);
        assert!((direct - stats.objective(s, d1, d2)).abs() < 1e-9 * direct.abs());
        // within 3 Monte-Carlo SEs; tau SEs from chi-square variance of replicate means
        let se_sigma = sigma2 * (2.0 / (n_rep as f64 * (n as f64 - 1.0))).sqrt();
        assert!((s - sigma2).abs() < 3.0 * se_sigma, "sigma2 {s}");
        assert!((d1 * s - tau1).abs() < 3.0 * tau1 * (2.0 / n_rep as f64).sqrt() * 1.5, "tau1 {}", d1 * s);
        assert!((d2 * s - tau2).abs() < 3.0 * (tau1 + tau2) * (2.0 / n_rep as f64).sqrt() * 1.5, "tau2 {}", d2 * s);
    }

    #[test]
    fn nonhomogeneous_boundary_case() {
        let (n_rep, n) = (3000, 6);
        let pattern = |k: usize| -> Vec<u8> { (0..6).map(|i| ((k * 7 + i) % 2 == 0) as u8).collect() };
        let (data, states) = delta_ri_data(n_rep, n, 0.5, 0.8, 0.0, &pattern, 10);
        let space = StateSpace::new(2, n, 1 << 20).unwrap();
        let joint = delta_joint(&space, &states);
        let fitted = vec![vec![0.0; n]; 2];
        let mut params = (1.0, 0.5, 0.1);
        // successive conditional maximizations, as inside the ECM loop
        for _ in 0..5 {
            let up = update_nonhomog_ri(&data, &space, &joint, &fitted, params).unwrap();
            params = match up.params {
                CovParams::NonhomogRi { sigma2, d1, d2 } => (sigma2, d1, d2),
                _ => unreachable!(),
            };
        }
        assert!(params.2 <= 1e-6, "d2 = {}", params.2);
    }

    #[test]
    fn diagonal_updates() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 1.0, 3.0, 1.0, 2.0, 0.5]);
        let data = Dataset::new(x, y, None).unwrap();
        let states = vec![vec![0u8, 0, 1, 1], vec![1u8, 0, 1, 0]];
        let marg = Marginals::from_states(&states, 2);
        let fitted = vec![vec![0.5; 4], vec![1.0; 4]];
        let up = update_state_diag(&data, &marg, &fitted, &[1.0, 1.0]).unwrap();
        let mut res = [vec![], vec![]];
        for k in 0..2 {
            for i in 0..4 {
                let st = states[k][i] as usize;
                res[st].push((data.y()[(k, i)] - fitted[st][i]).powi(2));
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        assert_eq!(up.params, CovParams::StateDiag { sigma2: vec![mean(&res[0]), mean(&res[1])] });

        let mut uniform = Marginals::zeros(2, 4, 2);
        for k in 0..2 {
            for i in 0..4 {
                uniform.set(k, i, 0, 0.5);
                uniform.set(k, i, 1, 0.5);
            }
        }
        let same = vec![vec![0.7; 4]; 2];
        let sd = update_state_diag(&data, &uniform, &same, &[1.0, 1.0]).unwrap();
        let iso = update_iso(&data, &uniform, &same).unwrap();
        let pooled = match iso.params {
            CovParams::IsoDiag { sigma2 } => sigma2,
            _ => unreachable!(),
        };
        match sd.params {
            CovParams::StateDiag { sigma2 } => {
                assert!((sigma2[0] - pooled).abs() < 1e-15 && (sigma2[1] - pooled).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_state_keeps_previous_variance() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 0.0, 1.0]);
        let data = Dataset::new(x, y, None).unwrap();
        let marg = Marginals::from_states(&[vec![0u8; 4]], 2);
        let up = update_state_diag(&data, &marg, &[vec![0.0; 4], vec![0.0; 4]], &[1.0, 0.3]).unwrap();
        match up.params {
            CovParams::StateDiag { sigma2 } => assert_eq!(sigma2[1], 0.3),
            _ => unreachable!(),
        }
        assert_eq!(up.events.len(), 1);
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let f = |p: &[f64]| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 2.0).powi(2);
        let r = nelder_mead(&f, &[0.0, 0.0], 0.5, 2000, 1e-14);
        assert!(r.converged);
        assert!((r.point[0] - 1.0).abs() < 1e-5 && (r.point[1] + 2.0).abs() < 1e-5);
    }
}
