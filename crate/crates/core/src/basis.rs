//! Clamped cubic B-spline bases and the integrated squared second-derivative
//! penalty.
//!
//! Interior knots sit at quantiles of the evaluation grid, so an equally spaced
//! grid yields equally spaced knots. Evaluation follows the Cox–de Boor
//! triangular scheme restricted to the four functions that are nonzero on a
//! knot span.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

/// Default number of basis functions for a grid of `n` points.
pub fn default_k(n: usize) -> usize {
    n.min(15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
    n_basis: usize,
}

impl SplineBasis {
    /// Builds a clamped cubic basis with `k` functions over `[x_1, x_n]`.
    pub fn new(x: &[f64], k: usize) -> Result<Self> {
        let n = x.len();
        if n < 4 {
            return Err(Error::GridTooSmall(n));
        }
        if let Some(i) = (1..n).find(|&i| !(x[i] > x[i - 1])) {
            return Err(Error::NonIncreasingGrid(i));
        }
        if k < ORDER || k > n + 2 {
            return Err(Error::BadK { k, max: n + 2 });
        }
        let lo = x[0];
        let hi = x[n - 1];
        let n_interior = k - ORDER;
        let mut interior: Vec<f64> = (1..=n_interior)
            .map(|m| quantile(x, m as f64 / (n_interior + 1) as f64))
            .collect();
        separate_ties(&mut interior, x, lo, hi);

        let mut knots = Vec::with_capacity(k + ORDER);
        knots.extend(std::iter::repeat_n(lo, ORDER));
        knots.extend(interior);
        knots.extend(std::iter::repeat_n(hi, ORDER));
        Ok(SplineBasis { knots, n_basis: k })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Index `mu` of the knot span `[t_mu, t_{mu+1})` containing `x`; the right
    /// boundary belongs to the last nonempty span.
    fn span(&self, x: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(Error::OutOfDomain(x, lo, hi));
        }
        let last = self.n_basis - 1;
        if x >= self.knots[last + 1] {
            return Ok(last);
        }
        // knots[DEGREE..=last+1] is sorted; find the last knot <= x
        let t = &self.knots[DEGREE..=last + 1];
        let pos = t.partition_point(|&v| v <= x);
        Ok(DEGREE + pos - 1)
    }

    /// Values and derivatives up to order `nd` of the four basis functions
    /// supported on `span`. Row `r` holds the `r`-th derivative.
    fn local_derivatives(&self, span: usize, x: f64, nd: usize) -> Vec<[f64; ORDER]> {
        let t = &self.knots;
        let mut ndu = [[0.0f64; ORDER]; ORDER];
        let mut left = [0.0f64; ORDER];
        let mut right = [0.0f64; ORDER];
        ndu[0][0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                // lower triangle stores knot differences
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![[0.0f64; ORDER]; nd + 1];
        for (j, d) in ders[0].iter_mut().enumerate() {
            *d = ndu[j][DEGREE];
        }
        let mut a = [[0.0f64; ORDER]; 2];
        for r in 0..=DEGREE {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0] = [0.0; ORDER];
            a[0][0] = 1.0;
            for k in 1..=nd.min(DEGREE) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = DEGREE - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { DEGREE - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = DEGREE as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (DEGREE - k) as f64;
        }
        ders
    }

    /// All `K` basis function values at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        self.eval_derivative(x, 0)
    }

    /// All `K` values of the `order`-th derivative (0, 1 or 2) at `x`.
    pub fn eval_derivative(&self, x: f64, order: usize) -> Result<Vec<f64>> {
        let span = self.span(x)?;
        let local = self.local_derivatives(span, x, order);
        let mut out = vec![0.0; self.n_basis];
        for (j, v) in local[order].iter().enumerate() {
            out[span - DEGREE + j] = *v;
        }
        Ok(out)
    }

    /// The `n x K` matrix with entries `b_nu(x_i)`.
    pub fn basis_matrix(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        self.derivative_matrix(xs, 0)
    }

    pub fn derivative_matrix(&self, xs: &[f64], order: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(xs.len(), self.n_basis);
        for (i, &x) in xs.iter().enumerate() {
            let span = self.span(x)?;
            let local = self.local_derivatives(span, x, order);
            for j in 0..ORDER {
                m[(i, span - DEGREE + j)] = local[order][j];
            }
        }
        Ok(m)
    }

    /// `R[nu, nu'] = ∫ b_nu''(x) b_nu'''(x) dx` over the domain.
    ///
    /// Second derivatives of cubic pieces are linear, so two-point
    /// Gauss–Legendre on every knot span integrates the products exactly.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let k = self.n_basis;
        let mut r = DMatrix::zeros(k, k);
        let g = 1.0 / 3f64.sqrt();
        for span in DEGREE..k {
            let a = self.knots[span];
            let b = self.knots[span + 1];
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for node in [mid - half * g, mid + half * g] {
                let d2 = self.local_derivatives(span, node, 2)[2];
                for p in 0..ORDER {
                    for q in 0..ORDER {
                        r[(span - DEGREE + p, span - DEGREE + q)] += half * d2[p] * d2[q];
                    }
                }
            }
        }
        // exact symmetry
        for p in 0..k {
            for q in 0..p {
                let v = 0.5 * (r[(p, q)] + r[(q, p)]);
                r[(p, q)] = v;
                r[(q, p)] = v;
            }
        }
        r
    }

    /// Coefficients reproducing the affine function `a + b x`.
    ///
    /// Uses Greville abscissae: a clamped cubic basis reproduces linear
    /// functions exactly when the coefficients are the function evaluated at
    /// the knot averages.
    pub fn affine_coefficients(&self, a: f64, b: f64) -> Vec<f64> {
        (0..self.n_basis)
            .map(|nu| {
                let g = (self.knots[nu + 1] + self.knots[nu + 2] + self.knots[nu + 3]) / 3.0;
                a + b * g
            })
            .collect()
    }
}

/// Linear-interpolation sample quantile of a sorted vector.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Moves coincident interior knots to midpoints between neighbouring distinct
/// grid values so every interior knot is simple.
fn separate_ties(knots: &mut [f64], x: &[f64], lo: f64, hi: f64) {
    for m in 0..knots.len() {
        let prev = if m == 0 { lo } else { knots[m - 1] };
        if knots[m] <= prev {
            let above = x.iter().copied().find(|&v| v > prev).unwrap_or(hi);
            knots[m] = 0.5 * (prev + above);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    // Textbook recursion, kept separate from the triangular scheme above.
    fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64, last: bool) -> f64 {
        if p == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            let right_end = last && x == t[i + 1] && t[i] < t[i + 1];
            return if inside || right_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(t, i, p - 1, x, last);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(t, i + 1, p - 1, x, last);
        }
        v
    }

    #[test]
    fn simulation_grid_has_six_interior_knots() {
        let x: Vec<f64> = (0..10).map(|i| 1.0 + 11.0 * i as f64).collect();
        let b = SplineBasis::new(&x, 10).unwrap();
        assert_eq!(b.knots().len(), 14);
        assert_eq!(b.domain(), (1.0, 100.0));
        let interior = &b.knots()[4..10];
        for (m, v) in interior.iter().enumerate() {
            let expected = 1.0 + 99.0 * (m + 1) as f64 / 7.0;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn minimal_basis() {
        let b = SplineBasis::new(&[0.0, 1.0, 2.0, 3.0], 4).unwrap();
        assert_eq!(b.knots(), &[0.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0]);
        let m = b.basis_matrix(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.shape(), (4, 4));
    }

    #[test]
    fn construction_errors() {
        assert_eq!(SplineBasis::new(&[0.0, 1.0, 2.0], 4), Err(Error::GridTooSmall(3)));
        assert_eq!(
            SplineBasis::new(&[0.0, 1.0, 2.0, 3.0], 7),
            Err(Error::BadK { k: 7, max: 6 })
        );
        assert_eq!(
            SplineBasis::new(&[0.0, 1.0, 2.0, 3.0], 3),
            Err(Error::BadK { k: 3, max: 6 })
        );
        assert_eq!(
            SplineBasis::new(&[0.0, 1.0, 1.0, 3.0], 4),
            Err(Error::NonIncreasingGrid(2))
        );
        let b = SplineBasis::new(&[0.0, 1.0, 2.0, 3.0], 6).unwrap();
        assert!(matches!(b.eval(3.5), Err(Error::OutOfDomain(..))));
    }

    #[test]
    fn rows_sum_to_one_and_left_boundary_is_unit() {
        let x = grid(0.0, 1.0, 101);
        let b = SplineBasis::new(&x, 12).unwrap();
        let m = b.basis_matrix(&x).unwrap();
        for i in 0..m.nrows() {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(m[(0, 0)], 1.0);
        assert!(m.row(0).iter().skip(1).all(|&v| v == 0.0));
        assert_eq!(m[(100, 11)], 1.0);
    }

    #[test]
    fn matches_recursive_definition() {
        let x = [0.0, 0.3, 0.35, 1.2, 2.0, 2.9, 3.7, 5.0];
        let b = SplineBasis::new(&x, 8).unwrap();
        let t = b.knots().to_vec();
        let probes = [0.0, 0.01, 0.5, 1.0, 1.7, 2.2, 3.33, 4.999, 5.0];
        for &p in &probes {
            let v = b.eval(p).unwrap();
            for nu in 0..8 {
                let oracle = cox_de_boor(&t, nu, 3, p, true);
                assert!((v[nu] - oracle).abs() < 1e-12, "x={p} nu={nu}");
            }
        }
    }

    #[test]
    fn local_support() {
        let x = grid(-2.0, 3.0, 30);
        let b = SplineBasis::new(&x, 11).unwrap();
        let t = b.knots();
        for i in 0..500 {
            let p = -2.0 + 5.0 * i as f64 / 499.0;
            let v = b.eval(p).unwrap();
            for nu in 0..11 {
                if p < t[nu] || p > t[nu + 4] {
                    assert_eq!(v[nu], 0.0);
                }
            }
        }
    }

    #[test]
    fn penalty_annihilates_affine_functions() {
        let x = grid(1.0, 100.0, 10);
        let b = SplineBasis::new(&x, 10).unwrap();
        let r = b.penalty_matrix();
        let phi = nalgebra::DVector::from_vec(b.affine_coefficients(0.3, -0.02));
        let fitted = b.basis_matrix(&x).unwrap() * &phi;
        for (i, xi) in x.iter().enumerate() {
            assert!((fitted[i] - (0.3 - 0.02 * xi)).abs() < 1e-12);
        }
        let rphi = &r * &phi;
        let rmax = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rphi.amax() <= 1e-10 * rmax);
        assert!((phi.dot(&rphi)).abs() < 1e-10);
    }

    #[test]
    fn penalty_is_symmetric_psd() {
        let x = grid(0.0, 1.0, 40);
        let b = SplineBasis::new(&x, 15).unwrap();
        let r = b.penalty_matrix();
        assert_eq!(r, r.transpose());
        let eig = nalgebra::SymmetricEigen::new(r.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
        let near_zero = eig
            .eigenvalues
            .iter()
            .filter(|&&l| l.abs() < 1e-8 * r.amax())
            .count();
        assert_eq!(near_zero, 2);
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 40)
    }

    #[test]
    fn penalty_matches_adaptive_quadrature() {
        let x = [0.0, 0.4, 0.5, 1.3, 2.2, 2.5, 3.9, 4.0, 6.0];
        let b = SplineBasis::new(&x, 9).unwrap();
        let r = b.penalty_matrix();
        let t = b.knots().to_vec();
        for (p, q) in [(0, 0), (0, 1), (2, 4), (3, 3), (5, 6), (8, 8), (1, 8)] {
            let f = |z: f64| {
                let d = b.eval_derivative(z, 2).unwrap();
                d[p] * d[q]
            };
            // integrate span by span; the integrand has kinks at knots
            let mut total = 0.0;
            for w in t.windows(2) {
                if w[1] > w[0] {
                    let eps = 1e-13 * (w[1] - w[0]);
                    total += adaptive_simpson(&f, w[0] + eps, w[1] - eps, 1e-13);
                }
            }
            assert!((r[(p, q)] - total).abs() <= 1e-9 * (1.0 + total.abs()), "({p},{q})");
        }
    }
}
