use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use switchreg::basis::SplineBasis;
use switchreg::cv::{self, FrozenWeights};
use switchreg::data::{validate, CovKind, Dataset, FitReport, LatentKind, LatentParams, ModelConfig};
use switchreg::em;
use switchreg::latent::{self, covariate_probs, log_sum_exp};
use switchreg::sim::{self, SimDesign};

fn grid(gaps: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0];
    for g in gaps {
        let last = *x.last().unwrap();
        x.push(last + g);
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_is_a_partition_of_unity(gaps in prop::collection::vec(0.1f64..3.0, 4..14), t in 0.0f64..1.0) {
        let x = grid(&gaps);
        let basis = SplineBasis::new(&x, x.len().min(15)).unwrap();
        let (lo, hi) = basis.domain();
        let v = basis.eval(lo + t * (hi - lo)).unwrap();
        prop_assert!(v.iter().all(|b| *b >= -1e-14));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_psd_and_vanishes_on_lines(gaps in prop::collection::vec(0.1f64..3.0, 4..14), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let x = grid(&gaps);
        let basis = SplineBasis::new(&x, x.len().min(15)).unwrap();
        let r = basis.penalty_matrix();
        let eig = r.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        prop_assert!(eig.eigenvalues.iter().all(|e| *e >= -1e-10 * top));
        let phi = DVector::from_vec(basis.affine_coefficients(a, b));
        prop_assert!((phi.transpose() * &r * &phi)[0].abs() < 1e-9 * (1.0 + a * a + b * b) * top);
        let fitted = basis.basis_matrix(&x).unwrap() * &phi;
        for (i, xi) in x.iter().enumerate() {
            prop_assert!((fitted[i] - (a + b * xi)).abs() < 1e-9 * (1.0 + a.abs() + b.abs() * xi.abs()));
        }
    }

    #[test]
    fn state_probabilities_are_a_distribution(beta in prop::collection::vec(prop::collection::vec(-6.0f64..6.0, 3), 1..4), v in prop::collection::vec(-2.0f64..2.0, 2)) {
        let p = covariate_probs(&beta, &[1.0, v[0], v[1]]);
        prop_assert_eq!(p.len(), beta.len() + 1);
        prop_assert!(p.iter().all(|q| *q > 0.0 && *q < 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9 * (1.0 + c.abs()));
        prop_assert!(log_sum_exp(&v) >= v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn chain_marginals_sum_to_one(seed in 0u64..1000, n in 2usize..9, p0 in 0.05f64..0.95, a01 in 0.05f64..0.95, a10 in 0.05f64..0.95) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(3, n, |_, _| r.random_range(-1.0..2.0));
        let data = Dataset::new_short((0..n).map(|i| i as f64).collect(), y, None).unwrap();
        let fitted = vec![vec![0.0; n], vec![1.0; n]];
        let post = latent::forward_backward(&data, &fitted, &[0.3, 0.2], &[p0, 1.0 - p0], &[vec![1.0 - a01, a01], vec![a10, 1.0 - a10]]).unwrap();
        let pw = post.pairwise.as_ref().unwrap();
        for k in 0..3 {
            for i in 0..n {
                prop_assert!((post.marginal.point(k, i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for i in 0..n - 1 {
                // pairwise tables marginalize to the point marginals
                for l in 0..2 {
                    let row: f64 = (0..2).map(|j| pw.get(k, i, l, j)).sum();
                    prop_assert!((row - post.marginal.get(k, i, l)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cv_scales_with_weights(seed in 0u64..500, c in 0.01f64..100.0, lambda in 1e-4f64..10.0) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n_rep, n) = (4, 7);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y = DMatrix::from_fn(n_rep, n, |_, _| r.random_range(-1.0..1.0));
        let data = Dataset::new(x.clone(), y, None).unwrap();
        let basis = SplineBasis::new(&x, 7).unwrap();
        let b = basis.basis_matrix(&x).unwrap();
        let pen = basis.penalty_matrix();
        let w: Vec<Vec<f64>> = (0..n_rep).map(|_| (0..n).map(|_| r.random_range(0.1..2.0)).collect()).collect();
        let base = cv::cv_score(&data, &b, &pen, &FrozenWeights { w: w.clone() }, lambda).unwrap().score;
        // scaling W and lambda together leaves every fit unchanged
        let scaled = FrozenWeights { w: w.iter().map(|row| row.iter().map(|v| v * c).collect()).collect() };
        let s = cv::cv_score(&data, &b, &pen, &scaled, lambda * c).unwrap().score;
        prop_assert!(base >= 0.0);
        prop_assert!((s - c * base).abs() <= 1e-8 * c * base);
    }

    #[test]
    fn csv_round_trip_is_exact(seed in 0u64..1000, n_rep in 1usize..6, n in 4usize..9, m in 0usize..3) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 + 1.0 / 3.0).collect();
        let y = DMatrix::from_fn(n_rep, n, |_, _| r.random_range(-1e3..1e3));
        let cov = (m > 0).then(|| switchreg::data::Covariates::new(n_rep, n, m, (0..n_rep * n * m).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap());
        let data = Dataset::new(x, y, cov).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn swapping_labels_is_an_involution(p in 0.01f64..0.99, a01 in 0.01f64..0.99, a10 in 0.01f64..0.99, b0 in -3.0f64..3.0, b1 in -3.0f64..3.0) {
        for alpha in [
            LatentParams::Iid { p: vec![p, 1.0 - p] },
            LatentParams::Markov { pi: vec![p, 1.0 - p], a: vec![vec![1.0 - a01, a01], vec![a10, 1.0 - a10]] },
            LatentParams::Covariate { beta: vec![vec![b0, b1]] },
        ] {
            let mut theta = SimDesign::preset(1).unwrap().true_theta().unwrap();
            theta.alpha = alpha;
            let once = sim::swap_labels(&theta);
            prop_assert_eq!(&once.phi[0], &theta.phi[1]);
            prop_assert_eq!(sim::swap_labels(&once), theta);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ecm_never_descends(seed in 0u64..10_000, gap in 0.5f64..3.0, cov_idx in 0usize..5, latent_idx in 0usize..3) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n_rep, n) = (30, 6);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y = DMatrix::from_fn(n_rep, n, |_, i| (0.4 * x[i]).cos() + if r.random_bool(0.4) { gap } else { 0.0 } + 0.3 * r.sample::<f64, _>(rand_distr::StandardNormal));
        let cov = switchreg::data::Covariates::new(n_rep, n, 1, (0..n_rep * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let data = Dataset::new(x, y, Some(cov)).unwrap();
        let kinds = [CovKind::IsoDiag, CovKind::StateDiag, CovKind::Unrestricted, CovKind::HomogRi, CovKind::NonhomogRi];
        let latents = [LatentKind::Iid, LatentKind::Markov, LatentKind::Covariate];
        let mut cfg = ModelConfig::new(latents[latent_idx], 2, kinds[cov_idx], vec![0.1, 0.1]);
        cfg.standard_errors = false;
        cfg.max_iter = 40;
        let checked = validate(&data, &cfg).unwrap();
        match em::ecm_fit(&data, &checked, &[0.1, 0.1]) {
            Ok(report) => {
                for w in report.loglik_trace.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
                }
            }
            // a collapsing likelihood is reported, never silently descended
            Err(e) => prop_assert!(e.is_numerical(), "{e}"),
        }
    }
}

#[test]
fn fit_report_round_trips_through_json() {
    let mut design = SimDesign::preset(2).unwrap();
    design.n_replicates = 30;
    let generated = sim::generate_dataset(&design, 0).unwrap();
    let checked = validate(&generated.data, &design.fit_config().unwrap()).unwrap();
    let report = em::ecm_fit(&generated.data, &checked, &[1e-4, 1e-4]).unwrap();
    let json = report.to_json().unwrap();
    let back = FitReport::from_json(&json).unwrap();
    assert_eq!(back, report);
    assert!(back.std_errors.is_some());
}

#[test]
fn cv_selection_stabilizes_on_smooth_data() {
    let mut design = SimDesign::preset(1).unwrap();
    design.n_replicates = 40;
    design.cov = switchreg::data::CovParams::HomogRi { sigma2: 1e-5, d: 0.0 };
    let generated = sim::generate_dataset(&design, 0).unwrap();
    let mut cfg = ModelConfig::new(LatentKind::Iid, 2, CovKind::IsoDiag, vec![]);
    cfg.lambdas = switchreg::data::LambdaSetting::Keyword("cv".into());
    cfg.standard_errors = false;
    let checked = validate(&generated.data, &cfg).unwrap();
    let (report, cv_report) = cv::select_lambdas(&generated.data, &checked, &cv::CvConfig::default()).unwrap();
    assert!(cv_report.converged, "{:?}", cv_report.iterations.iter().map(|i| &i.selected).collect::<Vec<_>>());
    assert!(cv_report.iterations.len() <= 20);
    assert!(cv_report.selected.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_eq!(report.theta.lambdas, cv_report.selected);
}

#[test]
fn single_point_grid_selects_it() {
    let mut design = SimDesign::preset(1).unwrap();
    design.n_replicates = 15;
    let generated = sim::generate_dataset(&design, 1).unwrap();
    let mut cfg = ModelConfig::new(LatentKind::Iid, 2, CovKind::StateDiag, vec![]);
    cfg.lambdas = switchreg::data::LambdaSetting::Keyword("cv".into());
    let checked = validate(&generated.data, &cfg).unwrap();
    let grid = cv::CvConfig { grid: vec![0.37], ..cv::CvConfig::default() };
    let (_, cv_report) = cv::select_lambdas(&generated.data, &checked, &grid).unwrap();
    assert_eq!(cv_report.selected, vec![0.37, 0.37]);
}

#[test]
fn rougher_state_gets_less_smoothing() {
    use rand::{Rng, SeedableRng};
    // state 1 is a line, state 2 oscillates; both observed through clean labels
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let (n_rep, n) = (40, 30);
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y = DMatrix::from_fn(n_rep, n, |_, i| {
        let upper = r.random_bool(0.5);
        let f = if upper { 5.0 + 0.5 * (12.0 * x[i]).sin() } else { 0.2 * x[i] };
        f + 0.05 * r.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let data = Dataset::new(x, y, None).unwrap();
    let mut cfg = ModelConfig::new(LatentKind::Iid, 2, CovKind::StateDiag, vec![]);
    cfg.lambdas = switchreg::data::LambdaSetting::Keyword("cv".into());
    cfg.standard_errors = false;
    let checked = validate(&data, &cfg).unwrap();
    let (report, cv_report) = cv::select_lambdas(&data, &checked, &cv::CvConfig::default()).unwrap();
    let upper = if report.fitted[1][0] > report.fitted[0][0] { 1 } else { 0 };
    assert!(cv_report.selected[1 - upper] > cv_report.selected[upper], "{:?}", cv_report.selected);
}
