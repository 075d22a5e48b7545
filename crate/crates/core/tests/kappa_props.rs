use nalgebra::DMatrix;
use netobs::assimilate::GnOptions;
use netobs::dynamics::{henon_network, linear_map, simulate, HenonParams};
use netobs::graph::Network;
use netobs::kappa::{estimate_kappa, subset_sweep, truth_trajectory, KappaOptions, MeanOver};
use netobs::observe::select_nodes;
use proptest::prelude::*;

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

#[test]
fn estimates_do_not_depend_on_the_thread_count() {
    let sys = henon_network(&Network::path(5).unwrap(), HenonParams::standard(5, 0.1)).unwrap();
    let sch = select_nodes(&sys, &[0, 1], &["x"]).unwrap();
    let opts = KappaOptions::default();
    let run = |t| pool(t).install(|| estimate_kappa(&sys, &sch, 40, 1e-3, 12, 17, &opts).unwrap());
    let (one, four) = (run(1), run(4));
    assert_eq!(one, four);
    for (a, b) in one.per_variable.iter().zip(&four.per_variable) {
        assert_eq!(a.kappa_hat.to_bits(), b.kappa_hat.to_bits());
    }
}

#[test]
fn symmetric_subsets_agree() {
    // On a complete graph with identical nodes every pair of observers is
    // equivalent in distribution; a single truth orbit breaks the tie, so
    // each trial draws its own.
    let sys = henon_network(&Network::complete(4).unwrap(), HenonParams::standard(4, 0.05)).unwrap();
    let groups = vec![vec![0, 1], vec![2, 3]];
    let opts = KappaOptions { redraw_truth: true, ..KappaOptions::default() };
    let res = subset_sweep(&sys, &groups, &["x", "y"], 20, 1e-3, 100, 5, &opts, MeanOver::All).unwrap();
    // Delta-method standard error of each RMS from the squared ratios, summed
    // over variables as if fully correlated.
    let se = |g: &netobs::kappa::GroupResult| {
        let e = g.estimate.as_ref().unwrap();
        let used: Vec<_> = e.trials.iter().filter(|t| t.included()).collect();
        let n = used.len() as f64;
        let per_var: f64 = (0..e.per_variable.len())
            .map(|k| {
                let sq: Vec<f64> = used.iter().map(|t| t.ratios[k].powi(2)).collect();
                let m = sq.iter().sum::<f64>() / n;
                let sd = (sq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                sd / (2.0 * m.sqrt() * n.sqrt())
            })
            .sum();
        per_var / e.per_variable.len() as f64
    };
    let gap = (res[0].mean_kappa - res[1].mean_kappa).abs();
    let tol = 3.0 * (se(&res[0]).powi(2) + se(&res[1]).powi(2)).sqrt();
    assert!(gap <= tol, "{} vs {} (tol {tol})", res[0].mean_kappa, res[1].mean_kappa);
}

/// Stacked weak-constraint least squares for a linear map, assembled densely
/// and solved through the normal equations. Returns the error covariance
/// diagonal, in units of sigma^2, for every stacked coordinate.
fn linear_oracle(m: &DMatrix<f64>, observed: &[usize], n: usize, q: f64) -> Vec<f64> {
    let d = m.nrows();
    let rows = (n - 1) * d + n * observed.len();
    let mut j = DMatrix::zeros(rows, n * d);
    for i in 0..n - 1 {
        for a in 0..d {
            for b in 0..d {
                j[(i * d + a, i * d + b)] = m[(a, b)] / q;
            }
            j[(i * d + a, (i + 1) * d + a)] = -1.0 / q;
        }
    }
    let base = (n - 1) * d;
    for i in 0..n {
        for (k, &c) in observed.iter().enumerate() {
            j[(base + i * observed.len() + k, i * d + c)] = 1.0;
        }
    }
    // e = -(J^T J)^{-1} J_obs^T eps, so Cov(e) = A^{-1} J_obs^T J_obs A^{-1}.
    let a = (j.transpose() * &j).try_inverse().unwrap();
    let obs = j.rows(base, n * observed.len()).into_owned();
    let g = &a * obs.transpose();
    let cov = &g * g.transpose();
    (0..n * d).map(|k| cov[(k, k)]).collect()
}

#[test]
fn linear_chain_matches_least_squares_oracle() {
    let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.5]);
    let (n, trials) = (50, 2000);
    // Both eigenvalues lie inside the unit disk; q near r keeps the dense
    // oracle well conditioned while the estimator sees the same problem.
    let q = 1e-2;
    let var = linear_oracle(&m, &[0], n, q);
    let want: Vec<f64> = (0..2).map(|c| (0..n).map(|i| var[i * 2 + c]).sum::<f64>().sqrt()).collect();
    let sys = linear_map(m).unwrap();
    let sch = select_nodes(&sys, &[0], &["x"]).unwrap();
    let opts = KappaOptions { gn: GnOptions { q, ..GnOptions::default() }, burn_in: 0, ..KappaOptions::default() };
    let est = estimate_kappa(&sys, &sch, n, 1e-3, trials, 3, &opts).unwrap();
    for c in 0..2 {
        let got = est.kappa(c, "x").unwrap();
        assert!((got / want[c] - 1.0).abs() < 0.05, "node {c}: {got} vs {}", want[c]);
    }
}

#[test]
fn linear_oracle_is_one_when_fully_observed() {
    // Sanity check of the oracle itself: with q -> 0 and full observation,
    // the summed error variance tends to 1 per coordinate.
    let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.5]);
    let var = linear_oracle(&m, &[0, 1], 30, 1e-6);
    for c in 0..2 {
        let total: f64 = (0..30).map(|i| var[i * 2 + c]).sum();
        assert!((total - 1.0).abs() < 0.05, "{total}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn accounting_and_sign(seed in 0u64..10_000, trials in 1usize..8, n in 5usize..30) {
        let sys = henon_network(&Network::path(3).unwrap(), HenonParams::standard(3, 0.1)).unwrap();
        let sch = select_nodes(&sys, &[0], &["x", "y"]).unwrap();
        match estimate_kappa(&sys, &sch, n, 1e-3, trials, seed, &KappaOptions::default()) {
            Ok(est) => {
                prop_assert_eq!(est.n_trials + est.excluded, est.requested);
                prop_assert_eq!(est.requested, trials);
                prop_assert_eq!(est.trials.len(), trials);
                prop_assert!(est.per_variable.iter().all(|v| v.kappa_hat >= 0.0 && v.std >= 0.0));
                prop_assert!(est.per_variable.iter().all(|v| v.n_trials == est.n_trials));
            }
            Err(e) => prop_assert!(e.to_string().contains("trial"), "{e}"),
        }
    }

    #[test]
    fn kappa_is_first_order_independent_of_sigma(a in 0.3f64..0.95, log_sigma in -8.0f64..-2.3) {
        let sigma = 10f64.powf(log_sigma);
        let sys = linear_map(DMatrix::from_row_slice(2, 2, &[a, 0.3, -0.3, a])).unwrap();
        let sch = select_nodes(&sys, &[0], &["x"]).unwrap();
        let opts = KappaOptions { burn_in: 0, ..KappaOptions::default() };
        // The same noise seeds at both levels isolate the sigma dependence.
        let lo = estimate_kappa(&sys, &sch, 40, sigma, 30, 9, &opts).unwrap();
        let hi = estimate_kappa(&sys, &sch, 40, 2.0 * sigma, 30, 9, &opts).unwrap();
        for (l, h) in lo.per_variable.iter().zip(&hi.per_variable) {
            prop_assert!((h.kappa_hat / l.kappa_hat - 1.0).abs() < 0.1, "{} vs {}", l.kappa_hat, h.kappa_hat);
        }
    }
}

#[test]
fn nonlinear_kappa_is_stable_under_doubling_sigma() {
    let sys = henon_network(&Network::path(3).unwrap(), HenonParams::standard(3, 0.1)).unwrap();
    let sch = select_nodes(&sys, &[0, 1], &["x", "y"]).unwrap();
    let opts = KappaOptions::default();
    let lo = estimate_kappa(&sys, &sch, 40, 1e-4, 40, 2, &opts).unwrap();
    let hi = estimate_kappa(&sys, &sch, 40, 2e-4, 40, 2, &opts).unwrap();
    for (l, h) in lo.per_variable.iter().zip(&hi.per_variable) {
        assert!((h.kappa_hat / l.kappa_hat - 1.0).abs() < 0.1, "{:?}: {} vs {}", l.label, l.kappa_hat, h.kappa_hat);
    }
}

#[test]
fn truth_is_an_orbit_after_burn_in() {
    let sys = henon_network(&Network::path(3).unwrap(), HenonParams::standard(3, 0.1)).unwrap();
    let t = truth_trajectory(&sys, 30, 4, 0, 200).unwrap();
    let again = simulate(&sys, t.state(0), 30, 0).unwrap();
    assert_eq!(t.len(), 30);
    for i in 0..30 {
        for (a, b) in t.state(i).iter().zip(again.state(i)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
