use netobs::dynamics::{attractor_state, henon_network, simulate, HenonParams, Trajectory};
use netobs::graph::Network;
use netobs::observe::{observe, select_nodes, ObsScheme};
use proptest::prelude::*;

fn henon(n: usize) -> netobs::dynamics::HenonNetwork {
    henon_network(&Network::path(n).unwrap(), HenonParams::standard(n, 0.1)).unwrap()
}

fn scaled(traj: &Trajectory, a: f64, other: &Trajectory, b: f64) -> Trajectory {
    let mut out = traj.clone();
    for (v, w) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *v = a * *v + b * w;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_observation_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, mask in 1u32..16) {
        let sys = henon(4);
        let nodes: Vec<usize> = (0..4).filter(|k| mask & (1 << k) != 0).collect();
        let sch = select_nodes(&sys, &nodes, &["x", "y"]).unwrap();
        let u = simulate(&sys, &attractor_state(&sys, seed, 100).unwrap(), 20, 0).unwrap();
        let v = simulate(&sys, &attractor_state(&sys, seed + 1, 100).unwrap(), 20, 0).unwrap();
        let combo = observe(&scaled(&u, a, &v, b), &sch, 0.0, seed).unwrap();
        let (hu, hv) = (observe(&u, &sch, 0.0, 1).unwrap(), observe(&v, &sch, 0.0, 2).unwrap());
        for i in 0..20 {
            for k in 0..sch.obs_dim() {
                let want = a * hu.row(i)[k] + b * hv.row(i)[k];
                prop_assert!((combo.row(i)[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            // The selection copies state entries.
            let picked: Vec<f64> = sch.indices().iter().map(|&j| u.state(i)[j]).collect();
            prop_assert_eq!(hu.row(i), &picked[..]);
        }
    }

    #[test]
    fn noise_does_not_depend_on_the_state(seed in any::<u64>(), sigma in 1e-9f64..1.0) {
        let sys = henon(3);
        let sch = ObsScheme::full(&sys);
        let u = simulate(&sys, &attractor_state(&sys, 3, 100).unwrap(), 15, 0).unwrap();
        let v = simulate(&sys, &attractor_state(&sys, 4, 100).unwrap(), 15, 0).unwrap();
        let (yu, yv) = (observe(&u, &sch, sigma, seed).unwrap(), observe(&v, &sch, sigma, seed).unwrap());
        for i in 0..15 {
            for k in 0..sch.obs_dim() {
                let (eu, ev) = (yu.row(i)[k] - u.state(i)[k], yv.row(i)[k] - v.state(i)[k]);
                prop_assert!((eu - ev).abs() <= 1e-14 + 1e-12 * sigma);
            }
        }
    }
}

#[test]
fn noise_variance_matches_sigma_squared() {
    let sys = henon(10);
    let sch = select_nodes(&sys, &[0, 2, 4, 6, 8], &["x", "y"]).unwrap();
    let traj = simulate(&sys, &attractor_state(&sys, 1, 500).unwrap(), 1000, 0).unwrap();
    assert_eq!(traj.len() * sch.obs_dim(), 10_000);
    for (seed, sigma) in [(1, 1e-3), (2, 0.5), (3, 1e-8)] {
        let y = observe(&traj, &sch, sigma, seed).unwrap();
        let mut eps = Vec::with_capacity(10_000);
        for i in 0..traj.len() {
            for (k, &j) in sch.indices().iter().enumerate() {
                eps.push(y.row(i)[k] - traj.state(i)[j]);
            }
        }
        let mean = eps.iter().sum::<f64>() / eps.len() as f64;
        let var = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (eps.len() - 1) as f64;
        // Sample variance has relative sd sqrt(2 / 1e4) = 1.4%.
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "sigma {sigma}: var {var:e}");
        assert!(mean.abs() < 4.0 * sigma / 100.0, "sigma {sigma}: mean {mean:e}");
    }
}
