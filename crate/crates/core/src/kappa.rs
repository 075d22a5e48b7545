//! Monte Carlo estimation of observability condition numbers.
//!
//! For a fixed truth trajectory, each trial draws fresh observation noise,
//! reconstructs the trajectory and records `|e_k|_2 / sigma` for every state
//! coordinate `k`, where `e_k` is the reconstruction error time series at
//! that coordinate. `kappa_hat` is the root mean square of that ratio over
//! trials, which is the quantity whose low-noise, long-trajectory limit is 1
//! for a completely observed system.
//!
//! Trials run in parallel. Every random draw is keyed by the trial index, and
//! results are collected in trial order, so estimates do not depend on
//! scheduling.

use rayon::prelude::*;

use crate::assimilate::{gauss_newton, initial_guess, GnOptions, InitStart, StopReason};
use crate::dynamics::{simulate_from, DynSystem, Trajectory, VarLabel};
use crate::error::{Error, Result};
use crate::observe::{observe, select_nodes, ObsScheme, Observations};
use crate::rng::{self, Purpose};

/// How the Gauss-Newton starting trajectory is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Free run from the true initial state, observed coordinates replaced by
    /// the observations. The iteration then settles on the local minimizer
    /// that the noise perturbs the truth to.
    #[default]
    Truth,
    /// Free run from a seeded random attractor state.
    FreeRun,
}

/// Which variables enter a subset's mean `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanOver {
    #[default]
    All,
    Unobserved,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KappaOptions {
    pub gn: GnOptions,
    pub burn_in: usize,
    pub init: InitStrategy,
    /// Seed of the truth trajectories; the estimate's master seed when unset.
    pub truth_seed: Option<u64>,
    /// Draw a new truth trajectory for every trial instead of one per estimate.
    pub redraw_truth: bool,
    /// An estimate is invalid when more than this fraction of trials is
    /// excluded for non-convergence.
    pub max_excluded_fraction: f64,
    /// Attempts at a finite free-run initial guess before the trial fails.
    pub init_attempts: usize,
}

impl Default for KappaOptions {
    fn default() -> Self {
        Self {
            gn: GnOptions::default(),
            burn_in: 1000,
            init: InitStrategy::Truth,
            truth_seed: None,
            redraw_truth: false,
            max_excluded_fraction: 0.2,
            init_attempts: 5,
        }
    }
}

/// Diagnostics and per-coordinate error ratios of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub converged: bool,
    pub reliable: bool,
    pub cond_c: f64,
    pub iterations: usize,
    pub final_cost: f64,
    /// `None` when the trial failed before or during the iteration.
    pub stop: Option<StopReason>,
    /// `|e_k|_2 / sigma` per state coordinate; empty when the trial failed.
    pub ratios: Vec<f64>,
    pub failure: Option<String>,
}

impl TrialRecord {
    /// Converged without error, so it counts toward the estimate.
    pub fn included(&self) -> bool {
        self.failure.is_none() && self.converged
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarKappa {
    pub label: VarLabel,
    pub observed: bool,
    /// Root mean square of `|e|_2 / sigma` over included trials.
    pub kappa_hat: f64,
    /// Plain mean of `|e|_2 / sigma`.
    pub mean_ratio: f64,
    /// Sample standard deviation of `|e|_2 / sigma`.
    pub std: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaEstimate {
    pub per_variable: Vec<VarKappa>,
    pub n_steps: usize,
    pub sigma: f64,
    pub requested: usize,
    pub n_trials: usize,
    pub excluded: usize,
    pub reliable_fraction: f64,
    pub valid: bool,
    pub trials: Vec<TrialRecord>,
}

impl KappaEstimate {
    pub fn get(&self, label: VarLabel) -> Option<&VarKappa> {
        self.per_variable.iter().find(|v| v.label == label)
    }

    /// `kappa_hat` of variable `var` at 0-based `node`.
    pub fn kappa(&self, node: usize, var: &'static str) -> Option<f64> {
        self.get(VarLabel { node, var }).map(|v| v.kappa_hat)
    }

    /// Node-level view: the largest `kappa_hat` among the node's variables.
    pub fn node_kappa(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for v in &self.per_variable {
            match out.last_mut() {
                Some((node, k)) if *node == v.label.node => *k = k.max(v.kappa_hat),
                _ => out.push((v.label.node, v.kappa_hat)),
            }
        }
        out
    }

    /// Per-step RMS form: `kappa_hat / sqrt(N)`.
    pub fn per_step(&self, label: VarLabel) -> Option<f64> {
        self.get(label).map(|v| v.kappa_hat / (self.n_steps as f64).sqrt())
    }
}

/// Truth trajectory number `index` drawn from `seed`: a random state pushed
/// through `burn_in` steps, then `n_steps` recorded states. Distinct indices
/// occupy disjoint time windows, which matters only for time-dependent
/// systems.
pub fn truth_trajectory(
    sys: &dyn DynSystem,
    n_steps: usize,
    seed: u64,
    index: usize,
    burn_in: usize,
) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, Purpose::Truth, index as u64);
    let x0 = sys.random_state(&mut rng);
    let t_start = index * (burn_in + n_steps);
    simulate_from(sys, &x0, t_start, n_steps, burn_in)
}

/// Gauss-Newton starting trajectory of trial `trial` under `opts.init`.
pub fn trial_guess(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    y: &Observations,
    truth: &Trajectory,
    trial: usize,
    master_seed: u64,
    opts: &KappaOptions,
) -> Result<Trajectory> {
    match opts.init {
        InitStrategy::Truth => initial_guess(sys, scheme, y, &InitStart::State(truth.state(0).to_vec())),
        InitStrategy::FreeRun => {
            let attempts = opts.init_attempts.max(1);
            let mut last = None;
            for attempt in 0..attempts {
                let seed = rng::derive_seed(master_seed, Purpose::Init, (trial * attempts + attempt) as u64);
                let start = InitStart::Random {
                    seed,
                    burn_in: opts.burn_in,
                };
                match initial_guess(sys, scheme, y, &start) {
                    Ok(g) => return Ok(g),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        }
    }
}

fn failed(trial: usize, reason: String) -> TrialRecord {
    TrialRecord {
        trial,
        converged: false,
        reliable: false,
        cond_c: f64::NAN,
        iterations: 0,
        final_cost: f64::NAN,
        stop: None,
        ratios: Vec::new(),
        failure: Some(reason),
    }
}

fn run_trial(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    truth: &Trajectory,
    sigma: f64,
    trial: usize,
    master_seed: u64,
    opts: &KappaOptions,
) -> Result<TrialRecord> {
    let noise_seed = rng::derive_seed(master_seed, Purpose::Noise, trial as u64);
    let y = observe(truth, scheme, sigma, noise_seed)?;
    let init = trial_guess(sys, scheme, &y, truth, trial, master_seed, opts)?;
    let rec = gauss_newton(sys, scheme, &y, &init, &opts.gn)?;
    let ratios = (0..sys.dim())
        .map(|k| {
            let e2: f64 = rec
                .z
                .component(k)
                .zip(truth.component(k))
                .map(|(z, x)| (z - x) * (z - x))
                .sum();
            e2.sqrt() / sigma
        })
        .collect();
    Ok(TrialRecord {
        trial,
        converged: rec.converged,
        reliable: rec.reliable,
        cond_c: rec.cond_c,
        iterations: rec.iterations,
        final_cost: rec.final_cost,
        stop: Some(rec.stop),
        ratios,
        failure: None,
    })
}

/// Root mean square and plain mean/std of each coordinate's ratio over the
/// given trials.
fn summarize<'a>(
    labels: &[VarLabel],
    scheme: &ObsScheme,
    trials: impl Iterator<Item = &'a TrialRecord> + Clone,
) -> Vec<VarKappa> {
    let n = trials.clone().count();
    labels
        .iter()
        .enumerate()
        .map(|(k, &label)| {
            let vals: Vec<f64> = trials.clone().map(|t| t.ratios[k]).collect();
            let (kappa_hat, mean, std) = moments(&vals);
            VarKappa {
                label,
                observed: scheme.observes(k),
                kappa_hat,
                mean_ratio: mean,
                std,
                n_trials: n,
            }
        })
        .collect()
}

/// `(rms, mean, sample std)`; NaN for an empty slice.
pub fn moments(vals: &[f64]) -> (f64, f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n;
    let rms = (vals.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (rms, mean, std)
}

/// Estimates `kappa` for every state coordinate from `trials` noise draws.
///
/// Trials that fail or do not converge are excluded and counted; the estimate
/// is flagged invalid when more than `max_excluded_fraction` of the
/// requested trials are excluded, and is an error when none remain.
pub fn estimate_kappa(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    n_steps: usize,
    sigma: f64,
    trials: usize,
    master_seed: u64,
    opts: &KappaOptions,
) -> Result<KappaEstimate> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level must be positive, got {sigma}")));
    }
    if n_steps < 2 {
        return Err(Error::InvalidArgument(format!("trajectory length must be at least 2, got {n_steps}")));
    }
    opts.gn.validate()?;
    if scheme.state_dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation scheme dimension",
            expected: sys.dim(),
            got: scheme.state_dim(),
        });
    }

    let truth_seed = opts.truth_seed.unwrap_or(master_seed);
    let shared_truth = if opts.redraw_truth {
        None
    } else {
        Some(truth_trajectory(sys, n_steps, truth_seed, 0, opts.burn_in)?)
    };

    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let truth = match &shared_truth {
                Some(x) => x.clone(),
                None => match truth_trajectory(sys, n_steps, truth_seed, t, opts.burn_in) {
                    Ok(x) => x,
                    Err(e) => return failed(t, e.to_string()),
                },
            };
            run_trial(sys, scheme, &truth, sigma, t, master_seed, opts)
                .unwrap_or_else(|e| failed(t, e.to_string()))
        })
        .collect();

    let included: Vec<&TrialRecord> = records.iter().filter(|r| r.included()).collect();
    if included.is_empty() {
        return Err(Error::AllTrialsFailed { requested: trials });
    }
    let n_trials = included.len();
    let excluded = trials - n_trials;
    let reliable_fraction = included.iter().filter(|r| r.reliable).count() as f64 / n_trials as f64;
    let per_variable = summarize(sys.labels(), scheme, included.iter().copied());
    Ok(KappaEstimate {
        per_variable,
        n_steps,
        sigma,
        requested: trials,
        n_trials,
        excluded,
        reliable_fraction,
        valid: excluded as f64 <= opts.max_excluded_fraction * trials as f64,
        trials: records,
    })
}

/// One independent estimate per trajectory length.
pub fn kappa_vs_length(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    lengths: &[usize],
    sigma: f64,
    trials: usize,
    master_seed: u64,
    opts: &KappaOptions,
) -> Result<Vec<KappaEstimate>> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("no trajectory lengths".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("trajectory lengths must be strictly ascending".into()));
    }
    lengths
        .iter()
        .map(|&n| estimate_kappa(sys, scheme, n, sigma, trials, master_seed, opts))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    /// 0-based observed nodes.
    pub group: Vec<usize>,
    /// Mean `kappa_hat` over the selected variables; NaN when every trial failed.
    pub mean_kappa: f64,
    /// Standard deviation of `kappa_hat` over the same variables.
    pub spread: f64,
    pub valid: bool,
    pub estimate: Option<KappaEstimate>,
    pub error: Option<String>,
}

/// Estimates `kappa` with each group of nodes observed in turn.
#[allow(clippy::too_many_arguments)]
pub fn subset_sweep(
    sys: &dyn DynSystem,
    groups: &[Vec<usize>],
    variables: &[&str],
    n_steps: usize,
    sigma: f64,
    trials: usize,
    master_seed: u64,
    opts: &KappaOptions,
    mean_over: MeanOver,
) -> Result<Vec<GroupResult>> {
    groups
        .iter()
        .map(|group| {
            let scheme = select_nodes(sys, group, variables)?;
            Ok(
                match estimate_kappa(sys, &scheme, n_steps, sigma, trials, master_seed, opts) {
                    Ok(est) => {
                        let vals: Vec<f64> = est
                            .per_variable
                            .iter()
                            .filter(|v| mean_over == MeanOver::All || !v.observed)
                            .map(|v| v.kappa_hat)
                            .collect();
                        let (_, mean, spread) = moments(&vals);
                        GroupResult {
                            group: group.clone(),
                            mean_kappa: mean,
                            spread,
                            valid: est.valid,
                            estimate: Some(est),
                            error: None,
                        }
                    }
                    Err(e @ Error::AllTrialsFailed { .. }) => GroupResult {
                        group: group.clone(),
                        mean_kappa: f64::NAN,
                        spread: f64::NAN,
                        valid: false,
                        estimate: None,
                        error: Some(e.to_string()),
                    },
                    Err(e) => return Err(e),
                },
            )
        })
        .collect()
}

/// One trial of a conditioning scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub n_steps: usize,
    pub sigma: f64,
    pub trial: TrialRecord,
}

impl ScanRecord {
    /// `cond_c / sigma`.
    pub fn digits_ratio(&self) -> f64 {
        self.trial.cond_c / self.sigma
    }
}

/// Per `(N, sigma)` summary of a conditioning scan, with `kappa_hat` computed
/// separately over reliable and unreliable trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSummary {
    pub n_steps: usize,
    pub sigma: f64,
    pub median_cond_c: f64,
    pub reliable_trials: usize,
    pub unreliable_trials: usize,
    pub excluded: usize,
    pub kappa_all: Vec<f64>,
    pub kappa_reliable: Vec<f64>,
    pub kappa_unreliable: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub labels: Vec<VarLabel>,
    pub records: Vec<ScanRecord>,
    pub summaries: Vec<ScanSummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Completely observed runs over a grid of lengths and noise levels,
/// recording the Gauss-Newton condition number of every trial.
pub fn conditioning_scan(
    sys: &dyn DynSystem,
    lengths: &[usize],
    sigmas: &[f64],
    trials: usize,
    master_seed: u64,
    opts: &KappaOptions,
) -> Result<ScanResult> {
    let scheme = ObsScheme::full(sys);
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let rms_of = |set: &[&TrialRecord], k: usize| -> f64 {
        let vals: Vec<f64> = set.iter().map(|t| t.ratios[k]).collect();
        moments(&vals).0
    };
    for &n in lengths {
        for &sigma in sigmas {
            let trials_out = match estimate_kappa(sys, &scheme, n, sigma, trials, master_seed, opts) {
                Ok(est) => est.trials,
                Err(Error::AllTrialsFailed { .. }) => Vec::new(),
                Err(e) => return Err(e),
            };
            let included: Vec<&TrialRecord> = trials_out.iter().filter(|t| t.included()).collect();
            let (rel, unrel): (Vec<&TrialRecord>, Vec<&TrialRecord>) =
                included.iter().partition(|t| t.reliable);
            let d = sys.dim();
            summaries.push(ScanSummary {
                n_steps: n,
                sigma,
                median_cond_c: median(included.iter().map(|t| t.cond_c).collect()),
                reliable_trials: rel.len(),
                unreliable_trials: unrel.len(),
                excluded: trials - included.len(),
                kappa_all: (0..d).map(|k| rms_of(&included, k)).collect(),
                kappa_reliable: (0..d).map(|k| rms_of(&rel, k)).collect(),
                kappa_unreliable: (0..d).map(|k| rms_of(&unrel, k)).collect(),
            });
            records.extend(trials_out.into_iter().map(|trial| ScanRecord {
                n_steps: n,
                sigma,
                trial,
            }));
        }
    }
    Ok(ScanResult {
        labels: sys.labels().to_vec(),
        records,
        summaries,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::linear_map;
    use nalgebra::DMatrix;

    #[test]
    fn moments_and_spearman() {
        let (rms, mean, std) = moments(&[3.0, 4.0]);
        assert!((rms - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean, 3.5);
        assert!((std - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(moments(&[]).0.is_nan());
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn estimate_bookkeeping() {
        let sys = linear_map(DMatrix::from_element(1, 1, 0.9)).unwrap();
        let scheme = ObsScheme::full(&sys);
        let est = estimate_kappa(&sys, &scheme, 30, 1e-3, 8, 5, &KappaOptions::default()).unwrap();
        assert_eq!(est.n_trials + est.excluded, est.requested);
        assert_eq!(est.trials.len(), 8);
        assert!(est.valid);
        assert!(est.per_variable[0].kappa_hat >= 0.0);
        assert!(est.per_variable[0].observed);
        assert!(estimate_kappa(&sys, &scheme, 30, 0.0, 8, 5, &KappaOptions::default()).is_err());
        assert!(estimate_kappa(&sys, &scheme, 30, 1e-3, 0, 5, &KappaOptions::default()).is_err());
    }

    #[test]
    fn lengths_must_ascend() {
        let sys = linear_map(DMatrix::from_element(1, 1, 0.9)).unwrap();
        let scheme = ObsScheme::full(&sys);
        let opts = KappaOptions::default();
        assert!(kappa_vs_length(&sys, &scheme, &[20, 10], 1e-3, 2, 1, &opts).is_err());
        assert!(kappa_vs_length(&sys, &scheme, &[], 1e-3, 2, 1, &opts).is_err());
    }

    #[test]
    fn node_view_takes_the_max() {
        let est = KappaEstimate {
            per_variable: vec![
                VarKappa { label: VarLabel { node: 0, var: "x" }, observed: true, kappa_hat: 1.0, mean_ratio: 1.0, std: 0.0, n_trials: 1 },
                VarKappa { label: VarLabel { node: 0, var: "y" }, observed: false, kappa_hat: 3.0, mean_ratio: 1.0, std: 0.0, n_trials: 1 },
                VarKappa { label: VarLabel { node: 1, var: "x" }, observed: false, kappa_hat: 2.0, mean_ratio: 1.0, std: 0.0, n_trials: 1 },
            ],
            n_steps: 4,
            sigma: 1.0,
            requested: 1,
            n_trials: 1,
            excluded: 0,
            reliable_fraction: 1.0,
            valid: true,
            trials: vec![],
        };
        assert_eq!(est.node_kappa(), vec![(0, 3.0), (1, 2.0)]);
        assert_eq!(est.per_step(VarLabel { node: 0, var: "y" }), Some(1.5));
    }
}
