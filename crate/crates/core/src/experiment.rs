//! Config-driven experiment runs.
//!
//! A config is a TOML document (the bundled ones use the `.cfg` extension)
//! with the sections `system`, `network`, `observation`, `assimilation`,
//! `experiment`, `seeds` and `output`. Node ids in configs and in every
//! output file are 1-based. Loading resolves every default, and the
//! resolved document is written next to the results as `manifest.toml`,
//! which is itself a valid config reproducing the run. Facts derived while
//! building the network (edge count, the matched ER probability) are
//! prepended to it as comments.
//!
//! Field reference, with defaults:
//!
//! ```text
//! [system]       family = henon | fhn | linear | random_matrix
//!                henon:  a = 2.2, b = 0.4 (scalar or per-node list), c = 0.1
//!                fhn:    a = 0.42, b = 0.8, c = 0.08, d = 0.01, i = -0.025,
//!                        g = 0.1, jitter = 0.05, dt = 0.1, substeps = 1
//!                linear: matrix (list of rows, required)
//!                random_matrix: dim = 2, scale = 0.8
//! [network]      kind = edges | adjacency | file | path | complete | er | scale_free
//!                (henon and fhn only)
//!                edges: n, edges = [[j, k], ...], directed = false
//!                adjacency: adjacency = [[...], ...], directed = false
//!                file: path, directed = false
//!                path, complete: n
//!                er: n, p or match_scale_free_m, connected = false, max_attempts = 1000
//!                scale_free: n, m = 2
//! [observation]  nodes = [..] or "all", variables = all of the family, sigma
//! [assimilation] q = 1e-6, r = 1, max_iter = 100, step_tol = 1e-10,
//!                cost_rtol = 1e-4, svd_rtol = 1e-12, damping = 0,
//!                obs_sum_includes_last = true,
//!                solver = auto | banded | dense_svd | normal_equations
//! [experiment]   kind = kappa | kappa_vs_length | subset_sweep | conditioning_scan | reconstruct
//!                n_steps (kappa, subset_sweep, reconstruct)
//!                lengths (kappa_vs_length, conditioning_scan), sigmas (conditioning_scan)
//!                trials = 50, burn_in = 1000, init = truth | free_run,
//!                redraw_truth = false, max_excluded_fraction = 0.2, init_attempts = 5
//!                subset_sweep: metrics = ["degree"], group_size = 4, groups, mean_over = all | unobserved
//! [seeds]        dynamics, noise_master, network, params (all required)
//! [output]       dir
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assimilate::{gauss_newton, write_trajectory_csv, GnOptions, LinearSolver, ReconResult};
use crate::dynamics::{
    fhn_network, henon_network, linear_map, random_matrix_system, DynSystem, FhnNodeParams, FhnParams,
    HenonParams, Trajectory,
};
use crate::error::{Error, Result};
use crate::graph::{
    centrality, density_matched_p, erdos_renyi, erdos_renyi_connected, rank_subsets, scale_free,
    scale_free_edge_count, Centrality, Network,
};
use crate::kappa::{
    conditioning_scan, estimate_kappa, subset_sweep, trial_guess, truth_trajectory, GroupResult,
    InitStrategy, KappaEstimate, KappaOptions, MeanOver, TrialRecord,
};
use crate::observe::{observe, select_nodes, ObsScheme};
use crate::rng::{self, Purpose};

// ---------------------------------------------------------------------------
// Document schema

/// A scalar applied to every node, or one value per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    Uniform(f64),
    Nodes(Vec<f64>),
}

impl PerNode {
    fn expand(&self, n: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            Self::Uniform(v) => Ok(vec![*v; n]),
            Self::Nodes(v) if v.len() == n => Ok(v.clone()),
            Self::Nodes(v) => Err(Error::config(field, format!("has {} entries for {n} nodes", v.len()))),
        }
    }
}

/// `"all"` or an explicit list of 1-based node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeSelection {
    Keyword(String),
    List(Vec<usize>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<PerNode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<PerNode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<PerNode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_scale_free_m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connected: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_attempts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<NodeSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variables: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssimilationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_rtol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svd_rtol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_sum_includes_last: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<LinearSolver>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Kappa,
    KappaVsLength,
    SubsetSweep,
    ConditioningScan,
    Reconstruct,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kappa => "kappa",
            Self::KappaVsLength => "kappa_vs_length",
            Self::SubsetSweep => "subset_sweep",
            Self::ConditioningScan => "conditioning_scan",
            Self::Reconstruct => "reconstruct",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub redraw_truth: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_excluded_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_attempts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<Centrality>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_over: Option<MeanOver>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_master: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// The config document. After [`Experiment::parse`] every field that applies
/// to the chosen system and experiment kind is filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSection>,
    #[serde(default)]
    pub observation: ObservationSection,
    #[serde(default)]
    pub assimilation: AssimilationSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub seeds: SeedsSection,
    #[serde(default)]
    pub output: OutputSection,
}

// ---------------------------------------------------------------------------
// Resolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub dynamics: u64,
    pub noise_master: u64,
    pub network: u64,
    pub params: u64,
}

#[derive(Debug, Clone)]
enum SystemPlan {
    Henon { a: PerNode, b: PerNode, c: f64 },
    Fhn(FhnParams),
    Linear(Vec<Vec<f64>>),
    RandomMatrix { dim: usize, scale: f64 },
}

#[derive(Debug, Clone)]
enum NetworkPlan {
    Edges { n: usize, edges: Vec<[usize; 2]>, directed: bool },
    Adjacency { rows: Vec<Vec<f64>>, directed: bool },
    File { path: PathBuf, directed: bool },
    Path(usize),
    Complete(usize),
    ErdosRenyi { n: usize, p: f64, matched_m: Option<usize>, connected: bool, max_attempts: usize },
    ScaleFree { n: usize, m: usize },
}

#[derive(Debug, Clone)]
enum KindPlan {
    Kappa { n_steps: usize },
    KappaVsLength { lengths: Vec<usize> },
    SubsetSweep { n_steps: usize, metrics: Vec<Centrality>, group_size: usize, groups: Option<Vec<Vec<usize>>>, mean_over: MeanOver },
    ConditioningScan { lengths: Vec<usize>, sigmas: Vec<f64> },
    Reconstruct { n_steps: usize },
}

/// A validated config, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    system: SystemPlan,
    network: Option<NetworkPlan>,
    /// 0-based; `None` observes every node.
    nodes: Option<Vec<usize>>,
    variables: Vec<String>,
    sigma: Option<f64>,
    kind: KindPlan,
    trials: usize,
    opts: KappaOptions,
    seeds: Seeds,
}

fn need<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(field, "missing"))
}

fn forbid<T>(v: &Option<T>, field: &str, why: &str) -> Result<()> {
    match v {
        Some(_) => Err(Error::config(field, format!("not used {why}"))),
        None => Ok(()),
    }
}

fn scalar(v: &Option<PerNode>, field: &str, default: f64) -> Result<f64> {
    match v {
        None => Ok(default),
        Some(PerNode::Uniform(x)) => Ok(*x),
        Some(PerNode::Nodes(_)) => Err(Error::config(field, "must be a single number")),
    }
}

fn positive(v: f64, field: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn family_vars(family: &str) -> &'static [&'static str] {
    match family {
        "henon" => &["x", "y"],
        "fhn" => &["v", "w"],
        _ => &["x"],
    }
}

impl Experiment {
    /// Parses and validates a config document, materializing all defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::resolve(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Validates `cfg`, filling in defaults.
    pub fn resolve(mut cfg: ExperimentConfig) -> Result<Self> {
        let family = need(cfg.system.family.clone(), "system.family")?;
        let s = &mut cfg.system;
        let not_for = format!("by family {family}");
        let system = match family.as_str() {
            "henon" => {
                for (v, f) in [(&s.d, "system.d"), (&s.i, "system.i"), (&s.g, "system.g"), (&s.jitter, "system.jitter"), (&s.dt, "system.dt"), (&s.scale, "system.scale")] {
                    forbid(v, f, &not_for)?;
                }
                forbid(&s.substeps, "system.substeps", &not_for)?;
                forbid(&s.matrix, "system.matrix", &not_for)?;
                forbid(&s.dim, "system.dim", &not_for)?;
                let a = s.a.get_or_insert(PerNode::Uniform(2.2)).clone();
                let b = s.b.get_or_insert(PerNode::Uniform(0.4)).clone();
                let c = scalar(&s.c, "system.c", 0.1)?;
                s.c = Some(PerNode::Uniform(c));
                SystemPlan::Henon { a, b, c }
            }
            "fhn" => {
                forbid(&s.matrix, "system.matrix", &not_for)?;
                forbid(&s.dim, "system.dim", &not_for)?;
                forbid(&s.scale, "system.scale", &not_for)?;
                let nom = FhnNodeParams::default();
                let p = FhnParams {
                    nominal: FhnNodeParams {
                        a: scalar(&s.a, "system.a", nom.a)?,
                        b: scalar(&s.b, "system.b", nom.b)?,
                        c: scalar(&s.c, "system.c", nom.c)?,
                        d: s.d.unwrap_or(nom.d),
                        i: s.i.unwrap_or(nom.i),
                    },
                    g: s.g.unwrap_or(0.1),
                    jitter: s.jitter.unwrap_or(0.05),
                    dt: positive(s.dt.unwrap_or(0.1), "system.dt")?,
                    substeps: s.substeps.unwrap_or(1),
                };
                if p.substeps == 0 {
                    return Err(Error::config("system.substeps", "must be at least 1"));
                }
                if !(p.jitter >= 0.0 && p.jitter < 1.0) {
                    return Err(Error::config("system.jitter", "must be in [0, 1)"));
                }
                s.a = Some(PerNode::Uniform(p.nominal.a));
                s.b = Some(PerNode::Uniform(p.nominal.b));
                s.c = Some(PerNode::Uniform(p.nominal.c));
                s.d = Some(p.nominal.d);
                s.i = Some(p.nominal.i);
                s.g = Some(p.g);
                s.jitter = Some(p.jitter);
                s.dt = Some(p.dt);
                s.substeps = Some(p.substeps);
                SystemPlan::Fhn(p)
            }
            "linear" | "random_matrix" => {
                for (v, f) in [(&s.a, "system.a"), (&s.b, "system.b"), (&s.c, "system.c")] {
                    forbid(v, f, &not_for)?;
                }
                for (v, f) in [(&s.d, "system.d"), (&s.i, "system.i"), (&s.g, "system.g"), (&s.jitter, "system.jitter"), (&s.dt, "system.dt")] {
                    forbid(v, f, &not_for)?;
                }
                forbid(&s.substeps, "system.substeps", &not_for)?;
                if family == "linear" {
                    forbid(&s.dim, "system.dim", &not_for)?;
                    forbid(&s.scale, "system.scale", &not_for)?;
                    let m = need(s.matrix.clone(), "system.matrix")?;
                    if m.is_empty() || m.iter().any(|row| row.len() != m.len()) {
                        return Err(Error::config("system.matrix", "must be a non-empty square list of rows"));
                    }
                    SystemPlan::Linear(m)
                } else {
                    forbid(&s.matrix, "system.matrix", &not_for)?;
                    let dim = *s.dim.get_or_insert(2);
                    if dim == 0 {
                        return Err(Error::config("system.dim", "must be at least 1"));
                    }
                    let scale = positive(*s.scale.get_or_insert(0.8), "system.scale")?;
                    SystemPlan::RandomMatrix { dim, scale }
                }
            }
            other => {
                return Err(Error::config(
                    "system.family",
                    format!("unknown family `{other}` (expected henon, fhn, linear or random_matrix)"),
                ))
            }
        };
        let networked = matches!(system, SystemPlan::Henon { .. } | SystemPlan::Fhn(_));

        let network = match (&mut cfg.network, networked) {
            (Some(_), false) => return Err(Error::config("network", format!("not used by family {family}"))),
            (None, true) => return Err(Error::config("network", "missing")),
            (None, false) => None,
            (Some(n), true) => Some(resolve_network(n)?),
        };

        let kind = need(cfg.experiment.kind, "experiment.kind")?;
        let e = &mut cfg.experiment;
        let for_kind = format!("by experiment kind {}", kind.as_str());
        if !matches!(kind, ExperimentKind::SubsetSweep) {
            forbid(&e.group_size, "experiment.group_size", &for_kind)?;
            forbid(&e.metrics, "experiment.metrics", &for_kind)?;
            forbid(&e.groups, "experiment.groups", &for_kind)?;
            forbid(&e.mean_over, "experiment.mean_over", &for_kind)?;
        }
        let needs_n = matches!(kind, ExperimentKind::Kappa | ExperimentKind::SubsetSweep | ExperimentKind::Reconstruct);
        if !needs_n {
            forbid(&e.n_steps, "experiment.n_steps", &for_kind)?;
        }
        if needs_n {
            forbid(&e.lengths, "experiment.lengths", &for_kind)?;
        }
        if kind != ExperimentKind::ConditioningScan {
            forbid(&e.sigmas, "experiment.sigmas", &for_kind)?;
        }
        if kind == ExperimentKind::Reconstruct {
            forbid(&e.trials, "experiment.trials", &for_kind)?;
            forbid(&e.redraw_truth, "experiment.redraw_truth", &for_kind)?;
            forbid(&e.max_excluded_fraction, "experiment.max_excluded_fraction", &for_kind)?;
        }
        let n_steps = |e: &ExperimentSection| -> Result<usize> {
            let n = need(e.n_steps, "experiment.n_steps")?;
            if n < 2 {
                return Err(Error::config("experiment.n_steps", "must be at least 2"));
            }
            Ok(n)
        };
        let lengths = |e: &ExperimentSection| -> Result<Vec<usize>> {
            let l = need(e.lengths.clone(), "experiment.lengths")?;
            if l.is_empty() || l[0] < 2 || l.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("experiment.lengths", "must be strictly ascending values of at least 2"));
            }
            Ok(l)
        };
        let kind_plan = match kind {
            ExperimentKind::Kappa => KindPlan::Kappa { n_steps: n_steps(e)? },
            ExperimentKind::Reconstruct => KindPlan::Reconstruct { n_steps: n_steps(e)? },
            ExperimentKind::KappaVsLength => KindPlan::KappaVsLength { lengths: lengths(e)? },
            ExperimentKind::ConditioningScan => {
                let sigmas = need(e.sigmas.clone(), "experiment.sigmas")?;
                if sigmas.is_empty() {
                    return Err(Error::config("experiment.sigmas", "must not be empty"));
                }
                for &s in &sigmas {
                    positive(s, "experiment.sigmas")?;
                }
                KindPlan::ConditioningScan { lengths: lengths(e)?, sigmas }
            }
            ExperimentKind::SubsetSweep => {
                if !networked {
                    return Err(Error::config("experiment.kind", "subset_sweep needs a network system"));
                }
                let group_size = *e.group_size.get_or_insert(4);
                if group_size == 0 {
                    return Err(Error::config("experiment.group_size", "must be at least 1"));
                }
                let groups = match &e.groups {
                    Some(g) => {
                        forbid(&e.metrics, "experiment.metrics", "together with explicit experiment.groups")?;
                        if g.is_empty() || g.iter().any(Vec::is_empty) {
                            return Err(Error::config("experiment.groups", "groups must be non-empty"));
                        }
                        Some(g.iter().map(|grp| grp.iter().map(|&v| v.wrapping_sub(1)).collect()).collect())
                    }
                    None => None,
                };
                let metrics = if groups.is_some() {
                    Vec::new()
                } else {
                    let m = e.metrics.get_or_insert_with(|| vec![Centrality::Degree]).clone();
                    if m.is_empty() {
                        return Err(Error::config("experiment.metrics", "must not be empty"));
                    }
                    m
                };
                KindPlan::SubsetSweep {
                    n_steps: n_steps(e)?,
                    metrics,
                    group_size,
                    groups,
                    mean_over: *e.mean_over.get_or_insert(MeanOver::All),
                }
            }
        };
        let trials = if kind == ExperimentKind::Reconstruct { 1 } else { *e.trials.get_or_insert(50) };
        if trials == 0 {
            return Err(Error::config("experiment.trials", "must be at least 1"));
        }
        let burn_in = *e.burn_in.get_or_insert(1000);
        let init = *e.init.get_or_insert(InitStrategy::Truth);
        let init_attempts = *e.init_attempts.get_or_insert(5);
        if init_attempts == 0 {
            return Err(Error::config("experiment.init_attempts", "must be at least 1"));
        }
        let (redraw_truth, max_excluded_fraction) = if kind == ExperimentKind::Reconstruct {
            (false, 0.2)
        } else {
            (*e.redraw_truth.get_or_insert(false), *e.max_excluded_fraction.get_or_insert(0.2))
        };
        if !(0.0..=1.0).contains(&max_excluded_fraction) {
            return Err(Error::config("experiment.max_excluded_fraction", "must be in [0, 1]"));
        }

        let o = &mut cfg.observation;
        let sigma = if kind == ExperimentKind::ConditioningScan {
            forbid(&o.sigma, "observation.sigma", "by conditioning_scan (see experiment.sigmas)")?;
            None
        } else {
            let s = need(o.sigma, "observation.sigma")?;
            let ok = if kind == ExperimentKind::Reconstruct { s >= 0.0 && s.is_finite() } else { s > 0.0 && s.is_finite() };
            if !ok {
                return Err(Error::config("observation.sigma", format!("invalid noise level {s}")));
            }
            Some(s)
        };
        let nodes = match kind {
            ExperimentKind::SubsetSweep => {
                forbid(&o.nodes, "observation.nodes", "by subset_sweep (groups come from the ranking)")?;
                None
            }
            ExperimentKind::ConditioningScan => match o.nodes.get_or_insert(NodeSelection::Keyword("all".into())) {
                NodeSelection::Keyword(k) if k == "all" => None,
                _ => return Err(Error::config("observation.nodes", "conditioning_scan observes everything; use \"all\"")),
            },
            _ => match need(o.nodes.clone(), "observation.nodes")? {
                NodeSelection::Keyword(k) if k == "all" => None,
                NodeSelection::Keyword(k) => {
                    return Err(Error::config("observation.nodes", format!("expected a list or \"all\", got \"{k}\"")))
                }
                NodeSelection::List(l) => {
                    if l.is_empty() {
                        return Err(Error::config("observation.nodes", "must not be empty"));
                    }
                    if l.contains(&0) {
                        return Err(Error::config("observation.nodes", "node ids are 1-based"));
                    }
                    Some(l.iter().map(|v| v - 1).collect())
                }
            },
        };
        let all_vars = family_vars(&family);
        let variables = o
            .variables
            .get_or_insert_with(|| all_vars.iter().map(|v| v.to_string()).collect())
            .clone();
        if kind == ExperimentKind::ConditioningScan && variables.len() != all_vars.len() {
            return Err(Error::config("observation.variables", "conditioning_scan observes every variable"));
        }
        for v in &variables {
            if !all_vars.contains(&v.as_str()) {
                return Err(Error::config("observation.variables", format!("unknown variable `{v}` for family {family}")));
            }
        }

        let a = &mut cfg.assimilation;
        let d = GnOptions::default();
        let gn = GnOptions {
            q: *a.q.get_or_insert(d.q),
            r: *a.r.get_or_insert(d.r),
            max_iter: *a.max_iter.get_or_insert(d.max_iter),
            step_tol: *a.step_tol.get_or_insert(d.step_tol),
            cost_rtol: *a.cost_rtol.get_or_insert(d.cost_rtol),
            svd_rtol: *a.svd_rtol.get_or_insert(d.svd_rtol),
            damping: *a.damping.get_or_insert(d.damping),
            obs_sum_includes_last: *a.obs_sum_includes_last.get_or_insert(d.obs_sum_includes_last),
            solver: *a.solver.get_or_insert(d.solver),
        };
        gn.validate().map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                let (field, rest) = msg.split_once(": ").unwrap_or(("", &msg));
                Error::config(format!("assimilation.{field}"), rest)
            }
            other => other,
        })?;

        let seeds = Seeds {
            dynamics: need(cfg.seeds.dynamics, "seeds.dynamics")?,
            noise_master: need(cfg.seeds.noise_master, "seeds.noise_master")?,
            network: need(cfg.seeds.network, "seeds.network")?,
            params: need(cfg.seeds.params, "seeds.params")?,
        };

        let exp = Self {
            opts: KappaOptions {
                gn,
                burn_in,
                init,
                truth_seed: Some(seeds.dynamics),
                redraw_truth,
                max_excluded_fraction,
                init_attempts,
            },
            config: cfg,
            system,
            network,
            nodes,
            variables,
            sigma,
            kind: kind_plan,
            trials,
            seeds,
        };
        // Build once so that node ids, variables and the network are checked
        // before anything runs.
        let (net, _) = exp.build_network()?;
        let sys = exp.build_system(net.as_ref())?;
        if let Some(nodes) = &exp.nodes {
            exp.scheme_for(sys.as_ref(), nodes).map_err(|e| Error::config("observation.nodes", e.to_string()))?;
        }
        if let (KindPlan::SubsetSweep { groups: Some(groups), .. }, Some(net)) = (&exp.kind, &net) {
            for g in groups {
                if let Some(&bad) = g.iter().find(|&&v| v >= net.n()) {
                    return Err(Error::config("experiment.groups", format!("unknown node {}", bad.wrapping_add(1))));
                }
            }
        }
        Ok(exp)
    }

    /// The resolved document.
    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn kind(&self) -> ExperimentKind {
        self.config.experiment.kind.expect("resolved")
    }

    pub fn seeds(&self) -> Seeds {
        self.seeds
    }

    /// Replaces one seed (`dynamics`, `noise_master`, `network` or `params`).
    pub fn override_seed(&mut self, name: &str, value: u64) -> Result<()> {
        match name {
            "dynamics" => {
                self.seeds.dynamics = value;
                self.config.seeds.dynamics = Some(value);
                self.opts.truth_seed = Some(value);
            }
            "noise_master" => {
                self.seeds.noise_master = value;
                self.config.seeds.noise_master = Some(value);
            }
            "network" => {
                self.seeds.network = value;
                self.config.seeds.network = Some(value);
            }
            "params" => {
                self.seeds.params = value;
                self.config.seeds.params = Some(value);
            }
            other => {
                return Err(Error::config(
                    format!("seeds.{other}"),
                    "unknown seed (expected dynamics, noise_master, network or params)",
                ))
            }
        }
        Ok(())
    }

    /// The resolved config as TOML, loadable by [`Experiment::parse`].
    pub fn manifest(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }

    /// Builds the network, with derived facts for the output metadata.
    pub fn build_network(&self) -> Result<(Option<Network>, Vec<(String, String)>)> {
        let Some(plan) = &self.network else {
            return Ok((None, Vec::new()));
        };
        let mut facts = Vec::new();
        let seed = self.seeds.network;
        let net = match plan {
            NetworkPlan::Edges { n, edges, directed } => {
                let mut e = Vec::with_capacity(edges.len() * 2);
                for &[j, k] in edges {
                    if j == 0 || k == 0 || j > *n || k > *n {
                        return Err(Error::config("network.edges", format!("edge [{j}, {k}] is outside nodes 1..{n}")));
                    }
                    e.push((j - 1, k - 1));
                    if !directed {
                        e.push((k - 1, j - 1));
                    }
                }
                Network::from_edges(*n, &e, *directed)
            }
            NetworkPlan::Adjacency { rows, directed } => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config("network.adjacency", "must be square"));
                }
                Network::new(nalgebra::DMatrix::from_fn(n, n, |j, k| rows[j][k]), *directed)
            }
            NetworkPlan::File { path, directed } => Network::read_file(path, *directed),
            NetworkPlan::Path(n) => Network::path(*n),
            NetworkPlan::Complete(n) => Network::complete(*n),
            NetworkPlan::ScaleFree { n, m } => scale_free(*n, *m, seed),
            NetworkPlan::ErdosRenyi { n, p, matched_m, connected, max_attempts } => {
                if let Some(m) = matched_m {
                    facts.push(("derived.er_matched_edges".into(), scale_free_edge_count(*n, *m).to_string()));
                }
                facts.push(("derived.er_p".into(), format!("{p:e}")));
                if *connected {
                    let (net, rejected) = erdos_renyi_connected(*n, *p, seed, *max_attempts)?;
                    facts.push(("derived.er_rejected_draws".into(), rejected.to_string()));
                    Ok(net)
                } else {
                    erdos_renyi(*n, *p, seed)
                }
            }
        }
        .map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("network", other.to_string()),
        })?;
        facts.push(("derived.nodes".into(), net.n().to_string()));
        facts.push(("derived.edges".into(), net.edge_count().to_string()));
        Ok((Some(net), facts))
    }

    pub fn build_system(&self, net: Option<&Network>) -> Result<Box<dyn DynSystem>> {
        Ok(match &self.system {
            SystemPlan::Henon { a, b, c } => {
                let net = net.expect("henon has a network");
                let n = net.n();
                Box::new(henon_network(
                    net,
                    HenonParams {
                        a: a.expand(n, "system.a")?,
                        b: b.expand(n, "system.b")?,
                        c: *c,
                    },
                )?)
            }
            SystemPlan::Fhn(p) => Box::new(fhn_network(net.expect("fhn has a network"), p, self.seeds.params)?),
            SystemPlan::Linear(rows) => {
                let d = rows.len();
                Box::new(linear_map(nalgebra::DMatrix::from_fn(d, d, |j, k| rows[j][k]))?)
            }
            SystemPlan::RandomMatrix { dim, scale } => Box::new(random_matrix_system(*dim, self.seeds.params, *scale)?),
        })
    }

    fn scheme_for(&self, sys: &dyn DynSystem, nodes: &[usize]) -> Result<ObsScheme> {
        let vars: Vec<&str> = self.variables.iter().map(String::as_str).collect();
        select_nodes(sys, nodes, &vars)
    }

    fn scheme(&self, sys: &dyn DynSystem) -> Result<ObsScheme> {
        match &self.nodes {
            Some(nodes) => self.scheme_for(sys, nodes),
            None => {
                let all: Vec<usize> = sys.labels().iter().map(|l| l.node).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
                self.scheme_for(sys, &all)
            }
        }
    }

    /// Runs the experiment, writing results into `out_dir`.
    pub fn run(&self, out_dir: &Path) -> Result<RunReport> {
        fs::create_dir_all(out_dir)?;
        let (net, facts) = self.build_network()?;
        let sys = self.build_system(net.as_ref())?;
        let mut out = Sink::new(out_dir);
        out.text("manifest.toml", &self.manifest_with_facts(&facts))?;
        if let Some(net) = &net {
            out.text("network.txt", &net.to_text())?;
        }
        match &self.kind {
            KindPlan::Kappa { n_steps } => self.run_kappa(sys.as_ref(), *n_steps, &mut out)?,
            KindPlan::KappaVsLength { lengths } => self.run_lengths(sys.as_ref(), lengths, &mut out)?,
            KindPlan::SubsetSweep { n_steps, metrics, group_size, groups, mean_over } => {
                let net = net.as_ref().expect("subset sweep has a network");
                self.run_sweep(sys.as_ref(), net, *n_steps, metrics, *group_size, groups.as_deref(), *mean_over, &mut out)?
            }
            KindPlan::ConditioningScan { lengths, sigmas } => self.run_scan(sys.as_ref(), lengths, sigmas, &mut out)?,
            KindPlan::Reconstruct { n_steps } => self.run_reconstruct(sys.as_ref(), *n_steps, &mut out)?,
        }
        Ok(RunReport {
            files: out.files,
            problems: out.problems,
        })
    }

    fn manifest_with_facts(&self, facts: &[(String, String)]) -> String {
        let mut s = format!("# netobs {}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in facts {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s.push_str(&self.manifest());
        s
    }

    fn sigma(&self) -> f64 {
        self.sigma.expect("noise level resolved")
    }

    fn run_kappa(&self, sys: &dyn DynSystem, n_steps: usize, out: &mut Sink) -> Result<()> {
        let scheme = self.scheme(sys)?;
        let est = estimate_kappa(sys, &scheme, n_steps, self.sigma(), self.trials, self.seeds.noise_master, &self.opts)?;
        if !est.valid {
            out.problems.push(format!("estimate at N = {n_steps} excluded {} of {} trials", est.excluded, est.requested));
        }
        write_kappa_tables(out, &est)?;
        out.csv("summary.csv", &SUMMARY_HEADER, vec![summary_row(n_steps, self.sigma(), Some(&est))])?;
        let rows = est.trials.iter().map(|t| diag_row(&[n_steps.to_string()], est.sigma, t)).collect();
        out.csv("diagnostics.csv", &with_prefix(&["n_steps"], &DIAG_HEADER), rows)
    }

    fn run_lengths(&self, sys: &dyn DynSystem, lengths: &[usize], out: &mut Sink) -> Result<()> {
        let scheme = self.scheme(sys)?;
        let sigma = self.sigma();
        let mut trace = Vec::new();
        let mut summary = Vec::new();
        let mut diags = Vec::new();
        let mut last = None;
        for &n in lengths {
            match estimate_kappa(sys, &scheme, n, sigma, self.trials, self.seeds.noise_master, &self.opts) {
                Ok(est) => {
                    if !est.valid {
                        out.problems.push(format!("estimate at N = {n} excluded {} of {} trials", est.excluded, est.requested));
                    }
                    for v in &est.per_variable {
                        trace.push(vec![
                            n.to_string(),
                            (v.label.node + 1).to_string(),
                            v.label.var.to_string(),
                            v.observed.to_string(),
                            num(v.kappa_hat),
                            num(v.std),
                            v.n_trials.to_string(),
                            est.valid.to_string(),
                        ]);
                    }
                    summary.push(summary_row(n, sigma, Some(&est)));
                    diags.extend(est.trials.iter().map(|t| diag_row(&[n.to_string()], sigma, t)));
                    last = Some(est);
                }
                Err(Error::AllTrialsFailed { requested }) => {
                    out.problems.push(format!("all {requested} trials failed at N = {n}"));
                    summary.push(summary_row(n, sigma, None));
                }
                Err(e) => return Err(e),
            }
        }
        out.csv(
            "kappa_vs_length.csv",
            &["n_steps", "node", "variable", "observed", "kappa_hat", "std", "n_trials", "valid"],
            trace,
        )?;
        if let Some(est) = &last {
            write_kappa_tables(out, est)?;
        }
        out.csv("summary.csv", &SUMMARY_HEADER, summary)?;
        out.csv("diagnostics.csv", &with_prefix(&["n_steps"], &DIAG_HEADER), diags)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_sweep(
        &self,
        sys: &dyn DynSystem,
        net: &Network,
        n_steps: usize,
        metrics: &[Centrality],
        group_size: usize,
        explicit: Option<&[Vec<usize>]>,
        mean_over: MeanOver,
        out: &mut Sink,
    ) -> Result<()> {
        let sigma = self.sigma();
        let degree = centrality(net, Centrality::Degree)?;
        let closeness = centrality(net, Centrality::Closeness).ok();
        out.csv(
            "centrality.csv",
            &["node", "degree", "closeness"],
            (0..net.n())
                .map(|j| vec![(j + 1).to_string(), num(degree[j]), num(closeness.as_ref().map_or(f64::NAN, |c| c[j]))])
                .collect(),
        )?;

        let mut orderings: Vec<(&str, Vec<Vec<usize>>)> = Vec::new();
        match explicit {
            Some(g) => orderings.push(("explicit", g.to_vec())),
            None => {
                for &m in metrics {
                    let name = match m {
                        Centrality::Degree => "degree",
                        Centrality::Closeness => "closeness",
                    };
                    let groups = rank_subsets(net, m, group_size).map_err(|e| Error::config("experiment.metrics", e.to_string()))?;
                    orderings.push((name, groups));
                }
            }
        }
        // Identical groups under different orderings are estimated once.
        let mut cache: BTreeMap<Vec<usize>, GroupResult> = BTreeMap::new();
        let vars: Vec<&str> = self.variables.iter().map(String::as_str).collect();
        for (_, groups) in &orderings {
            let todo: Vec<Vec<usize>> = groups.iter().filter(|g| !cache.contains_key(*g)).cloned().collect();
            let done = subset_sweep(sys, &todo, &vars, n_steps, sigma, self.trials, self.seeds.noise_master, &self.opts, mean_over)?;
            for r in done {
                cache.insert(r.group.clone(), r);
            }
        }

        let mut rows = Vec::new();
        let mut var_rows = Vec::new();
        let mut diags = Vec::new();
        for (name, groups) in &orderings {
            for (rank, g) in groups.iter().enumerate() {
                let r = &cache[g];
                let ids = g.iter().map(|v| (v + 1).to_string()).collect::<Vec<_>>().join(" ");
                let prefix = [name.to_string(), (rank + 1).to_string()];
                if !r.valid {
                    out.problems.push(format!("{name} group {} ({ids}) is invalid", rank + 1));
                }
                let est = r.estimate.as_ref();
                rows.push(vec![
                    name.to_string(),
                    (rank + 1).to_string(),
                    ids,
                    num(r.mean_kappa),
                    num(r.spread),
                    r.valid.to_string(),
                    est.map_or(0, |e| e.n_trials).to_string(),
                    est.map_or(self.trials, |e| e.excluded).to_string(),
                    num(est.map_or(f64::NAN, |e| e.reliable_fraction)),
                    r.error.clone().unwrap_or_default(),
                ]);
                if let Some(est) = est {
                    for v in &est.per_variable {
                        var_rows.push(vec![
                            prefix[0].clone(),
                            prefix[1].clone(),
                            (v.label.node + 1).to_string(),
                            v.label.var.to_string(),
                            v.observed.to_string(),
                            num(v.kappa_hat),
                            num(v.std),
                        ]);
                    }
                    diags.extend(est.trials.iter().map(|t| diag_row(&prefix, sigma, t)));
                }
            }
        }
        out.csv(
            "groups.csv",
            &["ordering", "rank", "nodes", "mean_kappa", "spread", "valid", "n_trials", "excluded", "reliable_fraction", "error"],
            rows,
        )?;
        out.csv(
            "group_kappa.csv",
            &["ordering", "rank", "node", "variable", "observed", "kappa_hat", "std"],
            var_rows,
        )?;
        out.csv("diagnostics.csv", &with_prefix(&["ordering", "rank"], &DIAG_HEADER), diags)
    }

    fn run_scan(&self, sys: &dyn DynSystem, lengths: &[usize], sigmas: &[f64], out: &mut Sink) -> Result<()> {
        let scan = conditioning_scan(sys, lengths, sigmas, self.trials, self.seeds.noise_master, &self.opts)?;
        let labels: Vec<String> = scan.labels.iter().map(ToString::to_string).collect();

        let mut header: Vec<String> = ["n_steps", "sigma", "trial", "included", "reliable", "cond_c", "c_over_sigma"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(labels.iter().map(|l| format!("kappa_{l}")));
        let rows = scan
            .records
            .iter()
            .map(|r| {
                let t = &r.trial;
                let mut row = vec![
                    r.n_steps.to_string(),
                    num(r.sigma),
                    t.trial.to_string(),
                    t.included().to_string(),
                    t.reliable.to_string(),
                    num(t.cond_c),
                    num(r.digits_ratio()),
                ];
                row.extend((0..labels.len()).map(|k| num(t.ratios.get(k).copied().unwrap_or(f64::NAN))));
                row
            })
            .collect();
        out.csv_owned("scan_records.csv", &header, rows)?;

        let mut header: Vec<String> = ["n_steps", "sigma", "median_cond_c", "reliable_trials", "unreliable_trials", "excluded"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for group in ["all", "reliable", "unreliable"] {
            header.extend(labels.iter().map(|l| format!("kappa_{group}_{l}")));
        }
        let rows = scan
            .summaries
            .iter()
            .map(|s| {
                let mut row = vec![
                    s.n_steps.to_string(),
                    num(s.sigma),
                    num(s.median_cond_c),
                    s.reliable_trials.to_string(),
                    s.unreliable_trials.to_string(),
                    s.excluded.to_string(),
                ];
                for k in [&s.kappa_all, &s.kappa_reliable, &s.kappa_unreliable] {
                    row.extend(k.iter().map(|v| num(*v)));
                }
                row
            })
            .collect();
        out.csv_owned("scan_summary.csv", &header, rows)?;
        for s in &scan.summaries {
            if s.excluded as f64 > self.opts.max_excluded_fraction * self.trials as f64 {
                out.problems.push(format!("N = {}, sigma = {:e}: {} of {} trials excluded", s.n_steps, s.sigma, s.excluded, self.trials));
            }
        }
        let diags = scan
            .records
            .iter()
            .map(|r| diag_row(&[r.n_steps.to_string()], r.sigma, &r.trial))
            .collect();
        out.csv("diagnostics.csv", &with_prefix(&["n_steps"], &DIAG_HEADER), diags)
    }

    fn run_reconstruct(&self, sys: &dyn DynSystem, n_steps: usize, out: &mut Sink) -> Result<()> {
        let scheme = self.scheme(sys)?;
        let sigma = self.sigma();
        let truth = truth_trajectory(sys, n_steps, self.seeds.dynamics, 0, self.opts.burn_in)?;
        let noise_seed = rng::derive_seed(self.seeds.noise_master, Purpose::Noise, 0);
        let y = observe(&truth, &scheme, sigma, noise_seed)?;
        let init = trial_guess(sys, &scheme, &y, &truth, 0, self.seeds.noise_master, &self.opts)?;
        let rec = gauss_newton(sys, &scheme, &y, &init, &self.opts.gn)?;
        if !rec.converged {
            out.problems.push(format!("Gauss-Newton stopped without converging ({})", rec.stop.as_str()));
        }
        let labels = sys.labels();
        out.with_file("truth.csv", |w| write_trajectory_csv(&truth, labels, w))?;
        out.with_file("observations.csv", |w| y.write_csv(&scheme, w))?;
        out.with_file("reconstruction.csv", |w| rec.write_trajectory_csv(labels, w))?;
        out.csv("errors.csv", &ERROR_HEADER, error_rows(sys, &scheme, &truth, &rec, sigma))?;
        out.csv(
            "diagnostics.csv",
            &["iterations", "final_cost", "cond_c", "c_over_sigma", "reliable", "converged", "stop"],
            vec![vec![
                rec.iterations.to_string(),
                num(rec.final_cost),
                num(rec.cond_c),
                num(rec.cond_c / sigma),
                rec.reliable.to_string(),
                rec.converged.to_string(),
                rec.stop.as_str().to_string(),
            ]],
        )?;
        out.csv(
            "cost_history.csv",
            &["step", "cost"],
            rec.cost_history.iter().enumerate().map(|(i, c)| vec![i.to_string(), num(*c)]).collect(),
        )?;
        Ok(())
    }
}

fn resolve_network(n: &mut NetworkSection) -> Result<NetworkPlan> {
    let kind = need(n.kind.clone(), "network.kind")?;
    let only = |n: &NetworkSection, allowed: &[&str]| -> Result<()> {
        let present = [
            ("n", n.n.is_some()),
            ("edges", n.edges.is_some()),
            ("adjacency", n.adjacency.is_some()),
            ("path", n.path.is_some()),
            ("directed", n.directed.is_some()),
            ("p", n.p.is_some()),
            ("match_scale_free_m", n.match_scale_free_m.is_some()),
            ("connected", n.connected.is_some()),
            ("max_attempts", n.max_attempts.is_some()),
            ("m", n.m.is_some()),
        ];
        match present.iter().find(|(f, p)| *p && !allowed.contains(f)) {
            Some((f, _)) => Err(Error::config(format!("network.{f}"), format!("not used by network kind {kind}"))),
            None => Ok(()),
        }
    };
    let size = |n: &NetworkSection| -> Result<usize> {
        let v = need(n.n, "network.n")?;
        if v == 0 {
            return Err(Error::config("network.n", "must be at least 1"));
        }
        Ok(v)
    };
    Ok(match kind.as_str() {
        "edges" => {
            only(n, &["n", "edges", "directed"])?;
            NetworkPlan::Edges {
                n: size(n)?,
                edges: need(n.edges.clone(), "network.edges")?,
                directed: *n.directed.get_or_insert(false),
            }
        }
        "adjacency" => {
            only(n, &["adjacency", "directed"])?;
            NetworkPlan::Adjacency {
                rows: need(n.adjacency.clone(), "network.adjacency")?,
                directed: *n.directed.get_or_insert(false),
            }
        }
        "file" => {
            only(n, &["path", "directed"])?;
            NetworkPlan::File {
                path: PathBuf::from(need(n.path.clone(), "network.path")?),
                directed: *n.directed.get_or_insert(false),
            }
        }
        "path" => {
            only(n, &["n"])?;
            NetworkPlan::Path(size(n)?)
        }
        "complete" => {
            only(n, &["n"])?;
            NetworkPlan::Complete(size(n)?)
        }
        "scale_free" => {
            only(n, &["n", "m"])?;
            NetworkPlan::ScaleFree {
                n: size(n)?,
                m: *n.m.get_or_insert(2),
            }
        }
        "er" => {
            only(n, &["n", "p", "match_scale_free_m", "connected", "max_attempts"])?;
            let nodes = size(n)?;
            let (p, matched_m) = match (n.p, n.match_scale_free_m) {
                (Some(p), None) => (p, None),
                (None, Some(m)) => {
                    if m == 0 || m >= nodes {
                        return Err(Error::config("network.match_scale_free_m", "must satisfy 1 <= m < n"));
                    }
                    (density_matched_p(nodes, scale_free_edge_count(nodes, m)), Some(m))
                }
                _ => return Err(Error::config("network.p", "set exactly one of p and match_scale_free_m")),
            };
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("network.p", format!("must be in [0, 1], got {p}")));
            }
            NetworkPlan::ErdosRenyi {
                n: nodes,
                p,
                matched_m,
                connected: *n.connected.get_or_insert(false),
                max_attempts: *n.max_attempts.get_or_insert(1000),
            }
        }
        other => {
            return Err(Error::config(
                "network.kind",
                format!("unknown kind `{other}` (expected edges, adjacency, file, path, complete, er or scale_free)"),
            ))
        }
    })
}

// ---------------------------------------------------------------------------
// Output

/// Files written by a run and anything that makes its results suspect.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    /// Invalid estimates, failed trials beyond tolerance, non-convergence.
    pub problems: Vec<String>,
}

struct Sink {
    dir: PathBuf,
    files: Vec<PathBuf>,
    problems: Vec<String>,
}

impl Sink {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            problems: Vec::new(),
        }
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body)?;
        self.files.push(path);
        Ok(())
    }

    /// Creates `name` and hands the writer to `body`.
    fn with_file(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        self.with_file(name, |w| {
            let mut c = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
            c.write_record(header)?;
            for r in rows {
                c.write_record(&r)?;
            }
            c.flush()?;
            Ok(())
        })
    }

    fn csv_owned(&mut self, name: &str, header: &[String], rows: Vec<Vec<String>>) -> Result<()> {
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        self.csv(name, &h, rows)
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

const DIAG_HEADER: [&str; 11] = [
    "sigma",
    "trial",
    "included",
    "converged",
    "stop",
    "reliable",
    "cond_c",
    "c_over_sigma",
    "iterations",
    "final_cost",
    "failure",
];

const SUMMARY_HEADER: [&str; 7] = ["n_steps", "sigma", "requested", "n_trials", "excluded", "reliable_fraction", "valid"];

const ERROR_HEADER: [&str; 9] = [
    "node",
    "variable",
    "observed",
    "error_l2",
    "error_ratio",
    "error_first",
    "error_max",
    "truth_first",
    "recon_first",
];

fn with_prefix(prefix: &[&'static str], rest: &[&'static str]) -> Vec<&'static str> {
    prefix.iter().chain(rest).copied().collect()
}

fn diag_row(prefix: &[String], sigma: f64, t: &TrialRecord) -> Vec<String> {
    let mut row = prefix.to_vec();
    row.extend([
        num(sigma),
        t.trial.to_string(),
        t.included().to_string(),
        t.converged.to_string(),
        t.stop.map_or("failed", |s| s.as_str()).to_string(),
        t.reliable.to_string(),
        num(t.cond_c),
        num(t.cond_c / sigma),
        t.iterations.to_string(),
        num(t.final_cost),
        t.failure.clone().unwrap_or_default(),
    ]);
    row
}

fn summary_row(n_steps: usize, sigma: f64, est: Option<&KappaEstimate>) -> Vec<String> {
    match est {
        Some(e) => vec![
            n_steps.to_string(),
            num(sigma),
            e.requested.to_string(),
            e.n_trials.to_string(),
            e.excluded.to_string(),
            num(e.reliable_fraction),
            e.valid.to_string(),
        ],
        None => vec![n_steps.to_string(), num(sigma), String::new(), "0".into(), String::new(), num(f64::NAN), "false".into()],
    }
}

fn write_kappa_tables(out: &mut Sink, est: &KappaEstimate) -> Result<()> {
    let rows = est
        .per_variable
        .iter()
        .map(|v| {
            vec![
                (v.label.node + 1).to_string(),
                v.label.var.to_string(),
                v.observed.to_string(),
                num(v.kappa_hat),
                num(v.mean_ratio),
                num(v.std),
                num(v.kappa_hat / (est.n_steps as f64).sqrt()),
                v.n_trials.to_string(),
            ]
        })
        .collect();
    out.csv(
        "kappa.csv",
        &["node", "variable", "observed", "kappa_hat", "mean_ratio", "std", "per_step", "n_trials"],
        rows,
    )?;
    let rows = est
        .node_kappa()
        .into_iter()
        .map(|(node, k)| {
            let observed = est.per_variable.iter().any(|v| v.label.node == node && v.observed);
            vec![(node + 1).to_string(), observed.to_string(), num(k)]
        })
        .collect();
    out.csv("nodes.csv", &["node", "observed", "kappa"], rows)
}

fn error_rows(sys: &dyn DynSystem, scheme: &ObsScheme, truth: &Trajectory, rec: &ReconResult, sigma: f64) -> Vec<Vec<String>> {
    sys.labels()
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let errs: Vec<f64> = rec.z.component(k).zip(truth.component(k)).map(|(z, x)| z - x).collect();
            let l2 = errs.iter().map(|e| e * e).sum::<f64>().sqrt();
            vec![
                (l.node + 1).to_string(),
                l.var.to_string(),
                scheme.observes(k).to_string(),
                num(l2),
                num(if sigma > 0.0 { l2 / sigma } else { f64::NAN }),
                num(errs[0]),
                num(errs.iter().fold(0.0f64, |m, e| m.max(e.abs()))),
                num(truth.state(0)[k]),
                num(rec.z.state(0)[k]),
            ]
        })
        .collect()
}
