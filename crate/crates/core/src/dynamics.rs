//! Discrete-time network dynamics on a flat state vector.
//!
//! Every system exposes a one-step map, its analytic Jacobian and a label
//! per coordinate. Coordinates are node-major: `(x1, y1, x2, y2, ...)`.
//! Continuous-time models are discretized by fixed-step RK4 and their
//! Jacobian is the exact derivative of that discrete map.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::rng::{self, Purpose};

/// Binds a flat coordinate to a `(node, variable)` pair. Nodes are 0-based;
/// the display form is 1-based (`x1`, `w8`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarLabel {
    pub node: usize,
    pub var: &'static str,
}

impl fmt::Display for VarLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.var, self.node + 1)
    }
}

fn node_labels(n: usize, vars: &[&'static str]) -> Vec<VarLabel> {
    (0..n)
        .flat_map(|node| vars.iter().map(move |&var| VarLabel { node, var }))
        .collect()
}

/// A discrete-time map `x_{t+1} = step(x_t, t)` with Jacobian.
pub trait DynSystem: Send + Sync {
    fn dim(&self) -> usize;

    fn step(&self, x: &[f64], t: usize) -> Vec<f64>;

    /// `d step / d x` at `(x, t)`, `dim x dim`.
    fn jacobian(&self, x: &[f64], t: usize) -> DMatrix<f64>;

    fn labels(&self) -> &[VarLabel];

    /// Short family tag used in output metadata.
    fn family(&self) -> &'static str;

    /// True when the Jacobian does not depend on the state.
    fn is_linear(&self) -> bool {
        false
    }

    /// A starting point for burn-in. Uniform on `[-1, 1]^dim` by default.
    fn random_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

/// A length-`N` run of a system, time-major. Row `i` is the state at global
/// time index `t0 + i`, which matters for time-dependent systems.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t0: usize,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(t0: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                context: "trajectory states",
                expected: dim,
                got: states.len(),
            });
        }
        Ok(Self { t0, dim, states })
    }

    pub fn from_rows(t0: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("ragged trajectory rows".into()));
        }
        Self::new(t0, dim, rows.concat())
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn state_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// All states stacked as `(z_1, ..., z_N)`.
    pub fn as_slice(&self) -> &[f64] {
        &self.states
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.states
    }

    /// Time series of coordinate `k`.
    pub fn component(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().skip(k).step_by(self.dim).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.states.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Iterates `burn_in` discarded steps from `x0`, then records `n` states.
pub fn simulate(sys: &dyn DynSystem, x0: &[f64], n: usize, burn_in: usize) -> Result<Trajectory> {
    simulate_from(sys, x0, 0, n, burn_in)
}

/// Like [`simulate`] but with `x0` placed at global time `t_start`.
pub fn simulate_from(
    sys: &dyn DynSystem,
    x0: &[f64],
    t_start: usize,
    n: usize,
    burn_in: usize,
) -> Result<Trajectory> {
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory length must be at least 2, got {n}"
        )));
    }
    let mut x = x0.to_vec();
    for s in 0..burn_in {
        x = sys.step(&x, t_start + s);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: s + 1 });
        }
    }
    let t0 = t_start + burn_in;
    let mut states = Vec::with_capacity(n * sys.dim());
    states.extend_from_slice(&x);
    for i in 1..n {
        x = sys.step(&x, t0 + i - 1);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: burn_in + i });
        }
        states.extend_from_slice(&x);
    }
    Trajectory::new(t0, sys.dim(), states)
}

/// Seeded random start followed by burn-in: a state on (or near) the attractor.
pub fn attractor_state(sys: &dyn DynSystem, seed: u64, burn_in: usize) -> Result<Vec<f64>> {
    let mut rng = rng::stream(seed, Purpose::Truth, 0);
    let x0 = sys.random_state(&mut rng);
    let traj = simulate(sys, &x0, 2, burn_in)?;
    Ok(traj.state(0).to_vec())
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

// ---------------------------------------------------------------------------
// Hénon-type coupled map network

#[derive(Debug, Clone, PartialEq)]
pub struct HenonParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl HenonParams {
    /// `a_j = 2.2`, `b_j = 0.4` at every node.
    pub fn standard(n: usize, c: f64) -> Self {
        Self {
            a: vec![2.2; n],
            b: vec![0.4; n],
            c,
        }
    }
}

/// `x'_j = a_j cos x_j + b_j y_j + c sum_k A_jk x_k`, `y'_j = x_j`.
#[derive(Debug, Clone)]
pub struct HenonNetwork {
    params: HenonParams,
    adjacency: DMatrix<f64>,
    labels: Vec<VarLabel>,
}

pub fn henon_network(net: &Network, params: HenonParams) -> Result<HenonNetwork> {
    check_len("henon a", net.n(), params.a.len())?;
    check_len("henon b", net.n(), params.b.len())?;
    Ok(HenonNetwork {
        params,
        adjacency: net.adjacency().clone(),
        labels: node_labels(net.n(), &["x", "y"]),
    })
}

impl HenonNetwork {
    pub fn params(&self) -> &HenonParams {
        &self.params
    }
}

impl DynSystem for HenonNetwork {
    fn dim(&self) -> usize {
        2 * self.adjacency.nrows()
    }

    fn step(&self, s: &[f64], _t: usize) -> Vec<f64> {
        let n = self.adjacency.nrows();
        let mut out = vec![0.0; 2 * n];
        for j in 0..n {
            let (x, y) = (s[2 * j], s[2 * j + 1]);
            let coupling: f64 = (0..n)
                .map(|k| self.adjacency[(j, k)] * s[2 * k])
                .sum();
            out[2 * j] = self.params.a[j] * x.cos() + self.params.b[j] * y + self.params.c * coupling;
            out[2 * j + 1] = x;
        }
        out
    }

    fn jacobian(&self, s: &[f64], _t: usize) -> DMatrix<f64> {
        let n = self.adjacency.nrows();
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for j in 0..n {
            for k in 0..n {
                jac[(2 * j, 2 * k)] = self.params.c * self.adjacency[(j, k)];
            }
            jac[(2 * j, 2 * j)] += -self.params.a[j] * s[2 * j].sin();
            jac[(2 * j, 2 * j + 1)] = self.params.b[j];
            jac[(2 * j + 1, 2 * j)] = 1.0;
        }
        jac
    }

    fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    fn family(&self) -> &'static str {
        "henon"
    }
}

// ---------------------------------------------------------------------------
// FitzHugh–Nagumo network sampled by RK4

/// Classical fourth-order Runge–Kutta step of `x' = field(x)`.
pub fn rk4_step<F>(field: F, state: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let shifted = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(b, k)| b + s * k).collect()
    };
    let k1 = field(state);
    let k2 = field(&shifted(state, &k1, h / 2.0));
    let k3 = field(&shifted(state, &k2, h / 2.0));
    let k4 = field(&shifted(state, &k3, h));
    (0..state.len())
        .map(|i| state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhnNodeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub i: f64,
}

impl Default for FhnNodeParams {
    fn default() -> Self {
        Self {
            a: 0.42,
            b: 0.8,
            c: 0.08,
            d: 0.01,
            i: -0.025,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhnParams {
    pub nominal: FhnNodeParams,
    pub g: f64,
    /// Half-width of the uniform relative spread applied per node and parameter.
    pub jitter: f64,
    pub dt: f64,
    pub substeps: usize,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self {
            nominal: FhnNodeParams::default(),
            g: 0.1,
            jitter: 0.05,
            dt: 0.1,
            substeps: 1,
        }
    }
}

/// `v' = -w + d v - v^3/3 + I + g sum_k A_jk v_k`, `w' = a - b w + c v`,
/// advanced `substeps` RK4 steps per sample interval `dt`.
#[derive(Debug, Clone)]
pub struct FhnNetwork {
    nodes: Vec<FhnNodeParams>,
    g: f64,
    dt: f64,
    substeps: usize,
    adjacency: DMatrix<f64>,
    labels: Vec<VarLabel>,
}

pub fn fhn_network(net: &Network, params: &FhnParams, seed: u64) -> Result<FhnNetwork> {
    if !(params.dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {}", params.dt)));
    }
    if params.substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    if !(params.jitter >= 0.0) {
        return Err(Error::InvalidArgument(format!("jitter must be non-negative, got {}", params.jitter)));
    }
    let mut rng = rng::stream(seed, Purpose::Params, 0);
    let nom = params.nominal;
    let mut spread = |v: f64| {
        if params.jitter == 0.0 {
            v
        } else {
            v * (1.0 + rng.random_range(-params.jitter..=params.jitter))
        }
    };
    let nodes = (0..net.n())
        .map(|_| FhnNodeParams {
            a: spread(nom.a),
            b: spread(nom.b),
            c: spread(nom.c),
            d: spread(nom.d),
            i: spread(nom.i),
        })
        .collect();
    FhnNetwork::with_node_params(net, nodes, params.g, params.dt, params.substeps)
}

impl FhnNetwork {
    pub fn with_node_params(
        net: &Network,
        nodes: Vec<FhnNodeParams>,
        g: f64,
        dt: f64,
        substeps: usize,
    ) -> Result<Self> {
        check_len("fhn node parameters", net.n(), nodes.len())?;
        if !(dt > 0.0) || substeps == 0 {
            return Err(Error::InvalidArgument("need dt > 0 and substeps >= 1".into()));
        }
        Ok(Self {
            nodes,
            g,
            dt,
            substeps,
            adjacency: net.adjacency().clone(),
            labels: node_labels(net.n(), &["v", "w"]),
        })
    }

    pub fn node_params(&self) -> &[FhnNodeParams] {
        &self.nodes
    }

    /// The continuous vector field.
    pub fn field(&self, s: &[f64]) -> Vec<f64> {
        let n = self.nodes.len();
        let mut out = vec![0.0; 2 * n];
        for (j, p) in self.nodes.iter().enumerate() {
            let (v, w) = (s[2 * j], s[2 * j + 1]);
            let coupling: f64 = (0..n)
                .map(|k| self.adjacency[(j, k)] * s[2 * k])
                .sum();
            out[2 * j] = -w + p.d * v - v * v * v / 3.0 + p.i + self.g * coupling;
            out[2 * j + 1] = p.a - p.b * w + p.c * v;
        }
        out
    }

    fn field_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for (j, p) in self.nodes.iter().enumerate() {
            for k in 0..n {
                jac[(2 * j, 2 * k)] = self.g * self.adjacency[(j, k)];
            }
            let v = s[2 * j];
            jac[(2 * j, 2 * j)] += p.d - v * v;
            jac[(2 * j, 2 * j + 1)] = -1.0;
            jac[(2 * j + 1, 2 * j)] = p.c;
            jac[(2 * j + 1, 2 * j + 1)] = -p.b;
        }
        jac
    }

    fn h(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    /// One RK4 step together with its exact Jacobian, chained through the
    /// four stages.
    fn rk4_with_jacobian(&self, x: &[f64], h: f64) -> (Vec<f64>, DMatrix<f64>) {
        let d = x.len();
        let eye = DMatrix::<f64>::identity(d, d);
        let shifted = |k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(b, k)| b + s * k).collect() };

        let k1 = self.field(x);
        let dk1 = self.field_jacobian(x);
        let x2 = shifted(&k1, h / 2.0);
        let k2 = self.field(&x2);
        let dk2 = self.field_jacobian(&x2) * (&eye + &dk1 * (h / 2.0));
        let x3 = shifted(&k2, h / 2.0);
        let k3 = self.field(&x3);
        let dk3 = self.field_jacobian(&x3) * (&eye + &dk2 * (h / 2.0));
        let x4 = shifted(&k3, h);
        let k4 = self.field(&x4);
        let dk4 = self.field_jacobian(&x4) * (&eye + &dk3 * h);

        let next = (0..d)
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        let jac = eye + (dk1 + dk2 * 2.0 + dk3 * 2.0 + dk4) * (h / 6.0);
        (next, jac)
    }
}

impl DynSystem for FhnNetwork {
    fn dim(&self) -> usize {
        2 * self.nodes.len()
    }

    fn step(&self, s: &[f64], _t: usize) -> Vec<f64> {
        let h = self.h();
        let mut x = s.to_vec();
        for _ in 0..self.substeps {
            x = rk4_step(|y| self.field(y), &x, h);
        }
        x
    }

    fn jacobian(&self, s: &[f64], _t: usize) -> DMatrix<f64> {
        let h = self.h();
        let mut x = s.to_vec();
        let mut jac = DMatrix::identity(s.len(), s.len());
        for _ in 0..self.substeps {
            let (next, j) = self.rk4_with_jacobian(&x, h);
            jac = j * jac;
            x = next;
        }
        jac
    }

    fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    fn family(&self) -> &'static str {
        "fhn"
    }

    fn random_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.nodes.len())
            .flat_map(|_| [rng.random_range(-2.0..=2.0), rng.random_range(-0.5..=1.5)])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Linear and random-matrix maps. Each coordinate is its own node, variable `x`.

/// `x' = M x`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    m: DMatrix<f64>,
    labels: Vec<VarLabel>,
}

pub fn linear_map(m: DMatrix<f64>) -> Result<LinearMap> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "linear map needs a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let labels = node_labels(m.nrows(), &["x"]);
    Ok(LinearMap { m, labels })
}

impl LinearMap {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl DynSystem for LinearMap {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn step(&self, x: &[f64], _t: usize) -> Vec<f64> {
        let d = self.m.nrows();
        (0..d)
            .map(|i| (0..d).map(|k| self.m[(i, k)] * x[k]).sum())
            .collect()
    }

    fn jacobian(&self, _x: &[f64], _t: usize) -> DMatrix<f64> {
        self.m.clone()
    }

    fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    fn family(&self) -> &'static str {
        "linear"
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// `x_{t+1} = M_t x_t` with i.i.d. `N(0, scale^2)` entries in every `M_t`.
/// `M_t` is drawn from its own counter-based stream, so any time index can
/// be evaluated without replaying the sequence.
#[derive(Debug, Clone)]
pub struct RandomMatrixSystem {
    dim: usize,
    seed: u64,
    scale: f64,
    labels: Vec<VarLabel>,
}

pub fn random_matrix_system(dim: usize, seed: u64, scale: f64) -> Result<RandomMatrixSystem> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    Ok(RandomMatrixSystem {
        dim,
        seed,
        scale,
        labels: node_labels(dim, &["x"]),
    })
}

impl RandomMatrixSystem {
    pub fn matrix_at(&self, t: usize) -> DMatrix<f64> {
        let mut rng = rng::stream(self.seed, Purpose::Matrices, t as u64);
        DMatrix::from_fn(self.dim, self.dim, |_, _| {
            self.scale * rng.sample::<f64, _>(StandardNormal)
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl DynSystem for RandomMatrixSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn step(&self, x: &[f64], t: usize) -> Vec<f64> {
        let m = self.matrix_at(t);
        (0..self.dim)
            .map(|i| (0..self.dim).map(|k| m[(i, k)] * x[k]).sum())
            .collect()
    }

    fn jacobian(&self, _x: &[f64], t: usize) -> DMatrix<f64> {
        self.matrix_at(t)
    }

    fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    fn family(&self) -> &'static str {
        "random_matrix"
    }

    fn is_linear(&self) -> bool {
        true
    }
}
