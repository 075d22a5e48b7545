//! Observation operators that select scalar coordinates at a node subset,
//! and noisy observations of a trajectory.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{DynSystem, Trajectory, VarLabel};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Coordinate selection `h(x)[m] = x[indices[m]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObsScheme {
    indices: Vec<usize>,
    labels: Vec<VarLabel>,
    dim: usize,
}

impl ObsScheme {
    /// Selects explicit flat coordinates of a `dim`-dimensional state.
    pub fn from_indices(sys: &dyn DynSystem, indices: Vec<usize>) -> Result<Self> {
        let dim = sys.dim();
        if indices.is_empty() {
            return Err(Error::InvalidArgument("observation scheme is empty".into()));
        }
        for (m, &k) in indices.iter().enumerate() {
            if k >= dim {
                return Err(Error::InvalidArgument(format!(
                    "observed index {k} outside state dimension {dim}"
                )));
            }
            if indices[..m].contains(&k) {
                return Err(Error::InvalidArgument(format!("observed index {k} repeated")));
            }
        }
        let labels = indices.iter().map(|&k| sys.labels()[k]).collect();
        Ok(Self {
            indices,
            labels,
            dim,
        })
    }

    /// Every coordinate observed.
    pub fn full(sys: &dyn DynSystem) -> Self {
        Self {
            indices: (0..sys.dim()).collect(),
            labels: sys.labels().to_vec(),
            dim: sys.dim(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    pub fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.dim
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&k| x[k]).collect()
    }

    pub fn observes(&self, k: usize) -> bool {
        self.indices.contains(&k)
    }

    /// Nodes with at least one observed variable.
    pub fn nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.labels.iter().map(|l| l.node).collect();
        nodes.dedup();
        nodes
    }
}

/// Observes `variables` at each node of `nodes` (0-based). Indices come out
/// ordered by node, then by the system's variable order.
pub fn select_nodes(sys: &dyn DynSystem, nodes: &[usize], variables: &[&str]) -> Result<ObsScheme> {
    if nodes.is_empty() {
        return Err(Error::InvalidArgument("no observed nodes".into()));
    }
    if variables.is_empty() {
        return Err(Error::InvalidArgument("no observed variables".into()));
    }
    let labels = sys.labels();
    let n_nodes = labels.iter().map(|l| l.node + 1).max().unwrap_or(0);
    if let Some(&bad) = nodes.iter().find(|&&j| j >= n_nodes) {
        return Err(Error::UnknownNode(bad));
    }
    if let Some(bad) = variables
        .iter()
        .find(|v| !labels.iter().any(|l| l.var == **v))
    {
        return Err(Error::UnknownVariable((*bad).to_string()));
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let indices = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| sorted.contains(&l.node) && variables.contains(&l.var))
        .map(|(k, _)| k)
        .collect();
    ObsScheme::from_indices(sys, indices)
}

/// Noisy observations `y_i = h(x_i) + eps_i`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub t0: usize,
    pub obs_dim: usize,
    pub values: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.values.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    /// Writes `t` followed by one column per observed label.
    pub fn write_csv<W: Write>(&self, scheme: &ObsScheme, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(scheme.labels().iter().map(ToString::to_string));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![(self.t0 + i).to_string()];
            rec.extend(self.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads observations written by [`Observations::write_csv`]. The header
    /// must name exactly the scheme's labels, in order.
    pub fn read_csv<R: Read>(scheme: &ObsScheme, sigma: f64, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain(scheme.labels().iter().map(ToString::to_string))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Parse(format!(
                "observation header {:?} does not match {:?}",
                header.iter().collect::<Vec<_>>(),
                expected
            )));
        }
        let mut t0 = None;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let t: usize = rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad time index `{}`", &rec[0])))?;
            let t_first = *t0.get_or_insert(t);
            if t != t_first + values.len() / scheme.obs_dim() {
                return Err(Error::Parse(format!("time index {t} out of sequence")));
            }
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad value `{field}`")))?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("non-finite observation at t = {t}")));
                }
                values.push(v);
            }
        }
        Ok(Self {
            t0: t0.unwrap_or(0),
            obs_dim: scheme.obs_dim(),
            values,
            sigma,
            seed: 0,
        })
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every observed scalar.
pub fn observe(traj: &Trajectory, scheme: &ObsScheme, sigma: f64, seed: u64) -> Result<Observations> {
    if traj.dim() != scheme.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "observed trajectory",
            expected: scheme.state_dim(),
            got: traj.dim(),
        });
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {sigma}")));
    }
    if !traj.is_finite() {
        return Err(Error::InvalidArgument("trajectory is not finite".into()));
    }
    let mut rng = rng::stream(seed, Purpose::Noise, 0);
    let mut values = Vec::with_capacity(traj.len() * scheme.obs_dim());
    for i in 0..traj.len() {
        for v in scheme.apply(traj.state(i)) {
            let eps: f64 = rng.sample(StandardNormal);
            values.push(v + sigma * eps);
        }
    }
    Ok(Observations {
        t0: traj.t0(),
        obs_dim: scheme.obs_dim(),
        values,
        sigma,
        seed,
    })
}
