//! Time-varying directed communication graphs.
//!
//! A round's graph is represented by its column-stochastic mixing matrix:
//! entry `(i, j)` is the weight node `i` applies to the message it receives
//! from node `j`, so column `j` is how node `j` splits what it sends. A
//! sender always keeps a share for itself and splits its mass uniformly
//! over itself and its receivers.

use std::collections::VecDeque;

use thiserror::Error;

/// Column sums must equal one within this tolerance.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("mixing weight ({row}, {col}) = {value} is negative")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("column {0} sums to {1}, expected 1")]
    ColumnSumViolation(usize, f64),
    #[error("node {0} has no self-loop (diagonal weight is zero)")]
    MissingSelfLoop(usize),
    #[error("matrix is not square: expected {expected} entries, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("explicit schedules must share one node count (found {0} and {1})")]
    NodeCountMismatch(usize, usize),
    #[error("graph schedule is empty")]
    EmptySchedule,
    #[error(
        "n * eps_min^(diameter * window) = {0} exceeds 1; the contraction bound does not apply"
    )]
    InvalidRegime(f64),
    #[error("invalid topology parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, TopologyError>;

/// A dense `n × n` column-stochastic mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Vec<f64>,
}

impl MixingMatrix {
    /// Builds a matrix from row-major rows and validates it.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut weights = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(TopologyError::Shape {
                    expected: n,
                    found: row.len(),
                });
            }
            weights.extend_from_slice(row);
        }
        let matrix = Self { n, weights };
        validate_column_stochastic(&matrix)?;
        Ok(matrix)
    }

    /// Wraps row-major weights without validation.
    pub fn from_raw(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(TopologyError::Shape {
                expected: n * n,
                found: weights.len(),
            });
        }
        Ok(Self { n, weights })
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self { n, weights }
    }

    /// Each sender `j` keeps a share and pushes equal shares to every node in
    /// `receivers(j)`.
    fn from_out_neighbors<F>(n: usize, receivers: F) -> Self
    where
        F: Fn(usize) -> Vec<usize>,
    {
        let mut weights = vec![0.0; n * n];
        for sender in 0..n {
            let mut targets = receivers(sender);
            targets.retain(|&r| r != sender);
            targets.sort_unstable();
            targets.dedup();
            let share = 1.0 / (targets.len() + 1) as f64;
            weights[sender * n + sender] = share;
            for r in targets {
                weights[r * n + sender] = share;
            }
        }
        Self { n, weights }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.n..(row + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn column_sum(&self, col: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, col)).sum()
    }

    /// Directed edges `j -> i` for every positive off-diagonal weight.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |i| {
            (0..n)
                .filter(move |&j| i != j && self.get(i, j) > 0.0)
                .map(move |j| (j, i))
        })
    }

    pub fn min_positive_weight(&self) -> Option<f64> {
        self.weights
            .iter()
            .copied()
            .filter(|&w| w > 0.0)
            .min_by(f64::total_cmp)
    }

    /// `y = P v` for a vector of per-node scalars.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(p, x)| p * x).sum())
            .collect()
    }
}

/// Checks nonnegativity, unit column sums and positive diagonal, in that
/// order, reporting the first offending index.
pub fn validate_column_stochastic(p: &MixingMatrix) -> Result<()> {
    let n = p.n;
    for i in 0..n {
        for j in 0..n {
            let value = p.get(i, j);
            if value < 0.0 || value.is_nan() {
                return Err(TopologyError::NegativeWeight {
                    row: i,
                    col: j,
                    value,
                });
            }
        }
    }
    for j in 0..n {
        let sum = p.column_sum(j);
        if (sum - 1.0).abs() > COLUMN_SUM_TOLERANCE {
            return Err(TopologyError::ColumnSumViolation(j, sum));
        }
    }
    for i in 0..n {
        if p.get(i, i) <= 0.0 {
            return Err(TopologyError::MissingSelfLoop(i));
        }
    }
    Ok(())
}

/// Number of distinct hop lengths `2^0, .., 2^⌊log₂(n−1)⌋` of the
/// exponential graph; 1 when `n <= 2`.
pub fn exponential_period(n: usize) -> usize {
    if n <= 2 {
        1
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Time-varying directed exponential graph: at step `k` node `i` sends only
/// to `(i + 2^{k mod m}) mod n`.
pub fn exponential_graph(n: usize, k: usize) -> MixingMatrix {
    if n <= 1 {
        return MixingMatrix::identity(n);
    }
    let hop = 1usize << (k % exponential_period(n));
    MixingMatrix::from_out_neighbors(n, |i| vec![(i + hop) % n])
}

/// Static directed ring `i -> i+1`.
pub fn ring_graph(n: usize) -> MixingMatrix {
    if n <= 1 {
        return MixingMatrix::identity(n);
    }
    MixingMatrix::from_out_neighbors(n, |i| vec![(i + 1) % n])
}

/// Fully connected graph with uniform weights `1/n`.
pub fn complete_graph(n: usize) -> MixingMatrix {
    MixingMatrix::from_out_neighbors(n, |i| (0..n).filter(|&j| j != i).collect())
}

/// A periodic sequence of mixing matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSchedule {
    Exponential {
        n: usize,
    },
    Ring {
        n: usize,
    },
    Complete {
        n: usize,
    },
    /// Repeats the listed matrices cyclically.
    Explicit(Vec<MixingMatrix>),
}

impl GraphSchedule {
    /// Resolves `"exponential"`, `"ring"` or `"complete"`.
    pub fn by_name(name: &str, n: usize) -> Result<Self> {
        match name {
            "exponential" => Ok(Self::Exponential { n }),
            "ring" => Ok(Self::Ring { n }),
            "complete" => Ok(Self::Complete { n }),
            other => Err(TopologyError::InvalidParameter(format!(
                "unknown graph {other:?} (expected exponential, ring or complete)"
            ))),
        }
    }

    pub fn explicit(matrices: Vec<MixingMatrix>) -> Result<Self> {
        let first = matrices.first().ok_or(TopologyError::EmptySchedule)?;
        let n = first.n();
        for m in &matrices {
            if m.n() != n {
                return Err(TopologyError::NodeCountMismatch(n, m.n()));
            }
            validate_column_stochastic(m)?;
        }
        Ok(Self::Explicit(matrices))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exponential { .. } => "exponential",
            Self::Ring { .. } => "ring",
            Self::Complete { .. } => "complete",
            Self::Explicit(_) => "explicit",
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Exponential { n } | Self::Ring { n } | Self::Complete { n } => *n,
            Self::Explicit(ms) => ms.first().map_or(0, MixingMatrix::n),
        }
    }

    pub fn period(&self) -> usize {
        match self {
            Self::Exponential { n } => exponential_period(*n),
            Self::Ring { .. } | Self::Complete { .. } => 1,
            Self::Explicit(ms) => ms.len().max(1),
        }
    }

    pub fn matrix_at(&self, k: usize) -> MixingMatrix {
        match self {
            Self::Exponential { n } => exponential_graph(*n, k),
            Self::Ring { n } => ring_graph(*n),
            Self::Complete { n } => complete_graph(*n),
            Self::Explicit(ms) => ms[k % ms.len()].clone(),
        }
    }

    /// One full period of matrices, `matrix_at(0..period)`.
    pub fn one_period(&self) -> Vec<MixingMatrix> {
        (0..self.period()).map(|k| self.matrix_at(k)).collect()
    }

    pub fn min_positive_weight(&self) -> Option<f64> {
        self.one_period()
            .iter()
            .filter_map(MixingMatrix::min_positive_weight)
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectivityReport {
    pub is_b_connected: bool,
    pub window: usize,
    /// Largest diameter over all windows; meaningful only when connected.
    pub diameter: usize,
}

/// Checks that the union of every `window` consecutive edge sets is strongly
/// connected.
///
/// The schedule is periodic, so windows are examined over `lcm(period,
/// window)` iterations, which covers every distinct window alignment.
pub fn check_b_strong_connectivity(schedule: &GraphSchedule, window: usize) -> ConnectivityReport {
    assert!(window >= 1, "connectivity window must be at least 1");
    let n = schedule.n();
    let period = schedule.period();
    let span = lcm(period, window);
    let mut connected = true;
    let mut diameter = 0;
    for start in (0..span).step_by(window) {
        let mut adjacency = vec![Vec::new(); n];
        for k in start..start + window {
            for (from, to) in schedule.matrix_at(k).edges() {
                adjacency[from].push(to);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        match union_diameter(&adjacency) {
            Some(d) => diameter = diameter.max(d),
            None => connected = false,
        }
    }
    ConnectivityReport {
        is_b_connected: connected,
        window,
        diameter,
    }
}

/// Smallest window (up to `max_window`) for which the schedule is
/// B-strongly connected.
pub fn smallest_connected_window(
    schedule: &GraphSchedule,
    max_window: usize,
) -> Option<ConnectivityReport> {
    (1..=max_window)
        .map(|b| check_b_strong_connectivity(schedule, b))
        .find(|r| r.is_b_connected)
}

/// All-pairs BFS; `None` if some node cannot reach another.
fn union_diameter(adjacency: &[Vec<usize>]) -> Option<usize> {
    let n = adjacency.len();
    let mut diameter = 0;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    for source in 0..n {
        dist.fill(usize::MAX);
        dist[source] = 0;
        queue.clear();
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &d in &dist {
            if d == usize::MAX {
                return None;
            }
            diameter = diameter.max(d);
        }
    }
    Some(diameter)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Consensus-rate constants of the push-sum contraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConstants {
    pub eps_min: f64,
    /// `1 − n·eps_min^{ΔB}`
    pub lambda: f64,
    /// `λ^{1/(ΔB+1)}`
    pub q: f64,
    /// `2√d·eps_min^{−ΔB} / λ^{(ΔB+2)/(ΔB+1)}`; infinite when `λ = 0`.
    pub psi_bound: f64,
}

pub fn spectral_constants(
    n: usize,
    eps_min: f64,
    window: usize,
    diameter: usize,
    dim: usize,
) -> Result<SpectralConstants> {
    if !(eps_min > 0.0 && eps_min <= 1.0) {
        return Err(TopologyError::InvalidParameter(format!(
            "eps_min must lie in (0, 1], got {eps_min}"
        )));
    }
    let hops = diameter * window;
    if hops == 0 {
        return Err(TopologyError::InvalidParameter(
            "diameter * window must be at least 1".into(),
        ));
    }
    let hops_f = hops as f64;
    let reach = n as f64 * eps_min.powf(hops_f);
    if reach > 1.0 {
        return Err(TopologyError::InvalidRegime(reach));
    }
    let lambda = 1.0 - reach;
    let q = lambda.powf(1.0 / (hops_f + 1.0));
    let psi_bound = 2.0 * (dim as f64).sqrt() * eps_min.powf(-hops_f)
        / lambda.powf((hops_f + 2.0) / (hops_f + 1.0));
    Ok(SpectralConstants {
        eps_min,
        lambda,
        q,
        psi_bound,
    })
}

/// Connectivity and contraction constants for a schedule, or `None` when
/// no window up to `max_window` connects it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphDiagnostics {
    pub connectivity: ConnectivityReport,
    pub constants: Option<SpectralConstants>,
}

pub fn graph_diagnostics(
    schedule: &GraphSchedule,
    dim: usize,
    max_window: usize,
) -> Option<GraphDiagnostics> {
    let connectivity = smallest_connected_window(schedule, max_window)?;
    let eps_min = schedule.min_positive_weight()?;
    let constants = spectral_constants(
        schedule.n(),
        eps_min,
        connectivity.window,
        connectivity.diameter.max(1),
        dim,
    )
    .ok();
    Some(GraphDiagnostics {
        connectivity,
        constants,
    })
}
