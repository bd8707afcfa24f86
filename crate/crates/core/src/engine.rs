//! Synchronous decentralized training loop.
//!
//! Each round every node samples one local record, clips its stochastic
//! gradient at the de-biased iterate `z_i`, adds Gaussian noise, takes a
//! local step, and then all nodes mix `(x_i, w_i)` through the round's
//! column-stochastic matrix and de-bias with `z_i = x_i / w_i`.
//!
//! Per-node work within a round runs on a rayon pool; mixing is a barrier.
//! Every node owns two ChaCha8 streams derived from the master seed (one
//! for sampling, one for noise), so results do not depend on how many
//! workers run the round or in which order nodes finish.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::accountant::PrivacySpec;
use crate::metrics::{consensus_error, FinalEval, MetricsLog, RoundStats};
use crate::models::norm;
use crate::schedule::StepTable;
use crate::topology::{validate_column_stochastic, GraphSchedule, MixingMatrix, TopologyError};

/// Push-sum weights at or below this are treated as collapsed.
pub const DEGENERATE_WEIGHT: f64 = 1e-300;

const SAMPLING_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("push-sum weight of node {node} collapsed to {weight}")]
    DegenerateWeight { node: usize, weight: f64 },
    #[error("node {node} has a non-finite parameter after iteration {iteration}; the step size is probably too large")]
    NonFiniteParameter { node: usize, iteration: usize },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Anything that can hand out per-sample gradients for a set of nodes.
pub trait Task: Sync {
    fn dim(&self) -> usize;
    fn nodes(&self) -> usize;
    /// Number of records `J` held by each node.
    fn local_size(&self) -> usize;
    /// Writes `∇f_node(params; record index)` into `grad`.
    fn sample_gradient(&self, node: usize, index: usize, params: &[f64], grad: &mut [f64]);
    /// Global loss and gradient at `params`.
    fn objective(&self, params: &[f64]) -> (f64, Vec<f64>);
    fn accuracy(&self, _params: &[f64]) -> Option<f64> {
        None
    }
    fn initial_params(&self, _seed: u64) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

/// The push-sum triple of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub x: Vec<f64>,
    pub w: f64,
    pub z: Vec<f64>,
}

impl NodeState {
    pub fn new(x: Vec<f64>) -> Self {
        Self {
            z: x.clone(),
            x,
            w: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initialization {
    /// `Task::initial_params(seed)` on every node.
    Task,
    Zeros,
    Shared(Vec<f64>),
    PerNode(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub seed: u64,
    pub steps: StepTable,
    pub graph: GraphSchedule,
    /// When false, no noise is drawn or added regardless of `steps`.
    pub noise_enabled: bool,
    pub init: Initialization,
    /// Worker threads for per-node work; 0 uses all available cores.
    pub workers: usize,
}

/// Step size and horizon tied to the network size and budget:
/// `γ = 1/(√n J μ_tot)` and `γK = √n J μ_tot`, i.e. `K = n J² μ_tot²`.
pub fn network_size_step_rule(nodes: usize, privacy: &PrivacySpec) -> (f64, usize) {
    let scale = (nodes as f64).sqrt() * privacy.local_size as f64 * privacy.mu_tot;
    let iterations = (scale * scale).round().max(1.0) as usize;
    (1.0 / scale, iterations)
}

/// `g · min(1, C/‖g‖)`.
pub fn clip_gradient(g: &[f64], bound: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, bound);
    out
}

/// Clips in place and reports whether `‖g‖ > bound`.
pub fn clip_in_place(g: &mut [f64], bound: f64) -> bool {
    debug_assert!(bound > 0.0);
    let n = norm(g);
    if n > bound {
        let scale = bound / n;
        g.iter_mut().for_each(|v| *v *= scale);
        true
    } else {
        false
    }
}

/// `x − γ(g + N)` with `N ~ N(0, σ²I)` drawn from `rng`. No draws are made
/// when `sigma == 0`.
pub fn local_dp_step<R: Rng + ?Sized>(
    state: &NodeState,
    g_clipped: &[f64],
    sigma: f64,
    step_size: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut noise = vec![0.0; g_clipped.len()];
    draw_noise(&mut noise, sigma, rng);
    state
        .x
        .iter()
        .zip(g_clipped)
        .zip(&noise)
        .map(|((x, g), n)| x - step_size * (g + n))
        .collect()
}

fn draw_noise<R: Rng + ?Sized>(out: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        for v in out.iter_mut() {
            *v = sigma * rng.sample::<f64, _>(StandardNormal);
        }
    } else {
        out.fill(0.0);
    }
}

/// One push-sum averaging step: `x_i ← Σ_j P_ij x_j`, `w_i ← Σ_j P_ij w_j`,
/// `z_i = x_i / w_i`.
pub fn mix_round(halves: &[Vec<f64>], weights: &[f64], p: &MixingMatrix) -> Result<Vec<NodeState>> {
    validate_column_stochastic(p)?;
    let n = p.n();
    if halves.len() != n || weights.len() != n {
        return Err(EngineError::InvalidConfig(format!(
            "mixing {} states with a {n}-node matrix",
            halves.len()
        )));
    }
    let dim = halves.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let row = p.row(i);
            let mut x = vec![0.0; dim];
            let mut w = 0.0;
            for (j, &pij) in row.iter().enumerate() {
                if pij == 0.0 {
                    continue;
                }
                for (a, b) in x.iter_mut().zip(&halves[j]) {
                    *a += pij * b;
                }
                w += pij * weights[j];
            }
            if !(w > DEGENERATE_WEIGHT) {
                return Err(EngineError::DegenerateWeight { node: i, weight: w });
            }
            let z = x.iter().map(|v| v / w).collect();
            Ok(NodeState { x, w, z })
        })
        .collect()
}

/// Network averages of what every node applied in the last round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundTrace {
    pub mean_clipped_gradient: Vec<f64>,
    pub mean_noise: Vec<f64>,
    pub clip_rate: f64,
    pub mean_sample_gradient_norm: f64,
    pub max_sample_gradient_norm: f64,
}

struct NodeOutcome {
    half: Vec<f64>,
    clipped_gradient: Vec<f64>,
    noise: Vec<f64>,
    raw_norm: f64,
    clipped: bool,
}

struct NodeStreams {
    sampling: ChaCha8Rng,
    noise: ChaCha8Rng,
}

fn stream(seed: u64, node: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * node as u64 + purpose);
    rng
}

/// The generator node `node` uses to pick its record each round; each
/// round draws one index uniformly from `0..J`.
pub fn sampling_stream(seed: u64, node: usize) -> ChaCha8Rng {
    stream(seed, node, SAMPLING_STREAM)
}

/// The generator node `node` uses for its Gaussian noise.
pub fn noise_stream(seed: u64, node: usize) -> ChaCha8Rng {
    stream(seed, node, NOISE_STREAM)
}

/// A run in progress. [`run`] drives it to completion; tests step it by hand.
pub struct Simulation<'a, T: Task + ?Sized> {
    task: &'a T,
    config: &'a RunConfig,
    states: Vec<NodeState>,
    streams: Vec<NodeStreams>,
    iteration: usize,
    trace: RoundTrace,
    pool: rayon::ThreadPool,
}

impl<'a, T: Task + ?Sized> Simulation<'a, T> {
    pub fn new(task: &'a T, config: &'a RunConfig) -> Result<Self> {
        let n = task.nodes();
        let dim = task.dim();
        if n == 0 || task.local_size() == 0 {
            return Err(EngineError::InvalidConfig(
                "task has no nodes or no data".into(),
            ));
        }
        if config.graph.n() != n {
            return Err(EngineError::InvalidConfig(format!(
                "graph has {} nodes but the task has {n}",
                config.graph.n()
            )));
        }
        if config.steps.len() < config.iterations {
            return Err(EngineError::InvalidConfig(format!(
                "step table covers {} iterations, run needs {}",
                config.steps.len(),
                config.iterations
            )));
        }
        if !(config.step_size > 0.0 && config.step_size.is_finite()) {
            return Err(EngineError::InvalidConfig(format!(
                "step size must be positive, got {}",
                config.step_size
            )));
        }
        let initial: Vec<Vec<f64>> = match &config.init {
            Initialization::Task => vec![task.initial_params(config.seed); n],
            Initialization::Zeros => vec![vec![0.0; dim]; n],
            Initialization::Shared(x) => vec![x.clone(); n],
            Initialization::PerNode(xs) => xs.clone(),
        };
        if initial.len() != n || initial.iter().any(|x| x.len() != dim) {
            return Err(EngineError::InvalidConfig(
                "initial parameters do not match the task's node count and dimension".into(),
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| EngineError::InvalidConfig(format!("thread pool: {e}")))?;
        Ok(Self {
            task,
            config,
            states: initial.into_iter().map(NodeState::new).collect(),
            streams: (0..n)
                .map(|i| NodeStreams {
                    sampling: stream(config.seed, i, SAMPLING_STREAM),
                    noise: stream(config.seed, i, NOISE_STREAM),
                })
                .collect(),
            iteration: 0,
            trace: RoundTrace::default(),
            pool,
        })
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn last_round(&self) -> &RoundTrace {
        &self.trace
    }

    /// Network average `x̄ = (1/n) Σ_i x_i`.
    pub fn average(&self) -> Vec<f64> {
        average_x(&self.states)
    }

    /// Executes round `k = self.iteration()`.
    pub fn step(&mut self) -> Result<()> {
        let k = self.iteration;
        let config = self.config;
        let task = self.task;
        let clip = config.steps.clip[k];
        let sigma = if config.noise_enabled {
            config.steps.sigma[k]
        } else {
            0.0
        };
        let gamma = config.step_size;
        let local = task.local_size();
        let dim = task.dim();

        let states = &self.states;
        let streams = &mut self.streams;
        let outcomes: Vec<NodeOutcome> = self.pool.install(|| {
            streams
                .par_iter_mut()
                .enumerate()
                .map(|(i, rngs)| {
                    let state = &states[i];
                    let index = rngs.sampling.random_range(0..local);
                    let mut g = vec![0.0; dim];
                    task.sample_gradient(i, index, &state.z, &mut g);
                    let raw_norm = norm(&g);
                    let clipped = clip.is_finite() && clip_in_place(&mut g, clip);
                    let mut noise = vec![0.0; dim];
                    draw_noise(&mut noise, sigma, &mut rngs.noise);
                    let half = state
                        .x
                        .iter()
                        .zip(&g)
                        .zip(&noise)
                        .map(|((x, g), nz)| x - gamma * (g + nz))
                        .collect();
                    NodeOutcome {
                        half,
                        clipped_gradient: g,
                        noise,
                        raw_norm,
                        clipped,
                    }
                })
                .collect()
        });

        let n = outcomes.len();
        let nf = n as f64;
        let mut trace = RoundTrace {
            mean_clipped_gradient: vec![0.0; dim],
            mean_noise: vec![0.0; dim],
            ..RoundTrace::default()
        };
        let mut clipped = 0usize;
        for o in &outcomes {
            for (a, b) in trace
                .mean_clipped_gradient
                .iter_mut()
                .zip(&o.clipped_gradient)
            {
                *a += b / nf;
            }
            for (a, b) in trace.mean_noise.iter_mut().zip(&o.noise) {
                *a += b / nf;
            }
            clipped += usize::from(o.clipped);
            trace.mean_sample_gradient_norm += o.raw_norm / nf;
            trace.max_sample_gradient_norm = trace.max_sample_gradient_norm.max(o.raw_norm);
        }
        trace.clip_rate = clipped as f64 / nf;

        let halves: Vec<Vec<f64>> = outcomes.into_iter().map(|o| o.half).collect();
        let weights: Vec<f64> = self.states.iter().map(|s| s.w).collect();
        let p = config.graph.matrix_at(k);
        let next = mix_round(&halves, &weights, &p)?;
        if let Some(node) = next
            .iter()
            .position(|s| !s.x.iter().chain(&s.z).all(|v| v.is_finite()))
        {
            return Err(EngineError::NonFiniteParameter { node, iteration: k });
        }
        self.states = next;
        self.trace = trace;
        self.iteration += 1;
        Ok(())
    }

    /// Statistics at the current iterate, before the next round.
    fn observe(&self) -> (f64, f64, f64, Option<f64>) {
        let avg = self.average();
        let (loss, grad) = self.pool.install(|| self.task.objective(&avg));
        let grad_norm_sq = grad.iter().map(|g| g * g).sum();
        let consensus = consensus_error(&self.states);
        if log::log_enabled!(log::Level::Debug) {
            for (i, s) in self.states.iter().enumerate() {
                let dist =
                    s.z.iter()
                        .zip(&avg)
                        .map(|(z, a)| (z - a) * (z - a))
                        .sum::<f64>();
                log::debug!("k={} node={i} w={} |z-xbar|^2={dist}", self.iteration, s.w);
            }
        }
        let accuracy = self.task.accuracy(&avg);
        (loss, grad_norm_sq, consensus, accuracy)
    }

    /// Runs all remaining rounds, logging one row per round.
    pub fn run_to_end(mut self) -> Result<MetricsLog> {
        let mut log = MetricsLog::default();
        log.push_meta("nodes", self.states.len());
        log.push_meta("dim", self.task.dim());
        log.push_meta("local_size", self.task.local_size());
        log.push_meta("iterations", self.config.iterations);
        log.push_meta("step_size", self.config.step_size);
        log.push_meta("seed", self.config.seed);
        log.push_meta("graph", self.config.graph.name());
        log.push_meta("noise_enabled", self.config.noise_enabled);
        while self.iteration < self.config.iterations {
            let k = self.iteration;
            let (loss, grad_norm_sq, consensus, accuracy) = self.observe();
            self.step()?;
            let steps = &self.config.steps;
            log.rows.push(RoundStats {
                k,
                loss,
                grad_norm_sq,
                consensus_error: consensus,
                clip_rate: self.trace.clip_rate,
                clip: steps.clip[k],
                mu: steps.mu[k],
                sigma: if self.config.noise_enabled {
                    steps.sigma[k]
                } else {
                    0.0
                },
                accuracy,
                mean_sample_grad_norm: self.trace.mean_sample_gradient_norm,
                max_sample_grad_norm: self.trace.max_sample_gradient_norm,
            });
        }
        let (loss, grad_norm_sq, consensus, accuracy) = self.observe();
        log.final_eval = Some(FinalEval {
            loss,
            grad_norm_sq,
            consensus_error: consensus,
            accuracy,
        });
        Ok(log)
    }
}

pub fn average_x(states: &[NodeState]) -> Vec<f64> {
    let n = states.len() as f64;
    let dim = states.first().map_or(0, |s| s.x.len());
    let mut avg = vec![0.0; dim];
    for s in states {
        for (a, b) in avg.iter_mut().zip(&s.x) {
            *a += b / n;
        }
    }
    avg
}

/// Runs `config.iterations` rounds of `task`.
pub fn run<T: Task + ?Sized>(task: &T, config: &RunConfig) -> Result<MetricsLog> {
    Simulation::new(task, config)?.run_to_end()
}
