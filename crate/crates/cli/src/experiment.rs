//! Turning a config into runs, and runs into tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pushdp::accountant::{uniform_budget, PrivacySpec};
use pushdp::engine::{network_size_step_rule, run, Initialization, RunConfig};
use pushdp::metrics::{summarize, MetricsLog, Summary};
use pushdp::models::{synth_dataset_with, BlobSpec, Model, SupervisedTask};
use pushdp::schedule::{build_schedule, StepTable, Variant};
use pushdp::topology::{graph_diagnostics, GraphSchedule};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, StepRule};
use crate::CliError;

/// Widest connectivity window searched when reporting graph constants.
const MAX_DIAGNOSTIC_WINDOW: usize = 64;

/// Everything needed to execute one run.
pub struct PreparedRun {
    pub task: SupervisedTask,
    pub run: RunConfig,
    /// `key=value` pairs reported ahead of the metrics.
    pub header: Header,
}

impl PreparedRun {
    pub fn execute(&self) -> Result<MetricsLog, CliError> {
        let mut log = run(&self.task, &self.run).map_err(pushdp::Error::from)?;
        for (k, v) in &self.header {
            log.push_meta(k, v);
        }
        Ok(log)
    }
}

pub fn model_of(config: &ExperimentConfig) -> Model {
    let m = &config.models;
    match m.model.as_str() {
        "mlp" => Model::Mlp {
            d_in: m.d_in,
            hidden: m.hidden,
            classes: m.classes,
        },
        _ => Model::Logistic {
            d_in: m.d_in,
            classes: m.classes,
        },
    }
}

/// Privacy parameters with the horizon and step size implied by the step rule.
pub fn resolve_horizon(config: &ExperimentConfig) -> Result<(PrivacySpec, f64, usize), CliError> {
    let privacy = PrivacySpec::new(
        config.accountant.epsilon,
        config.accountant.delta,
        config.models.local_size,
        config.engine.iterations,
    )
    .map_err(pushdp::Error::from)?;
    match config.step_rule()? {
        StepRule::Fixed => Ok((privacy, config.engine.step_size, config.engine.iterations)),
        StepRule::NetworkSize => {
            let n = config.topology.nodes;
            if !privacy.supports_network_size(n) {
                log::warn!(
                    "J*mu_tot = {} does not exceed sqrt(n) = {}; the network-size step rule loses its guarantee",
                    privacy.local_size as f64 * privacy.mu_tot,
                    (n as f64).sqrt()
                );
            }
            let (gamma, iterations) = network_size_step_rule(n, &privacy);
            Ok((privacy.with_iterations(iterations), gamma, iterations))
        }
    }
}

/// `# key=value` lines describing a run.
pub type Header = Vec<(String, String)>;

/// Resolves the accountant values and step table for `config`, without data.
pub fn resolve_steps(
    config: &ExperimentConfig,
) -> Result<(StepTable, f64, usize, Header), CliError> {
    let (privacy, gamma, iterations) = resolve_horizon(config)?;
    let mut header = Header::new();
    let mut put = |k: &str, v: String| header.push((k.to_string(), v));
    put("step_rule", config.engine.step_rule.clone());
    if !config.schedule.private {
        put("algorithm", "non-private".into());
        return Ok((
            StepTable::non_private(iterations),
            gamma,
            iterations,
            header,
        ));
    }
    let variant = config.variant()?;
    let schedule = build_schedule(
        variant,
        privacy,
        config.schedule.clip,
        config.schedule.rho_c.unwrap_or(1.0),
        config.schedule.rho_mu.unwrap_or(1.0),
    )
    .map_err(pushdp::Error::from)?;
    put("algorithm", variant.to_string());
    put("epsilon", privacy.epsilon.to_string());
    put("delta", privacy.delta.to_string());
    put("mu_tot", privacy.mu_tot.to_string());
    put(
        "mu_bar",
        uniform_budget(privacy.mu_tot, privacy.local_size, iterations).to_string(),
    );
    if variant.grows_budget() {
        put("mu_0", schedule.mu.to_string());
    }
    put("clip", schedule.clip.to_string());
    put("rho_c", schedule.rho_c.to_string());
    put("rho_mu", schedule.rho_mu.to_string());
    Ok((schedule.table(), gamma, iterations, header))
}

/// Builds the task and engine configuration of replicate seed `seed`.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<PreparedRun, CliError> {
    config.validate()?;
    let n = config.topology.nodes;
    let graph = GraphSchedule::by_name(&config.topology.graph, n)
        .map_err(|e| CliError::Config(format!("topology.graph: {e}")))?;
    let model = model_of(config);
    let m = &config.models;
    let dataset = synth_dataset_with(
        m.data_seed,
        n,
        m.local_size,
        m.d_in,
        m.classes,
        &BlobSpec {
            separation: m.separation,
            noise_std: m.noise_std,
            test_size: m.test_size,
        },
    );
    let (steps, gamma, iterations, mut header) = resolve_steps(config)?;
    header.push(("model".into(), m.model.clone()));
    header.push(("data_seed".into(), m.data_seed.to_string()));
    if let Some(diag) = graph_diagnostics(&graph, model.dim(), MAX_DIAGNOSTIC_WINDOW) {
        header.push((
            "connectivity_window".into(),
            diag.connectivity.window.to_string(),
        ));
        header.push((
            "connectivity_diameter".into(),
            diag.connectivity.diameter.to_string(),
        ));
        if let Some(c) = diag.constants {
            header.push(("eps_min".into(), c.eps_min.to_string()));
            header.push(("lambda".into(), c.lambda.to_string()));
            header.push(("q".into(), c.q.to_string()));
            header.push(("psi_bound".into(), c.psi_bound.to_string()));
        }
    }
    Ok(PreparedRun {
        task: SupervisedTask::new(model, dataset),
        run: RunConfig {
            step_size: gamma,
            iterations,
            seed,
            steps,
            noise_enabled: config.schedule.private,
            graph,
            init: Initialization::Task,
            workers: config.engine.workers,
        },
        header,
    })
}

/// Seeds of the configured replicates.
pub fn replicate_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.experiment.repeat as u64)
        .map(|r| config.engine.seed + r)
        .collect()
}

/// Output path of one replicate: the configured path for a single run,
/// `<stem>.seed<seed>.<ext>` otherwise.
pub fn replicate_path(output: &Path, seed: u64, repeat: usize) -> PathBuf {
    if repeat <= 1 {
        return output.to_path_buf();
    }
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    let ext = output
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    output.with_file_name(format!("{stem}.seed{seed}.{ext}"))
}

/// Runs every replicate of `config`. Replicates execute in parallel; the
/// result order follows the seeds.
pub fn run_replicates(config: &ExperimentConfig) -> Result<Vec<(u64, MetricsLog)>, CliError> {
    replicate_seeds(config)
        .into_par_iter()
        .map(|seed| Ok((seed, prepare(config, seed)?.execute()?)))
        .collect()
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub algorithm: String,
    /// `None` for the non-private baseline.
    pub privacy: Option<(f64, f64)>,
    pub summaries: Vec<Summary>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs each variant and the non-private baseline on the same data and seeds.
pub fn compare(
    config: &ExperimentConfig,
    variants: &[Variant],
) -> Result<Vec<ComparisonRow>, CliError> {
    let mut cells: Vec<(String, ExperimentConfig)> = variants
        .iter()
        .map(|v| {
            let mut c = config.clone();
            c.schedule.variant = v.to_string();
            c.schedule.private = true;
            (v.to_string(), c)
        })
        .collect();
    let mut baseline = config.clone();
    baseline.schedule.private = false;
    cells.push(("non-private".into(), baseline));
    for (_, c) in &cells {
        c.validate()?;
    }
    let seeds = replicate_seeds(config);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Summary> = jobs
        .par_iter()
        .map(|&(i, seed)| Ok(summarize(&prepare(&cells[i].1, seed)?.execute()?)))
        .collect::<Result<_, CliError>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(i, (name, c))| ComparisonRow {
            algorithm: name.clone(),
            privacy: c
                .schedule
                .private
                .then_some((c.accountant.epsilon, c.accountant.delta)),
            summaries: results[i * seeds.len()..(i + 1) * seeds.len()].to_vec(),
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "algorithm,epsilon,delta,replicates,final_loss_mean,final_loss_std,\
         final_accuracy_mean,final_accuracy_std,grad_norm_sq_mean,grad_norm_sq_std\n",
    );
    for row in rows {
        let losses: Vec<f64> = row.summaries.iter().map(|s| s.final_loss).collect();
        let grads: Vec<f64> = row.summaries.iter().map(|s| s.mean_grad_norm_sq).collect();
        let accs: Option<Vec<f64>> = row.summaries.iter().map(|s| s.final_accuracy).collect();
        let (lm, ls) = mean_std(&losses);
        let (gm, gs) = mean_std(&grads);
        let (am, as_) = match accs {
            Some(a) => {
                let (m, s) = mean_std(&a);
                (m.to_string(), s.to_string())
            }
            None => (String::new(), String::new()),
        };
        let (eps, delta) = match row.privacy {
            Some((e, d)) => (e.to_string(), d.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{eps},{delta},{},{lm},{ls},{am},{as_},{gm},{gs}",
            row.algorithm,
            row.summaries.len()
        )
        .unwrap();
    }
    out
}

/// A sweep dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    RhoC,
    RhoMu,
    Epsilon,
    Nodes,
    Graph,
}

impl std::str::FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "rho_c" => Ok(Axis::RhoC),
            "rho_mu" => Ok(Axis::RhoMu),
            "epsilon" => Ok(Axis::Epsilon),
            "n" | "nodes" => Ok(Axis::Nodes),
            "graph" => Ok(Axis::Graph),
            other => Err(CliError::Config(format!(
                "unknown sweep axis `{other}` (expected rho_c, rho_mu, epsilon, n or graph)"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::RhoC => "rho_c",
            Axis::RhoMu => "rho_mu",
            Axis::Epsilon => "epsilon",
            Axis::Nodes => "n",
            Axis::Graph => "graph",
        }
    }

    /// `config` with this axis set to `value`. Node counts keep the
    /// per-node dataset size fixed.
    pub fn apply(
        self,
        config: &ExperimentConfig,
        value: &str,
    ) -> Result<ExperimentConfig, CliError> {
        let mut c = config.clone();
        let number = || {
            value.parse::<f64>().map_err(|_| {
                CliError::Config(format!(
                    "sweep value `{value}` for {} is not a number",
                    self.name()
                ))
            })
        };
        match self {
            Axis::RhoC => c.schedule.rho_c = Some(number()?),
            Axis::RhoMu => c.schedule.rho_mu = Some(number()?),
            Axis::Epsilon => c.accountant.epsilon = number()?,
            Axis::Nodes => {
                c.topology.nodes = value.parse().map_err(|_| {
                    CliError::Config(format!("sweep value `{value}` for n is not a count"))
                })?
            }
            Axis::Graph => c.topology.graph = value.to_string(),
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub iterations: usize,
    pub summary: Summary,
}

/// Runs every `value × replicate` cell.
pub fn sweep(
    config: &ExperimentConfig,
    axis: Axis,
    values: &[String],
) -> Result<Vec<SweepRow>, CliError> {
    let cells: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| axis.apply(config, v))
        .collect::<Result<_, _>>()?;
    let seeds = replicate_seeds(config);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, seed)| {
            let prepared = prepare(&cells[i], seed)?;
            let iterations = prepared.run.iterations;
            Ok(SweepRow {
                value: values[i].clone(),
                seed,
                iterations,
                summary: summarize(&prepared.execute()?),
            })
        })
        .collect()
}

pub fn sweep_csv(axis: Axis, rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "axis,value,seed,iterations,final_loss,final_accuracy,grad_norm_sq_mean,grad_norm_sq_min,clip_fraction\n",
    );
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            axis.name(),
            r.value,
            r.seed,
            r.iterations,
            s.final_loss,
            s.final_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            s.mean_grad_norm_sq,
            s.min_grad_norm_sq,
            s.clip_fraction
        )
        .unwrap();
    }
    out
}
