//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 6 9`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pushdp::accountant::{delta_from_mu_eps, mu_tot_from_eps_delta, PrivacySpec};
use pushdp::engine::{
    average_x, sampling_stream, Initialization, NodeState, RunConfig, Simulation, Task,
};
use pushdp::metrics::{summarize, MetricsLog, Summary};
use pushdp::models::{synth_dataset, Model, SupervisedTask};
use pushdp::schedule::{build_schedule, StepTable, Variant};
use pushdp::topology::GraphSchedule;
use pushdp_cli::config::ExperimentConfig;
use pushdp_cli::experiment::{mean_std, prepare};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).expect("acceptance config is valid")
}

fn logs(config: &ExperimentConfig, seeds: &[u64]) -> Vec<MetricsLog> {
    seeds
        .par_iter()
        .map(|&s| prepare(config, s).unwrap().execute().unwrap())
        .collect()
}

fn summaries(config: &ExperimentConfig, seeds: &[u64]) -> Vec<Summary> {
    logs(config, seeds).iter().map(summarize).collect()
}

fn final_accuracies(config: &ExperimentConfig, seeds: &[u64]) -> Vec<f64> {
    summaries(config, seeds)
        .iter()
        .map(|s| s.final_accuracy.expect("supervised runs report accuracy"))
        .collect()
}

const EPSILONS: [f64; 4] = [0.3, 0.7, 1.0, 3.0];

fn accountant_round_trip() -> Outcome {
    let mut worst: f64 = 0.0;
    for eps in EPSILONS {
        let mu = mu_tot_from_eps_delta(eps, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max((delta_from_mu_eps(mu, eps) - 1e-4).abs());
    }
    check(worst <= 1e-9, format!("max |delta error| = {worst:.2e}"))
}

fn budget_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    for eps in EPSILONS {
        for local in [100, 1000] {
            for iterations in [200, 2000] {
                for rho in [2.0, 4.0] {
                    let privacy = PrivacySpec::new(eps, 1e-4, local, iterations)
                        .map_err(|e| e.to_string())?;
                    let schedule = build_schedule(Variant::Dyn, privacy, 1.0, rho, rho)
                        .map_err(|e| e.to_string())?;
                    let composed = schedule.composed_mu_tot().map_err(|e| e.to_string())?;
                    worst = worst.max((composed - privacy.mu_tot).abs() / privacy.mu_tot);
                }
            }
        }
    }
    check(worst <= 1e-8, format!("max relative error = {worst:.2e}"))
}

struct ZeroTask;

impl Task for ZeroTask {
    fn dim(&self) -> usize {
        4
    }
    fn nodes(&self) -> usize {
        8
    }
    fn local_size(&self) -> usize {
        1
    }
    fn sample_gradient(&self, _: usize, _: usize, _: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
    }
    fn objective(&self, params: &[f64]) -> (f64, Vec<f64>) {
        (0.0, vec![0.0; params.len()])
    }
}

fn push_sum_consensus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let mean = average_x(&init.iter().cloned().map(NodeState::new).collect::<Vec<_>>());
    let mut details = Vec::new();
    let mut ok = true;
    for graph in [
        GraphSchedule::Ring { n: 8 },
        GraphSchedule::Exponential { n: 8 },
    ] {
        let run = RunConfig {
            step_size: 0.1,
            iterations: 300,
            seed: 0,
            steps: StepTable::non_private(300),
            graph: graph.clone(),
            noise_enabled: false,
            init: Initialization::PerNode(init.clone()),
            workers: 1,
        };
        let mut sim = Simulation::new(&ZeroTask, &run).map_err(|e| e.to_string())?;
        let mut weight_err: f64 = 0.0;
        for _ in 0..300 {
            sim.step().map_err(|e| e.to_string())?;
            let w: f64 = sim.states().iter().map(|s| s.w).sum();
            weight_err = weight_err.max((w - 8.0).abs());
        }
        let dist = sim
            .states()
            .iter()
            .map(|s| {
                s.z.iter()
                    .zip(&mean)
                    .map(|(z, m)| (z - m).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        ok &= dist <= 1e-6 && weight_err <= 1e-10;
        details.push(format!(
            "{}: max dist {dist:.1e}, weight err {weight_err:.1e}",
            graph.name()
        ));
    }
    check(ok, details.join("; "))
}

fn sgd_reduction() -> Outcome {
    let local = 50;
    let model = Model::Logistic {
        d_in: 5,
        classes: 3,
    };
    let dataset = synth_dataset(8, 1, local, 5, 3);
    let part = dataset.partitions[0].clone();
    let task = SupervisedTask::new(model, dataset);
    let gamma = 0.1;
    let run = RunConfig {
        step_size: gamma,
        iterations: 500,
        seed: 21,
        steps: StepTable::non_private(500),
        graph: GraphSchedule::Complete { n: 1 },
        noise_enabled: false,
        init: Initialization::Task,
        workers: 1,
    };
    let mut sim = Simulation::new(&task, &run).map_err(|e| e.to_string())?;
    let mut x = model.init_params(21);
    let mut rng = sampling_stream(21, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (features, label) = part.sample(rng.random_range(0..local));
        let g = model.per_sample_gradient(&x, features, label);
        x.iter_mut().zip(&g).for_each(|(a, b)| *a -= gamma * b);
        sim.step().map_err(|e| e.to_string())?;
        for (a, b) in sim.states()[0].z.iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-12,
        format!("max per-step deviation = {worst:.1e} over 500 steps"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for model in [
        Model::Logistic {
            d_in: 6,
            classes: 2,
        },
        Model::Logistic {
            d_in: 6,
            classes: 4,
        },
        Model::Mlp {
            d_in: 6,
            hidden: 5,
            classes: 3,
        },
    ] {
        let classes = match model {
            Model::Logistic { classes, .. } | Model::Mlp { classes, .. } => classes,
        };
        for _ in 0..20 {
            let params: Vec<f64> = (0..model.dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(0..classes);
            let analytic = model.per_sample_gradient(&params, &x, y);
            let mut p = params.clone();
            let numeric: Vec<f64> = (0..p.len())
                .map(|i| {
                    let orig = p[i];
                    p[i] = orig + h;
                    let up = model.loss(&p, &x, y);
                    p[i] = orig - h;
                    let down = model.loss(&p, &x, y);
                    p[i] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            worst = worst.max(diff / scale);
        }
    }
    check(
        worst <= 1e-5,
        format!("max relative error = {worst:.1e} over 60 probes"),
    )
}

const TREND_BASE: &str = r#"
[accountant]
epsilon = 0.3
delta = 1e-4
[schedule]
clip = 1.0
rho_c = 2.0
rho_mu = 2.0
[topology]
graph = "exponential"
nodes = 20
[models]
model = "logistic"
local_size = 250
d_in = 10
classes = 4
[engine]
step_size = 0.1
iterations = 2000
workers = 1
"#;

fn variant_ordering() -> Outcome {
    let base = config(TREND_BASE);
    let seeds: Vec<u64> = (0..6).collect();
    let mut stats = Vec::new();
    for variant in [Variant::Dyn, Variant::DynC, Variant::DynMu, Variant::Const] {
        let mut c = base.clone();
        c.schedule.variant = variant.to_string();
        let (m, s) = mean_std(&final_accuracies(&c, &seeds));
        stats.push((variant, m, s));
    }
    let acc = |v: Variant| stats.iter().find(|s| s.0 == v).unwrap().1;
    let sd = |v: Variant| stats.iter().find(|s| s.0 == v).unwrap().2;
    let (dyn_, dyn_c, dyn_mu, const_) = (
        acc(Variant::Dyn),
        acc(Variant::DynC),
        acc(Variant::DynMu),
        acc(Variant::Const),
    );
    let se = ((sd(Variant::Dyn).powi(2) + sd(Variant::Const).powi(2)) / seeds.len() as f64).sqrt();
    let ok = dyn_ >= dyn_c
        && dyn_c >= const_
        && dyn_ >= dyn_mu
        && dyn_mu >= const_
        && dyn_ - const_ > se;
    check(
        ok,
        format!(
            "accuracy dyn {dyn_:.4}, dyn-c {dyn_c:.4}, dyn-mu {dyn_mu:.4}, const {const_:.4}; \
             dyn - const = {:.4} vs pooled SE {se:.4}",
            dyn_ - const_
        ),
    )
}

fn node_scaling() -> Outcome {
    let base = config(
        r#"
        [accountant]
        epsilon = 1.0
        delta = 1e-4
        [schedule]
        variant = "dyn"
        clip = 1.0
        rho_c = 2.0
        rho_mu = 2.0
        [models]
        model = "logistic"
        local_size = 50
        d_in = 10
        classes = 4
        [engine]
        step_rule = "network-size"
        workers = 1
        "#,
    );
    let seeds: Vec<u64> = (0..5).collect();
    let mut means = Vec::new();
    for n in [4, 8, 16, 32] {
        let mut c = base.clone();
        c.topology.nodes = n;
        let values: Vec<f64> = summaries(&c, &seeds)
            .iter()
            .map(|s| s.mean_grad_norm_sq)
            .collect();
        means.push(mean_std(&values).0);
    }
    let pairs = means.windows(2).filter(|w| w[1] <= w[0]).count();
    check(
        pairs == 3,
        format!(
            "mean Cesaro |grad f|^2 for n = 4, 8, 16, 32: {}; non-increasing pairs {pairs}/3",
            means
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn graph_ordering() -> Outcome {
    let base = config(
        r#"
        [accountant]
        epsilon = 0.3
        delta = 1e-4
        [schedule]
        variant = "dyn"
        clip = 1.0
        rho_c = 2.0
        rho_mu = 2.0
        [topology]
        nodes = 20
        [models]
        model = "mlp"
        hidden = 16
        local_size = 100
        d_in = 10
        classes = 4
        [engine]
        step_size = 0.1
        iterations = 1500
        workers = 1
        "#,
    );
    let seeds: Vec<u64> = (0..6).collect();
    let mut means = Vec::new();
    for graph in ["ring", "exponential", "complete"] {
        let mut c = base.clone();
        c.topology.graph = graph.into();
        means.push((graph, mean_std(&final_accuracies(&c, &seeds)).0));
    }
    let ok = means.windows(2).all(|w| w[1].1 >= w[0].1);
    check(
        ok,
        means
            .iter()
            .map(|(g, m)| format!("{g} {m:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn decile_means(values: &[f64]) -> (f64, f64) {
    let d = (values.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&values[..d]), mean(&values[values.len() - d..]))
}

fn gradient_norm_decay() -> Outcome {
    // Well separated blobs, so the model can fit its training data as the
    // networks behind the clipping argument do.
    let mut base = config(TREND_BASE);
    base.models.separation = 5.0;
    base.accountant.epsilon = 3.0;
    let mut non_private = base.clone();
    non_private.schedule.private = false;
    let log = prepare(&non_private, 0).unwrap().execute().unwrap();
    let trace: Vec<f64> = log.rows.iter().map(|r| r.mean_sample_grad_norm).collect();
    let (first, last) = decile_means(&trace);

    let mut constant = base;
    constant.schedule.variant = "const".into();
    let log = prepare(&constant, 0).unwrap().execute().unwrap();
    let clip: Vec<f64> = log.rows.iter().map(|r| r.clip_rate).collect();
    let (clip_first, clip_last) = decile_means(&clip);
    check(
        last < 0.5 * first && clip_last < 0.05,
        format!(
            "non-private sample gradient norm {first:.3} -> {last:.3} (ratio {:.2}); \
             const clip rate {clip_first:.3} -> {clip_last:.3} at C = {}",
            last / first,
            constant.schedule.clip
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pushdp"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        r#"
        [accountant]
        epsilon = 0.7
        [schedule]
        variant = "dyn"
        rho_c = 2.0
        rho_mu = 2.0
        [topology]
        nodes = 6
        [models]
        local_size = 40
        [engine]
        iterations = 150
        seed = 3
        [experiment]
        repeat = 2
        "#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let mut compared = Vec::new();
    for workers in ["1", "4", "1"] {
        let tag = format!("w{workers}-{}", compared.len());
        let out = |name: &str| format!("{tag}-{name}");
        run_cli(
            &[
                "run",
                "-c",
                cfg,
                "--workers",
                workers,
                "-o",
                &out("run.csv"),
            ],
            dir.path(),
        )?;
        run_cli(
            &[
                "compare",
                "-c",
                cfg,
                "--workers",
                workers,
                "--variants",
                "const,dyn",
                "-o",
                &out("compare.csv"),
            ],
            dir.path(),
        )?;
        run_cli(
            &[
                "sweep",
                "-c",
                cfg,
                "--workers",
                workers,
                "--axis",
                "graph",
                "--values",
                "ring,complete",
                "-o",
                &out("sweep.csv"),
            ],
            dir.path(),
        )?;
        run_cli(
            &["accountant", "-c", cfg, "-o", &out("accountant.csv")],
            dir.path(),
        )?;
        let read =
            |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| format!("{name}: {e}"));
        compared.push(vec![
            read(&out("run.seed3.csv"))?,
            read(&out("run.seed4.csv"))?,
            read(&out("compare.csv"))?,
            read(&out("sweep.csv"))?,
            read(&out("accountant.csv"))?,
        ]);
    }
    let identical = compared.windows(2).all(|w| w[0] == w[1]);
    let bytes: usize = compared[0].iter().map(Vec::len).sum();
    check(
        identical,
        format!(
            "run/compare/sweep/accountant outputs ({bytes} bytes) identical across 1, 4, 1 workers"
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "accountant round-trip",
            limit: Duration::from_secs(1),
            check: accountant_round_trip,
        },
        Criterion {
            id: 2,
            name: "budget exactness",
            limit: Duration::from_secs(1),
            check: budget_exactness,
        },
        Criterion {
            id: 3,
            name: "push-sum consensus",
            limit: Duration::from_secs(1),
            check: push_sum_consensus,
        },
        Criterion {
            id: 4,
            name: "SGD reduction",
            limit: Duration::from_secs(1),
            check: sgd_reduction,
        },
        Criterion {
            id: 5,
            name: "gradient correctness",
            limit: Duration::from_secs(5),
            check: gradient_correctness,
        },
        Criterion {
            id: 6,
            name: "variant ordering at eps = 0.3",
            limit: Duration::from_secs(120),
            check: variant_ordering,
        },
        Criterion {
            id: 7,
            name: "node-count scaling",
            limit: Duration::from_secs(300),
            check: node_scaling,
        },
        Criterion {
            id: 8,
            name: "graph ordering",
            limit: Duration::from_secs(120),
            check: graph_ordering,
        },
        Criterion {
            id: 9,
            name: "gradient-norm decay",
            limit: Duration::from_secs(120),
            check: gradient_norm_decay,
        },
        Criterion {
            id: 10,
            name: "determinism",
            limit: Duration::from_secs(300),
            check: determinism,
        },
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| selected.is_empty() || selected.contains(&c.id))
    {
        let start = Instant::now();
        let outcome = (c.check)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let (status, detail) = match &outcome {
            Ok(d) if in_time => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {:?} limit", c.limit)),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {:>2} {status} [{}] {detail} ({:.2?})",
            c.id, c.name, elapsed
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
