//! Per-round diagnostics and their CSV form.

use std::fmt::Display;
use std::io::Write;

use crate::engine::NodeState;

/// Column names of the metrics CSV, in order.
pub const CSV_HEADER: [&str; 9] = [
    "k",
    "loss",
    "grad_norm_sq",
    "consensus_err",
    "clip_rate",
    "C_k",
    "mu_k",
    "sigma_k",
    "accuracy",
];

/// Statistics of round `k`, evaluated at the average iterate before the
/// round's update, together with what the round applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub k: usize,
    pub loss: f64,
    /// `‖∇f(x̄^k)‖²`.
    pub grad_norm_sq: f64,
    /// `(1/n) Σ_i ‖z_i − x̄‖²`.
    pub consensus_error: f64,
    /// Fraction of nodes whose sampled gradient exceeded `C_k`.
    pub clip_rate: f64,
    pub clip: f64,
    pub mu: f64,
    pub sigma: f64,
    pub accuracy: Option<f64>,
    /// Mean over nodes of the sampled gradient norm, before clipping.
    pub mean_sample_grad_norm: f64,
    pub max_sample_grad_norm: f64,
}

/// Evaluation at the final average iterate `x̄^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEval {
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub consensus_error: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    /// Run metadata, written as `# key=value` lines ahead of the header.
    pub meta: Vec<(String, String)>,
    pub rows: Vec<RoundStats>,
    pub final_eval: Option<FinalEval>,
}

impl MetricsLog {
    /// Appends a metadata entry, replacing an earlier one with the same key.
    pub fn push_meta(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (key, value) in &self.meta {
            writeln!(out, "# {key}={value}")?;
        }
        if let Some(f) = &self.final_eval {
            writeln!(out, "# final_loss={}", f.loss)?;
            writeln!(out, "# final_grad_norm_sq={}", f.grad_norm_sq)?;
            writeln!(out, "# final_consensus_err={}", f.consensus_error)?;
            if let Some(a) = f.accuracy {
                writeln!(out, "# final_accuracy={a}")?;
            }
        }
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(CSV_HEADER)?;
        for r in &self.rows {
            writer.write_record([
                r.k.to_string(),
                r.loss.to_string(),
                r.grad_norm_sq.to_string(),
                r.consensus_error.to_string(),
                r.clip_rate.to_string(),
                r.clip.to_string(),
                r.mu.to_string(),
                r.sigma.to_string(),
                r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        writer.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// `(1/n) Σ_i ‖z_i − x̄‖²` with `x̄` the mean of the `x_i`.
pub fn consensus_error(states: &[NodeState]) -> f64 {
    let avg = crate::engine::average_x(states);
    let total: f64 = states
        .iter()
        .map(|s| {
            s.z.iter()
                .zip(&avg)
                .map(|(z, a)| (z - a) * (z - a))
                .sum::<f64>()
        })
        .sum();
    total / states.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_loss: f64,
    pub mean_loss: f64,
    pub min_grad_norm_sq: f64,
    /// Cesàro average `(1/K) Σ_k ‖∇f(x̄^k)‖²`.
    pub mean_grad_norm_sq: f64,
    pub final_accuracy: Option<f64>,
    /// Clipped samples over all sampled gradients in the run.
    pub clip_fraction: f64,
}

/// Condenses a finished run. The final loss and accuracy come from the
/// evaluation at `x̄^K` when present, otherwise from the last row.
pub fn summarize(log: &MetricsLog) -> Summary {
    let k = log.rows.len().max(1) as f64;
    let mean = |f: fn(&RoundStats) -> f64| log.rows.iter().map(f).sum::<f64>() / k;
    let last = log.rows.last();
    let (final_loss, final_accuracy) = match (&log.final_eval, last) {
        (Some(f), _) => (f.loss, f.accuracy),
        (None, Some(r)) => (r.loss, r.accuracy),
        (None, None) => (f64::NAN, None),
    };
    Summary {
        final_loss,
        mean_loss: mean(|r| r.loss),
        min_grad_norm_sq: log
            .rows
            .iter()
            .map(|r| r.grad_norm_sq)
            .fold(f64::INFINITY, f64::min),
        mean_grad_norm_sq: mean(|r| r.grad_norm_sq),
        final_accuracy,
        clip_fraction: mean(|r| r.clip_rate),
    }
}
