//! Experiment configuration files.
//!
//! A config is a TOML document with one table per library module. Every
//! key has a default except the decay rates, which are required exactly
//! when the chosen variant uses them. Command-line overrides are applied
//! to the parsed table before it is checked, so they go through the same
//! validation as file values.

use std::path::{Path, PathBuf};

use pushdp::schedule::Variant;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub accountant: AccountantSection,
    pub schedule: ScheduleSection,
    pub topology: TopologySection,
    pub models: ModelsSection,
    pub engine: EngineSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountantSection {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for AccountantSection {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// `dyn`, `dyn-c`, `dyn-mu` or `const`.
    pub variant: String,
    /// `C₀` for decaying variants, `C̄` otherwise.
    pub clip: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_mu: Option<f64>,
    /// False runs the non-private baseline: no clipping and no noise.
    pub private: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            variant: "const".into(),
            clip: 1.0,
            rho_c: None,
            rho_mu: None,
            private: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    /// `ring`, `exponential` or `complete`.
    pub graph: String,
    pub nodes: usize,
}

impl Default for TopologySection {
    fn default() -> Self {
        Self {
            graph: "exponential".into(),
            nodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    /// `logistic` or `mlp`.
    pub model: String,
    /// Records per node, `J`.
    pub local_size: usize,
    pub d_in: usize,
    pub classes: usize,
    /// Hidden width of the MLP; ignored by the logistic model.
    pub hidden: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub test_size: usize,
    pub data_seed: u64,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            model: "logistic".into(),
            local_size: 100,
            d_in: 10,
            classes: 4,
            hidden: 16,
            separation: 3.0,
            noise_std: 1.0,
            test_size: 1000,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    /// `fixed` uses `step_size` and `iterations` as given; `network-size`
    /// derives both from the node count and the privacy budget.
    pub step_rule: String,
    pub step_size: f64,
    pub iterations: usize,
    /// Master seed; replicate `r` runs with `seed + r`.
    pub seed: u64,
    /// Threads per run; 0 uses every core.
    pub workers: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            step_rule: "fixed".into(),
            step_size: 0.05,
            iterations: 500,
            seed: 0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub repeat: usize,
    pub output: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            repeat: 1,
            output: PathBuf::from("metrics.csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Fixed,
    NetworkSize,
}

impl ExperimentConfig {
    /// Parses a config document; errors carry the line and column.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config = Self::parse_unchecked(text)?;
        config.validate()?;
        Ok(config)
    }

    fn parse_unchecked(text: &str) -> Result<Self, CliError> {
        toml::from_str(text)
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn from_table(table: Table) -> Result<Self, CliError> {
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim_end().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides such as `schedule.rho_c=2`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let in_file = |e: CliError, p: &Path| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", p.display())),
            other => other,
        };
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                // Type-check the file on its own first so errors point at its lines.
                Self::parse_unchecked(&text).map_err(|e| in_file(e, p))?;
                parse_table(&text).map_err(|e| in_file(e, p))?
            }
            None => Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.schedule
            .variant
            .parse()
            .map_err(|e| CliError::Config(format!("schedule.variant: {e}")))
    }

    pub fn step_rule(&self) -> Result<StepRule, CliError> {
        match self.engine.step_rule.as_str() {
            "fixed" => Ok(StepRule::Fixed),
            "network-size" => Ok(StepRule::NetworkSize),
            other => Err(CliError::Config(format!(
                "engine.step_rule: expected `fixed` or `network-size`, got `{other}`"
            ))),
        }
    }

    /// Checks cross-field requirements that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let variant = self.variant()?;
        self.step_rule()?;
        let missing = |field: &str| {
            CliError::Config(format!(
                "schedule.{field} is required for variant `{variant}`"
            ))
        };
        if self.schedule.private {
            if variant.decays_clip() && self.schedule.rho_c.is_none() {
                return Err(missing("rho_c"));
            }
            if variant.grows_budget() && self.schedule.rho_mu.is_none() {
                return Err(missing("rho_mu"));
            }
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("accountant.epsilon", self.accountant.epsilon)?;
        positive("accountant.delta", self.accountant.delta)?;
        if self.accountant.delta >= 1.0 {
            return Err(CliError::Config("accountant.delta must be below 1".into()));
        }
        positive("schedule.clip", self.schedule.clip)?;
        positive("engine.step_size", self.engine.step_size)?;
        for (name, v) in [
            ("schedule.rho_c", self.schedule.rho_c),
            ("schedule.rho_mu", self.schedule.rho_mu),
        ] {
            if let Some(v) = v {
                if !(v >= 1.0 && v.is_finite()) {
                    return Err(CliError::Config(format!(
                        "{name} must be at least 1, got {v}"
                    )));
                }
            }
        }
        for (name, v) in [
            ("topology.nodes", self.topology.nodes),
            ("models.local_size", self.models.local_size),
            ("models.d_in", self.models.d_in),
            ("models.classes", self.models.classes),
            ("models.hidden", self.models.hidden),
            ("engine.iterations", self.engine.iterations),
            ("experiment.repeat", self.experiment.repeat),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be at least 1")));
            }
        }
        if !matches!(self.models.model.as_str(), "logistic" | "mlp") {
            return Err(CliError::Config(format!(
                "models.model: expected `logistic` or `mlp`, got `{}`",
                self.models.model
            )));
        }
        pushdp::topology::GraphSchedule::by_name(&self.topology.graph, self.topology.nodes)
            .map_err(|e| CliError::Config(format!("topology.graph: {e}")))?;
        Ok(())
    }
}

fn parse_table(text: &str) -> Result<Table, CliError> {
    text.parse::<Table>()
        .map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
}

/// Sets `section.key` in `table` from `section.key=value`. The value is read
/// as a TOML literal and falls back to a plain string.
pub fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (path, raw) = item.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override `{item}` is not of the form key=value"))
    })?;
    let path = path.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Config(format!("override `{item}` has an empty key")))?;
    let mut current = table;
    for key in keys {
        let entry = current
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override `{item}`: `{key}` is not a table"))
        })?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let config = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(config, ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let text = r#"
            [accountant]
            epsilon = 0.3
            [schedule]
            variant = "dyn"
            clip = 2.5
            rho_c = 4.0
            rho_mu = 2.0
            [topology]
            graph = "ring"
            nodes = 5
            [engine]
            step_rule = "network-size"
            seed = 17
            [experiment]
            repeat = 3
            output = "out/run.csv"
        "#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        let again = ExperimentConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(config, again);
        assert_eq!(config.schedule.rho_c, Some(4.0));
        assert_eq!(config.step_rule().unwrap(), StepRule::NetworkSize);
    }

    #[test]
    fn missing_rate_names_the_field() {
        let err = ExperimentConfig::from_toml("[schedule]\nvariant = \"dyn\"\nrho_mu = 2.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("schedule.rho_c"), "{err}");
        let err = ExperimentConfig::from_toml("[schedule]\nvariant = \"dyn-mu\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("schedule.rho_mu"), "{err}");
        // The baseline ignores the schedule rates.
        assert!(
            ExperimentConfig::from_toml("[schedule]\nvariant = \"dyn\"\nprivate = false\n").is_ok()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[engine]\nstep = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("step"), "{err}");
        assert!(ExperimentConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn parse_errors_report_the_line() {
        let err = ExperimentConfig::from_toml("[engine]\nseed = 1\niterations = \"many\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn overrides_can_complete_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[schedule]\nvariant = \"dyn-c\"\n").unwrap();
        assert!(ExperimentConfig::load(Some(&path), &[]).is_err());
        let config = ExperimentConfig::load(Some(&path), &["schedule.rho_c=4".into()]).unwrap();
        assert_eq!(config.schedule.rho_c, Some(4.0));
        std::fs::write(&path, "[engine]\n\nseed = -3\n").unwrap();
        let err = ExperimentConfig::load(Some(&path), &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("c.toml") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut table: Table = "[engine]\nseed = 1\n".parse().unwrap();
        apply_override(&mut table, "engine.seed=9").unwrap();
        apply_override(&mut table, "schedule.variant=dyn-c").unwrap();
        apply_override(&mut table, "schedule.rho_c=2").unwrap();
        apply_override(&mut table, "experiment.output=a/b.csv").unwrap();
        let config = ExperimentConfig::from_table(table).unwrap();
        assert_eq!(config.engine.seed, 9);
        assert_eq!(config.variant().unwrap(), Variant::DynC);
        assert_eq!(config.schedule.rho_c, Some(2.0));
        assert_eq!(config.experiment.output, PathBuf::from("a/b.csv"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[accountant]\nepsilon = -1.0\n",
            "[accountant]\ndelta = 1.0\n",
            "[topology]\ngraph = \"star\"\n",
            "[topology]\nnodes = 0\n",
            "[models]\nmodel = \"cnn\"\n",
            "[engine]\nstep_rule = \"adaptive\"\n",
            "[schedule]\nvariant = \"dyn-c\"\nrho_c = 0.5\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }
}
