//! Experiment configuration: one TOML file per run, with `--set key=value`
//! overrides applied to the parsed table before it is typed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use timeflow_core::datapipe::DatasetSpec;
use timeflow_core::flow_train::{FlowSchedule, TrainConfig};
use timeflow_core::metrics::MetricConfig;
use timeflow_core::samplers::SampleConfig;
use timeflow_core::velocity_model::ModelConfig;
use timeflow_core::Error;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: FlowSchedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec::sines(500)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: default_output_dir(),
            dataset: default_dataset(),
            model: ModelConfig::default(),
            schedule: FlowSchedule::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        Self::parse(text, &[])
    }

    /// Parses `text` and applies `key.path=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let config: Self = if overrides.is_empty() {
            // direct parse keeps line/column information in errors
            toml::from_str(text).map_err(|e| config_error(e.to_string()))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
            for spec in overrides {
                apply_override(&mut table, spec)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| config_error(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            CliError::Core(Error::Config(m)) => config_error(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| config_error(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.metrics.validate()?;
        let f = self.dataset.feature_count;
        if f != 0 && f != self.model.features {
            return Err(config_error(format!(
                "dataset.feature_count ({f}) and model.features ({}) disagree",
                self.model.features
            )));
        }
        if self.schedule.sigma_sample != self.sample.sigma {
            return Err(config_error(format!(
                "schedule.sigma_sample ({}) and sample.sigma ({}) must match",
                self.schedule.sigma_sample, self.sample.sigma
            )));
        }
        let seeds = [
            ("dataset.seed", self.dataset.seed),
            ("model.seed", self.model.seed),
            ("train.seed", self.train.seed),
            ("sample.seed", self.sample.seed),
            ("metrics.seed", self.metrics.seed),
        ];
        for (key, seed) in seeds {
            if seed > i64::MAX as u64 {
                return Err(config_error(format!("{key} = {seed} exceeds the TOML integer range")));
            }
        }
        Ok(())
    }
}

fn config_error(message: String) -> CliError {
    CliError::Core(Error::Config(message))
}

/// Sets `a.b.c = value` inside `table`. The value is read as a TOML literal and
/// falls back to a bare string, so `--set dataset.source.path=x.csv` works unquoted.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {part} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn overrides_create_nested_keys() {
        let c = ExperimentConfig::parse(
            "",
            &["train.steps=7".into(), "sample.mode=\"ode\"".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.sample.mode, timeflow_core::samplers::Mode::Ode);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn sigma_keys_must_agree() {
        let err = ExperimentConfig::parse("", &["sample.sigma=0.5".into()]).unwrap_err().to_string();
        assert!(err.contains("schedule.sigma_sample") && err.contains("sample.sigma"), "{err}");
    }
}
