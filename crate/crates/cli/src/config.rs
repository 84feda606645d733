//! Config resolution: task defaults, then an optional key-value file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use pbcert::{DeltaAllocation, ExperimentConfig, Objective, Task};

/// Flags shared by every subcommand that runs (part of) an experiment.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Task preset: `classify` or `segment` [default: classify]
    #[arg(long)]
    pub task: Option<Task>,
    /// Total number of examples to generate
    #[arg(long)]
    pub n_examples: Option<usize>,
    /// Seed for data, split, initialization and sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Confidence parameter of the certificate [default: 0.05]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Prior standard deviation [default: 0.01]
    #[arg(long)]
    pub sigma_p: Option<f64>,
    /// Networks sampled to estimate the stochastic risk [default: 100]
    #[arg(long)]
    pub n_model_samples: Option<u64>,
    /// Split of delta between the two bound steps: `split-half` or `unsplit` [default: split-half]
    #[arg(long)]
    pub allocation: Option<DeltaAllocation>,
    /// Posterior training objective: `pinsker` or `quadratic` [default: pinsker]
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Prior training epochs [default: 10]
    #[arg(long)]
    pub epochs_prior: Option<usize>,
    /// Posterior training epochs [default: 30]
    #[arg(long)]
    pub epochs_posterior: Option<usize>,
    /// TOML file of `key = value` settings (any config field); flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "pbcert-out")]
    pub out: PathBuf,
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("[config] reading {}", path.display()))?;
    text.parse::<toml::Table>()
        .with_context(|| format!("[config] parsing {}", path.display()))
}

impl RunArgs {
    /// Task defaults, overlaid by the config file, overlaid by flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(path) => read_table(path)?,
            None => toml::Table::new(),
        };
        let task = match (self.task, file.get("task")) {
            (Some(task), _) => task,
            (None, Some(value)) => match value.as_str() {
                Some(s) => s.parse()?,
                None => bail!("[config] `task` must be a string"),
            },
            (None, None) => Task::Classify,
        };
        let mut table = toml::Table::try_from(ExperimentConfig::defaults(task)).context("[config] encoding defaults")?;
        for (key, value) in file {
            if !table.contains_key(&key) {
                bail!("[config] unknown key `{key}`");
            }
            table.insert(key, value);
        }
        let mut config: ExperimentConfig = table.try_into().context("[config] invalid value")?;
        config.task = task;
        if let Some(v) = self.n_examples {
            config.n_examples = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.delta {
            config.delta = v;
        }
        if let Some(v) = self.sigma_p {
            config.sigma_p = v;
        }
        if let Some(v) = self.n_model_samples {
            config.n_model_samples = v;
        }
        if let Some(v) = self.allocation {
            config.allocation = v;
        }
        if let Some(v) = self.objective {
            config.objective = v;
        }
        if let Some(v) = self.epochs_prior {
            config.epochs_prior = v;
        }
        if let Some(v) = self.epochs_posterior {
            config.epochs_posterior = v;
        }
        config.validate().context("[config] validation")?;
        Ok(config)
    }
}
