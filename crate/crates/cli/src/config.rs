//! Run configuration: one JSON file drives every subcommand. Missing keys
//! take defaults, unknown keys are rejected, and the effective (fully
//! expanded) config is written back into the run directory so a run can be
//! reproduced from its own artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use selfmem_core::corpus::SyntheticTaskSpec;
use selfmem_core::generator::{Architecture, GeneratorConfig, TrainOptions};
use selfmem_core::pipeline::{ConvergencePolicy, PipelineOptions};
use selfmem_core::retrieval::{DEFAULT_B, DEFAULT_K1};
use selfmem_core::selector::{SelectorConfig, SelectorTrainOptions, Strategy};

use crate::error::CliError;

/// Okapi BM25 parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalParams {
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams { k1: DEFAULT_K1, b: DEFAULT_B }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), CliError> {
        if !self.k1.is_finite() || self.k1 <= 0.0 {
            return Err(CliError::config("retrieval.k1 must be positive"));
        }
        if !self.b.is_finite() || !(0.0..=1.0).contains(&self.b) {
            return Err(CliError::config("retrieval.b must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything a run needs. The single global `seed` is propagated into the
/// task, generator, and selector seeds by `effective()`, so one number
/// controls all randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic corpus definition, used when `corpus_dir` is unset.
    pub task: SyntheticTaskSpec,
    /// Pre-synthesized corpus directory (from the synth subcommand).
    pub corpus_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub gen_train: TrainOptions,
    pub selector: SelectorConfig,
    pub sel_train: SelectorTrainOptions,
    pub retrieval: RetrievalParams,
    pub policy: ConvergencePolicy,
    pub strategy: Strategy,
    /// Train sources whose pools feed selector training.
    pub selector_pool_count: usize,
    pub retrain_selector_each_iteration: bool,
    /// Oracle selection reads references; required to run oracle on test.
    pub allow_oracle_on_test: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: SyntheticTaskSpec::default(),
            corpus_dir: None,
            generator: GeneratorConfig::default(),
            gen_train: TrainOptions::default(),
            selector: SelectorConfig::default(),
            sel_train: SelectorTrainOptions::default(),
            retrieval: RetrievalParams::default(),
            policy: ConvergencePolicy::default(),
            strategy: Strategy::Trained,
            selector_pool_count: 320,
            retrain_selector_each_iteration: false,
            allow_oracle_on_test: false,
            out_dir: PathBuf::from("runs/default"),
            seed: 17,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub arch: Option<String>,
}

impl RunConfig {
    /// Read a config file; missing keys default, unknown keys are errors.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) -> Result<(), CliError> {
        if let Some(out) = &ov.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(s) = &ov.strategy {
            self.strategy = Strategy::parse(s)
                .map_err(|e| CliError::config(format!("--strategy: {e}")))?;
        }
        if let Some(a) = &ov.arch {
            self.generator.architecture = Architecture::parse(a)
                .map_err(|e| CliError::config(format!("--arch: {e}")))?;
        }
        Ok(())
    }

    /// Push the global seed into every seeded component. Called after
    /// overrides so the dumped effective config is self-contained.
    pub fn propagate_seed(&mut self) {
        self.task.seed = self.seed;
        self.generator.seed = self.seed;
        self.selector.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(dir) = &self.corpus_dir {
            if !dir.is_dir() {
                return Err(CliError::io(format!(
                    "corpus_dir {} does not exist",
                    dir.display()
                )));
            }
        } else {
            self.task.validate().map_err(|e| CliError::config(e.to_string()))?;
        }
        self.generator.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.selector.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.policy.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.retrieval.validate()?;
        if self.selector_pool_count == 0 {
            return Err(CliError::config("selector_pool_count must be at least 1"));
        }
        Ok(())
    }

    /// Load + overrides + seed propagation + validation in one step.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_overrides(ov)?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            gen_train: self.gen_train.clone(),
            sel_train: self.sel_train.clone(),
            bm25_k1: self.retrieval.k1,
            bm25_b: self.retrieval.b,
            selector_pool_count: self.selector_pool_count,
            retrain_selector_each_iteration: self.retrain_selector_each_iteration,
            allow_oracle_on_test: self.allow_oracle_on_test,
        }
    }

    /// Write the fully expanded config into the run directory.
    pub fn save_effective(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("cannot serialize config: {e}")))?;
        text.push('\n');
        fs::write(&path, text)
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}
