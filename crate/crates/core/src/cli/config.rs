//! Run configuration: one JSON document, overridable key by key.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::CliError;
use crate::eval::{DEFAULT_GRID_RANGE, DEFAULT_GRID_RESOLUTION};
use crate::model::{Hyper, LocalConfig, StochasticConfig, TrainConfig};
use crate::nnet::AdamConfig;
use crate::paintbox::PlantedDecoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Batch,
    Stochastic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// UCI docword file.
    pub corpus: Option<PathBuf>,
    /// One term per line.
    pub vocab: Option<PathBuf>,
    /// Checkpoint to read (`eval`, `export-paintbox`, `sample`) or resume
    /// from (`train`).
    pub checkpoint: Option<PathBuf>,
    /// Where commands write their outputs.
    pub out_dir: Option<PathBuf>,
}

/// Source of the generating model for `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantedSpec {
    /// Two blocks of topics driven by separate code coordinates.
    TwoGroups {
        k: usize,
        num_words: usize,
        beta: f64,
        gamma0: f64,
        scale: f64,
        var: f64,
    },
    /// Sticks, locations and topics from their priors.
    Prior {
        k: usize,
        num_words: usize,
        alpha: f64,
        beta: f64,
        gamma0: f64,
        dim: usize,
        ell_prior_var: f64,
        decoder: PlantedDecoder,
    },
    /// The fitted model in `paths.checkpoint`.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub docs: usize,
    pub doc_len: usize,
    pub planted: PlantedSpec,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            docs: 500,
            doc_len: 100,
            planted: PlantedSpec::TwoGroups {
                k: 8,
                num_words: 200,
                beta: 5.0,
                gamma0: 0.1,
                scale: 1.5,
                var: 0.1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Topics to export; empty means the ten most used on the exported
    /// documents.
    pub topics: Vec<usize>,
    pub resolution: usize,
    pub range: (f64, f64),
    /// Leading documents of the corpus used for the embedding (0 = all).
    pub max_docs: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            topics: Vec::new(),
            resolution: DEFAULT_GRID_RESOLUTION,
            range: DEFAULT_GRID_RANGE,
            max_docs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hyper: Hyper,
    pub mode: TrainMode,
    pub iters: usize,
    pub lr: f64,
    /// Seeds initialization, minibatches and sampling.
    pub seed: u64,
    /// Seeds the test-document choice and the within-document splits.
    pub split_seed: u64,
    /// Share of each test document's tokens that is held out.
    pub heldout_ratio: f64,
    /// Share of documents kept out of training for perplexity.
    pub test_fraction: f64,
    pub local: LocalConfig,
    pub adam: AdamConfig,
    pub stochastic: StochasticConfig,
    pub gradient_steps: bool,
    pub warm_start: bool,
    /// Held-out perplexity every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Numbered checkpoint every this many iterations (0 = only the final one).
    pub checkpoint_every: usize,
    pub record_elbo: bool,
    pub record_wallclock: bool,
    pub paths: Paths,
    pub sample: SampleConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            hyper: Hyper::default(),
            mode: TrainMode::Batch,
            iters: train.iterations,
            lr: train.lr,
            seed: 0,
            split_seed: 0,
            heldout_ratio: 0.1,
            test_fraction: 0.1,
            local: train.local,
            adam: train.adam,
            stochastic: StochasticConfig::default(),
            gradient_steps: train.gradient_steps,
            warm_start: train.warm_start,
            eval_every: 0,
            checkpoint_every: 0,
            record_elbo: train.record_elbo,
            record_wallclock: train.record_wallclock,
            paths: Paths::default(),
            sample: SampleConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` where `key` is a dotted path into the JSON form
    /// (`hyper.k=50`, `paths.corpus=data/docword.txt`). Values are parsed
    /// as JSON and fall back to plain strings.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("--set {key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.hyper.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return usage(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.heldout_ratio > 0.0 && self.heldout_ratio < 1.0) {
            return usage(format!("heldout_ratio must lie in (0, 1), got {}", self.heldout_ratio));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return usage(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if self.local.max_iter == 0 || !(self.local.tol >= 0.0) {
            return usage("local.max_iter must be positive and local.tol non-negative".into());
        }
        if self.mode == TrainMode::Stochastic {
            let s = &self.stochastic;
            if s.batch_size == 0 {
                return usage("stochastic.batch_size must be positive".into());
            }
            match s.rho_override {
                Some(r) if !(r > 0.0 && r <= 1.0) => return usage("stochastic.rho_override must lie in (0, 1]".into()),
                None if !(s.kappa > 0.5 && s.kappa <= 1.0 && s.t0 >= 0.0) => {
                    return usage("need stochastic.kappa in (0.5, 1] and stochastic.t0 >= 0".into())
                }
                _ => {}
            }
        }
        if self.export.resolution < 2 {
            return usage("export.resolution must be at least 2".into());
        }
        let (lo, hi) = self.export.range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return usage(format!("export.range must be an increasing finite pair, got [{lo}, {hi}]"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            lr: self.lr,
            seed: self.seed,
            local: self.local,
            adam: self.adam,
            gradient_steps: self.gradient_steps,
            warm_start: self.warm_start,
            eval_every: self.eval_every,
            record_elbo: self.record_elbo,
            record_wallclock: self.record_wallclock,
        }
    }
}
