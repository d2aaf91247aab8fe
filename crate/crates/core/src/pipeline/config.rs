use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::FactorSpec;
use crate::pbt::{PbtOptions, SearchSpace};
use crate::vae::{Architecture, KlWeighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMetric {
    #[default]
    Mig,
    Dci,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

/// Every knob of a run. Missing keys in a config file take the value of the
/// selected profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub population_size: usize,
    /// VAEs per member in unsupervised stages (UDR needs at least 2).
    pub models_per_member: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub kl_weighting: KlWeighting,
    /// Passes over the data per PBT step.
    pub epochs_per_step: usize,
    /// A metaEpoch whose best member scores below this learned nothing.
    pub udr_threshold: f64,
    /// Largest change of the best UDR that still counts as stable.
    pub delta_udr_threshold: f64,
    pub udr_patience: usize,
    pub generation_cap: usize,
    pub size_min: usize,
    pub max_leaf_runs: usize,
    pub z_active_threshold: f64,
    pub supervised_epochs: usize,
    pub eval_metric: EvalMetric,
    /// Ground-truth labels available to supervised runs; absent means all.
    pub label_budget: Option<usize>,
    /// Samples used to compare models and to estimate per-latent KL.
    pub udr_eval_samples: usize,
    pub kl_mask_threshold: f64,
    pub n_bins: usize,
    pub memory_budget_bytes: usize,
    pub pbt: PbtOptions,
    pub search: SearchSpace,
    pub dataset: FactorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Scaled down for a single workstation.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            population_size: 8,
            models_per_member: 3,
            latent_dim: 10,
            hidden: vec![256, 128],
            kl_weighting: KlWeighting::TotalCorrelation,
            epochs_per_step: 10,
            udr_threshold: 0.1,
            delta_udr_threshold: 0.005,
            udr_patience: 5,
            generation_cap: 60,
            size_min: 10,
            max_leaf_runs: 3,
            z_active_threshold: 0.75,
            supervised_epochs: 16,
            eval_metric: EvalMetric::Mig,
            label_budget: None,
            udr_eval_samples: 1000,
            kl_mask_threshold: crate::udr::DEFAULT_KL_MASK_THRESHOLD,
            n_bins: crate::metrics::DEFAULT_BINS,
            memory_budget_bytes: crate::dataset::DEFAULT_MEMORY_BUDGET,
            pbt: PbtOptions::default(),
            search: SearchSpace::default(),
            dataset: FactorSpec::mini_dsprites(),
        }
    }

    /// Population and dataset at full size.
    pub fn paper() -> Self {
        Self {
            population_size: 56,
            models_per_member: 5,
            generation_cap: 200,
            epochs_per_step: 1,
            dataset: FactorSpec::dsprites_layout(),
            memory_budget_bytes: 8 << 30,
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses a TOML document whose missing keys fall back to `base`.
    pub fn from_toml(text: &str, base: &RunConfig) -> Result<Self, PipelineError> {
        // checked against the struct first so that unknown keys and type
        // errors are reported with their position in `text`
        toml::from_str::<RunConfig>(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let overrides: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| PipelineError::Config(e.to_string()))?;
        for (k, v) in overrides {
            merged.insert(k, v);
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.dataset.num_pixels(),
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if self.models_per_member < 2 {
            return bad("models_per_member must be at least 2");
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return bad("layer sizes must be positive");
        }
        let positive = [
            ("udr_threshold", self.udr_threshold),
            ("delta_udr_threshold", self.delta_udr_threshold),
            ("z_active_threshold", self.z_active_threshold),
            ("kl_mask_threshold", self.kl_mask_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PipelineError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.udr_patience == 0 {
            return bad("udr_patience must be at least 1");
        }
        if self.generation_cap == 0 || self.supervised_epochs == 0 || self.epochs_per_step == 0 {
            return bad("generation_cap, supervised_epochs and epochs_per_step must be at least 1");
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2");
        }
        if self.udr_eval_samples < 2 {
            return bad("udr_eval_samples must be at least 2");
        }
        if self.size_min < 3 {
            return bad("size_min must be at least 3");
        }
        if self.label_budget == Some(0) {
            return bad("label_budget must be positive");
        }
        self.search.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.architecture().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}
