//! Recursive label-and-reduce training and the supervised baselines.
//!
//! A metaEpoch trains a population in which every member holds several VAEs
//! sharing hyperparameters, scored by how consistently those VAEs encode the
//! data. Once the best score stops moving, the best VAE's active latents
//! label the data, the data is reduced to a region where those labels barely
//! vary, and the next metaEpoch has to learn something new. The labels of all
//! stages finally supervise one more population trained on the full dataset.

mod config;
mod store;

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{generate_with_budget, DatasetError, DatasetView};
use crate::metrics::{self, MetricsError};
use crate::pbt::{init_population, GenerationRecord, PbtError, Population, StepFailed};
use crate::reducer::{
    reduce_with_levs, surrogate_label, LevTable, Reduction, ReductionTrace, ReducerError,
};
use crate::seed::{derive_seed, rng_for, Rng};
use crate::udr::{udr_member, MemberUdr, ModelCodes, UdrError};
use crate::vae::{
    active_latents, encode_means, latent_stats, strided_positions, train_epoch, Hyper, TrainState,
    VaeError, VaeParams,
};

pub use config::{EvalMetric, Profile, RunConfig};
pub use store::{LabelRecord, SurrogateLabelStore};

const META_STREAM: u64 = 1;
const FINAL_STREAM: u64 = 2;
const SUPERVISED_STREAM: u64 = 3;
const LABEL_STREAM: u64 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("every member diverged in stage {stage}")]
    Diverged { stage: String },
    #[error("the initial metaEpoch learned nothing ({0:?})")]
    NothingLearned(Termination),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pbt(#[from] PbtError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Reducer(#[from] ReducerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Udr(#[from] UdrError),
}

/// Stops a metaEpoch once the best score has changed by less than
/// `threshold` for `patience` consecutive generations.
#[derive(Debug, Clone)]
pub struct PatienceTracker {
    threshold: f64,
    patience: usize,
    last: Option<f64>,
    streak: usize,
}

impl PatienceTracker {
    pub fn new(threshold: f64, patience: usize) -> Self {
        Self {
            threshold,
            patience,
            last: None,
            streak: 0,
        }
    }

    /// Records the next best score; true once converged.
    pub fn push(&mut self, best: f64) -> bool {
        if let Some(prev) = self.last {
            let delta = (best - prev).abs();
            if delta < self.threshold {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.last = Some(best);
        self.streak >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    GenerationCap,
    BelowUdrThreshold,
    DatasetTooSmall,
    NoStructure,
}

#[derive(Debug, Clone)]
pub struct MetaEpochResult {
    pub stage: String,
    pub view: DatasetView,
    pub udr_history: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub best_member: Option<usize>,
    pub best_model: Option<usize>,
    pub per_model_udr: Vec<f64>,
    pub latent_kl: Vec<f64>,
    pub active_latents: Vec<usize>,
    pub best_params: Option<VaeParams>,
    /// Present when the stage produced surrogate labels.
    pub labels: Option<LevTable>,
    pub log: Vec<GenerationRecord>,
}

impl MetaEpochResult {
    fn empty(stage: &str, view: &DatasetView, termination: Termination) -> Self {
        Self {
            stage: stage.to_string(),
            view: view.clone(),
            udr_history: Vec::new(),
            converged: false,
            termination,
            best_member: None,
            best_model: None,
            per_model_udr: Vec::new(),
            latent_kl: Vec::new(),
            active_latents: Vec::new(),
            best_params: None,
            labels: None,
            log: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeafStop {
    IntervalUnavailable,
    DatasetTooSmall,
    NoStructure,
    StageEnded,
    NoShrink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub view_size: usize,
    pub generations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub udr_history: Vec<f64>,
    pub best_member: Option<usize>,
    pub best_model: Option<usize>,
    pub per_model_udr: Vec<f64>,
    pub latent_kl: Vec<f64>,
    pub active_latents: Vec<usize>,
    pub labeled_samples: usize,
    /// Mutual information of each active latent with each ground-truth factor
    /// on this stage's data.
    pub factor_mi: Vec<Vec<f64>>,
    /// Ground-truth factor sharing the most information with each active latent.
    pub dominant_factors: Vec<String>,
    /// Scores of the stage's best model on the full dataset.
    pub ground_truth: Option<GroundTruthMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub after_stage: String,
    pub rank: usize,
    pub input_size: usize,
    pub outcome: String,
    pub result_size: usize,
    /// `(lo_rank, hi_rank, ratio)` of the interval chosen per active latent.
    pub intervals: Vec<(usize, usize, f64)>,
    /// Within-interval variance over total variance per active latent.
    pub variance_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafReport {
    pub leaf: usize,
    pub start_rank: usize,
    pub stages: Vec<String>,
    pub stop: LeafStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSummary {
    pub stage: String,
    pub labeled_samples: usize,
    pub label_columns: usize,
    pub score_history: Vec<f64>,
    pub best_member: usize,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMetrics {
    pub mig: f64,
    pub mig_per_factor: Vec<f64>,
    pub dci_disentanglement: f64,
}

/// Everything a run produced, serializable to a deterministic JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub dataset_size: usize,
    pub factor_names: Vec<String>,
    pub stages: Vec<StageReport>,
    pub leaves: Vec<LeafReport>,
    pub reductions: Vec<ReductionSummary>,
    pub label_columns: usize,
    pub labeled_samples: usize,
    pub supervised: Option<SupervisedSummary>,
    pub final_metrics: Option<GroundTruthMetrics>,
    pub manifest: Vec<String>,
    pub config: RunConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// Progress notifications.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Generation {
        stage: String,
        generation: u64,
        best: f64,
        view_size: usize,
    },
    StageDone {
        stage: String,
        termination: Termination,
        active_latents: usize,
    },
    Reduced {
        after_stage: String,
        outcome: String,
        size: usize,
    },
}

pub struct SupervisedResult {
    pub params: VaeParams,
    pub summary: SupervisedSummary,
    pub log: Vec<GenerationRecord>,
}

/// Scores a model by MIG against surrogate label columns, each over its own
/// labelled subset, weighted by subset size.
struct SurrogateColumn {
    positions: Vec<usize>,
    bins: Array2<usize>,
}

pub struct Runner<'a> {
    config: RunConfig,
    root: DatasetView,
    observer: Box<dyn FnMut(&Event) + 'a>,
    pub stages: Vec<MetaEpochResult>,
    pub leaves: Vec<LeafReport>,
    pub reductions: Vec<(ReductionSummary, ReductionTrace)>,
    pub store: SurrogateLabelStore,
    pub supervised: Option<SupervisedResult>,
}

impl<'a> Runner<'a> {
    /// Validates the config and renders its dataset.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let ds = generate_with_budget(&config.dataset, config.memory_budget_bytes)?;
        let root = DatasetView::full(Arc::new(ds));
        Ok(Self::with_view(config, root))
    }

    pub fn with_view(config: RunConfig, root: DatasetView) -> Self {
        Self {
            config,
            root,
            observer: Box::new(|_| {}),
            stages: Vec::new(),
            leaves: Vec::new(),
            reductions: Vec::new(),
            store: SurrogateLabelStore::new(),
            supervised: None,
        }
    }

    pub fn with_observer(mut self, f: impl FnMut(&Event) + 'a) -> Self {
        self.observer = Box::new(f);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn root(&self) -> &DatasetView {
        &self.root
    }

    /// One PBT run with UDR as the score, until the best score settles.
    pub fn run_metaepoch(&mut self, view: &DatasetView, stage: &str, seed: u64) -> Result<MetaEpochResult, PipelineError> {
        let cfg = self.config.clone();
        if view.len() < cfg.size_min {
            return Ok(MetaEpochResult::empty(stage, view, Termination::DatasetTooSmall));
        }
        let arch = cfg.architecture();
        let mut pop: Population<Vec<TrainState>> = init_population(
            cfg.search.clone().for_dataset(view.len()),
            cfg.population_size,
            seed,
            |_, rng| {
                (0..cfg.models_per_member)
                    .map(|_| TrainState::new(arch.clone(), rng))
                    .collect()
            },
        )?;
        pop.options = cfg.pbt;
        let eval_view = view.subset(&strided_positions(view.len(), cfg.udr_eval_samples))?;
        let step = |theta: &mut Vec<TrainState>, h: &Hyper, rng: &mut Rng| -> Result<(), StepFailed> {
            for s in theta.iter_mut() {
                for _ in 0..cfg.epochs_per_step {
                    train_epoch(s, view, h, cfg.kl_weighting, rng).map_err(|e| StepFailed(e.to_string()))?;
                }
            }
            Ok(())
        };
        let eval = |theta: &Vec<TrainState>| {
            member_udr(theta, &eval_view, cfg.kl_mask_threshold)
                .map(|u| u.score)
                .unwrap_or(f64::NEG_INFINITY)
        };

        let mut tracker = PatienceTracker::new(cfg.delta_udr_threshold, cfg.udr_patience);
        let mut history = Vec::new();
        let mut log = Vec::new();
        let mut converged = false;
        while history.len() < cfg.generation_cap {
            let records = pop.run_generation(step, eval);
            let best = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
            if best == f64::NEG_INFINITY {
                return Err(PipelineError::Diverged { stage: stage.to_string() });
            }
            log.extend(records);
            history.push(best);
            (self.observer)(&Event::Generation {
                stage: stage.to_string(),
                generation: history.len() as u64 - 1,
                best,
                view_size: view.len(),
            });
            if tracker.push(best) {
                converged = true;
                break;
            }
        }

        let best = pop.best().clone();
        let udr = member_udr(&best.theta, &eval_view, cfg.kl_mask_threshold)?;
        let model = udr.best_model();
        let params = best.theta[model].params.clone();
        let stats = latent_stats(&params, view, cfg.udr_eval_samples)?;
        let active = active_latents(&stats, cfg.z_active_threshold);
        let score = *history.last().expect("at least one generation");
        let termination = if score < cfg.udr_threshold {
            Termination::BelowUdrThreshold
        } else if active.is_empty() {
            Termination::NoStructure
        } else if converged {
            Termination::Converged
        } else {
            Termination::GenerationCap
        };
        let labels = match termination {
            Termination::Converged | Termination::GenerationCap => Some(surrogate_label(&params, view, &active)?),
            _ => None,
        };
        (self.observer)(&Event::StageDone {
            stage: stage.to_string(),
            termination,
            active_latents: active.len(),
        });
        Ok(MetaEpochResult {
            stage: stage.to_string(),
            view: view.clone(),
            udr_history: history,
            converged,
            termination,
            best_member: Some(best.id),
            best_model: Some(model),
            per_model_udr: udr.per_model,
            latent_kl: stats.kl,
            active_latents: active,
            best_params: Some(params),
            labels,
            log,
        })
    }

    fn meta_seed(&self, leaf: usize, depth: usize) -> u64 {
        derive_seed(self.config.seed, &[META_STREAM, leaf as u64, depth as u64])
    }

    fn record_reduction(&mut self, after: &str, input: &DatasetView, rank: usize, outcome: &Result<(Reduction, ReductionTrace), ReducerError>) {
        let (name, size, trace) = match outcome {
            Ok((Reduction::Reduced(v), t)) => ("reduced", v.len(), Some(t)),
            Ok((Reduction::TooSmall { size }, t)) => ("too-small", *size, Some(t)),
            Ok((Reduction::NoStructure { .. }, t)) => ("no-structure", 0, Some(t)),
            Err(_) => ("interval-unavailable", 0, None),
        };
        let summary = ReductionSummary {
            after_stage: after.to_string(),
            rank,
            input_size: input.len(),
            outcome: name.to_string(),
            result_size: size,
            intervals: trace
                .map(|t| t.chosen.iter().map(|iv| (iv.lo_rank, iv.hi_rank, iv.ratio)).collect())
                .unwrap_or_default(),
            variance_ratios: trace
                .map(|t| {
                    t.columns
                        .iter()
                        .zip(&t.chosen)
                        .map(|(c, iv)| crate::reducer::variance_ratio(c, iv))
                        .collect()
                })
                .unwrap_or_default(),
        };
        (self.observer)(&Event::Reduced {
            after_stage: after.to_string(),
            outcome: name.to_string(),
            size,
        });
        if let Some(t) = trace {
            self.reductions.push((summary, t.clone()));
        } else {
            let empty = ReductionTrace {
                rank,
                columns: Vec::new(),
                chosen: Vec::new(),
                result_size: 0,
            };
            self.reductions.push((summary, empty));
        }
    }

    fn record_stage(&mut self, result: MetaEpochResult, leaf: usize, depth: usize) {
        if let Some(labels) = &result.labels {
            self.store.push(LabelRecord {
                leaf,
                meta_epoch: depth,
                stage: result.stage.clone(),
                labels: labels.clone(),
            });
        }
        self.stages.push(result);
    }

    /// Reduces the root with the `leaf`-th best intervals of the first
    /// stage's labels, then labels and reduces until a stop condition fires.
    pub fn run_leaf(&mut self, first: &MetaEpochResult, leaf: usize) -> Result<LeafReport, PipelineError> {
        let labels0 = first
            .labels
            .as_ref()
            .ok_or_else(|| PipelineError::InvalidInput("leaf-runs need a labelled first stage".into()))?;
        if leaf == 0 {
            return Err(PipelineError::InvalidInput("leaf-runs are numbered from 1".into()));
        }
        let rank = leaf - 1;
        let root = self.root.clone();
        let mut report = LeafReport {
            leaf,
            start_rank: rank,
            stages: Vec::new(),
            stop: LeafStop::StageEnded,
        };
        let outcome = reduce_with_levs(&root, labels0, rank, self.config.size_min);
        self.record_reduction(&first.stage, &root, rank, &outcome);
        let mut d = match outcome {
            Ok((Reduction::Reduced(v), _)) => v,
            Ok((Reduction::TooSmall { .. }, _)) => {
                report.stop = LeafStop::DatasetTooSmall;
                return Ok(report);
            }
            Ok((Reduction::NoStructure { .. }, _)) => {
                report.stop = LeafStop::NoStructure;
                return Ok(report);
            }
            Err(ReducerError::InvalidRank { .. }) => {
                report.stop = LeafStop::IntervalUnavailable;
                return Ok(report);
            }
            Err(e) => return Err(e.into()),
        };
        let mut depth = 1;
        loop {
            if d.len() <= self.config.size_min {
                report.stop = LeafStop::DatasetTooSmall;
                break;
            }
            let stage = format!("leaf{leaf}-{depth}");
            let res = self.run_metaepoch(&d, &stage, self.meta_seed(leaf, depth))?;
            report.stages.push(stage.clone());
            let labels = res.labels.clone();
            self.record_stage(res, leaf, depth);
            let Some(labels) = labels else {
                report.stop = LeafStop::StageEnded;
                break;
            };
            let outcome = reduce_with_levs(&d, &labels, 0, self.config.size_min);
            self.record_reduction(&stage, &d, 0, &outcome);
            match outcome? {
                (Reduction::Reduced(next), _) if next.len() < d.len() => d = next,
                (Reduction::Reduced(_), _) => {
                    report.stop = LeafStop::NoShrink;
                    break;
                }
                (Reduction::TooSmall { .. }, _) => {
                    report.stop = LeafStop::DatasetTooSmall;
                    break;
                }
                (Reduction::NoStructure { .. }, _) => {
                    report.stop = LeafStop::NoStructure;
                    break;
                }
            }
            depth += 1;
        }
        Ok(report)
    }

    /// Initial metaEpoch, leaf-runs, then the final supervised stage.
    pub fn run_rpu(&mut self) -> Result<VaeParams, PipelineError> {
        let root = self.root.clone();
        let first = self.run_metaepoch(&root, "root", self.meta_seed(0, 0))?;
        if first.labels.is_none() {
            let t = first.termination;
            self.stages.push(first);
            return Err(PipelineError::NothingLearned(t));
        }
        self.record_stage(first.clone(), 0, 0);
        for leaf in 1..=self.config.max_leaf_runs {
            let report = self.run_leaf(&first, leaf)?;
            self.leaves.push(report);
        }
        self.final_supervised()
    }

    fn supervised_pbt(
        &mut self,
        stage: &str,
        seed: u64,
        eval: impl Fn(&VaeParams) -> f64 + Sync,
    ) -> Result<(VaeParams, Vec<f64>, usize, Vec<GenerationRecord>), PipelineError> {
        let cfg = self.config.clone();
        let root = self.root.clone();
        let arch = cfg.architecture();
        let mut pop: Population<TrainState> = init_population(
            cfg.search.clone().for_dataset(root.len()),
            cfg.population_size,
            seed,
            |_, rng| TrainState::new(arch.clone(), rng),
        )?;
        pop.options = cfg.pbt;
        let step = |s: &mut TrainState, h: &Hyper, rng: &mut Rng| {
            for _ in 0..cfg.epochs_per_step {
                train_epoch(s, &root, h, cfg.kl_weighting, rng).map_err(|e| StepFailed(e.to_string()))?;
            }
            Ok(())
        };
        let score = |s: &TrainState| eval(&s.params);
        let mut history = Vec::new();
        let mut log = Vec::new();
        for g in 0..cfg.supervised_epochs {
            let records = pop.run_generation(step, score);
            let best = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
            if best == f64::NEG_INFINITY {
                return Err(PipelineError::Diverged { stage: stage.to_string() });
            }
            log.extend(records);
            history.push(best);
            (self.observer)(&Event::Generation {
                stage: stage.to_string(),
                generation: g as u64,
                best,
                view_size: root.len(),
            });
        }
        let best = pop.best();
        Ok((best.theta.params.clone(), history, best.id, log))
    }

    fn surrogate_columns(&self) -> Vec<SurrogateColumn> {
        let root_idx = self.root.indices();
        let mut out = Vec::new();
        for rec in self.store.records() {
            let positions: Vec<usize> = rec
                .labels
                .sample_indices
                .iter()
                .filter_map(|g| root_idx.binary_search(g).ok())
                .collect();
            if positions.len() != rec.labels.len() {
                continue;
            }
            for col in &rec.labels.values {
                let bins = metrics::quantile_bin(col, self.config.n_bins);
                let mut distinct = bins.clone();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() < 2 {
                    continue;
                }
                let n = bins.len();
                out.push(SurrogateColumn {
                    positions: positions.clone(),
                    bins: Array2::from_shape_vec((n, 1), bins).expect("n x 1"),
                });
            }
        }
        out
    }

    /// Supervised PBT on the full root, scored by MIG against the stored
    /// surrogate labels.
    pub fn final_supervised(&mut self) -> Result<VaeParams, PipelineError> {
        if self.store.is_empty() {
            return Err(PipelineError::InvalidInput("no surrogate labels to train on".into()));
        }
        let columns = self.surrogate_columns();
        if columns.is_empty() {
            return Err(PipelineError::InvalidInput("surrogate labels carry no variation".into()));
        }
        let n_bins = self.config.n_bins;
        let root = self.root.clone();
        let all: Vec<usize> = (0..root.len()).collect();
        let eval = |p: &VaeParams| -> f64 {
            let Ok(mu) = encode_means(p, &root, &all) else {
                return f64::NEG_INFINITY;
            };
            let mut total = 0.0;
            let mut weight = 0.0;
            for c in &columns {
                let sub = mu.select(ndarray::Axis(0), &c.positions);
                match metrics::mig(sub.view(), c.bins.view(), n_bins) {
                    Ok(m) => {
                        total += m * c.positions.len() as f64;
                        weight += c.positions.len() as f64;
                    }
                    Err(_) => return f64::NEG_INFINITY,
                }
            }
            total / weight
        };
        let seed = derive_seed(self.config.seed, &[FINAL_STREAM]);
        let (params, history, best_member, log) = self.supervised_pbt("final", seed, eval)?;
        let summary = SupervisedSummary {
            stage: "final".into(),
            labeled_samples: self.store.labeled_samples().len(),
            label_columns: columns.len(),
            best_score: *history.last().expect("at least one generation"),
            score_history: history,
            best_member,
        };
        self.supervised = Some(SupervisedResult {
            params: params.clone(),
            summary,
            log,
        });
        Ok(params)
    }

    /// Supervised PBT against ground-truth factors on a seeded label subset
    /// of `label_budget` samples (all samples when unset).
    pub fn run_supervised(&mut self) -> Result<VaeParams, PipelineError> {
        let n = self.root.len();
        let budget = self.config.label_budget.unwrap_or(n);
        if budget > n {
            return Err(PipelineError::InvalidInput(format!(
                "label budget {budget} exceeds the {n} available samples"
            )));
        }
        let positions: Vec<usize> = if budget == n {
            (0..n).collect()
        } else {
            let mut rng = rng_for(self.config.seed, &[LABEL_STREAM]);
            let mut p = rand::seq::index::sample(&mut rng, n, budget).into_vec();
            p.sort_unstable();
            p
        };
        let k = self.config.dataset.num_factors();
        let factors = Array2::from_shape_fn((budget, k), |(i, j)| self.root.factors(positions[i])[j]);
        for (j, col) in factors.columns().into_iter().enumerate() {
            if metrics::entropy(&col.to_vec()) <= 0.0 {
                return Err(MetricsError::UndefinedEntropy(j).into());
            }
        }
        let (n_bins, metric) = (self.config.n_bins, self.config.eval_metric);
        let root = self.root.clone();
        let eval = |p: &VaeParams| -> f64 {
            let Ok(mu) = encode_means(p, &root, &positions) else {
                return f64::NEG_INFINITY;
            };
            let s = match metric {
                EvalMetric::Mig => metrics::mig(mu.view(), factors.view(), n_bins),
                EvalMetric::Dci => metrics::importance_from_mi(mu.view(), factors.view(), n_bins)
                    .and_then(|r| metrics::dci_disentanglement(&r)),
            };
            s.unwrap_or(f64::NEG_INFINITY)
        };
        let seed = derive_seed(self.config.seed, &[SUPERVISED_STREAM]);
        let (params, history, best_member, log) = self.supervised_pbt("supervised", seed, eval)?;
        let summary = SupervisedSummary {
            stage: "supervised".into(),
            labeled_samples: budget,
            label_columns: k,
            best_score: *history.last().expect("at least one generation"),
            score_history: history,
            best_member,
        };
        self.supervised = Some(SupervisedResult {
            params: params.clone(),
            summary,
            log,
        });
        Ok(params)
    }

    /// Only the initial metaEpoch; its best model is the result.
    pub fn run_unsupervised(&mut self) -> Result<VaeParams, PipelineError> {
        let root = self.root.clone();
        let res = self.run_metaepoch(&root, "root", self.meta_seed(0, 0))?;
        let params = res
            .best_params
            .clone()
            .ok_or(PipelineError::NothingLearned(res.termination))?;
        self.record_stage(res, 0, 0);
        Ok(params)
    }

    fn stage_report(&self, r: &MetaEpochResult) -> StageReport {
        let names = self.config.dataset.factor_names();
        let (factor_mi, dominant) = match &r.labels {
            Some(labels) => {
                let mi = stage_factor_mi(labels, &r.view, self.config.n_bins).unwrap_or_else(|_| Array2::zeros((0, 0)));
                let rows: Vec<Vec<f64>> = mi.rows().into_iter().map(|row| row.to_vec()).collect();
                let dom = rows
                    .iter()
                    .map(|row| {
                        let mut best = 0;
                        for (k, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = k;
                            }
                        }
                        names.get(best).cloned().unwrap_or_default()
                    })
                    .collect();
                (rows, dom)
            }
            None => (Vec::new(), Vec::new()),
        };
        StageReport {
            stage: r.stage.clone(),
            view_size: r.view.len(),
            generations: r.udr_history.len(),
            converged: r.converged,
            termination: r.termination,
            udr_history: r.udr_history.clone(),
            best_member: r.best_member,
            best_model: r.best_model,
            per_model_udr: r.per_model_udr.clone(),
            latent_kl: r.latent_kl.clone(),
            active_latents: r.active_latents.clone(),
            labeled_samples: r.labels.as_ref().map_or(0, LevTable::len),
            factor_mi,
            dominant_factors: dominant,
            ground_truth: r
                .best_params
                .as_ref()
                .and_then(|p| evaluate_ground_truth(p, &self.root, self.config.n_bins).ok()),
        }
    }

    /// Assembles the report; `final_params` is scored against ground truth.
    pub fn report(&self, mode: &str, final_params: Option<&VaeParams>) -> RunReport {
        RunReport {
            mode: mode.to_string(),
            seed: self.config.seed,
            dataset_size: self.root.len(),
            factor_names: self.config.dataset.factor_names(),
            stages: self.stages.iter().map(|s| self.stage_report(s)).collect(),
            leaves: self.leaves.clone(),
            reductions: self.reductions.iter().map(|(s, _)| s.clone()).collect(),
            label_columns: self.store.num_columns(),
            labeled_samples: self.store.labeled_samples().len(),
            supervised: self.supervised.as_ref().map(|s| s.summary.clone()),
            final_metrics: final_params.and_then(|p| evaluate_ground_truth(p, &self.root, self.config.n_bins).ok()),
            manifest: Vec::new(),
            config: self.config.clone(),
        }
    }
}

/// UDR of the VAEs held by one member.
pub fn member_udr(theta: &[TrainState], eval_view: &DatasetView, kl_mask_threshold: f64) -> Result<MemberUdr, UdrError> {
    let all: Vec<usize> = (0..eval_view.len()).collect();
    let codes = theta
        .iter()
        .map(|s| ModelCodes::from_model(&s.params, eval_view, &all))
        .collect::<Result<Vec<_>, _>>()?;
    udr_member(&codes, kl_mask_threshold)
}

/// Ground-truth factor table of a view, samples x factors.
pub fn factor_table(view: &DatasetView) -> Array2<usize> {
    let k = view.parent().spec().num_factors();
    Array2::from_shape_fn((view.len(), k), |(i, j)| view.factors(i)[j])
}

/// MI between each label column and each ground-truth factor.
pub fn stage_factor_mi(labels: &LevTable, view: &DatasetView, n_bins: usize) -> Result<Array2<f64>, PipelineError> {
    if labels.sample_indices != view.indices() {
        return Err(PipelineError::InvalidInput("labels do not belong to this view".into()));
    }
    let lev = labels.to_array();
    Ok(metrics::mi_matrix(lev.view(), factor_table(view).view(), n_bins)?)
}

/// MIG and DCI of a model's posterior means against ground truth.
pub fn evaluate_ground_truth(params: &VaeParams, view: &DatasetView, n_bins: usize) -> Result<GroundTruthMetrics, PipelineError> {
    let all: Vec<usize> = (0..view.len()).collect();
    let mu = encode_means(params, view, &all)?;
    let f = factor_table(view);
    let per = metrics::mig_per_factor(mu.view(), f.view(), n_bins)?;
    let r = metrics::importance_from_mi(mu.view(), f.view(), n_bins)?;
    Ok(GroundTruthMetrics {
        mig: per.iter().sum::<f64>() / per.len() as f64,
        mig_per_factor: per,
        dci_disentanglement: metrics::dci_disentanglement(&r).unwrap_or(0.0),
    })
}

/// Runs the full recursive pipeline and returns the final model and report.
pub fn run_rpu(config: RunConfig) -> Result<(VaeParams, RunReport), PipelineError> {
    let mut runner = Runner::new(config)?;
    let params = runner.run_rpu()?;
    let report = runner.report("rpu", Some(&params));
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FactorSpec;

    #[test]
    fn patience_rule_example() {
        let mut t = PatienceTracker::new(0.005, 5);
        let h = [0.2, 0.30, 0.301, 0.3005, 0.3009, 0.3012, 0.3011];
        let fired: Vec<bool> = h.iter().map(|&v| t.push(v)).collect();
        assert_eq!(fired, vec![false, false, false, false, false, false, true]);
    }

    #[test]
    fn patience_resets_on_jump() {
        let mut t = PatienceTracker::new(0.01, 2);
        assert!(!t.push(0.1));
        assert!(!t.push(0.1));
        assert!(!t.push(0.5));
        assert!(!t.push(0.5));
        assert!(t.push(0.5));
    }

    fn tiny() -> RunConfig {
        RunConfig {
            population_size: 2,
            models_per_member: 2,
            latent_dim: 2,
            hidden: vec![8],
            generation_cap: 2,
            epochs_per_step: 1,
            supervised_epochs: 1,
            max_leaf_runs: 0,
            dataset: FactorSpec::new(&[("x", 4), ("y", 4)], 8, 8),
            ..RunConfig::desk()
        }
    }

    #[test]
    fn small_view_ends_immediately() {
        let cfg = RunConfig { size_min: 20, ..tiny() };
        let mut r = Runner::new(cfg).unwrap();
        let root = r.root().clone();
        let res = r.run_metaepoch(&root, "root", 1).unwrap();
        assert_eq!(res.termination, Termination::DatasetTooSmall);
        assert!(res.udr_history.is_empty());
    }

    #[test]
    fn metaepoch_respects_generation_cap() {
        let mut r = Runner::new(tiny()).unwrap();
        let root = r.root().clone();
        let res = r.run_metaepoch(&root, "root", 1).unwrap();
        assert_eq!(res.udr_history.len(), 2);
        assert!(!res.converged);
        assert_eq!(res.log.len(), 4);
    }

    #[test]
    fn final_stage_needs_labels() {
        let mut r = Runner::new(tiny()).unwrap();
        assert!(matches!(r.final_supervised(), Err(PipelineError::InvalidInput(_))));
    }

    #[test]
    fn label_budget_above_dataset_rejected() {
        let cfg = RunConfig {
            label_budget: Some(17),
            ..tiny()
        };
        let mut r = Runner::new(cfg).unwrap();
        assert!(matches!(r.run_supervised(), Err(PipelineError::InvalidInput(_))));
    }

    #[test]
    fn supervised_run_is_reproducible() {
        let cfg = RunConfig {
            label_budget: Some(12),
            ..tiny()
        };
        let run = || {
            let mut r = Runner::new(cfg.clone()).unwrap();
            let p = r.run_supervised().unwrap();
            r.report("pbt-s", Some(&p)).to_json()
        };
        assert_eq!(run(), run());
    }
}
