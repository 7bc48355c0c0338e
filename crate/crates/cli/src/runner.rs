//! End-to-end experiment execution.
//!
//! Every random choice is keyed by the config seed plus a fixed label (and
//! fold, strategy and client where relevant), so folds and strategies can be
//! trained in parallel without changing any output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use fedhet_core::evalstats::{bootstrap_metric, cv_aggregate, significance_groups, BEST_GROUP_THRESHOLD};
use fedhet_core::fedcore::{
    ensemble_logits, model_soup, run_centralized, run_federated, run_local_only, ClientData,
};
use fedhet_core::nnet::{derive_image_model, forward, init_params, probabilities, save_checkpoint};
use fedhet_core::rng::{derive_seed, label_key};
use fedhet_core::synthdata::{
    generate_cohort, kfold_splits, partition_population, partition_strong, sample_population_subsets,
    stratified_split, Density,
};
use fedhet_core::{
    Batch, Cohort, FlConfig, MetricKind, ModelSpec, ParamVector, PredictionSet, TrainingHistory,
};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Setting, Strategy, Task, TEST_FRACTION};
use crate::data::{image_batch, patch_batch};
use crate::RunError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FoldId {
    Fold(usize),
    Cv,
}

impl fmt::Display for FoldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldId::Fold(i) => write!(f, "{}", i + 1),
            FoldId::Cv => f.write_str("cv"),
        }
    }
}

impl FoldId {
    /// Inverse of `Display`: folds are written 1-based.
    pub fn parse(s: &str) -> Option<FoldId> {
        if s == "cv" {
            return Some(FoldId::Cv);
        }
        s.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| FoldId::Fold(i - 1))
    }
}

/// One metric cell. Per-fold rows summarize the bootstrap replicates and
/// test them against the best model's replicates; CV rows summarize the
/// per-fold point values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub setting: String,
    pub task: String,
    pub subset: String,
    pub model: String,
    #[serde(serialize_with = "display")]
    pub fold: FoldId,
    pub metric: String,
    pub point: f64,
    pub boot_mean: f64,
    pub boot_std: f64,
    pub p_vs_best: f64,
    pub is_best: bool,
}

fn display<S: serde::Serializer>(v: &FoldId, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailedCell {
    pub task: String,
    pub model: String,
    #[serde(serialize_with = "display")]
    pub fold: FoldId,
    pub subset: String,
    pub metric: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub setting: String,
    pub fold_p_values: String,
    pub cv_p_values: String,
}

#[derive(Clone, Debug)]
pub struct HistoryRecord {
    pub task: Task,
    pub model: String,
    pub fold: usize,
    pub history: TrainingHistory,
}

/// A model as used for prediction: one parameter vector, or several whose
/// logits are averaged.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub spec: ModelSpec,
    pub members: Vec<ParamVector>,
}

impl Predictor {
    pub fn single(spec: ModelSpec, params: ParamVector) -> Self {
        Predictor {
            spec,
            members: vec![params],
        }
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>, RunError> {
        let logits = if self.members.len() == 1 {
            forward(&self.spec, &self.members[0], batch)?
        } else {
            ensemble_logits(&self.spec, &self.members, batch)?
        };
        Ok(probabilities(self.spec.output_size, &logits))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
    pub failures: Vec<FailedCell>,
    pub histories: Vec<HistoryRecord>,
    /// Checkpointable single models keyed by (task, model, fold).
    pub models: Vec<(Task, String, usize, ParamVector)>,
    pub provenance: Provenance,
    /// Per-fold cells implied by the config: models x folds x subsets x
    /// metrics. Equals per-fold rows plus per-fold failures.
    pub expected_fold_cells: usize,
}

impl ExperimentResult {
    pub fn fold_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.fold != FoldId::Cv)
    }

    /// Point values of `model` for a (task, subset, metric), by fold.
    pub fn points(&self, task: Task, subset: &str, metric: MetricKind, model: &str) -> Vec<f64> {
        self.fold_rows()
            .filter(|r| r.task == task.name() && r.subset == subset && r.metric == metric.name() && r.model == model)
            .map(|r| r.point)
            .collect()
    }
}

pub fn metrics_for(task: Task) -> &'static [MetricKind] {
    match task {
        Task::Patch => &[MetricKind::Accuracy, MetricKind::AucOvr, MetricKind::AucOvo],
        Task::WholeImage => &[MetricKind::Auc, MetricKind::Accuracy],
    }
}

/// Model rows in table order.
pub fn model_names(cfg: &ExperimentConfig) -> Vec<(Strategy, String)> {
    let mut out = Vec::new();
    for &s in &cfg.strategies {
        match s {
            Strategy::Local => {
                for n in cfg.client_names() {
                    out.push((s, format!("Local{n}")));
                }
            }
            Strategy::Centralized => out.push((s, "Centralized".into())),
            Strategy::FedAvg => out.push((s, "FedAvg".into())),
            Strategy::FedProx => out.push((s, "FedProx".into())),
            Strategy::Scaffold => out.push((s, "Scaffold".into())),
            Strategy::Ensemble => out.push((s, "Ensemble".into())),
            Strategy::Soup => out.push((s, "ModelSoup".into())),
        }
    }
    out
}

/// Evaluation subsets of the test cohort.
pub fn test_subsets(cfg: &ExperimentConfig, test: &Cohort) -> Result<Vec<(String, Cohort)>, RunError> {
    let mut out = vec![("overall".to_owned(), test.clone())];
    match cfg.setting {
        Setting::Strong2 | Setting::Strong4 => {
            out.push(("low_density".into(), test.filter_density(|d| !d.is_dense())));
            out.push(("high_density".into(), test.filter_density(Density::is_dense)));
        }
        Setting::Population => {
            let parts = sample_population_subsets(test, &cfg.population_targets, key(cfg.seed, &["population-test"]))?;
            out.push(("population".into(), Cohort::merge(&parts)));
            for (t, p) in cfg.population_targets.iter().zip(parts) {
                out.push((t.name.to_lowercase(), p));
            }
        }
    }
    Ok(out)
}

fn key(seed: u64, labels: &[&str]) -> u64 {
    let mut parts = vec![seed];
    parts.extend(labels.iter().map(|l| label_key(l)));
    derive_seed(&parts)
}

fn fold_key(seed: u64, fold: usize, labels: &[&str], extra: u64) -> u64 {
    let mut parts = vec![seed, fold as u64];
    parts.extend(labels.iter().map(|l| label_key(l)));
    parts.push(extra);
    derive_seed(&parts)
}

/// Cohort, test set and folds shared by every fold's training.
pub struct Prepared {
    pub test: Cohort,
    pub folds: Vec<(Cohort, Cohort)>,
    pub subsets: Vec<(String, Cohort)>,
    /// Test batches per task, one per subset.
    pub test_batches: BTreeMap<Task, Vec<Batch>>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, RunError> {
    let cohort = generate_cohort(&cfg.generator, key(cfg.seed, &["cohort"]))?;
    let mut parts = stratified_split(&cohort, &[1.0 - TEST_FRACTION, TEST_FRACTION], key(cfg.seed, &["split"]))?;
    let test = parts.pop().expect("two parts");
    let dev = parts.pop().expect("two parts");
    let folds = kfold_splits(&dev, cfg.folds, key(cfg.seed, &["folds"]))?;
    let subsets = test_subsets(cfg, &test)?;
    let mut test_batches = BTreeMap::new();
    for &task in &cfg.tasks {
        let batches = subsets
            .iter()
            .map(|(_, c)| task_batch(cfg, task, c, key(cfg.seed, &["test-patches"])))
            .collect::<Result<Vec<_>, _>>()?;
        test_batches.insert(task, batches);
    }
    Ok(Prepared {
        test,
        folds,
        subsets,
        test_batches,
    })
}

pub fn task_batch(cfg: &ExperimentConfig, task: Task, cohort: &Cohort, seed: u64) -> Result<Batch, RunError> {
    match task {
        Task::Patch => patch_batch(cohort, cfg.generator.patch_size, seed),
        Task::WholeImage => Ok(image_batch(cohort)?),
    }
}

pub fn partition_clients(cfg: &ExperimentConfig, train: &Cohort, fold: usize) -> Result<Vec<Cohort>, RunError> {
    Ok(match cfg.setting {
        Setting::Strong2 => partition_strong(train, 2)?,
        Setting::Strong4 => partition_strong(train, 4)?,
        Setting::Population => partition_population(
            train,
            &cfg.population_targets,
            fold_key(cfg.seed, fold, &["partition"], 0),
        )?,
    })
}

/// Trained models of one strategy: one per client for local training.
struct JobOutput {
    patch: Vec<ParamVector>,
    image: Option<(ModelSpec, Vec<ParamVector>)>,
    histories: Vec<HistoryRecord>,
}

struct FoldInputs<'a> {
    cfg: &'a ExperimentConfig,
    fold: usize,
    names: Vec<String>,
    patch_clients: Vec<ClientData>,
    image_clients: Vec<ClientData>,
    patch_val: Option<Batch>,
    image_val: Option<Batch>,
}

impl FoldInputs<'_> {
    fn needs_images(&self) -> bool {
        self.cfg.tasks.contains(&Task::WholeImage)
    }

    fn fl_config(&self, base: &FlConfig, strategy: Strategy, task: Task) -> FlConfig {
        FlConfig {
            algorithm: strategy.algorithm().unwrap_or(base.algorithm),
            seed: fold_key(self.cfg.seed, self.fold, &[strategy.name(), task.name()], 0),
            ..base.clone()
        }
    }

    fn validator(&self, task: Task, spec: &ModelSpec) -> impl Fn(usize, &ParamVector) -> Option<f64> + Sync + '_ {
        let every = self.cfg.validation_every;
        let (val, metric) = match task {
            Task::Patch => (self.patch_val.as_ref(), MetricKind::AucOvr),
            Task::WholeImage => (self.image_val.as_ref(), MetricKind::Auc),
        };
        let spec = spec.clone();
        move |round, params| {
            let val = val?;
            if every == 0 || (round + 1) % every != 0 {
                return None;
            }
            let logits = forward(&spec, params, val).ok()?;
            let probs = probabilities(spec.output_size, &logits);
            let pred = PredictionSet::new(spec.output_size, probs, val.labels.clone(), "", 0).ok()?;
            metric.compute(&pred).ok()
        }
    }

    fn union(clients: &[ClientData]) -> Result<Batch, RunError> {
        Ok(Batch::concat(clients.iter().map(|c| c.data.as_ref()))?)
    }

    fn history(&self, task: Task, model: String, history: TrainingHistory) -> HistoryRecord {
        HistoryRecord {
            task,
            model,
            fold: self.fold,
            history,
        }
    }

    /// Trains `strategy` on the patch task, then (if requested) derives and
    /// trains the whole-image model with the same strategy.
    fn run_job(&self, strategy: Strategy) -> Result<JobOutput, RunError> {
        let cfg = self.cfg;
        let pspec = ModelSpec::patch_classifier();
        let patch_cfg = self.fl_config(&cfg.fl, strategy, Task::Patch);
        let image_cfg = self.fl_config(&cfg.image_fl, strategy, Task::WholeImage);
        let shared_init = || init_params(&pspec, fold_key(cfg.seed, self.fold, &["patch-init"], 0));
        let local_init = |i: usize| init_params(&pspec, fold_key(cfg.seed, self.fold, &["local-init"], i as u64));
        let head_seed = |i: usize| fold_key(cfg.seed, self.fold, &["image-head", strategy.name()], i as u64);
        let pval = self.validator(Task::Patch, &pspec);
        let mut histories = Vec::new();
        let mut output = JobOutput {
            patch: Vec::new(),
            image: None,
            histories: Vec::new(),
        };

        match strategy {
            Strategy::Local => {
                let inits = (0..self.names.len()).map(local_init).collect::<Result<Vec<_>, _>>()?;
                let trained = run_local_only(&pspec, &inits, &self.patch_clients, &patch_cfg)?;
                for (name, (p, h)) in self.names.iter().zip(trained) {
                    histories.push(self.history(Task::Patch, format!("Local{name}"), h));
                    output.patch.push(p);
                }
                if self.needs_images() {
                    let mut ispec = None;
                    let mut inits = Vec::new();
                    for (i, p) in output.patch.iter().enumerate() {
                        let (s, init) = derive_image_model(&pspec, p, &cfg.image_head, head_seed(i))?;
                        ispec = Some(s);
                        inits.push(init);
                    }
                    let ispec = ispec.expect("at least one client");
                    let trained = run_local_only(&ispec, &inits, &self.image_clients, &image_cfg)?;
                    let mut models = Vec::new();
                    for (name, (p, h)) in self.names.iter().zip(trained) {
                        histories.push(self.history(Task::WholeImage, format!("Local{name}"), h));
                        models.push(p);
                    }
                    output.image = Some((ispec, models));
                }
            }
            Strategy::Centralized => {
                let (p, h) = run_centralized(&pspec, &shared_init()?, &Self::union(&self.patch_clients)?, &patch_cfg, Some(&pval))?;
                histories.push(self.history(Task::Patch, "Centralized".into(), h));
                if self.needs_images() {
                    let (ispec, init) = derive_image_model(&pspec, &p, &cfg.image_head, head_seed(0))?;
                    let ival = self.validator(Task::WholeImage, &ispec);
                    let (ip, ih) = run_centralized(&ispec, &init, &Self::union(&self.image_clients)?, &image_cfg, Some(&ival))?;
                    histories.push(self.history(Task::WholeImage, "Centralized".into(), ih));
                    output.image = Some((ispec, vec![ip]));
                }
                output.patch.push(p);
            }
            Strategy::FedAvg | Strategy::FedProx | Strategy::Scaffold => {
                let name = model_names_for(strategy);
                let (p, h) = run_federated(&pspec, &shared_init()?, &self.patch_clients, &patch_cfg, Some(&pval))?;
                histories.push(self.history(Task::Patch, name.clone(), h));
                if self.needs_images() {
                    let (ispec, init) = derive_image_model(&pspec, &p, &cfg.image_head, head_seed(0))?;
                    let ival = self.validator(Task::WholeImage, &ispec);
                    let (ip, ih) = run_federated(&ispec, &init, &self.image_clients, &image_cfg, Some(&ival))?;
                    histories.push(self.history(Task::WholeImage, name, ih));
                    output.image = Some((ispec, vec![ip]));
                }
                output.patch.push(p);
            }
            Strategy::Ensemble | Strategy::Soup => unreachable!("derived strategies are not trained"),
        }
        output.histories = histories;
        Ok(output)
    }
}

fn model_names_for(strategy: Strategy) -> String {
    match strategy {
        Strategy::FedAvg => "FedAvg",
        Strategy::FedProx => "FedProx",
        Strategy::Scaffold => "Scaffold",
        Strategy::Centralized => "Centralized",
        Strategy::Ensemble => "Ensemble",
        Strategy::Soup => "ModelSoup",
        Strategy::Local => "Local",
    }
    .to_owned()
}

/// Trained predictors of one fold, per task, in [`model_names`] order.
pub struct FoldModels {
    pub fold: usize,
    pub predictors: BTreeMap<Task, Vec<(String, Result<Predictor, String>)>>,
    pub histories: Vec<HistoryRecord>,
}

/// Partitions fold `fold`'s training data and trains every requested
/// strategy.
pub fn train_fold(cfg: &ExperimentConfig, prepared: &Prepared, fold: usize) -> Result<FoldModels, RunError> {
    let (train, val) = &prepared.folds[fold];
    let clients = partition_clients(cfg, train, fold)?;
    let names = cfg.client_names();
    let patch_seed = fold_key(cfg.seed, fold, &["train-patches"], 0);
    let patch_clients = clients
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(ClientData::new(i, patch_batch(c, cfg.generator.patch_size, patch_seed)?)))
        .collect::<Result<Vec<_>, RunError>>()?;
    let needs_images = cfg.tasks.contains(&Task::WholeImage);
    let image_clients = if needs_images {
        clients
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(ClientData::new(i, image_batch(c)?)))
            .collect::<Result<Vec<_>, RunError>>()?
    } else {
        Vec::new()
    };
    let validation = cfg.validation_every > 0 && !val.is_empty();
    let inputs = FoldInputs {
        cfg,
        fold,
        names: names.clone(),
        patch_clients,
        image_clients,
        patch_val: if validation {
            Some(patch_batch(val, cfg.generator.patch_size, patch_seed)?)
        } else {
            None
        },
        image_val: if validation && needs_images {
            Some(image_batch(val)?)
        } else {
            None
        },
    };

    let mut jobs: Vec<Strategy> = cfg.strategies.iter().copied().filter(|s| !s.is_derived()).collect();
    if cfg.strategies.iter().any(|s| s.is_derived()) && !jobs.contains(&Strategy::Local) {
        jobs.insert(0, Strategy::Local);
    }
    let outputs: BTreeMap<Strategy, Result<JobOutput, String>> = jobs
        .par_iter()
        .map(|&s| (s, inputs.run_job(s).map_err(|e| e.to_string())))
        .collect();

    let pspec = ModelSpec::patch_classifier();
    let mut predictors = BTreeMap::new();
    for &task in &cfg.tasks {
        let models_of = |s: Strategy| -> Result<(ModelSpec, Vec<ParamVector>), String> {
            let out = outputs[&s].as_ref().map_err(|e| format!("{} training failed: {e}", s.name()))?;
            Ok(match task {
                Task::Patch => (pspec.clone(), out.patch.clone()),
                Task::WholeImage => out.image.clone().expect("image stage ran"),
            })
        };
        let mut list = Vec::new();
        for (strategy, name) in model_names(cfg) {
            let entry = match strategy {
                Strategy::Local => {
                    let i = names.iter().position(|n| format!("Local{n}") == name).expect("client name");
                    models_of(strategy).map(|(spec, m)| Predictor::single(spec, m[i].clone()))
                }
                Strategy::Ensemble => models_of(Strategy::Local)
                    .map(|(spec, m)| Predictor { spec, members: m })
                    .map_err(|e| format!("ensemble needs local models: {e}")),
                Strategy::Soup => models_of(Strategy::Local)
                    .map_err(|e| format!("soup needs local models: {e}"))
                    .and_then(|(spec, m)| {
                        model_soup(&m)
                            .map(|p| Predictor::single(spec, p))
                            .map_err(|e| e.to_string())
                    }),
                _ => models_of(strategy).map(|(spec, mut m)| Predictor::single(spec, m.remove(0))),
            };
            list.push((name, entry));
        }
        predictors.insert(task, list);
    }
    let histories = outputs
        .into_values()
        .filter_map(Result::ok)
        .flat_map(|o| o.histories)
        .collect();
    Ok(FoldModels {
        fold,
        predictors,
        histories,
    })
}

/// Per-fold cells of one (task, subset, metric), with replicates kept for
/// the significance tests.
struct FoldCells {
    rows: Vec<MetricRow>,
    failures: Vec<FailedCell>,
}

fn bootstrap_seed(cfg: &ExperimentConfig, task: Task, subset: &str) -> u64 {
    key(cfg.seed, &["bootstrap", task.name(), subset])
}

fn evaluate_fold(cfg: &ExperimentConfig, prepared: &Prepared, models: &FoldModels) -> FoldCells {
    let fold = models.fold;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&task, list) in &models.predictors {
        let batches = &prepared.test_batches[&task];
        for ((subset, _), batch) in prepared.subsets.iter().zip(batches) {
            // Predictions per model; failures become failed cells for every metric.
            let preds: Vec<(String, Result<PredictionSet, String>)> = list
                .par_iter()
                .map(|(name, p)| {
                    let pred = p.as_ref().map_err(Clone::clone).and_then(|p| {
                        let probs = p.predict(batch).map_err(|e| e.to_string())?;
                        PredictionSet::new(p.spec.output_size, probs, batch.labels.clone(), name.clone(), fold as u64)
                            .map_err(|e| e.to_string())
                    });
                    (name.clone(), pred)
                })
                .collect();
            for &metric in metrics_for(task) {
                let mut ok: Vec<(String, fedhet_core::MetricResult)> = Vec::new();
                for (name, pred) in &preds {
                    let result = pred
                        .as_ref()
                        .map_err(Clone::clone)
                        .and_then(|p| bootstrap_metric(metric, p, cfg.bootstrap, bootstrap_seed(cfg, task, subset)).map_err(|e| e.to_string()));
                    match result {
                        Ok(r) => ok.push((name.clone(), r)),
                        Err(reason) => failures.push(FailedCell {
                            task: task.name().into(),
                            model: name.clone(),
                            fold: FoldId::Fold(fold),
                            subset: subset.clone(),
                            metric: metric.name().into(),
                            reason,
                        }),
                    }
                }
                let groups = if ok.len() >= 2 {
                    let cells: Vec<(String, Vec<f64>)> = ok.iter().map(|(n, r)| (n.clone(), r.replicates.clone())).collect();
                    significance_groups(&cells, BEST_GROUP_THRESHOLD)
                        .map(|g| g.into_iter().map(|c| (c.p_vs_best, c.is_best_group)).collect())
                        .unwrap_or_else(|_| vec![(f64::NAN, false); ok.len()])
                } else {
                    vec![(1.0, true); ok.len()]
                };
                for ((name, r), (p, best)) in ok.into_iter().zip(groups) {
                    rows.push(MetricRow {
                        setting: cfg.setting.name().into(),
                        task: task.name().into(),
                        subset: subset.clone(),
                        model: name,
                        fold: FoldId::Fold(fold),
                        metric: metric.name().into(),
                        point: r.point,
                        boot_mean: r.boot_mean,
                        boot_std: r.boot_std,
                        p_vs_best: p,
                        is_best: best,
                    });
                }
            }
        }
    }
    FoldCells { rows, failures }
}

/// CV rows over the per-fold point values of models present in every fold.
fn cv_rows(cfg: &ExperimentConfig, fold_rows: &[MetricRow]) -> Vec<MetricRow> {
    if cfg.run_folds.len() < 2 {
        return Vec::new();
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in fold_rows {
        groups
            .entry((r.task.clone(), r.subset.clone(), r.metric.clone()))
            .or_default()
            .push(r);
    }
    let order: Vec<String> = model_names(cfg).into_iter().map(|(_, n)| n).collect();
    let mut out = Vec::new();
    for ((task, subset, metric), rows) in groups {
        let mut cells = Vec::new();
        for name in &order {
            let mut points: Vec<(FoldId, f64)> = rows.iter().filter(|r| &r.model == name).map(|r| (r.fold, r.point)).collect();
            points.sort_by_key(|p| p.0);
            if points.len() == cfg.run_folds.len() {
                cells.push((name.clone(), points.into_iter().map(|p| p.1).collect::<Vec<f64>>()));
            }
        }
        let stats: Vec<(f64, bool)> = if cells.len() >= 2 {
            significance_groups(&cells, BEST_GROUP_THRESHOLD)
                .map(|g| g.into_iter().map(|c| (c.p_vs_best, c.is_best_group)).collect())
                .unwrap_or_else(|_| vec![(f64::NAN, false); cells.len()])
        } else {
            vec![(1.0, true); cells.len()]
        };
        for ((name, values), (p, best)) in cells.into_iter().zip(stats) {
            let (mean, std) = cv_aggregate(&values).expect("at least two folds");
            out.push(MetricRow {
                setting: cfg.setting.name().into(),
                task: task.clone(),
                subset: subset.clone(),
                model: name,
                fold: FoldId::Cv,
                metric: metric.clone(),
                point: mean,
                boot_mean: mean,
                boot_std: std,
                p_vs_best: p,
                is_best: best,
            });
        }
    }
    out
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    // Output location does not affect results.
    let canonical = ExperimentConfig {
        output_dir: None,
        ..cfg.clone()
    };
    let digest = Sha256::digest(format!("{canonical:?}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the configured experiment. Failures of individual strategies or
/// cells are recorded in the result; only data preparation errors abort.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, RunError> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let outcomes: Vec<(usize, Result<(FoldModels, FoldCells), String>)> = cfg
        .run_folds
        .par_iter()
        .map(|&f| {
            let r = train_fold(cfg, &prepared, f)
                .map(|m| {
                    let cells = evaluate_fold(cfg, &prepared, &m);
                    (m, cells)
                })
                .map_err(|e| e.to_string());
            (f, r)
        })
        .collect();

    let names = model_names(cfg);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut histories = Vec::new();
    let mut models = Vec::new();
    for (fold, outcome) in outcomes {
        match outcome {
            Ok((m, cells)) => {
                rows.extend(cells.rows);
                failures.extend(cells.failures);
                histories.extend(m.histories);
                for (task, list) in m.predictors {
                    for (name, p) in list {
                        if let Ok(p) = p {
                            if p.members.len() == 1 {
                                models.push((task, name, fold, p.members.into_iter().next().expect("one member")));
                            }
                        }
                    }
                }
            }
            Err(reason) => {
                for &task in &cfg.tasks {
                    for (_, name) in &names {
                        for (subset, _) in &prepared.subsets {
                            for metric in metrics_for(task) {
                                failures.push(FailedCell {
                                    task: task.name().into(),
                                    model: name.clone(),
                                    fold: FoldId::Fold(fold),
                                    subset: subset.clone(),
                                    metric: metric.name().into(),
                                    reason: reason.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    let cv = cv_rows(cfg, &rows);
    rows.extend(cv);
    let expected_fold_cells = cfg
        .tasks
        .iter()
        .map(|&t| names.len() * cfg.run_folds.len() * prepared.subsets.len() * metrics_for(t).len())
        .sum();
    histories.sort_by(|a: &HistoryRecord, b: &HistoryRecord| (a.task, &a.model, a.fold).cmp(&(b.task, &b.model, b.fold)));
    Ok(ExperimentResult {
        config: cfg.clone(),
        rows,
        failures,
        histories,
        models,
        provenance: Provenance {
            config_sha256: config_hash(cfg),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            setting: cfg.setting.name().into(),
            fold_p_values: format!(
                "Wilcoxon signed-rank vs best over {} paired bootstrap replicates (shared resample indices)",
                cfg.bootstrap
            ),
            cv_p_values: "Wilcoxon signed-rank vs best over paired per-fold point values".into(),
        },
        expected_fold_cells,
    })
}

/// Writes metrics.csv, failures.csv, provenance.json, per-run histories,
/// checkpoints and report.md under `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir.join("history"))?;
    fs::create_dir_all(dir.join("models"))?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for r in &result.rows {
        w.serialize(r)?;
    }
    if result.rows.is_empty() {
        w.write_record([
            "setting", "task", "subset", "model", "fold", "metric", "point", "boot_mean", "boot_std", "p_vs_best",
            "is_best",
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["task", "model", "fold", "subset", "metric", "reason"])?;
    for f in &result.failures {
        w.write_record([
            f.task.clone(),
            f.model.clone(),
            f.fold.to_string(),
            f.subset.clone(),
            f.metric.clone(),
            f.reason.clone(),
        ])?;
    }
    w.flush()?;
    let provenance = serde_json::to_string_pretty(&result.provenance).map_err(|e| RunError::Other(e.to_string()))?;
    fs::write(dir.join("provenance.json"), provenance + "\n")?;
    for h in &result.histories {
        let name = format!("{}_{}_fold{}.csv", h.task.name(), h.model, h.fold + 1);
        fs::write(dir.join("history").join(name), h.history.to_csv(result.config.timings))?;
    }
    for (task, name, fold, params) in &result.models {
        let file = format!("{}_{}_fold{}.fhw", task.name(), name, fold + 1);
        save_checkpoint(params, &dir.join("models").join(file))?;
    }
    let report = crate::report::emit_report(&result.rows, crate::ReportFormat::Markdown)?;
    fs::write(dir.join("report.md"), report)?;
    Ok(())
}
