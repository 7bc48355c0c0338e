//! Experiment configuration: TOML schema, defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use fedhet_core::nnet::ImageHeadConfig;
use fedhet_core::synthdata::PopulationTarget;
use fedhet_core::{Algorithm, FlConfig, GeneratorConfig};
use serde::Deserialize;
use thiserror::Error;

pub const SEED_ENV: &str = "FEDHET_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Strong2,
    Strong4,
    Population,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Strong2 => "strong2",
            Setting::Strong4 => "strong4",
            Setting::Population => "population",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Local,
    Centralized,
    FedAvg,
    FedProx,
    Scaffold,
    Ensemble,
    Soup,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Local,
        Strategy::Centralized,
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::Scaffold,
        Strategy::Ensemble,
        Strategy::Soup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Local => "local",
            Strategy::Centralized => "centralized",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::Scaffold => "scaffold",
            Strategy::Ensemble => "ensemble",
            Strategy::Soup => "soup",
        }
    }

    pub fn algorithm(self) -> Option<Algorithm> {
        match self {
            Strategy::FedAvg => Some(Algorithm::FedAvg),
            Strategy::FedProx => Some(Algorithm::FedProx),
            Strategy::Scaffold => Some(Algorithm::Scaffold),
            _ => None,
        }
    }

    /// Built from the local models rather than trained.
    pub fn is_derived(self) -> bool {
        matches!(self, Strategy::Ensemble | Strategy::Soup)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Patch,
    WholeImage,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Patch => "patch",
            Task::WholeImage => "whole_image",
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    n_patients: Option<usize>,
    images_per_patient: Option<usize>,
    density_marginal: Option<[f64; 4]>,
    lesion_prevalence: Option<f64>,
    malignant_fraction: Option<f64>,
    other_fraction: Option<f64>,
    second_lesion_fraction: Option<f64>,
    contrast_by_density: Option<[f64; 4]>,
    noise_sigma: Option<f64>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFl {
    rounds: Option<usize>,
    local_steps: Option<usize>,
    lr: Option<f64>,
    prox_mu: Option<f64>,
    server_lr: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    name: String,
    dense_fraction: Option<f64>,
    distribution: Option<[f64; 4]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    targets: Option<Vec<RawTarget>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHead {
    residual_channels: Option<usize>,
    hidden: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    setting: Setting,
    seed: Option<u64>,
    folds: Option<usize>,
    run_folds: Option<Vec<usize>>,
    bootstrap: Option<usize>,
    strategies: Option<Vec<Strategy>>,
    tasks: Option<Vec<Task>>,
    output_dir: Option<PathBuf>,
    validation_every: Option<usize>,
    timings: Option<bool>,
    #[serde(default)]
    generator: RawGenerator,
    #[serde(default)]
    fl: RawFl,
    #[serde(default)]
    image_fl: RawFl,
    #[serde(default)]
    population: RawPopulation,
    #[serde(default)]
    image_head: RawHead,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub seed: u64,
    pub folds: usize,
    /// Folds to execute; all of `0..folds` unless restricted.
    pub run_folds: Vec<usize>,
    pub bootstrap: usize,
    pub strategies: Vec<Strategy>,
    pub tasks: Vec<Task>,
    pub output_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    /// Hyperparameters for patch-classifier training. The algorithm field is
    /// overridden per strategy.
    pub fl: FlConfig,
    /// Hyperparameters for whole-image training.
    pub image_fl: FlConfig,
    pub population_targets: Vec<PopulationTarget>,
    pub image_head: ImageHeadConfig,
    /// Record the validation metric every this many rounds (0 disables).
    pub validation_every: usize,
    /// Write wall-clock seconds into histories; makes outputs run-dependent.
    pub timings: bool,
}

pub const TEST_FRACTION: f64 = 0.2;

pub fn default_patch_fl() -> FlConfig {
    FlConfig::default()
}

pub fn default_image_fl() -> FlConfig {
    FlConfig {
        rounds: 20,
        local_steps: 10,
        lr: 0.15,
        batch_size: 16,
        ..FlConfig::default()
    }
}

impl ExperimentConfig {
    /// Defaults for a setting, as produced by a config naming only `setting`.
    pub fn defaults(setting: Setting) -> Self {
        resolve(RawConfig {
            setting,
            seed: None,
            folds: None,
            run_folds: None,
            bootstrap: None,
            strategies: None,
            tasks: None,
            output_dir: None,
            validation_every: None,
            timings: None,
            generator: RawGenerator::default(),
            fl: RawFl::default(),
            image_fl: RawFl::default(),
            population: RawPopulation::default(),
            image_head: RawHead::default(),
        })
        .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.setting == Setting::Strong4 && self.tasks != [Task::WholeImage] {
            return bad("setting strong4 is only run for the whole-image classifier: tasks must be [\"whole_image\"]".into());
        }
        if self.bootstrap == 0 {
            return bad("bootstrap must be >= 1".into());
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        if self.run_folds.is_empty() {
            return bad("run_folds must not be empty".into());
        }
        if let Some(f) = self.run_folds.iter().find(|&&f| f >= self.folds) {
            return bad(format!("run_folds entry {f} is not below folds = {}", self.folds));
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty".into());
        }
        if self.tasks.is_empty() {
            return bad("tasks must not be empty".into());
        }
        self.generator
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("generator: {e}")))?;
        self.fl.validate().map_err(|e| ConfigError::Invalid(format!("fl: {e}")))?;
        self.image_fl
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("image_fl: {e}")))?;
        if self.image_head.residual_channels == 0 || self.image_head.head_hidden.contains(&0) {
            return bad("image_head widths must be positive".into());
        }
        if self.setting == Setting::Population {
            if self.population_targets.len() < 2 {
                return bad("population setting needs at least two targets".into());
            }
            for t in &self.population_targets {
                let sum: f64 = t.distribution.iter().sum();
                if t.distribution.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                    return bad(format!("population target {} is not a distribution", t.name));
                }
            }
        }
        Ok(())
    }

    /// Number of clients implied by the setting.
    pub fn n_clients(&self) -> usize {
        match self.setting {
            Setting::Strong2 => 2,
            Setting::Strong4 => 4,
            Setting::Population => self.population_targets.len(),
        }
    }

    /// Client display names in partition order.
    pub fn client_names(&self) -> Vec<String> {
        match self.setting {
            Setting::Strong2 => vec!["Low".into(), "High".into()],
            Setting::Strong4 => ["A", "B", "C", "D"].map(String::from).to_vec(),
            Setting::Population => self.population_targets.iter().map(|t| t.name.clone()).collect(),
        }
    }
}

fn fl_from(raw: &RawFl, base: FlConfig) -> FlConfig {
    FlConfig {
        rounds: raw.rounds.unwrap_or(base.rounds),
        local_steps: raw.local_steps.unwrap_or(base.local_steps),
        lr: raw.lr.unwrap_or(base.lr),
        prox_mu: raw.prox_mu.unwrap_or(base.prox_mu),
        server_lr: raw.server_lr.unwrap_or(base.server_lr),
        batch_size: raw.batch_size.unwrap_or(base.batch_size),
        ..base
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let d = GeneratorConfig::default();
    let g = &raw.generator;
    let base_marginal = g.density_marginal.unwrap_or(d.density_marginal);

    let population_targets = match &raw.population.targets {
        None => PopulationTarget::defaults(&base_marginal),
        Some(list) => list
            .iter()
            .map(|t| match (t.dense_fraction, t.distribution) {
                (Some(f), None) => Ok(PopulationTarget::from_dense_fraction(t.name.clone(), f, &base_marginal)),
                (None, Some(dist)) => Ok(PopulationTarget::new(t.name.clone(), dist)),
                _ => Err(ConfigError::Invalid(format!(
                    "population target {}: give exactly one of dense_fraction or distribution",
                    t.name
                ))),
            })
            .collect::<Result<_, _>>()?,
    };
    // An exhaustive partition can only match the targets if the pool's
    // density mix is close to their mean.
    let density_marginal = match (raw.setting, g.density_marginal) {
        (Setting::Population, None) if !population_targets.is_empty() => std::array::from_fn(|k| {
            population_targets.iter().map(|t| t.distribution[k]).sum::<f64>() / population_targets.len() as f64
        }),
        _ => base_marginal,
    };
    let generator = GeneratorConfig {
        n_patients: g.n_patients.unwrap_or(d.n_patients),
        images_per_patient: g.images_per_patient.unwrap_or(d.images_per_patient),
        density_marginal,
        lesion_prevalence: g.lesion_prevalence.unwrap_or(d.lesion_prevalence),
        malignant_fraction: g.malignant_fraction.unwrap_or(d.malignant_fraction),
        other_fraction: g.other_fraction.unwrap_or(d.other_fraction),
        second_lesion_fraction: g.second_lesion_fraction.unwrap_or(d.second_lesion_fraction),
        contrast_by_density: g.contrast_by_density.unwrap_or(d.contrast_by_density),
        noise_sigma: g.noise_sigma.unwrap_or(d.noise_sigma),
        image_size: g.image_size.unwrap_or(d.image_size),
        patch_size: g.patch_size.unwrap_or(d.patch_size),
    };

    let folds = raw.folds.unwrap_or(5);
    let mut strategies = raw.strategies.unwrap_or_else(|| Strategy::ALL.to_vec());
    strategies.sort();
    strategies.dedup();
    let mut tasks = raw.tasks.unwrap_or_else(|| match raw.setting {
        Setting::Strong4 => vec![Task::WholeImage],
        _ => vec![Task::Patch, Task::WholeImage],
    });
    tasks.sort();
    tasks.dedup();
    let mut run_folds = raw.run_folds.unwrap_or_else(|| (0..folds).collect());
    run_folds.sort();
    run_folds.dedup();
    let head_default = ImageHeadConfig::default();

    let cfg = ExperimentConfig {
        setting: raw.setting,
        seed: raw.seed.unwrap_or(0),
        folds,
        run_folds,
        bootstrap: raw.bootstrap.unwrap_or(100),
        strategies,
        tasks,
        output_dir: raw.output_dir,
        generator,
        fl: fl_from(&raw.fl, default_patch_fl()),
        image_fl: fl_from(&raw.image_fl, default_image_fl()),
        population_targets,
        image_head: ImageHeadConfig {
            residual_channels: raw.image_head.residual_channels.unwrap_or(head_default.residual_channels),
            head_hidden: raw.image_head.hidden.unwrap_or(head_default.head_hidden),
        },
        validation_every: raw.validation_every.unwrap_or(10),
        timings: raw.timings.unwrap_or(false),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and validates TOML text. `seed_override` replaces the configured
/// seed.
pub fn parse_config_str(text: &str, seed_override: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
    let mut raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(s) = seed_override {
        raw.seed = Some(s);
    }
    resolve(raw)
}

/// Reads `path`; a `FEDHET_SEED` environment variable overrides the seed.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    parse_config_str(&text, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str("setting = \"strong2\"\n", None).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(Setting::Strong2));
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.bootstrap, 100);
        assert_eq!(cfg.strategies.len(), 7);
        assert_eq!(cfg.tasks, vec![Task::Patch, Task::WholeImage]);
        assert_eq!(cfg.fl.rounds, 30);
        assert_eq!(cfg.run_folds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn strong4_requires_whole_image_only() {
        let err = parse_config_str("setting = \"strong4\"\ntasks = [\"patch\"]\n", None).unwrap_err();
        assert!(err.to_string().contains("whole-image"), "{err}");
        let ok = parse_config_str("setting = \"strong4\"\n", None).unwrap();
        assert_eq!(ok.tasks, vec![Task::WholeImage]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config_str("setting = \"strong2\"\nfedavgg = 1\n", None).unwrap_err();
        assert!(err.to_string().contains("fedavgg"), "{err}");
        let err = parse_config_str("setting = \"strong2\"\n[fl]\nrounds = 0\n", None).unwrap_err();
        assert!(err.to_string().contains("rounds"), "{err}");
        let err = parse_config_str("setting = \"strong2\"\n[fl]\nlr = \"fast\"\n", None).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }

    #[test]
    fn population_marginal_follows_targets() {
        let cfg = parse_config_str("setting = \"population\"\n", None).unwrap();
        let dense = cfg.generator.density_marginal[2] + cfg.generator.density_marginal[3];
        assert!((dense - (0.660 + 0.455) / 2.0).abs() < 1e-12);
        assert_eq!(cfg.client_names(), vec!["Asian", "White"]);
        let explicit = parse_config_str(
            "setting = \"population\"\n[generator]\ndensity_marginal = [0.25, 0.25, 0.25, 0.25]\n",
            None,
        )
        .unwrap();
        assert_eq!(explicit.generator.density_marginal, [0.25; 4]);
    }

    #[test]
    fn seed_override_and_invariants() {
        let cfg = parse_config_str("setting = \"strong2\"\nseed = 3\n", Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(parse_config_str("setting = \"strong2\"\nbootstrap = 0\n", None).is_err());
        assert!(parse_config_str("setting = \"strong2\"\nfolds = 1\n", None).is_err());
        assert!(parse_config_str("setting = \"strong2\"\nrun_folds = [5]\n", None).is_err());
        assert!(parse_config_str("setting = \"mixed\"\n", None).is_err());
    }
}
