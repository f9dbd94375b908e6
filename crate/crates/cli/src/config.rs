//! TOML experiment configuration.
//!
//! Unknown keys are rejected in every section. [`ExperimentConfig::resolve`]
//! materializes all defaults so the echoed config alone reproduces a run.

use std::fs;
use std::path::{Path, PathBuf};

use dsd_core::data::{self, Dataset, FeatureStats, SyntheticKind};
use dsd_core::flow::{ConvergenceSpec, FlowConfig, Phase, PhaseKind, PhasePlan};
use dsd_core::network::{validate_layers, InitScheme, InitSpec, LayerSpec};
use dsd_core::optimizer::OptimizerSpec;
use dsd_core::reporting::DEFAULT_BINS;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub dsd: DsdConfig,
    #[serde(default)]
    pub convergence: ConvergenceSpec,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llr: Option<LlrConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Relative paths are resolved against the config file's directory.
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic {
        generator: SyntheticKind,
        n: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceConfig,
    /// Separate test set; `split` then takes a test fraction of 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_source: Option<SourceConfig>,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Fixed independently of the run seed so every arm sees the same split.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub drop_last: bool,
    /// Standardize features with training-set statistics.
    #[serde(default)]
    pub normalize: bool,
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_batch() -> usize {
    64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default = "default_scheme")]
    pub scheme: InitScheme,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_scheme() -> InitScheme {
    InitScheme::ScaledGaussian
}

fn default_scale() -> f64 {
    std::f64::consts::SQRT_2
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scheme: default_scheme(),
            scale: default_scale(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub init: InitConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsdConfig {
    #[serde(default)]
    pub phases: Vec<Phase>,
    /// Defaults to the first prunable layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_layers: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Extra mid-phase checkpoints every k epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Below this many completed seeds per arm, comparison reports carry a
    /// low-power flag.
    #[serde(default = "default_min_seeds")]
    pub min_seeds_for_power: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_jobs() -> usize {
    1
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_min_seeds() -> usize {
    5
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seeds: default_seeds(),
            output_dir: default_output(),
            jobs: default_jobs(),
            histogram_bins: default_bins(),
            checkpoint_every: None,
            min_seeds_for_power: default_min_seeds(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlrStep {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlrConfig {
    /// Defaults to the DSD plan's post-baseline `(epochs, lr)` sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<LlrStep>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let sources =
            std::iter::once(&mut cfg.dataset.source).chain(cfg.dataset.test_source.as_mut());
        for source in sources {
            if let SourceConfig::Idx { images, labels } = source {
                for p in [images, labels] {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    /// Fills every defaulted field. `seed` overrides the seed list with a
    /// single seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.harness.seeds = vec![s];
        }
        if self.harness.seeds.is_empty() {
            return Err(CliError::Config("harness.seeds must not be empty".into()));
        }
        let run_seed = self.harness.seeds[0];
        self.model.init.seed.get_or_insert(run_seed);
        if self.dsd.excluded_layers.is_none() {
            let first = self.model.layers.iter().find(|l| l.prunable());
            self.dsd.excluded_layers = Some(
                first
                    .map(|l| vec![l.name().to_string()])
                    .unwrap_or_default(),
            );
        }
        let plan = PhasePlan {
            phases: self.dsd.phases.clone(),
            seed: run_seed,
        };
        let lrs = plan.resolved_lrs(self.optimizer.lr);
        for (p, lr) in self.dsd.phases.iter_mut().zip(lrs) {
            p.lr.get_or_insert(lr);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: dsd_core::Error| CliError::Config(format!("{name}: {e}"));
        validate_layers(&self.model.layers).map_err(|e| field("model.layers", e))?;
        self.init_spec(0)
            .validate()
            .map_err(|e| field("model.init", e))?;
        self.optimizer
            .validate()
            .map_err(|e| field("optimizer", e))?;
        self.convergence
            .validate()
            .map_err(|e| field("convergence", e))?;
        if !self.dsd.phases.is_empty() {
            self.plan(0)
                .validate(false)
                .map_err(|e| field("dsd.phases", e))?;
        }
        for name in self.excluded_layers() {
            if !self.model.layers.iter().any(|l| l.name() == name) {
                return Err(CliError::Config(format!(
                    "dsd.excluded_layers: no layer named {name:?}"
                )));
            }
        }
        let mut seeds = self.harness.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("harness.seeds must be distinct".into()));
        }
        if self.harness.jobs == 0 || self.harness.histogram_bins == 0 {
            return Err(CliError::Config(
                "harness.jobs and harness.histogram_bins must be positive".into(),
            ));
        }
        if self.harness.checkpoint_every == Some(0) {
            return Err(CliError::Config(
                "harness.checkpoint_every must be positive".into(),
            ));
        }
        let external_test = self.dataset.test_source.is_some();
        if external_test != (self.dataset.split[2] == 0.0) {
            return Err(CliError::Config(
                "dataset.split: the test fraction must be 0 exactly when dataset.test_source is set".into(),
            ));
        }
        if self.dataset.batch_size == 0 {
            return Err(CliError::Config(
                "dataset.batch_size must be positive".into(),
            ));
        }
        if let Some(LlrConfig {
            schedule: Some(steps),
        }) = &self.llr
        {
            for (i, s) in steps.iter().enumerate() {
                if s.epochs == 0 || !(s.lr >= 0.0 && s.lr.is_finite()) {
                    return Err(CliError::Config(format!(
                        "llr.schedule[{i}]: needs epochs > 0 and lr >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn excluded_layers(&self) -> &[String] {
        self.dsd.excluded_layers.as_deref().unwrap_or_default()
    }

    pub fn init_spec(&self, run_seed: u64) -> InitSpec {
        InitSpec {
            scheme: self.model.init.scheme,
            scale: self.model.init.scale,
            seed: self.model.init.seed.unwrap_or(run_seed),
        }
    }

    pub fn plan(&self, seed: u64) -> PhasePlan {
        PhasePlan {
            phases: self.dsd.phases.clone(),
            seed,
        }
    }

    /// The leading dense phases, or a single dense phase bounded by
    /// `convergence.max_epochs` when the plan has none.
    pub fn baseline_phases(&self) -> Vec<Phase> {
        let lead: Vec<Phase> = self
            .dsd
            .phases
            .iter()
            .take_while(|p| p.kind == PhaseKind::Dense)
            .copied()
            .collect();
        if lead.is_empty() {
            vec![Phase::dense(self.convergence.max_epochs, self.optimizer.lr)]
        } else {
            lead
        }
    }

    /// The plan after its leading dense phases.
    pub fn post_baseline_phases(&self) -> Vec<Phase> {
        self.dsd
            .phases
            .iter()
            .skip_while(|p| p.kind == PhaseKind::Dense)
            .copied()
            .collect()
    }

    /// `(epochs, lr)` pairs of the LLR control arm.
    pub fn llr_schedule(&self) -> Vec<(usize, f64)> {
        match &self.llr {
            Some(LlrConfig {
                schedule: Some(steps),
            }) => steps.iter().map(|s| (s.epochs, s.lr)).collect(),
            _ => self.plan(0).post_baseline_schedule(self.optimizer.lr),
        }
    }

    /// Flow settings. `early_stopping` off gives fixed-length phases.
    pub fn flow_config(&self, out_dir: Option<PathBuf>, early_stopping: bool) -> FlowConfig {
        FlowConfig {
            optimizer: self.optimizer,
            batch_size: self.dataset.batch_size,
            drop_last: self.dataset.drop_last,
            convergence: early_stopping.then_some(self.convergence),
            excluded_layers: self.excluded_layers().to_vec(),
            histogram_bins: self.harness.histogram_bins,
            out_dir,
            checkpoint_every: self.harness.checkpoint_every,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Train, validation and test sets for a config.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn read_source(source: &SourceConfig, field: &str) -> Result<Dataset, CliError> {
    match source {
        SourceConfig::Idx { images, labels } => Ok(data::load_idx(images, labels)?),
        SourceConfig::Synthetic {
            generator,
            n,
            noise_std,
            seed,
        } => data::make_synthetic(*generator, *n, *noise_std, *seed)
            .map_err(|e| CliError::Config(format!("{field}: {e}"))),
    }
}

impl LoadedData {
    pub fn load(cfg: &DatasetConfig) -> Result<Self, CliError> {
        let full = read_source(&cfg.source, "dataset.source")?;
        let split_err = |e: dsd_core::Error| CliError::Config(format!("dataset.split: {e}"));
        let s = match &cfg.test_source {
            None => data::split(&full, cfg.split, cfg.split_seed).map_err(split_err)?,
            Some(source) => {
                let test = read_source(source, "dataset.test_source")?;
                if test.dim() != full.dim() || test.class_count() != full.class_count() {
                    return Err(CliError::Config(format!(
                        "dataset.test_source: {} features and {} classes, training data has {} and {}",
                        test.dim(),
                        test.class_count(),
                        full.dim(),
                        full.class_count()
                    )));
                }
                let (train, val) =
                    data::split_pair(&full, [cfg.split[0], cfg.split[1]], cfg.split_seed)
                        .map_err(split_err)?;
                data::Splits { train, val, test }
            }
        };
        if !cfg.normalize {
            return Ok(LoadedData {
                train: s.train,
                val: s.val,
                test: s.test,
            });
        }
        let stats = FeatureStats::fit(&s.train);
        Ok(LoadedData {
            train: stats.apply(&s.train),
            val: stats.apply(&s.val),
            test: stats.apply(&s.test),
        })
    }

    pub fn flow_data(&self) -> dsd_core::flow::TrainData<'_> {
        dsd_core::flow::TrainData {
            train: &self.train,
            val: &self.val,
            test: Some(&self.test),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset.source]
        kind = "synthetic"
        generator = "two_gaussians"
        n = 200

        [model]
        layers = [
            { kind = "fully_connected", name = "fc1", in_dim = 2, out_dim = 8, activation = "relu" },
            { kind = "fully_connected", name = "fc2", in_dim = 8, out_dim = 2 },
        ]
    "#;

    #[test]
    fn defaults_are_materialized() {
        let cfg = ExperimentConfig::from_toml(MINIMAL)
            .unwrap()
            .resolve(Some(9))
            .unwrap();
        assert_eq!(cfg.harness.seeds, vec![9]);
        assert_eq!(cfg.model.init.seed, Some(9));
        assert_eq!(cfg.excluded_layers(), ["fc1".to_string()]);
        let echoed = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[convergence]\npatience = 3\nbogus = 1\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn bad_sparsity_names_the_field() {
        let text = format!(
            "{MINIMAL}\n[dsd]\nphases = [{{ kind = \"dense\", epochs = 2 }}, {{ kind = \"sparse\", sparsity = 1.5, epochs = 2 }}]\n"
        );
        let err = ExperimentConfig::from_toml(&text)
            .unwrap()
            .resolve(None)
            .unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("dsd.phases"), "{err}");
    }

    #[test]
    fn redense_lr_defaults_to_a_tenth() {
        let text = format!(
            "{MINIMAL}\n[dsd]\nphases = [{{ kind = \"dense\", epochs = 2, lr = 0.1 }}, {{ kind = \"sparse\", sparsity = 0.5, epochs = 2, lr = 0.01 }}, {{ kind = \"redense\", epochs = 2 }}]\n"
        );
        let cfg = ExperimentConfig::from_toml(&text)
            .unwrap()
            .resolve(None)
            .unwrap();
        assert!((cfg.dsd.phases[2].lr.unwrap() - 0.001).abs() < 1e-18);
        assert_eq!(
            cfg.llr_schedule(),
            vec![(2, 0.01), (2, cfg.dsd.phases[2].lr.unwrap())]
        );
    }

    #[test]
    fn separate_test_set_needs_a_zero_test_fraction() {
        let test_source = "[dataset.test_source]\nkind = \"synthetic\"\ngenerator = \"two_gaussians\"\nn = 50\nseed = 3\n";
        let with_test = format!("[dataset]\nsplit = [0.9, 0.1, 0.0]\n{MINIMAL}\n{test_source}");
        let cfg = ExperimentConfig::from_toml(&with_test)
            .unwrap()
            .resolve(None)
            .unwrap();
        let data = LoadedData::load(&cfg.dataset).unwrap();
        assert_eq!(
            (data.train.len(), data.val.len(), data.test.len()),
            (180, 20, 50)
        );

        let three_way = format!("{MINIMAL}\n{test_source}");
        let err = ExperimentConfig::from_toml(&three_way)
            .unwrap()
            .resolve(None)
            .unwrap_err();
        assert!(err.to_string().contains("dataset.split"), "{err}");
        let no_test = format!("[dataset]\nsplit = [0.9, 0.1, 0.0]\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml(&no_test)
            .unwrap()
            .resolve(None)
            .is_err());
    }
}
