use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::amenability::EstimatorConfig;
use crate::augment::{AugmentConfig, Generator, LlmConfig, LlmGenerator, TemplateGenerator};
use crate::baselines::GdroConfig;
use crate::discovery::RepresentationKind;
use crate::error::{Result, TdgError};
use crate::model::TrainParams;
use crate::synthetic::{paraphrase_lexicon, substitution_lexicon, NoisyConfig, PlantedConfig};

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// JSONL files. Give `validation` to have it halved into dev and devtest,
    /// or give `dev` and `devtest` directly.
    Jsonl {
        task_id: String,
        train: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
        #[serde(default)]
        dev: Option<PathBuf>,
        #[serde(default)]
        devtest: Option<PathBuf>,
        /// Fixed label order; observed labels are used when absent.
        #[serde(default)]
        labels: Option<Vec<String>>,
        #[serde(default)]
        label_map: BTreeMap<String, String>,
        #[serde(default)]
        split_seed: u64,
        /// Labeled texts that answer oracle queries during `augment-oracle`.
        #[serde(default)]
        oracle: Option<PathBuf>,
    },
    Planted(PlantedConfig),
    Noisy(NoisyConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Planted(PlantedConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Hashing embedder width.
    pub dim: usize,
    pub target: TrainParams,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            dim: 1024,
            target: TrainParams::target(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub representations: Vec<RepresentationKind>,
    pub k: usize,
    /// k-means restarts; the best silhouette wins.
    pub n_runs: usize,
    pub challenge_multiplier: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            representations: RepresentationKind::ALL.to_vec(),
            k: 20,
            n_runs: 5,
            challenge_multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    #[serde(flatten)]
    pub estimator: EstimatorConfig,
    /// Estimate every cluster instead of only the top-k error clusters.
    pub all_clusters: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            estimator: EstimatorConfig::upweighted(),
            all_clusters: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Template {
        /// Interchangeable word classes; the synthetic lexicon when absent.
        #[serde(default)]
        lexicon: Option<Vec<Vec<String>>>,
    },
    Llm(LlmConfig),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Template { lexicon: None }
    }
}

impl GeneratorConfig {
    pub fn build(&self) -> Box<dyn Generator> {
        match self {
            GeneratorConfig::Template { lexicon } => Box::new(TemplateGenerator::new(
                lexicon.clone().unwrap_or_else(substitution_lexicon),
            )),
            GeneratorConfig::Llm(c) => Box::new(LlmGenerator::new(c.clone())),
        }
    }
}

/// Who labels the augmentation sessions that feed assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionSource {
    /// Headless sessions answered by the configured oracle.
    #[default]
    Oracle,
    /// Replay of sessions labeled through `tdg serve`.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentStageConfig {
    pub source: SessionSource,
    pub session: AugmentConfig,
    pub generator: GeneratorConfig,
    /// Originals per accepted example in every anti-forgetting mixture.
    pub ratio: f64,
    /// Fine-tuning for the final assembled models.
    pub assembly: TrainParams,
}

impl Default for AugmentStageConfig {
    fn default() -> Self {
        AugmentStageConfig {
            source: SessionSource::Oracle,
            session: AugmentConfig::default(),
            generator: GeneratorConfig::default(),
            ratio: 1.0,
            assembly: TrainParams::augment(),
        }
    }
}

impl AugmentStageConfig {
    /// Session config with the stage's mixing ratio applied.
    pub fn session_config(&self) -> AugmentConfig {
        AugmentConfig {
            ratio: self.ratio,
            ..self.session.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub gdro: GdroConfig,
    /// Synonym sets for the paraphrase baseline; the synthetic table when absent.
    pub paraphrase_synonyms: Option<Vec<Vec<String>>>,
    /// Label, proposal and update budgets of the augmentation-only ablation,
    /// as multiples of the session budgets, so it can reach the TDG set size.
    pub ablation_budget_multiplier: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            gdro: GdroConfig::default(),
            paraphrase_synonyms: None,
            ablation_budget_multiplier: 10,
        }
    }
}

impl BaselineConfig {
    pub fn paraphrase_lexicon(&self) -> Vec<Vec<String>> {
        self.paraphrase_synonyms.clone().unwrap_or_else(paraphrase_lexicon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Target,
    Reweighing,
    Paraphrasing,
    TdgSingle,
    TdgAll,
    AblationDiscovery,
    AblationAugment,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Target,
        Method::Reweighing,
        Method::Paraphrasing,
        Method::TdgSingle,
        Method::TdgAll,
        Method::AblationDiscovery,
        Method::AblationAugment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Target => "target",
            Method::Reweighing => "reweighing",
            Method::Paraphrasing => "paraphrasing",
            Method::TdgSingle => "tdg_single",
            Method::TdgAll => "tdg_all",
            Method::AblationDiscovery => "ablation_discovery",
            Method::AblationAugment => "ablation_augment",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = TdgError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| TdgError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub methods: Vec<Method>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            methods: Method::ALL.to_vec(),
        }
    }
}

/// One run: data, models, and every stage's knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Pipeline repetitions; also the estimator's seeds.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub discovery: DiscoveryConfig,
    pub estimate: EstimateConfig,
    pub augment: AugmentStageConfig,
    pub baselines: BaselineConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("run"),
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            backend: BackendConfig::default(),
            discovery: DiscoveryConfig::default(),
            estimate: EstimateConfig::default(),
            augment: AugmentStageConfig::default(),
            baselines: BaselineConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copy the run seeds into the estimator and check everything.
    pub fn normalize(&mut self) -> Result<()> {
        self.estimate.estimator.seeds = self.seeds.clone();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(TdgError::Config("seed list must not be empty".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(TdgError::Config("seed list has duplicates".into()));
        }
        if let DataConfig::Jsonl {
            train,
            validation,
            dev,
            devtest,
            oracle,
            ..
        } = &self.data
        {
            let mut paths = vec![train];
            match (validation, dev, devtest) {
                (Some(v), None, None) => paths.push(v),
                (None, Some(d), Some(t)) => paths.extend([d, t]),
                _ => {
                    return Err(TdgError::Config(
                        "give either `validation` or both `dev` and `devtest`".into(),
                    ))
                }
            }
            paths.extend(oracle);
            for p in paths {
                if !p.exists() {
                    return Err(TdgError::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        if self.backend.dim == 0 {
            return Err(TdgError::Config("backend.dim must be positive".into()));
        }
        if self.discovery.representations.is_empty() {
            return Err(TdgError::Config("at least one representation is required".into()));
        }
        if self.discovery.k < 2 {
            return Err(TdgError::Config("discovery.k must be at least 2".into()));
        }
        if !(self.augment.ratio >= 0.0 && self.augment.ratio.is_finite()) {
            return Err(TdgError::Config("augment.ratio must be non-negative".into()));
        }
        if !(self.estimate.estimator.ic_gate.is_finite()) {
            return Err(TdgError::Config("ic_gate must be finite".into()));
        }
        self.augment.session_config().validate()?;
        if self.baselines.ablation_budget_multiplier == 0 {
            return Err(TdgError::Config("baselines.ablation_budget_multiplier must be positive".into()));
        }
        if self.evaluate.methods.is_empty() {
            return Err(TdgError::Config("evaluate.methods must not be empty".into()));
        }
        Ok(())
    }
}
