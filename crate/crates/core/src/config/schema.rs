//! The fully resolved pipeline declaration: every omitted parameter has been
//! replaced by its default, so two equal `PipelineConfig` values describe
//! identical pipelines.

use std::collections::BTreeMap;

use crate::hyperopt::HyperoptSettings;
use crate::types::FeatureType;

/// Defaults applied by `compile_config` when a key is absent.
pub mod defaults {
    pub const COMBINER_NAME: &str = "concat";
    pub const COMBINER_LAYERS: &[usize] = &[64];
    pub const COMBINER_ACTIVATION: &str = "relu";

    pub const OPTIMIZER: &str = "adam";
    pub const LEARNING_RATE: f64 = 0.001;
    pub const MOMENTUM: f64 = 0.0;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;
    pub const EPOCHS: usize = 20;
    pub const BATCH_SIZE: usize = 32;
    pub const PATIENCE: usize = 5;
    pub const SEED: u64 = 42;

    pub const LOSS_WEIGHT: f64 = 1.0;

    pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];
    pub const VOCAB_SIZE: usize = 10_000;
    pub const SET_DELIMITER: &str = " ";
    /// Hard cap applied when max_sequence_length is inferred from data.
    pub const MAX_SEQUENCE_LENGTH_CAP: usize = 256;

    pub const HYPEROPT_NUM_SAMPLES: usize = 10;
    pub const HYPEROPT_SPLIT: &str = "validation";
    pub const HYPEROPT_SEED: u64 = 42;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input_features: Vec<InputFeature>,
    pub output_features: Vec<OutputFeature>,
    pub combiner: CombinerConfig,
    pub training: TrainingConfig,
    pub preprocessing: GlobalPreprocessing,
    pub hyperopt: Option<HyperoptSettings>,
}

impl PipelineConfig {
    pub fn input(&self, name: &str) -> Option<&InputFeature> {
        self.input_features.iter().find(|f| f.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&OutputFeature> {
        self.output_features.iter().find(|f| f.name == name)
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.input_features
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.output_features.iter().map(|f| f.name.as_str()))
    }

    /// Per-output loss weights in declaration order.
    pub fn loss_weights(&self) -> Vec<(String, f64)> {
        self.output_features
            .iter()
            .map(|f| (f.name.clone(), f.loss_weight))
            .collect()
    }

    pub fn task_name(&self) -> String {
        let inputs: Vec<FeatureType> = self.input_features.iter().map(|f| f.ty).collect();
        let outputs: Vec<FeatureType> = self.output_features.iter().map(|f| f.ty).collect();
        crate::types::infer_task(&inputs, &outputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputFeature {
    pub name: String,
    pub ty: FeatureType,
    pub encoder: EncoderConfig,
    pub preprocessing: FeaturePreprocessing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFeature {
    pub name: String,
    pub ty: FeatureType,
    pub decoder: DecoderConfig,
    pub loss_weight: f64,
    pub preprocessing: FeaturePreprocessing,
}

/// Encoder selection plus the type-level parameter table, fully filled.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub name: String,
    pub params: BTreeMap<String, usize>,
}

impl EncoderConfig {
    pub fn param(&self, key: &str) -> usize {
        *self
            .params
            .get(key)
            .unwrap_or_else(|| panic!("encoder parameter \"{key}\" is filled at compile time"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerConfig {
    pub name: String,
    /// Fully-connected stack sizes; empty means the concatenation passes
    /// through unchanged.
    pub layers: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<OptimizerKind> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

/// Training loop parameters. All optimizer keys are always legal so that the
/// optimizer can be swapped by overriding one string; each optimizer reads
/// only its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: defaults::LEARNING_RATE,
            momentum: defaults::MOMENTUM,
            beta1: defaults::BETA1,
            beta2: defaults::BETA2,
            epsilon: defaults::EPSILON,
            epochs: defaults::EPOCHS,
            batch_size: defaults::BATCH_SIZE,
            patience: defaults::PATIENCE,
            seed: defaults::SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextPreprocessing {
    /// Keep the most frequent N tokens (ties broken lexicographically).
    pub vocab_size: usize,
    /// None: inferred as the 99th-percentile training token length, capped.
    pub max_sequence_length: Option<usize>,
}

impl Default for TextPreprocessing {
    fn default() -> Self {
        Self {
            vocab_size: defaults::VOCAB_SIZE,
            max_sequence_length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPreprocessing {
    pub vocab_size: usize,
}

impl Default for CategoryPreprocessing {
    fn default() -> Self {
        Self {
            vocab_size: defaults::VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetPreprocessing {
    /// Separator between items inside one cell.
    pub delimiter: String,
    pub vocab_size: usize,
}

impl Default for SetPreprocessing {
    fn default() -> Self {
        Self {
            delimiter: defaults::SET_DELIMITER.to_string(),
            vocab_size: defaults::VOCAB_SIZE,
        }
    }
}

/// Per-feature preprocessing, resolved from the global section plus any
/// feature-level overrides. Types without knobs carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub enum FeaturePreprocessing {
    Text(TextPreprocessing),
    Category(CategoryPreprocessing),
    Set(SetPreprocessing),
    None,
}

impl FeaturePreprocessing {
    pub fn text(&self) -> &TextPreprocessing {
        match self {
            FeaturePreprocessing::Text(t) => t,
            _ => panic!("feature does not carry text preprocessing"),
        }
    }

    pub fn category(&self) -> &CategoryPreprocessing {
        match self {
            FeaturePreprocessing::Category(c) => c,
            _ => panic!("feature does not carry category preprocessing"),
        }
    }

    pub fn set(&self) -> &SetPreprocessing {
        match self {
            FeaturePreprocessing::Set(s) => s,
            _ => panic!("feature does not carry set preprocessing"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPreprocessing {
    pub split_ratios: [f64; 3],
    pub text: TextPreprocessing,
    pub category: CategoryPreprocessing,
    pub set: SetPreprocessing,
}

impl Default for GlobalPreprocessing {
    fn default() -> Self {
        Self {
            split_ratios: defaults::SPLIT_RATIOS,
            text: TextPreprocessing::default(),
            category: CategoryPreprocessing::default(),
            set: SetPreprocessing::default(),
        }
    }
}
