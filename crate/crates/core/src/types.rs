//! The feature type system: every type maps to its preprocessing, legal
//! encoders/decoders, loss and metrics, and the combination of declared
//! input/output types determines the task.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("unknown feature type \"{name}\"")]
    UnknownType { name: String },
    #[error("type \"{ty}\" has no {capability} capability: {detail}")]
    UnknownCapability {
        ty: &'static str,
        capability: &'static str,
        detail: String,
    },
}

/// Closed enumeration of feature types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureType {
    Binary,
    Numeric,
    Category,
    Set,
    Text,
    Vector,
}

impl FeatureType {
    pub const ALL: [FeatureType; 6] = [
        FeatureType::Binary,
        FeatureType::Numeric,
        FeatureType::Category,
        FeatureType::Set,
        FeatureType::Text,
        FeatureType::Vector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureType::Binary => "binary",
            FeatureType::Numeric => "numeric",
            FeatureType::Category => "category",
            FeatureType::Set => "set",
            FeatureType::Text => "text",
            FeatureType::Vector => "vector",
        }
    }
}

impl fmt::Display for FeatureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Softmax cross-entropy on integer class targets.
    CrossEntropy,
    /// Stable binary cross-entropy on a single logit.
    BinaryCrossEntropy,
    /// Binary cross-entropy applied per label of a multi-hot target.
    PerLabelBinaryCrossEntropy,
    /// Mean squared error on the standardized target.
    MeanSquaredError,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::BinaryCrossEntropy => "binary_cross_entropy",
            LossKind::PerLabelBinaryCrossEntropy => "per_label_binary_cross_entropy",
            LossKind::MeanSquaredError => "mean_squared_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricId {
    Accuracy,
    Mse,
    Mae,
    R2,
    Jaccard,
    MicroF1,
}

impl MetricId {
    pub fn name(self) -> &'static str {
        match self {
            MetricId::Accuracy => "accuracy",
            MetricId::Mse => "mse",
            MetricId::Mae => "mae",
            MetricId::R2 => "r2",
            MetricId::Jaccard => "jaccard",
            MetricId::MicroF1 => "micro_f1",
        }
    }

    pub fn parse(name: &str) -> Option<MetricId> {
        match name {
            "accuracy" => Some(MetricId::Accuracy),
            "mse" => Some(MetricId::Mse),
            "mae" => Some(MetricId::Mae),
            "r2" => Some(MetricId::R2),
            "jaccard" => Some(MetricId::Jaccard),
            "micro_f1" => Some(MetricId::MicroF1),
            _ => None,
        }
    }

    /// True when larger values are better.
    pub fn higher_is_better(self) -> bool {
        matches!(
            self,
            MetricId::Accuracy | MetricId::R2 | MetricId::Jaccard | MetricId::MicroF1
        )
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An encoder parameter key legal for a feature type, with its default.
/// Parameters are declared per type rather than per encoder so that swapping
/// the encoder id never invalidates sibling keys.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParam {
    pub key: &'static str,
    pub default: usize,
}

/// Everything the pipeline needs to know about one feature type.
#[derive(Debug, Clone)]
pub struct TypeCapabilities {
    pub feature_type: FeatureType,
    pub preprocessor: &'static str,
    pub encoders: &'static [&'static str],
    pub default_encoder: &'static str,
    pub encoder_params: &'static [EncoderParam],
    /// Empty for input-only types.
    pub decoders: &'static [&'static str],
    pub default_decoder: Option<&'static str>,
    pub loss: Option<LossKind>,
    pub metrics: &'static [MetricId],
}

impl TypeCapabilities {
    pub fn is_output_capable(&self) -> bool {
        !self.decoders.is_empty()
    }
}

const EMBEDDING_SIZE: EncoderParam = EncoderParam {
    key: "embedding_size",
    default: 32,
};
const OUTPUT_SIZE: EncoderParam = EncoderParam {
    key: "output_size",
    default: 32,
};

/// Immutable registry of all built-in types; built once, read concurrently.
pub struct TypeRegistry {
    caps: Vec<TypeCapabilities>,
}

impl TypeRegistry {
    fn build() -> Self {
        let caps = vec![
            TypeCapabilities {
                feature_type: FeatureType::Binary,
                preprocessor: "binary_literal",
                encoders: &["passthrough"],
                default_encoder: "passthrough",
                encoder_params: &[],
                decoders: &["binary_classifier"],
                default_decoder: Some("binary_classifier"),
                loss: Some(LossKind::BinaryCrossEntropy),
                metrics: &[MetricId::Accuracy],
            },
            TypeCapabilities {
                feature_type: FeatureType::Numeric,
                preprocessor: "numeric_zscore",
                encoders: &["passthrough", "dense"],
                default_encoder: "passthrough",
                encoder_params: &[OUTPUT_SIZE],
                decoders: &["regressor"],
                default_decoder: Some("regressor"),
                loss: Some(LossKind::MeanSquaredError),
                metrics: &[MetricId::Mse, MetricId::Mae, MetricId::R2],
            },
            TypeCapabilities {
                feature_type: FeatureType::Category,
                preprocessor: "category_vocab",
                encoders: &["embedding", "onehot_dense"],
                default_encoder: "embedding",
                encoder_params: &[EMBEDDING_SIZE, OUTPUT_SIZE],
                decoders: &["classifier"],
                default_decoder: Some("classifier"),
                loss: Some(LossKind::CrossEntropy),
                metrics: &[MetricId::Accuracy],
            },
            TypeCapabilities {
                feature_type: FeatureType::Set,
                preprocessor: "set_vocab",
                encoders: &["multi_hot"],
                default_encoder: "multi_hot",
                encoder_params: &[],
                decoders: &["multi_label"],
                default_decoder: Some("multi_label"),
                loss: Some(LossKind::PerLabelBinaryCrossEntropy),
                metrics: &[MetricId::Jaccard, MetricId::MicroF1],
            },
            TypeCapabilities {
                feature_type: FeatureType::Text,
                preprocessor: "text_tokenize",
                encoders: &["embed", "bow"],
                default_encoder: "embed",
                encoder_params: &[EMBEDDING_SIZE, OUTPUT_SIZE],
                decoders: &[],
                default_decoder: None,
                loss: None,
                metrics: &[],
            },
            TypeCapabilities {
                feature_type: FeatureType::Vector,
                preprocessor: "vector_fixed",
                encoders: &["dense"],
                default_encoder: "dense",
                encoder_params: &[OUTPUT_SIZE],
                decoders: &[],
                default_decoder: None,
                loss: None,
                metrics: &[],
            },
        ];
        Self { caps }
    }

    pub fn global() -> &'static TypeRegistry {
        static REGISTRY: std::sync::OnceLock<TypeRegistry> = std::sync::OnceLock::new();
        REGISTRY.get_or_init(TypeRegistry::build)
    }

    pub fn lookup(&self, name: &str) -> Result<FeatureType, TypeError> {
        FeatureType::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| TypeError::UnknownType {
                name: name.to_string(),
            })
    }

    pub fn capabilities(&self, t: FeatureType) -> &TypeCapabilities {
        self.caps
            .iter()
            .find(|c| c.feature_type == t)
            .expect("every feature type is registered")
    }

    pub fn capabilities_by_name(&self, name: &str) -> Result<&TypeCapabilities, TypeError> {
        Ok(self.capabilities(self.lookup(name)?))
    }

    /// Loss, decoder set and metrics for a type used as an output feature.
    /// Input-only types (text, vector) have no output capability.
    pub fn output_capabilities(&self, t: FeatureType) -> Result<&TypeCapabilities, TypeError> {
        let caps = self.capabilities(t);
        if caps.is_output_capable() {
            Ok(caps)
        } else {
            Err(TypeError::UnknownCapability {
                ty: t.name(),
                capability: "decoder",
                detail: format!("{} features are input-only", t.name()),
            })
        }
    }

    pub fn all(&self) -> &[TypeCapabilities] {
        &self.caps
    }
}

/// Stable capability record for a type.
pub fn capabilities_of(t: FeatureType) -> &'static TypeCapabilities {
    TypeRegistry::global().capabilities(t)
}

fn output_task_name(t: FeatureType) -> &'static str {
    match t {
        FeatureType::Numeric => "regression",
        FeatureType::Category => "classification",
        FeatureType::Binary => "binary classification",
        FeatureType::Set => "multi-label classification",
        FeatureType::Text => "sequence output (unsupported)",
        FeatureType::Vector => "vector output (unsupported)",
    }
}

/// Human-readable task name derived from the declared type combination.
/// A pure function of the input/output type multisets: invariant under
/// feature reordering and renaming.
pub fn infer_task(inputs: &[FeatureType], outputs: &[FeatureType]) -> String {
    if outputs.len() == 1 {
        let out = outputs[0];
        let all_text = !inputs.is_empty() && inputs.iter().all(|t| *t == FeatureType::Text);
        if out == FeatureType::Category && all_text {
            return "text classification".to_string();
        }
        return output_task_name(out).to_string();
    }
    let mut sorted = outputs.to_vec();
    sorted.sort();
    let names: Vec<&str> = sorted.into_iter().map(output_task_name).collect();
    format!("multi-task: {}", names.join(" + "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_capabilities() {
        let caps = capabilities_of(FeatureType::Category);
        assert_eq!(caps.encoders, &["embedding", "onehot_dense"]);
        assert_eq!(caps.decoders, &["classifier"]);
        assert_eq!(caps.loss, Some(LossKind::CrossEntropy));
        assert_eq!(caps.metrics, &[MetricId::Accuracy]);
    }

    #[test]
    fn set_is_multi_label_everywhere() {
        let caps = capabilities_of(FeatureType::Set);
        assert_eq!(caps.decoders, &["multi_label"]);
        assert_eq!(caps.loss, Some(LossKind::PerLabelBinaryCrossEntropy));
        assert_eq!(caps.metrics, &[MetricId::Jaccard, MetricId::MicroF1]);
    }

    #[test]
    fn vector_as_output_is_rejected() {
        let err = TypeRegistry::global()
            .output_capabilities(FeatureType::Vector)
            .unwrap_err();
        assert!(matches!(err, TypeError::UnknownCapability { ty: "vector", .. }));
    }

    #[test]
    fn unknown_type_by_name() {
        let err = TypeRegistry::global().capabilities_by_name("image").unwrap_err();
        assert!(matches!(err, TypeError::UnknownType { .. }));
    }

    #[test]
    fn defaults_are_members_of_legal_sets() {
        for caps in TypeRegistry::global().all() {
            assert!(caps.encoders.contains(&caps.default_encoder));
            if let Some(d) = caps.default_decoder {
                assert!(caps.decoders.contains(&d));
            }
            if caps.is_output_capable() {
                assert!(caps.loss.is_some(), "{} needs a loss", caps.feature_type);
                assert!(!caps.metrics.is_empty(), "{} needs metrics", caps.feature_type);
            }
        }
    }

    #[test]
    fn task_names() {
        use FeatureType::*;
        assert_eq!(infer_task(&[Text], &[Category]), "text classification");
        assert_eq!(infer_task(&[Numeric], &[Numeric]), "regression");
        assert_eq!(
            infer_task(&[Text, Numeric], &[Numeric, Set]),
            "multi-task: regression + multi-label classification"
        );
        // category alone, non-text inputs
        assert_eq!(infer_task(&[Numeric, Binary], &[Category]), "classification");
    }

    #[test]
    fn infer_task_is_order_invariant() {
        use FeatureType::*;
        assert_eq!(
            infer_task(&[Numeric, Text], &[Set, Numeric]),
            infer_task(&[Text, Numeric], &[Numeric, Set])
        );
    }
}
