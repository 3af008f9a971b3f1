use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::alignment::LossWeights;
use crate::error::{Error, Result};
use crate::knowledge::{SensorNaming, DEFAULT_EMBEDDING_DIM};
use crate::numeric::Precision;
use crate::signal::SignalConfig;

/// Top-level run configuration, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub data: DataConfig,
    pub model: SignalConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub knowledge: KnowledgeConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            signal: self.model.clone(),
            weights: self.loss,
            settings: self.train.clone(),
            ablation: self.ablation,
        }
    }
}

/// Directory holding a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeConfig {
    /// Embedding table file; prompts missing from it use the fallback.
    pub embeddings: Option<PathBuf>,
    pub fallback_seed: Option<u64>,
    pub dim: usize,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        KnowledgeConfig {
            embeddings: None,
            fallback_seed: None,
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Seeds of multi-run commands (ablation, sweep).
    pub seeds: Vec<u64>,
    pub precision: Precision,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            seeds: (0..10).collect(),
            precision: Precision::F64,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// Ablation switches. Each either zeroes loss weights or swaps the sensor
/// prompt template; they compose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_knowledge: bool,
    pub no_node: bool,
    pub no_node_sensor: bool,
    pub no_node_label: bool,
    pub no_edge: bool,
    pub index_prompt: bool,
}

impl Ablation {
    pub fn apply(&self, weights: &LossWeights) -> LossWeights {
        let mut w = *weights;
        if self.no_knowledge || self.no_node || self.no_node_sensor {
            w.lambda_s = 0.0;
        }
        if self.no_knowledge || self.no_node || self.no_node_label {
            w.lambda_l = 0.0;
        }
        if self.no_knowledge || self.no_edge {
            w.lambda_e = 0.0;
        }
        w
    }

    pub fn naming(&self) -> SensorNaming {
        if self.index_prompt {
            SensorNaming::Index
        } else {
            SensorNaming::Names
        }
    }
}

/// The full model and the six ablated variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoKnowledge,
    NoNode,
    NoNodeSensor,
    NoNodeLabel,
    NoEdge,
    IndexPrompt,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoKnowledge,
        Variant::NoNode,
        Variant::NoNodeSensor,
        Variant::NoNodeLabel,
        Variant::NoEdge,
        Variant::IndexPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKnowledge => "no_knowledge",
            Variant::NoNode => "no_node",
            Variant::NoNodeSensor => "no_node_sensor",
            Variant::NoNodeLabel => "no_node_label",
            Variant::NoEdge => "no_edge",
            Variant::IndexPrompt => "index_prompt",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant `{name}`, expected one of {known:?}"))
            })
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoKnowledge => a.no_knowledge = true,
            Variant::NoNode => a.no_node = true,
            Variant::NoNodeSensor => a.no_node_sensor = true,
            Variant::NoNodeLabel => a.no_node_label = true,
            Variant::NoEdge => a.no_edge = true,
            Variant::IndexPrompt => a.index_prompt = true,
        }
        a
    }
}

/// Everything that determines one training run apart from data, prompt
/// embeddings and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub signal: SignalConfig,
    pub weights: LossWeights,
    pub settings: TrainSettings,
    pub ablation: Ablation,
}

impl Experiment {
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(&self.weights)
    }

    pub fn with_variant(&self, v: Variant) -> Experiment {
        Experiment {
            ablation: v.ablation(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
block_channels = [1, 4]
kernel = 2
hidden_dim = 4
patch_size = 4
window = 1
head_hidden = [8]
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = TrainConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(c.loss, LossWeights::default());
        assert_eq!(c.knowledge.dim, 512);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}\n[train]\nepochz = 3\n");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn switches_touch_only_their_terms() {
        let w = LossWeights::default();
        let no_node = Variant::NoNode.ablation().apply(&w);
        assert_eq!((no_node.lambda_s, no_node.lambda_l, no_node.lambda_e), (0.0, 0.0, w.lambda_e));
        let idx = Variant::IndexPrompt.ablation();
        assert_eq!(idx.apply(&w), w);
        assert_eq!(idx.naming(), SensorNaming::Index);
        let none = Variant::NoKnowledge.ablation().apply(&w);
        assert!(!none.uses_knowledge());
        assert_eq!(Variant::NoEdge.ablation().apply(&w).lambda_s, w.lambda_s);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
    }
}
