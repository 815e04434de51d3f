//! Experiment configuration: JSON schema, defaults, validation and
//! `key=value` overrides.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::data::SyntheticKind;
use crate::error::{FedError, Result};
use crate::fed::{AggregatorConfig, LocalBudget, Precision};
use crate::model::{Family, ModelSpec, NormKind, TokenMixerKind};
use crate::partition::FeatureTransform;
use crate::train::{TrainSchedule, DEFAULT_BASE_LR, DEFAULT_BATCH_SIZE, DEFAULT_CLIP_NORM, DEFAULT_WARMUP_STEPS};

pub const DEFAULT_ROUNDS: usize = 100;

fn default_name() -> String {
    "experiment".into()
}
fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_local() -> LocalBudget {
    LocalBudget::Epochs(1)
}
fn default_channels() -> usize {
    1
}
fn default_sigma() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: SyntheticKind,
        classes: usize,
        samples: usize,
        /// Defaults to a quarter of `samples`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_samples: Option<usize>,
        image_size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
        /// Seed of the data draw, independent of the run seeds.
        #[serde(default)]
        seed: u64,
    },
    /// Directory holding `train-images.idx`, `train-labels.idx`,
    /// `test-images.idx` and `test-labels.idx`.
    Idx {
        path: PathBuf,
        /// Inferred from the largest label when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Iid { clients: usize },
    LabelSkew { clients: usize, classes_per_client: usize },
    QuantitySkew { clients: usize, alpha: f64 },
    FeatureSkew { clients: usize, transforms: Vec<FeatureTransform> },
}

impl SplitConfig {
    pub fn clients(&self) -> usize {
        match self {
            SplitConfig::Iid { clients }
            | SplitConfig::LabelSkew { clients, .. }
            | SplitConfig::QuantitySkew { clients, .. }
            | SplitConfig::FeatureSkew { clients, .. } => *clients,
        }
    }
}

/// Model section; class count and input shape come from the dataset and
/// the init seed from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub norm_kind: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_mixer: Option<TokenMixerKind>,
    pub depth: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
}

impl ModelConfig {
    pub fn to_spec(&self, num_classes: usize, input_shape: [usize; 3], seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(self.family, self.norm_kind, self.depth, self.width, num_classes, input_shape);
        spec.token_mixer = self.token_mixer;
        spec.seed = seed;
        if let Some(g) = self.norm_groups {
            spec.norm_groups = g;
        }
        if let Some(p) = self.patch_size {
            spec.patch_size = p;
        }
        if let Some(r) = self.mlp_ratio {
            spec.mlp_ratio = r;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "ScheduleConfig::lr")]
    pub base_lr: f64,
    #[serde(default = "ScheduleConfig::warmup")]
    pub warmup_steps: usize,
    #[serde(default = "ScheduleConfig::clip")]
    pub clip_norm: f64,
    #[serde(default = "ScheduleConfig::batch")]
    pub batch_size: usize,
}

impl ScheduleConfig {
    fn lr() -> f64 {
        DEFAULT_BASE_LR
    }
    fn warmup() -> usize {
        DEFAULT_WARMUP_STEPS
    }
    fn clip() -> f64 {
        DEFAULT_CLIP_NORM
    }
    fn batch() -> usize {
        DEFAULT_BATCH_SIZE
    }

    /// Base schedule; the run length is filled in by the trainer.
    pub fn to_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { base_lr: Self::lr(), warmup_steps: Self::warmup(), clip_norm: Self::clip(), batch_size: Self::batch() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local")]
    pub local: LocalBudget,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Also train the centralized arm and log weight divergence per round.
    #[serde(default)]
    pub track_divergence: bool,
    /// Accuracy threshold for the rounds-to-target summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
}

impl ExperimentConfig {
    /// Checks cross-field rules and fills aggregator defaults.
    pub fn resolve(mut self) -> Result<Self> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seeds contains {s} twice"));
        }
        match self.local {
            LocalBudget::Epochs(0) => return bad("local.epochs must be at least 1".into()),
            LocalBudget::Steps(0) => return bad("local.steps must be at least 1".into()),
            _ => {}
        }
        if self.split.clients() == 0 {
            return bad("split.clients must be at least 1".into());
        }
        if let Some(t) = self.target_acc {
            if !t.is_finite() {
                return bad("target_acc must be finite".into());
            }
        }
        if let DatasetConfig::Synthetic { classes, samples, image_size, channels, sigma, .. } = &self.dataset {
            if *classes < 2 || samples < classes || *image_size == 0 || *channels == 0 || !(*sigma >= 0.0) {
                return bad("dataset: need classes >= 2, samples >= classes, positive image_size/channels, sigma >= 0".into());
            }
        }
        self.aggregator.validate()?;
        self.aggregator = self.aggregator.resolved();
        let mut s = self.schedule.to_schedule();
        s.total_steps = s.warmup_steps;
        s.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Loads, overrides, parses and resolves a config file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    parse_config(&text, path, overrides)
}

/// Parses config text. `origin` only labels error messages.
pub fn parse_config(text: &str, origin: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let parse_err = |e: serde_json::Error| FedError::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let mut de = serde_json::Deserializer::from_str(text);
    let mut value = StrictValue.deserialize(&mut de).map_err(parse_err)?;
    de.end().map_err(parse_err)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| FedError::Config(e.to_string()))?;
    cfg.resolve()
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise. Missing intermediate objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FedError::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(FedError::Config(format!("override key `{key}` is malformed")));
    }
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| FedError::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key part")
}

/// JSON value deserializer that rejects duplicate object keys.
struct StrictValue;

impl<'de> DeserializeSeed<'de> for StrictValue {
    type Value = Value;

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> std::result::Result<Value, D::Error> {
        d.deserialize_any(self)
    }
}

impl<'de> Visitor<'de> for StrictValue {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> std::result::Result<Value, E> {
        Ok(Value::Bool(v))
    }
    fn visit_i64<E>(self, v: i64) -> std::result::Result<Value, E> {
        Ok(v.into())
    }
    fn visit_u64<E>(self, v: u64) -> std::result::Result<Value, E> {
        Ok(v.into())
    }
    fn visit_f64<E>(self, v: f64) -> std::result::Result<Value, E> {
        Ok(serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number))
    }
    fn visit_str<E>(self, v: &str) -> std::result::Result<Value, E> {
        Ok(Value::String(v.to_string()))
    }
    fn visit_string<E>(self, v: String) -> std::result::Result<Value, E> {
        Ok(Value::String(v))
    }
    fn visit_unit<E>(self) -> std::result::Result<Value, E> {
        Ok(Value::Null)
    }
    fn visit_none<E>(self) -> std::result::Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element_seed(StrictValue)? {
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Value, A::Error> {
        let mut out = serde_json::Map::new();
        while let Some(key) = map.next_key::<String>()? {
            if out.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key `{key}`")));
            }
            let v = map.next_value_seed(StrictValue)?;
            out.insert(key, v);
        }
        Ok(Value::Object(out))
    }
}
