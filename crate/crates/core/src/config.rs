//! Experiment configuration: a nested key-value document with strict schema
//! validation, stable hashing, and dotted-path overrides for sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackSpec, Techniques};
use crate::error::{Error, Result};
use crate::optim::{optimizer_preset, OptimizerSpec, Schedule};
use crate::params::sha256_hex;
use crate::zoo::ArchSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub surrogate: ModelSection,
    pub targets: TargetsSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub early_stop: EarlyStopSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: String,
    pub n: usize,
    pub classes: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
}
fn default_noise() -> f64 {
    0.05
}
fn default_test_n() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decays: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_gsam: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub looksam_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub looksam_warmup: Option<usize>,
}
fn default_arch() -> String {
    "smallcnn".into()
}
fn default_width() -> usize {
    4
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_blocks() -> usize {
    1
}
fn default_optimizer() -> String {
    "sgd".into()
}
fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    64
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn desk_decays(epochs: usize) -> Vec<(usize, f64)> {
    // proportional compression of the 150-epoch schedule with decays at
    // 50 and 100: one third and two thirds of the way through
    vec![(epochs / 3, 10.0), (2 * epochs / 3, 10.0)]
}

impl ModelSection {
    pub fn arch_spec(&self, classes: usize, example_shape: &[usize]) -> Result<ArchSpec> {
        match self.arch.as_str() {
            "mlp" => Ok(ArchSpec::Mlp {
                in_shape: example_shape.to_vec(),
                hidden: self.hidden.clone(),
                classes,
            }),
            "smallcnn" => {
                let [c, h, w] = chw(example_shape)?;
                Ok(ArchSpec::SmallCnn { in_chw: [c, h, w], classes, width: self.width })
            }
            "miniresnet" => {
                let [c, h, w] = chw(example_shape)?;
                Ok(ArchSpec::MiniResnet {
                    in_chw: [c, h, w],
                    classes,
                    width: self.width,
                    blocks: self.blocks,
                })
            }
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn optimizer_spec(&self) -> Result<OptimizerSpec> {
        let mut spec = optimizer_preset(&self.optimizer)
            .ok_or_else(|| Error::Config(format!("unknown optimizer {:?}", self.optimizer)))?;
        spec.schedule = Schedule {
            lr0: self.lr0.unwrap_or(spec.schedule.lr0),
            decays: self.decays.clone().unwrap_or_else(|| desk_decays(self.epochs)),
        };
        if let Some(rho) = self.rho {
            spec.rho = rho;
        }
        if let Some(wd) = self.weight_decay {
            spec.weight_decay = wd;
        }
        if let Some(m) = self.momentum {
            spec.momentum = m;
        }
        if let Some(a) = self.alpha_gsam {
            spec.alpha_gsam = a;
        }
        if let Some(k) = self.looksam_k {
            spec.looksam_k = k;
        }
        if let Some(w) = self.looksam_warmup {
            spec.looksam_warmup = w;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn chw(example_shape: &[usize]) -> Result<[usize; 3]> {
    if example_shape.len() != 3 {
        return Err(Error::Config(format!(
            "convolutional architectures need (C,H,W) inputs, got {example_shape:?}"
        )));
    }
    Ok([example_shape[0], example_shape[1], example_shape[2]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsSection {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_target_count")]
    pub count: usize,
    #[serde(default = "default_target_epochs")]
    pub epochs: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_target_seed0")]
    pub seed0: u64,
}
fn default_target_count() -> usize {
    6
}
fn default_target_epochs() -> usize {
    30
}
fn default_target_seed0() -> u64 {
    1000
}

impl TargetsSection {
    pub fn as_model(&self, epochs_override: Option<usize>) -> ModelSection {
        ModelSection {
            arch: self.arch.clone(),
            width: self.width,
            hidden: self.hidden.clone(),
            blocks: self.blocks,
            optimizer: self.optimizer.clone(),
            epochs: epochs_override.unwrap_or(self.epochs),
            batch_size: self.batch_size,
            seeds: (0..self.count as u64).map(|i| self.seed0 + i).collect(),
            lr0: None,
            decays: None,
            rho: None,
            weight_decay: None,
            momentum: None,
            alpha_gsam: None,
            looksam_k: None,
            looksam_warmup: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub targeted: bool,
    #[serde(default)]
    pub techniques: Techniques,
    /// Checkpoints to attack; absent means every saved epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_epochs: Option<Vec<usize>>,
}
fn default_iterations() -> usize {
    50
}

impl AttackSection {
    pub fn to_spec(&self) -> Result<AttackSpec> {
        let spec = AttackSpec {
            epsilon: self.epsilon,
            iterations: self.iterations,
            step_size: self.step_size.unwrap_or(self.epsilon / 10.0),
            techniques: self.techniques.clone(),
            targeted: self.targeted,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_n")]
    pub n: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}
fn default_eval_n() -> usize {
    500
}
fn default_eval_seed() -> u64 {
    777
}
impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n: default_eval_n(), seed: default_eval_seed() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default)]
    pub sharpness: bool,
    /// Epochs to measure; absent means every saved checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness_epochs: Option<Vec<usize>>,
    #[serde(default = "default_sharpness_examples")]
    pub sharpness_examples: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// 0 disables the per-iteration step-quality trace.
    #[serde(default)]
    pub alpha_every: usize,
}
fn default_sharpness_examples() -> usize {
    64
}
fn default_probes() -> usize {
    8
}
impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            sharpness: false,
            sharpness_epochs: None,
            sharpness_examples: default_sharpness_examples(),
            probes: default_probes(),
            alpha_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_val_targets")]
    pub val_targets: usize,
    #[serde(default = "default_val_examples")]
    pub val_examples: usize,
}
fn default_val_targets() -> usize {
    2
}
fn default_val_examples() -> usize {
    128
}
impl Default for EarlyStopSection {
    fn default() -> Self {
        EarlyStopSection {
            enabled: false,
            val_targets: default_val_targets(),
            val_examples: default_val_examples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub path: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

const OPTIONAL_NUMERIC_PATHS: &[&str] = &[
    "surrogate.lr0",
    "surrogate.rho",
    "surrogate.weight_decay",
    "surrogate.momentum",
    "surrogate.alpha_gsam",
    "surrogate.looksam_k",
    "surrogate.looksam_warmup",
    "attack.step_size",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.data.kind.as_str(), "blobs" | "spirals" | "patterned-images") {
            return Err(Error::Config(format!("unknown data kind {:?}", self.data.kind)));
        }
        if self.data.classes < 2 || self.data.n < self.data.classes {
            return Err(Error::Config("data needs classes >= 2 and n >= classes".into()));
        }
        if self.surrogate.seeds.is_empty() {
            return Err(Error::Config("surrogate needs at least one seed".into()));
        }
        if self.targets.count == 0 {
            return Err(Error::Config("need at least one target model".into()));
        }
        if self.eval.n == 0 {
            return Err(Error::Config("eval set size must be >= 1".into()));
        }
        self.surrogate.optimizer_spec()?;
        self.targets.as_model(None).optimizer_spec()?;
        self.attack.to_spec()?;
        if let Some(epochs) = &self.attack.checkpoint_epochs {
            if let Some(bad) = epochs.iter().find(|e| **e >= self.surrogate.epochs) {
                return Err(Error::Config(format!(
                    "attack checkpoint epoch {bad} outside 0..{}",
                    self.surrogate.epochs
                )));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.len() < 2 {
                return Err(Error::Config("sweep needs at least 2 values".into()));
            }
            // the dotted path must refer to an existing numeric field
            self.with_value(&sweep.path, sweep.values[0])?;
        }
        if self.output.dir.is_empty() {
            return Err(Error::Config("output.dir must be non-empty".into()));
        }
        Ok(())
    }

    /// Stable fingerprint of the full configuration document.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    /// Returns a copy with the numeric field at `path` (dotted, e.g.
    /// "surrogate.rho") replaced by `value`. The path must exist. The copy
    /// drops the sweep section: it is one concrete point of the sweep.
    pub fn with_value(&self, path: &str, value: f64) -> Result<ExperimentConfig> {
        let mut flat = self.clone();
        flat.sweep = None;
        let mut doc = serde_json::to_value(&flat).expect("config serializes");
        let mut node = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad sweep path {path:?}")));
        }
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("sweep path {path:?}: no section {part:?}")))?;
        }
        let leaf = parts[parts.len() - 1];
        if node.get(leaf).is_none() {
            // unset optional fields are absent from the document but still
            // part of the schema
            if OPTIONAL_NUMERIC_PATHS.contains(&path) {
                node[leaf] = serde_json::Value::from(value);
                let cfg: ExperimentConfig =
                    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
                cfg.validate()?;
                return Ok(cfg);
            }
            return Err(Error::Config(format!("sweep path {path:?}: no field {leaf:?}")));
        }
        let slot = node.get_mut(leaf).expect("checked above");
        match slot {
            serde_json::Value::Number(n) => {
                *slot = if n.is_f64() || value.fract() != 0.0 {
                    serde_json::Value::from(value)
                } else {
                    serde_json::Value::from(value as i64)
                };
            }
            serde_json::Value::Null => {
                *slot = serde_json::Value::from(value);
            }
            other => {
                return Err(Error::Config(format!(
                    "sweep path {path:?} points at non-numeric value {other}"
                )));
            }
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
