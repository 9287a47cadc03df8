//! Run configuration, the two-stage training pipeline, and the command
//! implementations behind the CLI.

mod commands;
mod params;
mod pipeline;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::structure::StructureEncoderConfig;
use crate::tensor::AdamConfig;

pub use commands::{
    cmd_ablate, cmd_count_params, cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_sweep, cmd_synth, cmd_train_structure,
    count_model_params, load_structure_table, run_ablation, run_pipeline, run_sweep, variant_label, AblationOutput,
    AblationRow, CommandOutput, ParamCounts, SweepOutput, SweepRow, SweepSeries, ABLATION_VARIANTS, CHECKPOINT_FILE,
    CONFIG_FILE, MANIFEST_FILE, TABLE_FILE, TIMING_FILE,
};
pub use params::{count_params, ParamReport};
pub use pipeline::{
    build_model, build_structure, evaluate_model, run_backbone_only, run_fused, train_backbone_stage, train_stage,
    LossRow, RunOutcome, Stage, StructureOutcome, Workspace,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: 5e-3,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 32,
            pretrain_epochs: 1,
            finetune_epochs: 30,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `test` or `dev`.
    pub split: String,
    /// Also rank heads when evaluating the structure encoder.
    pub head_prediction: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            head_prediction: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    /// Which weights to sweep, one at a time: any of `lambda_s_ts`,
    /// `lambda_s_vs`, `lambda_a_ts`, `lambda_a_vs`.
    pub lambdas: Vec<String>,
    /// Training runs averaged per grid point, seeded `seed`, `seed + 1`, ...
    pub runs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: vec![0.001, 0.01, 0.1, 1.0],
            lambdas: LAMBDA_NAMES.iter().map(|s| s.to_string()).collect(),
            runs: 3,
        }
    }
}

pub const LAMBDA_NAMES: [&str; 4] = ["lambda_s_ts", "lambda_s_vs", "lambda_a_ts", "lambda_a_vs"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Run all 16 flag subsets instead of the 10 named variants.
    pub all_subsets: bool,
    /// Seeds to repeat each variant with; empty means the run seed.
    pub seeds: Vec<u64>,
}

/// Everything a command needs. Serialised verbatim into every output
/// directory as `config.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    /// Dataset directory; when absent the synthetic generator is used.
    pub data_dir: Option<String>,
    /// Structural table written by `train-structure`.
    pub structure_table: Option<String>,
    /// Checkpoint to start finetuning from or to evaluate.
    pub checkpoint: Option<String>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub structure: StructureEncoderConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: "runs/default".into(),
            data_dir: None,
            structure_table: None,
            checkpoint: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            structure: StructureEncoderConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file and applies `key=value` overrides such as
    /// `fusion.lambda_s_ts=0.1` or `seed=3`. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dir.is_none() {
            self.synth.validate()?;
        }
        self.structure.validate()?;
        self.fusion.validate()?;
        if self.model.dim == 0 || self.model.heads == 0 || self.model.dim % self.model.heads != 0 {
            return Err(Error::Config("model dim must be a positive multiple of heads".into()));
        }
        if self.model.text_layers == 0 || self.model.vision_layers == 0 || self.model.fusion_layers == 0 {
            return Err(Error::Config("layer counts must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.train.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !matches!(self.eval.split.as_str(), "test" | "dev") {
            return Err(Error::Config(format!("eval split must be `test` or `dev`, got `{}`", self.eval.split)));
        }
        if self.sweep.grid.is_empty() || self.sweep.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("sweep grid must be non-empty, finite and >= 0".into()));
        }
        if self.sweep.runs == 0 {
            return Err(Error::Config("sweep runs must be >= 1".into()));
        }
        for name in &self.sweep.lambdas {
            if !LAMBDA_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown sweep weight `{name}`")));
            }
        }
        Ok(())
    }

    /// Hash of everything except `output_dir`, so the same experiment
    /// written to two places reports the same hash.
    pub fn hash(&self) -> String {
        crate::config_hash(&RunConfig {
            output_dir: String::new(),
            ..self.clone()
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn with_fusion(&self, fusion: FusionConfig) -> Self {
        RunConfig {
            fusion,
            ..self.clone()
        }
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut path: Vec<&str> = key.trim().split('.').collect();
    let last = path.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{item}`")))?;
    let mut table = doc;
    for part in path {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig {
            data_dir: Some("data".into()),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let moved = RunConfig {
            output_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        assert_ne!(cfg.with_seed(1).hash(), cfg.hash());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=7".into(),
                "fusion.lambda_s_ts=0.5".into(),
                "fusion.ac_vs=false".into(),
                "structure.kind=transe".into(),
                "output_dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fusion.lambda_s_ts, 0.5);
        assert!(!cfg.fusion.ac_vs);
        assert_eq!(cfg.structure.kind, crate::structure::ModelKind::TransE);
        assert_eq!(cfg.output_dir, "out/x");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::load(None, &["fusion.lambda_x=1".into()]).is_err());
        assert!(RunConfig::load(None, &["fusion.lambda_s_ts=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.heads=3".into()]).is_err());
        assert!(RunConfig::load(None, &["eval.split=train".into()]).is_err());
        assert!(RunConfig::load(None, &["seed".into()]).is_err());
    }
}
