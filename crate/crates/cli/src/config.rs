//! Pipeline configuration files (TOML). Every section is optional except
//! `[model]`; omitted fields take the library defaults. Unknown keys are
//! rejected.
//!
//! ```toml
//! seed = 0
//! out = "runs/alex"
//!
//! [model]
//! arch = "mini_alex"
//! widths = [32, 64, 96, 96, 64]
//!
//! [train]
//! lambda = 0.01
//! epochs = 5
//!
//! [finetune]
//! epochs = 2
//!
//! [prune]
//! mode = "layerwise"
//! budgets = [0.75, 0.5, 0.25]
//!
//! [benchmark]
//! sequences = 50
//! ```

use std::path::{Path, PathBuf};

use prunetrack_core::plan::{BudgetSpec, PlanMode};
use prunetrack_core::tracking::{BenchmarkSpec, SequenceSpec};
use prunetrack_core::train::{PairSource, TrainConfig};
use prunetrack_core::zoo::{ArchConfig, ARCHITECTURES};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub finetune: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

/// Architecture name plus any dimensions that differ from its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunk_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stacks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub max_shift: Option<i64>,
    pub label_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    #[serde(default = "default_mode")]
    pub mode: PlanMode,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    #[serde(default = "default_floor")]
    pub floor: usize,
    /// Decoupled mode: encoder fraction as a multiple of each sweep budget.
    pub encoder_scale: Option<f64>,
    /// Decoupled mode: decoder fraction as a multiple of each sweep budget.
    pub decoder_scale: Option<f64>,
}

fn default_mode() -> PlanMode {
    PlanMode::Layerwise
}

fn default_budgets() -> Vec<f64> {
    vec![0.75, 0.5, 0.25]
}

fn default_floor() -> usize {
    1
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            mode: default_mode(),
            budgets: default_budgets(),
            floor: default_floor(),
            encoder_scale: None,
            decoder_scale: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub sequences: Option<usize>,
    pub first_seed: Option<u64>,
    pub length: Option<usize>,
    pub frame_size: Option<usize>,
    pub object_min: Option<usize>,
    pub object_max: Option<usize>,
    pub motion: Option<f64>,
    pub texture: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), CliError> {
        self.arch()?;
        self.train_config()?;
        self.finetune_config()?;
        self.benchmark()?;
        let budgets = &self.prune.budgets;
        if let Some(w) = budgets.windows(2).find(|w| w[1] >= w[0]) {
            return Err(config_err(format!(
                "prune.budgets must be strictly decreasing, got {} then {}",
                w[0], w[1]
            )));
        }
        for &b in budgets {
            self.budget_spec(b)?;
        }
        if self.prune.mode != PlanMode::Decoupled
            && (self.prune.encoder_scale.is_some() || self.prune.decoder_scale.is_some())
        {
            return Err(config_err(
                "prune.encoder_scale and prune.decoder_scale require prune.mode = \"decoupled\"",
            ));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchConfig, CliError> {
        let m = &self.model;
        if m.arch.is_empty() {
            return Err(config_err("model.arch is empty"));
        }
        let mut arch = ArchConfig::default_for(&m.arch).ok_or_else(|| {
            config_err(format!(
                "model.arch `{}` is not one of {}",
                m.arch,
                ARCHITECTURES.join(", ")
            ))
        })?;
        let mut used: Vec<&str> = Vec::new();
        match &mut arch {
            ArchConfig::MiniAlex { widths } => {
                set(widths, &m.widths, "widths", &mut used);
            }
            ArchConfig::MiniResnet {
                stages,
                blocks,
                trunk_widths,
            } => {
                set(stages, &m.stages, "stages", &mut used);
                set(blocks, &m.blocks, "blocks", &mut used);
                set(trunk_widths, &m.trunk_widths, "trunk_widths", &mut used);
            }
            ArchConfig::MiniVit {
                layers,
                dim,
                heads,
                mlp_ratio,
                patch,
            } => {
                set(layers, &m.layers, "layers", &mut used);
                set(dim, &m.dim, "dim", &mut used);
                set(heads, &m.heads, "heads", &mut used);
                set(mlp_ratio, &m.mlp_ratio, "mlp_ratio", &mut used);
                set(patch, &m.patch, "patch", &mut used);
            }
            ArchConfig::MiniEncdec {
                stacks,
                dim,
                heads,
                ffn_dim,
            } => {
                set(stacks, &m.stacks, "stacks", &mut used);
                set(dim, &m.dim, "dim", &mut used);
                set(heads, &m.heads, "heads", &mut used);
                set(ffn_dim, &m.ffn_dim, "ffn_dim", &mut used);
            }
        }
        let given = [
            ("widths", m.widths.is_some()),
            ("stages", m.stages.is_some()),
            ("blocks", m.blocks.is_some()),
            ("trunk_widths", m.trunk_widths.is_some()),
            ("layers", m.layers.is_some()),
            ("dim", m.dim.is_some()),
            ("heads", m.heads.is_some()),
            ("mlp_ratio", m.mlp_ratio.is_some()),
            ("patch", m.patch.is_some()),
            ("stacks", m.stacks.is_some()),
            ("ffn_dim", m.ffn_dim.is_some()),
        ];
        if let Some((field, _)) = given.iter().find(|(f, g)| *g && !used.contains(f)) {
            return Err(config_err(format!(
                "model.{field} does not apply to {}",
                m.arch
            )));
        }
        prunetrack_core::zoo::build(&arch, 0, true)
            .map_err(|e| config_err(format!("model: {e}")))?;
        Ok(arch)
    }

    fn resolve_train(
        &self,
        section: &TrainSection,
        base: TrainConfig,
        name: &str,
    ) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            lambda: section.lambda.unwrap_or(base.lambda),
            learning_rate: section.learning_rate.unwrap_or(base.learning_rate),
            momentum: section.momentum.unwrap_or(base.momentum),
            epochs: section.epochs.unwrap_or(base.epochs),
            steps_per_epoch: section.steps_per_epoch.unwrap_or(base.steps_per_epoch),
            batch_size: section.batch_size.unwrap_or(base.batch_size),
            ..base
        };
        cfg.validate()
            .map_err(|e| config_err(format!("{name}: {e}")))?;
        Ok(cfg)
    }

    /// Stage-1 settings; the run uses the master seed.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let base = TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        };
        self.resolve_train(&self.train, base, "train")
    }

    /// Fine-tuning settings; every budget uses the same derived seed so that
    /// budgets are compared on identical data.
    pub fn finetune_config(&self) -> Result<TrainConfig, CliError> {
        let base = TrainConfig {
            seed: self.seed.wrapping_add(1),
            epochs: 2,
            ..TrainConfig::finetune()
        };
        self.resolve_train(&self.finetune, base, "finetune")
    }

    pub fn pair_source(&self) -> Result<PairSource, CliError> {
        let base = PairSource::default();
        Ok(PairSource {
            sequence: self.benchmark()?.sequence,
            max_shift: self.data.max_shift.unwrap_or(base.max_shift),
            label_radius: self.data.label_radius.unwrap_or(base.label_radius),
        })
    }

    pub fn benchmark(&self) -> Result<BenchmarkSpec, CliError> {
        let b = &self.benchmark;
        let base = BenchmarkSpec::default();
        let s = &base.sequence;
        let spec = BenchmarkSpec {
            sequences: b.sequences.unwrap_or(base.sequences),
            first_seed: b.first_seed.unwrap_or(base.first_seed),
            sequence: SequenceSpec {
                length: b.length.unwrap_or(s.length),
                frame_size: b.frame_size.unwrap_or(s.frame_size),
                object_size: (
                    b.object_min.unwrap_or(s.object_size.0),
                    b.object_max.unwrap_or(s.object_size.1),
                ),
                motion: b.motion.unwrap_or(s.motion),
                texture: b.texture.unwrap_or(s.texture),
            },
        };
        if spec.sequences == 0 {
            return Err(config_err("benchmark.sequences must be at least 1"));
        }
        if spec.sequence.length < 2 {
            return Err(config_err("benchmark.length must be at least 2"));
        }
        if spec.sequence.object_size.0 > spec.sequence.object_size.1
            || spec.sequence.object_size.0 == 0
        {
            return Err(config_err(
                "benchmark.object_min must be positive and at most benchmark.object_max",
            ));
        }
        prunetrack_core::tracking::gen_sequence(
            spec.first_seed,
            &SequenceSpec {
                length: 2,
                ..spec.sequence.clone()
            },
        )
        .map_err(|e| config_err(format!("benchmark: {e}")))?;
        Ok(spec)
    }

    /// Budget spec for one sweep fraction.
    pub fn budget_spec(&self, fraction: f64) -> Result<BudgetSpec, CliError> {
        let p = &self.prune;
        let scaled = |s: Option<f64>| s.map(|s| (fraction * s).min(1.0));
        let spec = BudgetSpec {
            mode: p.mode,
            fraction,
            floor: p.floor,
            encoder_fraction: scaled(p.encoder_scale),
            decoder_fraction: scaled(p.decoder_scale),
        };
        spec.validate()
            .map_err(|e| config_err(format!("prune: {e}")))?;
        Ok(spec)
    }
}

fn set<T: Clone>(
    slot: &mut T,
    value: &Option<T>,
    name: &'static str,
    used: &mut Vec<&'static str>,
) {
    used.push(name);
    if let Some(v) = value {
        *slot = v.clone();
    }
}
