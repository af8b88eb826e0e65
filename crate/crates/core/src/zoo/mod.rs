//! Gated toy backbones and the graph structure every pipeline stage transforms.
//!
//! A [`ModelGraph`] is a topologically ordered list of [`Node`]s. Each node
//! names its producers by index, so a node may only consume earlier nodes.
//! Learnable scaling factors that the planner ranks live in
//! [`ModelGraph::gates`]; layers refer to them by id.

mod build;
mod forward;
mod shapes;

pub use build::{build, build_mini_alex, build_mini_encdec, build_mini_resnet, build_mini_vit};
pub use forward::{Bound, Mode, ParamId, StatUpdate};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
/// Initial value of every gate entry, BN γ and explicit masks alike.
pub const GATE_INIT: f64 = 0.5;
pub const TEMPLATE_SIZE: usize = 32;
pub const SEARCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture configuration: {0}")]
    Config(String),
    #[error("embedding dimension {dim} is not divisible by {heads} heads")]
    IndivisibleHeads { dim: usize, heads: usize },
    #[error("trunk width {width} is not divisible by the bottleneck expansion {expansion}")]
    TrunkWidth { width: usize, expansion: usize },
    #[error("template features {template:?} are larger than search features {search:?}")]
    TemplateTooLarge {
        template: Vec<usize>,
        search: Vec<usize>,
    },
    #[error("node `{node}`: {reason}")]
    Shape { node: String, reason: String },
    #[error("gate `{gate}`: {reason}")]
    Gate { gate: String, reason: String },
    #[error("unknown gate `{0}`")]
    UnknownGate(String),
    #[error("gate `{gate}` would remove channels on an ungated axis at node `{node}`")]
    UngatedAxis { gate: String, node: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Channel,
    Head,
    HiddenUnit,
}

/// Which half of an encoder-decoder model a gate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Encoder,
    Decoder,
}

/// Learnable scaling factors attached to one prunable axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateVector {
    pub id: String,
    pub values: Vec<f64>,
    pub granularity: Granularity,
    /// Id of the node whose axis this gate governs.
    pub layer: String,
    pub block: Option<String>,
    pub scope: Option<Scope>,
}

impl GateVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// BN γ: either a prunable gate or an ordinary affine weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Gate(String),
    Plain(Tensor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2d {
    /// `[Cout, Cin, k, k]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNorm {
    pub gamma: Scale,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

/// Multi-head attention with optional per-head multiplicative gate.
///
/// Projection rows are grouped by head: rows `h*head_dim..(h+1)*head_dim` of
/// `wq`/`wk`/`wv` and the same columns of `wo` belong to head `h`. With gate
/// `m`, the output is `Σ_h m_h·(Wo_h·o_h + bo/bias_heads)`, so zeroing every
/// head silences the branch entirely. `bias_heads` is the head count at
/// construction and never changes under surgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attention {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub heads: usize,
    pub head_dim: usize,
    pub bias_heads: usize,
    pub gate: Option<String>,
}

/// Two-layer GELU MLP with optional per-hidden-unit gate:
/// `W2·(m ⊙ gelu(W1·x + b1)) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub gate: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Input,
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Gelu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    ResidualAdd,
    Identity,
    Linear(Linear),
    LayerNorm(LayerNorm),
    Attention(Attention),
    Mlp(Mlp),
    /// `[N,C,H,W] -> [N,H*W,C]`
    ToTokens,
    /// Adds the centered crop of a `[G,G,d]` table matching the token grid.
    PosEmbed {
        table: Tensor,
    },
    /// `[N,T,C] -> [N,C,√T,√T]`
    ToMap,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input => "input",
            Layer::Conv2d(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::Gelu => "gelu",
            Layer::MaxPool { .. } => "pool",
            Layer::ResidualAdd => "residual_add",
            Layer::Identity => "identity",
            Layer::Linear(_) => "linear",
            Layer::LayerNorm(_) => "layernorm",
            Layer::Attention(_) => "mhsa",
            Layer::Mlp(_) => "mlp",
            Layer::ToTokens => "to_tokens",
            Layer::PosEmbed { .. } => "pos_embed",
            Layer::ToMap => "to_map",
        }
    }

    /// Learnable tensors owned by the layer, in a fixed order. Gate values are
    /// held by the graph and are not listed here.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(b) => match &b.gamma {
                Scale::Plain(g) => vec![g, &b.beta],
                Scale::Gate(_) => vec![&b.beta],
            },
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::LayerNorm(l) => vec![&l.weight, &l.bias],
            Layer::Attention(a) => vec![&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo],
            Layer::Mlp(m) => vec![&m.w1, &m.b1, &m.w2, &m.b2],
            Layer::PosEmbed { table } => vec![table],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&mut c.weight)
                .chain(c.bias.as_mut())
                .collect(),
            Layer::BatchNorm(b) => match &mut b.gamma {
                Scale::Plain(g) => vec![g, &mut b.beta],
                Scale::Gate(_) => vec![&mut b.beta],
            },
            Layer::Linear(l) => std::iter::once(&mut l.weight)
                .chain(l.bias.as_mut())
                .collect(),
            Layer::LayerNorm(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Attention(a) => vec![
                &mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo,
                &mut a.bo,
            ],
            Layer::Mlp(m) => vec![&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2],
            Layer::PosEmbed { table } => vec![table],
            _ => Vec::new(),
        }
    }

    /// Gate referenced by this layer, if any.
    pub fn gate(&self) -> Option<&str> {
        match self {
            Layer::BatchNorm(BatchNorm {
                gamma: Scale::Gate(g),
                ..
            }) => Some(g),
            Layer::Attention(Attention { gate: Some(g), .. }) => Some(g),
            Layer::Mlp(Mlp { gate: Some(g), .. }) => Some(g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub inputs: Vec<usize>,
    pub layer: Layer,
}

/// Learnable affine on the cross-correlation: `scale·xcorr/norm + bias`.
/// `norm` is fixed at construction (the template feature volume) and is
/// not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrHead {
    pub scale: Tensor,
    pub bias: Tensor,
    pub norm: f64,
}

/// Architecture family and the dimensions it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    MiniAlex {
        widths: Vec<usize>,
    },
    MiniResnet {
        stages: usize,
        blocks: usize,
        trunk_widths: Vec<usize>,
    },
    MiniVit {
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        patch: usize,
    },
    MiniEncdec {
        stacks: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    },
}

impl ArchConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ArchConfig::MiniAlex { .. } => "mini_alex",
            ArchConfig::MiniResnet { .. } => "mini_resnet",
            ArchConfig::MiniVit { .. } => "mini_vit",
            ArchConfig::MiniEncdec { .. } => "mini_encdec",
        }
    }

    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "mini_alex" => ArchConfig::MiniAlex {
                widths: vec![32, 64, 96, 96, 64],
            },
            "mini_resnet" => ArchConfig::MiniResnet {
                stages: 2,
                blocks: 2,
                trunk_widths: vec![32, 64],
            },
            "mini_vit" => ArchConfig::MiniVit {
                layers: 6,
                dim: 64,
                heads: 4,
                mlp_ratio: 4,
                patch: 8,
            },
            "mini_encdec" => ArchConfig::MiniEncdec {
                stacks: 4,
                dim: 96,
                heads: 4,
                ffn_dim: 768,
            },
            _ => return None,
        })
    }

    /// Reduced dimensions of each family, small enough for exhaustive
    /// numerical checks.
    pub fn toy_for(name: &str) -> Option<Self> {
        Some(match name {
            "mini_alex" => ArchConfig::MiniAlex {
                widths: vec![4, 6, 8, 8, 6],
            },
            "mini_resnet" => ArchConfig::MiniResnet {
                stages: 2,
                blocks: 1,
                trunk_widths: vec![8, 16],
            },
            "mini_vit" => ArchConfig::MiniVit {
                layers: 2,
                dim: 16,
                heads: 2,
                mlp_ratio: 2,
                patch: 8,
            },
            "mini_encdec" => ArchConfig::MiniEncdec {
                stacks: 1,
                dim: 16,
                heads: 2,
                ffn_dim: 32,
            },
            _ => return None,
        })
    }

    pub fn is_transformer(&self) -> bool {
        matches!(
            self,
            ArchConfig::MiniVit { .. } | ArchConfig::MiniEncdec { .. }
        )
    }
}

pub const ARCHITECTURES: [&str; 4] = ["mini_alex", "mini_resnet", "mini_vit", "mini_encdec"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGraph {
    pub arch: ArchConfig,
    /// Spatial side of the template and search inputs (square, 3 channels).
    pub template_size: usize,
    pub search_size: usize,
    pub nodes: Vec<Node>,
    pub output: usize,
    pub gates: BTreeMap<String, GateVector>,
    pub head: CorrHead,
}

impl ModelGraph {
    pub fn search_shape(&self) -> Vec<usize> {
        vec![1, 3, self.search_size, self.search_size]
    }

    pub fn template_shape(&self) -> Vec<usize> {
        vec![1, 3, self.template_size, self.template_size]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Total number of gate entries.
    pub fn gate_entries(&self) -> usize {
        self.gates.values().map(GateVector::len).sum()
    }

    /// Sets every gate entry to `value`.
    pub fn fill_gates(&mut self, value: f64) {
        for g in self.gates.values_mut() {
            g.values.iter_mut().for_each(|v| *v = value);
        }
    }

    /// Consumers of each node, by index.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &p in &n.inputs {
                out[p].push(i);
            }
        }
        out
    }

    /// Structural checks: topological order, one input node, every gate
    /// referenced by exactly one layer with a matching axis extent, and
    /// consistent shapes for both siamese inputs.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.nodes.first().map(|n| &n.layer), Some(Layer::Input)) {
            return Err(ModelError::Config("first node must be the input".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(&bad) = n.inputs.iter().find(|&&p| p >= i) {
                return Err(ModelError::Shape {
                    node: n.id.clone(),
                    reason: format!("consumes node {bad}, which is not an earlier node"),
                });
            }
            if i > 0 && matches!(n.layer, Layer::Input) {
                return Err(ModelError::Config("more than one input node".into()));
            }
        }
        if self.output >= self.nodes.len() {
            return Err(ModelError::Config("output index out of range".into()));
        }
        let mut refs: BTreeMap<&str, usize> = BTreeMap::new();
        for n in &self.nodes {
            if let Some(g) = n.layer.gate() {
                *refs.entry(g).or_default() += 1;
                let gate = self
                    .gates
                    .get(g)
                    .ok_or_else(|| ModelError::UnknownGate(g.to_string()))?;
                let extent = match &n.layer {
                    Layer::BatchNorm(b) => b.beta.numel(),
                    Layer::Attention(a) => a.heads,
                    Layer::Mlp(m) => m.b1.numel(),
                    _ => unreachable!("only bn, mhsa and mlp carry gates"),
                };
                if gate.len() != extent {
                    return Err(ModelError::Gate {
                        gate: g.to_string(),
                        reason: format!(
                            "length {} does not match axis extent {extent}",
                            gate.len()
                        ),
                    });
                }
                if gate.layer != n.id {
                    return Err(ModelError::Gate {
                        gate: g.to_string(),
                        reason: format!(
                            "tagged with layer `{}` but used by `{}`",
                            gate.layer, n.id
                        ),
                    });
                }
            }
        }
        for id in self.gates.keys() {
            match refs.get(id.as_str()) {
                Some(1) => {}
                Some(k) => {
                    return Err(ModelError::Gate {
                        gate: id.clone(),
                        reason: format!("referenced by {k} layers"),
                    })
                }
                None => {
                    return Err(ModelError::Gate {
                        gate: id.clone(),
                        reason: "not referenced by any layer".into(),
                    })
                }
            }
        }
        self.infer_shapes(&self.template_shape())?;
        self.infer_shapes(&self.search_shape())?;
        Ok(())
    }
}
