use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ArchConfig, Attention, BatchNorm, Conv2d, CorrHead, GateVector, Granularity, Layer, LayerNorm,
    Mlp, ModelError, ModelGraph, Node, Result, Scale, Scope, BN_EPS, BN_MOMENTUM, GATE_INIT,
    LN_EPS, SEARCH_SIZE, TEMPLATE_SIZE,
};
use crate::tensor::Tensor;

const BOTTLENECK_EXPANSION: usize = 4;
const ENCDEC_STEM_WIDTH: usize = 32;

/// Builds the architecture described by `arch`. With `gated = false` every
/// would-be gate is replaced by a plain weight of 1 (BN) or omitted (masks),
/// drawing the same random weights as the gated build.
/// Kernel, stride, padding and the optional (kernel, stride) pool after it.
type ConvBlock = (usize, usize, usize, Option<(usize, usize)>);

pub fn build(arch: &ArchConfig, seed: u64, gated: bool) -> Result<ModelGraph> {
    let mut b = Builder::new(seed, gated);
    match arch {
        ArchConfig::MiniAlex { widths } => b.mini_alex(widths)?,
        ArchConfig::MiniResnet {
            stages,
            blocks,
            trunk_widths,
        } => b.mini_resnet(*stages, *blocks, trunk_widths)?,
        ArchConfig::MiniVit {
            layers,
            dim,
            heads,
            mlp_ratio,
            patch,
        } => b.mini_vit(*layers, *dim, *heads, *mlp_ratio, *patch)?,
        ArchConfig::MiniEncdec {
            stacks,
            dim,
            heads,
            ffn_dim,
        } => b.mini_encdec(*stacks, *dim, *heads, *ffn_dim)?,
    }
    b.finish(arch.clone())
}

pub fn build_mini_alex(widths: &[usize], seed: u64) -> Result<ModelGraph> {
    build(
        &ArchConfig::MiniAlex {
            widths: widths.to_vec(),
        },
        seed,
        true,
    )
}

pub fn build_mini_resnet(
    stages: usize,
    blocks: usize,
    trunk_widths: &[usize],
    seed: u64,
) -> Result<ModelGraph> {
    build(
        &ArchConfig::MiniResnet {
            stages,
            blocks,
            trunk_widths: trunk_widths.to_vec(),
        },
        seed,
        true,
    )
}

pub fn build_mini_vit(
    layers: usize,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
    patch: usize,
    seed: u64,
) -> Result<ModelGraph> {
    build(
        &ArchConfig::MiniVit {
            layers,
            dim,
            heads,
            mlp_ratio,
            patch,
        },
        seed,
        true,
    )
}

pub fn build_mini_encdec(
    stacks: usize,
    dim: usize,
    heads: usize,
    ffn_dim: usize,
    seed: u64,
) -> Result<ModelGraph> {
    build(
        &ArchConfig::MiniEncdec {
            stacks,
            dim,
            heads,
            ffn_dim,
        },
        seed,
        true,
    )
}

struct GateTag {
    granularity: Granularity,
    block: Option<String>,
    scope: Option<Scope>,
}

struct Builder {
    rng: ChaCha8Rng,
    gated: bool,
    nodes: Vec<Node>,
    gates: BTreeMap<String, GateVector>,
}

/// Transformer gates belong to the layer named by their id prefix.
fn layer_block(id: &str) -> Option<String> {
    id.split_once('.').map(|(b, _)| b.to_string())
}

impl Builder {
    fn new(seed: u64, gated: bool) -> Self {
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            gated,
            nodes: Vec::new(),
            gates: BTreeMap::new(),
        };
        b.push("input", vec![], Layer::Input);
        b
    }

    fn push(&mut self, id: impl Into<String>, inputs: Vec<usize>, layer: Layer) -> usize {
        self.nodes.push(Node {
            id: id.into(),
            inputs,
            layer,
        });
        self.nodes.len() - 1
    }

    fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Registers a gate named after the node about to be pushed.
    fn gate(&mut self, id: &str, len: usize, tag: GateTag) -> Option<String> {
        if !self.gated {
            return None;
        }
        self.gates.insert(
            id.to_string(),
            GateVector {
                id: id.to_string(),
                values: vec![GATE_INIT; len],
                granularity: tag.granularity,
                layer: id.to_string(),
                block: tag.block,
                scope: tag.scope,
            },
        );
        Some(id.to_string())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        input: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> usize {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = Tensor::randn(&[cout, cin, k, k], std, &mut self.rng);
        let bias = bias.then(|| Tensor::zeros(&[cout]));
        self.push(
            id,
            vec![input],
            Layer::Conv2d(Conv2d {
                weight,
                bias,
                stride,
                padding,
            }),
        )
    }

    fn bn(&mut self, id: &str, input: usize, c: usize, tag: Option<GateTag>) -> usize {
        let gamma = match tag.and_then(|t| self.gate(id, c, t)) {
            Some(g) => Scale::Gate(g),
            None => Scale::Plain(Tensor::full(&[c], 1.0)),
        };
        self.push(
            id,
            vec![input],
            Layer::BatchNorm(BatchNorm {
                gamma,
                beta: Tensor::zeros(&[c]),
                running_mean: Tensor::zeros(&[c]),
                running_var: Tensor::full(&[c], 1.0),
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            }),
        )
    }

    fn relu(&mut self, id: &str, input: usize) -> usize {
        self.push(id, vec![input], Layer::Relu)
    }

    fn dense(&mut self, out: usize, inp: usize) -> Tensor {
        let std = 1.0 / (inp.max(1) as f64).sqrt();
        Tensor::randn(&[out, inp], std, &mut self.rng)
    }

    fn layer_norm(&mut self, id: &str, input: usize, d: usize) -> usize {
        self.push(
            id,
            vec![input],
            Layer::LayerNorm(LayerNorm {
                weight: Tensor::full(&[d], 1.0),
                bias: Tensor::zeros(&[d]),
                eps: LN_EPS,
            }),
        )
    }

    fn attention(
        &mut self,
        id: &str,
        inputs: Vec<usize>,
        dim: usize,
        heads: usize,
        scope: Option<Scope>,
    ) -> usize {
        let gate = self.gate(
            id,
            heads,
            GateTag {
                granularity: Granularity::Head,
                block: layer_block(id),
                scope,
            },
        );
        let layer = Attention {
            wq: self.dense(dim, dim),
            bq: Tensor::zeros(&[dim]),
            wk: self.dense(dim, dim),
            bk: Tensor::zeros(&[dim]),
            wv: self.dense(dim, dim),
            bv: Tensor::zeros(&[dim]),
            wo: self.dense(dim, dim),
            bo: Tensor::zeros(&[dim]),
            heads,
            head_dim: dim / heads,
            bias_heads: heads,
            gate,
        };
        self.push(id, inputs, Layer::Attention(layer))
    }

    fn mlp(
        &mut self,
        id: &str,
        input: usize,
        dim: usize,
        hidden: usize,
        scope: Option<Scope>,
    ) -> usize {
        let gate = self.gate(
            id,
            hidden,
            GateTag {
                granularity: Granularity::HiddenUnit,
                block: layer_block(id),
                scope,
            },
        );
        let layer = Mlp {
            w1: self.dense(hidden, dim),
            b1: Tensor::zeros(&[hidden]),
            w2: self.dense(dim, hidden),
            b2: Tensor::zeros(&[dim]),
            gate,
        };
        self.push(id, vec![input], Layer::Mlp(layer))
    }

    fn pos_embed(&mut self, id: &str, input: usize, grid: usize, dim: usize) -> usize {
        let table = Tensor::randn(&[grid, grid, dim], 0.02, &mut self.rng);
        self.push(id, vec![input], Layer::PosEmbed { table })
    }

    fn mini_alex(&mut self, widths: &[usize]) -> Result<()> {
        if widths.len() != 5 {
            return Err(ModelError::Config(format!(
                "mini_alex needs 5 channel widths, got {}",
                widths.len()
            )));
        }
        if widths.contains(&0) {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        let blocks: [ConvBlock; 4] = [
            (5, 2, 0, Some((2, 2))),
            (3, 1, 0, Some((3, 1))),
            (3, 1, 1, None),
            (3, 1, 1, None),
        ];
        let mut cin = 3;
        let mut x = 0;
        for (i, &(k, s, p, pool)) in blocks.iter().enumerate() {
            let n = i + 1;
            x = self.conv(&format!("conv{n}"), x, cin, widths[i], k, s, p, false);
            let tag = GateTag {
                granularity: Granularity::Channel,
                block: None,
                scope: None,
            };
            x = self.bn(&format!("bn{n}"), x, widths[i], Some(tag));
            x = self.relu(&format!("relu{n}"), x);
            if let Some((kernel, stride)) = pool {
                x = self.push(
                    format!("pool{n}"),
                    vec![x],
                    Layer::MaxPool { kernel, stride },
                );
            }
            cin = widths[i];
        }
        self.conv("conv5", x, cin, widths[4], 1, 1, 0, true);
        Ok(())
    }

    fn mini_resnet(&mut self, stages: usize, blocks: usize, widths: &[usize]) -> Result<()> {
        if stages == 0 || widths.len() != stages {
            return Err(ModelError::Config(format!(
                "mini_resnet needs one trunk width per stage ({stages} stages, {} widths)",
                widths.len()
            )));
        }
        if let Some(&w) = widths
            .iter()
            .find(|&&w| w == 0 || w % BOTTLENECK_EXPANSION != 0)
        {
            return Err(ModelError::TrunkWidth {
                width: w,
                expansion: BOTTLENECK_EXPANSION,
            });
        }
        let mut cin = 3;
        let mut x = 0;
        for (s, &trunk) in widths.iter().enumerate() {
            let stage = if s == 0 {
                "stem".to_string()
            } else {
                format!("s{}.down", s + 1)
            };
            x = self.conv(&stage, x, cin, trunk, 3, 2, 1, false);
            x = self.bn(&format!("{stage}.bn"), x, trunk, None);
            x = self.relu(&format!("{stage}.relu"), x);
            cin = trunk;
            let mid = trunk / BOTTLENECK_EXPANSION;
            for b in 0..blocks {
                let block = format!("s{}.b{}", s + 1, b + 1);
                let tag = || GateTag {
                    granularity: Granularity::Channel,
                    block: Some(block.clone()),
                    scope: None,
                };
                let skip = x;
                let mut y = self.conv(&format!("{block}.reduce"), x, trunk, mid, 1, 1, 0, false);
                y = self.bn(&format!("{block}.bn_a"), y, mid, Some(tag()));
                y = self.relu(&format!("{block}.relu_a"), y);
                y = self.conv(&format!("{block}.conv"), y, mid, mid, 3, 1, 1, false);
                y = self.bn(&format!("{block}.bn_b"), y, mid, Some(tag()));
                y = self.relu(&format!("{block}.relu_b"), y);
                y = self.conv(&format!("{block}.expand"), y, mid, trunk, 1, 1, 0, false);
                let sum = self.push(format!("{block}.add"), vec![skip, y], Layer::ResidualAdd);
                x = self.relu(&format!("{block}.out"), sum);
            }
        }
        Ok(())
    }

    fn check_heads(dim: usize, heads: usize) -> Result<()> {
        if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(ModelError::IndivisibleHeads { dim, heads });
        }
        Ok(())
    }

    fn encoder_layer(
        &mut self,
        prefix: &str,
        x: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        scope: Option<Scope>,
    ) -> usize {
        let h = self.layer_norm(&format!("{prefix}.ln1"), x, dim);
        let a = self.attention(&format!("{prefix}.attn"), vec![h], dim, heads, scope);
        let x = self.push(format!("{prefix}.add1"), vec![x, a], Layer::ResidualAdd);
        let h = self.layer_norm(&format!("{prefix}.ln2"), x, dim);
        let m = self.mlp(&format!("{prefix}.mlp"), h, dim, hidden, scope);
        self.push(format!("{prefix}.add2"), vec![x, m], Layer::ResidualAdd)
    }

    fn mini_vit(
        &mut self,
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        patch: usize,
    ) -> Result<()> {
        Self::check_heads(dim, heads)?;
        if patch == 0 || !SEARCH_SIZE.is_multiple_of(patch) || !TEMPLATE_SIZE.is_multiple_of(patch)
        {
            return Err(ModelError::Config(format!(
                "patch size {patch} must divide both input sizes"
            )));
        }
        if mlp_ratio == 0 {
            return Err(ModelError::Config("mlp ratio must be positive".into()));
        }
        let mut x = self.conv("patch", 0, 3, dim, patch, patch, 0, true);
        x = self.push("tokens", vec![x], Layer::ToTokens);
        x = self.pos_embed("pos", x, SEARCH_SIZE / patch, dim);
        for l in 0..layers {
            x = self.encoder_layer(&format!("l{}", l + 1), x, dim, heads, dim * mlp_ratio, None);
        }
        x = self.layer_norm("ln_f", x, dim);
        self.push("map", vec![x], Layer::ToMap);
        Ok(())
    }

    fn mini_encdec(&mut self, stacks: usize, dim: usize, heads: usize, ffn: usize) -> Result<()> {
        Self::check_heads(dim, heads)?;
        if ffn == 0 {
            return Err(ModelError::Config(
                "feedforward width must be positive".into(),
            ));
        }
        let mut x = self.conv("stem1", 0, 3, ENCDEC_STEM_WIDTH, 4, 4, 0, false);
        x = self.bn("stem1.bn", x, ENCDEC_STEM_WIDTH, None);
        x = self.relu("stem1.relu", x);
        x = self.conv("stem2", x, ENCDEC_STEM_WIDTH, dim, 2, 2, 0, true);
        x = self.push("tokens", vec![x], Layer::ToTokens);
        let embed = self.pos_embed("pos", x, SEARCH_SIZE / 8, dim);
        let mut x = embed;
        for l in 0..stacks {
            let enc = Some(Scope::Encoder);
            x = self.encoder_layer(&format!("enc{}", l + 1), x, dim, heads, ffn, enc);
        }
        let memory = self.layer_norm("enc.ln", x, dim);
        let mut x = embed;
        let dec = Some(Scope::Decoder);
        for l in 0..stacks {
            let p = format!("dec{}", l + 1);
            let h = self.layer_norm(&format!("{p}.ln1"), x, dim);
            let a = self.attention(&format!("{p}.self_attn"), vec![h], dim, heads, dec);
            x = self.push(format!("{p}.add1"), vec![x, a], Layer::ResidualAdd);
            let h = self.layer_norm(&format!("{p}.ln2"), x, dim);
            let a = self.attention(&format!("{p}.cross_attn"), vec![h, memory], dim, heads, dec);
            x = self.push(format!("{p}.add2"), vec![x, a], Layer::ResidualAdd);
            let h = self.layer_norm(&format!("{p}.ln3"), x, dim);
            let m = self.mlp(&format!("{p}.mlp"), h, dim, ffn, dec);
            x = self.push(format!("{p}.add3"), vec![x, m], Layer::ResidualAdd);
        }
        x = self.layer_norm("dec.ln", x, dim);
        self.push("map", vec![x], Layer::ToMap);
        Ok(())
    }

    fn finish(self, arch: ArchConfig) -> Result<ModelGraph> {
        let output = self.last();
        let mut graph = ModelGraph {
            arch,
            template_size: TEMPLATE_SIZE,
            search_size: SEARCH_SIZE,
            nodes: self.nodes,
            output,
            gates: self.gates,
            head: CorrHead {
                scale: Tensor::scalar(1.0),
                bias: Tensor::scalar(0.0),
                norm: 1.0,
            },
        };
        graph.validate()?;
        let t = graph.feature_shape(&graph.template_shape())?;
        let fan_in: usize = t[1..].iter().product();
        graph.head.norm = fan_in.max(1) as f64;
        Ok(graph)
    }
}
