use std::collections::BTreeMap;

use super::{Attention, Layer, ModelError, ModelGraph, Result, Scale};
use crate::autodiff::{BnStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN; running-stat updates are reported.
    Train,
    /// Running statistics in BN.
    Eval,
}

/// Identifies one learnable tensor in [`ModelGraph::visit_params`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamId {
    Node { node: usize, slot: usize },
    Gate(String),
    HeadScale,
    HeadBias,
}

/// Tape leaves for every learnable tensor of a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub node_params: Vec<Vec<Var>>,
    pub gates: BTreeMap<String, Var>,
    pub head_scale: Var,
    pub head_bias: Var,
    /// All leaves in [`ModelGraph::visit_params`] order.
    pub flat: Vec<Var>,
}

/// Batch statistics observed by one BN node during a training forward.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub node: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ModelGraph {
    /// Visits node tensors (graph order), then gates (id order), then the
    /// correlation head scale and bias.
    pub fn visit_params(&self, mut f: impl FnMut(ParamId, &[usize], &[f64])) {
        for (node, n) in self.nodes.iter().enumerate() {
            for (slot, t) in n.layer.params().into_iter().enumerate() {
                f(ParamId::Node { node, slot }, t.shape(), t.data());
            }
        }
        for (id, g) in &self.gates {
            f(ParamId::Gate(id.clone()), &[g.len()], &g.values);
        }
        f(
            ParamId::HeadScale,
            self.head.scale.shape(),
            self.head.scale.data(),
        );
        f(
            ParamId::HeadBias,
            self.head.bias.shape(),
            self.head.bias.data(),
        );
    }

    /// Same order as [`ModelGraph::visit_params`].
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamId, &mut [f64])) {
        for (node, n) in self.nodes.iter_mut().enumerate() {
            for (slot, t) in n.layer.params_mut().into_iter().enumerate() {
                f(ParamId::Node { node, slot }, t.data_mut());
            }
        }
        for (id, g) in self.gates.iter_mut() {
            f(ParamId::Gate(id.clone()), &mut g.values);
        }
        f(ParamId::HeadScale, self.head.scale.data_mut());
        f(ParamId::HeadBias, self.head.bias.data_mut());
    }

    /// Records every learnable tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let mut flat = Vec::new();
        let mut leaf = |tape: &mut Tape, t: Tensor| {
            let v = tape.leaf(t, requires_grad);
            flat.push(v);
            v
        };
        let node_params = self
            .nodes
            .iter()
            .map(|n| {
                n.layer
                    .params()
                    .into_iter()
                    .map(|t| leaf(tape, t.clone()))
                    .collect()
            })
            .collect();
        let gates = self
            .gates
            .iter()
            .map(|(id, g)| (id.clone(), leaf(tape, Tensor::from_vec(g.values.clone()))))
            .collect();
        let head_scale = leaf(tape, self.head.scale.clone());
        let head_bias = leaf(tape, self.head.bias.clone());
        Bound {
            node_params,
            gates,
            head_scale,
            head_bias,
            flat,
        }
    }

    /// Backbone features of `x[N,3,H,W]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let all = self.nodes_on_tape(tape, bound, x, mode, updates)?;
        Ok(all[self.output])
    }

    /// Inference-mode value of every node.
    pub fn node_values(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let vars = self.nodes_on_tape(&mut tape, &bound, xv, Mode::Eval, &mut Vec::new())?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn nodes_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Vec<Var>> {
        let mut out: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let input = |k: usize| -> Result<Var> {
                node.inputs
                    .get(k)
                    .and_then(|&p| out[p])
                    .ok_or_else(|| ModelError::Shape {
                        node: node.id.clone(),
                        reason: format!("missing input {k}"),
                    })
            };
            let p = &bound.node_params[i];
            let gate = |id: &str| -> Result<Var> {
                bound
                    .gates
                    .get(id)
                    .copied()
                    .ok_or_else(|| ModelError::UnknownGate(id.to_string()))
            };
            let wrap = |e| shape_err(&node.id, e);
            let v = match &node.layer {
                Layer::Input => x,
                Layer::Conv2d(c) => tape
                    .conv2d(input(0)?, p[0], p.get(1).copied(), c.stride, c.padding)
                    .map_err(wrap)?,
                Layer::BatchNorm(b) => {
                    let (gamma, beta) = match &b.gamma {
                        Scale::Gate(id) => (gate(id)?, p[0]),
                        Scale::Plain(_) => (p[0], p[1]),
                    };
                    let stats = match mode {
                        Mode::Train => BnStats::Batch,
                        Mode::Eval => BnStats::Running {
                            mean: b.running_mean.data(),
                            var: b.running_var.data(),
                        },
                    };
                    let (y, batch) = tape
                        .batch_norm(input(0)?, gamma, beta, stats, b.eps)
                        .map_err(wrap)?;
                    if let Some((mean, var)) = batch {
                        updates.push(StatUpdate { node: i, mean, var });
                    }
                    y
                }
                Layer::Relu => tape.relu(input(0)?).map_err(wrap)?,
                Layer::Gelu => tape.gelu(input(0)?).map_err(wrap)?,
                Layer::MaxPool { kernel, stride } => {
                    tape.max_pool2d(input(0)?, *kernel, *stride).map_err(wrap)?
                }
                Layer::ResidualAdd => tape.add(input(0)?, input(1)?).map_err(wrap)?,
                Layer::Identity => input(0)?,
                Layer::Linear(_) => tape
                    .linear(input(0)?, p[0], p.get(1).copied())
                    .map_err(wrap)?,
                Layer::LayerNorm(l) => tape
                    .layer_norm(input(0)?, p[0], p[1], l.eps)
                    .map_err(wrap)?,
                Layer::Attention(a) => {
                    let source = if node.inputs.len() > 1 {
                        input(1)?
                    } else {
                        input(0)?
                    };
                    let m = a.gate.as_deref().map(gate).transpose()?;
                    attention(tape, a, p, m, input(0)?, source).map_err(wrap)?
                }
                Layer::Mlp(mlp) => {
                    let m = mlp.gate.as_deref().map(gate).transpose()?;
                    mlp_forward(tape, p, m, input(0)?).map_err(wrap)?
                }
                Layer::ToTokens => tape.map_to_tokens(input(0)?).map_err(wrap)?,
                Layer::PosEmbed { .. } => {
                    let x = input(0)?;
                    let tokens = tape.value(x).shape().get(1).copied().unwrap_or(0);
                    let side = (tokens as f64).sqrt().round() as usize;
                    let table = tape.crop_center(p[0], side, side).map_err(wrap)?;
                    tape.add_broadcast(x, table).map_err(wrap)?
                }
                Layer::ToMap => tape.tokens_to_map(input(0)?).map_err(wrap)?,
            };
            out[i] = Some(v);
        }
        Ok(out
            .into_iter()
            .map(|v| v.expect("every node evaluated"))
            .collect())
    }

    /// Response map `[N,1,R,R]` of templates over search regions.
    pub fn siamese_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        template: Var,
        search: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let zt = self.forward_on_tape(tape, bound, template, mode, updates)?;
        let zs = self.forward_on_tape(tape, bound, search, mode, updates)?;
        self.correlate(tape, bound, zt, zs)
    }

    fn correlate(&self, tape: &mut Tape, bound: &Bound, zt: Var, zs: Var) -> Result<Var> {
        let (ts, ss) = (tape.value(zt).shape(), tape.value(zs).shape());
        if ts.len() == 4 && ss.len() == 4 && (ts[2] > ss[2] || ts[3] > ss[3]) {
            return Err(ModelError::TemplateTooLarge {
                template: ts.to_vec(),
                search: ss.to_vec(),
            });
        }
        let r = tape.xcorr(zs, zt)?;
        let r = tape.scalar_div(r, self.head.norm)?;
        let shape = tape.value(r).shape().to_vec();
        let r = tape.scale_by(r, bound.head_scale)?;
        let flat = tape.reshape(r, &[shape.iter().product(), 1])?;
        let flat = tape.add_broadcast(flat, bound.head_bias)?;
        Ok(tape.reshape(flat, &shape)?)
    }

    /// Inference-mode backbone features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward_on_tape(&mut tape, &bound, xv, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(y).clone())
    }

    /// Inference-mode response map.
    pub fn siamese(&self, template: &Tensor, search: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let t = tape.constant(template.clone());
        let s = tape.constant(search.clone());
        let r = self.siamese_on_tape(&mut tape, &bound, t, s, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(r).clone())
    }

    /// Response map from precomputed template and search features.
    pub fn respond(&self, template_features: &Tensor, search_features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zt = tape.constant(template_features.clone());
        let zs = tape.constant(search_features.clone());
        let r = self.correlate(&mut tape, &bound, zt, zs)?;
        Ok(tape.value(r).clone())
    }

    /// Folds observed batch statistics into BN running statistics.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            if let Layer::BatchNorm(b) = &mut self.nodes[u.node].layer {
                let m = b.momentum;
                for (r, v) in b.running_mean.data_mut().iter_mut().zip(&u.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in b.running_var.data_mut().iter_mut().zip(&u.var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }
}

fn shape_err(node: &str, e: crate::tensor::TensorError) -> ModelError {
    if let crate::tensor::TensorError::NonFinite { .. } = e {
        return ModelError::Tensor(e);
    }
    ModelError::Shape {
        node: node.to_string(),
        reason: e.to_string(),
    }
}

fn attention(
    tape: &mut Tape,
    a: &Attention,
    p: &[Var],
    gate: Option<Var>,
    x: Var,
    source: Var,
) -> crate::tensor::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if a.heads == 0 {
        let d_out = tape.value(p[6]).shape()[0];
        return Ok(tape.constant(Tensor::zeros(&[shape[0], shape[1], d_out])));
    }
    let q = tape.linear(x, p[0], Some(p[1]))?;
    let k = tape.linear(source, p[2], Some(p[3]))?;
    let v = tape.linear(source, p[4], Some(p[5]))?;
    let q = tape.split_heads(q, a.heads)?;
    let k = tape.split_heads(k, a.heads)?;
    let v = tape.split_heads(v, a.heads)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scalar_div(scores, (a.head_dim as f64).sqrt())?;
    let probs = tape.softmax_lastdim(scores)?;
    let o = tape.bmm(probs, v, false)?;
    let mut merged = tape.merge_heads(o, a.heads)?;
    let bias = match gate {
        Some(m) => {
            merged = tape.mul_groups(merged, m)?;
            let live = tape.sum(m)?;
            let share = tape.scalar_div(live, a.bias_heads as f64)?;
            tape.scale_by(p[7], share)?
        }
        None => p[7],
    };
    let out = tape.linear(merged, p[6], None)?;
    tape.add_broadcast(out, bias)
}

fn mlp_forward(
    tape: &mut Tape,
    p: &[Var],
    gate: Option<Var>,
    x: Var,
) -> crate::tensor::Result<Var> {
    let h = tape.linear(x, p[0], Some(p[1]))?;
    let mut h = tape.gelu(h)?;
    if let Some(m) = gate {
        h = tape.mul_groups(h, m)?;
    }
    tape.linear(h, p[2], Some(p[3]))
}

impl ModelGraph {
    /// Adds N(0, std) noise to every learnable tensor and gate and randomizes
    /// BN running statistics. Used to probe structural properties away from
    /// the symmetric initial state.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        use rand::{Rng, SeedableRng};
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        self.visit_params_mut(|_, data| {
            data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        });
        for n in &mut self.nodes {
            if let Layer::BatchNorm(b) = &mut n.layer {
                for v in b.running_mean.data_mut() {
                    *v = normal.sample(&mut rng);
                }
                for v in b.running_var.data_mut() {
                    *v = 0.5 + rng.random::<f64>();
                }
            }
        }
    }
}
