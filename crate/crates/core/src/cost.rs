//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs. Elementwise layers cost 1 FLOP
//! per output element, normalizations 5, and max pooling one comparison per
//! window element. Bias additions inside conv and linear layers are not
//! counted. Parameters are the learnable tensors including gates and the
//! correlation head; BN running statistics are excluded.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::zoo::{Layer, ModelGraph, Result};

/// Storage width assumed for a parameter.
pub const BYTES_PER_PARAM: u64 = 4;
/// FLOPs per element charged for batch and layer normalization.
pub const NORM_FLOPS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub flops: u64,
}

impl CostReport {
    pub fn param_bytes(&self) -> u64 {
        self.params * BYTES_PER_PARAM
    }

    /// Parameter storage in MiB.
    pub fn param_mib(&self) -> f64 {
        self.param_bytes() as f64 / (1024.0 * 1024.0)
    }

    /// `(params, flops)` summed per layer kind.
    pub fn by_kind(&self) -> BTreeMap<String, (u64, u64)> {
        let mut out: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for l in &self.layers {
            let e = out.entry(l.kind.clone()).or_default();
            e.0 += l.params;
            e.1 += l.flops;
        }
        out
    }

    /// FLOPs of convolution layers only.
    pub fn conv_flops(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.kind == "conv")
            .map(|l| l.flops)
            .sum()
    }

    pub const CSV_HEADER: &'static str = "layer,kind,params,flops";

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# flops: 1 multiply-accumulate = 2 FLOPs, input {:?}; params at {BYTES_PER_PARAM} bytes each\n{}\n",
            self.input_shape,
            Self::CSV_HEADER
        );
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{},{}", l.id, l.kind, l.params, l.flops);
        }
        let _ = writeln!(out, "total,total,{},{}", self.params, self.flops);
        out
    }
}

/// Learnable parameters of one layer, including the gate it references.
pub fn layer_params(layer: &Layer) -> u64 {
    let n = |t: &crate::Tensor| t.numel() as u64;
    match layer {
        Layer::Conv2d(c) => {
            let w = c.weight.shape();
            (w[0] * w[1] * w[2] * w[3]) as u64 + c.bias.as_ref().map_or(0, n)
        }
        Layer::BatchNorm(b) => 2 * n(&b.beta),
        Layer::Linear(l) => {
            let w = l.weight.shape();
            (w[0] * w[1]) as u64 + l.bias.as_ref().map_or(0, n)
        }
        Layer::LayerNorm(l) => n(&l.weight) + n(&l.bias),
        Layer::Attention(a) => {
            let inner = (a.heads * a.head_dim) as u64;
            let (d_q, d_kv) = (a.wq.shape()[1] as u64, a.wk.shape()[1] as u64);
            let d_out = a.wo.shape()[0] as u64;
            let gate = if a.gate.is_some() { a.heads as u64 } else { 0 };
            inner * d_q + 2 * inner * d_kv + 3 * inner + d_out * inner + d_out + gate
        }
        Layer::Mlp(m) => {
            let (h, d_in) = (m.w1.shape()[0] as u64, m.w1.shape()[1] as u64);
            let d_out = m.w2.shape()[0] as u64;
            let gate = if m.gate.is_some() { h } else { 0 };
            h * d_in + h + d_out * h + d_out + gate
        }
        Layer::PosEmbed { table } => n(table),
        Layer::Input
        | Layer::Relu
        | Layer::Gelu
        | Layer::MaxPool { .. }
        | Layer::ResidualAdd
        | Layer::Identity
        | Layer::ToTokens
        | Layer::ToMap => 0,
    }
}

fn layer_flops(layer: &Layer, ins: &[&Vec<usize>], out: &[usize]) -> u64 {
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    match layer {
        Layer::Conv2d(c) => {
            let w = c.weight.shape();
            2 * (out[0] * out[2] * out[3] * w[0] * w[1] * w[2] * w[3]) as u64
        }
        Layer::Linear(l) => {
            let w = l.weight.shape();
            2 * (numel(ins[0]) / w[1] as u64) * (w[0] * w[1]) as u64
        }
        Layer::Attention(a) => {
            let q = ins[0];
            let src = ins.get(1).copied().unwrap_or(q);
            let (n, tq, tk) = (q[0] as u64, q[1] as u64, src[1] as u64);
            let inner = (a.heads * a.head_dim) as u64;
            let (d_q, d_kv, d_out) = (q[2] as u64, src[2] as u64, out[2] as u64);
            let proj = 2 * n * (tq * d_q * inner + 2 * tk * d_kv * inner + tq * inner * d_out);
            proj + 2 * 2 * n * tq * tk * inner
        }
        Layer::Mlp(m) => {
            let (h, d_in) = (m.w1.shape()[0] as u64, m.w1.shape()[1] as u64);
            let tokens = numel(ins[0]) / d_in;
            let d_out = m.w2.shape()[0] as u64;
            2 * tokens * (h * d_in + d_out * h) + tokens * h
        }
        Layer::BatchNorm(_) | Layer::LayerNorm(_) => NORM_FLOPS * numel(out),
        Layer::MaxPool { kernel, .. } => (kernel * kernel) as u64 * numel(out),
        Layer::Relu | Layer::Gelu | Layer::ResidualAdd | Layer::PosEmbed { .. } => numel(out),
        Layer::Input | Layer::Identity | Layer::ToTokens | Layer::ToMap => 0,
    }
}

/// Total learnable parameters of a model.
pub fn count_params(model: &ModelGraph) -> u64 {
    model
        .nodes
        .iter()
        .map(|n| layer_params(&n.layer))
        .sum::<u64>()
        + head_params(model)
}

fn head_params(model: &ModelGraph) -> u64 {
    (model.head.scale.numel() + model.head.bias.numel()) as u64
}

/// Backbone forward FLOPs for one input of the given shape.
pub fn count_flops(model: &ModelGraph, input: &[usize]) -> Result<u64> {
    Ok(cost(model, input)?.flops)
}

/// Per-layer parameters and FLOPs; the correlation head is listed last with
/// its parameters and no FLOPs.
pub fn cost(model: &ModelGraph, input: &[usize]) -> Result<CostReport> {
    let shapes = model.infer_shapes(input)?;
    let mut layers = Vec::with_capacity(model.nodes.len() + 1);
    for (i, node) in model.nodes.iter().enumerate() {
        let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&p| &shapes[p]).collect();
        layers.push(LayerCost {
            id: node.id.clone(),
            kind: node.layer.kind().to_string(),
            params: layer_params(&node.layer),
            flops: layer_flops(&node.layer, &ins, &shapes[i]),
        });
    }
    layers.push(LayerCost {
        id: "head".into(),
        kind: "xcorr_head".into(),
        params: head_params(model),
        flops: 0,
    });
    Ok(CostReport {
        input_shape: input.to_vec(),
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

#[cfg(test)]
pub(crate) mod tests;
