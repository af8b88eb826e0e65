//! Physical removal of pruned channels, heads and hidden units.
//!
//! [`zero_pruned`] silences dropped entries in place without changing any
//! shape; [`rewrite`] deletes them. On eval-mode forwards the two agree up to
//! floating-point summation order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::count_params;
use crate::plan::PruningPlan;
use crate::tensor::Tensor;
use crate::zoo::{Granularity, Layer, ModelError, ModelGraph, Scale};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurgeryError {
    #[error("plan references gate `{0}`, which the model does not have")]
    UnknownGate(String),
    #[error("model gate `{0}` is missing from the plan")]
    MissingGate(String),
    #[error("plan mask for `{gate}` has {got} entries, the gate has {expected}")]
    MaskLength {
        gate: String,
        expected: usize,
        got: usize,
    },
    #[error("plan drops every channel of `{0}`")]
    EmptyLayer(String),
    #[error("attention `{0}` has no heads left but does not feed a residual add")]
    NoBypass(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = SurgeryError> = std::result::Result<T, E>;

fn check_plan(model: &ModelGraph, plan: &PruningPlan) -> Result<()> {
    if let Some(id) = plan.masks.keys().find(|id| !model.gates.contains_key(*id)) {
        return Err(SurgeryError::UnknownGate(id.clone()));
    }
    for (id, g) in &model.gates {
        let mask = plan
            .masks
            .get(id)
            .ok_or_else(|| SurgeryError::MissingGate(id.clone()))?;
        if mask.len() != g.len() {
            return Err(SurgeryError::MaskLength {
                gate: id.clone(),
                expected: g.len(),
                got: mask.len(),
            });
        }
    }
    Ok(())
}

/// Sets every dropped gate entry to 0, along with the matching BN shift.
pub fn zero_pruned(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    check_plan(model, plan)?;
    let mut out = model.clone();
    for (id, mask) in &plan.masks {
        let g = out.gates.get_mut(id).expect("checked above");
        for (v, &keep) in g.values.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    for node in &mut out.nodes {
        if let Layer::BatchNorm(b) = &mut node.layer {
            if let Scale::Gate(id) = &b.gamma {
                for (v, &keep) in b.beta.data_mut().iter_mut().zip(&plan.masks[id]) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSurgery {
    pub gate: String,
    pub granularity: Granularity,
    pub kept: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub gates: Vec<GateSurgery>,
    pub params_before: u64,
    pub params_after: u64,
    /// Largest absolute response difference between the rewritten and the
    /// zeroed model on the probe inputs.
    pub residual: f64,
    /// Attention modules that lost every head and were bypassed.
    pub removed_modules: Vec<String>,
}

impl SurgeryReport {
    pub const CSV_HEADER: &'static str = "gate,granularity,kept,removed";

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# params_before={} params_after={} residual={:e}\n{}\n",
            self.params_before,
            self.params_after,
            self.residual,
            Self::CSV_HEADER
        );
        for g in &self.gates {
            let gran = match g.granularity {
                Granularity::Channel => "channel",
                Granularity::Head => "head",
                Granularity::HiddenUnit => "hidden_unit",
            };
            let _ = writeln!(out, "{},{gran},{},{}", g.gate, g.kept, g.removed);
        }
        out
    }
}

fn kept_indices(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// Keeps whole groups of `group` consecutive entries along `axis`.
fn select_groups(t: &Tensor, axis: usize, keep: &[usize], group: usize) -> Tensor {
    let idx: Vec<usize> = keep
        .iter()
        .flat_map(|&h| h * group..(h + 1) * group)
        .collect();
    t.select(axis, &idx)
}

fn ungated(gate: &str, node: &str) -> SurgeryError {
    SurgeryError::Model(ModelError::UngatedAxis {
        gate: gate.to_string(),
        node: node.to_string(),
    })
}

/// Removes the channels of a gated BN from its producing conv and from every
/// conv reached through channel-preserving layers downstream.
fn cut_channels(
    g: &mut ModelGraph,
    consumers: &[Vec<usize>],
    bn: usize,
    gate: &str,
    keep: &[usize],
) -> Result<()> {
    if bn == g.output {
        return Err(ungated(gate, &g.nodes[bn].id));
    }
    let producer = g.nodes[bn].inputs[0];
    if consumers[producer] != [bn] || !matches!(g.nodes[producer].layer, Layer::Conv2d(_)) {
        return Err(ungated(gate, &g.nodes[producer].id));
    }
    if let Layer::Conv2d(c) = &mut g.nodes[producer].layer {
        c.weight = c.weight.select(0, keep);
        c.bias = c.bias.as_ref().map(|b| b.select(0, keep));
    }
    if let Layer::BatchNorm(b) = &mut g.nodes[bn].layer {
        b.beta = b.beta.select(0, keep);
        b.running_mean = b.running_mean.select(0, keep);
        b.running_var = b.running_var.select(0, keep);
    }
    let mut frontier = consumers[bn].clone();
    while let Some(i) = frontier.pop() {
        match &mut g.nodes[i].layer {
            Layer::Relu | Layer::Gelu | Layer::Identity | Layer::MaxPool { .. } => {
                if i == g.output {
                    return Err(ungated(gate, &g.nodes[i].id));
                }
                frontier.extend(&consumers[i]);
            }
            Layer::Conv2d(c) => c.weight = c.weight.select(1, keep),
            _ => return Err(ungated(gate, &g.nodes[i].id)),
        }
    }
    Ok(())
}

/// Deletes every entry the plan drops, without probing equivalence.
pub fn rewrite_graph(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    check_plan(model, plan)?;
    let mut g = model.clone();
    let consumers = g.consumers();
    for i in 0..g.nodes.len() {
        let Some(gate) = g.nodes[i].layer.gate().map(str::to_string) else {
            continue;
        };
        let mask = &plan.masks[&gate];
        let keep = kept_indices(mask);
        if keep.len() == mask.len() {
            continue;
        }
        match &mut g.nodes[i].layer {
            Layer::BatchNorm(_) => {
                if keep.is_empty() {
                    return Err(SurgeryError::EmptyLayer(gate));
                }
                cut_channels(&mut g, &consumers, i, &gate, &keep)?;
            }
            Layer::Attention(a) => {
                let dh = a.head_dim;
                for t in [&mut a.wq, &mut a.wk, &mut a.wv] {
                    *t = select_groups(t, 0, &keep, dh);
                }
                for t in [&mut a.bq, &mut a.bk, &mut a.bv] {
                    *t = select_groups(t, 0, &keep, dh);
                }
                a.wo = select_groups(&a.wo, 1, &keep, dh);
                a.heads = keep.len();
            }
            Layer::Mlp(m) => {
                if keep.is_empty() {
                    return Err(SurgeryError::EmptyLayer(gate));
                }
                m.w1 = m.w1.select(0, &keep);
                m.b1 = m.b1.select(0, &keep);
                m.w2 = m.w2.select(1, &keep);
            }
            _ => unreachable!("only bn, mhsa and mlp carry gates"),
        }
        let gv = g.gates.get_mut(&gate).expect("checked plan");
        gv.values = keep.iter().map(|&k| gv.values[k]).collect();
    }
    g.validate()?;
    Ok(g)
}

/// Number of random template/search pairs used to measure the residual.
pub const PROBES: usize = 2;

/// Max abs difference of eval-mode responses on seeded random inputs.
pub fn response_residual(a: &ModelGraph, b: &ModelGraph, seed: u64, probes: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t_shape = a.template_shape();
    let mut s_shape = a.search_shape();
    t_shape[0] = probes;
    s_shape[0] = probes;
    let t = Tensor::randn(&t_shape, 0.5, &mut rng);
    let s = Tensor::randn(&s_shape, 0.5, &mut rng);
    let (ra, rb) = (a.siamese(&t, &s)?, b.siamese(&t, &s)?);
    Ok(ra.max_abs_diff(&rb).unwrap_or(f64::INFINITY))
}

/// Deletes every dropped entry, bypasses attention modules left without
/// heads, and measures the result against the zeroed model.
pub fn rewrite(model: &ModelGraph, plan: &PruningPlan) -> Result<(ModelGraph, SurgeryReport)> {
    let zeroed = zero_pruned(model, plan)?;
    let (pruned, removed_modules) = remove_dead_attention(&rewrite_graph(model, plan)?)?;
    let residual = response_residual(&zeroed, &pruned, 0x5eed, PROBES)?;
    let gates = model
        .gates
        .iter()
        .map(|(id, g)| {
            let kept = plan.masks[id].iter().filter(|&&k| k).count();
            GateSurgery {
                gate: id.clone(),
                granularity: g.granularity,
                kept,
                removed: g.len() - kept,
            }
        })
        .collect();
    let report = SurgeryReport {
        gates,
        params_before: count_params(model),
        params_after: count_params(&pruned),
        residual,
        removed_modules,
    };
    Ok((pruned, report))
}

/// Replaces each attention module with no heads, together with the residual
/// add it feeds, by an identity on the residual path, then drops nodes and
/// gates that no longer reach the output. Returns the removed module ids.
pub fn remove_dead_attention(model: &ModelGraph) -> Result<(ModelGraph, Vec<String>)> {
    let mut g = model.clone();
    let consumers = g.consumers();
    let mut removed = Vec::new();
    for i in 0..g.nodes.len() {
        let Layer::Attention(a) = &g.nodes[i].layer else {
            continue;
        };
        if a.heads > 0 {
            continue;
        }
        let id = g.nodes[i].id.clone();
        let add = match consumers[i][..] {
            [add] if i != g.output && matches!(g.nodes[add].layer, Layer::ResidualAdd) => add,
            _ => return Err(SurgeryError::NoBypass(id)),
        };
        let Some(skip) = g.nodes[add].inputs.iter().copied().find(|&p| p != i) else {
            return Err(SurgeryError::NoBypass(id));
        };
        g.nodes[add].layer = Layer::Identity;
        g.nodes[add].inputs = vec![skip];
        removed.push(id);
    }
    if removed.is_empty() {
        return Ok((g, removed));
    }
    Ok((prune_unreachable(g)?, removed))
}

/// Drops nodes the output no longer depends on and the gates they held.
fn prune_unreachable(g: ModelGraph) -> Result<ModelGraph> {
    let mut live = vec![false; g.nodes.len()];
    live[0] = true;
    live[g.output] = true;
    for i in (0..g.nodes.len()).rev() {
        if live[i] {
            for &p in &g.nodes[i].inputs {
                live[p] = true;
            }
        }
    }
    let mut remap = vec![usize::MAX; g.nodes.len()];
    let mut nodes = Vec::new();
    let mut gates = BTreeMap::new();
    for (i, mut n) in g.nodes.into_iter().enumerate() {
        if !live[i] {
            continue;
        }
        remap[i] = nodes.len();
        n.inputs = n.inputs.iter().map(|&p| remap[p]).collect();
        if let Some(id) = n.layer.gate() {
            if let Some(gv) = g.gates.get(id) {
                gates.insert(id.to_string(), gv.clone());
            }
        }
        nodes.push(n);
    }
    let out = ModelGraph {
        output: remap[g.output],
        nodes,
        gates,
        ..g
    };
    out.validate()?;
    Ok(out)
}
