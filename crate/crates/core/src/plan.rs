//! Budgeted selection of gate entries to keep.
//!
//! Entries are ranked by `|γ|` descending; ties go to the earlier gate (in id
//! order) and then to the lower index. A budget fraction `b` over `C`
//! entries keeps `ceil(b·C)` of them, never fewer than the per-gate floor.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::zoo::{GateVector, Scope};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("invalid budget: {0}")]
    InvalidSpec(String),
    #[error("gate `{0}` has no block id, which blockwise planning requires")]
    MissingBlock(String),
    #[error("gate `{0}` is not tagged encoder or decoder, which decoupled planning requires")]
    MissingScope(String),
    #[error("gate `{0}` holds a non-finite value")]
    NonFinite(String),
    #[error("planner for {expected:?} called with a {got:?} budget")]
    ModeMismatch { expected: PlanMode, got: PlanMode },
}

pub type Result<T, E = PlanError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Global,
    Layerwise,
    Blockwise,
    Decoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub mode: PlanMode,
    pub fraction: f64,
    #[serde(default = "default_floor")]
    pub floor: usize,
    /// Decoupled mode only; defaults to `fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_fraction: Option<f64>,
    /// Decoupled mode only; defaults to `fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_fraction: Option<f64>,
}

fn default_floor() -> usize {
    1
}

impl BudgetSpec {
    pub fn new(mode: PlanMode, fraction: f64) -> Self {
        BudgetSpec {
            mode,
            fraction,
            floor: 1,
            encoder_fraction: None,
            decoder_fraction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            Some(self.fraction),
            self.encoder_fraction,
            self.decoder_fraction,
        ];
        for f in fractions.into_iter().flatten() {
            if !(f > 0.0 && f <= 1.0) {
                return Err(PlanError::InvalidSpec(format!(
                    "fraction {f} is outside (0, 1]"
                )));
            }
        }
        if self.floor == 0 {
            return Err(PlanError::InvalidSpec("floor must be at least 1".into()));
        }
        if self.mode != PlanMode::Decoupled
            && (self.encoder_fraction.is_some() || self.decoder_fraction.is_some())
        {
            return Err(PlanError::InvalidSpec(
                "encoder/decoder fractions only apply to decoupled mode".into(),
            ));
        }
        Ok(())
    }
}

/// `ceil(b·n)`, tolerant of binary representation error in `b`.
pub fn budget_count(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub spec: BudgetSpec,
    /// Hash of the gate values the plan was computed from.
    pub gate_hash: String,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl PruningPlan {
    pub fn kept(&self, gate: &str) -> Option<usize> {
        self.masks
            .get(gate)
            .map(|m| m.iter().filter(|&&k| k).count())
    }

    pub fn total_kept(&self) -> usize {
        self.masks.values().flatten().filter(|&&k| k).count()
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }
}

/// SHA-256 over gate ids, lengths and value bit patterns, in id order.
pub fn gate_hash(gates: &BTreeMap<String, GateVector>) -> String {
    let mut h = Sha256::new();
    for (id, g) in gates {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update((g.values.len() as u64).to_le_bytes());
        for v in &g.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn plan(gates: &BTreeMap<String, GateVector>, spec: &BudgetSpec) -> Result<PruningPlan> {
    match spec.mode {
        PlanMode::Global => plan_global(gates, spec),
        PlanMode::Layerwise => plan_layerwise(gates, spec),
        PlanMode::Blockwise => plan_blockwise(gates, spec),
        PlanMode::Decoupled => plan_decoupled(gates, spec),
    }
}

fn check(gates: &BTreeMap<String, GateVector>, spec: &BudgetSpec, mode: PlanMode) -> Result<()> {
    if spec.mode != mode {
        return Err(PlanError::ModeMismatch {
            expected: mode,
            got: spec.mode,
        });
    }
    spec.validate()?;
    if let Some(g) = gates
        .values()
        .find(|g| g.values.iter().any(|v| !v.is_finite()))
    {
        return Err(PlanError::NonFinite(g.id.clone()));
    }
    Ok(())
}

/// Descending `|γ|`, then the given tie order.
fn by_magnitude(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.abs().total_cmp(&a.0.abs()).then(a.1.cmp(&b.1))
}

fn top_k(values: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| by_magnitude((values[i], i), (values[j], j)));
    let mut mask = vec![false; values.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn layer_masks<'a>(
    gates: impl IntoIterator<Item = &'a GateVector>,
    fraction: f64,
    floor: usize,
) -> BTreeMap<String, Vec<bool>> {
    gates
        .into_iter()
        .map(|g| {
            let c = g.len();
            let k = budget_count(fraction, c).max(floor).min(c);
            (g.id.clone(), top_k(&g.values, k))
        })
        .collect()
}

/// Global top-K over a pool of gates with per-gate floors: each gate's
/// top-`floor` entries are kept unconditionally, and the remaining slots up
/// to `K = ceil(b·ΣC)` go to the largest of the other entries.
fn pooled_masks(pool: &[&GateVector], fraction: f64, floor: usize) -> BTreeMap<String, Vec<bool>> {
    let total: usize = pool.iter().map(|g| g.len()).sum();
    let target = budget_count(fraction, total);
    let mut masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let mut kept = 0;
    for g in pool {
        let mask = top_k(&g.values, floor.min(g.len()));
        kept += mask.iter().filter(|&&k| k).count();
        masks.insert(g.id.clone(), mask);
    }
    let mut rest: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in pool.iter().enumerate() {
        let mask = &masks[&g.id];
        for (i, &v) in g.values.iter().enumerate() {
            if !mask[i] {
                rest.push((v, gi, i));
            }
        }
    }
    rest.sort_by(|a, b| {
        b.0.abs()
            .total_cmp(&a.0.abs())
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, gi, i) in rest.iter().take(target.saturating_sub(kept)) {
        masks.get_mut(&pool[gi].id).expect("pool gate")[i] = true;
    }
    masks
}

pub fn plan_layerwise(
    gates: &BTreeMap<String, GateVector>,
    spec: &BudgetSpec,
) -> Result<PruningPlan> {
    check(gates, spec, PlanMode::Layerwise)?;
    Ok(PruningPlan {
        spec: spec.clone(),
        gate_hash: gate_hash(gates),
        masks: layer_masks(gates.values(), spec.fraction, spec.floor),
    })
}

pub fn plan_global(gates: &BTreeMap<String, GateVector>, spec: &BudgetSpec) -> Result<PruningPlan> {
    check(gates, spec, PlanMode::Global)?;
    let pool: Vec<&GateVector> = gates.values().collect();
    Ok(PruningPlan {
        spec: spec.clone(),
        gate_hash: gate_hash(gates),
        masks: pooled_masks(&pool, spec.fraction, spec.floor),
    })
}

pub fn plan_blockwise(
    gates: &BTreeMap<String, GateVector>,
    spec: &BudgetSpec,
) -> Result<PruningPlan> {
    check(gates, spec, PlanMode::Blockwise)?;
    let mut blocks: BTreeMap<&str, Vec<&GateVector>> = BTreeMap::new();
    for g in gates.values() {
        let b = g
            .block
            .as_deref()
            .ok_or_else(|| PlanError::MissingBlock(g.id.clone()))?;
        blocks.entry(b).or_default().push(g);
    }
    let mut masks = BTreeMap::new();
    for pool in blocks.values() {
        masks.extend(pooled_masks(pool, spec.fraction, spec.floor));
    }
    Ok(PruningPlan {
        spec: spec.clone(),
        gate_hash: gate_hash(gates),
        masks,
    })
}

pub fn plan_decoupled(
    gates: &BTreeMap<String, GateVector>,
    spec: &BudgetSpec,
) -> Result<PruningPlan> {
    check(gates, spec, PlanMode::Decoupled)?;
    let mut by_scope: BTreeMap<Scope, Vec<&GateVector>> = BTreeMap::new();
    for g in gates.values() {
        let s = g
            .scope
            .ok_or_else(|| PlanError::MissingScope(g.id.clone()))?;
        by_scope.entry(s).or_default().push(g);
    }
    let mut masks = BTreeMap::new();
    for (scope, pool) in by_scope {
        let fraction = match scope {
            Scope::Encoder => spec.encoder_fraction,
            Scope::Decoder => spec.decoder_fraction,
        }
        .unwrap_or(spec.fraction);
        masks.extend(layer_masks(pool, fraction, spec.floor));
    }
    Ok(PruningPlan {
        spec: spec.clone(),
        gate_hash: gate_hash(gates),
        masks,
    })
}
