//! CSV reports. Each file starts with a `#` provenance line naming the
//! master seed and the hash of the artifact it was computed from.

use std::fmt::Write as _;

use prunetrack_core::tracking::{precision_thresholds, success_thresholds, TrackingMetrics};
use prunetrack_core::zoo::{Granularity, ModelGraph};

use crate::pipeline::Sweep;

pub const METRICS_HEADER: &str = "ao,sr50,sr75,precision20,frames";
pub const CURVES_HEADER: &str = "curve,threshold,value";
pub const SWEEP_HEADER: &str = "budget,ao,sr50,sr75,flops,conv_flops,params,param_mib";
pub const ACTIVE_HEADER: &str = "budget,gate,granularity,kept,total,active_fraction";
pub const ATTENTION_HEADER: &str = "budget,module,layer,heads_kept,heads_total,active";

pub fn provenance_line(seed: u64, parent: &str) -> String {
    format!("# seed={seed} parent={parent}\n")
}

fn precision20(m: &TrackingMetrics) -> f64 {
    let i = precision_thresholds()
        .iter()
        .position(|&d| d == 20.0)
        .expect("20px is a precision threshold");
    m.precision_curve[i]
}

pub fn metrics_csv(m: &TrackingMetrics, seed: u64, parent: &str) -> String {
    format!(
        "{}# success rates count IoU strictly above the threshold\n{METRICS_HEADER}\n{},{},{},{},{}\n",
        provenance_line(seed, parent),
        m.ao,
        m.sr50,
        m.sr75,
        precision20(m),
        m.frames
    )
}

pub fn curves_csv(m: &TrackingMetrics, seed: u64, parent: &str) -> String {
    let mut out = provenance_line(seed, parent);
    out.push_str(CURVES_HEADER);
    out.push('\n');
    for (t, v) in success_thresholds().iter().zip(&m.success_curve) {
        let _ = writeln!(out, "success,{t},{v}");
    }
    for (d, v) in precision_thresholds().iter().zip(&m.precision_curve) {
        let _ = writeln!(out, "precision,{d},{v}");
    }
    out
}

fn granularity(g: Granularity) -> &'static str {
    match g {
        Granularity::Channel => "channel",
        Granularity::Head => "head",
        Granularity::HiddenUnit => "hidden_unit",
    }
}

/// Table-1 shaped rows: the unpruned stage-1 model, then each budget after
/// fine-tuning. FLOPs are for one search-region forward (MAC = 2 FLOPs).
pub fn sweep_csv(s: &Sweep, seed: u64, parent: &str) -> String {
    let mut out = provenance_line(seed, parent);
    out.push_str("# flops: 1 multiply-accumulate = 2 FLOPs; param_mib assumes 4-byte parameters\n");
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    let m = &s.base_metrics;
    let c = &s.base_cost;
    let _ = writeln!(
        out,
        "baseline,{},{},{},{},{},{},{}",
        m.ao,
        m.sr50,
        m.sr75,
        c.flops,
        c.conv_flops(),
        c.params,
        c.param_mib()
    );
    for r in &s.runs {
        let (m, c) = (&r.metrics, &r.cost);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.budget,
            m.ao,
            m.sr50,
            m.sr75,
            c.flops,
            c.conv_flops(),
            c.params,
            c.param_mib()
        );
    }
    out
}

/// Kept entries per gate and budget.
pub fn active_dims_csv(s: &Sweep, seed: u64, parent: &str) -> String {
    let mut out = provenance_line(seed, parent);
    out.push_str(ACTIVE_HEADER);
    out.push('\n');
    for r in &s.runs {
        for (id, g) in &s.base.gates {
            let kept = r.pruned.plan.kept(id).unwrap_or(0);
            let _ = writeln!(
                out,
                "{},{id},{},{kept},{},{}",
                r.budget,
                granularity(g.granularity),
                g.len(),
                kept as f64 / g.len() as f64
            );
        }
    }
    out
}

/// Head counts of every attention module per budget; a module is active
/// while it keeps at least one head.
pub fn attention_csv(s: &Sweep, seed: u64, parent: &str) -> String {
    let mut out = provenance_line(seed, parent);
    out.push_str(ATTENTION_HEADER);
    out.push('\n');
    for r in &s.runs {
        for (id, g) in attention_gates(&s.base) {
            let kept = r.pruned.plan.kept(id).unwrap_or(0);
            let _ = writeln!(
                out,
                "{},{id},{},{kept},{},{}",
                r.budget,
                g.block.as_deref().unwrap_or(""),
                g.len(),
                u8::from(kept > 0)
            );
        }
    }
    out
}

fn attention_gates(
    model: &ModelGraph,
) -> impl Iterator<Item = (&String, &prunetrack_core::zoo::GateVector)> {
    model
        .gates
        .iter()
        .filter(|(_, g)| g.granularity == Granularity::Head)
}
