//! Synthetic single-object tracking: procedural sequences, a fixed-scale
//! siamese tracker, and overlap/precision metrics.

mod metrics;
mod sequence;

pub use metrics::{
    center_error, compute_metrics, iou, precision_thresholds, success_thresholds, TrackingMetrics,
};
pub use sequence::{gen_sequence, Image, SequenceSpec, SyntheticSequence};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Execution;
use crate::tensor::Tensor;
use crate::zoo::{ModelError, ModelGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("object side {object}px plus motion margin {margin}px does not fit a {frame}px frame")]
    ObjectTooLarge {
        object: usize,
        frame: usize,
        margin: usize,
    },
    #[error("a sequence needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("initial box {0:?} has zero area")]
    DegenerateBox(BBox),
    #[error("box {0:?} has a negative or non-finite extent")]
    NegativeExtent(BBox),
    #[error("no frames to score")]
    NothingToScore,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = TrackError> = std::result::Result<T, E>;

/// Axis-aligned box: top-left corner and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub boxes: Vec<BBox>,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
}

/// Fixed benchmark: `sequences` sequences with seeds `first_seed..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub sequences: usize,
    pub first_seed: u64,
    pub sequence: SequenceSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            sequences: 50,
            first_seed: 0,
            sequence: SequenceSpec::default(),
        }
    }
}

impl BenchmarkSpec {
    pub fn generate(&self) -> Result<Vec<SyntheticSequence>> {
        (0..self.sequences as u64)
            .map(|i| gen_sequence(self.first_seed + i, &self.sequence))
            .collect()
    }
}

/// Sequences tracked together in one batch. Fixed so that results do not
/// depend on the thread count.
const CHUNK: usize = 10;

pub fn track(model: &ModelGraph, sequence: &SyntheticSequence) -> Result<TrackResult> {
    Ok(track_batch(model, &[sequence])?.remove(0))
}

pub fn track_all(
    model: &ModelGraph,
    sequences: &[SyntheticSequence],
    exec: Execution,
) -> Result<Vec<TrackResult>> {
    let chunks: Vec<Vec<&SyntheticSequence>> = sequences
        .chunks(CHUNK)
        .map(|c| c.iter().collect())
        .collect();
    let out = exec.map(&chunks, |c| track_batch(model, c));
    let mut results = Vec::with_capacity(sequences.len());
    for r in out {
        results.extend(r?);
    }
    Ok(results)
}

pub fn evaluate(
    model: &ModelGraph,
    sequences: &[SyntheticSequence],
    exec: Execution,
) -> Result<TrackingMetrics> {
    compute_metrics(&track_all(model, sequences, exec)?)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tracks several sequences in lockstep, one batched forward per frame.
fn track_batch(model: &ModelGraph, seqs: &[&SyntheticSequence]) -> Result<Vec<TrackResult>> {
    for s in seqs {
        if s.len() < 2 || s.gt_boxes.len() != s.len() {
            return Err(TrackError::TooShort(s.len()));
        }
        let b = s.gt_boxes[0];
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(TrackError::DegenerateBox(b));
        }
    }
    let r = model.response_size()?;
    let stride = model.response_stride()?;
    let mid = (r as f64 - 1.0) / 2.0;

    let templates: Vec<Tensor> = seqs
        .iter()
        .map(|s| {
            let (cx, cy) = s.gt_boxes[0].center();
            s.frames[0].crop(cx, cy, model.template_size)
        })
        .collect();
    let zt = model.forward(&Tensor::stack(&templates).map_err(ModelError::from)?)?;

    let mut centers: Vec<(f64, f64)> = seqs.iter().map(|s| s.gt_boxes[0].center()).collect();
    let mut results: Vec<TrackResult> = seqs
        .iter()
        .map(|s| TrackResult {
            boxes: vec![s.gt_boxes[0]],
            ious: vec![1.0],
            center_errors: vec![0.0],
        })
        .collect();
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    for t in 1..longest {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].len() > t).collect();
        let crops: Vec<Tensor> = active
            .iter()
            .map(|&i| seqs[i].frames[t].crop(centers[i].0, centers[i].1, model.search_size))
            .collect();
        let zs = model.forward(&Tensor::stack(&crops).map_err(ModelError::from)?)?;
        let response = model.respond(&zt.select(0, &active), &zs)?;
        for (k, &i) in active.iter().enumerate() {
            let map = &response.data()[k * r * r..(k + 1) * r * r];
            let best = argmax(map);
            let (dy, dx) = ((best / r) as f64 - mid, (best % r) as f64 - mid);
            centers[i] = (centers[i].0 + dx * stride, centers[i].1 + dy * stride);
            let init = seqs[i].gt_boxes[0];
            let pred = BBox::centered(centers[i].0, centers[i].1, init.w, init.h);
            let gt = seqs[i].gt_boxes[t];
            results[i].ious.push(iou(&pred, &gt)?);
            results[i].center_errors.push(center_error(&pred, &gt));
            results[i].boxes.push(pred);
        }
    }
    Ok(results)
}
