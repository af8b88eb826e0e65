use serde::{Deserialize, Serialize};

use super::{BBox, Result, TrackError, TrackResult};

/// IoU thresholds of the success curve: `0, 0.05, ..., 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Center-error thresholds of the precision curve, in pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if bx.w < 0.0 || bx.h < 0.0 || !bx.w.is_finite() || !bx.h.is_finite() {
            return Err(TrackError::NegativeExtent(*bx));
        }
    }
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    /// Fraction of scored frames with IoU strictly above each of
    /// [`success_thresholds`].
    pub success_curve: Vec<f64>,
    /// Fraction of scored frames with center error at most each of
    /// [`precision_thresholds`].
    pub precision_curve: Vec<f64>,
    pub frames: usize,
}

/// Scores every frame after the first of each result.
pub fn compute_metrics(results: &[TrackResult]) -> Result<TrackingMetrics> {
    let mut ious = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        ious.extend_from_slice(r.ious.get(1..).unwrap_or(&[]));
        errors.extend_from_slice(r.center_errors.get(1..).unwrap_or(&[]));
    }
    if ious.is_empty() {
        return Err(TrackError::NothingToScore);
    }
    let n = ious.len() as f64;
    let success_curve: Vec<f64> = success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v > t).count() as f64 / n)
        .collect();
    let precision_curve = precision_thresholds()
        .iter()
        .map(|&d| errors.iter().filter(|&&e| e <= d).count() as f64 / n)
        .collect();
    Ok(TrackingMetrics {
        ao: ious.iter().sum::<f64>() / n,
        sr50: success_curve[10],
        sr75: success_curve[15],
        success_curve,
        precision_curve,
        frames: ious.len(),
    })
}
