//! Central finite-difference oracle for whole-model gradients.
//!
//! ReLU and max-pool make the loss piecewise smooth. A stencil that
//! straddles a kink shows up as a disagreement between the estimates at
//! `h` and `h/10`; the oracle then moves to the smaller step.

use prunetrack_core::train::{objective, Batch, PairSource};
use prunetrack_core::zoo::{build, ArchConfig, Mode, ModelGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose `h = 1e-5` stencil contained a kink.
    pub kinks: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn loss(model: &ModelGraph, batch: &Batch, mode: Mode) -> f64 {
    objective(model, batch, LAMBDA, mode, false).unwrap().loss
}

fn shifted(
    model: &ModelGraph,
    batch: &Batch,
    mode: Mode,
    tensor: usize,
    i: usize,
    delta: f64,
) -> f64 {
    let mut m = model.clone();
    let mut t = 0;
    m.visit_params_mut(|_, d| {
        if t == tensor {
            d[i] += delta;
        }
        t += 1;
    });
    loss(&m, batch, mode)
}

/// Returns the derivative estimate and whether the first stencil was rejected.
pub fn numeric(
    model: &ModelGraph,
    batch: &Batch,
    mode: Mode,
    tensor: usize,
    i: usize,
) -> (f64, bool) {
    let central = |h: f64| {
        (shifted(model, batch, mode, tensor, i, h) - shifted(model, batch, mode, tensor, i, -h))
            / (2.0 * h)
    };
    let mut estimates = vec![central(STEPS[0])];
    for (k, &h) in STEPS.iter().enumerate().skip(1) {
        estimates.push(central(h));
        if relative_error(estimates[k - 1], estimates[k]) < 3e-7 {
            return (estimates[k - 1], k > 1);
        }
    }
    (estimates[STEPS.len() - 2], true)
}

/// Toy model of `arch` with perturbed parameters, checked on `per_tensor`
/// random coordinates of every parameter tensor.
pub fn check_model(arch: &str, seed: u64, mode: Mode, per_tensor: usize) -> GradCheck {
    let cfg = ArchConfig::toy_for(arch).unwrap();
    let mut model = build(&cfg, seed, true).unwrap();
    model.perturb(seed ^ 0xa5a5, 0.3);
    let batch = PairSource::default().batch(&model, seed, 2).unwrap();
    let analytic = objective(&model, &batch, LAMBDA, mode, true)
        .unwrap()
        .gradient;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for (k, g) in analytic.iter().enumerate() {
        for _ in 0..per_tensor.min(g.len()) {
            let i = rng.random_range(0..g.len());
            let (n, kink) = numeric(&model, &batch, mode, k, i);
            out.worst = out.worst.max(relative_error(g[i], n));
            out.checked += 1;
            out.kinks += usize::from(kink);
        }
    }
    out
}
