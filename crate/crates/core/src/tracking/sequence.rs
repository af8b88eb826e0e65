use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, Result, TrackError};
use crate::tensor::Tensor;

/// Row-major `H×W×3` image with channel values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|v| v / n)
    }

    /// `size×size` window centered at `(cx, cy)`, as a `[3,size,size]` tensor
    /// shifted to zero-centered range. Pixels outside the frame take the
    /// frame's mean color.
    pub fn crop(&self, cx: f64, cy: f64, size: usize) -> Tensor {
        let left = (cx - size as f64 / 2.0).round() as i64;
        let top = (cy - size as f64 / 2.0).round() as i64;
        let mean = self.mean_color();
        let mut out = vec![0.0; 3 * size * size];
        for y in 0..size {
            let sy = top + y as i64;
            for x in 0..size {
                let sx = left + x as i64;
                let inside =
                    sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height;
                let px = if inside {
                    self.pixel(sx as usize, sy as usize)
                } else {
                    mean
                };
                for c in 0..3 {
                    out[(c * size + y) * size + x] = px[c] - 0.5;
                }
            }
        }
        Tensor::new(vec![3, size, size], out).expect("crop buffer matches its shape")
    }
}

/// Parameters of a procedurally generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub length: usize,
    pub frame_size: usize,
    /// Inclusive range of object side lengths in pixels.
    pub object_size: (usize, usize),
    /// Largest per-frame displacement along each axis, in pixels.
    pub motion: f64,
    /// Number of sinusoidal components in each texture.
    pub texture: usize,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            length: 50,
            frame_size: 96,
            object_size: (14, 18),
            motion: 2.0,
            texture: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    pub gt_boxes: Vec<BBox>,
    pub seed: u64,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Writes `frame_NNNN.ppm` images and `groundtruth.txt` into `dir`.
    pub fn export_ppm(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            let mut bytes = format!("P6\n{} {}\n255\n", f.width, f.height).into_bytes();
            bytes.extend(
                f.data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
            fs::write(dir.join(format!("frame_{:04}.ppm", i + 1)), bytes)?;
        }
        let mut gt = fs::File::create(dir.join("groundtruth.txt"))?;
        for b in &self.gt_boxes {
            writeln!(gt, "{} {} {} {}", b.x, b.y, b.w, b.h)?;
        }
        Ok(())
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, freq: (f64, f64), amp: f64) -> Self {
        let f = rng.random_range(freq.0..freq.1);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Wave {
            fx: f * angle.cos(),
            fy: f * angle.sin(),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: [
                rng.random_range(-amp..amp),
                rng.random_range(-amp..amp),
                rng.random_range(-amp..amp),
            ],
        }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let s = (self.fx * x + self.fy * y + self.phase).sin();
        self.amp.map(|a| a * s)
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

const CHECKER: usize = 4;
const PIXEL_NOISE: f64 = 0.02;

/// Renders a textured object performing a bounded random walk over a static
/// textured background. Everything is a pure function of `seed` and `spec`.
pub fn gen_sequence(seed: u64, spec: &SequenceSpec) -> Result<SyntheticSequence> {
    let (lo, hi) = spec.object_size;
    let margin = spec.motion.max(0.0).ceil() as usize;
    if lo == 0 || lo > hi {
        return Err(TrackError::Invalid(format!(
            "object size range {lo}..={hi} is empty"
        )));
    }
    if hi + 2 * margin > spec.frame_size {
        return Err(TrackError::ObjectTooLarge {
            object: hi,
            frame: spec.frame_size,
            margin,
        });
    }
    if spec.length < 2 {
        return Err(TrackError::TooShort(spec.length));
    }
    if !spec.motion.is_finite() || spec.motion < 0.0 {
        return Err(TrackError::Invalid(
            "motion magnitude must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.frame_size;
    let (ow, oh) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));

    let base = random_color(&mut rng, 0.3, 0.7);
    let waves: Vec<Wave> = (0..spec.texture)
        .map(|_| Wave::random(&mut rng, (0.05, 0.3), 0.25 / spec.texture as f64))
        .collect();
    let mut background = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let mut px = base;
            for w in &waves {
                let d = w.at(x as f64, y as f64);
                (0..3).for_each(|c| px[c] += d[c]);
            }
            let i = (y * size + x) * 3;
            background[i..i + 3].copy_from_slice(&px);
        }
    }

    let object_base = random_color(&mut rng, 0.0, 1.0);
    let cells_x = ow.div_ceil(CHECKER);
    let cells_y = oh.div_ceil(CHECKER);
    let cells: Vec<[f64; 3]> = (0..cells_x * cells_y)
        .map(|_| {
            let d = random_color(&mut rng, -0.35, 0.35);
            [0, 1, 2].map(|c| object_base[c] + d[c])
        })
        .collect();
    let object_waves: Vec<Wave> = (0..spec.texture)
        .map(|_| Wave::random(&mut rng, (0.6, 1.4), 0.1))
        .collect();
    let mut object = vec![0.0; ow * oh * 3];
    for y in 0..oh {
        for x in 0..ow {
            let mut px = cells[(y / CHECKER) * cells_x + x / CHECKER];
            for w in &object_waves {
                let d = w.at(x as f64, y as f64);
                (0..3).for_each(|c| px[c] += d[c]);
            }
            let i = (y * ow + x) * 3;
            object[i..i + 3].copy_from_slice(&px);
        }
    }

    let max_x = (size - ow) as f64;
    let max_y = (size - oh) as f64;
    let mut px = rng.random_range(margin as f64..=max_x - margin as f64);
    let mut py = rng.random_range(margin as f64..=max_y - margin as f64);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("finite std");
    let mut frames = Vec::with_capacity(spec.length);
    let mut gt_boxes = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 && spec.motion > 0.0 {
            px = (px + rng.random_range(-spec.motion..=spec.motion)).clamp(0.0, max_x);
            py = (py + rng.random_range(-spec.motion..=spec.motion)).clamp(0.0, max_y);
        }
        let (bx, by) = (px.round() as usize, py.round() as usize);
        let mut data = background.clone();
        for y in 0..oh {
            let dst = ((by + y) * size + bx) * 3;
            data[dst..dst + ow * 3].copy_from_slice(&object[y * ow * 3..(y + 1) * ow * 3]);
        }
        for v in &mut data {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        frames.push(Image {
            height: size,
            width: size,
            data,
        });
        gt_boxes.push(BBox {
            x: bx as f64,
            y: by as f64,
            w: ow as f64,
            h: oh as f64,
        });
    }
    Ok(SyntheticSequence {
        frames,
        gt_boxes,
        seed,
    })
}
