//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly, appends one record to the [`Tape`] and
//! returns a [`Var`] handle. [`Tape::backward`] replays the records in exact
//! reverse order, accumulating adjoints additively when a value feeds several
//! consumers. Operations reject non-finite results.

mod kernels;

use crate::tensor::{Result, Tensor, TensorError};
use kernels::{col2im, gemm, im2col, max_pool, Layout, Window};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    ScalarDiv(Var, f64),
    ScaleBy(Var, Var),
    AddBroadcast(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    L1(Var),
    Softmax(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    MulGroups {
        x: Var,
        m: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    XCorr {
        search: Var,
        template: Var,
    },
    MapToTokens(Var),
    TokensToMap(Var),
    CropCenter {
        x: Var,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    Logistic {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Record {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if `v` was untouched.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient data; `None` when untouched.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mismatch(op: &'static str, axis: usize, expected: usize, got: usize) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        axis,
        expected,
        got,
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            got: t.rank(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(TensorError::Rank {
            op,
            expected: a.rank(),
            got: b.rank(),
        });
    }
    for (axis, (x, y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(mismatch(op, axis, *x, *y));
        }
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    /// Records an input. Gradients are only reported for `requires_grad` leaves
    /// and values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.records.push(Record {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.records.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let tracked = inputs.iter().any(|v| self.records[v.0].tracked);
        self.records.push(Record { value, op, tracked });
        Ok(Var(self.records.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())?;
        self.push(out, Op::ScalarMul(a, s), &[a], "scalar_mul")
    }

    pub fn scalar_div(&mut self, a: Var, d: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v / d).collect())?;
        self.push(out, Op::ScalarDiv(a, d), &[a], "scalar_div")
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(mismatch("scale_by", 0, 1, sv.numel()));
        }
        let k = sv.item();
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect())?;
        self.push(out, Op::ScaleBy(a, s), &[a, s], "scale_by")
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rank() > x.rank() {
            return Err(TensorError::Rank {
                op: "add_broadcast",
                expected: x.rank(),
                got: y.rank(),
            });
        }
        let off = x.rank() - y.rank();
        for (i, (&ys, &xs)) in y.shape().iter().zip(&x.shape()[off..]).enumerate() {
            if ys != xs {
                return Err(mismatch("add_broadcast", off + i, xs, ys));
            }
        }
        let inner = y.numel();
        let mut data = x.data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_mut(inner) {
                chunk.iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::AddBroadcast(a, b), &[a, b], "add_broadcast")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        )?;
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| gelu(v)).collect(),
        )?;
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a], "mean")
    }

    /// Sum of absolute values. The subgradient at exactly zero is zero.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1(a), &[a], "l1_norm")
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Layer normalization over the last axis with an affine transform.
    pub fn layer_norm(&mut self, a: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        for (name, v) in [("weight", w), ("bias", b)] {
            let t = self.value(v);
            if t.numel() != d {
                return Err(TensorError::InvalidArgument {
                    op: "layer_norm",
                    reason: format!("{name} has {} entries, expected {d}", t.numel()),
                });
            }
        }
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let h = (row[i] - mean) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = wv[i] * h + bv[i];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x: a,
                w,
                b,
                xhat,
                inv_std,
            },
            &[a, w, b],
            "layer_norm",
        )
    }

    /// `x[..., in] · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, a: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let x = self.value(a);
        let wt = self.value(w);
        expect_rank("linear", wt, 2)?;
        let (out_f, in_f) = (wt.shape()[0], wt.shape()[1]);
        let last = x.rank().checked_sub(1).ok_or(TensorError::Rank {
            op: "linear",
            expected: 1,
            got: 0,
        })?;
        if x.shape()[last] != in_f {
            return Err(mismatch("linear", last, in_f, x.shape()[last]));
        }
        let rows = x
            .numel()
            .checked_div(in_f)
            .unwrap_or_else(|| x.shape()[..last].iter().product());
        let mut out = vec![0.0; rows * out_f];
        gemm(
            rows,
            in_f,
            out_f,
            x.data(),
            Layout::rows(in_f),
            wt.data(),
            Layout::transposed(in_f),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.numel() != out_f {
                return Err(mismatch("linear", 0, out_f, bt.numel()));
            }
            for row in out.chunks_mut(out_f.max(1)) {
                row.iter_mut().zip(bt.data()).for_each(|(p, q)| *p += q);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[last] = out_f;
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![a, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x: a, w, b }, &inputs, "linear")
    }

    /// Batched matrix product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with
    /// `b[B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        expect_rank("bmm", x, 3)?;
        expect_rank("bmm", y, 3)?;
        let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if y.shape()[0] != bs {
            return Err(mismatch("bmm", 0, bs, y.shape()[0]));
        }
        let (yk, n) = if trans_b {
            (y.shape()[2], y.shape()[1])
        } else {
            (y.shape()[1], y.shape()[2])
        };
        if yk != k {
            return Err(mismatch("bmm", if trans_b { 2 } else { 1 }, k, yk));
        }
        let mut out = vec![0.0; bs * m * n];
        let lb = if trans_b {
            Layout::transposed(k)
        } else {
            Layout::rows(n)
        };
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &x.data()[i * m * k..],
                Layout::rows(k),
                &y.data()[i * k * n..],
                lb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        self.push(out, Op::Bmm { a, b, trans_b }, &[a, b], "bmm")
    }

    /// `[N,T,H*dh] -> [N*H,T,dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let x = self.value(a);
        expect_rank("split_heads", x, 3)?;
        let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "split_heads",
                reason: format!("{d} features do not split into {heads} heads"),
            });
        }
        let dh = d / heads;
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (b * t + ti) * d + h * dh;
                    let dst = ((b * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
                }
            }
        }
        let out = Tensor::new(vec![n * heads, t, dh], out)?;
        self.push(out, Op::SplitHeads { x: a, heads }, &[a], "split_heads")
    }

    /// `[N*H,T,dh] -> [N,T,H*dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let x = self.value(a);
        expect_rank("merge_heads", x, 3)?;
        let (nh, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if heads == 0 || nh % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "merge_heads",
                reason: format!("batch {nh} is not a multiple of {heads} heads"),
            });
        }
        let n = nh / heads;
        let d = heads * dh;
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ti in 0..t {
                for h in 0..heads {
                    let dst = (b * t + ti) * d + h * dh;
                    let src = ((b * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
                }
            }
        }
        let out = Tensor::new(vec![n, t, d], out)?;
        self.push(out, Op::MergeHeads { x: a, heads }, &[a], "merge_heads")
    }

    /// Scales contiguous groups of the last axis: the last axis has length
    /// `len(m) * g` and group `h` is multiplied by `m[h]`.
    pub fn mul_groups(&mut self, a: Var, m: Var) -> Result<Var> {
        let (x, mv) = (self.value(a), self.value(m));
        expect_rank("mul_groups", mv, 1)?;
        let d = *x.shape().last().unwrap_or(&0);
        let groups = mv.numel();
        if (groups == 0 || d % groups != 0) && !(groups == 0 && d == 0) {
            return Err(mismatch(
                "mul_groups",
                x.rank().saturating_sub(1),
                groups,
                d,
            ));
        }
        let g = d.checked_div(groups).unwrap_or(0);
        let mut data = x.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                for (h, chunk) in row.chunks_mut(g).enumerate() {
                    let s = mv.data()[h];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::MulGroups { x: a, m }, &[a, m], "mul_groups")
    }

    /// 2-D cross-correlation, `x[N,Cin,H,W]` with `w[Cout,Cin,k,k]`.
    pub fn conv2d(
        &mut self,
        a: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(a);
        let wt = self.value(w);
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", wt, 4)?;
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if kcin != cin {
            return Err(mismatch("conv2d", 1, kcin, cin));
        }
        if kh > h + 2 * pad {
            return Err(mismatch("conv2d", 2, kh, h + 2 * pad));
        }
        if kw > wd + 2 * pad {
            return Err(mismatch("conv2d", 3, kw, wd + 2 * pad));
        }
        let g = Window {
            channels: cin,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = (g.out_h(), g.out_w());
        let hw = oh * ow;
        let ck = g.patch_len();
        let mut cols = vec![0.0; ck * hw];
        let mut out = vec![0.0; n * cout * hw];
        for s in 0..n {
            im2col(
                &x.data()[s * g.image_len()..(s + 1) * g.image_len()],
                &g,
                &mut cols,
            );
            gemm(
                cout,
                ck,
                hw,
                wt.data(),
                Layout::rows(ck),
                &cols,
                Layout::rows(hw),
                0.0,
                &mut out[s * cout * hw..(s + 1) * cout * hw],
            );
        }
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.numel() != cout {
                return Err(mismatch("conv2d", 0, cout, bt.numel()));
            }
            for s in 0..n {
                for c in 0..cout {
                    let bias = bt.data()[c];
                    out[(s * cout + c) * hw..(s * cout + c + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![a, w];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x: a,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
            "conv2d",
        )
    }

    /// Per-channel affine normalization of `x[N,C,H,W]`. Returns the output and,
    /// for [`BnStats::Batch`], the batch mean and unbiased variance per channel.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let x = self.value(a);
        expect_rank("batch_norm", x, 4)?;
        if eps < 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                reason: "eps must be non-negative".into(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        for v in [gamma, beta] {
            let t = self.value(v);
            if t.numel() != c {
                return Err(mismatch("batch_norm", 1, t.numel(), c));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                if count == 0 {
                    return Err(TensorError::EmptyAxis { op: "batch_norm" });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", 1, c, mean.len().min(var.len())));
                }
                if var.iter().any(|v| *v < 0.0) {
                    return Err(TensorError::InvalidArgument {
                        op: "batch_norm",
                        reason: "negative running variance".into(),
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let v = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = v;
                    out[i] = g[ch] * v + bt[ch];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let batch_stats = batch.then(|| {
            let unbiased = if count > 1 {
                var.iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect()
            } else {
                var.clone()
            };
            (mean, unbiased)
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            &[a, gamma, beta],
            "batch_norm",
        )?;
        Ok((v, batch_stats))
    }

    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(a);
        expect_rank("max_pool2d", x, 4)?;
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                reason: "kernel and stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if kernel > h {
            return Err(mismatch("max_pool2d", 2, kernel, h));
        }
        if kernel > w {
            return Err(mismatch("max_pool2d", 3, kernel, w));
        }
        let g = Window {
            channels: c,
            height: h,
            width: w,
            kh: kernel,
            kw: kernel,
            stride,
            pad: 0,
        };
        let (oh, ow) = (g.out_h(), g.out_w());
        let per = c * oh * ow;
        let mut out = vec![0.0; n * per];
        let mut arg = vec![0usize; n * per];
        for s in 0..n {
            max_pool(
                &x.data()[s * g.image_len()..(s + 1) * g.image_len()],
                &g,
                &mut out[s * per..(s + 1) * per],
                &mut arg[s * per..(s + 1) * per],
            );
            arg[s * per..(s + 1) * per]
                .iter_mut()
                .for_each(|i| *i += s * g.image_len());
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(out, Op::MaxPool { x: a, arg }, &[a], "max_pool2d")
    }

    /// Channelwise cross-correlation of per-sample templates over search maps:
    /// `search[N,C,Hs,Ws]`, `template[N,C,Ht,Wt]` → `[N,1,Hs-Ht+1,Ws-Wt+1]`.
    pub fn xcorr(&mut self, search: Var, template: Var) -> Result<Var> {
        let (s, t) = (self.value(search), self.value(template));
        expect_rank("xcorr", s, 4)?;
        expect_rank("xcorr", t, 4)?;
        let (n, c, hs, ws) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
        let (ht, wt) = (t.shape()[2], t.shape()[3]);
        if t.shape()[0] != n {
            return Err(mismatch("xcorr", 0, n, t.shape()[0]));
        }
        if t.shape()[1] != c {
            return Err(mismatch("xcorr", 1, c, t.shape()[1]));
        }
        if ht > hs {
            return Err(mismatch("xcorr", 2, hs, ht));
        }
        if wt > ws {
            return Err(mismatch("xcorr", 3, ws, wt));
        }
        let g = Window {
            channels: c,
            height: hs,
            width: ws,
            kh: ht,
            kw: wt,
            stride: 1,
            pad: 0,
        };
        let hw = g.out_h() * g.out_w();
        let ck = g.patch_len();
        let mut cols = vec![0.0; ck * hw];
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            im2col(
                &s.data()[b * g.image_len()..(b + 1) * g.image_len()],
                &g,
                &mut cols,
            );
            gemm(
                1,
                ck,
                hw,
                &t.data()[b * ck..(b + 1) * ck],
                Layout::rows(ck),
                &cols,
                Layout::rows(hw),
                0.0,
                &mut out[b * hw..(b + 1) * hw],
            );
        }
        let out = Tensor::new(vec![n, 1, g.out_h(), g.out_w()], out)?;
        self.push(
            out,
            Op::XCorr { search, template },
            &[search, template],
            "xcorr",
        )
    }

    /// `[N,C,H,W] -> [N,H*W,C]`.
    pub fn map_to_tokens(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("map_to_tokens", x, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let t = h * w;
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..t {
                    out[(b * t + p) * c + ch] = x.data()[(b * c + ch) * t + p];
                }
            }
        }
        let out = Tensor::new(vec![n, t, c], out)?;
        self.push(out, Op::MapToTokens(a), &[a], "map_to_tokens")
    }

    /// `[N,T,C] -> [N,C,g,g]` for a square token grid `T = g²`.
    pub fn tokens_to_map(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("tokens_to_map", x, 3)?;
        let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let g = (t as f64).sqrt().round() as usize;
        if g * g != t {
            return Err(TensorError::InvalidArgument {
                op: "tokens_to_map",
                reason: format!("{t} tokens do not form a square grid"),
            });
        }
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for p in 0..t {
                for ch in 0..c {
                    out[(b * c + ch) * t + p] = x.data()[(b * t + p) * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![n, c, g, g], out)?;
        self.push(out, Op::TokensToMap(a), &[a], "tokens_to_map")
    }

    /// Centered `[h,w,D]` crop of a `[H,W,D]` table, flattened to `[h*w,D]`.
    pub fn crop_center(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(a);
        expect_rank("crop_center", x, 3)?;
        let (th, tw, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h > th {
            return Err(mismatch("crop_center", 0, th, h));
        }
        if w > tw {
            return Err(mismatch("crop_center", 1, tw, w));
        }
        let (top, left) = ((th - h) / 2, (tw - w) / 2);
        let mut out = Vec::with_capacity(h * w * d);
        for y in 0..h {
            let start = ((top + y) * tw + left) * d;
            out.extend_from_slice(&x.data()[start..start + w * d]);
        }
        let out = Tensor::new(vec![h * w, d], out)?;
        self.push(
            out,
            Op::CropCenter {
                x: a,
                top,
                left,
                h,
                w,
            },
            &[a],
            "crop_center",
        )
    }

    /// `Σ weights[i] · ln(1 + exp(-targets[i] · x[i]))`.
    pub fn weighted_logistic(
        &mut self,
        a: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let x = self.value(a);
        if targets.len() != x.numel() {
            return Err(mismatch("weighted_logistic", 0, x.numel(), targets.len()));
        }
        if weights.len() != x.numel() {
            return Err(mismatch("weighted_logistic", 0, x.numel(), weights.len()));
        }
        let loss = x
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&v, &y), &w)| w * softplus(-y * v))
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Logistic {
                x: a,
                targets,
                weights,
            },
            &[a],
            "weighted_logistic",
        )
    }

    /// Replays the tape backward from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let shapes: Vec<Vec<usize>> = self
            .records
            .iter()
            .map(|r| r.value.shape().to_vec())
            .collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.records.len()];
        if !self.records[loss.0].tracked {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let rec = &self.records[i];
            if !rec.tracked || matches!(rec.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn tracked(&self, v: Var) -> bool {
        self.records[v.0].tracked
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rec = &self.records[i];
        let val = |v: Var| self.records[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &rec.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::ScalarMul(a, s) => acc(*a, g.iter().map(|g| g * s).collect()),
            Op::ScalarDiv(a, d) => acc(*a, g.iter().map(|g| g / d).collect()),
            Op::ScaleBy(a, s) => {
                let k = val(*s)[0];
                let ds = g.iter().zip(val(*a)).map(|(g, x)| g * x).sum();
                acc(*a, g.iter().map(|g| g * k).collect());
                acc(*s, vec![ds]);
            }
            Op::AddBroadcast(a, b) => {
                let inner = self.records[b.0].value.numel();
                let mut db = vec![0.0; inner];
                if inner > 0 {
                    for chunk in g.chunks(inner) {
                        db.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                    }
                }
                acc(*a, g.to_vec());
                acc(*b, db);
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::L1(a) => acc(*a, val(*a).iter().map(|&x| g[0] * sign(x)).collect()),
            Op::Softmax(a) => {
                let y = rec.value.data();
                let d = *rec.value.shape().last().expect("softmax rank");
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            } => {
                let wv = val(*w);
                let d = wv.len();
                let mut dx = vec![0.0; g.len()];
                let mut dw = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..inv_std.len() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * wv[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                        dw[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    let k = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * wv[j];
                        dx[r * d + j] = k * (d as f64 * dh - s1 - hr[j] * s2);
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Linear { x, w, b } => {
                let wt = &self.records[w.0].value;
                let (out_f, in_f) = (wt.shape()[0], wt.shape()[1]);
                let rows = g
                    .len()
                    .checked_div(out_f)
                    .unwrap_or_else(|| self.records[x.0].value.numel() / in_f.max(1));
                if self.tracked(*x) {
                    let mut dx = vec![0.0; rows * in_f];
                    gemm(
                        rows,
                        out_f,
                        in_f,
                        g,
                        Layout::rows(out_f),
                        wt.data(),
                        Layout::rows(in_f),
                        0.0,
                        &mut dx,
                    );
                    acc(*x, dx);
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(
                        out_f,
                        rows,
                        in_f,
                        g,
                        Layout::transposed(out_f),
                        val(*x),
                        Layout::rows(in_f),
                        0.0,
                        &mut dw,
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; out_f];
                    if out_f > 0 {
                        for row in g.chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let xs = self.records[a.0].value.shape();
                let (bs, m, k) = (xs[0], xs[1], xs[2]);
                let n = rec.value.shape()[2];
                let (x, y) = (val(*a), val(*b));
                if self.tracked(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        // da = g · bᵀ (or g · b when b is stored transposed)
                        let lb = if *trans_b {
                            Layout::rows(k)
                        } else {
                            Layout::transposed(n)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            Layout::rows(n),
                            &y[i * k * n..],
                            lb,
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc(*a, da);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        if *trans_b {
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * m * n..],
                                Layout::transposed(n),
                                &x[i * m * k..],
                                Layout::rows(k),
                                0.0,
                                &mut db[i * n * k..(i + 1) * n * k],
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &x[i * m * k..],
                                Layout::transposed(k),
                                &g[i * m * n..],
                                Layout::rows(n),
                                0.0,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = rec.value.shape();
                let (nh, t, dh) = (s[0], s[1], s[2]);
                let n = nh / heads;
                let d = heads * dh;
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let dst = (b * t + ti) * d + h * dh;
                            let src = ((b * heads + h) * t + ti) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MergeHeads { x, heads } => {
                let s = rec.value.shape();
                let (n, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let src = (b * t + ti) * d + h * dh;
                            let dst = ((b * heads + h) * t + ti) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MulGroups { x, m } => {
                let mv = val(*m);
                let xv = val(*x);
                let d = *rec.value.shape().last().unwrap_or(&0);
                let groups = mv.len();
                let gs = d.checked_div(groups).unwrap_or(0);
                let mut dx = vec![0.0; g.len()];
                let mut dm = vec![0.0; groups];
                if d > 0 && gs > 0 {
                    for r in 0..g.len() / d {
                        for h in 0..groups {
                            for j in 0..gs {
                                let at = r * d + h * gs + j;
                                dx[at] = g[at] * mv[h];
                                dm[h] += g[at] * xv[at];
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*m, dm);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.records[x.0].value.shape();
                let ws = self.records[w.0].value.shape();
                let geo = Window {
                    channels: xs[1],
                    height: xs[2],
                    width: xs[3],
                    kh: ws[2],
                    kw: ws[3],
                    stride: *stride,
                    pad: *pad,
                };
                let (n, cout) = (xs[0], ws[0]);
                let hw = geo.out_h() * geo.out_w();
                let ck = geo.patch_len();
                let (xv, wv) = (val(*x), val(*w));
                let mut cols = vec![0.0; ck * hw];
                let mut dcols = vec![0.0; ck * hw];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for s in 0..n {
                    let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                    if self.tracked(*w) {
                        im2col(
                            &xv[s * geo.image_len()..(s + 1) * geo.image_len()],
                            &geo,
                            &mut cols,
                        );
                        gemm(
                            cout,
                            hw,
                            ck,
                            gs,
                            Layout::rows(hw),
                            &cols,
                            Layout::transposed(hw),
                            1.0,
                            &mut dw,
                        );
                    }
                    if self.tracked(*x) {
                        gemm(
                            ck,
                            cout,
                            hw,
                            wv,
                            Layout::transposed(ck),
                            gs,
                            Layout::rows(hw),
                            0.0,
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            &geo,
                            &mut dx[s * geo.image_len()..(s + 1) * geo.image_len()],
                        );
                    }
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += g[(s * cout + c) * hw..(s * cout + c + 1) * hw]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    acc(*b, db);
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let s = rec.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (n * hw) as f64;
                let gv = val(*gamma);
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            s1 += g[i];
                            s2 += g[i] * xhat[i];
                        }
                    }
                    dg[ch] = s2;
                    db[ch] = s1;
                    let k = gv[ch] * inv_std[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = if *batch {
                                k / count * (count * g[i] - s1 - xhat[i] * s2)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![0.0; self.records[x.0].value.numel()];
                for (o, &at) in arg.iter().enumerate() {
                    dx[at] += g[o];
                }
                acc(*x, dx);
            }
            Op::XCorr { search, template } => {
                let ss = self.records[search.0].value.shape();
                let ts = self.records[template.0].value.shape();
                let geo = Window {
                    channels: ss[1],
                    height: ss[2],
                    width: ss[3],
                    kh: ts[2],
                    kw: ts[3],
                    stride: 1,
                    pad: 0,
                };
                let n = ss[0];
                let hw = geo.out_h() * geo.out_w();
                let ck = geo.patch_len();
                let (sv, tv) = (val(*search), val(*template));
                let mut cols = vec![0.0; ck * hw];
                let mut dcols = vec![0.0; ck * hw];
                let mut ds = vec![0.0; sv.len()];
                let mut dt = vec![0.0; tv.len()];
                for b in 0..n {
                    let gb = &g[b * hw..(b + 1) * hw];
                    im2col(
                        &sv[b * geo.image_len()..(b + 1) * geo.image_len()],
                        &geo,
                        &mut cols,
                    );
                    gemm(
                        1,
                        hw,
                        ck,
                        gb,
                        Layout::rows(hw),
                        &cols,
                        Layout::transposed(hw),
                        0.0,
                        &mut dt[b * ck..(b + 1) * ck],
                    );
                    gemm(
                        ck,
                        1,
                        hw,
                        &tv[b * ck..(b + 1) * ck],
                        Layout::transposed(ck),
                        gb,
                        Layout::rows(hw),
                        0.0,
                        &mut dcols,
                    );
                    col2im(
                        &dcols,
                        &geo,
                        &mut ds[b * geo.image_len()..(b + 1) * geo.image_len()],
                    );
                }
                acc(*search, ds);
                acc(*template, dt);
            }
            Op::MapToTokens(x) => {
                let s = self.records[x.0].value.shape();
                let (n, c, t) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..t {
                            dx[(b * c + ch) * t + p] = g[(b * t + p) * c + ch];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::TokensToMap(x) => {
                let s = self.records[x.0].value.shape();
                let (n, t, c) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for p in 0..t {
                        for ch in 0..c {
                            dx[(b * t + p) * c + ch] = g[(b * c + ch) * t + p];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::CropCenter { x, top, left, h, w } => {
                let s = self.records[x.0].value.shape();
                let (tw, d) = (s[1], s[2]);
                let mut dx = vec![0.0; self.records[x.0].value.numel()];
                for y in 0..*h {
                    let src = y * w * d;
                    let dst = ((top + y) * tw + left) * d;
                    for j in 0..w * d {
                        dx[dst + j] += g[src + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Logistic {
                x,
                targets,
                weights,
            } => {
                let xv = val(*x);
                acc(
                    *x,
                    xv.iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&v, &y), &w)| -g[0] * w * y * sigmoid(-y * v))
                        .collect(),
                );
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
