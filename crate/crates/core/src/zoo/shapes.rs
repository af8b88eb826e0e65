use super::{Layer, ModelError, ModelGraph, Result, Scale};

impl ModelGraph {
    /// Output shape of every node for an input of the given shape, checking
    /// that each layer's tensors agree with the shapes flowing into it.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let err = |reason: String| ModelError::Shape {
                node: node.id.clone(),
                reason,
            };
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let rank = |s: &[usize], r: usize| -> Result<()> {
                if s.len() == r {
                    Ok(())
                } else {
                    Err(err(format!("expected rank {r} input, got shape {s:?}")))
                }
            };
            let want_inputs = match &node.layer {
                Layer::Input => 0,
                Layer::ResidualAdd => 2,
                Layer::Attention(_) => ins.len().clamp(1, 2),
                _ => 1,
            };
            if ins.len() != want_inputs {
                return Err(err(format!(
                    "expected {want_inputs} inputs, got {}",
                    ins.len()
                )));
            }
            let out = match &node.layer {
                Layer::Input => {
                    if input.len() != 4 || input[1] != 3 {
                        return Err(err(format!("expected [N,3,H,W] input, got {input:?}")));
                    }
                    input.to_vec()
                }
                Layer::Conv2d(c) => {
                    let x = ins[0];
                    rank(x, 4)?;
                    let w = c.weight.shape();
                    if w[1] != x[1] {
                        return Err(err(format!(
                            "kernel expects {} input channels, got {}",
                            w[1], x[1]
                        )));
                    }
                    if let Some(b) = &c.bias {
                        if b.numel() != w[0] {
                            return Err(err(format!(
                                "bias has {} entries for {} filters",
                                b.numel(),
                                w[0]
                            )));
                        }
                    }
                    if c.stride == 0 || w[2] > x[2] + 2 * c.padding || w[3] > x[3] + 2 * c.padding {
                        return Err(err(format!(
                            "kernel {:?} does not fit input {x:?}",
                            &w[2..]
                        )));
                    }
                    let oh = (x[2] + 2 * c.padding - w[2]) / c.stride + 1;
                    let ow = (x[3] + 2 * c.padding - w[3]) / c.stride + 1;
                    vec![x[0], w[0], oh, ow]
                }
                Layer::BatchNorm(b) => {
                    let x = ins[0];
                    rank(x, 4)?;
                    let c = x[1];
                    let gamma_len = match &b.gamma {
                        Scale::Plain(g) => g.numel(),
                        Scale::Gate(id) => self
                            .gates
                            .get(id)
                            .ok_or_else(|| ModelError::UnknownGate(id.clone()))?
                            .len(),
                    };
                    for (what, n) in [
                        ("gamma", gamma_len),
                        ("beta", b.beta.numel()),
                        ("running mean", b.running_mean.numel()),
                        ("running variance", b.running_var.numel()),
                    ] {
                        if n != c {
                            return Err(err(format!("{what} has {n} entries for {c} channels")));
                        }
                    }
                    x.clone()
                }
                Layer::Relu | Layer::Gelu | Layer::Identity => ins[0].clone(),
                Layer::MaxPool { kernel, stride } => {
                    let x = ins[0];
                    rank(x, 4)?;
                    if *stride == 0 || *kernel > x[2] || *kernel > x[3] {
                        return Err(err(format!(
                            "pool window {kernel} does not fit input {x:?}"
                        )));
                    }
                    vec![
                        x[0],
                        x[1],
                        (x[2] - kernel) / stride + 1,
                        (x[3] - kernel) / stride + 1,
                    ]
                }
                Layer::ResidualAdd => {
                    if ins[0] != ins[1] {
                        return Err(err(format!(
                            "operands {:?} and {:?} differ",
                            ins[0], ins[1]
                        )));
                    }
                    ins[0].clone()
                }
                Layer::Linear(l) => {
                    let x = ins[0];
                    let w = l.weight.shape();
                    if x.last() != Some(&w[1]) {
                        return Err(err(format!("weight expects {} features, got {x:?}", w[1])));
                    }
                    let mut s = x.clone();
                    *s.last_mut().expect("non-empty") = w[0];
                    s
                }
                Layer::LayerNorm(l) => {
                    let x = ins[0];
                    let d = x.last().copied().unwrap_or(0);
                    if l.weight.numel() != d || l.bias.numel() != d {
                        return Err(err(format!(
                            "affine has {} entries for width {d}",
                            l.weight.numel()
                        )));
                    }
                    x.clone()
                }
                Layer::Attention(a) => {
                    let x = ins[0];
                    rank(x, 3)?;
                    let src = ins.get(1).copied().unwrap_or(x);
                    rank(src, 3)?;
                    let inner = a.heads * a.head_dim;
                    for (what, t, rows, cols) in [
                        ("query", &a.wq, inner, x[2]),
                        ("key", &a.wk, inner, src[2]),
                        ("value", &a.wv, inner, src[2]),
                    ] {
                        if t.shape() != [rows, cols] {
                            return Err(err(format!(
                                "{what} projection is {:?}, expected [{rows}, {cols}]",
                                t.shape()
                            )));
                        }
                    }
                    for (what, t) in [("query", &a.bq), ("key", &a.bk), ("value", &a.bv)] {
                        if t.numel() != inner {
                            return Err(err(format!(
                                "{what} bias has {} entries, expected {inner}",
                                t.numel()
                            )));
                        }
                    }
                    let wo = a.wo.shape();
                    if wo[1] != inner || a.bo.numel() != wo[0] {
                        return Err(err(format!(
                            "output projection {wo:?} does not match {inner} inputs"
                        )));
                    }
                    vec![x[0], x[1], wo[0]]
                }
                Layer::Mlp(m) => {
                    let x = ins[0];
                    let (w1, w2) = (m.w1.shape(), m.w2.shape());
                    if x.last() != Some(&w1[1])
                        || w2[1] != w1[0]
                        || m.b1.numel() != w1[0]
                        || m.b2.numel() != w2[0]
                    {
                        return Err(err(format!(
                            "inconsistent mlp weights {w1:?}, {w2:?} for input {x:?}"
                        )));
                    }
                    let mut s = x.clone();
                    *s.last_mut().expect("non-empty") = w2[0];
                    s
                }
                Layer::ToTokens => {
                    let x = ins[0];
                    rank(x, 4)?;
                    vec![x[0], x[2] * x[3], x[1]]
                }
                Layer::PosEmbed { table } => {
                    let x = ins[0];
                    rank(x, 3)?;
                    let side = (x[1] as f64).sqrt().round() as usize;
                    let t = table.shape();
                    if side * side != x[1] || side > t[0] || side > t[1] || t[2] != x[2] {
                        return Err(err(format!("table {t:?} cannot cover tokens {x:?}")));
                    }
                    x.clone()
                }
                Layer::ToMap => {
                    let x = ins[0];
                    rank(x, 3)?;
                    let side = (x[1] as f64).sqrt().round() as usize;
                    if side * side != x[1] {
                        return Err(err(format!("{} tokens do not form a square grid", x[1])));
                    }
                    vec![x[0], x[2], side, side]
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Backbone feature shape for a given input shape.
    pub fn feature_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shapes = self.infer_shapes(input)?;
        Ok(shapes.swap_remove(self.output))
    }

    /// Response-map side length for the configured template and search sizes.
    pub fn response_size(&self) -> Result<usize> {
        let t = self.feature_shape(&self.template_shape())?;
        let s = self.feature_shape(&self.search_shape())?;
        if t[2] > s[2] || t[3] > s[3] {
            return Err(ModelError::TemplateTooLarge {
                template: t,
                search: s,
            });
        }
        Ok(s[2] - t[2] + 1)
    }

    /// Pixel displacement of one response cell.
    pub fn response_stride(&self) -> Result<f64> {
        let r = self.response_size()?;
        Ok(if r > 1 {
            (self.search_size - self.template_size) as f64 / (r - 1) as f64
        } else {
            0.0
        })
    }
}
