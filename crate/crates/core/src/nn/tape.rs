//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value; the
//! backward pass walks the tape in reverse and accumulates gradients into
//! parents. Scalar loss nodes carry their local gradients computed at
//! forward time, so arbitrary losses only need a value and a gradient.

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisPlan {
    fn new(src: usize, dst: usize) -> AxisPlan {
        let scale = src as f64 / dst as f64;
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            w_hi: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = f.floor() as usize;
            plan.lo.push(lo);
            plan.hi.push((lo + 1).min(src - 1));
            plan.w_hi.push(f - lo as f64);
        }
        plan
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        // im2col buffer; `None` for 1x1/stride-1 convolutions, which read `x` directly
        cols: Option<Vec<f64>>,
    },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Resize { x: Var, ry: AxisPlan, rx: AxisPlan },
    Project { x: Var, p: Var, groups: usize },
    Scalar { grads: Vec<(Var, Tensor)> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars[v.0].as_ref()
    }

    /// Per-parameter gradients; parameters used several times are summed.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Dense gradient buffers aligned with `store`, zero for unused parameters.
    pub fn into_dense(self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        for (id, g) in self.params {
            out[id.0].add_assign(&g);
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// A tape that records values only; [`Tape::backward`] is unavailable.
    pub fn inference() -> Tape {
        Tape {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn records_gradients(&self) -> bool {
        !self.no_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// 2-D convolution of a `C×H×W` input with `O×C×k×k` weights and `O` biases.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = &self.value(w).shape;
        assert_eq!(ws.len(), 4, "conv weight must be O×C×k×k");
        let (o, wc, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wc, c, "conv expects {wc} input channels, got {c}");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let n = ho * wo;
        let ck = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(im2col(&self.value(x).data, c, h, wd, k, stride, pad, ho, wo))
        };
        let mut out = vec![0.0; o * n];
        {
            let bias = &self.value(b).data;
            for (oc, row) in out.chunks_mut(n).enumerate() {
                row.fill(bias[oc]);
            }
            let src = cols.as_deref().unwrap_or(&self.value(x).data);
            gemm(o, ck, n, &self.value(w).data, false, src, false, 1.0, &mut out);
        }
        let value = Tensor {
            shape: vec![o, ho, wo],
            data: out,
        };
        let cols = if self.no_grad { None } else { cols };
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| a.max(0.0)).collect();
        let shape = v.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape.clone();
        self.push(Tensor { shape, data }, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| a.tanh()).collect();
        let shape = v.shape.clone();
        self.push(Tensor { shape, data }, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| a * s).collect();
        let shape = v.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(x, s))
    }

    /// Channel concatenation of two `C×H×W` tensors, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((h, w), (hb, wb), "concat: spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&self.value(a).data);
        data.extend_from_slice(&self.value(b).data);
        self.push(
            Tensor {
                shape: vec![ca + cb, h, w],
                data,
            },
            Op::Concat(a, b),
        )
    }

    /// Channels `start..start + len` of a `C×H×W` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c, "slice out of range");
        let data = self.value(x).data[start * h * w..(start + len) * h * w].to_vec();
        self.push(
            Tensor {
                shape: vec![len, h, w],
                data,
            },
            Op::Slice { x, start },
        )
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let ry = AxisPlan::new(h, height);
        let rx = AxisPlan::new(w, width);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * height * width];
        for ch in 0..c {
            let s = &src[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * height * width..(ch + 1) * height * width];
            for i in 0..height {
                let (y0, y1, wy) = (ry.lo[i], ry.hi[i], ry.w_hi[i]);
                for j in 0..width {
                    let (x0, x1, wx) = (rx.lo[j], rx.hi[j], rx.w_hi[j]);
                    let top = s[y0 * w + x0] * (1.0 - wx) + s[y0 * w + x1] * wx;
                    let bot = s[y1 * w + x0] * (1.0 - wx) + s[y1 * w + x1] * wx;
                    o[i * width + j] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![c, height, width],
                data: out,
            },
            Op::Resize { x, ry, rx },
        )
    }

    /// Learned spatial re-mapping: each channel of `x` (flattened `Hs·Ws`)
    /// is multiplied by the `Hs·Ws × Hd·Wd` matrix of its channel group.
    /// `p` has shape `groups × (Hs·Ws) × (Hd·Wd)`.
    pub fn project(&mut self, x: Var, p: Var, groups: usize, out_hw: (usize, usize)) -> Var {
        let (c, h, w) = self.value(x).chw();
        let ps = &self.value(p).shape;
        assert_eq!(ps.len(), 3);
        assert_eq!(ps[0], groups);
        assert_eq!(ps[1], h * w, "projection expects {} source cells, got {}", ps[1], h * w);
        assert_eq!(ps[2], out_hw.0 * out_hw.1);
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let (n, m, cg) = (h * w, ps[2], c / groups);
        let mut out = vec![0.0; c * m];
        for g in 0..groups {
            gemm(
                cg,
                n,
                m,
                &self.value(x).data[g * cg * n..(g + 1) * cg * n],
                false,
                &self.value(p).data[g * n * m..(g + 1) * n * m],
                false,
                0.0,
                &mut out[g * cg * m..(g + 1) * cg * m],
            );
        }
        self.push(
            Tensor {
                shape: vec![c, out_hw.0, out_hw.1],
                data: out,
            },
            Op::Project { x, p, groups },
        )
    }

    /// A scalar node whose local gradients were computed by the caller.
    pub fn scalar(&mut self, value: f64, grads: Vec<(Var, Tensor)>) -> Var {
        let grads = if self.no_grad { Vec::new() } else { grads };
        self.push(Tensor::scalar(value), Op::Scalar { grads })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|&(v, w)| w * self.value(v).data[0]).sum();
        self.push(Tensor::scalar(value), Op::WeightedSum(terms.to_vec()))
    }

    /// Back-propagate from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(!self.no_grad, "backward on an inference tape");
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => params.push((*id, g)),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (c, h, wd) = self.value(*x).chw();
                    let (o, ho, wo) = node.value.chw();
                    let k = self.value(*w).shape[2];
                    let n = ho * wo;
                    let ck = c * k * k;
                    let src = cols.as_deref().unwrap_or(&self.value(*x).data);
                    let mut gw = vec![0.0; o * ck];
                    gemm(o, n, ck, &g.data, false, src, true, 0.0, &mut gw);
                    let gb: Vec<f64> = g.data.chunks(n).map(|r| r.iter().sum()).collect();
                    let mut gcols = vec![0.0; ck * n];
                    gemm(ck, o, n, &self.value(*w).data, true, &g.data, false, 0.0, &mut gcols);
                    let gx = if cols.is_some() {
                        col2im(&gcols, c, h, wd, k, *stride, *pad, ho, wo)
                    } else {
                        gcols
                    };
                    let wshape = self.value(*w).shape.clone();
                    accumulate(&mut grads, *w, Tensor { shape: wshape, data: gw });
                    accumulate(&mut grads, *b, Tensor { shape: vec![o], data: gb });
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: vec![c, h, wd],
                            data: gx,
                        },
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g.data.iter().zip(&xv.data).map(|(&d, &a)| if a > 0.0 { d } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Sigmoid(x) => {
                    let data = g.data.iter().zip(&node.value.data).map(|(&d, &s)| d * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Tanh(x) => {
                    let data = g.data.iter().zip(&node.value.data).map(|(&d, &t)| d * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Scale(x, s) => {
                    let data = g.data.iter().map(|&d| d * s).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    let sa = self.value(*a).shape.clone();
                    let sb = self.value(*b).shape.clone();
                    accumulate(&mut grads, *a, Tensor { shape: sa, data: g.data[..na].to_vec() });
                    accumulate(&mut grads, *b, Tensor { shape: sb, data: g.data[na..].to_vec() });
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let (_, h, w) = xv.chw();
                    let mut full = Tensor::zeros(&xv.shape);
                    let off = start * h * w;
                    full.data[off..off + g.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *x, full);
                }
                Op::Resize { x, ry, rx } => {
                    let (c, h, w) = self.value(*x).chw();
                    let (_, ho, wo) = node.value.chw();
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let go = &g.data[ch * ho * wo..(ch + 1) * ho * wo];
                        let gs = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for i in 0..ho {
                            let (y0, y1, wy) = (ry.lo[i], ry.hi[i], ry.w_hi[i]);
                            for j in 0..wo {
                                let (x0, x1, wx) = (rx.lo[j], rx.hi[j], rx.w_hi[j]);
                                let d = go[i * wo + j];
                                gs[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
                                gs[y0 * w + x1] += d * (1.0 - wy) * wx;
                                gs[y1 * w + x0] += d * wy * (1.0 - wx);
                                gs[y1 * w + x1] += d * wy * wx;
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: vec![c, h, w],
                            data: gx,
                        },
                    );
                }
                Op::Project { x, p, groups } => {
                    let xv = self.value(*x);
                    let pv = self.value(*p);
                    let (c, h, w) = xv.chw();
                    let (n, m, cg) = (h * w, pv.shape[2], c / groups);
                    let mut gx = vec![0.0; c * n];
                    let mut gp = vec![0.0; pv.len()];
                    for gi in 0..*groups {
                        let go = &g.data[gi * cg * m..(gi + 1) * cg * m];
                        let pg = &pv.data[gi * n * m..(gi + 1) * n * m];
                        let xg = &xv.data[gi * cg * n..(gi + 1) * cg * n];
                        gemm(cg, m, n, go, false, pg, true, 0.0, &mut gx[gi * cg * n..(gi + 1) * cg * n]);
                        gemm(n, cg, m, xg, true, go, false, 0.0, &mut gp[gi * n * m..(gi + 1) * n * m]);
                    }
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                    accumulate(&mut grads, *p, Tensor { shape: pv.shape.clone(), data: gp });
                }
                Op::Scalar { grads: local } => {
                    let s = g.data[0];
                    for (v, lg) in local {
                        let data = lg.data.iter().map(|&d| d * s).collect();
                        accumulate(&mut grads, *v, Tensor { shape: lg.shape.clone(), data });
                    }
                }
                Op::WeightedSum(terms) => {
                    let s = g.data[0];
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(s * w));
                    }
                }
            }
        }
        Gradients {
            vars: leaves,
            params: merge_params(params),
        }
    }
}

fn merge_params(mut params: Vec<(ParamId, Tensor)>) -> Vec<(ParamId, Tensor)> {
    params.sort_by_key(|(id, _)| id.0);
    let mut out: Vec<(ParamId, Tensor)> = Vec::with_capacity(params.len());
    for (id, g) in params {
        match out.last_mut() {
            Some((last, acc)) if *last == id => acc.add_assign(&g),
            _ => out.push((id, g)),
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * n..((ch * k + ki) * k + kj + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * n..((ch * k + ki) * k + kj + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}
