//! Tape-based reverse-mode automatic differentiation over NCHW tensors.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. [`Graph::backward`] walks the tape from a scalar root back to
//! the leaves, accumulating gradients into leaves created with
//! `requires_grad`. Intermediate gradients are dropped as soon as they have
//! been propagated.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    /// Elementwise product; the second operand may broadcast along any
    /// axis of size 1.
    Mul(Var, Var),
    Concat(Vec<Var>),
    AvgPool(Var),
    Upsample(Var),
    Clamp01(Var),
    L1(Var, Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Output index range `lo..hi` whose input coordinate
    /// `o * stride + kk - pad` falls inside `0..len`.
    fn valid(&self, out_len: usize, len: usize, kk: usize) -> (usize, usize) {
        let off = kk as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let span = len as isize - off;
        let hi = if span <= 0 { 0 } else { (span + s - 1) / s };
        let hi = (hi as usize).min(out_len);
        (lo as usize, hi.max(lo as usize))
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, groups: usize) -> Result<ConvGeom> {
    let [n, cin, h, wd] = x.shape;
    let [cout, cin_g, k, k2] = w.shape;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?} and {groups} groups",
            w.shape, x.shape
        )));
    }
    if k != k2 || stride == 0 {
        return Err(Error::Shape(format!("unsupported kernel {:?} stride {stride}", w.shape)));
    }
    if b.numel() != cout {
        return Err(Error::Shape(format!("bias of {} for {cout} outputs", b.numel())));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::Shape(format!("input {:?} smaller than kernel {k}", x.shape)));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        k,
        stride,
        pad,
        groups,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (wd + 2 * pad - k) / stride + 1,
    })
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    let xranges: Vec<(usize, usize)> = (0..g.k).map(|kx| g.valid(g.ow, g.w, kx)).collect();
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.cout, idx % g.cout);
        dst.fill(b[oc]);
        let grp = oc / g.cout_g();
        for icg in 0..g.cin_g() {
            let ic = grp * g.cin_g() + icg;
            let src = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            let wk = &w[(oc * g.cin_g() + icg) * g.k * g.k..][..g.k * g.k];
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid(g.oh, g.h, ky);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let row = &src[iy * g.w..][..g.w];
                    let orow = &mut dst[oy * g.ow..][..g.ow];
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (xlo, xhi) = xranges[kx];
                        if g.stride == 1 {
                            let off = xlo + kx - g.pad;
                            for (o, i) in orow[xlo..xhi].iter_mut().zip(&row[off..]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_grad_input(g: &ConvGeom, w: &[f64], gout: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut gx = vec![0.0; g.n * g.cin * g.h * g.w];
    let xranges: Vec<(usize, usize)> = (0..g.k).map(|kx| g.valid(g.ow, g.w, kx)).collect();
    gx.par_chunks_mut(g.cin * g.h * g.w)
        .enumerate()
        .for_each(|(n, gxn)| {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g();
                let go = &gout[(n * g.cout + oc) * plane..][..plane];
                for icg in 0..g.cin_g() {
                    let ic = grp * g.cin_g() + icg;
                    let dst = &mut gxn[ic * g.h * g.w..][..g.h * g.w];
                    let wk = &w[(oc * g.cin_g() + icg) * g.k * g.k..][..g.k * g.k];
                    for ky in 0..g.k {
                        let (ylo, yhi) = g.valid(g.oh, g.h, ky);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.ow..][..g.ow];
                            let drow = &mut dst[iy * g.w..][..g.w];
                            for kx in 0..g.k {
                                let wv = wk[ky * g.k + kx];
                                let (xlo, xhi) = xranges[kx];
                                for ox in xlo..xhi {
                                    drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

fn conv_grad_weight(g: &ConvGeom, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let per_oc = g.cin_g() * g.k * g.k;
    let mut gw = vec![0.0; g.cout * per_oc];
    let xranges: Vec<(usize, usize)> = (0..g.k).map(|kx| g.valid(g.ow, g.w, kx)).collect();
    gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
        let grp = oc / g.cout_g();
        for n in 0..g.n {
            let go = &gout[(n * g.cout + oc) * plane..][..plane];
            for icg in 0..g.cin_g() {
                let ic = grp * g.cin_g() + icg;
                let src = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid(g.oh, g.h, ky);
                    for kx in 0..g.k {
                        let (xlo, xhi) = xranges[kx];
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..][..g.w];
                            let grow = &go[oy * g.ow..][..g.ow];
                            for ox in xlo..xhi {
                                acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                            }
                        }
                        dst[(icg * g.k + ky) * g.k + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn conv_grad_bias(g: &ConvGeom, gout: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(n * g.cout + oc) * plane..][..plane].iter().sum::<f64>();
        }
    }
    gb
}

/// Strides that map an index of `full` onto a broadcast operand of `small`.
fn broadcast_strides(full: [usize; 4], small: [usize; 4]) -> Result<[usize; 4]> {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if small[d] == full[d] {
            strides[d] = acc;
        } else if small[d] != 1 {
            return Err(Error::Shape(format!("cannot broadcast {small:?} to {full:?}")));
        }
        acc *= small[d];
    }
    Ok(strides)
}

fn for_each_broadcast(shape: [usize; 4], strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for a in 0..shape[0] {
        for b in 0..shape[1] {
            for c in 0..shape[2] {
                let base = a * strides[0] + b * strides[1] + c * strides[2];
                for d in 0..shape[3] {
                    f(i, base + d * strides[3]);
                    i += 1;
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Add a leaf tensor. Gradients are accumulated only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn set_value(&mut self, v: Var, data: &[f64]) {
        self.nodes[v.0].value.data.copy_from_slice(data);
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drop every node created after the first `len`, keeping earlier
    /// leaves (typically parameters) for the next forward pass.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let g = conv_geom(self.value(x), self.value(w), self.value(b), stride, pad, groups)?;
        let out = conv_forward(&g, &self.value(x).data, &self.value(w).data, &self.value(b).data);
        let value = Tensor::from_vec([g.n, g.cout, g.oh, g.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            },
            &[x, w, b],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        };
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape, tb.shape)));
        }
        let value = Tensor {
            shape: ta.shape,
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a * b` with `b` broadcast along its size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let strides = broadcast_strides(ta.shape, tb.shape)?;
        let mut data = vec![0.0; ta.numel()];
        for_each_broadcast(ta.shape, strides, |i, j| data[i] = ta.data[i] * tb.data[j]);
        let value = Tensor {
            shape: ta.shape,
            data,
        };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?);
        let [n, _, h, w] = first.shape;
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape;
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!("concat {s:?} with {:?}", first.shape)));
            }
            channels += s[1];
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape[1];
                data.extend_from_slice(&t.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec([n, channels, h, w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Mean over each channel plane, giving shape (N, C, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape;
        let plane = h * w;
        let data = t
            .data
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor {
            shape: [n, c, 1, 1],
            data,
        };
        self.push(value, Op::AvgPool(x), &[x])
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * oh * ow];
        for (p, src) in t.data.chunks_exact(h * w).enumerate() {
            let dst = &mut data[p * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor {
            shape: [n, c, oh, ow],
            data,
        };
        self.push(value, Op::Upsample(x), &[x])
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        };
        self.push(value, Op::Clamp01(x), &[x])
    }

    /// Mean absolute error, as a scalar node.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape != t.shape {
            return Err(Error::Shape(format!("l1 {:?} vs {:?}", p.shape, t.shape)));
        }
        let sum: f64 = p.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(sum / p.numel() as f64);
        Ok(self.push(value, Op::L1(pred, target), &[pred, target]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Propagate d(root)/d(node) back to every leaf that requires grad.
    /// Gradients add onto whatever earlier passes left; call
    /// [`Graph::zero_grad`] between independent passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
            match &self.nodes[i].op {
                Op::Leaf => {
                    accumulate(&mut self.nodes[i].grad, g);
                    continue;
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    groups,
                } => {
                    let geom = conv_geom(val(x), val(w), val(b), *stride, *pad, *groups)?;
                    if needs(x) {
                        out.push((*x, conv_grad_input(&geom, &val(w).data, &g)));
                    }
                    if needs(w) {
                        out.push((*w, conv_grad_weight(&geom, &val(x).data, &g)));
                    }
                    if needs(b) {
                        out.push((*b, conv_grad_bias(&geom, &g)));
                    }
                }
                Op::Relu(x) => {
                    let d = val(x).data.iter().zip(&g).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 });
                    out.push((*x, d.collect()));
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value.data;
                    out.push((*x, y.iter().zip(&g).map(|(y, g)| g * y * (1.0 - y)).collect()));
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        out.push((*a, g.clone()));
                    }
                    if needs(b) {
                        out.push((*b, g));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let strides = broadcast_strides(ta.shape, tb.shape)?;
                    if needs(a) {
                        let mut ga = vec![0.0; ta.numel()];
                        for_each_broadcast(ta.shape, strides, |i, j| ga[i] = g[i] * tb.data[j]);
                        out.push((*a, ga));
                    }
                    if needs(b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for_each_broadcast(ta.shape, strides, |i, j| gb[j] += g[i] * ta.data[i]);
                        out.push((*b, gb));
                    }
                }
                Op::Concat(parts) => {
                    let [n, total, h, w] = self.nodes[i].value.shape;
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let c = val(p).shape[1];
                        if needs(p) {
                            let mut gp = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let start = (b * total + offset) * plane;
                                gp.extend_from_slice(&g[start..start + c * plane]);
                            }
                            out.push((*p, gp));
                        }
                        offset += c;
                    }
                }
                Op::AvgPool(x) => {
                    let t = val(x);
                    let plane = t.shape[2] * t.shape[3];
                    let d = g
                        .iter()
                        .flat_map(|gv| std::iter::repeat_n(gv / plane as f64, plane));
                    out.push((*x, d.collect()));
                }
                Op::Upsample(x) => {
                    let [n, c, h, w] = val(x).shape;
                    let ow = 2 * w;
                    let mut gx = vec![0.0; n * c * h * w];
                    for (p, dst) in gx.chunks_exact_mut(h * w).enumerate() {
                        let src = &g[p * 4 * h * w..][..4 * h * w];
                        for oy in 0..2 * h {
                            for ox in 0..ow {
                                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                Op::Clamp01(x) => {
                    let d = val(x)
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(v, g)| if (0.0..=1.0).contains(v) { *g } else { 0.0 });
                    out.push((*x, d.collect()));
                }
                Op::L1(p, t) => {
                    let (tp, tt) = (val(p), val(t));
                    let scale = g[0] / tp.numel() as f64;
                    let sign: Vec<f64> = tp
                        .data
                        .iter()
                        .zip(&tt.data)
                        .map(|(a, b)| {
                            let d = a - b;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if needs(t) {
                        out.push((*t, sign.iter().map(|s| -s).collect()));
                    }
                    if needs(p) {
                        out.push((*p, sign));
                    }
                }
                Op::Mean(x) => {
                    let n = val(x).numel();
                    out.push((*x, vec![g[0] / n as f64; n]));
                }
            }
            for (v, gv) in out {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], gv);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.next_f64() * 2.0 - 1.0).collect()).unwrap()
    }

    /// Direct convolution straight from the definition.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
        let [n, cin, h, wd] = x.shape;
        let [cout, cin_g, k, _] = w.shape;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for bn in 0..n {
            for oc in 0..cout {
                let grp = oc / (cout / groups);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data[oc];
                        for icg in 0..cin_g {
                            let ic = grp * cin_g + icg;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data[((bn * cin + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data[((oc * cin_g + icg) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data[((bn * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let cases = [
            ([2, 4, 7, 6], [6, 4, 3, 3], 1, 1, 1),
            ([1, 4, 8, 8], [4, 1, 3, 3], 1, 1, 4),
            ([2, 3, 9, 7], [5, 3, 3, 3], 2, 1, 1),
            ([1, 6, 5, 5], [2, 6, 1, 1], 1, 0, 1),
            ([1, 4, 4, 6], [4, 2, 3, 3], 2, 1, 2),
        ];
        for (i, (xs, ws, stride, pad, groups)) in cases.into_iter().enumerate() {
            let x = rand_tensor(xs, i as u64);
            let w = rand_tensor(ws, 100 + i as u64);
            let b = rand_tensor([ws[0], 1, 1, 1], 200 + i as u64);
            let mut g = Graph::new();
            let (vx, vw, vb) = (g.leaf(x.clone(), false), g.leaf(w.clone(), false), g.leaf(b.clone(), false));
            let y = g.conv2d(vx, vw, vb, stride, pad, groups).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad, groups);
            assert_eq!(g.value(y).shape, want.shape);
            for (a, b) in g.value(y).data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Central-difference check of every leaf for a scalar function built
    /// by `f`.
    fn check_grads(leaves: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let root = f(&mut g, &vars);
        g.backward(root).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
        let eval = |leaves: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let r = f(&mut g, &vars);
            g.value(r).data[0]
        };
        let h = 1e-6;
        for (li, grads) in analytic.iter().enumerate() {
            for (k, &a) in grads.iter().enumerate() {
                let mut plus = leaves.clone();
                plus[li].data[k] += h;
                let mut minus = leaves.clone();
                minus[li].data[k] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(
                    (a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1.0),
                    "leaf {li}[{k}]: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (xs, ws, stride, pad, groups) in [
            ([2, 4, 5, 6], [6, 2, 3, 3], 1, 1, 2),
            ([1, 3, 7, 5], [4, 3, 3, 3], 2, 1, 1),
            ([2, 3, 4, 4], [3, 1, 3, 3], 1, 1, 3),
        ] {
            let leaves = vec![
                rand_tensor(xs, 1),
                rand_tensor(ws, 2),
                rand_tensor([ws[0], 1, 1, 1], 3),
            ];
            let shape = {
                let mut g = Graph::new();
                let v: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), false)).collect();
                let y = g.conv2d(v[0], v[1], v[2], stride, pad, groups).unwrap();
                g.value(y).shape
            };
            let weights = rand_tensor(shape, 4);
            check_grads(leaves, move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad, groups).unwrap();
                let wv = g.leaf(weights.clone(), false);
                let z = g.mul(y, wv).unwrap();
                g.mean(z)
            });
        }
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let a = rand_tensor([2, 3, 4, 4], 10);
        let cgate = rand_tensor([2, 3, 1, 1], 11);
        let pgate = rand_tensor([2, 1, 4, 4], 12);
        let other = rand_tensor([2, 2, 4, 4], 13);
        let target = rand_tensor([2, 5, 8, 8], 14);
        check_grads(vec![a, cgate, pgate, other], move |g, v| {
            let s = g.sigmoid(v[1]);
            let x = g.mul(v[0], s).unwrap();
            let p = g.sigmoid(v[2]);
            let x = g.mul(x, p).unwrap();
            let pooled = g.global_avg_pool(x);
            let x = g.mul(x, pooled).unwrap();
            let x = g.add(x, v[0]).unwrap();
            let r = g.relu(v[3]);
            let cat = g.concat(&[x, r]).unwrap();
            let up = g.upsample2x(cat);
            let t = g.leaf(target.clone(), false);
            g.l1_loss(up, t).unwrap()
        });
    }

    #[test]
    fn mean_and_l1_closed_forms() {
        let x = rand_tensor([1, 2, 3, 4], 5);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let m = g.mean(v);
        g.backward(m).unwrap();
        assert!(g.grad(v).unwrap().iter().all(|&d| d == 1.0 / 24.0));

        let mut g = Graph::new();
        let p = g.leaf(x.clone(), true);
        let mut shifted = x.clone();
        shifted.data.iter_mut().for_each(|v| *v -= 0.1);
        shifted.data[0] = x.data[0];
        let t = g.leaf(shifted, false);
        let loss = g.l1_loss(p, t).unwrap();
        assert!((g.value(loss).data[0] - 0.1 * 23.0 / 24.0).abs() < 1e-12);
        g.backward(loss).unwrap();
        let grad = g.grad(p).unwrap();
        assert_eq!(grad[0], 0.0);
        assert!(grad[1..].iter().all(|&d| d == 1.0 / 24.0));
    }

    #[test]
    fn l1_of_equal_tensors_is_zero_and_matches_loop() {
        let a = rand_tensor([2, 3, 5, 5], 20);
        let b = rand_tensor([2, 3, 5, 5], 21);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a.clone(), false), g.leaf(b.clone(), false));
        let same = g.l1_loss(va, va).unwrap();
        assert_eq!(g.value(same).data[0], 0.0);
        let l = g.l1_loss(va, vb).unwrap();
        let mut acc = 0.0;
        for i in 0..a.numel() {
            acc += (a.data[i] - b.data[i]).abs();
        }
        assert!((g.value(l).data[0] - acc / a.numel() as f64).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_is_reusable() {
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor([1, 1, 2, 2], 1), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));

        let keep = g.len();
        let m = g.mean(x);
        g.backward(m).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.zero_grad();
        g.truncate(keep);
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros([1, 2, 3, 3]), false);
        let b = g.leaf(Tensor::zeros([1, 3, 3, 3]), false);
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        let w = g.leaf(Tensor::zeros([4, 3, 3, 3]), false);
        let bias = g.leaf(Tensor::zeros([4, 1, 1, 1]), false);
        assert!(g.conv2d(a, w, bias, 1, 1, 1).is_err());
    }
}
