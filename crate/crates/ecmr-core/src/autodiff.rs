//! Reverse-mode autodiff over a flat operation tape.
//!
//! A forward pass appends nodes to a [`Tape`]; [`backward`] walks the tape in
//! reverse and returns dense gradients for every reachable trainable leaf.
//! The op set is exactly what the restoration network, the mining module, and
//! the l1 objective need — nothing speculative. All loops are single-threaded
//! with a fixed accumulation order, so results are bit-reproducible.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Handle to a node on the tape. Ids are only meaningful for the tape that
/// produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    /// Constant leaf: no gradient flows here.
    Leaf,
    /// Differentiable leaf without a parameter identity (test inputs).
    Input,
    /// Trainable parameter leaf; gradients are collected per id.
    Param { id: String },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, groups: usize, pad: usize },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Gelu { x: TensorId },
    Sigmoid { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    GroupNorm { x: TensorId, gamma: TensorId, beta: TensorId, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    GlobalAvgPool { x: TensorId },
    AvgPool2 { x: TensorId },
    UpsampleNearest2 { x: TensorId },
    ConcatC { xs: Vec<TensorId> },
    SliceC { x: TensorId, start: usize, len: usize },
    Add { a: TensorId, b: TensorId },
    ChannelScale { x: TensorId, gate: TensorId },
    Reshape { x: TensorId },
    BmmNT { a: TensorId, b: TensorId },
    ChannelMix { a: TensorId, f: TensorId },
    L1Loss { pred: TensorId, target: TensorId },
}

/// Exact Gaussian CDF, the gate inside gelu.
#[inline]
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { value, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Output dtype: narrow only when every operand is already narrow.
    fn out_dtype(&self, ids: &[TensorId]) -> DType {
        if !ids.is_empty() && ids.iter().all(|&i| self.value(i).dtype() == DType::F32) {
            DType::F32
        } else {
            DType::F64
        }
    }

    fn finish(&mut self, mut value: Tensor, inputs: &[TensorId], op: Op) -> TensorId {
        let dtype = self.out_dtype(inputs);
        value = value.with_dtype(dtype);
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(value, needs, op)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant input: excluded from differentiation (frozen weights, data).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, false, Op::Leaf)
    }

    /// Differentiable input without a parameter name.
    pub fn input(&mut self, t: Tensor) -> TensorId {
        self.push(t, true, Op::Input)
    }

    /// Trainable parameter; its gradient lands in the per-id map.
    pub fn param(&mut self, id: impl Into<String>, t: Tensor) -> TensorId {
        self.push(t, true, Op::Param { id: id.into() })
    }

    // ── ops ─────────────────────────────────────────────────────────────

    /// Grouped cross-correlation, stride 1, symmetric zero padding.
    /// x: [B,Cin,H,W], w: [Cout,Cin/groups,kh,kw], b: [Cout].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        groups: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?} must be rank 4")));
        }
        let (bn, cin, h, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cpg_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {groups} must divide cin {cin} and cout {cout}"),
            ));
        }
        if cpg_in != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("w in-channels {cpg_in} != cin/groups {}", cin / groups),
            ));
        }
        if let Some(bid) = b {
            let bs = self.value(bid).shape();
            if bs != [cout] {
                return Err(Error::shape("conv2d", format!("bias {bs:?} != [{cout}]")));
            }
        }
        let hp = (h + 2 * pad).checked_sub(kh).map(|v| v + 1);
        let wp = (iw + 2 * pad).checked_sub(kw).map(|v| v + 1);
        let (hp, wp) = match (hp, wp) {
            (Some(a), Some(c)) if a > 0 && c > 0 => (a, c),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} too large for {h}x{iw} with pad {pad}"),
                ))
            }
        };

        let mut y = vec![0.0; bn * cout * hp * wp];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|bid| self.value(bid).data().to_vec());
            let cpg_out = cout / groups;
            for bi in 0..bn {
                for co in 0..cout {
                    let gi = co / cpg_out;
                    let ybase = (bi * cout + co) * hp * wp;
                    if let Some(bias) = &bd {
                        y[ybase..ybase + hp * wp].fill(bias[co]);
                    }
                    for cil in 0..cpg_in {
                        let ci = gi * cpg_in + cil;
                        let xbase = (bi * cin + ci) * h * iw;
                        for khi in 0..kh {
                            let oh_lo = (pad as isize - khi as isize).max(0) as usize;
                            let oh_hi =
                                ((h + pad) as isize - khi as isize).clamp(0, hp as isize) as usize;
                            for kwi in 0..kw {
                                let wv = wd[((co * cpg_in + cil) * kh + khi) * kw + kwi];
                                let ow_lo = (pad as isize - kwi as isize).max(0) as usize;
                                let ow_hi = ((iw + pad) as isize - kwi as isize)
                                    .clamp(0, wp as isize)
                                    as usize;
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                for oh in oh_lo..oh_hi {
                                    let ih = oh + khi - pad;
                                    let xrow = xbase + ih * iw + (ow_lo + kwi - pad);
                                    let yrow = ybase + oh * wp + ow_lo;
                                    let n = ow_hi - ow_lo;
                                    let xs = &xd[xrow..xrow + n];
                                    let ys = &mut y[yrow..yrow + n];
                                    for (yv, xv) in ys.iter_mut().zip(xs) {
                                        *yv += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bn, cout, hp, wp], y)?;
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            inputs.push(bid);
        }
        Ok(self.finish(value, &inputs, Op::Conv2d { x, w, b, groups, pad }))
    }

    /// Fully-connected map: x [B,I] x w [O,I] + b [O] -> [B,O].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (bn, fin) = (xs[0], xs[1]);
        let (fout, win) = (ws[0], ws[1]);
        if win != fin || bs[0] != fout {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?} incompatible with w {ws:?} / b {bs:?}"),
            ));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut y = vec![0.0; bn * fout];
        for bi in 0..bn {
            let xrow = &xd[bi * fin..(bi + 1) * fin];
            for o in 0..fout {
                let wrow = &wd[o * fin..(o + 1) * fin];
                let mut acc = bd[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                y[bi * fout + o] = acc;
            }
        }
        let value = Tensor::from_vec(&[bn, fout], y)?;
        Ok(self.finish(value, &[x, w, b], Op::Linear { x, w, b }))
    }

    /// Exact-gate gelu: x * gauss_cdf(x).
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * gauss_cdf(a)).collect();
        let value = Tensor::from_vec(v.shape(), data)?;
        Ok(self.finish(value, &[x], Op::Gelu { x }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        let value = Tensor::from_vec(v.shape(), data)?;
        Ok(self.finish(value, &[x], Op::Sigmoid { x }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..n {
                    mx = mx.max(data[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (data[base + k * inner] - mx).exp();
                    data[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..n {
                    data[base + k * inner] /= sum;
                }
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.finish(value, &[x], Op::Softmax { x, axis }))
    }

    /// Per-group standardization with affine: x [B,C,H,W], gamma/beta [C].
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("group_norm", format!("x {xs:?} must be rank 4")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("groups {groups} must divide C {c}")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("group_norm", "gamma/beta must be [C]".to_string()));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArg(format!("group_norm eps {eps} must be > 0")));
        }
        let cpg = c / groups;
        let lane = cpg * h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut y = vec![0.0; xd.len()];
        let mut means = vec![0.0; bn * groups];
        let mut rstds = vec![0.0; bn * groups];
        for bi in 0..bn {
            for g in 0..groups {
                let start = (bi * c + g * cpg) * h * w;
                let xs_lane = &xd[start..start + lane];
                let mean = xs_lane.iter().sum::<f64>() / lane as f64;
                let var = xs_lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                    / lane as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                means[bi * groups + g] = mean;
                rstds[bi * groups + g] = rstd;
                for cl in 0..cpg {
                    let ch = g * cpg + cl;
                    let row = start + cl * h * w;
                    for k in 0..h * w {
                        let xhat = (xd[row + k] - mean) * rstd;
                        y[row + k] = gd[ch] * xhat + bd[ch];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        Ok(self.finish(
            value,
            &[x, gamma, beta],
            Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds },
        ))
    }

    /// Spatial mean: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("x {xs:?} must be rank 4")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xd = self.value(x).data();
        let mut y = vec![0.0; bn * c];
        for i in 0..bn * c {
            y[i] = xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::from_vec(&[bn, c], y)?;
        Ok(self.finish(value, &[x], Op::GlobalAvgPool { x }))
    }

    /// 2x2 mean pooling, stride 2. H and W must be even.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("x {xs:?} needs even H,W")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut y = vec![0.0; bn * c * oh * ow];
        for bc in 0..bn * c {
            let xbase = bc * h * w;
            let ybase = bc * oh * ow;
            for r in 0..oh {
                for cc in 0..ow {
                    let p = xbase + 2 * r * w + 2 * cc;
                    y[ybase + r * ow + cc] = 0.25 * (xd[p] + xd[p + 1] + xd[p + w] + xd[p + w + 1]);
                }
            }
        }
        let value = Tensor::from_vec(&[bn, c, oh, ow], y)?;
        Ok(self.finish(value, &[x], Op::AvgPool2 { x }))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_nearest2", format!("x {xs:?} must be rank 4")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * 2, w * 2);
        let xd = self.value(x).data();
        let mut y = vec![0.0; bn * c * oh * ow];
        for bc in 0..bn * c {
            let xbase = bc * h * w;
            let ybase = bc * oh * ow;
            for r in 0..oh {
                for cc in 0..ow {
                    y[ybase + r * ow + cc] = xd[xbase + (r / 2) * w + cc / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[bn, c, oh, ow], y)?;
        Ok(self.finish(value, &[x], Op::UpsampleNearest2 { x }))
    }

    /// Concatenate along the channel axis (rank 2 or rank 4 operands).
    pub fn channel_concat(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("channel_concat", "no inputs"));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if first.len() != 2 && first.len() != 4 {
            return Err(Error::shape("channel_concat", format!("rank {} unsupported", first.len())));
        }
        let mut total_c = 0;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s[0] != first[0]
                || (s.len() == 4 && (s[2] != first[2] || s[3] != first[3]))
            {
                return Err(Error::shape(
                    "channel_concat",
                    format!("incompatible operand {s:?} vs {first:?}"),
                ));
            }
            total_c += s[1];
        }
        let bn = first[0];
        let spatial: usize = if first.len() == 4 { first[2] * first[3] } else { 1 };
        let mut out = vec![0.0; bn * total_c * spatial];
        for bi in 0..bn {
            let mut cofs = 0;
            for &id in xs {
                let v = self.value(id);
                let c = v.shape()[1];
                let src = &v.data()[bi * c * spatial..(bi + 1) * c * spatial];
                let dst_start = (bi * total_c + cofs) * spatial;
                out[dst_start..dst_start + c * spatial].copy_from_slice(src);
                cofs += c;
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.finish(value, xs, Op::ConcatC { xs: xs.to_vec() }))
    }

    /// Take channels [start, start+len) along axis 1 (rank 2 or rank 4).
    pub fn channel_slice(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("channel_slice", format!("rank {} unsupported", s.len())));
        }
        let c = s[1];
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "channel_slice",
                format!("[{start}, {start}+{len}) out of {c} channels"),
            ));
        }
        let bn = s[0];
        let spatial: usize = if s.len() == 4 { s[2] * s[3] } else { 1 };
        let xd = self.value(x).data();
        let mut out = vec![0.0; bn * len * spatial];
        for bi in 0..bn {
            let src = (bi * c + start) * spatial;
            let dst = bi * len * spatial;
            out[dst..dst + len * spatial].copy_from_slice(&xd[src..src + len * spatial]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.finish(value, &[x], Op::SliceC { x, start, len }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.finish(value, &[a, b], Op::Add { a, b }))
    }

    /// Scale each channel map by a per-(sample, channel) gate:
    /// x [B,C,H,W] * gate [B,C].
    pub fn channel_scale(&mut self, x: TensorId, gate: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(gate).shape().to_vec();
        if xs.len() != 4 || gs.len() != 2 || gs[0] != xs[0] || gs[1] != xs[1] {
            return Err(Error::shape("channel_scale", format!("x {xs:?} vs gate {gs:?}")));
        }
        let hw = xs[2] * xs[3];
        let xd = self.value(x).data();
        let gd = self.value(gate).data();
        let mut y = vec![0.0; xd.len()];
        for bc in 0..xs[0] * xs[1] {
            let g = gd[bc];
            for k in 0..hw {
                y[bc * hw + k] = xd[bc * hw + k] * g;
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        Ok(self.finish(value, &[x, gate], Op::ChannelScale { x, gate }))
    }

    /// Same data, new shape (numel preserved).
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let value = Tensor::from_vec(shape, self.value(x).data().to_vec()).map_err(|_| {
            Error::shape(
                "reshape",
                format!("{:?} ({} elems) -> {shape:?}", self.value(x).shape(), self.value(x).numel()),
            )
        })?;
        Ok(self.finish(value, &[x], Op::Reshape { x }))
    }

    /// Batched a @ b^T: a [B,M,K] x b [B,N,K] -> [B,M,N].
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let as_ = self.value(a).shape().to_vec();
        let bs_ = self.value(b).shape().to_vec();
        if as_.len() != 3 || bs_.len() != 3 || as_[0] != bs_[0] || as_[2] != bs_[2] {
            return Err(Error::shape("bmm_nt", format!("a {as_:?} vs b {bs_:?}")));
        }
        let (bn, m, k) = (as_[0], as_[1], as_[2]);
        let n = bs_[1];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut y = vec![0.0; bn * m * n];
        for bi in 0..bn {
            for mi in 0..m {
                let arow = &ad[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                for ni in 0..n {
                    let brow = &bd[(bi * n + ni) * k..(bi * n + ni + 1) * k];
                    let mut acc = 0.0;
                    for (x, z) in arow.iter().zip(brow) {
                        acc += x * z;
                    }
                    y[(bi * m + mi) * n + ni] = acc;
                }
            }
        }
        let value = Tensor::from_vec(&[bn, m, n], y)?;
        Ok(self.finish(value, &[a, b], Op::BmmNT { a, b }))
    }

    /// Mix channel maps by a per-sample matrix: a [B,M,N] x f [B,N,H,W] -> [B,M,H,W].
    pub fn channel_mix(&mut self, a: TensorId, f: TensorId) -> Result<TensorId> {
        let as_ = self.value(a).shape().to_vec();
        let fs = self.value(f).shape().to_vec();
        if as_.len() != 3 || fs.len() != 4 || as_[0] != fs[0] || as_[2] != fs[1] {
            return Err(Error::shape("channel_mix", format!("a {as_:?} vs f {fs:?}")));
        }
        let (bn, m, n) = (as_[0], as_[1], as_[2]);
        let hw = fs[2] * fs[3];
        let ad = self.value(a).data();
        let fd = self.value(f).data();
        let mut y = vec![0.0; bn * m * hw];
        for bi in 0..bn {
            for mi in 0..m {
                let yrow = (bi * m + mi) * hw;
                for ni in 0..n {
                    let coef = ad[(bi * m + mi) * n + ni];
                    let frow = (bi * n + ni) * hw;
                    for k in 0..hw {
                        y[yrow + k] += coef * fd[frow + k];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bn, m, fs[2], fs[3]], y)?;
        Ok(self.finish(value, &[a, f], Op::ChannelMix { a, f }))
    }

    /// Mean absolute error as a [1]-shaped scalar. The subgradient at exact
    /// ties is 0.
    pub fn l1_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.value(pred).shape(), self.value(target).shape()),
            ));
        }
        let n = self.value(pred).numel() as f64;
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let value = Tensor::scalar(sum / n);
        Ok(self.finish(value, &[pred, target], Op::L1Loss { pred, target }))
    }
}

/// Dense gradients produced by [`backward`].
pub struct Gradients {
    node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a node (present only where gradient flowed).
    pub fn node(&self, id: TensorId) -> Option<&Tensor> {
        self.node.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter id. Frozen and unreachable parameters
    /// have no entry.
    pub fn by_param(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

/// Reverse sweep from a scalar loss node. Pure: running it twice over the
/// same tape yields identical gradients.
pub fn backward(tape: &Tape, loss: TensorId) -> Result<Gradients> {
    let nn = tape.nodes.len();
    if loss.0 >= nn {
        return Err(Error::InvalidArg("loss id not on this tape".into()));
    }
    if tape.value(loss).shape() != [1] {
        return Err(Error::shape(
            "backward",
            format!("loss must be [1], got {:?}", tape.value(loss).shape()),
        ));
    }
    let mut grads: Vec<Option<Vec<f64>>> = (0..nn).map(|_| None).collect();
    if tape.nodes[loss.0].needs_grad {
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(idx);
            let gy = hi[0].as_ref().expect("checked above");
            propagate(tape, idx, gy, lo);
        }
    }
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut node_out: Vec<Option<Tensor>> = Vec::with_capacity(nn);
    for (idx, g) in grads.into_iter().enumerate() {
        match g {
            Some(data) => {
                let t = Tensor::from_vec(tape.nodes[idx].value.shape(), data)?;
                if let Op::Param { id } = &tape.nodes[idx].op {
                    match params.get_mut(id) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            params.insert(id.clone(), t.clone());
                        }
                    }
                }
                node_out.push(Some(t));
            }
            None => node_out.push(None),
        }
    }
    Ok(Gradients { node: node_out, params })
}

/// Accumulate `gy` through node `idx` into its inputs (all of which have
/// tape positions strictly below `idx`).
fn propagate(tape: &Tape, idx: usize, gy: &[f64], lo: &mut [Option<Vec<f64>>]) {
    let node = &tape.nodes[idx];
    let needs = |id: TensorId| tape.nodes[id.0].needs_grad;
    let numel = |id: TensorId| tape.value(id).numel();
    macro_rules! acc {
        ($id:expr) => {
            lo[$id.0].get_or_insert_with(|| vec![0.0; numel($id)])
        };
    }
    match &node.op {
        Op::Leaf | Op::Input | Op::Param { .. } => {}
        Op::Conv2d { x, w, b, groups, pad } => {
            let (x, w, pad) = (*x, *w, *pad);
            let xs = tape.value(x).shape();
            let ws = tape.value(w).shape();
            let (bn, cin, h, iw) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, cpg_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let cpg_out = cout / groups;
            let hp = h + 2 * pad - kh + 1;
            let wp = iw + 2 * pad - kw + 1;
            let xd = tape.value(x).data();
            let wd = tape.value(w).data();
            let want_x = needs(x);
            let want_w = needs(w);
            let mut gx = if want_x { Some(vec![0.0; xd.len()]) } else { None };
            let mut gw = if want_w { Some(vec![0.0; wd.len()]) } else { None };
            if want_x || want_w {
                for bi in 0..bn {
                    for co in 0..cout {
                        let gi = co / cpg_out;
                        let ybase = (bi * cout + co) * hp * wp;
                        for cil in 0..cpg_in {
                            let ci = gi * cpg_in + cil;
                            let xbase = (bi * cin + ci) * h * iw;
                            for khi in 0..kh {
                                let oh_lo = (pad as isize - khi as isize).max(0) as usize;
                                let oh_hi = ((h + pad) as isize - khi as isize)
                                    .clamp(0, hp as isize)
                                    as usize;
                                for kwi in 0..kw {
                                    let widx = ((co * cpg_in + cil) * kh + khi) * kw + kwi;
                                    let wv = wd[widx];
                                    let ow_lo = (pad as isize - kwi as isize).max(0) as usize;
                                    let ow_hi = ((iw + pad) as isize - kwi as isize)
                                        .clamp(0, wp as isize)
                                        as usize;
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    let n = ow_hi - ow_lo;
                                    let mut wacc = 0.0;
                                    for oh in oh_lo..oh_hi {
                                        let ih = oh + khi - pad;
                                        let xrow = xbase + ih * iw + (ow_lo + kwi - pad);
                                        let yrow = ybase + oh * wp + ow_lo;
                                        let gys = &gy[yrow..yrow + n];
                                        if let Some(gx) = &mut gx {
                                            let gxs = &mut gx[xrow..xrow + n];
                                            for (gxv, gyv) in gxs.iter_mut().zip(gys) {
                                                *gxv += wv * gyv;
                                            }
                                        }
                                        if want_w {
                                            let xs_row = &xd[xrow..xrow + n];
                                            for (xv, gyv) in xs_row.iter().zip(gys) {
                                                wacc += xv * gyv;
                                            }
                                        }
                                    }
                                    if let Some(gw) = &mut gw {
                                        gw[widx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                let dst = acc!(x);
                for (d, s) in dst.iter_mut().zip(&gx) {
                    *d += s;
                }
            }
            if let Some(gw) = gw {
                let dst = acc!(w);
                for (d, s) in dst.iter_mut().zip(&gw) {
                    *d += s;
                }
            }
            if let Some(bid) = b {
                if needs(*bid) {
                    let dst = acc!(*bid);
                    for bi in 0..bn {
                        for co in 0..cout {
                            let ybase = (bi * cout + co) * hp * wp;
                            dst[co] += gy[ybase..ybase + hp * wp].iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let xs = tape.value(x).shape();
            let ws = tape.value(w).shape();
            let (bn, fin) = (xs[0], xs[1]);
            let fout = ws[0];
            let xd = tape.value(x).data();
            let wd = tape.value(w).data();
            if needs(x) {
                let dst = acc!(x);
                for bi in 0..bn {
                    for o in 0..fout {
                        let g = gy[bi * fout + o];
                        let wrow = &wd[o * fin..(o + 1) * fin];
                        let drow = &mut dst[bi * fin..(bi + 1) * fin];
                        for (d, wv) in drow.iter_mut().zip(wrow) {
                            *d += g * wv;
                        }
                    }
                }
            }
            if needs(w) {
                let dst = acc!(w);
                for bi in 0..bn {
                    let xrow = &xd[bi * fin..(bi + 1) * fin];
                    for o in 0..fout {
                        let g = gy[bi * fout + o];
                        let drow = &mut dst[o * fin..(o + 1) * fin];
                        for (d, xv) in drow.iter_mut().zip(xrow) {
                            *d += g * xv;
                        }
                    }
                }
            }
            if needs(b) {
                let dst = acc!(b);
                for bi in 0..bn {
                    for o in 0..fout {
                        dst[o] += gy[bi * fout + o];
                    }
                }
            }
        }
        Op::Gelu { x } => {
            let x = *x;
            if needs(x) {
                let xd = tape.value(x).data();
                let dst = acc!(x);
                for (i, (&xv, g)) in xd.iter().zip(gy).enumerate() {
                    dst[i] += g * (gauss_cdf(xv) + xv * gauss_pdf(xv));
                }
            }
        }
        Op::Sigmoid { x } => {
            let x = *x;
            if needs(x) {
                let yd = node.value.data();
                let dst = acc!(x);
                for (i, (&yv, g)) in yd.iter().zip(gy).enumerate() {
                    dst[i] += g * yv * (1.0 - yv);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let x = *x;
            if needs(x) {
                let shape = node.value.shape();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let yd = node.value.data();
                let dst = acc!(x);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for k in 0..n {
                            dot += gy[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..n {
                            let p = base + k * inner;
                            dst[p] += yd[p] * (gy[p] - dot);
                        }
                    }
                }
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, mean, rstd, .. } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let xs = tape.value(x).shape();
            let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let cpg = c / groups;
            let lane = cpg * h * w;
            let hw = h * w;
            let xd = tape.value(x).data();
            let gd = tape.value(gamma).data();
            if needs(x) {
                let dst = acc!(x);
                for bi in 0..bn {
                    for g in 0..*groups {
                        let m = mean[bi * groups + g];
                        let rs = rstd[bi * groups + g];
                        let start = (bi * c + g * cpg) * hw;
                        // two reductions over the lane, then the combined update
                        let mut sum1 = 0.0;
                        let mut sum2 = 0.0;
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let row = start + cl * hw;
                            for k in 0..hw {
                                let dxh = gy[row + k] * gd[ch];
                                let xh = (xd[row + k] - m) * rs;
                                sum1 += dxh;
                                sum2 += dxh * xh;
                            }
                        }
                        let nl = lane as f64;
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let row = start + cl * hw;
                            for k in 0..hw {
                                let dxh = gy[row + k] * gd[ch];
                                let xh = (xd[row + k] - m) * rs;
                                dst[row + k] += rs * (dxh - sum1 / nl - xh * sum2 / nl);
                            }
                        }
                    }
                }
            }
            if needs(gamma) {
                let dst = acc!(gamma);
                for bi in 0..bn {
                    for g in 0..*groups {
                        let m = mean[bi * groups + g];
                        let rs = rstd[bi * groups + g];
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let row = (bi * c + ch) * hw;
                            let mut acc_g = 0.0;
                            for k in 0..hw {
                                acc_g += gy[row + k] * (xd[row + k] - m) * rs;
                            }
                            dst[ch] += acc_g;
                        }
                    }
                }
            }
            if needs(beta) {
                let dst = acc!(beta);
                for bi in 0..bn {
                    for ch in 0..c {
                        let row = (bi * c + ch) * hw;
                        dst[ch] += gy[row..row + hw].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let x = *x;
            if needs(x) {
                let xs = tape.value(x).shape();
                let hw = xs[2] * xs[3];
                let dst = acc!(x);
                for bc in 0..xs[0] * xs[1] {
                    let g = gy[bc] / hw as f64;
                    for k in 0..hw {
                        dst[bc * hw + k] += g;
                    }
                }
            }
        }
        Op::AvgPool2 { x } => {
            let x = *x;
            if needs(x) {
                let xs = tape.value(x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let dst = acc!(x);
                for bc in 0..xs[0] * xs[1] {
                    let xbase = bc * h * w;
                    let ybase = bc * oh * ow;
                    for r in 0..oh {
                        for cc in 0..ow {
                            let g = 0.25 * gy[ybase + r * ow + cc];
                            let p = xbase + 2 * r * w + 2 * cc;
                            dst[p] += g;
                            dst[p + 1] += g;
                            dst[p + w] += g;
                            dst[p + w + 1] += g;
                        }
                    }
                }
            }
        }
        Op::UpsampleNearest2 { x } => {
            let x = *x;
            if needs(x) {
                let xs = tape.value(x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h * 2, w * 2);
                let dst = acc!(x);
                for bc in 0..xs[0] * xs[1] {
                    let xbase = bc * h * w;
                    let ybase = bc * oh * ow;
                    for r in 0..oh {
                        for cc in 0..ow {
                            dst[xbase + (r / 2) * w + cc / 2] += gy[ybase + r * ow + cc];
                        }
                    }
                }
            }
        }
        Op::ConcatC { xs } => {
            let shape = node.value.shape();
            let bn = shape[0];
            let total_c = shape[1];
            let spatial: usize = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
            let mut cofs = 0;
            for &id in xs {
                let c = tape.value(id).shape()[1];
                if needs(id) {
                    let dst = acc!(id);
                    for bi in 0..bn {
                        let src = (bi * total_c + cofs) * spatial;
                        let d = bi * c * spatial;
                        for k in 0..c * spatial {
                            dst[d + k] += gy[src + k];
                        }
                    }
                }
                cofs += c;
            }
        }
        Op::SliceC { x, start, len } => {
            let x = *x;
            if needs(x) {
                let xs = tape.value(x).shape();
                let bn = xs[0];
                let c = xs[1];
                let spatial: usize = if xs.len() == 4 { xs[2] * xs[3] } else { 1 };
                let dst = acc!(x);
                for bi in 0..bn {
                    let d = (bi * c + start) * spatial;
                    let src = bi * len * spatial;
                    for k in 0..len * spatial {
                        dst[d + k] += gy[src + k];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for &id in [a, b] {
                if needs(id) {
                    let dst = acc!(id);
                    for (d, g) in dst.iter_mut().zip(gy) {
                        *d += g;
                    }
                }
            }
        }
        Op::ChannelScale { x, gate } => {
            let (x, gate) = (*x, *gate);
            let xs = tape.value(x).shape();
            let hw = xs[2] * xs[3];
            let xd = tape.value(x).data();
            let gd = tape.value(gate).data();
            if needs(x) {
                let dst = acc!(x);
                for bc in 0..xs[0] * xs[1] {
                    let g = gd[bc];
                    for k in 0..hw {
                        dst[bc * hw + k] += g * gy[bc * hw + k];
                    }
                }
            }
            if needs(gate) {
                let dst = acc!(gate);
                for bc in 0..xs[0] * xs[1] {
                    let mut acc_g = 0.0;
                    for k in 0..hw {
                        acc_g += gy[bc * hw + k] * xd[bc * hw + k];
                    }
                    dst[bc] += acc_g;
                }
            }
        }
        Op::Reshape { x } => {
            let x = *x;
            if needs(x) {
                let dst = acc!(x);
                for (d, g) in dst.iter_mut().zip(gy) {
                    *d += g;
                }
            }
        }
        Op::BmmNT { a, b } => {
            let (a, b) = (*a, *b);
            let as_ = tape.value(a).shape();
            let bs_ = tape.value(b).shape();
            let (bn, m, k) = (as_[0], as_[1], as_[2]);
            let n = bs_[1];
            let ad = tape.value(a).data();
            let bd = tape.value(b).data();
            if needs(a) {
                let dst = acc!(a);
                for bi in 0..bn {
                    for mi in 0..m {
                        for ni in 0..n {
                            let g = gy[(bi * m + mi) * n + ni];
                            let brow = &bd[(bi * n + ni) * k..(bi * n + ni + 1) * k];
                            let drow = &mut dst[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                            for (d, bv) in drow.iter_mut().zip(brow) {
                                *d += g * bv;
                            }
                        }
                    }
                }
            }
            if needs(b) {
                let dst = acc!(b);
                for bi in 0..bn {
                    for mi in 0..m {
                        let arow = &ad[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                        for ni in 0..n {
                            let g = gy[(bi * m + mi) * n + ni];
                            let drow = &mut dst[(bi * n + ni) * k..(bi * n + ni + 1) * k];
                            for (d, av) in drow.iter_mut().zip(arow) {
                                *d += g * av;
                            }
                        }
                    }
                }
            }
        }
        Op::ChannelMix { a, f } => {
            let (a, f) = (*a, *f);
            let as_ = tape.value(a).shape();
            let fs = tape.value(f).shape();
            let (bn, m, n) = (as_[0], as_[1], as_[2]);
            let hw = fs[2] * fs[3];
            let ad = tape.value(a).data();
            let fd = tape.value(f).data();
            if needs(a) {
                let dst = acc!(a);
                for bi in 0..bn {
                    for mi in 0..m {
                        let yrow = (bi * m + mi) * hw;
                        for ni in 0..n {
                            let frow = (bi * n + ni) * hw;
                            let mut acc_g = 0.0;
                            for k in 0..hw {
                                acc_g += gy[yrow + k] * fd[frow + k];
                            }
                            dst[(bi * m + mi) * n + ni] += acc_g;
                        }
                    }
                }
            }
            if needs(f) {
                let dst = acc!(f);
                for bi in 0..bn {
                    for mi in 0..m {
                        let yrow = (bi * m + mi) * hw;
                        for ni in 0..n {
                            let coef = ad[(bi * m + mi) * n + ni];
                            let frow = (bi * n + ni) * hw;
                            for k in 0..hw {
                                dst[frow + k] += coef * gy[yrow + k];
                            }
                        }
                    }
                }
            }
        }
        Op::L1Loss { pred, target } => {
            let (pred, target) = (*pred, *target);
            let pd = tape.value(pred).data();
            let td = tape.value(target).data();
            let n = pd.len() as f64;
            let g = gy[0];
            // |d| has subgradient sign(d); 0 exactly at ties
            if needs(pred) {
                let dst = acc!(pred);
                for (i, (p, t)) in pd.iter().zip(td).enumerate() {
                    let d = p - t;
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dst[i] += g * s / n;
                }
            }
            if needs(target) {
                let dst = acc!(target);
                for (i, (p, t)) in pd.iter().zip(td).enumerate() {
                    let d = p - t;
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dst[i] -= g * s / n;
                }
            }
        }
    }
}

/// Compare an analytic gradient against central differences.
///
/// `f` maps the inputs to a scalar value plus one analytic gradient tensor per
/// input (same shapes). Every coordinate of every input is perturbed by
/// `± eps`; the result is the largest relative error, with the relative
/// denominator floored at 1e-12.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArg(format!("finite_diff_check eps {eps} must be > 0")));
    }
    let (_, analytic) = f(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArg(format!(
            "analytic gradient count {} != input count {}",
            analytic.len(),
            inputs.len()
        )));
    }
    for (a, x) in analytic.iter().zip(inputs) {
        if a.shape() != x.shape() {
            return Err(Error::shape(
                "finite_diff_check",
                format!("gradient {:?} vs input {:?}", a.shape(), x.shape()),
            ));
        }
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = f(&work)?.0;
            work[k].data_mut()[i] = orig - eps;
            let down = f(&work)?.0;
            work[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[k].data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-12);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Gradient-check a single-output builder by weighting its output with a
    /// fixed random vector (a full random cotangent, so structural bugs in
    /// the jacobian cannot hide in row sums).
    fn check_op<B>(inputs: &[Tensor], rng: &mut ChaCha8Rng, build: B) -> f64
    where
        B: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    {
        // probe output size first
        let mut probe = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| probe.input(t.clone())).collect();
        let out = build(&mut probe, &ids).unwrap();
        let out_n = probe.value(out).numel();
        let wvec = rand_tensor(&[1, out_n], rng);
        let bias = Tensor::zeros(&[1]);

        let f = |xs: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = xs.iter().map(|t| tape.input(t.clone())).collect();
            let y = build(&mut tape, &ids)?;
            let flat = tape.reshape(y, &[1, out_n])?;
            let wid = tape.constant(wvec.clone());
            let bid = tape.constant(bias.clone());
            let s = tape.linear(flat, wid, bid)?;
            let loss = tape.reshape(s, &[1])?;
            let grads = backward(&tape, loss)?;
            let gs = ids
                .iter()
                .zip(xs)
                .map(|(&id, x)| {
                    grads.node(id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
                })
                .collect();
            Ok((tape.value(loss).data()[0], gs))
        };
        finite_diff_check(f, inputs, 1e-5).unwrap()
    }

    #[test]
    fn global_avg_pool_fixture() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn softmax_fixture_and_properties() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![0.0, 2.0f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);

        // constant lane -> exactly uniform, large offsets -> no overflow
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[4], vec![1000.0; 4]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.25);
        }

        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[2, 3], vec![900.0, -900.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gelu_matches_gauss_cdf_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 1.0]).unwrap());
        let y = tape.gelu(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 0.841344746068543).abs() < 1e-12);
        assert!((d[0] - (-0.158655253931457)).abs() < 1e-12);
    }

    #[test]
    fn l1_loss_value_and_tie_subgradient() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::from_vec(&[2], vec![2.0, 5.0]).unwrap());
        let t = tape.constant(Tensor::from_vec(&[2], vec![1.0, 5.0]).unwrap());
        let loss = tape.l1_loss(p, t).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.5);
        let g = backward(&tape, loss).unwrap();
        let gp = g.node(p).unwrap();
        assert_eq!(gp.data(), &[0.5, 0.0]); // tie coordinate gets exactly 0
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        // centre tap of the diagonal in/out pair
        for c in 0..2 {
            let idx = ((c * 2 + c) * 3 + 1) * 3 + 1;
            w.data_mut()[idx] = 1.0;
        }
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.constant(w);
        let y = tape.conv2d(xid, wid, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_grouped_matches_per_slice_convs_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let groups = 3;
        let x = rand_tensor(&[2, 6, 4, 4], &mut rng);
        let w = rand_tensor(&[6, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[6], &mut rng);

        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.constant(w.clone());
        let bid = tape.constant(b.clone());
        let fused = tape.conv2d(xid, wid, Some(bid), groups, 1).unwrap();

        let mut parts = Vec::new();
        for g in 0..groups {
            let xg = tape.channel_slice(xid, g * 2, 2).unwrap();
            let wg = tape.constant(
                Tensor::from_vec(&[2, 2, 3, 3], w.data()[g * 2 * 18..(g + 1) * 2 * 18].to_vec())
                    .unwrap(),
            );
            let bg = tape
                .constant(Tensor::from_vec(&[2], b.data()[g * 2..(g + 1) * 2].to_vec()).unwrap());
            parts.push(tape.conv2d(xg, wg, Some(bg), 1, 1).unwrap());
        }
        let cat = tape.channel_concat(&parts).unwrap();
        let a = tape.value(fused).data();
        let c = tape.value(cat).data();
        assert_eq!(a.len(), c.len());
        for (u, v) in a.iter().zip(c) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let gid = tape.constant(Tensor::full(&[4], 1.0));
        let bid = tape.constant(Tensor::zeros(&[4]));
        let y = tape.group_norm(xid, gid, bid, 2, 1e-5).unwrap();
        let d = tape.value(y).data();
        for bi in 0..2 {
            for g in 0..2 {
                let lane: Vec<f64> = (0..2 * 9)
                    .map(|k| d[(bi * 4 + g * 2) * 9 + k])
                    .collect();
                let mean: f64 = lane.iter().sum::<f64>() / lane.len() as f64;
                let var: f64 =
                    lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / lane.len() as f64;
                assert!(mean.abs() < 1e-10, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let b = rand_tensor(&[2, 2, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let aid = tape.constant(a.clone());
        let bid = tape.constant(b.clone());
        let cat = tape.channel_concat(&[aid, bid]).unwrap();
        let a2 = tape.channel_slice(cat, 0, 3).unwrap();
        let b2 = tape.channel_slice(cat, 3, 2).unwrap();
        assert_eq!(tape.value(a2).data(), a.data());
        assert_eq!(tape.value(b2).data(), b.data());
    }

    #[test]
    fn pool_and_upsample_shapes_and_values() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let p = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(p).data(), &[2.5]);
        let u = tape.upsample_nearest2(p).unwrap();
        assert_eq!(tape.value(u).data(), &[2.5, 2.5, 2.5, 2.5]);
        // odd sizes are rejected
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.avg_pool2(odd).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss_and_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let xid = tape.input(x);
        assert!(backward(&tape, xid).is_err()); // non-scalar

        let t = tape.constant(Tensor::full(&[2, 3], 0.2));
        let loss = tape.l1_loss(xid, t).unwrap();
        let g1 = backward(&tape, loss).unwrap();
        let g2 = backward(&tape, loss).unwrap();
        assert_eq!(g1.node(xid).unwrap().data(), g2.node(xid).unwrap().data());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 1.0));
        let p = tape.param("w", Tensor::full(&[4], 2.0));
        let s = tape.add(x, p).unwrap();
        let t = tape.constant(Tensor::zeros(&[4]));
        let loss = tape.l1_loss(s, t).unwrap();
        let g = backward(&tape, loss).unwrap();
        assert!(g.node(x).is_none());
        assert!(g.by_param().contains_key("w"));
        assert_eq!(g.by_param().len(), 1);
    }

    #[test]
    fn shared_parameter_gradients_accumulate_by_id() {
        let mut tape = Tape::new();
        let p1 = tape.param("shared", Tensor::full(&[2], 3.0));
        let p2 = tape.param("shared", Tensor::full(&[2], 3.0));
        let s = tape.add(p1, p2).unwrap();
        let t = tape.constant(Tensor::zeros(&[2]));
        let loss = tape.l1_loss(s, t).unwrap();
        let g = backward(&tape, loss).unwrap();
        // each branch contributes 0.5 per coordinate
        assert_eq!(g.by_param()["shared"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn finite_diff_check_rejects_bad_eps() {
        let f = |_: &[Tensor]| Ok((0.0, vec![Tensor::zeros(&[1])]));
        assert!(finite_diff_check(f, &[Tensor::zeros(&[1])], 0.0).is_err());
        assert!(finite_diff_check(f, &[Tensor::zeros(&[1])], -1.0).is_err());
    }

    #[test]
    fn quick_gradient_spot_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tol = 1e-5;

        let x = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let e = check_op(&[x, w, b], &mut rng, |t, ids| {
            t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)
        });
        assert!(e < tol, "conv2d rel err {e}");

        let x = rand_tensor(&[3, 5], &mut rng);
        let e = check_op(&[x], &mut rng, |t, ids| t.softmax(ids[0], 1));
        assert!(e < tol, "softmax rel err {e}");

        let x = rand_tensor(&[1, 4, 3, 3], &mut rng);
        let g = rand_tensor(&[4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let e = check_op(&[x, g, b], &mut rng, |t, ids| {
            t.group_norm(ids[0], ids[1], ids[2], 2, 1e-5)
        });
        assert!(e < tol, "group_norm rel err {e}");

        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 5, 4], &mut rng);
        let e = check_op(&[a, b], &mut rng, |t, ids| t.bmm_nt(ids[0], ids[1]));
        assert!(e < tol, "bmm_nt rel err {e}");

        let a = rand_tensor(&[2, 3, 2], &mut rng);
        let f = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let e = check_op(&[a, f], &mut rng, |t, ids| t.channel_mix(ids[0], ids[1]));
        assert!(e < tol, "channel_mix rel err {e}");
    }
}
