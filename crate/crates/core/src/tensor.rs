//! A small reverse-mode autodiff engine over dense f64 tensors, sized for
//! desk-scale training: strided convolutions, group normalization, SiLU,
//! per-pixel sequence attention, windowed spatial attention, the
//! conservation transform, and scalar losses.
//!
//! A `Graph` is a tape rebuilt per forward pass. Parameters live in a
//! `ParamStore`; graphs reference them read-only, so independent graphs can
//! run on worker threads against one shared snapshot.

use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as (slots, channels, height, width).
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 4, "expected 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

/// Boundary handling for convolutions and windowed attention. `Wrap` exists
/// for the translation-equivariance test mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Zero,
    Wrap,
}

pub type ParamId = usize;

/// Named parameter arrays in registration order (the serialization manifest
/// order). Values are kept exactly representable in f32 so weight files
/// round-trip bit-exactly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Round every value to the nearest f32. Applied after initialization and
    /// after each optimizer step so checkpoints reload losslessly.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Input,
    Conv2d {
        x: Var,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: Pad,
    },
    GroupNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SlotMean {
        x: Var,
    },
    SlotLast {
        x: Var,
    },
    UpsampleNearest {
        x: Var,
        th: usize,
        tw: usize,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    AddSlotBias {
        x: Var,
        bias: ParamId,
    },
    Linear {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    EmbedRow {
        table: ParamId,
        row: usize,
    },
    SeqAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        radius: usize,
        heads: usize,
        pad: Pad,
    },
    ReluShift {
        x: Var,
        alpha: f64,
    },
    PowNonneg {
        x: Var,
        e: f64,
    },
    MassRescale {
        x: Var,
        target: f64,
    },
    SqDiffSum {
        x: Var,
    },
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    Attn(Vec<f64>),
    GnStats { mean: Vec<f64>, inv_std: Vec<f64> },
    Target(Tensor),
}

const GN_EPS: f64 = 1e-5;

pub struct Graph<'a> {
    store: &'a ParamStore,
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    saved: Vec<Saved>,
}

fn wrap_idx(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            ops: Vec::new(),
            vals: Vec::new(),
            saved: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, val: Tensor, saved: Saved) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        self.saved.push(saved);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let val = self.store.get(id).clone();
        self.push(Op::Param(id), val, Saved::None)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, Saved::None)
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize, pad: Pad) -> Var {
        let out = conv2d_forward(&self.vals[x.0], self.store.get(w), self.store.get(b), stride, pad);
        self.push(Op::Conv2d { x, w, b, stride, pad }, out, Saved::None)
    }

    pub fn group_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, groups: usize) -> Var {
        let (out, mean, inv_std) =
            group_norm_forward(&self.vals[x.0], self.store.get(gamma), self.store.get(beta), groups);
        self.push(
            Op::GroupNorm { x, gamma, beta, groups },
            out,
            Saved::GnStats { mean, inv_std },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        let data = xv.data.iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(xv.shape.clone(), data);
        self.push(Op::Silu { x }, out, Saved::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        debug_assert_eq!(av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(Op::Add { a, b }, out, Saved::None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.vals[x.0];
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| c * v).collect());
        self.push(Op::Scale { x, c }, out, Saved::None)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        let (ba, ca, h, w) = av.dims4();
        let (bb, cb, hb, wb) = bv.dims4();
        debug_assert_eq!((ba, h, w), (bb, hb, wb));
        let mut out = Tensor::zeros(vec![ba, ca + cb, h, w]);
        let plane = h * w;
        for s in 0..ba {
            let src_a = &av.data[s * ca * plane..(s + 1) * ca * plane];
            let src_b = &bv.data[s * cb * plane..(s + 1) * cb * plane];
            let dst = &mut out.data[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(src_a);
            dst[ca * plane..].copy_from_slice(src_b);
        }
        self.push(Op::ConcatChannels { a, b }, out, Saved::None)
    }

    pub fn slot_mean(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        let (b, c, h, w) = xv.dims4();
        let n = c * h * w;
        let mut out = Tensor::zeros(vec![1, c, h, w]);
        for s in 0..b {
            for i in 0..n {
                out.data[i] += xv.data[s * n + i];
            }
        }
        let inv = 1.0 / b as f64;
        for v in &mut out.data {
            *v *= inv;
        }
        self.push(Op::SlotMean { x }, out, Saved::None)
    }

    pub fn slot_last(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        let (b, c, h, w) = xv.dims4();
        let n = c * h * w;
        let out = Tensor::new(vec![1, c, h, w], xv.data[(b - 1) * n..].to_vec());
        self.push(Op::SlotLast { x }, out, Saved::None)
    }

    pub fn upsample_nearest(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let xv = &self.vals[x.0];
        let (b, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(vec![b, c, th, tw]);
        for s in 0..b {
            for ch in 0..c {
                let src = &xv.data[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let dst = &mut out.data[(s * c + ch) * th * tw..(s * c + ch + 1) * th * tw];
                for oy in 0..th {
                    let iy = oy * h / th;
                    for ox in 0..tw {
                        dst[oy * tw + ox] = src[iy * w + ox * w / tw];
                    }
                }
            }
        }
        self.push(Op::UpsampleNearest { x, th, tw }, out, Saved::None)
    }

    /// Add a per-channel bias vector (shape `[C]`) to every slot and pixel.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (&self.vals[x.0], &self.vals[bias.0]);
        let (b, c, h, w) = xv.dims4();
        debug_assert_eq!(bv.len(), c);
        let mut out = xv.clone();
        for s in 0..b {
            for ch in 0..c {
                let off = (s * c + ch) * h * w;
                let bb = bv.data[ch];
                for v in &mut out.data[off..off + h * w] {
                    *v += bb;
                }
            }
        }
        self.push(Op::AddChannelBias { x, bias }, out, Saved::None)
    }

    /// Add a learned per-slot, per-channel bias (shape `[slots, C]`): the
    /// positional term for temporal attention.
    pub fn add_slot_bias(&mut self, x: Var, bias: ParamId) -> Var {
        let xv = &self.vals[x.0];
        let bv = self.store.get(bias);
        let (b, c, h, w) = xv.dims4();
        debug_assert_eq!(bv.shape, vec![b, c]);
        let mut out = xv.clone();
        for s in 0..b {
            for ch in 0..c {
                let off = (s * c + ch) * h * w;
                let bb = bv.data[s * c + ch];
                for v in &mut out.data[off..off + h * w] {
                    *v += bb;
                }
            }
        }
        self.push(Op::AddSlotBias { x, bias }, out, Saved::None)
    }

    /// Dense layer on a flat vector: `[d_in] -> [d_out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let xv = &self.vals[x.0];
        let wv = self.store.get(w);
        let bv = self.store.get(b);
        let d_out = wv.shape[0];
        let d_in = wv.shape[1];
        debug_assert_eq!(xv.len(), d_in);
        let mut out = vec![0.0; d_out];
        for o in 0..d_out {
            let row = &wv.data[o * d_in..(o + 1) * d_in];
            out[o] = bv.data[o]
                + row
                    .iter()
                    .zip(&xv.data)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![d_out], out), Saved::None)
    }

    /// Select one row of an embedding table (shape `[rows, dim]`).
    pub fn embed_row(&mut self, table: ParamId, row: usize) -> Var {
        let tv = self.store.get(table);
        let dim = tv.shape[1];
        let out = Tensor::new(vec![dim], tv.data[row * dim..(row + 1) * dim].to_vec());
        self.push(Op::EmbedRow { table, row }, out, Saved::None)
    }

    /// Multi-head attention across the slot axis, independently per pixel.
    /// `q`: `[Lq, C, H, W]`, `k`/`v`: `[Lk, C, H, W]`; output `[Lq, C, H, W]`.
    pub fn seq_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (&self.vals[q.0], &self.vals[k.0], &self.vals[v.0]);
        let (lq, c, h, w) = qv.dims4();
        let (lk, ck, hk, wk) = kv.dims4();
        debug_assert_eq!((c, h, w), (ck, hk, wk));
        debug_assert_eq!(kv.shape, vv.shape);
        debug_assert_eq!(c % heads, 0);
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plane = h * w;
        // Pixel-major working copies keep the per-pixel vectors contiguous.
        let qt = to_pixel_major(&qv.data, lq, c, plane);
        let kt = to_pixel_major(&kv.data, lk, c, plane);
        let vt = to_pixel_major(&vv.data, lk, c, plane);
        let mut ot = vec![0.0; lq * c * plane];
        let mut attn = vec![0.0; plane * heads * lq * lk];
        let mut scores = vec![0.0; lk];
        for p in 0..plane {
            for hd in 0..heads {
                let hoff = hd * dh;
                for a in 0..lq {
                    let qrow = &qt[(p * lq + a) * c + hoff..(p * lq + a) * c + hoff + dh];
                    let mut maxs = f64::NEG_INFINITY;
                    for (b, s) in scores.iter_mut().enumerate() {
                        let krow = &kt[(p * lk + b) * c + hoff..(p * lk + b) * c + hoff + dh];
                        let acc: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        *s = acc * scale;
                        maxs = maxs.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - maxs).exp();
                        z += *s;
                    }
                    let base = ((p * heads + hd) * lq + a) * lk;
                    let orow = &mut ot[(p * lq + a) * c + hoff..(p * lq + a) * c + hoff + dh];
                    let inv_z = 1.0 / z;
                    for (b, s) in scores.iter().enumerate() {
                        let weight = s * inv_z;
                        attn[base + b] = weight;
                        let vrow = &vt[(p * lk + b) * c + hoff..(p * lk + b) * c + hoff + dh];
                        for (o, vv_) in orow.iter_mut().zip(vrow) {
                            *o += weight * vv_;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![lq, c, h, w], from_pixel_major(&ot, lq, c, plane));
        self.push(Op::SeqAttention { q, k, v, heads }, out, Saved::Attn(attn))
    }

    /// Windowed spatial attention: each pixel attends to the valid pixels of
    /// its `(2n+1) x (2n+1)` Chebyshev window (wrapped in `Pad::Wrap` mode).
    /// `q`/`k`/`v`: `[B, C, H, W]`.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        radius: usize,
        heads: usize,
        pad: Pad,
    ) -> Var {
        let (qv, kv, vv) = (&self.vals[q.0], &self.vals[k.0], &self.vals[v.0]);
        let (b, c, h, w) = qv.dims4();
        debug_assert_eq!(qv.shape, kv.shape);
        debug_assert_eq!(qv.shape, vv.shape);
        debug_assert_eq!(c % heads, 0);
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plane = h * w;
        let side = 2 * radius + 1;
        let wsz = side * side;
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        let mut attn = vec![0.0; b * plane * heads * wsz];
        let mut scores = vec![0.0; wsz];
        let mut neigh = vec![usize::MAX; wsz];
        for s in 0..b {
            // Pixel-major slot views keep per-pixel vectors contiguous.
            let qt = to_pixel_major(&qv.data[s * c * plane..(s + 1) * c * plane], 1, c, plane);
            let kt = to_pixel_major(&kv.data[s * c * plane..(s + 1) * c * plane], 1, c, plane);
            let vt = to_pixel_major(&vv.data[s * c * plane..(s + 1) * c * plane], 1, c, plane);
            let mut ot = vec![0.0; c * plane];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let count = gather_window(y, x, h, w, radius, pad, &mut neigh);
                    for hd in 0..heads {
                        let hoff = hd * dh;
                        let qrow = &qt[p * c + hoff..p * c + hoff + dh];
                        let mut maxs = f64::NEG_INFINITY;
                        for (i, s_) in scores[..count].iter_mut().enumerate() {
                            let krow = &kt[neigh[i] * c + hoff..neigh[i] * c + hoff + dh];
                            let acc: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                            *s_ = acc * scale;
                            maxs = maxs.max(*s_);
                        }
                        let mut z = 0.0;
                        for s_ in &mut scores[..count] {
                            *s_ = (*s_ - maxs).exp();
                            z += *s_;
                        }
                        let base = ((s * plane + p) * heads + hd) * wsz;
                        let (head_out, weights) = (
                            &mut ot[p * c + hoff..p * c + hoff + dh],
                            &mut attn[base..base + count],
                        );
                        let inv_z = 1.0 / z;
                        for (i, wslot) in weights.iter_mut().enumerate() {
                            let weight = scores[i] * inv_z;
                            *wslot = weight;
                            let vrow = &vt[neigh[i] * c + hoff..neigh[i] * c + hoff + dh];
                            for (o, vv_) in head_out.iter_mut().zip(vrow) {
                                *o += weight * vv_;
                            }
                        }
                    }
                }
            }
            out.data[s * c * plane..(s + 1) * c * plane]
                .copy_from_slice(&from_pixel_major(&ot, 1, c, plane));
        }
        self.push(
            Op::WindowAttention { q, k, v, radius, heads, pad },
            out,
            Saved::Attn(attn),
        )
    }

    pub fn relu_shift(&mut self, x: Var, alpha: f64) -> Var {
        let xv = &self.vals[x.0];
        let out = Tensor::new(
            xv.shape.clone(),
            xv.data.iter().map(|&v| (v - alpha).max(0.0)).collect(),
        );
        self.push(Op::ReluShift { x, alpha }, out, Saved::None)
    }

    /// `x^e` on nonnegative input; the subgradient at 0 is taken as 0.
    pub fn pow_nonneg(&mut self, x: Var, e: f64) -> Var {
        let xv = &self.vals[x.0];
        let out = Tensor::new(
            xv.shape.clone(),
            xv.data.iter().map(|&v| if v > 0.0 { v.powf(e) } else { 0.0 }).collect(),
        );
        self.push(Op::PowNonneg { x, e }, out, Saved::None)
    }

    /// Multiply everything by `target / sum(x)`. The caller checks for a zero
    /// sum beforehand (fallback path stays outside the graph).
    pub fn mass_rescale(&mut self, x: Var, target: f64) -> Var {
        let xv = &self.vals[x.0];
        let sum: f64 = xv.data.iter().sum();
        debug_assert!(sum != 0.0, "mass_rescale needs a nonzero sum");
        let rho = target / sum;
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| rho * v).collect());
        self.push(Op::MassRescale { x, target }, out, Saved::None)
    }

    /// Scalar node: sum of squared differences against a constant target.
    pub fn sq_diff_sum(&mut self, x: Var, target: &Tensor) -> Var {
        let xv = &self.vals[x.0];
        debug_assert_eq!(xv.shape, target.shape);
        let loss: f64 = xv
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Op::SqDiffSum { x },
            Tensor::scalar(loss),
            Saved::Target(target.clone()),
        )
    }

    /// Reverse pass from a scalar loss; returns one gradient per parameter
    /// (None when the parameter never entered the graph).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.vals[loss.0].len() != 1 {
            return Err(CoreError::InvalidValue("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.store.len()];

        macro_rules! grad_buf {
            ($grads:expr, $v:expr, $n:expr) => {
                $grads[$v.0].get_or_insert_with(|| vec![0.0; $n])
            };
        }

        for idx in (0..self.ops.len()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let op = self.ops[idx].clone();
            match op {
                Op::Input => {}
                Op::Param(pid) => {
                    let t = param_grads[pid].get_or_insert_with(|| {
                        Tensor::zeros(self.store.get(pid).shape.clone())
                    });
                    for (g, v) in t.data.iter_mut().zip(&gy) {
                        *g += v;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let gyt = Tensor::new(self.vals[idx].shape.clone(), gy);
                    let (dx, dw, db) = conv2d_backward(
                        &self.vals[x.0],
                        self.store.get(w),
                        stride,
                        pad,
                        &gyt,
                    );
                    accumulate(grad_buf!(grads, x, dx.len()), &dx.data);
                    add_param_grad(&mut param_grads, self.store, w, dw);
                    add_param_grad(&mut param_grads, self.store, b, db);
                }
                Op::GroupNorm { x, gamma, beta, groups } => {
                    let Saved::GnStats { mean, inv_std } = &self.saved[idx] else {
                        unreachable!()
                    };
                    let (dx, dgamma, dbeta) = group_norm_backward(
                        &self.vals[x.0],
                        self.store.get(gamma),
                        groups,
                        mean,
                        inv_std,
                        &gy,
                    );
                    accumulate(grad_buf!(grads, x, dx.len()), &dx);
                    add_param_grad(&mut param_grads, self.store, gamma, Tensor::new(self.store.get(gamma).shape.clone(), dgamma));
                    add_param_grad(&mut param_grads, self.store, beta, Tensor::new(self.store.get(beta).shape.clone(), dbeta));
                }
                Op::Silu { x } => {
                    let xv = &self.vals[x.0];
                    let gx = grad_buf!(grads, x, xv.len());
                    for i in 0..xv.len() {
                        let s = sigmoid(xv.data[i]);
                        gx[i] += gy[i] * s * (1.0 + xv.data[i] * (1.0 - s));
                    }
                }
                Op::Add { a, b } => {
                    accumulate(grad_buf!(grads, a, gy.len()), &gy);
                    accumulate(grad_buf!(grads, b, gy.len()), &gy);
                }
                Op::Scale { x, c } => {
                    let gx = grad_buf!(grads, x, gy.len());
                    for (g, v) in gx.iter_mut().zip(&gy) {
                        *g += c * v;
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (ba, ca, h, w) = self.vals[a.0].dims4();
                    let cb = self.vals[b.0].dims4().1;
                    let plane = h * w;
                    {
                        let ga = grad_buf!(grads, a, ba * ca * plane);
                        for s in 0..ba {
                            let src = &gy[s * (ca + cb) * plane..s * (ca + cb) * plane + ca * plane];
                            accumulate(&mut ga[s * ca * plane..(s + 1) * ca * plane], src);
                        }
                    }
                    let gb = grad_buf!(grads, b, ba * cb * plane);
                    for s in 0..ba {
                        let src =
                            &gy[s * (ca + cb) * plane + ca * plane..(s + 1) * (ca + cb) * plane];
                        accumulate(&mut gb[s * cb * plane..(s + 1) * cb * plane], src);
                    }
                }
                Op::SlotMean { x } => {
                    let (b, c, h, w) = self.vals[x.0].dims4();
                    let n = c * h * w;
                    let inv = 1.0 / b as f64;
                    let gx = grad_buf!(grads, x, b * n);
                    for s in 0..b {
                        for i in 0..n {
                            gx[s * n + i] += gy[i] * inv;
                        }
                    }
                }
                Op::SlotLast { x } => {
                    let (b, c, h, w) = self.vals[x.0].dims4();
                    let n = c * h * w;
                    let gx = grad_buf!(grads, x, b * n);
                    accumulate(&mut gx[(b - 1) * n..], &gy);
                }
                Op::UpsampleNearest { x, th, tw } => {
                    let (b, c, h, w) = self.vals[x.0].dims4();
                    let gx = grad_buf!(grads, x, b * c * h * w);
                    for s in 0..b {
                        for ch in 0..c {
                            let src = &gy[(s * c + ch) * th * tw..(s * c + ch + 1) * th * tw];
                            let dst = &mut gx[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                            for oy in 0..th {
                                let iy = oy * h / th;
                                for ox in 0..tw {
                                    dst[iy * w + ox * w / tw] += src[oy * tw + ox];
                                }
                            }
                        }
                    }
                }
                Op::AddChannelBias { x, bias } => {
                    let (b, c, h, w) = self.vals[x.0].dims4();
                    accumulate(grad_buf!(grads, x, gy.len()), &gy);
                    let gb = grad_buf!(grads, bias, c);
                    for s in 0..b {
                        for ch in 0..c {
                            let off = (s * c + ch) * h * w;
                            gb[ch] += gy[off..off + h * w].iter().sum::<f64>();
                        }
                    }
                }
                Op::AddSlotBias { x, bias } => {
                    let (b, c, h, w) = self.vals[x.0].dims4();
                    accumulate(grad_buf!(grads, x, gy.len()), &gy);
                    let mut gb = Tensor::zeros(vec![b, c]);
                    for s in 0..b {
                        for ch in 0..c {
                            let off = (s * c + ch) * h * w;
                            gb.data[s * c + ch] += gy[off..off + h * w].iter().sum::<f64>();
                        }
                    }
                    add_param_grad(&mut param_grads, self.store, bias, gb);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.vals[x.0];
                    let wv = self.store.get(w);
                    let (d_out, d_in) = (wv.shape[0], wv.shape[1]);
                    let mut dw = Tensor::zeros(wv.shape.clone());
                    let mut db = Tensor::zeros(vec![d_out]);
                    {
                        let gx = grad_buf!(grads, x, d_in);
                        for o in 0..d_out {
                            let g = gy[o];
                            db.data[o] += g;
                            let row = &wv.data[o * d_in..(o + 1) * d_in];
                            for i in 0..d_in {
                                gx[i] += g * row[i];
                                dw.data[o * d_in + i] += g * xv.data[i];
                            }
                        }
                    }
                    add_param_grad(&mut param_grads, self.store, w, dw);
                    add_param_grad(&mut param_grads, self.store, b, db);
                }
                Op::EmbedRow { table, row } => {
                    let tv = self.store.get(table);
                    let dim = tv.shape[1];
                    let mut dt = Tensor::zeros(tv.shape.clone());
                    accumulate(&mut dt.data[row * dim..(row + 1) * dim], &gy);
                    add_param_grad(&mut param_grads, self.store, table, dt);
                }
                Op::SeqAttention { q, k, v, heads } => {
                    let Saved::Attn(attn) = &self.saved[idx] else { unreachable!() };
                    let (dq, dk, dv) = seq_attention_backward(
                        &self.vals[q.0],
                        &self.vals[k.0],
                        &self.vals[v.0],
                        heads,
                        attn,
                        &gy,
                    );
                    accumulate(grad_buf!(grads, q, dq.len()), &dq);
                    accumulate(grad_buf!(grads, k, dk.len()), &dk);
                    accumulate(grad_buf!(grads, v, dv.len()), &dv);
                }
                Op::WindowAttention { q, k, v, radius, heads, pad } => {
                    let Saved::Attn(attn) = &self.saved[idx] else { unreachable!() };
                    let (dq, dk, dv) = window_attention_backward(
                        &self.vals[q.0],
                        &self.vals[k.0],
                        &self.vals[v.0],
                        radius,
                        heads,
                        pad,
                        attn,
                        &gy,
                    );
                    accumulate(grad_buf!(grads, q, dq.len()), &dq);
                    accumulate(grad_buf!(grads, k, dk.len()), &dk);
                    accumulate(grad_buf!(grads, v, dv.len()), &dv);
                }
                Op::ReluShift { x, alpha } => {
                    let xv = &self.vals[x.0];
                    let gx = grad_buf!(grads, x, xv.len());
                    for i in 0..xv.len() {
                        if xv.data[i] > alpha {
                            gx[i] += gy[i];
                        }
                    }
                }
                Op::PowNonneg { x, e } => {
                    let xv = &self.vals[x.0];
                    let gx = grad_buf!(grads, x, xv.len());
                    for i in 0..xv.len() {
                        if xv.data[i] > 0.0 {
                            gx[i] += gy[i] * e * xv.data[i].powf(e - 1.0);
                        }
                    }
                }
                Op::MassRescale { x, target } => {
                    let xv = &self.vals[x.0];
                    let sum: f64 = xv.data.iter().sum();
                    let rho = target / sum;
                    let dot: f64 = gy.iter().zip(&xv.data).map(|(g, v)| g * v).sum();
                    let correction = dot * target / (sum * sum);
                    let gx = grad_buf!(grads, x, xv.len());
                    for i in 0..xv.len() {
                        gx[i] += rho * gy[i] - correction;
                    }
                }
                Op::SqDiffSum { x } => {
                    let Saved::Target(target) = &self.saved[idx] else { unreachable!() };
                    let xv = &self.vals[x.0];
                    let g = gy[0];
                    let gx = grad_buf!(grads, x, xv.len());
                    for i in 0..xv.len() {
                        gx[i] += 2.0 * g * (xv.data[i] - target.data[i]);
                    }
                }
            }
        }
        Ok(param_grads)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[L, C, plane]` channel-major to `[plane, L, C]` pixel-major.
fn to_pixel_major(data: &[f64], slots: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; slots * c * plane];
    for a in 0..slots {
        for ch in 0..c {
            let src = &data[(a * c + ch) * plane..(a * c + ch + 1) * plane];
            let base = a * c + ch;
            for (p, &v) in src.iter().enumerate() {
                out[p * slots * c + base] = v;
            }
        }
    }
    out
}

/// Inverse of `to_pixel_major`.
fn from_pixel_major(data: &[f64], slots: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; slots * c * plane];
    for a in 0..slots {
        for ch in 0..c {
            let dst = &mut out[(a * c + ch) * plane..(a * c + ch + 1) * plane];
            let base = a * c + ch;
            for (p, o) in dst.iter_mut().enumerate() {
                *o = data[p * slots * c + base];
            }
        }
    }
    out
}

/// Collect the in-bounds (or wrapped) window neighbors of `(y, x)`.
fn gather_window(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    radius: usize,
    pad: Pad,
    neigh: &mut [usize],
) -> usize {
    let r = radius as isize;
    let mut count = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            let (ny, nx) = match pad {
                Pad::Zero => {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    (ny as usize, nx as usize)
                }
                Pad::Wrap => (wrap_idx(y as isize + dy, h), wrap_idx(x as isize + dx, w)),
            };
            neigh[count] = ny * w + nx;
            count += 1;
        }
    }
    count
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_param_grad(
    param_grads: &mut [Option<Tensor>],
    store: &ParamStore,
    id: ParamId,
    g: Tensor,
) {
    match &mut param_grads[id] {
        Some(t) => accumulate(&mut t.data, &g.data),
        None => {
            debug_assert_eq!(store.get(id).shape, g.shape);
            param_grads[id] = Some(g);
        }
    }
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Direct convolution. `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin, k, k]`,
/// `b`: `[Cout]`. Padding is `k/2` (same-size output at stride 1).
fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: Pad) -> Tensor {
    let (bs, cin, h, wd) = x.dims4();
    let (cout, cin_w, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    debug_assert_eq!(cin, cin_w);
    let p = kh / 2;
    let (oh, ow) = (conv_out_len(h, kh, stride, p), conv_out_len(wd, kw, stride, p));
    let mut out = Tensor::zeros(vec![bs, cout, oh, ow]);
    // Single-pass fused path for the common 3x3 stride-1 case: all nine taps
    // applied per interior output element, boundary ring handled generically.
    if stride == 1 && kh == 3 && kw == 3 && pad == Pad::Zero && h >= 2 && wd >= 2 {
        for s in 0..bs {
            for co in 0..cout {
                let oc = &mut out.data[(s * cout + co) * oh * ow..(s * cout + co + 1) * oh * ow];
                for v in oc.iter_mut() {
                    *v = b.data[co];
                }
                for ci in 0..cin {
                    let xc = &x.data[(s * cin + ci) * h * wd..(s * cin + ci + 1) * h * wd];
                    let k9 = &w.data[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                    for oy in 1..oh - 1 {
                        let x0 = &xc[(oy - 1) * wd..oy * wd];
                        let x1 = &xc[oy * wd..(oy + 1) * wd];
                        let x2 = &xc[(oy + 1) * wd..(oy + 2) * wd];
                        let orow = &mut oc[oy * ow + 1..(oy + 1) * ow - 1];
                        for (o, ((a, b), cc)) in orow
                            .iter_mut()
                            .zip(x0.windows(3).zip(x1.windows(3)).zip(x2.windows(3)))
                        {
                            *o += k9[0] * a[0]
                                + k9[1] * a[1]
                                + k9[2] * a[2]
                                + k9[3] * b[0]
                                + k9[4] * b[1]
                                + k9[5] * b[2]
                                + k9[6] * cc[0]
                                + k9[7] * cc[1]
                                + k9[8] * cc[2];
                        }
                    }
                    // Boundary ring.
                    let mut edge = |oy: usize, ox: usize| {
                        let mut acc = 0.0;
                        for ky in 0..3usize {
                            let iy = oy + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = ox + kx;
                                if ix < 1 || ix > wd {
                                    continue;
                                }
                                acc += k9[ky * 3 + kx] * xc[(iy - 1) * wd + ix - 1];
                            }
                        }
                        oc[oy * ow + ox] += acc;
                    };
                    for ox in 0..ow {
                        edge(0, ox);
                        edge(oh - 1, ox);
                    }
                    for oy in 1..oh - 1 {
                        edge(oy, 0);
                        edge(oy, ow - 1);
                    }
                }
            }
        }
        return out;
    }
    for s in 0..bs {
        for co in 0..cout {
            let oc = &mut out.data[(s * cout + co) * oh * ow..(s * cout + co + 1) * oh * ow];
            for v in oc.iter_mut() {
                *v = b.data[co];
            }
            for ci in 0..cin {
                let xc = &x.data[(s * cin + ci) * h * wd..(s * cin + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        match pad {
                            Pad::Zero => {
                                // Valid output ranges where the tap stays in bounds.
                                let oy0 = oy_lower(ky, p, stride);
                                let oy1 = oy_upper(h, ky, p, stride, oh);
                                let ox0 = oy_lower(kx, p, stride);
                                let ox1 = oy_upper(wd, kx, p, stride, ow);
                                if ox1 <= ox0 {
                                    continue;
                                }
                                for oy in oy0..oy1 {
                                    let iy = oy * stride + ky - p;
                                    let orow = &mut oc[oy * ow + ox0..oy * ow + ox1];
                                    if stride == 1 {
                                        let ix0 = ox0 + kx - p;
                                        let xrow = &xc[iy * wd + ix0..iy * wd + ix0 + (ox1 - ox0)];
                                        for (o, x) in orow.iter_mut().zip(xrow) {
                                            *o += wv * x;
                                        }
                                    } else {
                                        let xrow = &xc[iy * wd..iy * wd + wd];
                                        for (i, o) in orow.iter_mut().enumerate() {
                                            *o += wv * xrow[(ox0 + i) * stride + kx - p];
                                        }
                                    }
                                }
                            }
                            Pad::Wrap => {
                                for oy in 0..oh {
                                    let iy = wrap_idx((oy * stride + ky) as isize - p as isize, h);
                                    for ox in 0..ow {
                                        let ix =
                                            wrap_idx((ox * stride + kx) as isize - p as isize, wd);
                                        oc[oy * ow + ox] += wv * xc[iy * wd + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// Smallest oy with oy*stride + k - p >= 0.
fn oy_lower(k: usize, p: usize, stride: usize) -> usize {
    if k >= p {
        0
    } else {
        (p - k).div_ceil(stride)
    }
}

// One past the largest oy with oy*stride + k - p < n, clamped to oh.
fn oy_upper(n: usize, k: usize, p: usize, stride: usize, oh: usize) -> usize {
    let limit = n + p - k; // oy*stride < limit
    let max = limit.div_ceil(stride);
    max.min(oh)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: Pad,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (bs, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let p = kh / 2;
    let (_, _, oh, ow) = gy.dims4();
    let mut dx = Tensor::zeros(x.shape.clone());
    let mut dw = Tensor::zeros(w.shape.clone());
    let mut db = Tensor::zeros(vec![cout]);
    for s in 0..bs {
        for co in 0..cout {
            let gc = &gy.data[(s * cout + co) * oh * ow..(s * cout + co + 1) * oh * ow];
            db.data[co] += gc.iter().sum::<f64>();
            for ci in 0..cin {
                let xc = &x.data[(s * cin + ci) * h * wd..(s * cin + ci + 1) * h * wd];
                let dxc_off = (s * cin + ci) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = w.data[widx];
                        let mut wgrad = 0.0;
                        match pad {
                            Pad::Zero => {
                                let oy0 = oy_lower(ky, p, stride);
                                let oy1 = oy_upper(h, ky, p, stride, oh);
                                let ox0 = oy_lower(kx, p, stride);
                                let ox1 = oy_upper(wd, kx, p, stride, ow);
                                if ox1 <= ox0 {
                                    continue;
                                }
                                for oy in oy0..oy1 {
                                    let iy = oy * stride + ky - p;
                                    let grow = &gc[oy * ow + ox0..oy * ow + ox1];
                                    if stride == 1 {
                                        let ix0 = ox0 + kx - p;
                                        let n = ox1 - ox0;
                                        let xrow = &xc[iy * wd + ix0..iy * wd + ix0 + n];
                                        let dxrow = &mut dx.data
                                            [dxc_off + iy * wd + ix0..dxc_off + iy * wd + ix0 + n];
                                        for ((g, x), d) in
                                            grow.iter().zip(xrow).zip(dxrow.iter_mut())
                                        {
                                            wgrad += g * x;
                                            *d += g * wv;
                                        }
                                    } else {
                                        let xrow = &xc[iy * wd..iy * wd + wd];
                                        let dxrow = &mut dx.data
                                            [dxc_off + iy * wd..dxc_off + iy * wd + wd];
                                        for (i, g) in grow.iter().enumerate() {
                                            let ix = (ox0 + i) * stride + kx - p;
                                            wgrad += g * xrow[ix];
                                            dxrow[ix] += g * wv;
                                        }
                                    }
                                }
                            }
                            Pad::Wrap => {
                                for oy in 0..oh {
                                    let iy = wrap_idx((oy * stride + ky) as isize - p as isize, h);
                                    for ox in 0..ow {
                                        let ix =
                                            wrap_idx((ox * stride + kx) as isize - p as isize, wd);
                                        let g = gc[oy * ow + ox];
                                        wgrad += g * xc[iy * wd + ix];
                                        dx.data[dxc_off + iy * wd + ix] += g * wv;
                                    }
                                }
                            }
                        }
                        dw.data[widx] += wgrad;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (bs, c, h, w) = x.dims4();
    debug_assert_eq!(c % groups, 0);
    let cg = c / groups;
    let n = cg * h * w;
    let mut out = Tensor::zeros(x.shape.clone());
    let mut means = Vec::with_capacity(bs * groups);
    let mut inv_stds = Vec::with_capacity(bs * groups);
    for s in 0..bs {
        for g in 0..groups {
            let off = (s * c + g * cg) * h * w;
            let xs = &x.data[off..off + n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + GN_EPS).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for lc in 0..cg {
                let ch = g * cg + lc;
                let (ga, be) = (gamma.data[ch], beta.data[ch]);
                let coff = off + lc * h * w;
                for i in 0..h * w {
                    out.data[coff + i] = (x.data[coff + i] - mean) * inv_std * ga + be;
                }
            }
        }
    }
    (out, means, inv_stds)
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    means: &[f64],
    inv_stds: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (bs, c, h, w) = x.dims4();
    let cg = c / groups;
    let n = cg * h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..bs {
        for g in 0..groups {
            let off = (s * c + g * cg) * h * w;
            let mean = means[s * groups + g];
            let inv_std = inv_stds[s * groups + g];
            // Per-group reductions of gy*gamma and gy*gamma*xhat.
            let mut sum_gg = 0.0;
            let mut sum_ggx = 0.0;
            for lc in 0..cg {
                let ch = g * cg + lc;
                let ga = gamma.data[ch];
                let coff = off + lc * h * w;
                for i in 0..h * w {
                    let xhat = (x.data[coff + i] - mean) * inv_std;
                    let gyv = gy[coff + i];
                    dgamma[ch] += gyv * xhat;
                    dbeta[ch] += gyv;
                    sum_gg += gyv * ga;
                    sum_ggx += gyv * ga * xhat;
                }
            }
            let inv_n = 1.0 / n as f64;
            for lc in 0..cg {
                let ch = g * cg + lc;
                let ga = gamma.data[ch];
                let coff = off + lc * h * w;
                for i in 0..h * w {
                    let xhat = (x.data[coff + i] - mean) * inv_std;
                    dx[coff + i] = inv_std
                        * (gy[coff + i] * ga - inv_n * sum_gg - xhat * inv_n * sum_ggx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn seq_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    attn: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (lq, c, h, w) = q.dims4();
    let lk = k.dims4().0;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let plane = h * w;
    let qt = to_pixel_major(&q.data, lq, c, plane);
    let kt = to_pixel_major(&k.data, lk, c, plane);
    let vt = to_pixel_major(&v.data, lk, c, plane);
    let gt = to_pixel_major(gy, lq, c, plane);
    let mut dqt = vec![0.0; q.len()];
    let mut dkt = vec![0.0; k.len()];
    let mut dvt = vec![0.0; v.len()];
    let mut d_attn = vec![0.0; lk];
    for p in 0..plane {
        for hd in 0..heads {
            let hoff = hd * dh;
            for a in 0..lq {
                let base = ((p * heads + hd) * lq + a) * lk;
                let weights = &attn[base..base + lk];
                let grow = &gt[(p * lq + a) * c + hoff..(p * lq + a) * c + hoff + dh];
                // dV and dA.
                for (b, da) in d_attn.iter_mut().enumerate() {
                    let voff = (p * lk + b) * c + hoff;
                    let vrow = &vt[voff..voff + dh];
                    let dvrow = &mut dvt[voff..voff + dh];
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += grow[d] * vrow[d];
                        dvrow[d] += weights[b] * grow[d];
                    }
                    *da = acc;
                }
                // Softmax jacobian: dS = A (dA - <dA, A>).
                let dot: f64 = d_attn.iter().zip(weights).map(|(da, wt)| da * wt).sum();
                let qoff = (p * lq + a) * c + hoff;
                for b in 0..lk {
                    let ds = weights[b] * (d_attn[b] - dot) * scale;
                    let koff = (p * lk + b) * c + hoff;
                    for d in 0..dh {
                        dqt[qoff + d] += ds * kt[koff + d];
                        dkt[koff + d] += ds * qt[qoff + d];
                    }
                }
            }
        }
    }
    (
        from_pixel_major(&dqt, lq, c, plane),
        from_pixel_major(&dkt, lk, c, plane),
        from_pixel_major(&dvt, lk, c, plane),
    )
}

#[allow(clippy::too_many_arguments)]
fn window_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    radius: usize,
    heads: usize,
    pad: Pad,
    attn: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (bs, c, h, w) = q.dims4();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let plane = h * w;
    let side = 2 * radius + 1;
    let wsz = side * side;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut neigh = vec![usize::MAX; wsz];
    let mut d_attn = vec![0.0; wsz];
    for s in 0..bs {
        let span = s * c * plane..(s + 1) * c * plane;
        let qt = to_pixel_major(&q.data[span.clone()], 1, c, plane);
        let kt = to_pixel_major(&k.data[span.clone()], 1, c, plane);
        let vt = to_pixel_major(&v.data[span.clone()], 1, c, plane);
        let gt = to_pixel_major(&gy[span.clone()], 1, c, plane);
        let mut dqt = vec![0.0; c * plane];
        let mut dkt = vec![0.0; c * plane];
        let mut dvt = vec![0.0; c * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let count = gather_window(y, x, h, w, radius, pad, &mut neigh);
                for hd in 0..heads {
                    let hoff = hd * dh;
                    let base = ((s * plane + p) * heads + hd) * wsz;
                    let weights = &attn[base..base + count];
                    let grow = &gt[p * c + hoff..p * c + hoff + dh];
                    for i in 0..count {
                        let noff = neigh[i] * c + hoff;
                        let vrow = &vt[noff..noff + dh];
                        let dvrow = &mut dvt[noff..noff + dh];
                        let mut acc = 0.0;
                        for d in 0..dh {
                            acc += grow[d] * vrow[d];
                            dvrow[d] += weights[i] * grow[d];
                        }
                        d_attn[i] = acc;
                    }
                    let dot: f64 =
                        d_attn[..count].iter().zip(weights).map(|(da, wt)| da * wt).sum();
                    let qoff = p * c + hoff;
                    for i in 0..count {
                        let noff = neigh[i] * c + hoff;
                        let ds = weights[i] * (d_attn[i] - dot) * scale;
                        for d in 0..dh {
                            dqt[qoff + d] += ds * kt[noff + d];
                            dkt[noff + d] += ds * qt[qoff + d];
                        }
                    }
                }
            }
        }
        dq[span.clone()].copy_from_slice(&from_pixel_major(&dqt, 1, c, plane));
        dk[span.clone()].copy_from_slice(&from_pixel_major(&dkt, 1, c, plane));
        dv[span].copy_from_slice(&from_pixel_major(&dvt, 1, c, plane));
    }
    (dq, dk, dv)
}

/// Central finite-difference gradient checking against the autodiff pass.
///
/// `loss` builds the scalar loss on a fresh graph; it is re-run for each
/// probe. Up to `coords_per_param` randomly chosen coordinates of every
/// parameter are checked. Each coordinate is probed at every step in
/// `steps` and scored by its best agreement: a correct gradient passes at
/// whichever step balances truncation against roundoff, while a systematic
/// autodiff error fails at all of them. Returns the worst relative error
/// and the coordinate it occurred at.
pub fn finite_difference_check(
    store: &mut ParamStore,
    loss: impl Fn(&ParamStore, &mut Graph) -> Var,
    steps: &[f64],
    coords_per_param: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, String)> {
    use rand::Rng;
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(store, &mut g);
        if g.value(l).len() != 1 {
            return Err(CoreError::InvalidValue("loss must be scalar".into()));
        }
        g.backward(l)?
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(store);
        let l = loss(store, &mut g);
        g.value(l).data[0]
    };
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for id in 0..store.len() {
        let n = store.get(id).len();
        for _ in 0..coords_per_param.min(n) {
            let i = rng.gen_range(0..n);
            let orig = store.get(id).data[i];
            let ad = grads[id].as_ref().map(|t| t.data[i]).unwrap_or(0.0);
            let mut err = f64::INFINITY;
            let mut detail = String::new();
            for &step in steps {
                store.get_mut(id).data[i] = orig + step;
                let up = eval(store);
                store.get_mut(id).data[i] = orig - step;
                let down = eval(store);
                store.get_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * step);
                let denom = ad.abs().max(fd.abs()).max(1e-4);
                let e = (ad - fd).abs() / denom;
                if e < err {
                    err = e;
                    detail = format!("{}[{i}] ad={ad} fd={fd} step={step}", store.name(id));
                }
            }
            if err > worst {
                worst = err;
                worst_at = detail;
            }
        }
    }
    Ok((worst, worst_at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_vec, stream, StreamKind};
    use rand::Rng;

    fn randn(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, standard_normal_vec(rng, n))
    }

    /// Generic finite-difference check for a loss built by `f` over the
    /// parameters in `store`.
    fn fd_check(
        store: &mut ParamStore,
        f: impl Fn(&ParamStore, &mut Graph) -> Var,
        step: f64,
        tol: f64,
        seed: u64,
    ) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(store, &mut g);
            assert_eq!(g.value(loss).len(), 1);
            g.backward(loss).unwrap()
        };
        let mut rng = stream(seed, StreamKind::Test, &[]);
        let mut worst = (0.0f64, String::new());
        for id in 0..store.len() {
            let n = store.get(id).len();
            for _ in 0..4.min(n) {
                let i = rng.gen_range(0..n);
                let orig = store.get(id).data[i];
                store.get_mut(id).data[i] = orig + step;
                let up = {
                    let mut g = Graph::new(store);
                    let l = f(store, &mut g);
                    g.value(l).data[0]
                };
                store.get_mut(id).data[i] = orig - step;
                let down = {
                    let mut g = Graph::new(store);
                    let l = f(store, &mut g);
                    g.value(l).data[0]
                };
                store.get_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * step);
                let ad = grads[id].as_ref().map(|t| t.data[i]).unwrap_or(0.0);
                let denom = ad.abs().max(fd.abs()).max(1e-6);
                let err = (ad - fd).abs() / denom;
                if err > worst.0 {
                    worst = (err, format!("{}[{i}] ad={ad} fd={fd}", store.name(id)));
                }
            }
        }
        assert!(worst.0 < tol, "gradient mismatch: {} (err {})", worst.1, worst.0);
    }

    #[test]
    fn conv2d_stride1_matches_hand_result() {
        let mut store = ParamStore::new();
        // 1x1x3x3 input, identity-ish kernel.
        let w = store.add("w", Tensor::new(vec![1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]));
        let b = store.add("b", Tensor::new(vec![1], vec![0.5]));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        let y = g.conv2d(x, w, b, 1, Pad::Zero);
        let want: Vec<f64> = (1..=9).map(|v| 2.0 * f64::from(v) + 0.5).collect();
        assert_eq!(g.value(y).data, want);
    }

    #[test]
    fn conv2d_stride2_shapes() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, StreamKind::Test, &[]);
        let w = store.add("w", randn(vec![4, 3, 3, 3], &mut rng));
        let b = store.add("b", randn(vec![4], &mut rng));
        for (h, wd, oh, ow) in [(8, 8, 4, 4), (5, 7, 3, 4), (3, 3, 2, 2)] {
            let mut g = Graph::new(&store);
            let x = g.input(randn(vec![2, 3, h, wd], &mut rng));
            let y = g.conv2d(x, w, b, 2, Pad::Zero);
            assert_eq!(g.value(y).shape, vec![2, 4, oh, ow]);
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = stream(2, StreamKind::Test, &[]);
        for (stride, pad) in [(1, Pad::Zero), (2, Pad::Zero), (1, Pad::Wrap), (2, Pad::Wrap)] {
            let mut store = ParamStore::new();
            let w = store.add("w", randn(vec![3, 2, 3, 3], &mut rng));
            let b = store.add("b", randn(vec![3], &mut rng));
            let x = randn(vec![2, 2, 5, 6], &mut rng);
            let target = randn(vec![2, 3, if stride == 1 { 5 } else { 3 }, if stride == 1 { 6 } else { 3 }], &mut rng);
            fd_check(
                &mut store,
                move |_s, g| {
                    let xv = g.input(x.clone());
                    let y = g.conv2d(xv, w, b, stride, pad);
                    g.sq_diff_sum(y, &target)
                },
                1e-4,
                1e-6,
                3,
            );
        }
    }

    #[test]
    fn group_norm_normalizes_and_gradients() {
        let mut rng = stream(4, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", Tensor::new(vec![4], vec![1.0; 4]));
        let beta = store.add("beta", Tensor::new(vec![4], vec![0.0; 4]));
        let x = randn(vec![2, 4, 3, 3], &mut rng);
        {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = g.group_norm(xv, gamma, beta, 2);
            // Each (slot, group) block has near-zero mean and unit variance.
            let yv = g.value(y);
            for s in 0..2 {
                for grp in 0..2 {
                    let off = (s * 4 + grp * 2) * 9;
                    let xs = &yv.data[off..off + 18];
                    let mean = xs.iter().sum::<f64>() / 18.0;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 18.0;
                    assert!(mean.abs() < 1e-12);
                    assert!((var - 1.0).abs() < 1e-3);
                }
            }
        }
        let target = randn(vec![2, 4, 3, 3], &mut rng);
        // Random affine parameters for the gradient check.
        store.get_mut(gamma).data = standard_normal_vec(&mut rng, 4);
        store.get_mut(beta).data = standard_normal_vec(&mut rng, 4);
        fd_check(
            &mut store,
            move |_s, g| {
                let xv = g.input(x.clone());
                let y = g.group_norm(xv, gamma, beta, 2);
                g.sq_diff_sum(y, &target)
            },
            1e-4,
            1e-6,
            5,
        );
    }

    #[test]
    fn silu_and_elementwise_gradients() {
        let mut rng = stream(6, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        let w = store.add("w", randn(vec![2, 2, 1, 1], &mut rng));
        let b = store.add("b", randn(vec![2], &mut rng));
        let x = randn(vec![1, 2, 4, 4], &mut rng);
        let target = randn(vec![1, 2, 4, 4], &mut rng);
        fd_check(
            &mut store,
            move |_s, g| {
                let xv = g.input(x.clone());
                let y = g.conv2d(xv, w, b, 1, Pad::Zero);
                let y = g.silu(y);
                let y2 = g.scale(y, 1.7);
                let y3 = g.add(y, y2);
                g.sq_diff_sum(y3, &target)
            },
            1e-4,
            1e-6,
            7,
        );
    }

    #[test]
    fn seq_attention_single_key_is_value() {
        // Lq = Lk = 1: softmax over one key is 1, output equals v.
        let mut rng = stream(8, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.input(randn(vec![1, 4, 2, 2], &mut rng));
        let k = g.input(randn(vec![1, 4, 2, 2], &mut rng));
        let vt = randn(vec![1, 4, 2, 2], &mut rng);
        let v = g.input(vt.clone());
        let y = g.seq_attention(q, k, v, 2);
        assert_eq!(g.value(y).data, vt.data);
    }

    #[test]
    fn seq_attention_uniform_inputs_average() {
        // Equal keys => uniform weights 1/L: output is the mean of values.
        let mut rng = stream(9, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = 3;
        let one = randn(vec![1, 4, 2, 2], &mut rng);
        let rep = Tensor::new(vec![l, 4, 2, 2], one.data.repeat(l));
        let q = g.input(rep.clone());
        let k = g.input(rep.clone());
        let vt = randn(vec![l, 4, 2, 2], &mut rng);
        let v = g.input(vt.clone());
        let y = g.seq_attention(q, k, v, 2);
        let n = 4 * 2 * 2;
        for i in 0..n {
            let want = (0..l).map(|s| vt.data[s * n + i]).sum::<f64>() / l as f64;
            for a in 0..l {
                assert!((g.value(y).data[a * n + i] - want).abs() < 1e-12);
            }
        }
    }

    /// Dense per-pixel softmax attention oracle, independent layout and math.
    fn dense_attention_oracle(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
    ) -> Vec<f64> {
        let (lq, c, h, w) = q.dims4();
        let lk = k.dims4().0;
        let dh = c / heads;
        let mut out = vec![0.0; lq * c * h * w];
        for y in 0..h {
            for x in 0..w {
                for hd in 0..heads {
                    for a in 0..lq {
                        let qvec: Vec<f64> = (0..dh)
                            .map(|d| q.data[((a * c + hd * dh + d) * h + y) * w + x])
                            .collect();
                        let mut weights: Vec<f64> = (0..lk)
                            .map(|b| {
                                let dot: f64 = (0..dh)
                                    .map(|d| {
                                        qvec[d] * k.data[((b * c + hd * dh + d) * h + y) * w + x]
                                    })
                                    .sum();
                                (dot / (dh as f64).sqrt()).exp()
                            })
                            .collect();
                        let z: f64 = weights.iter().sum();
                        for wt in &mut weights {
                            *wt /= z;
                        }
                        for d in 0..dh {
                            let mut acc = 0.0;
                            for b in 0..lk {
                                acc += weights[b]
                                    * v.data[((b * c + hd * dh + d) * h + y) * w + x];
                            }
                            out[((a * c + hd * dh + d) * h + y) * w + x] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn seq_attention_matches_dense_oracle() {
        let mut rng = stream(10, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (l, c, h, w) = (3, 2, 2, 2);
        let qt = randn(vec![l, c, h, w], &mut rng);
        let kt = randn(vec![l, c, h, w], &mut rng);
        let vt = randn(vec![l, c, h, w], &mut rng);
        let q = g.input(qt.clone());
        let k = g.input(kt.clone());
        let v = g.input(vt.clone());
        let y = g.seq_attention(q, k, v, 1);
        let want = dense_attention_oracle(&qt, &kt, &vt, 1);
        for (a, b) in g.value(y).data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_attention_matches_dense_oracle_on_4x4() {
        // Lq = 1 against an L-slot context reduces to the same dense oracle.
        let mut rng = stream(11, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (c, h, w) = (4, 4, 4);
        let qt = randn(vec![1, c, h, w], &mut rng);
        let kt = randn(vec![5, c, h, w], &mut rng);
        let vt = randn(vec![5, c, h, w], &mut rng);
        let q = g.input(qt.clone());
        let k = g.input(kt.clone());
        let v = g.input(vt.clone());
        let y = g.seq_attention(q, k, v, 2);
        let want = dense_attention_oracle(&qt, &kt, &vt, 2);
        for (a, b) in g.value(y).data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn seq_attention_gradients() {
        let mut rng = stream(12, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        let wq = store.add("wq", randn(vec![4, 4, 1, 1], &mut rng));
        let bq = store.add("bq", randn(vec![4], &mut rng));
        let wk = store.add("wk", randn(vec![4, 4, 1, 1], &mut rng));
        let bk = store.add("bk", randn(vec![4], &mut rng));
        let wv = store.add("wv", randn(vec![4, 4, 1, 1], &mut rng));
        let bv = store.add("bv", randn(vec![4], &mut rng));
        let x = randn(vec![3, 4, 3, 3], &mut rng);
        let target = randn(vec![3, 4, 3, 3], &mut rng);
        fd_check(
            &mut store,
            move |_s, g| {
                let xv = g.input(x.clone());
                let q = g.conv2d(xv, wq, bq, 1, Pad::Zero);
                let k = g.conv2d(xv, wk, bk, 1, Pad::Zero);
                let v = g.conv2d(xv, wv, bv, 1, Pad::Zero);
                let y = g.seq_attention(q, k, v, 2);
                g.sq_diff_sum(y, &target)
            },
            1e-4,
            1e-5,
            13,
        );
    }

    #[test]
    fn window_attention_radius0_is_value_projection() {
        let mut rng = stream(14, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.input(randn(vec![1, 4, 3, 3], &mut rng));
        let k = g.input(randn(vec![1, 4, 3, 3], &mut rng));
        let vt = randn(vec![1, 4, 3, 3], &mut rng);
        let v = g.input(vt.clone());
        let y = g.window_attention(q, k, v, 0, 2, Pad::Zero);
        assert_eq!(g.value(y).data, vt.data);
    }

    /// Masked dense attention oracle over the full frame: out-of-window pairs
    /// get -inf scores.
    fn masked_dense_window_oracle(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        radius: usize,
        heads: usize,
    ) -> Vec<f64> {
        let (bs, c, h, w) = q.dims4();
        let dh = c / heads;
        let mut out = vec![0.0; q.len()];
        for s in 0..bs {
            for y in 0..h {
                for x in 0..w {
                    for hd in 0..heads {
                        let mut weights = Vec::new();
                        let mut coords = Vec::new();
                        for ny in 0..h {
                            for nx in 0..w {
                                let masked = (ny as isize - y as isize).unsigned_abs() > radius
                                    || (nx as isize - x as isize).unsigned_abs() > radius;
                                if masked {
                                    continue;
                                }
                                let dot: f64 = (0..dh)
                                    .map(|d| {
                                        q.data[((s * c + hd * dh + d) * h + y) * w + x]
                                            * k.data[((s * c + hd * dh + d) * h + ny) * w + nx]
                                    })
                                    .sum();
                                weights.push((dot / (dh as f64).sqrt()).exp());
                                coords.push((ny, nx));
                            }
                        }
                        let z: f64 = weights.iter().sum();
                        for d in 0..dh {
                            let mut acc = 0.0;
                            for (wt, &(ny, nx)) in weights.iter().zip(&coords) {
                                acc += wt / z * v.data[((s * c + hd * dh + d) * h + ny) * w + nx];
                            }
                            out[((s * c + hd * dh + d) * h + y) * w + x] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn window_attention_matches_masked_dense_oracle() {
        let mut rng = stream(15, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (c, h, w) = (4, 5, 5);
        let qt = randn(vec![1, c, h, w], &mut rng);
        let kt = randn(vec![1, c, h, w], &mut rng);
        let vt = randn(vec![1, c, h, w], &mut rng);
        let q = g.input(qt.clone());
        let k = g.input(kt.clone());
        let v = g.input(vt.clone());
        let y = g.window_attention(q, k, v, 1, 2, Pad::Zero);
        let want = masked_dense_window_oracle(&qt, &kt, &vt, 1, 2);
        for (a, b) in g.value(y).data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn window_attention_locality() {
        // Perturbing a pixel beyond Chebyshev distance n leaves the output at
        // the probe pixel unchanged (single layer).
        let mut rng = stream(16, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let (c, h, w) = (2, 7, 7);
        let base = randn(vec![1, c, h, w], &mut rng);
        let radius = 2;
        let run = |t: &Tensor| -> Vec<f64> {
            let mut g = Graph::new(&store);
            let q = g.input(t.clone());
            let k = g.input(t.clone());
            let v = g.input(t.clone());
            let y = g.window_attention(q, k, v, radius, 1, Pad::Zero);
            g.value(y).data.clone()
        };
        let out_base = run(&base);
        let mut perturbed = base.clone();
        // Probe pixel (0,0); perturb (5,5), Chebyshev distance 5 > 2.
        for ch in 0..c {
            perturbed.data[(ch * h + 5) * w + 5] += 3.0;
        }
        let out_pert = run(&perturbed);
        for ch in 0..c {
            let idx = (ch * h) * w;
            assert_eq!(out_base[idx], out_pert[idx]);
        }
        // Sanity: a pixel inside the window does change.
        let idx_near = (5 * w + 4) * 1;
        let _ = idx_near;
        assert_ne!(out_base, out_pert);
    }

    #[test]
    fn window_attention_gradients() {
        let mut rng = stream(17, StreamKind::Test, &[]);
        for pad in [Pad::Zero, Pad::Wrap] {
            let mut store = ParamStore::new();
            let wq = store.add("wq", randn(vec![2, 2, 1, 1], &mut rng));
            let bq = store.add("bq", randn(vec![2], &mut rng));
            let wv = store.add("wv", randn(vec![2, 2, 1, 1], &mut rng));
            let bv = store.add("bv", randn(vec![2], &mut rng));
            let x = randn(vec![1, 2, 4, 4], &mut rng);
            let target = randn(vec![1, 2, 4, 4], &mut rng);
            fd_check(
                &mut store,
                move |_s, g| {
                    let xv = g.input(x.clone());
                    let q = g.conv2d(xv, wq, bq, 1, Pad::Zero);
                    let v = g.conv2d(xv, wv, bv, 1, Pad::Zero);
                    let y = g.window_attention(q, xv, v, 1, 1, pad);
                    g.sq_diff_sum(y, &target)
                },
                1e-4,
                1e-5,
                18,
            );
        }
    }

    #[test]
    fn structural_ops_gradients() {
        // slot mean/last, concat, upsample, channel/slot bias, linear, embed.
        let mut rng = stream(19, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        let w = store.add("w", randn(vec![2, 4, 3, 3], &mut rng));
        let b = store.add("b", randn(vec![2], &mut rng));
        let slot_bias = store.add("pos", randn(vec![3, 2], &mut rng));
        let table = store.add("table", randn(vec![5, 6], &mut rng));
        let lw = store.add("lw", randn(vec![2, 6], &mut rng));
        let lb = store.add("lb", randn(vec![2], &mut rng));
        let x = randn(vec![3, 2, 4, 4], &mut rng);
        let target = randn(vec![1, 2, 8, 8], &mut rng);
        fd_check(
            &mut store,
            move |_s, g| {
                let xv = g.input(x.clone());
                let xb = g.add_slot_bias(xv, slot_bias);
                let m = g.slot_mean(xb);
                let l = g.slot_last(xb);
                let cat = g.concat_channels(m, l);
                let emb = g.embed_row(table, 3);
                let bias = g.linear(emb, lw, lb);
                let y = g.conv2d(cat, w, b, 1, Pad::Zero);
                let y = g.add_channel_bias(y, bias);
                let y = g.upsample_nearest(y, 8, 8);
                g.sq_diff_sum(y, &target)
            },
            1e-4,
            1e-6,
            20,
        );
    }

    #[test]
    fn conservation_ops_gradients() {
        let mut rng = stream(21, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        let w = store.add("w", randn(vec![2, 2, 3, 3], &mut rng));
        let b = store.add("b", Tensor::new(vec![2], vec![0.8, 0.9]));
        let x = randn(vec![1, 2, 4, 4], &mut rng);
        let target = randn(vec![1, 2, 4, 4], &mut rng);
        fd_check(
            &mut store,
            move |_s, g| {
                let xv = g.input(x.clone());
                let y = g.conv2d(xv, w, b, 1, Pad::Zero);
                let y = g.relu_shift(y, 0.01);
                let y = g.pow_nonneg(y, 0.5);
                let y = g.relu_shift(y, 0.01);
                let y = g.mass_rescale(y, 7.0);
                g.sq_diff_sum(y, &target)
            },
            1e-5,
            2e-4,
            22,
        );
    }

    #[test]
    fn mass_rescale_pins_total() {
        let mut rng = stream(23, StreamKind::Test, &[]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let data: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() + 0.1).collect();
        let x = g.input(Tensor::new(vec![1, 1, 4, 4], data));
        let y = g.mass_rescale(x, 3.25);
        assert!((g.value(y).data.iter().sum::<f64>() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_accumulates_gradient() {
        // The same conv applied to two inputs: gradient sums both uses.
        let mut rng = stream(24, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        let w = store.add("w", randn(vec![1, 1, 3, 3], &mut rng));
        let b = store.add("b", randn(vec![1], &mut rng));
        let xa = randn(vec![1, 1, 4, 4], &mut rng);
        let xb = randn(vec![1, 1, 4, 4], &mut rng);
        let ta = randn(vec![1, 1, 4, 4], &mut rng);
        let tb = randn(vec![1, 1, 4, 4], &mut rng);
        fd_check(
            &mut store,
            move |_s, g| {
                let a = g.input(xa.clone());
                let bv = g.input(xb.clone());
                let ya = g.conv2d(a, w, b, 1, Pad::Zero);
                let yb = g.conv2d(bv, w, b, 1, Pad::Zero);
                let la = g.sq_diff_sum(ya, &ta);
                let lb = g.sq_diff_sum(yb, &tb);
                g.add(la, lb)
            },
            1e-4,
            1e-6,
            25,
        );
    }

    #[test]
    fn round_to_f32_is_idempotent() {
        let mut rng = stream(26, StreamKind::Test, &[]);
        let mut store = ParamStore::new();
        store.add("w", randn(vec![8], &mut rng));
        store.round_to_f32();
        let snapshot: Vec<f64> = store.get(0).data.clone();
        store.round_to_f32();
        assert_eq!(store.get(0).data, snapshot);
        for v in &store.get(0).data {
            assert_eq!(*v, *v as f32 as f64);
        }
    }
/// Timing probe for the hot kernels; run on demand with
/// `cargo test -p scalesr-core micro_timing -- --ignored --nocapture`.
#[test]
#[ignore]
fn micro_timing() {
    use crate::rng::{standard_normal_vec, stream, StreamKind};
    let mut rng = stream(1, StreamKind::Test, &[]);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![16,16,3,3], standard_normal_vec(&mut rng, 16*16*9)));
    let b = store.add("b", Tensor::new(vec![16], standard_normal_vec(&mut rng, 16)));
    let wq = store.add("wq", Tensor::new(vec![16,16,1,1], standard_normal_vec(&mut rng, 256)));
    let bq = store.add("bq", Tensor::new(vec![16], standard_normal_vec(&mut rng, 16)));
    let gamma = store.add("gamma", Tensor::new(vec![16], vec![1.0;16]));
    let beta = store.add("beta", Tensor::new(vec![16], vec![0.0;16]));
    let x = Tensor::new(vec![3,16,40,40], standard_normal_vec(&mut rng, 3*16*1600));

    let reps = 20;
    let time_min = |f: &dyn Fn()| -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let t0 = std::time::Instant::now();
            for _ in 0..reps { f(); }
            best = best.min(t0.elapsed().as_secs_f64()*1000.0/reps as f64);
        }
        best
    };
    eprintln!("conv3x3 16->16 @40x40 x3slots: {:.2} ms/call", time_min(&|| { let mut g = Graph::new(&store); let xv = g.input(x.clone()); let _ = g.conv2d(xv, w, b, 1, Pad::Zero); }));

    eprintln!("conv1x1 16->16: {:.2} ms/call", time_min(&|| { let mut g = Graph::new(&store); let xv = g.input(x.clone()); let _ = g.conv2d(xv, wq, bq, 1, Pad::Zero); }));

    eprintln!("window_attn n=3 h=4 @40x40 x3: {:.2} ms/call", time_min(&|| { let mut g = Graph::new(&store); let xv = g.input(x.clone()); let _ = g.window_attention(xv, xv, xv, 3, 4, Pad::Zero); }));

    eprintln!("seq_attn L=3 h=4: {:.2} ms/call", time_min(&|| { let mut g = Graph::new(&store); let xv = g.input(x.clone()); let _ = g.seq_attention(xv, xv, xv, 4); }));

    eprintln!("group_norm: {:.2} ms/call", time_min(&|| { let mut g = Graph::new(&store); let xv = g.input(x.clone()); let _ = g.group_norm(xv, gamma, beta, 8); }));

    eprintln!("silu: {:.2} ms/call", time_min(&|| { let mut g = Graph::new(&store); let xv = g.input(x.clone()); let _ = g.silu(xv); }));
}

}
