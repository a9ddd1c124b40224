//! The two U-Nets: a deterministic mean predictor over the LR context with
//! factorized temporal/windowed-spatial attention in each encoder stage, and
//! a velocity-predicting diffusion U-Net conditioned on the mean, the current
//! bicubic frame, a learned step embedding, and cross-attention over the
//! bicubic context.
//!
//! Encoder features keep an explicit slot axis (the L context frames for the
//! deterministic net); convolutions treat slots as a batch with shared
//! weights, and temporal attention mixes across slots per pixel.

use crate::error::CoreError;
use crate::rng::{standard_normal_vec, stream, StreamKind};
use crate::tensor::{Graph, Pad, ParamId, ParamStore, Tensor, Var};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    /// Test-only mode for the translation-equivariance check.
    Wrap,
}

impl From<PadMode> for Pad {
    fn from(p: PadMode) -> Pad {
        match p {
            PadMode::Zero => Pad::Zero,
            PadMode::Wrap => Pad::Wrap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub stages: usize,
    pub base_channels: usize,
    /// Window radius per encoder stage plus the bottleneck.
    pub window_sizes: Vec<usize>,
    pub heads: usize,
    /// Context length L (deterministic input slots, cross-attention tokens).
    pub context_len: usize,
    /// Output frames T.
    pub t_frames: usize,
    /// Diffusion step count J (step-embedding table rows).
    pub j_steps: usize,
    pub step_embed_dim: usize,
    pub temporal_attention: bool,
    pub spatial_attention: bool,
    pub cross_attention: bool,
    pub pad: PadMode,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.len() != self.stages + 1 {
            return Err(CoreError::Config(format!(
                "window_sizes must have stages+1 = {} entries, got {}",
                self.stages + 1,
                self.window_sizes.len()
            )));
        }
        if self.stages == 0 || self.base_channels == 0 || self.context_len == 0 || self.t_frames == 0
        {
            return Err(CoreError::Config("stages, channels, L, T must be positive".into()));
        }
        if self.base_channels % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "heads {} must divide base_channels {}",
                self.heads, self.base_channels
            )));
        }
        if self.j_steps == 0 || self.step_embed_dim == 0 {
            return Err(CoreError::Config("j_steps and step_embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channels at encoder stage `i`: doubling capped at 4x base.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels * (1 << i.min(2))
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.stages.max(1) - 1).max(self.base_channels * 4)
    }

    /// Channel count of the deterministic input stack (L frames + topography).
    pub fn det_in_channels(&self) -> usize {
        self.context_len + 1
    }

    /// Channel count of the diffusion input stack
    /// (T noised residual + 1 bicubic frame + T deterministic mean).
    pub fn dif_in_channels(&self) -> usize {
        2 * self.t_frames + 1
    }

    pub fn out_channels(&self) -> usize {
        self.t_frames
    }
}

/// Largest group count <= 8 dividing the channel count.
fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LinearP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnP {
    q: ConvP,
    k: ConvP,
    v: ConvP,
    out: ConvP,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    conv1: ConvP,
    n1: NormP,
    conv2: ConvP,
    n2: NormP,
}

#[derive(Debug, Clone)]
struct EncStage {
    block: ConvBlock,
    /// Temporal positional bias (L, C) plus attention, deterministic net only.
    pos_bias: Option<ParamId>,
    temporal: Option<AttnP>,
    spatial: Option<AttnP>,
    /// Step-embedding projection to a per-channel bias, diffusion net only.
    emb: Option<LinearP>,
    /// Cross-attention onto the bicubic context, diffusion net only.
    cross: Option<AttnP>,
    /// Stride-2 conv into the next stage (absent on the bottleneck).
    down: Option<ConvP>,
}

#[derive(Debug, Clone)]
struct DecStage {
    up_conv: ConvP,
    up_norm: NormP,
    merge: ConvP,
    merge_norm: NormP,
    conv2: ConvP,
    n2: NormP,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> Builder<'a> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ConvP {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data: Vec<f64> = standard_normal_vec(&mut self.rng, cout * cin * k * k)
            .into_iter()
            .map(|v| v * std)
            .collect();
        let w = self.store.add(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], data));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        ConvP { w, b }
    }

    fn conv_zero(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ConvP {
        let w = self
            .store
            .add(format!("{name}.w"), Tensor::zeros(vec![cout, cin, k, k]));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        ConvP { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        let gamma = self
            .store
            .add(format!("{name}.gamma"), Tensor::new(vec![c], vec![1.0; c]));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(vec![c]));
        NormP { gamma, beta }
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> LinearP {
        let std = (2.0 / d_in as f64).sqrt();
        let data: Vec<f64> = standard_normal_vec(&mut self.rng, d_out * d_in)
            .into_iter()
            .map(|v| v * std)
            .collect();
        let w = self.store.add(format!("{name}.w"), Tensor::new(vec![d_out, d_in], data));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        LinearP { w, b }
    }

    fn attn(&mut self, name: &str, c: usize, kv_in: usize) -> AttnP {
        AttnP {
            q: self.conv(&format!("{name}.q"), c, c, 1),
            k: self.conv(&format!("{name}.k"), c, kv_in, 1),
            v: self.conv(&format!("{name}.v"), c, kv_in, 1),
            out: self.conv(&format!("{name}.out"), c, c, 1),
        }
    }

    fn block(&mut self, name: &str, cin: usize, c: usize) -> ConvBlock {
        ConvBlock {
            conv1: self.conv(&format!("{name}.conv1"), c, cin, 3),
            n1: self.norm(&format!("{name}.n1"), c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3),
            n2: self.norm(&format!("{name}.n2"), c),
        }
    }
}

/// Which of the two networks a weight set implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetRole {
    Det,
    Dif,
}

/// A complete parameter set for one network instance.
pub struct ModelWeights {
    pub store: ParamStore,
    pub config: UNetConfig,
    pub role: NetRole,
    enc: Vec<EncStage>,
    bottleneck: EncStage,
    /// Slot aggregation 1x1 conv (deterministic net only).
    agg: Option<ConvP>,
    dec: Vec<DecStage>,
    head: ConvP,
    step_table: Option<ParamId>,
    step_mlp: Option<LinearP>,
}

impl ModelWeights {
    pub fn new(config: &UNetConfig, role: NetRole, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: stream(seed, StreamKind::Init, &[role as u64]),
        };
        let cfg = config.clone();
        let in_ch = match role {
            // Each deterministic slot carries (frame, topography).
            NetRole::Det => 2,
            NetRole::Dif => cfg.dif_in_channels(),
        };

        let (step_table, step_mlp) = if role == NetRole::Dif {
            let std = 0.02;
            let data: Vec<f64> =
                standard_normal_vec(&mut b.rng, cfg.j_steps * cfg.step_embed_dim)
                    .into_iter()
                    .map(|v| v * std)
                    .collect();
            let table = b.store.add(
                "step.table",
                Tensor::new(vec![cfg.j_steps, cfg.step_embed_dim], data),
            );
            let mlp = b.linear("step.mlp", cfg.step_embed_dim, cfg.step_embed_dim);
            (Some(table), Some(mlp))
        } else {
            (None, None)
        };

        let mut enc = Vec::new();
        let mut cin = in_ch;
        for i in 0..cfg.stages {
            let c = cfg.stage_channels(i);
            let name = format!("enc{i}");
            let block = b.block(&name, cin, c);
            let (pos_bias, temporal) = if role == NetRole::Det
                && cfg.temporal_attention
                && cfg.context_len > 1
            {
                let pb = b.store.add(
                    format!("{name}.pos"),
                    Tensor::zeros(vec![cfg.context_len, c]),
                );
                (Some(pb), Some(b.attn(&format!("{name}.tattn"), c, c)))
            } else {
                (None, None)
            };
            let spatial = cfg
                .spatial_attention
                .then(|| b.attn(&format!("{name}.sattn"), c, c));
            let emb = (role == NetRole::Dif)
                .then(|| b.linear(&format!("{name}.emb"), c, cfg.step_embed_dim));
            let cross = (role == NetRole::Dif && cfg.cross_attention)
                .then(|| b.attn(&format!("{name}.xattn"), c, 1));
            let next_c = if i + 1 < cfg.stages {
                cfg.stage_channels(i + 1)
            } else {
                cfg.bottleneck_channels()
            };
            let down = Some(b.conv(&format!("{name}.down"), next_c, c, 3));
            enc.push(EncStage {
                block,
                pos_bias,
                temporal,
                spatial,
                emb,
                cross,
                down,
            });
            // The stride-2 conv already moves to the next stage's width.
            cin = next_c;
        }

        let cb = cfg.bottleneck_channels();
        let name = "bottleneck";
        let block = b.block(name, cb, cb);
        let (pos_bias, temporal) =
            if role == NetRole::Det && cfg.temporal_attention && cfg.context_len > 1 {
                let pb = b
                    .store
                    .add(format!("{name}.pos"), Tensor::zeros(vec![cfg.context_len, cb]));
                (Some(pb), Some(b.attn(&format!("{name}.tattn"), cb, cb)))
            } else {
                (None, None)
            };
        let spatial = cfg
            .spatial_attention
            .then(|| b.attn(&format!("{name}.sattn"), cb, cb));
        let emb =
            (role == NetRole::Dif).then(|| b.linear(&format!("{name}.emb"), cb, cfg.step_embed_dim));
        let cross = (role == NetRole::Dif && cfg.cross_attention)
            .then(|| b.attn(&format!("{name}.xattn"), cb, 1));
        let bottleneck = EncStage {
            block,
            pos_bias,
            temporal,
            spatial,
            emb,
            cross,
            down: None,
        };

        let agg = (role == NetRole::Det).then(|| b.conv("agg", cb, 2 * cb, 1));

        let mut dec = Vec::new();
        let mut cprev = cb;
        for i in (0..cfg.stages).rev() {
            let c = cfg.stage_channels(i);
            let name = format!("dec{i}");
            dec.push(DecStage {
                up_conv: b.conv(&format!("{name}.up"), c, cprev, 3),
                up_norm: b.norm(&format!("{name}.upn"), c),
                merge: b.conv(&format!("{name}.merge"), c, 2 * c, 3),
                merge_norm: b.norm(&format!("{name}.mergen"), c),
                conv2: b.conv(&format!("{name}.conv2"), c, c, 3),
                n2: b.norm(&format!("{name}.n2"), c),
            });
            cprev = c;
        }
        let head = b.conv_zero("head", cfg.out_channels(), cfg.stage_channels(0), 1);

        store.round_to_f32();
        Ok(Self {
            store,
            config: cfg,
            role,
            enc,
            bottleneck,
            agg,
            dec,
            head,
            step_table,
            step_mlp,
        })
    }

    /// Documented closed-form parameter count: a pure function of the config.
    pub fn expected_param_count(config: &UNetConfig, role: NetRole) -> usize {
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let norm = |c: usize| 2 * c;
        let attn = |c: usize, kv: usize| conv(c, c, 1) + 2 * conv(c, kv, 1) + conv(c, c, 1);
        let lin = |o: usize, i: usize| o * i + o;
        let block = |cin: usize, c: usize| conv(c, cin, 3) + conv(c, c, 3) + 2 * norm(c);
        let mut total = 0;
        let in_ch = match role {
            NetRole::Det => 2,
            NetRole::Dif => config.dif_in_channels(),
        };
        if role == NetRole::Dif {
            total += config.j_steps * config.step_embed_dim;
            total += lin(config.step_embed_dim, config.step_embed_dim);
        }
        let cb = config.bottleneck_channels();
        let mut cin = in_ch;
        for i in 0..config.stages {
            let c = config.stage_channels(i);
            total += block(cin, c);
            if role == NetRole::Det && config.temporal_attention && config.context_len > 1 {
                total += config.context_len * c + attn(c, c);
            }
            if config.spatial_attention {
                total += attn(c, c);
            }
            if role == NetRole::Dif {
                total += lin(c, config.step_embed_dim);
                if config.cross_attention {
                    total += attn(c, 1);
                }
            }
            let next = if i + 1 < config.stages {
                config.stage_channels(i + 1)
            } else {
                cb
            };
            total += conv(next, c, 3);
            cin = next;
        }
        total += block(cb, cb);
        if role == NetRole::Det && config.temporal_attention && config.context_len > 1 {
            total += config.context_len * cb + attn(cb, cb);
        }
        if config.spatial_attention {
            total += attn(cb, cb);
        }
        if role == NetRole::Dif {
            total += lin(cb, config.step_embed_dim);
            if config.cross_attention {
                total += attn(cb, 1);
            }
        }
        if role == NetRole::Det {
            total += conv(cb, 2 * cb, 1);
        }
        let mut cprev = cb;
        for i in (0..config.stages).rev() {
            let c = config.stage_channels(i);
            total += conv(c, cprev, 3) + norm(c);
            total += conv(c, 2 * c, 3) + norm(c);
            total += conv(c, c, 3) + norm(c);
            cprev = c;
        }
        total += conv(config.out_channels(), config.stage_channels(0), 1);
        total
    }

    fn conv_block(&self, g: &mut Graph, x: Var, block: &ConvBlock, emb_bias: Option<Var>) -> Var {
        let pad: Pad = self.config.pad.into();
        let c1 = g.conv2d(x, block.conv1.w, block.conv1.b, 1, pad);
        let groups = norm_groups(g.value(c1).dims4().1);
        let n1 = g.group_norm(c1, block.n1.gamma, block.n1.beta, groups);
        let mut h = g.silu(n1);
        if let Some(bias) = emb_bias {
            h = g.add_channel_bias(h, bias);
        }
        let c2 = g.conv2d(h, block.conv2.w, block.conv2.b, 1, pad);
        let n2 = g.group_norm(c2, block.n2.gamma, block.n2.beta, groups);
        g.silu(n2)
    }

    fn self_attention(&self, g: &mut Graph, x: Var, attn: &AttnP, radius: usize) -> Var {
        let pad: Pad = self.config.pad.into();
        let q = g.conv2d(x, attn.q.w, attn.q.b, 1, pad);
        let k = g.conv2d(x, attn.k.w, attn.k.b, 1, pad);
        let v = g.conv2d(x, attn.v.w, attn.v.b, 1, pad);
        let a = g.window_attention(q, k, v, radius, self.config.heads, pad);
        let o = g.conv2d(a, attn.out.w, attn.out.b, 1, pad);
        g.add(x, o)
    }

    fn temporal_attention(&self, g: &mut Graph, x: Var, pos: ParamId, attn: &AttnP) -> Var {
        let pad: Pad = self.config.pad.into();
        let xb = g.add_slot_bias(x, pos);
        let q = g.conv2d(xb, attn.q.w, attn.q.b, 1, pad);
        let k = g.conv2d(xb, attn.k.w, attn.k.b, 1, pad);
        let v = g.conv2d(xb, attn.v.w, attn.v.b, 1, pad);
        let a = g.seq_attention(q, k, v, self.config.heads);
        let o = g.conv2d(a, attn.out.w, attn.out.b, 1, pad);
        g.add(x, o)
    }

    fn cross_attention(&self, g: &mut Graph, x: Var, ctx: Var, attn: &AttnP) -> Var {
        let pad: Pad = self.config.pad.into();
        let q = g.conv2d(x, attn.q.w, attn.q.b, 1, pad);
        let k = g.conv2d(ctx, attn.k.w, attn.k.b, 1, pad);
        let v = g.conv2d(ctx, attn.v.w, attn.v.b, 1, pad);
        let a = g.seq_attention(q, k, v, self.config.heads);
        let o = g.conv2d(a, attn.out.w, attn.out.b, 1, pad);
        g.add(x, o)
    }

    /// Deterministic forward on an existing graph. `input` is the
    /// (L+1)-channel stack `[frame_1..frame_L, topography]` at `(L+1, H, W)`.
    /// Returns the raw (sign-unrestricted) `(T, H, W)` prediction.
    pub fn det_forward_graph(&self, g: &mut Graph, input: &Tensor) -> Result<Var> {
        if self.role != NetRole::Det {
            return Err(CoreError::Config("not a deterministic-net weight set".into()));
        }
        let cfg = &self.config;
        let l = cfg.context_len;
        if input.shape.len() != 3 || input.shape[0] != l + 1 {
            return Err(CoreError::Dimension(format!(
                "expected ({}, H, W) input stack, got {:?}",
                l + 1,
                input.shape
            )));
        }
        let (h, w) = (input.shape[1], input.shape[2]);
        let plane = h * w;
        // Regroup into L slots of (frame, topography).
        let topo = &input.data[l * plane..];
        let mut slots = Vec::with_capacity(l * 2 * plane);
        for k in 0..l {
            slots.extend_from_slice(&input.data[k * plane..(k + 1) * plane]);
            slots.extend_from_slice(topo);
        }
        let mut x = g.input(Tensor::new(vec![l, 2, h, w], slots));

        let pad: Pad = cfg.pad.into();
        let mut skips = Vec::new();
        for (i, stage) in self.enc.iter().enumerate() {
            x = self.conv_block(g, x, &stage.block, None);
            if let (Some(pos), Some(t)) = (stage.pos_bias, stage.temporal.as_ref()) {
                x = self.temporal_attention(g, x, pos, t);
            }
            if let Some(s) = stage.spatial.as_ref() {
                x = self.self_attention(g, x, s, cfg.window_sizes[i]);
            }
            skips.push(x);
            let down = stage.down.as_ref().unwrap();
            x = g.conv2d(x, down.w, down.b, 2, pad);
        }
        x = self.conv_block(g, x, &self.bottleneck.block, None);
        if let (Some(pos), Some(t)) = (self.bottleneck.pos_bias, self.bottleneck.temporal.as_ref())
        {
            x = self.temporal_attention(g, x, pos, t);
        }
        if let Some(s) = self.bottleneck.spatial.as_ref() {
            x = self.self_attention(g, x, s, cfg.window_sizes[cfg.stages]);
        }

        // Aggregate slots: mean plus the current-frame slot.
        let mean = g.slot_mean(x);
        let last = g.slot_last(x);
        let cat = g.concat_channels(mean, last);
        let agg = self.agg.as_ref().unwrap();
        let mut y = g.conv2d(cat, agg.w, agg.b, 1, pad);
        y = g.silu(y);

        for (d, stage_idx) in self.dec.iter().zip((0..cfg.stages).rev()) {
            let skip = skips[stage_idx];
            let (_, _, sh, sw) = g.value(skip).dims4();
            y = g.upsample_nearest(y, sh, sw);
            y = g.conv2d(y, d.up_conv.w, d.up_conv.b, 1, pad);
            let groups = norm_groups(g.value(y).dims4().1);
            y = g.group_norm(y, d.up_norm.gamma, d.up_norm.beta, groups);
            y = g.silu(y);
            let skip_mean = g.slot_mean(skip);
            y = g.concat_channels(y, skip_mean);
            y = g.conv2d(y, d.merge.w, d.merge.b, 1, pad);
            y = g.group_norm(y, d.merge_norm.gamma, d.merge_norm.beta, groups);
            y = g.silu(y);
            y = g.conv2d(y, d.conv2.w, d.conv2.b, 1, pad);
            y = g.group_norm(y, d.n2.gamma, d.n2.beta, groups);
            y = g.silu(y);
        }
        Ok(g.conv2d(y, self.head.w, self.head.b, 1, pad))
    }

    /// Standalone deterministic forward: `(L+1, H, W)` stack in,
    /// `(T, H, W)` raw prediction out.
    pub fn det_forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let out = self.det_forward_graph(&mut g, input)?;
        let v = g.value(out);
        let (_, c, h, w) = v.dims4();
        Ok(Tensor::new(vec![c, h, w], v.data.clone()))
    }

    /// Diffusion forward on an existing graph.
    ///
    /// `noised` `(T, H, W)`, `bicubic_frame` `(H, W)`, `det_mean` `(T, H, W)`,
    /// `j` in `1..=J`, `context_bicubic` the L bicubic context frames at HR
    /// shape. Returns the `(1, T, H, W)` velocity prediction.
    pub fn dif_forward_graph(
        &self,
        g: &mut Graph,
        noised: Var,
        bicubic_frame: &Tensor,
        det_mean: &Tensor,
        j: usize,
        context_bicubic: &[Tensor],
    ) -> Result<Var> {
        if self.role != NetRole::Dif {
            return Err(CoreError::Config("not a diffusion-net weight set".into()));
        }
        let cfg = &self.config;
        if j == 0 || j > cfg.j_steps {
            return Err(CoreError::InvalidValue(format!(
                "step {j} outside 1..={}",
                cfg.j_steps
            )));
        }
        let t = cfg.t_frames;
        let nv = g.value(noised).clone();
        if nv.shape != vec![t, bicubic_frame.shape[0], bicubic_frame.shape[1]]
            && nv.shape != vec![1, t, bicubic_frame.shape[0], bicubic_frame.shape[1]]
        {
            return Err(CoreError::Dimension(format!(
                "noised residual shape {:?} does not match (T, H, W)",
                nv.shape
            )));
        }
        if context_bicubic.len() != cfg.context_len {
            return Err(CoreError::Arity(format!(
                "expected {} context frames, got {}",
                cfg.context_len,
                context_bicubic.len()
            )));
        }
        let (h, w) = (bicubic_frame.shape[0], bicubic_frame.shape[1]);
        let pad: Pad = cfg.pad.into();

        // Conditioning stack: [noised (T), bicubic (1), mean (T)].
        let mut cond = Vec::with_capacity((t + 1 + t) * h * w);
        cond.extend_from_slice(&bicubic_frame.data);
        cond.extend_from_slice(&det_mean.data);
        let cond = g.input(Tensor::new(vec![1, t + 1, h, w], cond));
        let noised4 = if nv.shape.len() == 3 {
            let re = Tensor::new(vec![1, t, h, w], nv.data.clone());
            g.input(re)
        } else {
            noised
        };
        let mut x = g.concat_channels(noised4, cond);

        // Step embedding: table row -> shared MLP -> per-stage channel bias.
        let row = g.embed_row(self.step_table.unwrap(), j - 1);
        let mlp = self.step_mlp.as_ref().unwrap();
        let e = g.linear(row, mlp.w, mlp.b);
        let e = g.silu(e);

        // Cross-attention context at each stage resolution.
        let mut ctx_levels: Vec<Option<Var>> = Vec::new();
        let mut sizes = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for _ in 0..=cfg.stages {
            sizes.push((ch, cw));
            ch = ch.div_ceil(2);
            cw = cw.div_ceil(2);
        }
        for (lh, lw) in &sizes {
            if cfg.cross_attention {
                let mut data = Vec::with_capacity(cfg.context_len * lh * lw);
                for f in context_bicubic {
                    data.extend(adaptive_avg_pool(&f.data, f.shape[0], f.shape[1], *lh, *lw));
                }
                ctx_levels.push(Some(g.input(Tensor::new(
                    vec![cfg.context_len, 1, *lh, *lw],
                    data,
                ))));
            } else {
                ctx_levels.push(None);
            }
        }

        let mut skips = Vec::new();
        for (i, stage) in self.enc.iter().enumerate() {
            let emb = stage.emb.as_ref().unwrap();
            let bias = g.linear(e, emb.w, emb.b);
            x = self.conv_block(g, x, &stage.block, Some(bias));
            if let Some(s) = stage.spatial.as_ref() {
                x = self.self_attention(g, x, s, cfg.window_sizes[i]);
            }
            if let (Some(cx), Some(ctx)) = (stage.cross.as_ref(), ctx_levels[i]) {
                x = self.cross_attention(g, x, ctx, cx);
            }
            skips.push(x);
            let down = stage.down.as_ref().unwrap();
            x = g.conv2d(x, down.w, down.b, 2, pad);
        }
        let emb = self.bottleneck.emb.as_ref().unwrap();
        let bias = g.linear(e, emb.w, emb.b);
        x = self.conv_block(g, x, &self.bottleneck.block, Some(bias));
        if let Some(s) = self.bottleneck.spatial.as_ref() {
            x = self.self_attention(g, x, s, cfg.window_sizes[cfg.stages]);
        }
        if let (Some(cx), Some(ctx)) = (self.bottleneck.cross.as_ref(), ctx_levels[cfg.stages]) {
            x = self.cross_attention(g, x, ctx, cx);
        }

        let mut y = x;
        for (d, stage_idx) in self.dec.iter().zip((0..cfg.stages).rev()) {
            let skip = skips[stage_idx];
            let (_, _, sh, sw) = g.value(skip).dims4();
            y = g.upsample_nearest(y, sh, sw);
            y = g.conv2d(y, d.up_conv.w, d.up_conv.b, 1, pad);
            let groups = norm_groups(g.value(y).dims4().1);
            y = g.group_norm(y, d.up_norm.gamma, d.up_norm.beta, groups);
            y = g.silu(y);
            y = g.concat_channels(y, skip);
            y = g.conv2d(y, d.merge.w, d.merge.b, 1, pad);
            y = g.group_norm(y, d.merge_norm.gamma, d.merge_norm.beta, groups);
            y = g.silu(y);
            y = g.conv2d(y, d.conv2.w, d.conv2.b, 1, pad);
            y = g.group_norm(y, d.n2.gamma, d.n2.beta, groups);
            y = g.silu(y);
        }
        Ok(g.conv2d(y, self.head.w, self.head.b, 1, pad))
    }

    /// Standalone diffusion forward returning the `(T, H, W)` velocity.
    pub fn dif_forward(
        &self,
        noised: &Tensor,
        bicubic_frame: &Tensor,
        det_mean: &Tensor,
        j: usize,
        context_bicubic: &[Tensor],
    ) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let n = g.input(noised.clone());
        let out = self.dif_forward_graph(&mut g, n, bicubic_frame, det_mean, j, context_bicubic)?;
        let v = g.value(out);
        let (_, c, h, w) = v.dims4();
        Ok(Tensor::new(vec![c, h, w], v.data.clone()))
    }
}

/// Adaptive average pooling of one plane to an exact target size.
fn adaptive_avg_pool(data: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(th * tw);
    for oy in 0..th {
        let y0 = oy * h / th;
        let y1 = ((oy + 1) * h).div_ceil(th).max(y0 + 1);
        for ox in 0..tw {
            let x0 = ox * w / tw;
            let x1 = ((ox + 1) * w).div_ceil(tw).max(x0 + 1);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += data[y * w + x];
                }
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

// --- Weight file format -----------------------------------------------------
//
// magic "SSRW" | version u32 | config hash u64 | param count u32 |
// manifest (name len u16, name, ndim u8, dims u32...) per parameter |
// raw little-endian f32 values per parameter, manifest order.

const WEIGHT_MAGIC: &[u8; 4] = b"SSRW";
const WEIGHT_VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Hash of the serialized config plus the net role; a weight file only loads
/// into an identically configured net.
pub fn config_hash(config: &UNetConfig, role: NetRole) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let tag = match role {
        NetRole::Det => b'd',
        NetRole::Dif => b'f',
    };
    fnv1a64(&[json.as_bytes(), &[tag]].concat())
}

pub fn save_weights(weights: &ModelWeights, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash(&weights.config, weights.role).to_le_bytes());
    buf.extend_from_slice(&(weights.store.len() as u32).to_le_bytes());
    for (name, t) in weights.store.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in weights.store.iter() {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Rebuild a net from its config and load saved values into it, rejecting
/// mismatched magic, version, config hash, or manifest.
pub fn load_weights(config: &UNetConfig, role: NetRole, path: &std::path::Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(CoreError::WeightFormat("truncated weight file".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != WEIGHT_MAGIC {
        return Err(CoreError::WeightFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(CoreError::WeightFormat(format!("unsupported version {version}")));
    }
    let hash = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    if hash != config_hash(config, role) {
        return Err(CoreError::WeightFormat("config hash mismatch".into()));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut weights = ModelWeights::new(config, role, 0)?;
    if count != weights.store.len() {
        return Err(CoreError::WeightFormat(format!(
            "manifest lists {count} parameters, net has {}",
            weights.store.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
            .map_err(|_| CoreError::WeightFormat("non-utf8 parameter name".into()))?;
        let ndim = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        manifest.push((name, shape));
    }
    for (id, (name, shape)) in manifest.iter().enumerate() {
        if weights.store.name(id) != name || &weights.store.get(id).shape != shape {
            return Err(CoreError::WeightFormat(format!(
                "manifest entry {id} ({name} {shape:?}) does not match the configured net"
            )));
        }
    }
    for id in 0..count {
        let n = weights.store.get(id).len();
        let raw = take(&mut off, n * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        weights.store.get_mut(id).data = data;
    }
    if off != bytes.len() {
        return Err(CoreError::WeightFormat("trailing bytes in weight file".into()));
    }
    Ok(weights)
}
