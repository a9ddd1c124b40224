//! Two-stage training: the deterministic mean predictor first (pixel MSE,
//! conservation transform gated by its activation epoch), then the residual
//! diffusion net on velocity loss with the deterministic weights frozen.
//! Adam steps under cosine-annealed learning rates, early stopping on
//! validation loss, and interpolation baselines share this module.

use crate::config::RunConfig;
use crate::conserve::{conserve_pipeline, ConservationSpec, FFamily};
use crate::data::{build_samples, synthesize_grid, Dataset, Sample};
use crate::diffusion::{
    sample_ensemble, training_loss, velocity_target, Conditioning, NoiseSchedule, ResidualSample,
};
use crate::error::CoreError;
use crate::field::{Field, FieldSequence, SRFactors};
use crate::grid::{upsample_bicubic, upsample_nearest};
use crate::metrics::{report_for_forecasts, EnsembleForecast, MetricReport};
use crate::nets::{load_weights, save_weights, ModelWeights, NetRole};
use crate::rng::{standard_normal_vec, stream, StreamKind};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `lr_init * 0.5 * (1 + cos(pi * epoch / epochs))`.
pub fn cosine_lr(epoch: usize, lr_init: f64, epochs: usize) -> f64 {
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Adam with (0.9, 0.999, 1e-8). Parameters are rounded back to f32 after
/// every step so checkpoints reload losslessly.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.len()).map(|i| vec![0.0; store.get(i).len()]).collect();
        let v = (0..store.len()).map(|i| vec![0.0; store.get(i).len()]).collect();
        Self { m, v, step: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (id, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = store.get_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let next = p.data[i] - lr * mhat / (vhat.sqrt() + Self::EPS);
                p.data[i] = next as f32 as f64;
            }
        }
    }
}

/// Early stopping on strict validation-loss improvement: stop once the count
/// of consecutive non-improving epochs exceeds the patience.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: u64,
    pub best: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.stop_reason == "diverged"
    }
}

/// A sample with every tensor the two training stages need, precomputed once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: Sample,
    /// (L+1, H, W) stack: bicubic context frames then topography.
    pub det_input: Tensor,
    /// Last LR context frame (the mass-conservation reference).
    pub lr_last: Field,
    /// (1, T, H, W) target for graph losses.
    pub target: Tensor,
    /// Bicubic upsampling of each context frame, (H, W) each.
    pub context_bicubic: Vec<Tensor>,
}

pub fn prepare_sample(sample: Sample) -> Result<PreparedSample> {
    let (h, w) = sample.hr_target.frame_shape();
    let l = sample.lr_context.len();
    let ups = sample.context_bicubic()?;
    let mut det_input = Vec::with_capacity((l + 1) * h * w);
    let mut context_bicubic = Vec::with_capacity(l);
    for u in &ups {
        det_input.extend_from_slice(u.values());
        context_bicubic.push(Tensor::new(vec![h, w], u.values().to_vec()));
    }
    det_input.extend_from_slice(sample.topography.values());
    let target: Vec<f64> = sample
        .hr_target
        .frames()
        .iter()
        .flat_map(|f| f.values().iter().copied())
        .collect();
    let lr_last = sample.lr_context.frames().last().unwrap().clone();
    let t = sample.hr_target.len();
    Ok(PreparedSample {
        det_input: Tensor::new(vec![l + 1, h, w], det_input),
        lr_last,
        target: Tensor::new(vec![1, t, h, w], target),
        context_bicubic,
        sample,
    })
}

/// Training/validation split of prepared samples for one fold.
pub struct SplitSamples {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub cap_value: f64,
}

/// Synthesize the storm grid, normalize it with training-fold statistics, and
/// cut samples.
pub fn build_split(cfg: &RunConfig) -> Result<SplitSamples> {
    cfg.validate()?;
    let tiles = synthesize_grid(cfg.seed, &cfg.data, &cfg.storm)?;
    let ds = Dataset::assemble(tiles, &cfg.data, cfg.fold)?;
    let cut = |tiles: Vec<&crate::data::Tile>| -> Result<Vec<PreparedSample>> {
        let mut out = Vec::new();
        for tile in tiles {
            for s in build_samples(tile, cfg.factors, cfg.hyper.context_len, cfg.train.sample_stride)? {
                out.push(prepare_sample(s)?);
            }
        }
        Ok(out)
    };
    Ok(SplitSamples {
        train: cut(ds.train_tiles(cfg.fold))?,
        val: cut(ds.val_tiles(cfg.fold))?,
        cap_value: ds.cap_value,
    })
}

/// Build the stage-1 loss for one sample: deterministic forward, the
/// conservation transform when the gate is open, pixel MSE against the target.
fn det_loss_graph(
    det: &ModelWeights,
    g: &mut Graph,
    ps: &PreparedSample,
    spec: &ConservationSpec,
    factors: SRFactors,
    epoch: Option<usize>,
) -> Result<Var> {
    let raw = det.det_forward_graph(g, &ps.det_input)?;
    let active = match epoch {
        Some(e) => spec.active_at(e),
        None => spec.enabled,
    };
    let pred = if active {
        let a = g.relu_shift(raw, spec.alpha);
        let b = match spec.family {
            FFamily::Power => g.pow_nonneg(a, spec.exponent),
            FFamily::Identity => a,
        };
        let c = g.relu_shift(b, spec.alpha);
        let shaped_sum: f64 = g.value(c).data.iter().sum();
        if shaped_sum > 0.0 {
            let target_mass =
                (factors.s * factors.s * factors.t) as f64 * ps.lr_last.sum();
            g.mass_rescale(c, target_mass)
        } else {
            c
        }
    } else {
        raw
    };
    let sq = g.sq_diff_sum(pred, &ps.target);
    Ok(g.scale(sq, 1.0 / ps.target.len() as f64))
}

fn for_each_sample<T: Send>(
    threads: usize,
    items: &[&PreparedSample],
    f: impl Fn(usize, &PreparedSample) -> T + Sync,
) -> Vec<T> {
    if threads == 1 {
        items.iter().enumerate().map(|(i, ps)| f(i, ps)).collect()
    } else {
        items.par_iter().enumerate().map(|(i, ps)| f(i, ps)).collect()
    }
}

fn fold_grads(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match a.as_mut() {
                Some(t) => {
                    for (x, y) in t.data.iter_mut().zip(&g.data) {
                        *x += scale * y;
                    }
                }
                None => {
                    let mut t = g;
                    for v in &mut t.data {
                        *v *= scale;
                    }
                    *a = Some(t);
                }
            }
        }
    }
}

struct StageOutcome {
    weights: ModelWeights,
    record: RunRecord,
}

/// Shared epoch loop: batch gradients, Adam step, validation, early stopping,
/// best-weights snapshotting.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    mut weights: ModelWeights,
    stage: &str,
    cfg: &RunConfig,
    train: &[PreparedSample],
    train_step: impl Fn(&ModelWeights, &[&PreparedSample], usize, &[usize]) -> Result<(f64, Vec<Option<Tensor>>)>,
    val_loss_fn: impl Fn(&ModelWeights, usize) -> Result<f64>,
) -> Result<StageOutcome> {
    let mut adam = Adam::new(&weights.store);
    let mut stopper = EarlyStopper::new(cfg.train.early_stop_patience);
    let mut best_store: Option<ParamStore> = None;
    let mut best_val = f64::INFINITY;
    let mut record = RunRecord {
        stage: stage.to_string(),
        epochs: Vec::new(),
        stop_reason: "completed".to_string(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        checkpoint: None,
    };
    let n = train.len();
    if n == 0 {
        return Err(CoreError::InsufficientData("no training samples".into()));
    }
    'outer: for epoch in 0..cfg.train.epochs {
        let t0 = std::time::Instant::now();
        let lr = cosine_lr(epoch, cfg.train.lr_init, cfg.train.epochs);
        // Seeded Fisher-Yates shuffle of the sample order.
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = stream(cfg.seed, StreamKind::Shuffle, &[stage.len() as u64, epoch as u64]);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut srng, 0..=i);
            order.swap(i, j);
        }
        let mut train_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let items: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = train_step(&weights, &items, epoch, chunk)?;
            if !loss.is_finite() {
                record.stop_reason = "diverged".to_string();
                break 'outer;
            }
            adam.step(&mut weights.store, &grads, lr);
            train_loss += loss;
            batches += 1.0;
        }
        train_loss /= batches;
        let val_loss = val_loss_fn(&weights, epoch)?;
        if !val_loss.is_finite() {
            record.stop_reason = "diverged".to_string();
            break;
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision == StopDecision::Improved {
            best_store = Some(weights.store.clone());
            best_val = val_loss;
        }
        record.epochs.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            lr,
            train_loss,
            val_loss,
            wall_ms: t0.elapsed().as_millis() as u64,
            best: decision == StopDecision::Improved,
        });
        if decision == StopDecision::Stop {
            record.stop_reason = format!("early_stop_epoch_{epoch}");
            break;
        }
    }
    // Persist the best-validation weights, not the last-epoch weights.
    if let Some(best) = best_store {
        weights.store = best;
    }
    record.best_epoch = stopper.best_epoch;
    record.best_val_loss = best_val;
    Ok(StageOutcome { weights, record })
}

/// Stage 1: train the deterministic mean predictor on pixel MSE.
pub fn train_deterministic(
    cfg: &RunConfig,
    train: &[PreparedSample],
    val: &[PreparedSample],
) -> Result<(ModelWeights, RunRecord)> {
    let weights = ModelWeights::new(&cfg.unet_config(), NetRole::Det, cfg.seed)?;
    let spec = cfg.hyper.conservation;
    let factors = cfg.factors;
    let threads = cfg.train.threads;
    let outcome = run_stage(
        weights,
        "det",
        cfg,
        train,
        |w, items, epoch, _ids| {
            let inv = 1.0 / items.len() as f64;
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> =
                for_each_sample(threads, items, |_i, ps| {
                    let mut g = Graph::new(&w.store);
                    let loss = det_loss_graph(w, &mut g, ps, &spec, factors, Some(epoch))?;
                    let grads = g.backward(loss)?;
                    Ok((g.value(loss).data[0], grads))
                });
            let mut total = 0.0;
            let mut acc: Vec<Option<Tensor>> = vec![None; w.store.len()];
            for r in results {
                let (l, grads) = r?;
                total += l * inv;
                fold_grads(&mut acc, grads, inv);
            }
            Ok((total, acc))
        },
        |w, epoch| {
            let results: Vec<Result<f64>> = for_each_sample(
                threads,
                &val.iter().collect::<Vec<_>>(),
                |_i, ps| {
                    let mut g = Graph::new(&w.store);
                    let loss = det_loss_graph(w, &mut g, ps, &spec, factors, Some(epoch))?;
                    Ok(g.value(loss).data[0])
                },
            );
            let mut total = 0.0;
            for r in results {
                total += r?;
            }
            Ok(total / val.len().max(1) as f64)
        },
    )?;
    Ok((outcome.weights, outcome.record))
}

/// Deterministic prediction with the conservation transform in inference
/// mode. Negative raw values are floored at zero when the transform is off.
pub fn det_predict(
    det: &ModelWeights,
    ps: &PreparedSample,
    spec: &ConservationSpec,
    factors: SRFactors,
) -> Result<FieldSequence> {
    let raw = det.det_forward(&ps.det_input)?;
    let (t, h, w) = (raw.shape[0], raw.shape[1], raw.shape[2]);
    let frames: Vec<Vec<f64>> = (0..t)
        .map(|i| raw.data[i * h * w..(i + 1) * h * w].to_vec())
        .collect();
    let out = conserve_pipeline(&frames, &ps.lr_last, factors, spec, None)?;
    let fields = out
        .into_iter()
        .map(|vals| Field::new(vals.into_iter().map(|v| v.max(0.0)).collect(), h, w))
        .collect::<Result<Vec<_>>>()?;
    FieldSequence::new(
        fields,
        ps.sample.hr_target.start_time,
        ps.sample.hr_target.tile_id,
        1,
    )
}

/// Residual-stage samples: freeze the deterministic net, compute D and
/// r0 = y - D once per sample.
pub fn prepare_residuals(
    det: &ModelWeights,
    samples: &[PreparedSample],
    spec: &ConservationSpec,
    factors: SRFactors,
    threads: usize,
) -> Result<Vec<ResidualSample>> {
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let results: Vec<Result<ResidualSample>> = for_each_sample(threads, &refs, |_i, ps| {
        let d = det_predict(det, ps, spec, factors)?;
        let (h, w) = d.frame_shape();
        let t = d.len();
        let det_mean = Tensor::new(
            vec![t, h, w],
            d.frames().iter().flat_map(|f| f.values().iter().copied()).collect(),
        );
        let r0 = Tensor::new(
            vec![t, h, w],
            ps.target
                .data
                .iter()
                .zip(&det_mean.data)
                .map(|(y, d)| y - d)
                .collect(),
        );
        Ok(ResidualSample {
            r0,
            bicubic_frame: ps.context_bicubic.last().unwrap().clone(),
            det_mean,
            context_bicubic: ps.context_bicubic.clone(),
        })
    });
    results.into_iter().collect()
}

/// Stage 2: train the diffusion net on the velocity loss, deterministic
/// weights frozen.
pub fn train_diffusion(
    cfg: &RunConfig,
    det: &ModelWeights,
    train: &[PreparedSample],
    val: &[PreparedSample],
) -> Result<(ModelWeights, RunRecord)> {
    let weights = ModelWeights::new(&cfg.unet_config(), NetRole::Dif, cfg.seed.wrapping_add(1))?;
    let schedule = NoiseSchedule::new(cfg.hyper.schedule)?;
    let threads = cfg.train.threads;
    let spec = cfg.hyper.conservation;
    let train_res = prepare_residuals(det, train, &spec, cfg.factors, threads)?;
    let val_res = prepare_residuals(det, val, &spec, cfg.factors, threads)?;
    let n_elem = |r: &ResidualSample| r.r0.len();
    let seed = cfg.seed;
    let outcome = run_stage(
        weights,
        "dif",
        cfg,
        train,
        |w, items, epoch, ids| {
            let inv = 1.0 / items.len() as f64;
            let pairs: Vec<(usize, usize)> =
                ids.iter().copied().enumerate().map(|(k, id)| (k, id)).collect();
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = if threads == 1 {
                pairs
                    .iter()
                    .map(|&(_, id)| step_one(w, &train_res[id], &schedule, seed, epoch, id, n_elem))
                    .collect()
            } else {
                pairs
                    .par_iter()
                    .map(|&(_, id)| step_one(w, &train_res[id], &schedule, seed, epoch, id, n_elem))
                    .collect()
            };
            let mut total = 0.0;
            let mut acc: Vec<Option<Tensor>> = vec![None; w.store.len()];
            for r in results {
                let (l, grads) = r?;
                total += l * inv;
                fold_grads(&mut acc, grads, inv);
            }
            Ok((total, acc))
        },
        |w, _epoch| {
            // Fixed per-sample (j, eps) draws keep validation comparable
            // across epochs.
            let idxs: Vec<usize> = (0..val_res.len()).collect();
            let results: Vec<Result<f64>> = if threads == 1 {
                idxs.iter()
                    .map(|&i| val_one(w, &val_res[i], &schedule, seed, i))
                    .collect()
            } else {
                idxs.par_iter()
                    .map(|&i| val_one(w, &val_res[i], &schedule, seed, i))
                    .collect()
            };
            let mut total = 0.0;
            for r in results {
                total += r?;
            }
            Ok(total / val_res.len().max(1) as f64)
        },
    )?;
    Ok((outcome.weights, outcome.record))
}

fn step_one(
    w: &ModelWeights,
    rs: &ResidualSample,
    schedule: &NoiseSchedule,
    seed: u64,
    epoch: usize,
    id: usize,
    n_elem: impl Fn(&ResidualSample) -> usize,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut rng = stream(seed, StreamKind::TrainNoise, &[epoch as u64, id as u64]);
    let j = rand::Rng::gen_range(&mut rng, 1..=schedule.j_steps());
    let eps = standard_normal_vec(&mut rng, n_elem(rs));
    training_loss(&[rs], w, schedule, &[(j, eps)])
}

fn val_one(
    w: &ModelWeights,
    rs: &ResidualSample,
    schedule: &NoiseSchedule,
    seed: u64,
    id: usize,
) -> Result<f64> {
    let mut rng = stream(seed, StreamKind::ValNoise, &[id as u64]);
    let j = rand::Rng::gen_range(&mut rng, 1..=schedule.j_steps());
    let eps = standard_normal_vec(&mut rng, rs.r0.len());
    let r_j = crate::diffusion::forward_noise(&rs.r0.data, j, &eps, schedule)?;
    let v = velocity_target(&rs.r0.data, &eps, j, schedule)?;
    let mut g = Graph::new(&w.store);
    let noised = g.input(Tensor::new(rs.r0.shape.clone(), r_j));
    let v_hat = g_dif(w, &mut g, noised, rs, j)?;
    let target = Tensor::new(g.value(v_hat).shape.clone(), v);
    let loss = g.sq_diff_sum(v_hat, &target);
    Ok(g.value(loss).data[0])
}

fn g_dif(w: &ModelWeights, g: &mut Graph, noised: Var, rs: &ResidualSample, j: usize) -> Result<Var> {
    w.dif_forward_graph(g, noised, &rs.bicubic_frame, &rs.det_mean, j, &rs.context_bicubic)
}

/// Which prediction a baseline row uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Bicubic,
    Nearest,
}

/// Baseline prediction: upsample the last LR frame and replicate it T times.
pub fn baseline_prediction(sample: &Sample, kind: BaselineKind) -> Result<FieldSequence> {
    let last = sample.lr_context.frames().last().unwrap();
    let up = SRFactors { s: sample.factors.s, t: 1 };
    let frame = match kind {
        BaselineKind::Bicubic => upsample_bicubic(last, up)?,
        BaselineKind::Nearest => upsample_nearest(last, up)?,
    };
    FieldSequence::new(
        vec![frame; sample.factors.t],
        sample.hr_target.start_time,
        sample.hr_target.tile_id,
        1,
    )
}

fn forecast_from_member_lists(
    members: Vec<FieldSequence>,
    det_mean: FieldSequence,
    target: FieldSequence,
) -> Result<EnsembleForecast> {
    EnsembleForecast::new(members, det_mean, target)
}

/// Score a baseline over the given samples.
pub fn run_baselines(samples: &[PreparedSample], kind: BaselineKind, seed: u64) -> Result<MetricReport> {
    let forecasts = samples
        .iter()
        .map(|ps| {
            let pred = baseline_prediction(&ps.sample, kind)?;
            forecast_from_member_lists(vec![pred.clone()], pred, ps.sample.hr_target.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut prng = stream(seed, StreamKind::Pit, &[kind as u64]);
    report_for_forecasts(&forecasts, &mut prng)
}

/// Score the deterministic-only model (a single-member ensemble of D).
pub fn evaluate_det_only(
    det: &ModelWeights,
    samples: &[PreparedSample],
    spec: &ConservationSpec,
    factors: SRFactors,
    seed: u64,
) -> Result<MetricReport> {
    let forecasts = samples
        .iter()
        .map(|ps| {
            let d = det_predict(det, ps, spec, factors)?;
            forecast_from_member_lists(vec![d.clone()], d, ps.sample.hr_target.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut prng = stream(seed, StreamKind::Pit, &[101]);
    report_for_forecasts(&forecasts, &mut prng)
}

/// Build the full-model forecasts (K sampled members around D) for a set of
/// samples.
pub fn full_model_forecasts(
    det: &ModelWeights,
    dif: &ModelWeights,
    samples: &[PreparedSample],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<EnsembleForecast>> {
    let schedule = NoiseSchedule::new(cfg.hyper.schedule)?;
    let spec = cfg.hyper.conservation;
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let results: Vec<Result<EnsembleForecast>> =
        for_each_sample(cfg.train.threads, &refs, |i, ps| {
            let d = det_predict(det, ps, &spec, cfg.factors)?;
            let cond = Conditioning {
                lr_context: ps.sample.lr_context.clone(),
                topography: ps.sample.topography.clone(),
                det_mean: d.clone(),
                factors: cfg.factors,
            };
            let members = sample_ensemble(
                &cond,
                dif,
                &schedule,
                Some(&spec),
                cfg.train.eval_members,
                seed,
                i as u64,
            )?;
            forecast_from_member_lists(members, d, ps.sample.hr_target.clone())
        });
    results.into_iter().collect()
}

/// Score the full model.
pub fn evaluate_full(
    det: &ModelWeights,
    dif: &ModelWeights,
    samples: &[PreparedSample],
    cfg: &RunConfig,
    seed: u64,
) -> Result<MetricReport> {
    let forecasts = full_model_forecasts(det, dif, samples, cfg, seed)?;
    let mut prng = stream(seed, StreamKind::Pit, &[202]);
    report_for_forecasts(&forecasts, &mut prng)
}

pub const DET_WEIGHTS: &str = "weights/det.bin";
pub const DIF_WEIGHTS: &str = "weights/dif.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const RECORD_FILE: &str = "record.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

pub struct TrainOutcome {
    pub det_record: RunRecord,
    pub dif_record: Option<RunRecord>,
    pub cap_value: f64,
}

/// End-to-end training into a run directory: `config.json`,
/// `weights/{det,dif}.bin`, `record.jsonl` (one epoch per line plus one
/// summary line per stage).
pub fn train_run(cfg: &RunConfig, run_dir: &Path, deterministic_only: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;
    let split = build_split(cfg)?;
    let mut record_lines = Vec::new();

    let (det, det_record) = train_deterministic(cfg, &split.train, &split.val)?;
    for e in &det_record.epochs {
        record_lines.push(serde_json::to_string(e)?);
    }
    record_lines.push(serde_json::to_string(&serde_json::json!({
        "summary": {
            "stage": "det",
            "stop_reason": det_record.stop_reason,
            "best_epoch": det_record.best_epoch,
            "best_val_loss": det_record.best_val_loss,
            "checkpoint": DET_WEIGHTS,
        }
    }))?);
    save_weights(&det, &run_dir.join(DET_WEIGHTS))?;
    if det_record.diverged() {
        std::fs::write(run_dir.join(RECORD_FILE), record_lines.join("\n") + "\n")?;
        return Err(CoreError::Diverged("deterministic stage produced a non-finite loss".into()));
    }

    let dif_record = if deterministic_only {
        None
    } else {
        let (dif, rec) = train_diffusion(cfg, &det, &split.train, &split.val)?;
        for e in &rec.epochs {
            record_lines.push(serde_json::to_string(e)?);
        }
        record_lines.push(serde_json::to_string(&serde_json::json!({
            "summary": {
                "stage": "dif",
                "stop_reason": rec.stop_reason,
                "best_epoch": rec.best_epoch,
                "best_val_loss": rec.best_val_loss,
                "checkpoint": DIF_WEIGHTS,
            }
        }))?);
        save_weights(&dif, &run_dir.join(DIF_WEIGHTS))?;
        if rec.diverged() {
            std::fs::write(run_dir.join(RECORD_FILE), record_lines.join("\n") + "\n")?;
            return Err(CoreError::Diverged("diffusion stage produced a non-finite loss".into()));
        }
        Some(rec)
    };
    std::fs::write(run_dir.join(RECORD_FILE), record_lines.join("\n") + "\n")?;
    Ok(TrainOutcome {
        det_record,
        dif_record,
        cap_value: split.cap_value,
    })
}

/// Load a run directory back: config plus both weight sets.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, ModelWeights, Option<ModelWeights>)> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let det = load_weights(&cfg.unet_config(), NetRole::Det, &run_dir.join(DET_WEIGHTS))?;
    let dif_path = run_dir.join(DIF_WEIGHTS);
    let dif = if dif_path.exists() {
        Some(load_weights(&cfg.unet_config(), NetRole::Dif, &dif_path)?)
    } else {
        None
    };
    Ok((cfg, det, dif))
}

/// The validation samples used for evaluation, capped per config.
pub fn eval_samples(cfg: &RunConfig) -> Result<Vec<PreparedSample>> {
    let split = build_split(cfg)?;
    let mut val = split.val;
    if cfg.train.eval_max_samples > 0 && val.len() > cfg.train.eval_max_samples {
        val.truncate(cfg.train.eval_max_samples);
    }
    Ok(val)
}
