//! The residual denoising-diffusion machinery: linear variance schedule,
//! forward noising, velocity parameterization, noise recovery, the ancestral
//! reverse step, the velocity training loss, and ensemble sampling around a
//! deterministic mean.

use crate::conserve::{conserve_sequence, ConservationSpec};
use crate::error::CoreError;
use crate::field::{Field, FieldSequence, SRFactors};
use crate::grid::upsample_bicubic;
use crate::nets::{ModelWeights, NetRole};
use crate::rng::{standard_normal_vec, stream, StreamKind};
use crate::tensor::{Graph, Tensor};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Serialized schedule parameters; derived arrays are recomputed, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub j_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Linear beta schedule with derived `alpha`, `alpha_bar`, and `sigma` arrays,
/// indexed by step `j` in `1..=J`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let j_steps = spec.j_steps;
        if j_steps == 0 {
            return Err(CoreError::Config("schedule needs at least one step".into()));
        }
        if !(spec.beta_min > 0.0 && spec.beta_max < 1.0 && spec.beta_min < spec.beta_max) {
            return Err(CoreError::Config(format!(
                "betas must satisfy 0 < beta_min < beta_max < 1, got ({}, {})",
                spec.beta_min, spec.beta_max
            )));
        }
        let mut beta = Vec::with_capacity(j_steps);
        let mut alpha = Vec::with_capacity(j_steps);
        let mut alpha_bar = Vec::with_capacity(j_steps);
        let mut sigma = Vec::with_capacity(j_steps);
        let mut prod = 1.0;
        for j in 1..=j_steps {
            let b = spec.beta_min + (j as f64 / j_steps as f64) * (spec.beta_max - spec.beta_min);
            let a = 1.0 - b;
            prod *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(prod);
            sigma.push(b.sqrt());
        }
        Ok(Self {
            spec,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn j_steps(&self) -> usize {
        self.spec.j_steps
    }

    fn check_j(&self, j: usize) -> Result<usize> {
        if j == 0 || j > self.spec.j_steps {
            return Err(CoreError::InvalidValue(format!(
                "step {j} outside 1..={}",
                self.spec.j_steps
            )));
        }
        Ok(j - 1)
    }

    pub fn beta(&self, j: usize) -> f64 {
        self.beta[j - 1]
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.alpha[j - 1]
    }

    pub fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bar[j - 1]
    }

    pub fn sigma(&self, j: usize) -> f64 {
        self.sigma[j - 1]
    }
}

/// `r(j) = sqrt(abar_j) r(0) + sqrt(1 - abar_j) eps`.
pub fn forward_noise(r0: &[f64], j: usize, epsilon: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let idx = schedule.check_j(j)?;
    if r0.len() != epsilon.len() {
        return Err(CoreError::Dimension("epsilon must match r0 shape".into()));
    }
    let ab = schedule.alpha_bar[idx];
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(r0
        .iter()
        .zip(epsilon)
        .map(|(&r, &e)| ca * r + cb * e)
        .collect())
}

/// `v(j) = sqrt(abar_j) eps - sqrt(1 - abar_j) r(0)`.
pub fn velocity_target(r0: &[f64], epsilon: &[f64], j: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let idx = schedule.check_j(j)?;
    if r0.len() != epsilon.len() {
        return Err(CoreError::Dimension("epsilon must match r0 shape".into()));
    }
    let ab = schedule.alpha_bar[idx];
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(r0
        .iter()
        .zip(epsilon)
        .map(|(&r, &e)| ca * e - cb * r)
        .collect())
}

/// `eps_hat(j) = sqrt(abar_j) v_hat + sqrt(1 - abar_j) r(j)`.
pub fn recover_epsilon(v_hat: &[f64], r_j: &[f64], j: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let idx = schedule.check_j(j)?;
    if v_hat.len() != r_j.len() {
        return Err(CoreError::Dimension("v_hat must match r_j shape".into()));
    }
    let ab = schedule.alpha_bar[idx];
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(v_hat
        .iter()
        .zip(r_j)
        .map(|(&v, &r)| ca * v + cb * r)
        .collect())
}

/// One ancestral step: `r(j-1) = (r(j) - beta_j/sqrt(1-abar_j) eps_hat)/sqrt(alpha_j) + sigma_j z`.
///
/// The caller passes `z = 0` at `j = 1`.
pub fn reverse_step(
    r_j: &[f64],
    epsilon_hat: &[f64],
    j: usize,
    z: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let idx = schedule.check_j(j)?;
    if r_j.len() != epsilon_hat.len() || r_j.len() != z.len() {
        return Err(CoreError::Dimension("reverse step inputs must share one shape".into()));
    }
    let ab = schedule.alpha_bar[idx];
    let a = schedule.alpha[idx];
    let b = schedule.beta[idx];
    let sig = schedule.sigma[idx];
    let inv_sqrt_a = 1.0 / a.sqrt();
    let coef = b / (1.0 - ab).sqrt();
    Ok(r_j
        .iter()
        .zip(epsilon_hat)
        .zip(z)
        .map(|((&r, &e), &zz)| inv_sqrt_a * (r - coef * e) + sig * zz)
        .collect())
}

/// Run the full reverse chain from a supplied `r(J)` using a caller-provided
/// velocity predictor and noise source. This is the sampling core shared by
/// the trained model and by oracle-denoiser tests.
pub fn reverse_chain(
    r_init: Vec<f64>,
    schedule: &NoiseSchedule,
    mut velocity: impl FnMut(&[f64], usize) -> Vec<f64>,
    mut noise: impl FnMut(usize, usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let n = r_init.len();
    let mut r = r_init;
    for j in (1..=schedule.j_steps()).rev() {
        let v_hat = velocity(&r, j);
        let eps_hat = recover_epsilon(&v_hat, &r, j, schedule)?;
        let z = if j == 1 { vec![0.0; n] } else { noise(j, n) };
        r = reverse_step(&r, &eps_hat, j, &z, schedule)?;
    }
    Ok(r)
}

/// One training sample prepared for the residual stage: the true residual
/// and the diffusion net's conditioning tensors.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    /// `y - D`, shape (T, H, W).
    pub r0: Tensor,
    /// Bicubic upsampling of the current LR frame, shape (H, W).
    pub bicubic_frame: Tensor,
    /// Deterministic mean D, shape (T, H, W).
    pub det_mean: Tensor,
    /// Bicubic upsampling of every context frame, each (H, W).
    pub context_bicubic: Vec<Tensor>,
}

/// Velocity loss over a batch: mean over samples of the summed squared
/// velocity error, with per-sample `(j, epsilon)` draws supplied by the
/// caller. Returns the loss and the averaged parameter gradients.
pub fn training_loss(
    batch: &[&ResidualSample],
    dif: &ModelWeights,
    schedule: &NoiseSchedule,
    draws: &[(usize, Vec<f64>)],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(CoreError::Arity("batch and draws must pair up nonempty".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Option<Tensor>> = vec![None; dif.store.len()];
    for (s, (j, eps)) in batch.iter().zip(draws) {
        let r_j = forward_noise(&s.r0.data, *j, eps, schedule)?;
        let v = velocity_target(&s.r0.data, eps, *j, schedule)?;
        let mut g = Graph::new(&dif.store);
        let noised = g.input(Tensor::new(s.r0.shape.clone(), r_j));
        let v_hat = dif.dif_forward_graph(
            &mut g,
            noised,
            &s.bicubic_frame,
            &s.det_mean,
            *j,
            &s.context_bicubic,
        )?;
        let target = Tensor::new(g.value(v_hat).shape.clone(), v.clone());
        let loss = g.sq_diff_sum(v_hat, &target);
        let scaled = g.scale(loss, inv);
        total += g.value(scaled).data[0];
        for (acc, gnew) in grads.iter_mut().zip(g.backward(scaled)?) {
            match (acc.as_mut(), gnew) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data.iter_mut().zip(&b.data) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *acc = Some(b),
                _ => {}
            }
        }
    }
    Ok((total, grads))
}

/// Everything the sampler conditions on for one forecast.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub lr_context: FieldSequence,
    pub topography: Field,
    pub det_mean: FieldSequence,
    pub factors: SRFactors,
}

/// Draw `k_members` HR sequences by running the reverse process around the
/// deterministic mean (Algorithm 2). Noise is keyed by
/// `(seed, sample_id, member, step)`, so members are reproducible and
/// independent of evaluation order. The chain starts from the forward
/// process marginal at step J, which sends ensemble spread to zero as the
/// schedule amplitude vanishes.
pub fn sample_ensemble(
    cond: &Conditioning,
    dif: &ModelWeights,
    schedule: &NoiseSchedule,
    conservation: Option<&ConservationSpec>,
    k_members: usize,
    seed: u64,
    sample_id: u64,
) -> Result<Vec<FieldSequence>> {
    if k_members == 0 {
        return Err(CoreError::Arity("ensemble needs K >= 1".into()));
    }
    if dif.role != NetRole::Dif {
        return Err(CoreError::Config("sampling needs diffusion-net weights".into()));
    }
    let t = cond.factors.t;
    if cond.det_mean.len() != t {
        return Err(CoreError::Arity("deterministic mean must hold T frames".into()));
    }
    let (h, w) = cond.det_mean.frame_shape();
    let up = SRFactors { s: cond.factors.s, t: 1 };
    let context_bicubic: Vec<Tensor> = cond
        .lr_context
        .frames()
        .iter()
        .map(|f| {
            upsample_bicubic(f, up).map(|u| Tensor::new(vec![h, w], u.values().to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bicubic_frame = context_bicubic.last().unwrap().clone();
    let det_mean = Tensor::new(
        vec![t, h, w],
        cond.det_mean
            .frames()
            .iter()
            .flat_map(|f| f.values().iter().copied())
            .collect(),
    );
    let n = t * h * w;
    let j_steps = schedule.j_steps();
    let init_std = (1.0 - schedule.alpha_bar(j_steps)).sqrt();
    let mut members = Vec::with_capacity(k_members);
    for k in 0..k_members {
        let mut init = standard_normal_vec(
            &mut stream(seed, StreamKind::MemberInit, &[sample_id, k as u64]),
            n,
        );
        for v in &mut init {
            *v *= init_std;
        }
        let residual = reverse_chain(
            init,
            schedule,
            |r, j| {
                let noised = Tensor::new(vec![t, h, w], r.to_vec());
                dif.dif_forward(&noised, &bicubic_frame, &det_mean, j, &context_bicubic)
                    .expect("conditioning shapes already validated")
                    .data
            },
            |j, len| {
                standard_normal_vec(
                    &mut stream(seed, StreamKind::ReverseStep, &[sample_id, k as u64, j as u64]),
                    len,
                )
            },
        )?;
        // y = D + r(0), floored at zero to stay a physical field; the
        // conservation transform re-applies its own thresholding.
        let frames = (0..t)
            .map(|fi| {
                let vals: Vec<f64> = (0..h * w)
                    .map(|i| (det_mean.data[fi * h * w + i] + residual[fi * h * w + i]).max(0.0))
                    .collect();
                Field::new(vals, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = FieldSequence::new(frames, cond.det_mean.start_time, cond.det_mean.tile_id, 1)?;
        let member = match conservation {
            Some(spec) if spec.enabled => conserve_sequence(
                &raw,
                cond.lr_context.frames().last().unwrap(),
                cond.factors,
                spec,
            )?,
            _ => raw,
        };
        members.push(member);
    }
    Ok(members)
}
