//! The scale-adaptivity recipe: elbow selection of the context length L,
//! PITD-guided selection of the schedule amplitude, the PIT-shape rule for
//! the conservation function, and the published per-factor configurations.

use crate::config::{HyperParams, RunConfig};
use crate::conserve::{ConservationSpec, FFamily};
use crate::diffusion::ScheduleSpec;
use crate::error::CoreError;
use crate::field::SRFactors;
use crate::metrics::{pit_values, pitd};
use crate::rng::{stream, StreamKind};
use crate::train::{
    build_split, evaluate_full, full_model_forecasts, train_deterministic, train_diffusion,
};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneGrid {
    pub l_candidates: Vec<usize>,
    pub beta_max_candidates: Vec<f64>,
    pub f_candidates: Vec<ConservationSpec>,
    pub rel_gain_threshold: f64,
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.l_candidates.is_empty() || self.beta_max_candidates.is_empty() {
            return Err(CoreError::Config("tune grid needs candidates".into()));
        }
        if self.l_candidates.windows(2).any(|w| w[0] >= w[1])
            || self.beta_max_candidates.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CoreError::Config("candidates must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneResult {
    pub context_len: usize,
    pub attention_time: usize,
    pub beta_max: f64,
    pub conservation: ConservationSpec,
    pub l_scores: Vec<(usize, f64)>,
    pub beta_scores: Vec<(f64, f64)>,
    pub f_scores: Vec<(f64, f64)>,
}

/// Smallest candidate beyond which the (lower-is-better) score improves by
/// less than the relative threshold; the last candidate when every gain stays
/// above it.
pub fn elbow_select_l(scores: &[(usize, f64)], rel_gain_threshold: f64) -> Result<usize> {
    if scores.is_empty() {
        return Err(CoreError::InsufficientData("no elbow candidates".into()));
    }
    for pair in scores.windows(2) {
        let (l, s) = pair[0];
        let (_, s_next) = pair[1];
        let rel_gain = (s - s_next) / s.abs().max(1e-12);
        if rel_gain < rel_gain_threshold {
            return Ok(l);
        }
    }
    Ok(scores.last().unwrap().0)
}

/// Candidate minimizing PITD; ties break toward the smaller amplitude.
pub fn tune_beta_max(pitd_per_candidate: &[(f64, f64)]) -> Result<f64> {
    if pitd_per_candidate.is_empty() {
        return Err(CoreError::InsufficientData("no beta candidates".into()));
    }
    let mut best = pitd_per_candidate[0];
    for &(beta, score) in &pitd_per_candidate[1..] {
        if score < best.1 {
            best = (beta, score);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitShape {
    /// Tail-heavy: underdispersive ensemble.
    UShaped,
    /// Center-heavy: overdispersive ensemble.
    Bell,
    Flat,
}

/// Decile-mass rule: U-shaped when the first and last deciles together hold
/// more than 0.25 of the mass; bell when the center two deciles hold more
/// than 0.3; flat otherwise.
pub fn classify_pit_shape(u_values: &[f64]) -> Result<PitShape> {
    if u_values.is_empty() {
        return Err(CoreError::InsufficientData("no PIT values".into()));
    }
    let mut deciles = [0.0f64; 10];
    for &u in u_values {
        let d = ((u * 10.0) as usize).min(9);
        deciles[d] += 1.0;
    }
    let n = u_values.len() as f64;
    for d in &mut deciles {
        *d /= n;
    }
    let tails = deciles[0] + deciles[9];
    let center = deciles[4] + deciles[5];
    if tails > 0.25 {
        Ok(PitShape::UShaped)
    } else if center > 0.3 {
        Ok(PitShape::Bell)
    } else {
        Ok(PitShape::Flat)
    }
}

/// Directional rule for the conservation function: a U-shaped reference PIT
/// moves the exponent up, a bell-shaped one moves it down, a flat one keeps
/// the current spec; the surviving candidate with minimal PITD wins.
pub fn tune_f(
    current: &ConservationSpec,
    reference_shape: PitShape,
    candidates: &[(ConservationSpec, f64)],
) -> ConservationSpec {
    let allowed: Vec<&(ConservationSpec, f64)> = match reference_shape {
        PitShape::Flat => return *current,
        PitShape::UShaped => candidates.iter().filter(|(c, _)| c.exponent > current.exponent).collect(),
        PitShape::Bell => candidates.iter().filter(|(c, _)| c.exponent < current.exponent).collect(),
    };
    allowed
        .into_iter()
        .fold(None::<&(ConservationSpec, f64)>, |best, c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
        .map(|(spec, _)| *spec)
        .unwrap_or(*current)
}

fn power_sqrt(alpha: f64) -> ConservationSpec {
    ConservationSpec {
        family: FFamily::Power,
        exponent: 0.5,
        alpha,
        enabled: true,
        activation_epoch: 20,
    }
}

fn identity(alpha: f64) -> ConservationSpec {
    ConservationSpec {
        family: FFamily::Identity,
        exponent: 1.0,
        alpha,
        enabled: true,
        activation_epoch: 20,
    }
}

/// The four published per-factor configurations, with L derived as A_T / T.
pub fn table2_fixtures() -> Vec<(SRFactors, HyperParams)> {
    let schedule = |beta_max: f64| ScheduleSpec {
        j_steps: 1000,
        beta_min: 1e-4,
        beta_max,
    };
    vec![
        (
            SRFactors { s: 1, t: 3 },
            HyperParams {
                context_len: 12 / 3,
                schedule: schedule(1.5e-2),
                conservation: power_sqrt(1e-2),
            },
        ),
        (
            SRFactors { s: 10, t: 1 },
            HyperParams {
                context_len: 10,
                schedule: schedule(1e-2),
                conservation: power_sqrt(1e-2),
            },
        ),
        (
            SRFactors { s: 10, t: 3 },
            HyperParams {
                context_len: 15 / 3,
                schedule: schedule(2e-2),
                conservation: identity(2e-2),
            },
        ),
        (
            SRFactors { s: 25, t: 6 },
            HyperParams {
                context_len: 18 / 6,
                schedule: schedule(3.5e-2),
                conservation: identity(4e-2),
            },
        ),
    ]
}

/// One full tuning pass at the base config's scale: elbow over L on the
/// deterministic validation loss, then PITD-guided beta selection, then the
/// PIT-shape rule over the conservation candidates (retraining from scratch
/// per candidate). Writes a sweep manifest when `root` is given.
pub fn run_sweep(base: &RunConfig, grid: &TuneGrid, root: Option<&Path>) -> Result<TuneResult> {
    grid.validate()?;
    let mut l_scores = Vec::new();
    for &l in &grid.l_candidates {
        let mut cfg = base.clone();
        cfg.hyper.context_len = l;
        cfg.validate()?;
        let split = build_split(&cfg)?;
        let (_w, record) = train_deterministic(&cfg, &split.train, &split.val)?;
        l_scores.push((l, record.best_val_loss));
    }
    let chosen_l = elbow_select_l(&l_scores, grid.rel_gain_threshold)?;

    let mut beta_scores = Vec::new();
    for &beta_max in &grid.beta_max_candidates {
        let mut cfg = base.clone();
        cfg.hyper.context_len = chosen_l;
        cfg.hyper.schedule.beta_max = beta_max;
        cfg.validate()?;
        let split = build_split(&cfg)?;
        let (det, _r) = train_deterministic(&cfg, &split.train, &split.val)?;
        let (dif, _r) = train_diffusion(&cfg, &det, &split.train, &split.val)?;
        let mut val = split.val;
        if cfg.train.eval_max_samples > 0 && val.len() > cfg.train.eval_max_samples {
            val.truncate(cfg.train.eval_max_samples);
        }
        let report = evaluate_full(&det, &dif, &val, &cfg, cfg.seed)?;
        beta_scores.push((beta_max, report.pitd));
    }
    let chosen_beta = tune_beta_max(&beta_scores)?;

    let mut conservation = base.hyper.conservation;
    let mut f_scores = Vec::new();
    if grid.f_candidates.len() > 1 {
        let mut outcomes = Vec::new();
        let mut reference_us: Option<Vec<f64>> = None;
        for (ci, cand) in grid.f_candidates.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.hyper.context_len = chosen_l;
            cfg.hyper.schedule.beta_max = chosen_beta;
            cfg.hyper.conservation = *cand;
            cfg.validate()?;
            let split = build_split(&cfg)?;
            let (det, _r) = train_deterministic(&cfg, &split.train, &split.val)?;
            let (dif, _r) = train_diffusion(&cfg, &det, &split.train, &split.val)?;
            let mut val = split.val;
            if cfg.train.eval_max_samples > 0 && val.len() > cfg.train.eval_max_samples {
                val.truncate(cfg.train.eval_max_samples);
            }
            let forecasts = full_model_forecasts(&det, &dif, &val, &cfg, cfg.seed)?;
            let mut prng = stream(cfg.seed, StreamKind::Pit, &[500 + ci as u64]);
            let mut us = Vec::new();
            for fc in &forecasts {
                us.extend(pit_values(fc, &mut prng));
            }
            let score = pitd(&us)?;
            f_scores.push((cand.exponent, score));
            if cand == &base.hyper.conservation {
                reference_us = Some(us.clone());
            }
            outcomes.push((*cand, score));
        }
        let reference = match reference_us {
            Some(us) => classify_pit_shape(&us)?,
            // Fall back to the first candidate's run as the reference.
            None => PitShape::Flat,
        };
        conservation = tune_f(&base.hyper.conservation, reference, &outcomes);
    }

    let result = TuneResult {
        context_len: chosen_l,
        attention_time: base.factors.t * chosen_l,
        beta_max: chosen_beta,
        conservation,
        l_scores,
        beta_scores,
        f_scores,
    };
    if let Some(root) = root {
        std::fs::create_dir_all(root)?;
        let manifest = serde_json::json!({
            "grid": grid,
            "factors": base.factors,
            "result": result,
        });
        std::fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Field, FieldSequence};
    use crate::metrics::EnsembleForecast;
    use crate::rng::standard_normal_vec;
    use rand::Rng;

    #[test]
    fn elbow_hand_example() {
        let scores = vec![(1, 10.0), (2, 5.0), (3, 4.9), (4, 4.89)];
        assert_eq!(elbow_select_l(&scores, 0.02).unwrap(), 2);
    }

    #[test]
    fn elbow_edge_cases() {
        assert_eq!(elbow_select_l(&[(3, 1.0)], 0.02).unwrap(), 3);
        // Flat scores: zero gain everywhere, smallest candidate.
        assert_eq!(elbow_select_l(&[(1, 2.0), (2, 2.0), (4, 2.0)], 0.02).unwrap(), 1);
        // Monotone worsening: first gain is negative, smallest candidate.
        assert_eq!(elbow_select_l(&[(1, 2.0), (2, 3.0), (4, 9.0)], 0.02).unwrap(), 1);
        // Gains stay above threshold: the last candidate wins.
        assert_eq!(elbow_select_l(&[(1, 8.0), (2, 4.0), (4, 2.0)], 0.02).unwrap(), 4);
    }

    #[test]
    fn elbow_monotone_in_threshold() {
        // A larger threshold never selects a larger L.
        let mut rng = stream(3, StreamKind::Test, &[]);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let mut scores = Vec::new();
            let mut s = 10.0;
            for i in 0..n {
                scores.push((i + 1, s));
                s *= rng.gen_range(0.5..1.1);
            }
            let lo = elbow_select_l(&scores, 0.01).unwrap();
            let hi = elbow_select_l(&scores, 0.2).unwrap();
            assert!(hi <= lo, "threshold 0.2 chose {hi} > {lo} on {scores:?}");
        }
    }

    #[test]
    fn beta_argmin_and_ties() {
        let picked = tune_beta_max(&[(1e-2, 0.15), (2e-2, 0.03), (3e-2, 0.09)]).unwrap();
        assert_eq!(picked, 2e-2);
        // Tie breaks toward the smaller amplitude.
        let picked = tune_beta_max(&[(1e-2, 0.05), (2e-2, 0.05)]).unwrap();
        assert_eq!(picked, 1e-2);
    }

    fn synthetic_pit(spread: f64, seed: u64) -> Vec<f64> {
        // Target pixels from N(0,1) mapped to positive via exp; ensemble from
        // the same law with the log-scale spread inflated or deflated.
        let n = 4000;
        let mut rng = stream(seed, StreamKind::Test, &[]);
        let target: Vec<f64> = standard_normal_vec(&mut rng, n).iter().map(|v| v.exp()).collect();
        let members: Vec<FieldSequence> = (0..4)
            .map(|_| {
                let vals: Vec<f64> = standard_normal_vec(&mut rng, n)
                    .iter()
                    .map(|v| (v * spread).exp())
                    .collect();
                FieldSequence::new(vec![Field::new(vals, 1, n).unwrap()], 0, 0, 1).unwrap()
            })
            .collect();
        let target_seq =
            FieldSequence::new(vec![Field::new(target, 1, n).unwrap()], 0, 0, 1).unwrap();
        let ens = EnsembleForecast::new(members, target_seq.clone(), target_seq).unwrap();
        let mut prng = stream(seed, StreamKind::Pit, &[]);
        pit_values(&ens, &mut prng)
    }

    #[test]
    fn classifier_flags_overdispersed_as_bell() {
        // Inflated spread x3: targets sit mid-distribution, PIT mass centers.
        let us = synthetic_pit(3.0, 11);
        assert_eq!(classify_pit_shape(&us).unwrap(), PitShape::Bell);
    }

    #[test]
    fn classifier_flags_underdispersed_as_u() {
        let us = synthetic_pit(0.3, 13);
        assert_eq!(classify_pit_shape(&us).unwrap(), PitShape::UShaped);
    }

    #[test]
    fn classifier_flags_calibrated_as_flat() {
        let us = synthetic_pit(1.0, 17);
        assert_eq!(classify_pit_shape(&us).unwrap(), PitShape::Flat);
    }

    #[test]
    fn tune_f_direction_rule() {
        let current = identity(1e-2); // exponent 1
        let candidates = vec![(identity(1e-2), 0.05), (power_sqrt(1e-2), 0.04)];
        // Bell (overdispersive): move the exponent down, pick sqrt.
        let picked = tune_f(&current, PitShape::Bell, &candidates);
        assert_eq!(picked.exponent, 0.5);
        // Flat keeps the current spec.
        let kept = tune_f(&current, PitShape::Flat, &candidates);
        assert_eq!(kept, current);
        // U-shaped with no larger exponent available keeps the current spec.
        let kept = tune_f(&current, PitShape::UShaped, &candidates);
        assert_eq!(kept, current);
        // U-shaped from sqrt moves up to identity.
        let from_sqrt = tune_f(&power_sqrt(1e-2), PitShape::UShaped, &candidates);
        assert_eq!(from_sqrt.exponent, 1.0);
    }

    #[test]
    fn table2_rows_match_published_values() {
        let rows = table2_fixtures();
        assert_eq!(rows.len(), 4);
        let (f, hp) = &rows[0];
        assert_eq!((f.s, f.t), (1, 3));
        assert_eq!(hp.context_len, 4); // A_T = 12
        assert_eq!(hp.schedule.beta_max, 1.5e-2);
        assert_eq!(hp.conservation.family, FFamily::Power);
        assert_eq!(hp.conservation.alpha, 1e-2);
        let (f, hp) = &rows[1];
        assert_eq!((f.s, f.t), (10, 1));
        assert_eq!(hp.context_len, 10); // A_T = 10
        assert_eq!(hp.schedule.beta_max, 1e-2);
        let (f, hp) = &rows[2];
        assert_eq!((f.s, f.t), (10, 3));
        assert_eq!(hp.context_len, 5); // A_T = 15
        assert_eq!(hp.schedule.beta_max, 2e-2);
        assert_eq!(hp.conservation.family, FFamily::Identity);
        assert_eq!(hp.conservation.alpha, 2e-2);
        let (f, hp) = &rows[3];
        assert_eq!((f.s, f.t), (25, 6));
        assert_eq!(hp.context_len, 3); // A_T = 18
        assert_eq!(hp.schedule.beta_max, 3.5e-2);
        assert_eq!(hp.conservation.alpha, 4e-2);
    }

    #[test]
    fn table2_internal_consistency_and_trends() {
        let rows = table2_fixtures();
        for (f, hp) in &rows {
            assert_eq!(hp.attention_time(f.t) % f.t, 0);
        }
        // The published alpha thresholds do not decrease with the factors.
        let alphas: Vec<f64> = rows.iter().map(|(_, hp)| hp.conservation.alpha).collect();
        assert!(alphas[0] <= alphas[2] && alphas[2] <= alphas[3]);
        // Attention time does not decrease as T grows with S fixed (10,1) ->
        // (10,3), and beta_max grows with the factor pair overall.
        let at: Vec<usize> = rows.iter().map(|(f, hp)| hp.attention_time(f.t)).collect();
        assert!(at[1] <= at[2]);
        let betas: Vec<f64> = rows.iter().map(|(_, hp)| hp.schedule.beta_max).collect();
        assert!(betas[1] <= betas[0] && betas[0] <= betas[2] && betas[2] <= betas[3]);
    }
}
