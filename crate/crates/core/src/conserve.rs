//! Mass conservation: elementwise calibration transform `F` wrapped in
//! thresholded ReLUs, and the global rescaling that pins the predicted HR
//! total to the LR-implied mass.

use crate::error::CoreError;
use crate::field::{Field, FieldSequence, SRFactors};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FFamily {
    Power,
    Identity,
}

/// The conservation transform specification: one of the three retuned
/// hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservationSpec {
    pub family: FFamily,
    pub exponent: f64,
    /// Thresholded-ReLU cutoff applied before and after `F`.
    pub alpha: f64,
    pub enabled: bool,
    /// First training epoch at which the transform is active.
    pub activation_epoch: usize,
}

impl ConservationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.exponent <= 0.0 {
            return Err(CoreError::Config("conservation exponent must be > 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(CoreError::Config("conservation alpha must be >= 0".into()));
        }
        Ok(())
    }

    pub fn disabled() -> Self {
        Self {
            family: FFamily::Identity,
            exponent: 1.0,
            alpha: 0.0,
            enabled: false,
            activation_epoch: 0,
        }
    }

    /// Whether the transform applies at the given training epoch.
    pub fn active_at(&self, epoch: usize) -> bool {
        self.enabled && epoch >= self.activation_epoch
    }

    /// The scalar transform: `relu_alpha -> x^exponent -> relu_alpha`.
    pub fn f_scalar(&self, x: f64) -> f64 {
        let x = (x - self.alpha).max(0.0);
        let x = match self.family {
            FFamily::Identity => x,
            FFamily::Power => x.powf(self.exponent),
        };
        (x - self.alpha).max(0.0)
    }
}

/// Apply the thresholded transform elementwise to every frame. Values may
/// arrive sign-unrestricted (raw network output); the leading ReLU makes the
/// result nonnegative.
pub fn apply_f(raw: &[Vec<f64>], spec: &ConservationSpec) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|frame| frame.iter().map(|&v| spec.f_scalar(v)).collect())
        .collect()
}

/// Outcome of the rescaling step: either the rescaled sequence or the
/// fallback signal for a zero denominator (caller keeps the ReLU-only path).
#[derive(Debug, Clone, PartialEq)]
pub enum MassConserveOutcome {
    Rescaled(Vec<Vec<f64>>),
    ZeroDenominator,
}

/// Rescale a nonnegative T-frame prediction so its total matches the
/// LR-implied mass `S^2 * T * sum(lr)`. One scalar ratio is shared by all
/// frames of the sequence.
pub fn mass_conserve(
    pred: &[Vec<f64>],
    lr_frame: &Field,
    f: SRFactors,
) -> Result<MassConserveOutcome> {
    if pred.len() != f.t {
        return Err(CoreError::Arity(format!(
            "prediction holds {} frames, temporal factor is {}",
            pred.len(),
            f.t
        )));
    }
    let denom: f64 = pred.iter().map(|fr| fr.iter().sum::<f64>()).sum();
    if denom == 0.0 {
        return Ok(MassConserveOutcome::ZeroDenominator);
    }
    let target = (f.s * f.s * f.t) as f64 * lr_frame.sum();
    let rho = target / denom;
    Ok(MassConserveOutcome::Rescaled(
        pred.iter()
            .map(|fr| fr.iter().map(|&v| v * rho).collect())
            .collect(),
    ))
}

/// `apply_f` then `mass_conserve`, honoring the enabled/activation gate and
/// the zero-denominator fallback. `epoch` is `None` at inference (gate open
/// whenever the spec is enabled).
pub fn conserve_pipeline(
    raw: &[Vec<f64>],
    lr_frame: &Field,
    f: SRFactors,
    spec: &ConservationSpec,
    epoch: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let active = match epoch {
        Some(e) => spec.active_at(e),
        None => spec.enabled,
    };
    if !active {
        return Ok(raw.to_vec());
    }
    let shaped = apply_f(raw, spec);
    match mass_conserve(&shaped, lr_frame, f)? {
        MassConserveOutcome::Rescaled(out) => Ok(out),
        MassConserveOutcome::ZeroDenominator => Ok(shaped),
    }
}

/// Convenience wrapper over `FieldSequence` for inference-side use.
pub fn conserve_sequence(
    raw: &FieldSequence,
    lr_frame: &Field,
    f: SRFactors,
    spec: &ConservationSpec,
) -> Result<FieldSequence> {
    let frames: Vec<Vec<f64>> = raw.frames().iter().map(|fr| fr.values().to_vec()).collect();
    let out = conserve_pipeline(&frames, lr_frame, f, spec, None)?;
    let (h, w) = raw.frame_shape();
    let fields = out
        .into_iter()
        .map(|v| Field::new(v, h, w))
        .collect::<Result<Vec<_>>>()?;
    FieldSequence::new(fields, raw.start_time, raw.tile_id, raw.stride)
}
