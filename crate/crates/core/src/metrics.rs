//! The eight-metric verification suite: pixel errors (MSE, MAE), extreme-value
//! error (99th-percentile), spectral distance (LSD), distribution distance
//! (EMD), structural similarity (SSIM), and the two ensemble scores
//! (PITD calibration, CRPS).

use crate::error::CoreError;
use crate::field::{Field, FieldSequence};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// K generated sequences plus the deterministic mean and the target.
#[derive(Debug, Clone)]
pub struct EnsembleForecast {
    pub members: Vec<FieldSequence>,
    pub det_mean: FieldSequence,
    pub target: FieldSequence,
}

impl EnsembleForecast {
    pub fn new(
        members: Vec<FieldSequence>,
        det_mean: FieldSequence,
        target: FieldSequence,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(CoreError::Arity("ensemble needs at least one member".into()));
        }
        let shape = (target.len(), target.frame_shape());
        for m in members.iter().chain([&det_mean]) {
            if (m.len(), m.frame_shape()) != shape {
                return Err(CoreError::Dimension(
                    "ensemble members, mean, and target must share one shape".into(),
                ));
            }
        }
        Ok(Self {
            members,
            det_mean,
            target,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// Flat report in the table column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub pe99: f64,
    pub lsd: f64,
    pub emd: f64,
    pub ssim: f64,
    pub pitd: f64,
    pub crps: f64,
}

fn check_same_shape(pred: &FieldSequence, target: &FieldSequence) -> Result<()> {
    if pred.len() != target.len() || pred.frame_shape() != target.frame_shape() {
        return Err(CoreError::Dimension(
            "prediction and target must share one shape".into(),
        ));
    }
    Ok(())
}

fn paired_pixels<'a>(
    pred: &'a FieldSequence,
    target: &'a FieldSequence,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.frames()
        .iter()
        .zip(target.frames())
        .flat_map(|(p, t)| p.values().iter().copied().zip(t.values().iter().copied()))
}

pub fn mse(pred: &FieldSequence, target: &FieldSequence) -> Result<f64> {
    check_same_shape(pred, target)?;
    let n = (pred.len() * pred.frame_shape().0 * pred.frame_shape().1) as f64;
    Ok(paired_pixels(pred, target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

pub fn mae(pred: &FieldSequence, target: &FieldSequence) -> Result<f64> {
    check_same_shape(pred, target)?;
    let n = (pred.len() * pred.frame_shape().0 * pred.frame_shape().1) as f64;
    Ok(paired_pixels(pred, target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Linear-interpolation quantile of unsorted data, `p` in [0, 1].
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::InsufficientData("quantile of empty data".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < v.len() {
        Ok(v[lo] + frac * (v[lo + 1] - v[lo]))
    } else {
        Ok(v[lo])
    }
}

/// Absolute difference of the 99th percentiles of the two pixel pools.
pub fn pe99(pred: &FieldSequence, target: &FieldSequence) -> Result<f64> {
    let p: Vec<f64> = pred.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
    let t: Vec<f64> = target.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
    Ok((quantile(&p, 0.99)? - quantile(&t, 0.99)?).abs())
}

const LOG_FLOOR: f64 = 1e-12;

/// Radially averaged log magnitude spectrum: 2-D FFT magnitudes averaged over
/// integer bins of `round(sqrt(n^2 + m^2))` with signed frequency indices.
fn radial_log_spectrum(field: &Field) -> Vec<f64> {
    let (h, w) = field.shape();
    let mut data: Vec<Complex<f64>> =
        field.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for r in 0..h {
        row_fft.process(&mut data[r * w..(r + 1) * w]);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    let max_bin = (((h / 2) * (h / 2) + (w / 2) * (w / 2)) as f64).sqrt().round() as usize;
    let mut sums = vec![0.0; max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    for r in 0..h {
        let fr = if r <= h / 2 { r as f64 } else { r as f64 - h as f64 };
        for c in 0..w {
            let fc = if c <= w / 2 { c as f64 } else { c as f64 - w as f64 };
            let bin = (fr * fr + fc * fc).sqrt().round() as usize;
            sums[bin] += data[r * w + c].norm();
            counts[bin] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &n)| {
            if n == 0 {
                f64::NAN
            } else {
                (s / n as f64).max(LOG_FLOOR).ln()
            }
        })
        .collect()
}

/// Log-spectral distance between two frames: RMSE over populated radial bins.
pub fn lsd(pred: &Field, target: &Field) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CoreError::Dimension("LSD needs equal shapes".into()));
    }
    let a = radial_log_spectrum(pred);
    let b = radial_log_spectrum(target);
    let mut acc = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(&b) {
        if x.is_nan() || y.is_nan() {
            continue;
        }
        acc += (x - y) * (x - y);
        n += 1;
    }
    Ok((acc / n as f64).sqrt())
}

/// Sequence-level LSD: mean of per-frame distances.
pub fn lsd_sequence(pred: &FieldSequence, target: &FieldSequence) -> Result<f64> {
    check_same_shape(pred, target)?;
    let mut acc = 0.0;
    for (p, t) in pred.frames().iter().zip(target.frames()) {
        acc += lsd(p, t)?;
    }
    Ok(acc / pred.len() as f64)
}

/// 1-D 1-Wasserstein distance between two empirical distributions, via the
/// quantile-function (CDF difference) integral. Handles unequal sizes.
pub fn emd_samples(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::InsufficientData("EMD of empty sample".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mut knots: Vec<f64> = xs.iter().chain(ys.iter()).copied().collect();
    knots.sort_by(|p, q| p.partial_cmp(q).unwrap());
    knots.dedup();
    let (mut i, mut j) = (0usize, 0usize);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let mut total = 0.0;
    for win in knots.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        while i < xs.len() && xs[i] <= lo {
            i += 1;
        }
        while j < ys.len() && ys[j] <= lo {
            j += 1;
        }
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        total += (fa - fb).abs() * (hi - lo);
    }
    Ok(total)
}

/// EMD between the pooled pixel distributions of two sequences.
pub fn emd(pred: &FieldSequence, target: &FieldSequence) -> Result<f64> {
    let p: Vec<f64> = pred.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
    let t: Vec<f64> = target.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
    emd_samples(&p, &t)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Single global-moments SSIM per frame, constants for unit data range.
pub fn ssim(pred: &Field, target: &Field) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CoreError::Dimension("SSIM needs equal shapes".into()));
    }
    let n = pred.values().len() as f64;
    let mu_x = pred.sum() / n;
    let mu_y = target.sum() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in pred.values().iter().zip(target.values()) {
        var_x += (x - mu_x) * (x - mu_x);
        var_y += (y - mu_y) * (y - mu_y);
        cov += (x - mu_x) * (y - mu_y);
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    Ok(((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)))
}

/// Video score: the average of per-frame SSIMs.
pub fn ssim_sequence(pred: &FieldSequence, target: &FieldSequence) -> Result<f64> {
    check_same_shape(pred, target)?;
    let mut acc = 0.0;
    for (p, t) in pred.frames().iter().zip(target.frames()) {
        acc += ssim(p, t)?;
    }
    Ok(acc / pred.len() as f64)
}

/// Randomized probability integral transform of each target pixel under the
/// pooled empirical CDF of every member pixel. Ties (zero inflation) are
/// broken by a uniform draw in `[F(y-), F(y)]`.
pub fn pit_values(ensemble: &EnsembleForecast, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut pool: Vec<f64> = ensemble
        .members
        .iter()
        .flat_map(|m| m.frames().iter().flat_map(|f| f.values().iter().copied()))
        .collect();
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = pool.len() as f64;
    let mut out = Vec::new();
    for frame in ensemble.target.frames() {
        for &y in frame.values() {
            let lt = pool.partition_point(|&x| x < y) as f64 / m;
            let le = pool.partition_point(|&x| x <= y) as f64 / m;
            let u = if le > lt { lt + rng.gen::<f64>() * (le - lt) } else { le };
            out.push(u);
        }
    }
    out
}

/// Root-mean-square deviation of sorted PIT values from the uniform order
/// statistics `(i - 0.5)/N`.
pub fn pitd(u_values: &[f64]) -> Result<f64> {
    if u_values.is_empty() {
        return Err(CoreError::InsufficientData("PITD of empty sample".into()));
    }
    let mut u = u_values.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = u.len() as f64;
    let acc: f64 = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| {
            let want = (i as f64 + 0.5) / n;
            (ui - want) * (ui - want)
        })
        .sum();
    Ok((acc / n).sqrt())
}

/// CRPS of a K-member ensemble at one pixel: exact integral of the squared
/// difference between the empirical step CDF and the observation indicator.
pub fn crps_pixel(ensemble_values: &[f64], y: f64) -> Result<f64> {
    if ensemble_values.is_empty() {
        return Err(CoreError::InsufficientData("CRPS needs K >= 1".into()));
    }
    let mut xs = ensemble_values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = xs.len() as f64;
    let mut knots = xs.clone();
    knots.push(y);
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    let mut i = 0usize;
    for win in knots.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        if hi <= lo {
            continue;
        }
        while i < xs.len() && xs[i] <= lo {
            i += 1;
        }
        let cdf = i as f64 / k;
        let ind = if lo >= y { 1.0 } else { 0.0 };
        total += (cdf - ind) * (cdf - ind) * (hi - lo);
    }
    Ok(total)
}

/// Frame/sequence CRPS: per-pixel ensemble CRPS averaged over all pixels.
pub fn crps(ensemble: &EnsembleForecast) -> Result<f64> {
    let t_frames = ensemble.target.len();
    let (h, w) = ensemble.target.frame_shape();
    let k = ensemble.k();
    let mut vals = vec![0.0; k];
    let mut acc = 0.0;
    for fi in 0..t_frames {
        let tf = &ensemble.target.frames()[fi];
        for idx in 0..h * w {
            for (mi, member) in ensemble.members.iter().enumerate() {
                vals[mi] = member.frames()[fi].values()[idx];
            }
            acc += crps_pixel(&vals, tf.values()[idx])?;
        }
    }
    Ok(acc / (t_frames * h * w) as f64)
}

/// Aggregate report over a set of forecasts (one evaluation split).
///
/// Deterministic-style metrics are computed per member and averaged; CRPS is
/// the pixel-mean ensemble score; PIT values pool across forecasts into one
/// PITD.
pub fn report_for_forecasts(forecasts: &[EnsembleForecast], pit_rng: &mut ChaCha8Rng) -> Result<MetricReport> {
    if forecasts.is_empty() {
        return Err(CoreError::InsufficientData("no forecasts to score".into()));
    }
    let mut sums = [0.0; 6];
    let mut member_count = 0usize;
    let mut crps_sum = 0.0;
    let mut us = Vec::new();
    for fc in forecasts {
        for member in &fc.members {
            sums[0] += mse(member, &fc.target)?;
            sums[1] += mae(member, &fc.target)?;
            sums[2] += pe99(member, &fc.target)?;
            sums[3] += lsd_sequence(member, &fc.target)?;
            sums[4] += emd(member, &fc.target)?;
            sums[5] += ssim_sequence(member, &fc.target)?;
            member_count += 1;
        }
        crps_sum += crps(fc)?;
        us.extend(pit_values(fc, pit_rng));
    }
    let mc = member_count as f64;
    Ok(MetricReport {
        mse: sums[0] / mc,
        mae: sums[1] / mc,
        pe99: sums[2] / mc,
        lsd: sums[3] / mc,
        emd: sums[4] / mc,
        ssim: sums[5] / mc,
        pitd: pitd(&us)?,
        crps: crps_sum / forecasts.len() as f64,
    })
}
