//! Deterministic coarsening by block averaging and the two upsampling
//! operators (cubic-convolution and nearest-neighbor).
//!
//! Coarsening accumulates in 64-bit so the total-mass identity
//! `S^2 * T * sum(lr) == sum(hr)` holds to tight tolerance.

use crate::error::CoreError;
use crate::field::{Field, FieldSequence, SRFactors};
use crate::Result;

/// Block-average an HR frame into an LR frame: each LR pixel is the mean of
/// its `S x S` HR block.
pub fn coarsen_spatial(hr: &Field, f: SRFactors) -> Result<Field> {
    let (h, w) = hr.shape();
    let (lh, lw) = f.lr_shape(h, w)?;
    let s = f.s;
    let inv = 1.0 / (s * s) as f64;
    let src = hr.values();
    let mut out = vec![0.0; lh * lw];
    for n in 0..lh {
        for m in 0..lw {
            let mut acc = 0.0;
            for i in 0..s {
                let row = &src[(s * n + i) * w + s * m..(s * n + i) * w + s * m + s];
                for &v in row {
                    acc += v;
                }
            }
            out[n * lw + m] = acc * inv;
        }
    }
    Field::new(out, lh, lw)
}

/// Space-time block average: the mean over `T` consecutive HR frames of their
/// spatial block averages.
pub fn coarsen_spacetime(hr_seq: &FieldSequence, f: SRFactors) -> Result<Field> {
    if hr_seq.len() != f.t {
        return Err(CoreError::Arity(format!(
            "expected {} frames for temporal factor {}, got {}",
            f.t,
            f.t,
            hr_seq.len()
        )));
    }
    let (h, w) = hr_seq.frame_shape();
    let (lh, lw) = f.lr_shape(h, w)?;
    let mut acc = vec![0.0; lh * lw];
    for frame in hr_seq.frames() {
        let lr = coarsen_spatial(frame, f)?;
        for (a, v) in acc.iter_mut().zip(lr.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / f.t as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Field::new(acc, lh, lw)
}

/// Cubic-convolution kernel weight (Keys, a = -0.5).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Separable 1-D cubic interpolation along one axis with replicate boundary.
///
/// Source sample coordinate for output index `i` is `(i + 0.5)/scale - 0.5`
/// (center-aligned), so `scale == 1` is the identity.
fn upsample_axis_cubic(src: &[f64], n_src: usize, scale: usize) -> Vec<f64> {
    let n_dst = n_src * scale;
    let mut out = vec![0.0; n_dst];
    for (i, o) in out.iter_mut().enumerate() {
        let x = (i as f64 + 0.5) / scale as f64 - 0.5;
        let x0 = x.floor();
        let t = x - x0;
        let base = x0 as isize;
        let mut acc = 0.0;
        for k in -1..=2isize {
            let idx = (base + k).clamp(0, n_src as isize - 1) as usize;
            acc += src[idx] * cubic_weight(t - k as f64);
        }
        *o = acc;
    }
    out
}

/// Cubic-convolution upsampling by `S` along both axes. Negative overshoot
/// is clamped to zero to keep the nonnegativity invariant.
pub fn upsample_bicubic(lr: &Field, f: SRFactors) -> Result<Field> {
    let (h, w) = lr.shape();
    let s = f.s;
    let (oh, ow) = (h * s, w * s);
    // Rows first, then columns.
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &lr.values()[r * w..(r + 1) * w];
        let up = upsample_axis_cubic(line, w, s);
        rows[r * ow..(r + 1) * ow].copy_from_slice(&up);
    }
    let mut out = vec![0.0; oh * ow];
    let mut col = vec![0.0; h];
    for c in 0..ow {
        for r in 0..h {
            col[r] = rows[r * ow + c];
        }
        let up = upsample_axis_cubic(&col, h, s);
        for r in 0..oh {
            out[r * ow + c] = up[r].max(0.0);
        }
    }
    Field::new(out, oh, ow)
}

/// Nearest-neighbor upsampling: exact block replication.
pub fn upsample_nearest(lr: &Field, f: SRFactors) -> Result<Field> {
    let (h, w) = lr.shape();
    let s = f.s;
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let src_row = &lr.values()[(i / s) * w..(i / s) * w + w];
        let dst_row = &mut out[i * ow..(i + 1) * ow];
        for (j, d) in dst_row.iter_mut().enumerate() {
            *d = src_row[j / s];
        }
    }
    Field::new(out, oh, ow)
}
