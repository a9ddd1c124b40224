//! Gridded frame containers: nonnegative 2-D fields, time-indexed sequences,
//! and the super-resolution factor pair.

use crate::error::CoreError;
use crate::Result;
use serde::{Deserialize, Serialize};

/// A single nonnegative gridded frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

impl Field {
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::Dimension(format!(
                "field shape must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(CoreError::Dimension(format!(
                "expected {} values for a {height}x{width} field, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidValue(
                "field values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: vec![0.0; height * width],
            height,
            width,
        }
    }

    pub fn constant(value: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(vec![value; height * width], height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Elementwise map; the result must stay within the field invariants.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.values.iter().map(|&v| f(v)).collect(),
            self.height,
            self.width,
        )
    }
}

/// An ordered run of equally shaped frames with a fixed temporal spacing.
///
/// `stride` is the spacing (in native frame units) between consecutive
/// entries: contexts built for temporal factor `T` hold frames `T` apart,
/// while target blocks hold consecutive frames (`stride` 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSequence {
    frames: Vec<Field>,
    pub start_time: i64,
    pub tile_id: usize,
    pub stride: usize,
}

impl FieldSequence {
    pub fn new(frames: Vec<Field>, start_time: i64, tile_id: usize, stride: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(CoreError::Arity("sequence must hold at least one frame".into()));
        }
        let shape = frames[0].shape();
        if frames.iter().any(|f| f.shape() != shape) {
            return Err(CoreError::Dimension(
                "all frames in a sequence must share one shape".into(),
            ));
        }
        if stride == 0 {
            return Err(CoreError::InvalidValue("sequence stride must be >= 1".into()));
        }
        Ok(Self {
            frames,
            start_time,
            tile_id,
            stride,
        })
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    pub fn sum(&self) -> f64 {
        self.frames.iter().map(Field::sum).sum()
    }

    pub fn map_frames(&self, f: impl Fn(&Field) -> Result<Field>) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(f)
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.start_time, self.tile_id, self.stride)
    }
}

/// The spatial/temporal super-resolution factor pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SRFactors {
    pub s: usize,
    pub t: usize,
}

impl SRFactors {
    pub fn new(s: usize, t: usize) -> Result<Self> {
        if s == 0 || t == 0 {
            return Err(CoreError::InvalidValue("factors must be >= 1".into()));
        }
        Ok(Self { s, t })
    }

    /// LR shape implied by an HR shape, or an error when S does not divide it.
    pub fn lr_shape(&self, hr_height: usize, hr_width: usize) -> Result<(usize, usize)> {
        if hr_height % self.s != 0 || hr_width % self.s != 0 {
            return Err(CoreError::Dimension(format!(
                "spatial factor {} does not divide {}x{}",
                self.s, hr_height, hr_width
            )));
        }
        Ok((hr_height / self.s, hr_width / self.s))
    }
}
