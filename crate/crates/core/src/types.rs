//! Value types shared across the pipeline.

use std::fmt;

use crate::error::{MeglError, Result};

/// A `channels x height x width` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
}

impl ImageTensor {
    pub fn new(data: Vec<f64>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(MeglError::Domain(format!("images need 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(MeglError::Domain("image dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(MeglError::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(MeglError::Range(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { data, channels, height, width })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor { data: vec![0.0; channels * height * width], channels, height, width }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    MinMax,
    Sum1,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::MinMax => "minmax",
            Normalization::Sum1 => "sum1",
        })
    }
}

/// A non-negative relevance grid over image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    grid: Vec<f64>,
    height: usize,
    width: usize,
    normalization: Normalization,
}

impl SaliencyMap {
    /// Validates the grid against the invariants of its declared normalization.
    pub fn new(grid: Vec<f64>, height: usize, width: usize, normalization: Normalization) -> Result<Self> {
        if grid.len() != height * width || height == 0 || width == 0 {
            return Err(MeglError::ShapeMismatch(format!(
                "{} cells for a {height}x{width} map",
                grid.len()
            )));
        }
        if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MeglError::Range(format!("saliency value {v} is negative or non-finite")));
        }
        match normalization {
            Normalization::Raw => {}
            Normalization::MinMax => {
                let max = grid.iter().copied().fold(0.0, f64::max);
                if max != 0.0 && (max - 1.0).abs() > 1e-9 {
                    return Err(MeglError::Range(format!("min-max map has maximum {max}")));
                }
            }
            Normalization::Sum1 => {
                let s: f64 = grid.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(MeglError::Range(format!("sum-to-one map sums to {s}")));
                }
            }
        }
        Ok(SaliencyMap { grid, height, width, normalization })
    }

    pub fn raw(grid: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        Self::new(grid, height, width, Normalization::Raw)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Min-max rescaling. An all-equal map becomes all ones when its constant
    /// is positive and all zeros when it is zero.
    pub fn to_minmax(&self) -> SaliencyMap {
        SaliencyMap {
            grid: minmax_values(&self.grid),
            height: self.height,
            width: self.width,
            normalization: Normalization::MinMax,
        }
    }

    /// Rescales so the cells sum to one. Fails on an all-zero map.
    pub fn to_sum1(&self) -> Result<SaliencyMap> {
        let s: f64 = self.grid.iter().sum();
        if s <= 0.0 {
            return Err(MeglError::DegenerateMap(0));
        }
        Ok(SaliencyMap {
            grid: self.grid.iter().map(|v| v / s).collect(),
            height: self.height,
            width: self.width,
            normalization: Normalization::Sum1,
        })
    }
}

/// Rows whose range is below this (relative) tolerance are treated as constant.
pub(crate) fn is_flat(min: f64, max: f64) -> bool {
    max - min <= 1e-12 * max.abs().max(1.0)
}

pub(crate) fn minmax_values(v: &[f64]) -> Vec<f64> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if is_flat(min, max) {
        let fill = if max > 0.0 { 1.0 } else { 0.0 };
        return vec![fill; v.len()];
    }
    v.iter().map(|x| (x - min) / (max - min)).collect()
}

/// One training record: image, label, optional rationale and optional mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: usize,
    pub text_explanation: Option<Vec<usize>>,
    pub visual_explanation: Option<SaliencyMap>,
}

impl Sample {
    pub fn new(
        image: ImageTensor,
        label: usize,
        num_classes: usize,
        text_explanation: Option<Vec<usize>>,
        visual_explanation: Option<SaliencyMap>,
        annotation_dims: (usize, usize),
    ) -> Result<Self> {
        if label >= num_classes {
            return Err(MeglError::LabelOutOfRange { label, classes: num_classes });
        }
        if let Some(m) = &visual_explanation {
            if m.dims() != annotation_dims {
                return Err(MeglError::ShapeMismatch(format!(
                    "mask is {:?}, annotation resolution is {annotation_dims:?}",
                    m.dims()
                )));
            }
        }
        Ok(Sample { image, label, text_explanation, visual_explanation })
    }

    pub fn has_mask(&self) -> bool {
        self.visual_explanation.is_some()
    }
}

/// Per-batch loss record. Absent terms were not computed for the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub pred: f64,
    pub visual: Option<f64>,
    pub dc: Option<f64>,
    pub textual: Option<f64>,
    pub total: f64,
    pub n_supervised: usize,
    pub n_consistency: usize,
}

impl LossBreakdown {
    /// `pred + λ_t·textual + λ_v·(visual + dc)`, absent terms counted as zero.
    pub fn combine(pred: f64, visual: Option<f64>, dc: Option<f64>, textual: Option<f64>, lambda_visual: f64, lambda_textual: f64) -> f64 {
        pred + lambda_textual * textual.unwrap_or(0.0)
            + lambda_visual * (visual.unwrap_or(0.0) + dc.unwrap_or(0.0))
    }

    pub fn recomputed_total(&self, lambda_visual: f64, lambda_textual: f64) -> f64 {
        Self::combine(self.pred, self.visual, self.dc, self.textual, lambda_visual, lambda_textual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_and_bad_channels() {
        assert!(ImageTensor::new(vec![1.2], 1, 1, 1).is_err());
        assert!(ImageTensor::new(vec![0.5; 2 * 4], 2, 2, 2).is_err());
        assert!(ImageTensor::new(vec![f64::NAN], 1, 1, 1).is_err());
        assert!(ImageTensor::new(vec![0.5; 12], 3, 2, 2).is_ok());
    }

    #[test]
    fn minmax_conventions_for_flat_maps() {
        let c = SaliencyMap::raw(vec![0.5; 4], 2, 2).unwrap().to_minmax();
        assert_eq!(c.grid(), &[1.0; 4]);
        let z = SaliencyMap::raw(vec![0.0; 4], 2, 2).unwrap().to_minmax();
        assert_eq!(z.grid(), &[0.0; 4]);
    }

    #[test]
    fn normalization_invariants_checked() {
        assert!(SaliencyMap::new(vec![0.2, 0.3], 1, 2, Normalization::Sum1).is_err());
        assert!(SaliencyMap::new(vec![0.2, 0.8], 1, 2, Normalization::Sum1).is_ok());
        assert!(SaliencyMap::new(vec![0.2, 0.5], 1, 2, Normalization::MinMax).is_err());
        assert!(SaliencyMap::new(vec![-0.1, 0.5], 1, 2, Normalization::Raw).is_err());
    }

    #[test]
    fn sample_label_and_mask_checks() {
        let img = ImageTensor::zeros(3, 2, 2);
        assert!(matches!(
            Sample::new(img.clone(), 5, 4, None, None, (2, 2)),
            Err(MeglError::LabelOutOfRange { .. })
        ));
        let mask = SaliencyMap::new(vec![0.0, 1.0, 0.0], 1, 3, Normalization::MinMax).unwrap();
        assert!(Sample::new(img, 1, 4, None, Some(mask), (2, 2)).is_err());
    }
}
