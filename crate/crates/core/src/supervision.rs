//! Visual-explanation losses: L1 supervision against annotated masks, the
//! aggregated prior over annotated masks, KL distribution consistency for
//! unannotated samples, and the indicator switch between them.
//!
//! Conventions: L1 compares min-max maps (annotation masks are min-max
//! normalized). KL compares sum-to-one distributions; both arguments are
//! smoothed with `epsilon` and renormalized first, since Grad-CAM maps contain
//! exact zeros.

use megl_autodiff::{no_grad, Tensor};

use crate::error::{MeglError, Result};
use crate::types::{Normalization, SaliencyMap};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrior {
    pub mean_map: SaliencyMap,
    pub n_contributors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Supervised,
    Consistency,
}

/// Per-row mean absolute difference of `[B, n]` tensors, giving `[B]`.
pub fn l1_rows(pred: &Tensor, truth: &Tensor) -> Tensor {
    let b = pred.shape()[0];
    pred.sub(truth).abs().mean_axis(1).reshape(&[b])
}

/// Per-row `KL(smooth(pred) || smooth(prior))` of `[B, n]` maps against `[B, n]`
/// (or broadcastable `[1, n]`) priors, giving `[B]`.
pub fn kl_rows(pred: &Tensor, prior: &Tensor, epsilon: f64) -> Tensor {
    let b = pred.shape()[0];
    let p = smooth(pred, epsilon);
    let q = smooth(prior, epsilon);
    p.mul(&p.ln().sub(&q.ln())).sum_axis(1).reshape(&[b])
}

fn smooth(x: &Tensor, epsilon: f64) -> Tensor {
    let s = x.add_scalar(epsilon);
    s.div(&s.sum_axis(1))
}

fn check_same_dims(a: &SaliencyMap, b: &SaliencyMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MeglError::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn require(map: &SaliencyMap, norm: Normalization) -> Result<()> {
    if map.normalization() != norm {
        return Err(MeglError::NormalizationMismatch {
            expected: norm.to_string(),
            found: map.normalization().to_string(),
        });
    }
    Ok(())
}

fn row(map: &SaliencyMap) -> Tensor {
    Tensor::new(map.grid().to_vec(), &[1, map.grid().len()])
}

/// Mean absolute per-cell difference between two min-max maps.
pub fn visual_l1_loss(pred: &SaliencyMap, truth: &SaliencyMap) -> Result<f64> {
    check_same_dims(pred, truth)?;
    require(pred, Normalization::MinMax)?;
    require(truth, Normalization::MinMax)?;
    Ok(no_grad(|| l1_rows(&row(pred), &row(truth)).item()))
}

/// Sum-normalizes each annotated map and averages them cell-wise.
///
/// Maps are accumulated in a canonical order (sorted by their grid values),
/// so the result does not depend on the order of `annotated_maps`.
pub fn aggregate_prior(annotated_maps: &[SaliencyMap]) -> Result<AggregatedPrior> {
    let first = annotated_maps.first().ok_or(MeglError::EmptyList)?;
    let (h, w) = first.dims();
    let mut normalized = Vec::with_capacity(annotated_maps.len());
    for (i, m) in annotated_maps.iter().enumerate() {
        check_same_dims(first, m)?;
        let s: f64 = m.grid().iter().sum();
        if s <= 0.0 {
            return Err(MeglError::DegenerateMap(i));
        }
        normalized.push(m.grid().iter().map(|v| v / s).collect::<Vec<f64>>());
    }
    normalized.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = normalized.len();
    let mut mean = vec![0.0; h * w];
    for g in &normalized {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    // The average of sum-to-one maps sums to one up to rounding; fold the
    // residual back in so the stored prior meets the invariant tightly.
    let total: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|m| *m /= total);
    Ok(AggregatedPrior {
        mean_map: SaliencyMap::new(mean, h, w, Normalization::Sum1)?,
        n_contributors: n,
    })
}

/// `KL(p || q)` with `p`, `q` the epsilon-smoothed, sum-normalized pred and prior.
pub fn distribution_consistency_loss(pred: &SaliencyMap, prior: &AggregatedPrior, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(MeglError::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    check_same_dims(pred, &prior.mean_map)?;
    Ok(no_grad(|| kl_rows(&row(pred), &row(&prior.mean_map), epsilon).item()))
}

/// L1 against `truth` when present, otherwise KL against the prior.
pub fn combined_visual_loss(
    pred: &SaliencyMap,
    truth: Option<&SaliencyMap>,
    prior: &AggregatedPrior,
    epsilon: f64,
) -> Result<(f64, Branch)> {
    match truth {
        Some(t) => Ok((visual_l1_loss(pred, t)?, Branch::Supervised)),
        None => Ok((distribution_consistency_loss(pred, prior, epsilon)?, Branch::Consistency)),
    }
}
