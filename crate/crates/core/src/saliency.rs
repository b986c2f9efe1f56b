//! Differentiable Grad-CAM, resolution alignment and saliency masking.
//!
//! Grad-CAM weights each feature channel by the spatial mean of the target
//! logit's gradient and keeps the positive part of the weighted sum:
//! `map = ReLU(sum_k alpha_k A^k)`, `alpha_k = mean_ij d logit_c / d A^k_ij`.
//! The gradient is taken with `create_graph`, so the map stays a function of
//! the classifier weights and losses on it train the classifier.

use megl_autodiff::{grad, no_grad, Tensor};

use crate::error::{MeglError, Result};
use crate::nn;
use crate::types::{is_flat, ImageTensor, Normalization, SaliencyMap};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCamResult {
    /// Feature-resolution map after ReLU.
    pub raw_map: SaliencyMap,
    /// Image-resolution, min-max normalized map.
    pub upsampled: SaliencyMap,
    pub target_class: usize,
}

/// Raw Grad-CAM maps `[B, h, w]` for `features: [B, K, h, w]`, `logits: [B, C]`.
///
/// With `create_graph`, the result is differentiable with respect to every
/// tensor the features and logits depend on.
pub fn grad_cam_maps(features: &Tensor, logits: &Tensor, targets: &[usize], create_graph: bool) -> Result<Tensor> {
    let fs = features.shape().to_vec();
    let (b, k, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let classes = logits.shape()[1];
    assert_eq!(targets.len(), b, "one target class per sample");
    if let Some(&c) = targets.iter().find(|&&c| c >= classes) {
        return Err(MeglError::ClassOutOfRange { class: c, classes });
    }
    if !features.requires_grad() || !logits.requires_grad() {
        return Err(MeglError::DetachedGraph);
    }
    let mut onehot = vec![0.0; b * classes];
    for (i, &c) in targets.iter().enumerate() {
        onehot[i * classes + c] = 1.0;
    }
    let seed = Tensor::new(onehot, &[b, classes]);
    let g = grad(std::slice::from_ref(logits), &[seed], std::slice::from_ref(features), create_graph)
        .pop()
        .flatten()
        .ok_or(MeglError::DetachedGraph)?;
    let alpha = g.reshape(&[b, k, h * w]).mean_axis(2).reshape(&[b, 1, k]);
    let weighted = alpha.matmul(&features.reshape(&[b, k, h * w]));
    Ok(weighted.reshape(&[b, h, w]).relu())
}

/// Row-wise min-max normalization of `[B, n]`. Flat rows become all ones when
/// their constant is positive and all zeros otherwise (no gradient through them).
pub fn minmax_rows(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, n) = (s[0], s[1]);
    let min = x.min_rows();
    let max = x.max_rows();
    let mut keep = vec![1.0; b];
    let mut fill = vec![0.0; b * n];
    let mut pad = vec![0.0; b];
    for r in 0..b {
        let (lo, hi) = (min.data()[r], max.data()[r]);
        if is_flat(lo, hi) {
            keep[r] = 0.0;
            pad[r] = 1.0;
            if hi > 0.0 {
                fill[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 1.0);
            }
        }
    }
    let range = max.sub(&min).add(&Tensor::new(pad, &[b, 1]));
    x.sub(&min)
        .div(&range)
        .mul(&Tensor::new(keep, &[b, 1]))
        .add(&Tensor::new(fill, &[b, n]))
}

/// Upsamples `[B, h, w]` maps bilinearly to `(ho, wo)` and min-max normalizes each.
pub fn normalized_maps(raw: &Tensor, ho: usize, wo: usize) -> Tensor {
    let b = raw.shape()[0];
    let up = nn::resize_maps(raw, ho, wo);
    minmax_rows(&up.reshape(&[b, ho * wo])).reshape(&[b, ho, wo])
}

/// `images ⊙ maps` for `[B, C, H, W]` images and `[B, H, W]` maps.
pub fn mask_images(images: &Tensor, maps: &Tensor) -> Tensor {
    let s = maps.shape();
    images.mul(&maps.reshape(&[s[0], 1, s[1], s[2]]))
}

/// Grad-CAM for a single sample (`features: [1, K, h, w]`, `logits: [1, C]`).
pub fn grad_cam(features: &Tensor, logits: &Tensor, target_class: usize, image_hw: (usize, usize)) -> Result<GradCamResult> {
    let raw = grad_cam_maps(features, logits, &[target_class], false)?;
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let raw_map = SaliencyMap::raw(raw.to_vec(), h, w)?;
    let upsampled = upsample(&raw_map, image_hw.0, image_hw.1)?;
    Ok(GradCamResult { raw_map, upsampled, target_class })
}

/// Bilinear upsampling (corner aligned) followed by min-max normalization.
pub fn upsample(map: &SaliencyMap, target_h: usize, target_w: usize) -> Result<SaliencyMap> {
    if target_h == 0 || target_w == 0 {
        return Err(MeglError::Domain("upsample target dimensions must be positive".into()));
    }
    if target_h < map.height() || target_w < map.width() {
        return Err(MeglError::Domain(format!(
            "upsample target {target_h}x{target_w} is smaller than source {}x{}",
            map.height(),
            map.width()
        )));
    }
    let out = no_grad(|| {
        let t = Tensor::new(map.grid().to_vec(), &[1, map.height(), map.width()]);
        normalized_maps(&t, target_h, target_w)
    });
    // Bilinear weights are non-negative, so clamp away -0.0 style rounding only.
    let grid = out.data().iter().map(|v| v.max(0.0)).collect();
    SaliencyMap::new(grid, target_h, target_w, Normalization::MinMax)
}

/// `Î = I ⊙ Â`, applied to every channel.
pub fn mask_image(image: &ImageTensor, map: &SaliencyMap) -> Result<ImageTensor> {
    if map.dims() != (image.height(), image.width()) {
        return Err(MeglError::ShapeMismatch(format!(
            "map {:?} vs image {}x{}",
            map.dims(),
            image.height(),
            image.width()
        )));
    }
    if let Some(v) = map.grid().iter().find(|&&v| v > 1.0) {
        return Err(MeglError::Range(format!("mask value {v} exceeds 1")));
    }
    let plane = image.height() * image.width();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| p * map.grid()[i % plane])
        .collect();
    ImageTensor::new(data, image.channels(), image.height(), image.width())
}
