//! Layer building blocks over autodiff tensors.

use megl_autodiff::{sparse, Tensor};

/// Stride-1, same-padding 3x3 convolution of `[B, C, H, W]` with weights
/// `[C_out, C*9]` and bias `[C_out]`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = weight.shape()[0];
    assert_eq!(weight.shape()[1], c * 9, "conv weight expects {} input taps", c * 9);
    let cols = x.sparse(&sparse::im2col(b, c, h, w, 3, 1), &[c * 9, b * h * w]);
    let y = weight.matmul(&cols); // [C_out, B*H*W]
    y.reshape(&[cout, b, h * w])
        .permute(&[1, 0, 2])
        .reshape(&[b, cout, h, w])
        .add(&bias.reshape(&[1, cout, 1, 1]))
}

/// Per-sample normalization over `(C, H, W)` with a per-channel affine.
pub fn sample_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let flat = x.reshape(&[b, s[1..].iter().product()]);
    let mean = flat.mean_axis(1);
    let centered = flat.sub(&mean);
    let var = centered.square().mean_axis(1);
    let inv = var.add_scalar(1e-5).sqrt();
    centered
        .div(&inv)
        .reshape(&s)
        .mul(&gamma.reshape(&[1, c, 1, 1]))
        .add(&beta.reshape(&[1, c, 1, 1]))
}

/// 2x2 average pooling of `[B, C, H, W]`.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    x.sparse(&sparse::avg_pool(b * c, h, w, 2), &[b, c, h / 2, w / 2])
}

/// Mean over the spatial axes: `[B, C, H, W]` to `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    x.reshape(&[b, c, s[2] * s[3]]).mean_axis(2).reshape(&[b, c])
}

/// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let y = x.matmul_t(weight, false, true);
    match bias {
        Some(b) => y.add(b),
        None => y,
    }
}

/// Layer normalization over the last axis of `[N, D]`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let n = x.ndim();
    let mean = x.mean_axis(n - 1);
    let centered = x.sub(&mean);
    let var = centered.square().mean_axis(n - 1);
    centered.div(&var.add_scalar(1e-5).sqrt()).mul(gamma).add(beta)
}

/// Bilinear resampling of `[B, H, W]` maps to `[B, H', W']` (corner aligned).
pub fn resize_maps(maps: &Tensor, ho: usize, wo: usize) -> Tensor {
    let s = maps.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (ho, wo) {
        return maps.clone();
    }
    maps.sparse(&sparse::bilinear(b, h, w, ho, wo), &[b, ho, wo])
}
