//! The image classifier: a convolutional feature extractor followed by global
//! average pooling and a linear head.
//!
//! Backbone layer list (per block `i`):
//!
//! ```text
//! conv3x3(C_{i-1} -> C_i, same padding) -> per-sample norm -> ReLU -> [2x2 avg pool if i < pooled_blocks]
//! ```
//!
//! The last block's activations form the [`FeatureMap`] used both by
//! Grad-CAM and (after pooling) as the image representation for the
//! textual decoder. The head sees globally average-pooled features.

use megl_autodiff::{no_grad, Tensor};

use crate::config::{ExperimentConfig, SeedBank};
use crate::error::{MeglError, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::types::ImageTensor;

/// A swappable feature extractor.
pub trait Backbone {
    /// Registers the backbone's weights under `prefix`.
    fn register(&self, store: &mut ParamStore, seeds: &SeedBank, prefix: &str);
    /// `[B, C_in, H, W]` images to `[B, K, h, w]` activations.
    fn features(&self, params: &Bound, prefix: &str, images: &Tensor) -> Tensor;
    fn feature_dim(&self) -> usize;
    fn in_channels(&self) -> usize;
    /// Spatial size of the feature map for a square input of side `image_size`.
    fn feature_size(&self, image_size: usize) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub pooled_blocks: usize,
}

impl ConvBackbone {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        ConvBackbone {
            in_channels: 3,
            channels: cfg.backbone_channels.clone(),
            pooled_blocks: cfg.pooled_blocks,
        }
    }
}

impl Backbone for ConvBackbone {
    fn register(&self, store: &mut ParamStore, seeds: &SeedBank, prefix: &str) {
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            store.init(seeds, &format!("{p}.conv.w"), &[cout, cin * 9], Init::He(cin * 9), true);
            store.init(seeds, &format!("{p}.conv.b"), &[cout], Init::Zeros, true);
            store.init(seeds, &format!("{p}.norm.g"), &[cout], Init::Ones, true);
            store.init(seeds, &format!("{p}.norm.b"), &[cout], Init::Zeros, true);
            cin = cout;
        }
    }

    fn features(&self, params: &Bound, prefix: &str, images: &Tensor) -> Tensor {
        let mut x = images.clone();
        for i in 0..self.channels.len() {
            let p = format!("{prefix}.block{i}");
            x = nn::conv3x3(&x, params.get(&format!("{p}.conv.w")), params.get(&format!("{p}.conv.b")));
            x = nn::sample_norm(&x, params.get(&format!("{p}.norm.g")), params.get(&format!("{p}.norm.b")));
            x = x.relu();
            if i < self.pooled_blocks {
                x = nn::avg_pool2(&x);
            }
        }
        x
    }

    fn feature_dim(&self) -> usize {
        *self.channels.last().expect("backbone has at least one block")
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn feature_size(&self, image_size: usize) -> usize {
        image_size >> self.pooled_blocks
    }
}

/// Activations of the last convolutional block for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub activations: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Output of a batched forward pass, still attached to the graph.
pub struct ForwardOutput {
    /// `[B, C]`
    pub logits: Tensor,
    /// `[B, K, h, w]`
    pub features: Tensor,
}

pub struct Classifier {
    pub backbone: Box<dyn Backbone>,
    pub num_classes: usize,
    pub image_size: usize,
}

pub const PREFIX: &str = "cls";

impl Classifier {
    pub fn new(backbone: Box<dyn Backbone>, num_classes: usize, image_size: usize) -> Self {
        Classifier { backbone, num_classes, image_size }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self::new(Box::new(ConvBackbone::from_config(cfg)), cfg.num_classes, cfg.image_size)
    }

    pub fn register(&self, store: &mut ParamStore, seeds: &SeedBank) {
        self.backbone.register(store, seeds, &format!("{PREFIX}.backbone"));
        let k = self.backbone.feature_dim();
        store.init(seeds, &format!("{PREFIX}.head.w"), &[self.num_classes, k], Init::Normal(1.0 / (k as f64).sqrt()), true);
        store.init(seeds, &format!("{PREFIX}.head.b"), &[self.num_classes], Init::Zeros, true);
    }

    pub fn feature_size(&self) -> usize {
        self.backbone.feature_size(self.image_size)
    }

    pub fn features(&self, params: &Bound, images: &Tensor) -> Tensor {
        self.backbone.features(params, &format!("{PREFIX}.backbone"), images)
    }

    /// Linear head on globally pooled features: `[B, K, h, w]` to `[B, C]`.
    pub fn head(&self, params: &Bound, features: &Tensor) -> Tensor {
        nn::linear(
            &nn::global_avg_pool(features),
            params.get(&format!("{PREFIX}.head.w")),
            Some(params.get(&format!("{PREFIX}.head.b"))),
        )
    }

    pub fn forward(&self, params: &Bound, images: &Tensor) -> ForwardOutput {
        let features = self.features(params, images);
        let logits = self.head(params, &features);
        ForwardOutput { logits, features }
    }

    /// Forward pass for a single image on constant weights.
    pub fn forward_image(&self, store: &ParamStore, image: &ImageTensor) -> Result<(Vec<f64>, FeatureMap)> {
        let c = self.backbone.in_channels();
        if image.channels() != c || image.height() != self.image_size || image.width() != self.image_size {
            return Err(MeglError::ShapeMismatch(format!(
                "classifier expects {c}x{s}x{s}, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width(),
                s = self.image_size
            )));
        }
        let out = no_grad(|| {
            let params = store.bind_frozen();
            let x = Tensor::new(image.data().to_vec(), &[1, c, self.image_size, self.image_size]);
            self.forward(&params, &x)
        });
        let s = out.features.shape().to_vec();
        Ok((
            out.logits.to_vec(),
            FeatureMap { activations: out.features.to_vec(), channels: s[1], height: s[2], width: s[3] },
        ))
    }

    /// Scalar count of every weight on the classification path.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count(&format!("{PREFIX}."))
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(MeglError::EmptyLogits);
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `-log softmax(logits)[label]`, computed with max subtraction.
pub fn prediction_loss(logits: &[f64], label: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(MeglError::EmptyLogits);
    }
    if label >= logits.len() {
        return Err(MeglError::LabelOutOfRange { label, classes: logits.len() });
    }
    let t = Tensor::new(logits.to_vec(), &[1, logits.len()]);
    Ok(no_grad(|| cross_entropy(&t, &[label]).item()))
}

/// Mean cross-entropy of `[B, C]` logits against labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    logits.log_softmax().pick(labels).mean().neg()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seed_everything;
    use megl_autodiff::{backward, finite_difference, max_relative_error};

    fn object_me_config() -> ExperimentConfig {
        ExperimentConfig { num_classes: 40, ..ExperimentConfig::default() }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = ExperimentConfig { backbone_channels: vec![4, 4], pooled_blocks: 1, image_size: 8, ..Default::default() };
        let clf = Classifier::from_config(&cfg);
        let mut store = ParamStore::new();
        clf.register(&mut store, &seed_everything(0));
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        for n in names {
            let p = store.get_mut(&n).unwrap();
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let (logits, _) = clf.forward_image(&store, &ImageTensor::zeros(3, 8, 8)).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        let loss = prediction_loss(&logits, 0).unwrap();
        assert!((loss - (cfg.num_classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn logits_have_object_me_width_and_are_deterministic() {
        let cfg = object_me_config();
        let clf = Classifier::from_config(&cfg);
        let mut store = ParamStore::new();
        clf.register(&mut store, &seed_everything(3));
        let img = ImageTensor::new(vec![0.25; 3 * 32 * 32], 3, 32, 32).unwrap();
        let (a, f) = clf.forward_image(&store, &img).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!((f.channels, f.height, f.width), (128, 8, 8));
        let (b, _) = clf.forward_image(&store, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_image_size_is_shape_mismatch() {
        let clf = Classifier::from_config(&ExperimentConfig::default());
        let mut store = ParamStore::new();
        clf.register(&mut store, &seed_everything(0));
        let e = clf.forward_image(&store, &ImageTensor::zeros(3, 16, 16)).unwrap_err();
        assert!(matches!(e, MeglError::ShapeMismatch(_)));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 2.0, -1.0]).unwrap(), 1);
        assert_eq!(predict(&[3.0, 3.0]).unwrap(), 0);
        assert_eq!(predict(&[0.1 + 5.0, 2.0 + 5.0, -1.0 + 5.0]).unwrap(), 1);
        assert!(matches!(predict(&[]), Err(MeglError::EmptyLogits)));
    }

    #[test]
    fn prediction_loss_examples() {
        assert!((prediction_loss(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(prediction_loss(&[30.0, -30.0], 0).unwrap() < 1e-9);
        // Oracle: direct softmax evaluation.
        let oracle = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        let got = prediction_loss(&[2.0, 0.0], 0).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.126928).abs() < 1e-6);
        assert!(matches!(prediction_loss(&[1.0], 1), Err(MeglError::LabelOutOfRange { .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = vec![0.3, -1.2, 2.1, 0.4];
        let t = Tensor::param(z.clone(), &[1, 4]);
        let g = backward(&cross_entropy(&t, &[2]), &[t.clone()])[0].clone().unwrap();
        let fd = finite_difference(&z, 1e-5, |x| prediction_loss(x, 2).unwrap());
        assert!(max_relative_error(g.data(), &fd, 1e-10) < 1e-4);
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (i, gi) in g.data().iter().enumerate() {
            let expected = e[i] / s - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - expected).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_nonnegative_and_shift_invariant(
                logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
                shift in -100.0f64..100.0,
                pick in any::<prop::sample::Index>(),
            ) {
                let label = pick.index(logits.len());
                let a = prediction_loss(&logits, label).unwrap();
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let b = prediction_loss(&shifted, label).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() < 1e-6);
                let mut sorted = logits.clone();
                sorted.sort_by(|x, y| y.total_cmp(x));
                // Rounding of `v + shift` can merge near-ties.
                if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9 {
                    prop_assert_eq!(predict(&logits).unwrap(), predict(&shifted).unwrap());
                }
            }
        }
    }
}
