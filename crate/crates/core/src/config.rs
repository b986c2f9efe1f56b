//! Experiment configuration and deterministic seeding.
//!
//! The config file is flat UTF-8 text, one `key = value` per line. Blank lines
//! and anything after `#` are ignored. Lists are comma separated. Keys not
//! listed in [`ExperimentConfig::KEYS`] are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{MeglError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyTarget {
    Label,
    Pred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: String,
    pub output_dir: String,
    pub lambda_visual: f64,
    pub lambda_textual: f64,
    pub visual_on: bool,
    pub textual_on: bool,
    pub consistency_on: bool,
    pub num_classes: usize,
    pub image_size: usize,
    pub saliency_resolution: usize,
    /// Output channels of each backbone block; the last entry is the feature dimension.
    pub backbone_channels: Vec<usize>,
    /// Number of leading blocks followed by 2x2 average pooling.
    pub pooled_blocks: usize,
    pub aux_feature_dim: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub prefix_tokens: usize,
    pub max_text_len: usize,
    pub epsilon_smoothing: f64,
    pub saliency_target: SaliencyTarget,
    pub class_conditional_prior: bool,
    pub textual_reduction: TextReduction,
    pub miou_threshold: f64,
    pub bleu_smoothing: bool,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: "data/manifest.tsv".into(),
            output_dir: "runs/default".into(),
            lambda_visual: 1.0,
            lambda_textual: 1.0,
            visual_on: true,
            textual_on: true,
            consistency_on: true,
            num_classes: 8,
            image_size: 32,
            saliency_resolution: 32,
            backbone_channels: vec![8, 16, 32, 128],
            pooled_blocks: 2,
            aux_feature_dim: 64,
            vocab_size: 1000,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            prefix_tokens: 4,
            max_text_len: 24,
            epsilon_smoothing: 1e-6,
            saliency_target: SaliencyTarget::Label,
            class_conditional_prior: false,
            textual_reduction: TextReduction::Mean,
            miou_threshold: 0.5,
            bleu_smoothing: false,
            seed: 0,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 10,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "manifest",
        "output_dir",
        "lambda_visual",
        "lambda_textual",
        "visual_on",
        "textual_on",
        "consistency_on",
        "num_classes",
        "image_size",
        "saliency_resolution",
        "backbone_channels",
        "pooled_blocks",
        "aux_feature_dim",
        "vocab_size",
        "embed_dim",
        "num_heads",
        "num_layers",
        "prefix_tokens",
        "max_text_len",
        "epsilon_smoothing",
        "saliency_target",
        "class_conditional_prior",
        "textual_reduction",
        "miou_threshold",
        "bleu_smoothing",
        "seed",
        "learning_rate",
        "weight_decay",
        "batch_size",
        "epochs",
        "val_fraction",
        "test_fraction",
    ];

    pub fn feature_dim(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "manifest" => self.manifest.clone(),
            "output_dir" => self.output_dir.clone(),
            "lambda_visual" => self.lambda_visual.to_string(),
            "lambda_textual" => self.lambda_textual.to_string(),
            "visual_on" => self.visual_on.to_string(),
            "textual_on" => self.textual_on.to_string(),
            "consistency_on" => self.consistency_on.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "image_size" => self.image_size.to_string(),
            "saliency_resolution" => self.saliency_resolution.to_string(),
            "backbone_channels" => join(&self.backbone_channels),
            "pooled_blocks" => self.pooled_blocks.to_string(),
            "aux_feature_dim" => self.aux_feature_dim.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "prefix_tokens" => self.prefix_tokens.to_string(),
            "max_text_len" => self.max_text_len.to_string(),
            "epsilon_smoothing" => self.epsilon_smoothing.to_string(),
            "saliency_target" => match self.saliency_target {
                SaliencyTarget::Label => "label".into(),
                SaliencyTarget::Pred => "pred".into(),
            },
            "class_conditional_prior" => self.class_conditional_prior.to_string(),
            "textual_reduction" => match self.textual_reduction {
                TextReduction::Mean => "mean".into(),
                TextReduction::Sum => "sum".into(),
            },
            "miou_threshold" => self.miou_threshold.to_string(),
            "bleu_smoothing" => self.bleu_smoothing.to_string(),
            "seed" => self.seed.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Writes every key in canonical order. `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.serialize().as_bytes()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("");
            if line.trim().is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(MeglError::Parse {
                    line: line_no,
                    column: line.len() - line.trim_start().len() + 1,
                    message: "expected `key = value`".into(),
                });
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            let value_col = eq + 2 + (line[eq + 1..].len() - line[eq + 1..].trim_start().len());
            if !Self::KEYS.contains(&key) {
                return Err(MeglError::UnknownKey { key: key.to_string(), line: line_no });
            }
            cfg.set(key, value).map_err(|message| MeglError::Parse {
                line: line_no,
                column: value_col,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("expected true or false, found `{v}`")),
            }
        }
        match key {
            "manifest" => self.manifest = value.to_string(),
            "output_dir" => self.output_dir = value.to_string(),
            "lambda_visual" => self.lambda_visual = num(value)?,
            "lambda_textual" => self.lambda_textual = num(value)?,
            "visual_on" => self.visual_on = flag(value)?,
            "textual_on" => self.textual_on = flag(value)?,
            "consistency_on" => self.consistency_on = flag(value)?,
            "num_classes" => self.num_classes = num(value)?,
            "image_size" => self.image_size = num(value)?,
            "saliency_resolution" => self.saliency_resolution = num(value)?,
            "backbone_channels" => {
                self.backbone_channels = value
                    .split(',')
                    .map(|s| num(s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "pooled_blocks" => self.pooled_blocks = num(value)?,
            "aux_feature_dim" => self.aux_feature_dim = num(value)?,
            "vocab_size" => self.vocab_size = num(value)?,
            "embed_dim" => self.embed_dim = num(value)?,
            "num_heads" => self.num_heads = num(value)?,
            "num_layers" => self.num_layers = num(value)?,
            "prefix_tokens" => self.prefix_tokens = num(value)?,
            "max_text_len" => self.max_text_len = num(value)?,
            "epsilon_smoothing" => self.epsilon_smoothing = num(value)?,
            "saliency_target" => {
                self.saliency_target = match value {
                    "label" => SaliencyTarget::Label,
                    "pred" => SaliencyTarget::Pred,
                    _ => return Err(format!("expected label or pred, found `{value}`")),
                }
            }
            "class_conditional_prior" => self.class_conditional_prior = flag(value)?,
            "textual_reduction" => {
                self.textual_reduction = match value {
                    "mean" => TextReduction::Mean,
                    "sum" => TextReduction::Sum,
                    _ => return Err(format!("expected mean or sum, found `{value}`")),
                }
            }
            "miou_threshold" => self.miou_threshold = num(value)?,
            "bleu_smoothing" => self.bleu_smoothing = flag(value)?,
            "seed" => self.seed = num(value)?,
            "learning_rate" => self.learning_rate = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "val_fraction" => self.val_fraction = num(value)?,
            "test_fraction" => self.test_fraction = num(value)?,
            _ => unreachable!(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MeglError::Domain(m));
        if !(self.lambda_visual >= 0.0 && self.lambda_visual.is_finite()) {
            return fail(format!("lambda_visual must be >= 0, got {}", self.lambda_visual));
        }
        if !(self.lambda_textual >= 0.0 && self.lambda_textual.is_finite()) {
            return fail(format!("lambda_textual must be >= 0, got {}", self.lambda_textual));
        }
        if !(self.epsilon_smoothing > 0.0) {
            return fail("epsilon_smoothing must be > 0".into());
        }
        if self.num_classes == 0 || self.image_size == 0 || self.saliency_resolution == 0 {
            return fail("num_classes, image_size and saliency_resolution must be positive".into());
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return fail("backbone_channels must be a non-empty list of positive widths".into());
        }
        if self.pooled_blocks > self.backbone_channels.len()
            || self.image_size % (1 << self.pooled_blocks) != 0
        {
            return fail("pooled_blocks incompatible with backbone or image_size".into());
        }
        let feature_size = self.image_size >> self.pooled_blocks;
        if self.saliency_resolution > self.image_size || self.saliency_resolution < feature_size {
            return fail(format!(
                "saliency_resolution must lie between the feature map size {feature_size} and image_size {}",
                self.image_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail("embed_dim must be a positive multiple of num_heads".into());
        }
        if self.prefix_tokens == 0 || self.max_text_len < 2 || self.batch_size == 0 {
            return fail("prefix_tokens, batch_size must be positive and max_text_len >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.miou_threshold) {
            return fail("miou_threshold must lie in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return fail("learning_rate must be > 0 and weight_decay >= 0".into());
        }
        let v = self.val_fraction;
        let t = self.test_fraction;
        if !(0.0..=1.0).contains(&v) || !(0.0..=1.0).contains(&t) || v + t > 1.0 {
            return fail("val_fraction and test_fraction must be in [0, 1] with sum <= 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MeglError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }
}

/// Reads a config file, filling defaults for omitted keys.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

/// Source of named, independent random streams derived from one seed.
///
/// Every consumer (weight init of each parameter, shuffling per epoch,
/// synthetic generation) draws from its own stream, so the draws do not
/// depend on the order in which components are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedBank {
    seed: u64,
}

impl SeedBank {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, stream: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stream.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }
}

/// Fixes every random draw of a run as a function of `seed`.
pub fn seed_everything(seed: u64) -> SeedBank {
    SeedBank { seed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn explicit_lambdas_are_echoed() {
        let c = ExperimentConfig::parse("lambda_visual = 1.0\nlambda_textual = 1.0\n").unwrap();
        assert_eq!(c.lambda_visual, 1.0);
        assert_eq!(c.lambda_textual, 1.0);
    }

    #[test]
    fn omitted_lambda_defaults_to_one() {
        let c = ExperimentConfig::parse("# only a comment\nseed = 3\n").unwrap();
        assert_eq!(c.lambda_visual, 1.0);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn negative_lambda_is_domain_error() {
        let e = ExperimentConfig::parse("lambda_visual = -1").unwrap_err();
        assert!(matches!(e, MeglError::Domain(_)), "{e}");
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::parse("seed = 1\nlambda_foo = 2\n").unwrap_err();
        assert!(matches!(e, MeglError::UnknownKey { line: 2, .. }), "{e}");
    }

    #[test]
    fn parse_error_reports_position() {
        let e = ExperimentConfig::parse("seed = 1\nepochs = many\n").unwrap_err();
        match e {
            MeglError::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert_eq!(column, 10);
            }
            other => panic!("unexpected {other}"),
        }
        let e = ExperimentConfig::parse("  no equals sign").unwrap_err();
        assert!(matches!(e, MeglError::Parse { line: 1, column: 3, .. }));
    }

    #[test]
    fn missing_file() {
        let e = load_config(Path::new("/definitely/not/here.cfg")).unwrap_err();
        assert!(matches!(e, MeglError::MissingFile(_)));
    }

    #[test]
    fn seed_streams_are_deterministic_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| seed_everything(7).rng("w").random()).collect();
        let b: Vec<u64> = (0..4).map(|_| seed_everything(7).rng("w").random()).collect();
        assert_eq!(a, b);
        let x: u64 = seed_everything(7).rng("w").random();
        let y: u64 = seed_everything(8).rng("w").random();
        assert_ne!(x, y);
        let z: u64 = seed_everything(0).rng("w").random();
        assert_ne!(z, x);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn config_round_trips(
                lv in 0.0f64..1e3,
                lt in 0.0f64..1e3,
                eps in 1e-12f64..1.0,
                seed in any::<u64>(),
                lr in 1e-8f64..1.0,
                chans in proptest::collection::vec(1usize..256, 1..6),
                flags in any::<(bool, bool, bool, bool)>(),
            ) {
                let c = ExperimentConfig {
                    lambda_visual: lv,
                    lambda_textual: lt,
                    epsilon_smoothing: eps,
                    seed,
                    learning_rate: lr,
                    pooled_blocks: chans.len().min(2),
                    backbone_channels: chans,
                    visual_on: flags.0,
                    textual_on: flags.1,
                    consistency_on: flags.2,
                    class_conditional_prior: flags.3,
                    saliency_target: if flags.3 { SaliencyTarget::Pred } else { SaliencyTarget::Label },
                    ..ExperimentConfig::default()
                };
                let back = ExperimentConfig::parse(&c.serialize()).unwrap();
                prop_assert_eq!(&back, &c);
                prop_assert_eq!(back.serialize(), c.serialize());
            }
        }
    }
}
