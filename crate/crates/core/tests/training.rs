use megl::checkpoint::Checkpoint;
use megl::data::{caption, generate_synthetic, render, SyntheticSpec};
use megl::grounding::{TextRoutes, Vocabulary};
use megl::trainer::{evaluate, history_tsv, prepare_data, train_prepared, Model, Priors, CHECKPOINT_FILE};
use megl::{seed_everything, ExperimentConfig, Sample};
use megl_autodiff::{backward, no_grad, Tensor};

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        num_classes: 4,
        image_size: 8,
        saliency_resolution: 8,
        backbone_channels: vec![4, 6],
        pooled_blocks: 1,
        aux_feature_dim: 5,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 1,
        prefix_tokens: 2,
        max_text_len: 24,
        batch_size: 4,
        ..Default::default()
    }
}

fn samples(n: usize, masked_every: usize) -> (Vec<Sample>, Vocabulary) {
    let spec = SyntheticSpec { image_size: 8, ..Default::default() };
    let captions: Vec<String> = (0..4).map(caption).collect();
    let vocab = Vocabulary::build(&captions, 100);
    let mut rng = seed_everything(2).rng("samples");
    let out = (0..n)
        .map(|i| {
            let k = i % 4;
            let (img, mask) = render(k, &spec, &mut rng);
            let mask = (i % masked_every == 0).then_some(mask);
            Sample::new(img, k, 4, Some(vocab.encode(&captions[k])), mask, (8, 8)).unwrap()
        })
        .collect();
    (out, vocab)
}

fn model(cfg: ExperimentConfig, vocab: Vocabulary) -> Model {
    Model::new(cfg, (0..4).map(|k| format!("class{k}")).collect(), vocab).unwrap()
}

/// Gradient of the textual term alone with respect to the first conv weight.
fn textual_grad_norm(routes: TextRoutes) -> f64 {
    let cfg = ExperimentConfig { visual_on: false, ..small_config() };
    let (data, vocab) = samples(4, 2);
    let m = model(cfg.clone(), vocab);
    let priors = Priors::from_samples(&data, 4, cfg.saliency_resolution).unwrap();
    let params = m.params.bind();
    let batch: Vec<&Sample> = data.iter().collect();
    let terms = m.batch_terms(&params, &batch, &priors, routes).unwrap();
    let w = params.get("cls.backbone.block0.conv.w").clone();
    match backward(terms.textual.as_ref().unwrap(), &[w]).pop().flatten() {
        Some(g) => g.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        None => 0.0,
    }
}

#[test]
fn textual_loss_reaches_the_classifier_through_both_routes() {
    let both = textual_grad_norm(TextRoutes::default());
    let features = textual_grad_norm(TextRoutes { features: true, saliency: false });
    let saliency = textual_grad_norm(TextRoutes { features: false, saliency: true });
    let neither = textual_grad_norm(TextRoutes { features: false, saliency: false });
    assert!(features > 0.0, "feature route carries no gradient");
    assert!(saliency > 0.0, "saliency route carries no gradient");
    assert!(both > 0.0);
    assert_eq!(neither, 0.0);
}

#[test]
fn saliency_masking_changes_the_prefix() {
    let cfg = small_config();
    let (data, vocab) = samples(2, 1);
    let m = model(cfg, vocab);
    let g = m.grounder();
    let params = m.params.bind_frozen();
    let images = Tensor::new(data.iter().flat_map(|s| s.image.data().to_vec()).collect(), &[2, 3, 8, 8]);
    let cls = m.classifier();
    let features = no_grad(|| cls.features(&params, &images));
    let half: Vec<f64> = (0..2 * 64).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect();
    let prefix = |maps: Vec<f64>| {
        no_grad(|| g.prefix_from(&params, &features, &images, &Tensor::new(maps, &[2, 8, 8]), TextRoutes::default()).to_vec())
    };
    let full = prefix(vec![1.0; 2 * 64]);
    let left = prefix(half.clone());
    let right = prefix(half.iter().map(|v| 1.0 - v).collect());
    assert_ne!(full, left);
    assert_ne!(left, right);
}

#[test]
fn consistency_switch_is_inert_without_unannotated_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { num_samples: 40, num_classes: 4, visual_annotation_fraction: 1.0, image_size: 8, ..Default::default() };
    generate_synthetic(&spec, tmp.path()).unwrap();
    let base = ExperimentConfig {
        manifest: tmp.path().join("manifest.tsv").to_string_lossy().into_owned(),
        epochs: 2,
        ..small_config()
    };
    let data = prepare_data(&base).unwrap();
    let on = train_prepared(&ExperimentConfig { consistency_on: true, ..base.clone() }, &data, None).unwrap();
    let off = train_prepared(&ExperimentConfig { consistency_on: false, ..base }, &data, None).unwrap();
    assert_eq!(history_tsv(&on.history), history_tsv(&off.history));
    assert!(on.history.iter().all(|r| r.dc.is_none()));
    assert_eq!(on.trainer.model.params, off.trainer.model.params);
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { num_samples: 40, num_classes: 4, image_size: 8, ..Default::default() };
    generate_synthetic(&spec, &tmp.path().join("data")).unwrap();
    let cfg = ExperimentConfig {
        manifest: tmp.path().join("data/manifest.tsv").to_string_lossy().into_owned(),
        epochs: 1,
        val_fraction: 0.2,
        test_fraction: 0.2,
        ..small_config()
    };
    let data = prepare_data(&cfg).unwrap();
    let out_dir = tmp.path().join("run");
    let outcome = train_prepared(&cfg, &data, Some(&out_dir)).unwrap();
    assert_eq!(outcome.checkpoint.as_deref(), Some(out_dir.join(CHECKPOINT_FILE).as_path()));
    let reloaded = Model::from_checkpoint(Checkpoint::load(&out_dir.join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(reloaded.params, outcome.trainer.model.params);
    let a = evaluate(&outcome.trainer.model, &data.test, true).unwrap();
    let b = evaluate(&reloaded, &data.test, true).unwrap();
    assert_eq!(a, b);
    let e = reloaded.explain_image(&data.test[0].image).unwrap();
    assert_eq!(e.class_name, reloaded.class_names[e.predicted]);
}
