//! Joint training of the classifier and the rationale decoder.
//!
//! Per batch the objective is
//!
//! ```text
//! total = pred + λ_t · textual + λ_v · (visual + dc)
//! ```
//!
//! where `pred` is the batch-mean cross entropy, `visual` the mean L1 over
//! samples with a mask, `dc` the mean KL to the prior over samples without
//! one, and `textual` the mean per-sample NLL over samples with a rationale.
//! Terms whose switch is off are not computed. Terms with a zero weight are
//! reported but kept out of the backward pass, so they move no parameter.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use megl_autodiff::{grad, no_grad, Tensor};

use crate::checkpoint::Checkpoint;
use crate::classifier::{cross_entropy, predict, Classifier};
use crate::config::{seed_everything, ExperimentConfig, SaliencyTarget};
use crate::data::{batch_order, load_manifest, load_samples, split, DatasetManifest, Split};
use crate::error::{MeglError, Result};
use crate::grounding::{Grounder, TextRoutes, Vocabulary};
use crate::metrics::{classification_report, miou, text_scores, ClassificationReport, ConfusionAccumulator, TextScores};
use crate::nn;
use crate::params::{AdamW, Bound, ParamStore};
use crate::saliency::{grad_cam_maps, normalized_maps};
use crate::supervision::{aggregate_prior, kl_rows, l1_rows, AggregatedPrior, Branch};
use crate::types::{ImageTensor, LossBreakdown, Normalization, SaliencyMap, Sample};

/// Classifier, grounder and their weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: ExperimentConfig, class_names: Vec<String>, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(MeglError::ShapeMismatch(format!(
                "{} class names for num_classes = {}",
                class_names.len(),
                config.num_classes
            )));
        }
        let seeds = seed_everything(config.seed);
        let mut params = ParamStore::new();
        let mut model = Model { config, class_names, vocab, params: ParamStore::new() };
        model.classifier().register(&mut params, &seeds);
        model.grounder().register(&mut params, &seeds);
        model.params = params;
        Ok(model)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Model { config: ck.config, class_names: ck.class_names, vocab: ck.vocab, params: ck.params }
    }

    pub fn checkpoint(&self, prior: Option<AggregatedPrior>) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            prior,
        }
    }

    pub fn classifier(&self) -> Classifier {
        Classifier::from_config(&self.config)
    }

    pub fn grounder(&self) -> Grounder {
        Grounder::from_config(&self.config, self.vocab.len())
    }

    /// Every loss term of one batch, attached to the graph of `params`.
    pub fn batch_terms(&self, params: &Bound, batch: &[&Sample], priors: &Priors, routes: TextRoutes) -> Result<BatchTerms> {
        let cfg = &self.config;
        let (s, r) = (cfg.image_size, cfg.saliency_resolution);
        let b = batch.len();
        if b == 0 {
            return Err(MeglError::EmptyInput);
        }
        let images = stack_images(batch, s)?;
        let labels: Vec<usize> = batch.iter().map(|x| x.label).collect();
        let cls = self.classifier();
        let out = cls.forward(params, &images);
        let pred = cross_entropy(&out.logits, &labels);

        let visual_rows: Vec<usize> = if cfg.visual_on { (0..b).filter(|&i| batch[i].has_mask()).collect() } else { vec![] };
        let dc_rows: Vec<usize> = if cfg.visual_on && cfg.consistency_on {
            (0..b).filter(|&i| !batch[i].has_mask()).collect()
        } else {
            vec![]
        };
        let text_rows: Vec<usize> =
            if cfg.textual_on { (0..b).filter(|&i| batch[i].text_explanation.is_some()).collect() } else { vec![] };
        let mut branches = vec![None; b];
        for &i in &visual_rows {
            branches[i] = Some(Branch::Supervised);
        }
        for &i in &dc_rows {
            branches[i] = Some(Branch::Consistency);
        }

        let mut terms = BatchTerms {
            pred,
            visual: None,
            dc: None,
            textual: None,
            branches,
            n_supervised: visual_rows.len(),
            n_consistency: dc_rows.len(),
        };
        if visual_rows.is_empty() && dc_rows.is_empty() && text_rows.is_empty() {
            return Ok(terms);
        }

        let targets = match cfg.saliency_target {
            SaliencyTarget::Label => labels.clone(),
            SaliencyTarget::Pred => argmax_rows(&out.logits),
        };
        let raw = grad_cam_maps(&out.features, &out.logits, &targets, true)?;
        let maps = normalized_maps(&raw, r, r).reshape(&[b, r * r]);

        if !visual_rows.is_empty() {
            let truth: Vec<f64> = visual_rows
                .iter()
                .flat_map(|&i| resize_minmax(batch[i].visual_explanation.as_ref().unwrap(), r).grid().to_vec())
                .collect();
            let truth = Tensor::new(truth, &[visual_rows.len(), r * r]);
            terms.visual = Some(l1_rows(&maps.gather_rows(&visual_rows), &truth).mean());
        }
        if !dc_rows.is_empty() {
            let prior: Vec<f64> = dc_rows
                .iter()
                .flat_map(|&i| priors.for_label(batch[i].label, cfg.class_conditional_prior).mean_map.grid().to_vec())
                .collect();
            let prior = Tensor::new(prior, &[dc_rows.len(), r * r]);
            terms.dc = Some(kl_rows(&maps.gather_rows(&dc_rows), &prior, cfg.epsilon_smoothing).mean());
        }
        if !text_rows.is_empty() {
            let n = text_rows.len();
            let image_maps = if r == s { maps.reshape(&[b, s, s]) } else { normalized_maps(&raw, s, s) };
            let sel = |t: &Tensor| {
                let shape = t.shape().to_vec();
                let rest: usize = shape[1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape[0] = n;
                t.reshape(&[b, rest]).gather_rows(&text_rows).reshape(&out_shape)
            };
            let grounder = self.grounder();
            let prefix = grounder.prefix_from(params, &sel(&out.features), &sel(&images), &sel(&image_maps), routes);
            let texts: Vec<Vec<usize>> =
                text_rows.iter().map(|&i| batch[i].text_explanation.clone().unwrap()).collect();
            terms.textual = Some(grounder.textual_losses(params, &prefix, &texts, cfg.textual_reduction)?.mean());
        }
        Ok(terms)
    }

    /// Logits, predicted class and image-resolution Grad-CAM for one image.
    pub fn explain_image(&self, image: &ImageTensor) -> Result<Explanation> {
        let cfg = &self.config;
        let s = cfg.image_size;
        if image.channels() != 3 || image.height() != s || image.width() != s {
            return Err(MeglError::ShapeMismatch(format!(
                "expected a 3x{s}x{s} image, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        let params = self.params.bind_frozen();
        let x = Tensor::new(image.data().to_vec(), &[1, 3, s, s]);
        let (logits, maps, features) = self.saliency_batch(&params, &x, None)?;
        let predicted = predict(logits.data())?;
        let grounder = self.grounder();
        let tokens = no_grad(|| {
            let prefix = grounder.prefix_from(&params, &features, &x, &maps, TextRoutes::default());
            grounder.generate_tensor(&params, &prefix, cfg.max_text_len)
        });
        Ok(Explanation {
            logits: logits.to_vec(),
            predicted,
            class_name: self.class_names.get(predicted).cloned().unwrap_or_default(),
            saliency: SaliencyMap::new(maps.to_vec().iter().map(|v| v.max(0.0)).collect(), s, s, Normalization::MinMax)?,
            rationale: self.vocab.decode(&tokens),
            tokens,
        })
    }

    /// Constant-weight forward pass plus Grad-CAM at image resolution for
    /// `[B, 3, S, S]` images. Targets default to the predicted classes.
    /// Returns logits `[B, C]`, maps `[B, S, S]` and features `[B, K, h, w]`.
    fn saliency_batch(&self, params: &Bound, images: &Tensor, targets: Option<&[usize]>) -> Result<(Tensor, Tensor, Tensor)> {
        let cls = self.classifier();
        let s = self.config.image_size;
        let features = no_grad(|| cls.features(params, images));
        let f = Tensor::param(features.to_vec(), features.shape());
        let logits = cls.head(params, &f);
        let targets = match targets {
            Some(t) => t.to_vec(),
            None => argmax_rows(&logits),
        };
        let raw = grad_cam_maps(&f, &logits, &targets, false)?;
        let maps = no_grad(|| normalized_maps(&raw, s, s));
        Ok((logits.detach(), maps, features))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub class_name: String,
    /// Min-max normalized, image resolution.
    pub saliency: SaliencyMap,
    pub tokens: Vec<usize>,
    pub rationale: String,
}

/// Loss terms of one batch as scalar graph tensors.
pub struct BatchTerms {
    pub pred: Tensor,
    pub visual: Option<Tensor>,
    pub dc: Option<Tensor>,
    pub textual: Option<Tensor>,
    /// Visual branch taken by each sample, `None` when no visual term applies.
    pub branches: Vec<Option<Branch>>,
    pub n_supervised: usize,
    pub n_consistency: usize,
}

impl BatchTerms {
    pub fn breakdown(&self, lambda_visual: f64, lambda_textual: f64) -> LossBreakdown {
        let v = |t: &Option<Tensor>| t.as_ref().map(Tensor::item);
        let (pred, visual, dc, textual) = (self.pred.item(), v(&self.visual), v(&self.dc), v(&self.textual));
        LossBreakdown {
            pred,
            visual,
            dc,
            textual,
            total: LossBreakdown::combine(pred, visual, dc, textual, lambda_visual, lambda_textual),
            n_supervised: self.n_supervised,
            n_consistency: self.n_consistency,
        }
    }

    /// The differentiated objective: zero-weight terms are left out.
    pub fn objective(&self, lambda_visual: f64, lambda_textual: f64) -> Tensor {
        let mut obj = self.pred.clone();
        if lambda_textual > 0.0 {
            if let Some(t) = &self.textual {
                obj = obj.add(&t.scale(lambda_textual));
            }
        }
        if lambda_visual > 0.0 {
            for t in [&self.visual, &self.dc].into_iter().flatten() {
                obj = obj.add(&t.scale(lambda_visual));
            }
        }
        obj
    }
}

/// Aggregated priors for the consistency term, overall and per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub global: AggregatedPrior,
    pub per_class: Vec<Option<AggregatedPrior>>,
}

impl Priors {
    /// Built from the masks of `samples` at `resolution`. With no annotated
    /// sample at all the prior is uniform.
    pub fn from_samples(samples: &[Sample], num_classes: usize, resolution: usize) -> Result<Self> {
        let masks = |filter: &dyn Fn(&Sample) -> bool| -> Vec<SaliencyMap> {
            samples
                .iter()
                .filter(|s| filter(s))
                .filter_map(|s| s.visual_explanation.as_ref())
                .map(|m| resize_minmax(m, resolution))
                .filter(|m| m.grid().iter().any(|&v| v > 0.0))
                .collect()
        };
        let all = masks(&|_| true);
        let global = if all.is_empty() {
            let n = resolution * resolution;
            AggregatedPrior {
                mean_map: SaliencyMap::new(vec![1.0 / n as f64; n], resolution, resolution, Normalization::Sum1)?,
                n_contributors: 0,
            }
        } else {
            aggregate_prior(&all)?
        };
        let per_class = (0..num_classes)
            .map(|k| {
                let m = masks(&|s| s.label == k);
                if m.is_empty() {
                    Ok(None)
                } else {
                    aggregate_prior(&m).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Priors { global, per_class })
    }

    pub fn for_label(&self, label: usize, class_conditional: bool) -> &AggregatedPrior {
        if class_conditional {
            if let Some(Some(p)) = self.per_class.get(label) {
                return p;
            }
        }
        &self.global
    }
}

pub struct Trainer {
    pub model: Model,
    pub priors: Priors,
    pub optimizer: AdamW,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: Model, priors: Priors) -> Self {
        let optimizer = AdamW::new(model.config.learning_rate, model.config.weight_decay);
        Trainer { model, priors, optimizer, steps: 0 }
    }

    /// One forward/backward pass and optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        let cfg = &self.model.config;
        let (lv, lt) = (cfg.lambda_visual, cfg.lambda_textual);
        let params = self.model.params.bind();
        let terms = self.model.batch_terms(&params, batch, &self.priors, TextRoutes::default())?;
        let breakdown = terms.breakdown(lv, lt);
        let step = self.steps;
        let non_finite = |what: &str| MeglError::NonFiniteLoss { step, detail: format!("{what}; last breakdown {breakdown:?}") };
        if !breakdown.total.is_finite() {
            return Err(non_finite("loss"));
        }
        let objective = terms.objective(lv, lt);
        drop(terms);
        let trainable = params.trainable();
        debug_assert!(trainable.iter().all(|(n, _)| !n.starts_with("aux.")), "frozen encoder exposed to the optimizer");
        let leaves: Vec<Tensor> = trainable.iter().map(|(_, t)| t.clone()).collect();
        let grads = grad(&[objective], &[Tensor::scalar(1.0)], &leaves, false);
        let mut updates = Vec::with_capacity(grads.len());
        for ((name, _), g) in trainable.into_iter().zip(grads) {
            let g = g.map(|t| t.to_vec());
            if let Some(v) = &g {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(non_finite(&format!("gradient of {name}")));
                }
            }
            updates.push((name, g));
        }
        self.optimizer.step(&mut self.model.params, &updates);
        self.steps += 1;
        Ok(breakdown)
    }
}

/// Train / validation / test samples with their shared vocabulary.
pub struct PreparedData {
    pub class_names: Vec<String>,
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// The split used for a given config; depends only on the manifest and seed.
pub fn split_manifest(manifest: &DatasetManifest, cfg: &ExperimentConfig) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let train = 1.0 - cfg.val_fraction - cfg.test_fraction;
    split(manifest, (train, cfg.val_fraction, cfg.test_fraction), cfg.seed)
}

/// Loads, splits and decodes the manifest named in `cfg`. The vocabulary is
/// built from the training rationales only.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let manifest = load_manifest(Path::new(&cfg.manifest))?;
    if manifest.class_names.len() != cfg.num_classes {
        return Err(MeglError::ShapeMismatch(format!(
            "manifest has {} classes, config expects {}",
            manifest.class_names.len(),
            cfg.num_classes
        )));
    }
    let (tr, va, te) = split_manifest(&manifest, cfg)?;
    let vocab = Vocabulary::build(&tr.texts(), cfg.vocab_size);
    Ok(PreparedData {
        class_names: manifest.class_names.clone(),
        train: load_samples(&tr, &vocab, cfg.image_size)?,
        val: load_samples(&va, &vocab, cfg.image_size)?,
        test: load_samples(&te, &vocab, cfg.image_size)?,
        vocab,
    })
}

/// Decodes one split of the manifest named in `cfg` with an existing vocabulary.
pub fn load_split(cfg: &ExperimentConfig, vocab: &Vocabulary, which: Split) -> Result<Vec<Sample>> {
    let manifest = load_manifest(Path::new(&cfg.manifest))?;
    let (tr, va, te) = split_manifest(&manifest, cfg)?;
    let part = match which {
        Split::Train => tr,
        Split::Val => va,
        Split::Test => te,
    };
    load_samples(&part, vocab, cfg.image_size)
}

/// Per-epoch means of the batch losses plus validation scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pred: f64,
    pub visual: Option<f64>,
    pub dc: Option<f64>,
    pub textual: Option<f64>,
    pub total: f64,
    pub val_accuracy: Option<f64>,
    pub val_miou: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch\tpred\tvisual\tdc\ttextual\ttotal\tval_accuracy\tval_miou";

pub fn history_tsv(history: &[EpochRecord]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.12e}"));
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            f(Some(r.pred)),
            f(r.visual),
            f(r.dc),
            f(r.textual),
            f(Some(r.total)),
            f(r.val_accuracy),
            f(r.val_miou)
        );
    }
    s
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpochRecord>,
    /// Set when training wrote its outputs to disk.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Runs `cfg.epochs` epochs over `data.train`. When `out_dir` is given, the
/// checkpoint and history are rewritten there after every epoch.
pub fn train_prepared(cfg: &ExperimentConfig, data: &PreparedData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = Model::new(cfg.clone(), data.class_names.clone(), data.vocab.clone())?;
    let priors = Priors::from_samples(&data.train, cfg.num_classes, cfg.saliency_resolution)?;
    let mut trainer = Trainer::new(model, priors);
    let seeds = seed_everything(cfg.seed);
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = batch_order(data.train.len(), &seeds, epoch);
        let (mut pred, mut visual, mut dc, mut textual, mut total) =
            (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let b = trainer.train_step(&batch).map_err(|e| match e {
                MeglError::NonFiniteLoss { step, detail } => {
                    MeglError::NonFiniteLoss { step, detail: format!("epoch {epoch}, batch indices {idx:?}: {detail}") }
                }
                other => other,
            })?;
            pred.add(Some(b.pred));
            visual.add(b.visual);
            dc.add(b.dc);
            textual.add(b.textual);
            total.add(Some(b.total));
        }
        let val = if data.val.is_empty() { None } else { Some(evaluate(&trainer.model, &data.val, false)?) };
        history.push(EpochRecord {
            epoch,
            pred: pred.get().unwrap_or(0.0),
            visual: visual.get(),
            dc: dc.get(),
            textual: textual.get(),
            total: total.get().unwrap_or(0.0),
            val_accuracy: val.as_ref().map(|v| v.classification.accuracy),
            val_miou: val.as_ref().and_then(|v| v.miou),
        });
        if let Some(d) = out_dir {
            write_outputs(&trainer, &history, d)?;
        }
    }
    let checkpoint = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    Ok(TrainOutcome { trainer, history, checkpoint })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.megl";
pub const HISTORY_FILE: &str = "history.tsv";

fn write_outputs(trainer: &Trainer, history: &[EpochRecord], dir: &Path) -> Result<()> {
    trainer.model.checkpoint(Some(trainer.priors.global.clone())).save(&dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(HISTORY_FILE), history_tsv(history))?;
    Ok(())
}

/// Full run from a config: data preparation, training and outputs in
/// `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    let out = PathBuf::from(&cfg.output_dir);
    let outcome = train_prepared(cfg, &data, Some(&out))?;
    if cfg.epochs == 0 {
        write_outputs(&outcome.trainer, &outcome.history, &out)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classification: ClassificationReport,
    /// Mean IoU over the samples that carry a mask.
    pub miou: Option<f64>,
    pub n_masks: usize,
    pub text: Option<TextScores>,
}

impl EvalReport {
    /// `key = value` lines keyed by the reported column names.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.classification;
        for (k, v) in [
            ("Accuracy", c.accuracy),
            ("Precision", c.macro_precision),
            ("Recall", c.macro_recall),
            ("F1 Score", c.macro_f1),
        ] {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        match self.miou {
            Some(m) => {
                let _ = writeln!(s, "mIoU = {m:.6}");
            }
            None => s.push_str("mIoU = NA\n"),
        }
        if let Some(t) = &self.text {
            let _ = writeln!(s, "B4 = {:.6}\nR = {:.6}\nC = {:.6}", t.bleu4, t.rouge_l, t.cider);
        }
        s
    }
}

const EVAL_BATCH: usize = 32;

/// Classification and saliency scores on `samples`, plus caption scores when
/// `with_text`. Saliency is computed for the predicted class.
pub fn evaluate(model: &Model, samples: &[Sample], with_text: bool) -> Result<EvalReport> {
    let cfg = &model.config;
    let (s, r) = (cfg.image_size, cfg.saliency_resolution);
    let params = model.params.bind_frozen();
    let grounder = model.grounder();
    let mut acc = ConfusionAccumulator::new(cfg.num_classes);
    let (mut iou_sum, mut n_masks) = (0.0, 0usize);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let images = stack_images(&batch, s)?;
        let (logits, maps, features) = model.saliency_batch(&params, &images, None)?;
        let c = cfg.num_classes;
        for (i, smp) in chunk.iter().enumerate() {
            let p = predict(&logits.data()[i * c..(i + 1) * c])?;
            acc.add(smp.label, p);
            if let Some(mask) = &smp.visual_explanation {
                let pred_map = SaliencyMap::new(
                    maps.data()[i * s * s..(i + 1) * s * s].iter().map(|v| v.max(0.0)).collect(),
                    s,
                    s,
                    Normalization::MinMax,
                )?;
                iou_sum += miou(&resize_minmax(&pred_map, r), &resize_minmax(mask, r), cfg.miou_threshold)?;
                n_masks += 1;
            }
        }
        if with_text {
            no_grad(|| {
                let prefix = grounder.prefix_from(&params, &features, &images, &maps, TextRoutes::default());
                for (i, smp) in chunk.iter().enumerate() {
                    let Some(reference) = &smp.text_explanation else { continue };
                    let p = prefix.narrow(0, i, 1);
                    let out = grounder.generate_tensor(&params, &p, cfg.max_text_len);
                    cands.push(body(&out));
                    refs.push(vec![body(reference)]);
                }
            });
        }
    }
    let text = if with_text && !cands.is_empty() { Some(text_scores(&cands, &refs, cfg.bleu_smoothing)?) } else { None };
    Ok(EvalReport {
        classification: classification_report(&acc)?,
        miou: (n_masks > 0).then(|| iou_sum / n_masks as f64),
        n_masks,
        text,
    })
}

/// Tokens between BOS and the first EOS.
fn body(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .skip(1)
        .take_while(|&&t| t != crate::grounding::EOS)
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub param_count: usize,
    pub latency_ms: f64,
    pub fps: f64,
}

/// Batch-size-one classification latency: median over `n_timed` runs after
/// `n_warmup` discarded ones.
pub fn measure_classifier(classifier: &Classifier, store: &ParamStore, n_warmup: usize, n_timed: usize) -> Result<Efficiency> {
    let s = classifier.image_size;
    let image = ImageTensor::zeros(classifier.backbone.in_channels(), s, s);
    for _ in 0..n_warmup {
        classifier.forward_image(store, &image)?;
    }
    let mut times = Vec::with_capacity(n_timed.max(1));
    for _ in 0..n_timed.max(1) {
        let t = Instant::now();
        classifier.forward_image(store, &image)?;
        times.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    times.sort_by(f64::total_cmp);
    let m = times.len();
    let latency_ms = if m % 2 == 1 { times[m / 2] } else { 0.5 * (times[m / 2 - 1] + times[m / 2]) };
    let latency_ms = latency_ms.max(1e-9);
    Ok(Efficiency { param_count: classifier.param_count(store), latency_ms, fps: 1000.0 / latency_ms })
}

pub fn measure_efficiency(checkpoint: &Path, n_warmup: usize, n_timed: usize) -> Result<Efficiency> {
    let model = Model::from_checkpoint(Checkpoint::load(checkpoint)?);
    measure_classifier(&model.classifier(), &model.params, n_warmup, n_timed)
}

fn stack_images(batch: &[&Sample], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.len() * 3 * size * size);
    for s in batch {
        let im = &s.image;
        if im.channels() != 3 || im.height() != size || im.width() != size {
            return Err(MeglError::ShapeMismatch(format!(
                "expected 3x{size}x{size} images, got {}x{}x{}",
                im.channels(),
                im.height(),
                im.width()
            )));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(data, &[batch.len(), 3, size, size]))
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(|row| predict(row).expect("non-empty logits")).collect()
}

/// Resamples a map to `n x n` and min-max normalizes it.
fn resize_minmax(map: &SaliencyMap, n: usize) -> SaliencyMap {
    if map.dims() == (n, n) && map.normalization() == Normalization::MinMax {
        return map.clone();
    }
    if map.dims() == (n, n) {
        return map.to_minmax();
    }
    let grid = no_grad(|| {
        let t = Tensor::new(map.grid().to_vec(), &[1, map.height(), map.width()]);
        nn::resize_maps(&t, n, n).to_vec()
    });
    SaliencyMap::raw(grid.into_iter().map(|v| v.max(0.0)).collect(), n, n)
        .expect("resampled non-negative map")
        .to_minmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ConvBackbone;
    use crate::data::{render, SyntheticSpec};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            num_classes: 2,
            image_size: 8,
            saliency_resolution: 8,
            backbone_channels: vec![4, 6],
            pooled_blocks: 1,
            aux_feature_dim: 5,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            prefix_tokens: 2,
            max_text_len: 8,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    fn samples(n: usize, with_masks: &[bool]) -> (Vec<Sample>, Vocabulary) {
        let spec = SyntheticSpec { image_size: 8, ..Default::default() };
        let vocab = Vocabulary::build(&["it is a red circle", "it is a red triangle"], 100);
        let mut rng = seed_everything(1).rng("t");
        let out = (0..n)
            .map(|i| {
                let k = i % 2;
                let (img, mask) = render(k, &spec, &mut rng);
                let text = vocab.encode(if k == 0 { "it is a red circle" } else { "it is a red triangle" });
                let mask = with_masks[i % with_masks.len()].then_some(mask);
                Sample::new(img, k, 2, Some(text), mask, (8, 8)).unwrap()
            })
            .collect();
        (out, vocab)
    }

    fn trainer(cfg: ExperimentConfig, data: &[Sample], vocab: Vocabulary) -> Trainer {
        let model = Model::new(cfg.clone(), vec!["a".into(), "b".into()], vocab).unwrap();
        let priors = Priors::from_samples(data, 2, cfg.saliency_resolution).unwrap();
        Trainer::new(model, priors)
    }

    #[test]
    fn accounting_identity_and_branch_counts() {
        let (data, vocab) = samples(4, &[true, false, false]);
        let mut t = trainer(tiny_config(), &data, vocab);
        let batch: Vec<&Sample> = data.iter().collect();
        let b = t.train_step(&batch).unwrap();
        assert!((b.total - b.recomputed_total(1.0, 1.0)).abs() < 1e-12);
        assert_eq!((b.n_supervised, b.n_consistency), (2, 2));
        assert!(b.visual.is_some() && b.dc.is_some() && b.textual.is_some());
    }

    #[test]
    fn zero_weights_match_plain_classifier_step() {
        let (data, vocab) = samples(4, &[true, false]);
        let batch: Vec<&Sample> = data.iter().collect();
        let zero = ExperimentConfig { lambda_visual: 0.0, lambda_textual: 0.0, ..tiny_config() };
        let plain = ExperimentConfig { visual_on: false, textual_on: false, consistency_on: false, ..tiny_config() };
        let mut a = trainer(zero, &data, vocab.clone());
        let mut b = trainer(plain, &data, vocab);
        let before = a.model.params.clone();
        let la = a.train_step(&batch).unwrap();
        let lb = b.train_step(&batch).unwrap();
        assert_eq!(la.total, la.pred);
        assert_eq!(la.pred, lb.pred);
        assert_eq!(a.model.params, b.model.params);
        for (name, p) in before.iter() {
            if name.starts_with("txt.") || name.starts_with("aux.") {
                assert_eq!(a.model.params.get(name).unwrap(), p, "{name} moved");
            }
        }
    }

    #[test]
    fn full_annotation_has_no_consistency_term() {
        let (data, vocab) = samples(4, &[true]);
        let mut t = trainer(tiny_config(), &data, vocab);
        let b = t.train_step(&data.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(b.dc, None);
        assert_eq!(b.n_consistency, 0);
    }

    #[test]
    fn frozen_encoder_never_changes() {
        let (data, vocab) = samples(4, &[true, false]);
        let mut t = trainer(tiny_config(), &data, vocab);
        let aux = |s: &ParamStore| s.iter().filter(|(k, _)| k.starts_with("aux.")).map(|(_, p)| p.clone()).collect::<Vec<_>>();
        let before = aux(&t.model.params);
        for _ in 0..3 {
            t.train_step(&data.iter().collect::<Vec<_>>()).unwrap();
        }
        assert_eq!(aux(&t.model.params), before);
    }

    #[test]
    fn hand_countable_param_count() {
        let cls = Classifier::new(Box::new(ConvBackbone { in_channels: 1, channels: vec![2], pooled_blocks: 0 }), 2, 4);
        let mut s = ParamStore::new();
        cls.register(&mut s, &seed_everything(0));
        // conv 2x(1x3x3) + 2 bias, norm 2 gain + 2 shift, head 2x2 + 2 bias
        assert_eq!(cls.param_count(&s), 18 + 2 + 4 + 4 + 2);
        let e = measure_classifier(&cls, &s, 2, 5).unwrap();
        assert!((e.fps * e.latency_ms - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn history_formatting() {
        let h = vec![EpochRecord {
            epoch: 0,
            pred: 1.5,
            visual: None,
            dc: Some(0.25),
            textual: None,
            total: 1.75,
            val_accuracy: Some(0.5),
            val_miou: None,
        }];
        let t = history_tsv(&h);
        assert_eq!(t.lines().nth(1).unwrap(), "0\t1.500000000000e0\t-\t2.500000000000e-1\t-\t1.750000000000e0\t5.000000000000e-1\t-");
    }
}
