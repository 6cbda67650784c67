use std::path::Path;

use ndarray::{s, Array2, Array3, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::resample::resize;
use crate::data::{Label, ThermalImage};
use crate::error::{Error, Result};
use crate::nn::{images_to_batch, join, Adam, Archive, Backbone, Dense, Mode, Module, StateVisitor, Tensor, INPUT_SIDE};
use crate::ssl::{check_image_batch, EncoderSpec, SslCheckpoint};

/// Two-class probabilities `[p(normal), p(anomalous)]`.
pub type Probs = [f64; 2];

/// Argmax with ties resolved toward `Normal`.
pub fn label_of(probs: &Probs) -> Label {
    if probs[1] > probs[0] {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

pub fn softmax2(logits: [f64; 2]) -> Probs {
    let m = logits[0].max(logits[1]);
    let (a, b) = ((logits[0] - m).exp(), (logits[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    pub probs: Probs,
}

/// Pooled backbone features followed by a two-unit softmax layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    /// `None` for hand-assembled backbones that take non-image inputs.
    pub spec: Option<EncoderSpec>,
    pub backbone: Backbone,
    pub head: Dense,
    /// Identifies the checkpoint the backbone was initialised from.
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    encoder: EncoderSpec,
    provenance: String,
}

const CLASSIFIER_KIND: &str = "classifier";

impl Classifier {
    pub fn from_checkpoint<R: Rng + ?Sized>(ck: &SslCheckpoint, provenance: impl Into<String>, rng: &mut R) -> Self {
        let backbone = ck.encoder.backbone.clone();
        let head = Dense::new(backbone.out_dim, 2, rng);
        Self {
            spec: Some(ck.encoder.spec),
            backbone,
            head,
            provenance: provenance.into(),
        }
    }

    /// Randomly initialised backbone of the given kind.
    pub fn random<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Self {
        let backbone = spec.build_backbone(rng);
        let head = Dense::new(backbone.out_dim, 2, rng);
        Self {
            spec: Some(spec),
            backbone,
            head,
            provenance: "random-init".into(),
        }
    }

    pub fn from_backbone<R: Rng + ?Sized>(backbone: Backbone, provenance: impl Into<String>, rng: &mut R) -> Self {
        let head = Dense::new(backbone.out_dim, 2, rng);
        Self {
            spec: None,
            backbone,
            head,
            provenance: provenance.into(),
        }
    }

    pub fn logits(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if self.spec.is_some() {
            check_image_batch(x)?;
        }
        let h = self.backbone.forward(x, mode)?;
        self.head.forward(&h)
    }

    /// Backpropagates a logit gradient; returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.head.backward(grad);
        self.backbone.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.backbone.clear_cache();
        self.head.input = None;
    }

    pub fn predict_batch(&mut self, x: &Tensor) -> Result<Vec<Probs>> {
        let logits = self.logits(x, Mode::Infer)?;
        self.clear_cache();
        let m = logits.into_dimensionality::<Ix2>().expect("rank-2 logits");
        Ok(m.outer_iter().map(|r| softmax2([r[0] as f64, r[1] as f64])).collect())
    }

    pub fn classify(&mut self, img: &ThermalImage) -> Result<(Label, Probs)> {
        let x = images_to_batch(&[&network_input(img)])?;
        let probs = self.predict_batch(&x)?[0];
        Ok((label_of(&probs), probs))
    }

    pub fn predict_images(&mut self, images: &[ThermalImage], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let inputs: Vec<Array3<f32>> = chunk.iter().map(network_input).collect();
            let refs: Vec<_> = inputs.iter().collect();
            for (img, probs) in chunk.iter().zip(self.predict_batch(&images_to_batch(&refs)?)?) {
                out.push(Prediction {
                    id: img.id.clone(),
                    label: label_of(&probs),
                    probs,
                });
            }
        }
        Ok(out)
    }

    pub fn to_archive(&mut self) -> Result<Archive> {
        let Some(spec) = self.spec else {
            return Err(Error::Checkpoint("only image classifiers can be archived".into()));
        };
        let meta = ClassifierMeta {
            kind: CLASSIFIER_KIND.into(),
            encoder: spec,
            provenance: self.provenance.clone(),
        };
        let mut archive = Archive::new(serde_json::to_value(meta)?);
        self.export_state("", &mut archive);
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: ClassifierMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable classifier header: {e}")))?;
        if meta.kind != CLASSIFIER_KIND {
            return Err(Error::Checkpoint(format!("expected a classifier, found {:?}", meta.kind)));
        }
        let mut c = Self::random(meta.encoder, &mut ChaCha8Rng::seed_from_u64(0));
        c.provenance = meta.provenance;
        c.import_state("", archive)?;
        Ok(c)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

impl Module for Classifier {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.backbone.visit_state(&join(prefix, "backbone"), v);
        v.param(&join(prefix, "head.weight"), &mut self.head.weight);
        v.param(&join(prefix, "head.bias"), &mut self.head.bias);
    }
}

pub(crate) fn network_input(img: &ThermalImage) -> Array3<f32> {
    resize(&img.pixels, INPUT_SIDE, INPUT_SIDE)
}

/// A labelled set that can be materialised one mini-batch at a time.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, i: usize) -> Option<Label>;
    fn batch(&self, idx: &[usize]) -> Result<Tensor>;
}

/// Images resized to the network input once up front.
pub struct ImageSet {
    inputs: Vec<Array3<f32>>,
    labels: Vec<Option<Label>>,
}

impl ImageSet {
    pub fn new(images: &[ThermalImage]) -> Self {
        Self {
            inputs: images.iter().map(network_input).collect(),
            labels: images.iter().map(|i| i.label).collect(),
        }
    }
}

impl BatchSource for ImageSet {
    fn len(&self) -> usize {
        self.inputs.len()
    }
    fn label(&self, i: usize) -> Option<Label> {
        self.labels[i]
    }
    fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let refs: Vec<_> = idx.iter().map(|&i| &self.inputs[i]).collect();
        images_to_batch(&refs)
    }
}

/// Row-wise feature vectors with labels.
pub struct FeatureSet {
    pub features: ndarray::Array2<f32>,
    pub labels: Vec<Label>,
}

impl BatchSource for FeatureSet {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn label(&self, i: usize) -> Option<Label> {
        Some(self.labels[i])
    }
    fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        Ok(self.features.select(ndarray::Axis(0), idx).into_dyn())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation-loss improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
    /// Head-only epochs on frozen backbone features before full fine-tuning.
    #[serde(default)]
    pub head_warmup_epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            patience: Some(10),
            val_fraction: 0.2,
            seed: 0,
            head_warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub classifier: Classifier,
    pub history: Vec<FinetuneEpoch>,
    /// Epoch whose weights were kept (0 when no epoch ran).
    pub best_epoch: usize,
}

/// Seeded stratified split; returns `(train, validation)` indices.
pub fn stratified_split(labels: &[Label], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [Label::Normal, Label::Anomalous] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mean cross-entropy and accuracy over `idx`, in inference mode.
fn evaluate(c: &mut Classifier, data: &dyn BatchSource, labels: &[Label], idx: &[usize], batch: usize) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch) {
        let probs = c.predict_batch(&data.batch(chunk)?)?;
        for (&i, p) in chunk.iter().zip(&probs) {
            loss -= p[labels[i].index()].max(1e-300).ln();
            correct += (label_of(p) == labels[i]) as usize;
        }
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// The head's parameters alone, named as inside [`Classifier`].
struct HeadParams<'a>(&'a mut Dense);

impl Module for HeadParams<'_> {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.param(&join(prefix, "head.weight"), &mut self.0.weight);
        v.param(&join(prefix, "head.bias"), &mut self.0.bias);
    }
}

/// Mean softmax cross-entropy gradient w.r.t. the logits, plus the summed
/// loss and the number of correct predictions.
fn cross_entropy_step(logits: &Tensor, targets: &[Label]) -> (Tensor, f64, usize) {
    let m = logits.view().into_dimensionality::<Ix2>().expect("rank-2 logits");
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(vec![targets.len(), 2]);
    let (mut loss, mut correct) = (0.0, 0usize);
    for (r, &t) in targets.iter().enumerate() {
        let p = softmax2([m[[r, 0]] as f64, m[[r, 1]] as f64]);
        let y = t.index();
        loss -= p[y].max(1e-300).ln();
        correct += (label_of(&p) == t) as usize;
        for k in 0..2 {
            grad[[r, k]] = ((p[k] - (k == y) as u8 as f64) / n) as f32;
        }
    }
    (grad, loss, correct)
}

/// Trains the head on features computed once by the frozen backbone.
fn warm_up_head<R: Rng>(
    c: &mut Classifier,
    data: &dyn BatchSource,
    labels: &[Label],
    train: &[usize],
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<()> {
    let mut features = Array2::<f32>::zeros((train.len(), c.backbone.out_dim));
    for (k, chunk) in train.chunks(cfg.batch_size).enumerate() {
        let h = c.backbone.forward(&data.batch(chunk)?, Mode::Infer)?;
        c.backbone.clear_cache();
        let h = h.into_dimensionality::<Ix2>().expect("rank-2 features");
        let start = k * cfg.batch_size;
        features.slice_mut(s![start..start + chunk.len(), ..]).assign(&h);
    }
    let mut opt = Adam::new(cfg.lr as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.head_warmup_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let logits = c.head.forward(&features.select(Axis(0), chunk).into_dyn())?;
            let targets: Vec<Label> = chunk.iter().map(|&r| labels[train[r]]).collect();
            let (grad, _, _) = cross_entropy_step(&logits, &targets);
            let mut head = HeadParams(&mut c.head);
            head.zero_grad();
            head.0.backward(&grad);
            opt.step(&mut head);
        }
    }
    c.head.input = None;
    Ok(())
}

/// Fine-tunes every parameter with Adam on sparse categorical cross-entropy,
/// keeping the weights with the lowest validation loss.
pub fn finetune(classifier: Classifier, data: &dyn BatchSource, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    finetune_with_progress(classifier, data, cfg, &mut |_| {})
}

pub fn finetune_with_progress(
    mut c: Classifier,
    data: &dyn BatchSource,
    cfg: &FinetuneConfig,
    on_epoch: &mut dyn FnMut(&FinetuneEpoch),
) -> Result<FinetuneOutcome> {
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) || !(cfg.lr >= 0.0) {
        return Err(Error::validation("invalid fine-tuning configuration"));
    }
    let labels: Vec<Label> = (0..data.len())
        .map(|i| data.label(i).ok_or_else(|| Error::validation(format!("sample {i} has no label"))))
        .collect::<Result<_>>()?;
    let (train, val) = stratified_split(&labels, cfg.val_fraction, cfg.seed);
    let classes = |idx: &[usize]| {
        let pos = idx.iter().filter(|&&i| labels[i] == Label::Anomalous).count();
        (idx.len() - pos, pos)
    };
    let (neg, pos) = classes(&train);
    if neg == 0 || pos == 0 {
        return Err(Error::validation("fine-tuning needs both classes in the training split"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    if cfg.epochs > 0 && cfg.head_warmup_epochs > 0 {
        warm_up_head(&mut c, data, &labels, &train, cfg, &mut rng)?;
    }
    let mut opt = Adam::new(cfg.lr as f32);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Archive)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch(chunk)?;
            let logits = c.logits(&x, Mode::Train)?;
            let targets: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let (grad, loss, hits) = cross_entropy_step(&logits, &targets);
            loss_sum += loss;
            correct += hits;
            c.zero_grad();
            c.backward(&grad);
            opt.step(&mut c);
        }
        c.clear_cache();
        let (val_loss, val_accuracy) = evaluate(&mut c, data, &labels, &val, cfg.batch_size)?;
        let rec = FinetuneEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        if !rec.train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: 0,
                loss: rec.train_loss,
                similarity: f64::NAN,
                cross_entropy: rec.train_loss,
            });
        }
        on_epoch(&rec);
        history.push(rec);

        if val.is_empty() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            let mut snap = Archive::new(serde_json::Value::Null);
            c.export_state("", &mut snap);
            best = Some((val_loss, epoch, snap));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, snap)) => {
            c.import_state("", &snap)?;
            epoch
        }
        None => history.len(),
    };
    Ok(FinetuneOutcome {
        classifier: c,
        history,
        best_epoch,
    })
}

/// Fraction of labelled images whose predicted label matches.
pub fn accuracy(c: &mut Classifier, images: &[ThermalImage], batch_size: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("no images to score"));
    }
    let preds = c.predict_images(images, batch_size)?;
    let mut correct = 0usize;
    for (img, p) in images.iter().zip(&preds) {
        let y = img.label.ok_or_else(|| Error::validation(format!("image {} has no label", img.id)))?;
        correct += (p.label == y) as usize;
    }
    Ok(correct as f64 / images.len() as f64)
}
