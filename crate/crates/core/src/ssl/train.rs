use std::path::Path;

use ndarray::Ix2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{pair_loss, LossConfig};
use super::model::{Encoder, EncoderSpec, Predictor, PredictorSpec};
use crate::data::resample::resize;
use crate::data::{make_view_pair, AugmentPolicy, ThermalImage};
use crate::error::{Error, Result};
use crate::nn::{images_to_batch, join, Archive, Mode, Module, Sgd, StateVisitor, Tensor, INPUT_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the epoch loss has not improved for this many epochs.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 81,
            lr: 0.001,
            momentum: 0.6,
            epochs: 200,
            seed: 0,
            early_stop_patience: None,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size must be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be positive"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub similarity: f64,
    pub cross_entropy: f64,
    /// Mean per-dimension std of unit-normalised projections across a batch.
    pub collapse: f64,
}

/// Trained weights together with everything needed to reproduce them.
#[derive(Debug, Clone)]
pub struct SslCheckpoint {
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    encoder: EncoderSpec,
    predictor: PredictorSpec,
    train: TrainConfig,
    loss: LossConfig,
    seed: u64,
    history: Vec<EpochRecord>,
}

const CHECKPOINT_KIND: &str = "ssl-checkpoint";

impl SslCheckpoint {
    pub fn to_archive(&mut self) -> Result<Archive> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            encoder: self.encoder.spec,
            predictor: self.predictor.spec,
            train: self.train,
            loss: self.loss,
            seed: self.train.seed,
            history: self.history.clone(),
        };
        let mut archive = Archive::new(serde_json::to_value(meta)?);
        self.encoder.export_state("encoder", &mut archive);
        self.predictor.export_state("predictor", &mut archive);
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint header: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected an SSL checkpoint, found {:?}", meta.kind)));
        }
        // Initial values are overwritten by the import below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut encoder = Encoder::new(meta.encoder, &mut rng)?;
        let mut predictor = Predictor::new(meta.predictor, &mut rng)?;
        encoder.import_state("encoder", archive)?;
        predictor.import_state("predictor", archive)?;
        Ok(Self {
            encoder,
            predictor,
            train: meta.train,
            loss: meta.loss,
            history: meta.history,
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Both networks as one optimisable module.
struct Siamese<'a> {
    encoder: &'a mut Encoder,
    predictor: &'a mut Predictor,
}

impl Module for Siamese<'_> {
    fn visit_state(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.encoder.visit_state(&join(prefix, "encoder"), v);
        self.predictor.visit_state(&join(prefix, "predictor"), v);
    }
}

fn rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    let m = t.view().into_dimensionality::<Ix2>().expect("rank-2 activations");
    m.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Mean over dimensions of the std of unit-normalised rows.
pub fn collapse_monitor(z: &[Vec<f64>]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let d = z[0].len();
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let n = unit.len() as f64;
    (0..d)
        .map(|j| {
            let mean = unit.iter().map(|r| r[j]).sum::<f64>() / n;
            (unit.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / d as f64
}

pub fn ssl_train(
    encoder: Encoder,
    predictor: Predictor,
    data: &[ThermalImage],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<SslCheckpoint> {
    ssl_train_with_progress(encoder, predictor, data, tcfg, lcfg, &mut |_| {})
}

/// As [`ssl_train`], calling `on_epoch` after every epoch.
pub fn ssl_train_with_progress(
    mut encoder: Encoder,
    mut predictor: Predictor,
    data: &[ThermalImage],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<SslCheckpoint> {
    tcfg.validate()?;
    lcfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("no training images"));
    }
    if tcfg.batch_size > data.len() {
        return Err(Error::validation(format!(
            "batch_size {} exceeds the {} training images",
            tcfg.batch_size,
            data.len()
        )));
    }
    if encoder.spec.projection_dim != predictor.spec.input_dim {
        return Err(Error::validation("predictor input_dim must equal the projection_dim"));
    }

    // Resize once; augmentation would otherwise repeat it for every view.
    let images: Vec<ThermalImage> = data
        .iter()
        .map(|img| ThermalImage::new(img.id.clone(), resize(&img.pixels, INPUT_SIDE, INPUT_SIDE), None, None))
        .collect::<Result<_>>()?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut view_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ tcfg.augment.seed.rotate_left(32));
    view_rng.set_stream(1);
    let mut opt = Sgd::new(tcfg.lr as f32, tcfg.momentum as f32);
    let b = tcfg.batch_size;
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=tcfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut sum, mut sim_sum, mut ce_sum, mut col_sum) = (0.0, 0.0, 0.0, 0.0);
        let steps = images.len() / b;
        for (step, chunk) in order.chunks_exact(b).enumerate() {
            let pairs: Vec<_> = chunk
                .iter()
                .map(|&i| make_view_pair(&images[i], &tcfg.augment, &mut view_rng))
                .collect();
            let views: Vec<_> = pairs.iter().map(|p| &p.v1).chain(pairs.iter().map(|p| &p.v2)).collect();
            let x = images_to_batch(&views)?;

            let z = encoder.forward(&x, Mode::Train)?;
            let p = predictor.forward(&z, Mode::Train)?;
            let (zr, pr) = (rows_f64(&z), rows_f64(&p));
            let d = zr[0].len();
            let mut grad = Tensor::zeros(vec![2 * b, d]);
            let (mut loss, mut sim, mut ce) = (0.0, 0.0, 0.0);
            for i in 0..b {
                let pl = pair_loss(&pr[i], &zr[i], &pr[b + i], &zr[b + i], lcfg).map_err(|e| match e {
                    Error::NumericDomain(_) => Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                        similarity: f64::NAN,
                        cross_entropy: f64::NAN,
                    },
                    other => other,
                })?;
                loss += pl.total;
                sim += pl.similarity;
                ce += pl.cross_entropy;
                let scale = 1.0 / b as f64;
                for j in 0..d {
                    grad[[i, j]] = (pl.grad_p1[j] * scale) as f32;
                    grad[[b + i, j]] = (pl.grad_p2[j] * scale) as f32;
                }
            }
            let (loss, sim, ce) = (loss / b as f64, sim / b as f64, ce / b as f64);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss,
                    similarity: sim,
                    cross_entropy: ce,
                });
            }

            // The projections enter the loss only as constants, so the
            // encoder sees gradient solely through the predictor.
            let mut model = Siamese {
                encoder: &mut encoder,
                predictor: &mut predictor,
            };
            model.zero_grad();
            let dz = model.predictor.backward(&grad);
            model.encoder.backward(&dz);
            opt.step(&mut model);

            sum += loss;
            sim_sum += sim;
            ce_sum += ce;
            col_sum += collapse_monitor(&zr[..b]);
        }
        encoder.clear_cache();
        predictor.clear_cache();
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            loss: sum / n,
            similarity: sim_sum / n,
            cross_entropy: ce_sum / n,
            collapse: col_sum / n,
        };
        on_epoch(&rec);
        history.push(rec);

        if rec.loss < best {
            best = rec.loss;
            stale = 0;
        } else {
            stale += 1;
        }
        if tcfg.early_stop_patience.is_some_and(|p| stale >= p) {
            break;
        }
    }

    Ok(SslCheckpoint {
        encoder,
        predictor,
        train: *tcfg,
        loss: *lcfg,
        history,
    })
}
