//! Subcommand bodies. Each writes into a staged run directory.

use std::fs;
use std::path::Path;

use hotspot_core::baselines::{
    dice, dice_compare, hsv_threshold_segment, kmeans_lab_segment, kmeans_pv_segment, multilevel_otsu_segment, BBox,
    SegmentationMethod, SegmentationResult,
};
use hotspot_core::data::{
    generate_synthetic, load_dataset, load_manifest_labels, write_dataset, write_mask_png, Label, ThermalImage,
};
use hotspot_core::detect::{
    combine, finetune_with_progress, grid_search_weight, Classifier, ImageSet, Prediction,
};
use hotspot_core::isolate::{gradcam_heatmap, isolate_hotspots, render_overlay, write_heatmap_png};
use hotspot_core::metrics::{
    ablation_report, dice_summary, evaluate_scored, join_truth, read_predictions, render_ablation_markdown,
    write_predictions, write_roc_csv, AblationRun,
};
use hotspot_core::ssl::{ssl_train_with_progress, Encoder, Predictor, SslCheckpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::RunDir;

type CmdResult = Result<(), CliError>;

/// Independent stream per consumer so adding one never shifts another.
pub fn model_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(hotspot_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| hotspot_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CmdResult {
    let mut w = csv::Writer::from_path(path).map_err(hotspot_core::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(hotspot_core::Error::from)?;
    }
    w.flush().map_err(|e| hotspot_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_images(cfg: &RunConfig) -> Result<Vec<ThermalImage>, CliError> {
    let (root, manifest) = cfg.data.resolve()?;
    let images = load_dataset(&root, &manifest)?;
    if images.is_empty() {
        return Err(CliError::runtime(format!("{} lists no images", manifest.display())));
    }
    Ok(images)
}

fn anomalous_only(images: Vec<ThermalImage>) -> Vec<ThermalImage> {
    images.into_iter().filter(|i| i.label == Some(Label::Anomalous)).collect()
}

pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    let samples = generate_synthetic(&cfg.synthetic)?;
    let images: Vec<ThermalImage> = samples.iter().map(|s| s.image.clone()).collect();
    write_dataset(run.path(), &images)?;
    let records: Vec<_> = samples.into_iter().map(|s| s.record).collect();
    write_json(&run.file("synthetic.json"), &json!({ "config": cfg.synthetic, "records": records }))
}

pub fn train_ssl(cfg: &RunConfig, run: &RunDir) -> CmdResult {
    let images = load_images(cfg)?;
    let mut rng = model_rng(cfg.seed, 10);
    let encoder = Encoder::new(cfg.encoder.clone(), &mut rng)?;
    let predictor = Predictor::new(cfg.predictor, &mut rng)?;
    let mut ck = ssl_train_with_progress(encoder, predictor, &images, &cfg.train, &cfg.loss, &mut |r| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  similarity {:.5}  cross-entropy {:.5}  collapse {:.5}",
            r.epoch, r.loss, r.similarity, r.cross_entropy, r.collapse
        )
    })?;
    write_csv(&run.file("history.csv"), &ck.history)?;
    ck.save(&run.file("checkpoint.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    provenance: &'a str,
    best_epoch: usize,
    epochs_run: usize,
}

pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>, run: &RunDir) -> CmdResult {
    let images = load_images(cfg)?;
    let mut rng = model_rng(cfg.seed, 20);
    let classifier = match checkpoint {
        Some(p) => {
            let ck = SslCheckpoint::load(p)?;
            Classifier::from_checkpoint(&ck, format!("ssl:{}", p.display()), &mut rng)
        }
        None => Classifier::random(cfg.encoder.clone(), &mut rng),
    };
    let set = ImageSet::new(&images);
    let mut out = finetune_with_progress(classifier, &set, &cfg.finetune, &mut |r| {
        eprintln!(
            "epoch {:>4}  train {:.5} ({:.3})  val {:.5} ({:.3})",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        )
    })?;
    write_csv(&run.file("history.csv"), &out.history)?;
    out.classifier.save(&run.file("classifier.json"))?;
    write_json(
        &run.file("finetune.json"),
        &FinetuneSummary {
            provenance: &out.classifier.provenance,
            best_epoch: out.best_epoch,
            epochs_run: out.history.len(),
        },
    )
}

pub struct ClassifyArgs<'a> {
    pub model: &'a Path,
    pub second: Option<&'a Path>,
    pub validation: Option<&'a Path>,
}

pub fn classify(cfg: &RunConfig, args: &ClassifyArgs, run: &RunDir) -> CmdResult {
    let images = load_images(cfg)?;
    let batch = cfg.ensemble.batch_size;
    let mut first = Classifier::load(args.model)?;
    let preds = match args.second {
        None => {
            if cfg.ensemble.weight.is_some() || args.validation.is_some() {
                return Err(CliError::usage("--weight and --validation need a second model (--second)"));
            }
            first.predict_images(&images, batch)?
        }
        Some(second_path) => {
            let mut second = Classifier::load(second_path)?;
            let (weight, source) = match (cfg.ensemble.weight, args.validation) {
                (Some(w), _) => (w, "fixed"),
                (None, Some(dir)) => {
                    let val = load_dataset(dir, &dir.join(hotspot_core::data::MANIFEST_FILE))?;
                    (grid_search_weight(&mut first, &mut second, &val)?, "grid_search")
                }
                (None, None) => {
                    return Err(CliError::usage(
                        "an ensemble needs --weight or a labelled --validation dataset for the grid search",
                    ))
                }
            };
            eprintln!("ensemble weight {weight:.2} ({source})");
            write_json(&run.file("ensemble.json"), &json!({ "weight": weight, "source": source }))?;
            let a = first.predict_images(&images, batch)?;
            let b = second.predict_images(&images, batch)?;
            combine(&a, &b, weight)
        }
    };
    write_predictions(&run.file("predictions.csv"), &preds)?;
    Ok(())
}

#[derive(Serialize)]
struct DiceRow<'a> {
    id: &'a str,
    dice: f64,
}

fn write_dice_report(run: &RunDir, rows: &[(String, f64)]) -> CmdResult {
    if rows.is_empty() {
        return Ok(());
    }
    let csv_rows: Vec<DiceRow> = rows.iter().map(|(id, d)| DiceRow { id, dice: *d }).collect();
    write_csv(&run.file("dice_report.csv"), &csv_rows)?;
    let values: Vec<f64> = rows.iter().map(|(_, d)| *d).collect();
    let s = dice_summary(&values)?;
    eprintln!("mean Dice {s} over {} images", s.count);
    write_json(
        &run.file("dice_summary.json"),
        &json!({ "mean": s.mean, "std": s.std, "count": s.count, "formatted": s.to_string() }),
    )
}

pub struct IsolateArgs<'a> {
    pub model: &'a Path,
    pub class_index: usize,
    pub overlay: bool,
    pub only_anomalous: bool,
}

pub fn isolate(cfg: &RunConfig, args: &IsolateArgs, run: &RunDir) -> CmdResult {
    let mut images = load_images(cfg)?;
    if args.only_anomalous {
        images = anomalous_only(images);
    }
    let mut c = Classifier::load(args.model)?;
    let mut dice_rows = Vec::new();
    for img in &images {
        let heat = gradcam_heatmap(&mut c, img, args.class_index)?;
        let region = isolate_hotspots(&heat, &cfg.isolate);
        write_heatmap_png(&heat, &run.file(&format!("heatmap_{}.png", img.id)))?;
        write_mask_png(&run.file(&format!("mask_{}.png", img.id)), &region.mask)?;
        write_json(
            &run.file(&format!("regions_{}.json", img.id)),
            &json!({ "id": img.id, "class_index": args.class_index, "components": region.components }),
        )?;
        if args.overlay {
            render_overlay(img, &heat, &region, &run.file(&format!("overlay_{}.png", img.id)))?;
        }
        if let Some(truth) = &img.mask {
            dice_rows.push((img.id.clone(), dice(&region.mask, truth)?));
        }
    }
    write_dice_report(run, &dice_rows)
}

pub struct BaselineArgs {
    pub method: SegmentationMethod,
    pub only_anomalous: bool,
}

fn segment(cfg: &RunConfig, method: SegmentationMethod, img: &ThermalImage) -> Result<SegmentationResult, CliError> {
    let b = &cfg.baseline;
    Ok(match method {
        SegmentationMethod::KmeansLab => kmeans_lab_segment(img, b.kmeans_k, b.seed)?,
        SegmentationMethod::KmeansPv => {
            let bbox = b.bbox.unwrap_or_else(|| BBox::full(img.height(), img.width()));
            kmeans_pv_segment(img, bbox, b.seed)?
        }
        SegmentationMethod::HsvThreshold => match (b.hsv_lower, b.hsv_upper) {
            (Some(lo), Some(hi)) => hsv_threshold_segment(img, lo, hi)?,
            _ => return Err(CliError::usage("the hsv method needs --lower and --upper bounds")),
        },
        SegmentationMethod::MultilevelOtsu => multilevel_otsu_segment(img, b.otsu_thresholds, b.opening_radius)?,
    })
}

pub fn baseline(cfg: &RunConfig, args: &BaselineArgs, run: &RunDir) -> CmdResult {
    if args.method == SegmentationMethod::HsvThreshold && (cfg.baseline.hsv_lower.is_none() || cfg.baseline.hsv_upper.is_none()) {
        return Err(CliError::usage("the hsv method needs --lower and --upper bounds"));
    }
    let mut images = load_images(cfg)?;
    if args.only_anomalous {
        images = anomalous_only(images);
    }
    let mut dice_rows = Vec::new();
    for img in &images {
        let result = segment(cfg, args.method, img)?;
        write_mask_png(&run.file(&format!("mask_{}.png", img.id)), &result.mask)?;
        if let Some(truth) = &img.mask {
            dice_rows.push((img.id.clone(), dice_compare(&result, truth)?));
        }
    }
    write_dice_report(run, &dice_rows)
}

pub fn evaluate(preds: &Path, labels: &Path, run: &RunDir) -> CmdResult {
    let predictions: Vec<Prediction> = read_predictions(preds)?;
    let truth = load_manifest_labels(labels)?;
    let (report, roc) = evaluate_scored(&join_truth(&predictions, &truth)?)?;
    write_json(&run.file("metrics.json"), &report)?;
    if let Some(points) = roc {
        write_roc_csv(&run.file("roc.csv"), &points)?;
    }
    eprintln!(
        "accuracy {:.4}  precision {:.4}  sensitivity {:.4}  specificity {:.4}  f-score {:.4}",
        report.accuracy, report.precision, report.sensitivity, report.specificity, report.f_score
    );
    Ok(())
}

pub fn ablate(labels: &Path, runs: &[AblationRun], run: &RunDir) -> CmdResult {
    if runs.is_empty() {
        return Err(CliError::usage("ablate needs at least one --run NAME=PREDICTIONS"));
    }
    let truth = load_manifest_labels(labels)?;
    let rows = ablation_report(runs, &truth)?;
    fs::write(run.file("ablation.md"), render_ablation_markdown(&rows)).map_err(|e| hotspot_core::Error::Io {
        path: run.file("ablation.md"),
        source: e,
    })?;
    Ok(())
}
