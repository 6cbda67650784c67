//! `hotspot` command-line front end.
//!
//! Every subcommand loads a [`config::RunConfig`] (JSON file, then `--set`
//! overrides, then dedicated flags), validates it, and writes its artifacts to
//! `<output root>/<subcommand>-<UTC timestamp>-<seed>/`. The run directory path
//! is printed on stdout. Failures print a JSON error record on stderr and exit
//! with 2 for usage errors and 1 for runtime errors.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use hotspot_core::baselines::SegmentationMethod;
use hotspot_core::metrics::AblationRun;
use serde_json::Value;

use crate::config::{parse_assignment, RunConfig, OUT_ROOT_ENV};
use crate::error::CliError;
use crate::output::RunDir;

#[derive(Debug, Parser)]
#[command(name = "hotspot", version, about = "Self-supervised hotspot detection and isolation in thermal images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random number generator in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact root (default `out`, or the HOTSPOT_OUT_ROOT environment variable).
    #[arg(long, value_name = "DIR")]
    out_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Manifest file, when not `<data>/manifest.csv`.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic thermal dataset with hotspot masks.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        anomalous_fraction: Option<f64>,
        /// Image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Self-supervised pre-training of an encoder and predictor.
    TrainSsl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        /// Loss variant: `regular` or `compound`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        /// Backbone: `xception` or `tiny`.
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Fine-tune a binary classifier from an SSL checkpoint or from random weights.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// SSL checkpoint; random initialisation when omitted.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Backbone for random initialisation.
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Classify images with one model or a weighted two-model ensemble.
    Classify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Second ensemble member.
        #[arg(long, value_name = "FILE")]
        second: Option<PathBuf>,
        /// Fixed weight of the first model.
        #[arg(long)]
        weight: Option<f64>,
        /// Labelled dataset used to grid-search the ensemble weight.
        #[arg(long, value_name = "DIR")]
        validation: Option<PathBuf>,
    },
    /// GradCAM heatmaps and isolated hotspot regions.
    Isolate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Class to explain (1 = anomalous).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
        class: u8,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        min_area: Option<usize>,
        /// Also write overlay_<id>.png panels.
        #[arg(long)]
        overlay: bool,
        /// Only process images labelled anomalous in the manifest.
        #[arg(long)]
        only_anomalous: bool,
    },
    /// Classical segmentation baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// kmeans_lab, kmeans_pv, hsv or otsu.
        #[arg(long)]
        method: String,
        /// Cluster count for kmeans_lab.
        #[arg(long)]
        k: Option<usize>,
        /// Threshold count for otsu.
        #[arg(long)]
        thresholds: Option<usize>,
        /// Disk radius of the opening applied by otsu.
        #[arg(long)]
        radius: Option<usize>,
        /// Crop for kmeans_pv as `top,left,height,width`.
        #[arg(long)]
        bbox: Option<String>,
        /// Lower HSV bound as `h,s,v` (hue in degrees).
        #[arg(long)]
        lower: Option<String>,
        /// Upper HSV bound as `h,s,v`.
        #[arg(long)]
        upper: Option<String>,
        /// Only process images labelled anomalous in the manifest.
        #[arg(long)]
        only_anomalous: bool,
    },
    /// Confusion metrics, AUC and ROC for a predictions file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        preds: PathBuf,
        /// Manifest with ground-truth labels.
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
    },
    /// Markdown metrics table over several prediction files.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        /// `NAME=PREDICTIONS_CSV`, one per table row, in order.
        #[arg(long = "run", value_name = "NAME=FILE", required = true)]
        runs: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::TrainSsl { .. } => "train-ssl",
            Self::Finetune { .. } => "finetune",
            Self::Classify { .. } => "classify",
            Self::Isolate { .. } => "isolate",
            Self::Baseline { .. } => "baseline",
            Self::Evaluate { .. } => "evaluate",
            Self::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::GenData { common, .. }
            | Self::TrainSsl { common, .. }
            | Self::Finetune { common, .. }
            | Self::Classify { common, .. }
            | Self::Isolate { common, .. }
            | Self::Baseline { common, .. }
            | Self::Evaluate { common, .. }
            | Self::Ablate { common, .. } => common,
        }
    }
}

struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn put<T: Into<Value>>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.put(key, v.as_ref().map(|p| p.to_string_lossy().into_owned()));
    }
}

fn numbers<const N: usize>(flag: &str, s: &str) -> Result<[f64; N], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| flag_error(flag, format!("{flag} expects {N} comma-separated numbers, got {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| flag_error(flag, format!("{flag} expects {N} comma-separated numbers, got {s:?}")))
}

fn flag_error(flag: &str, message: String) -> CliError {
    CliError::Usage {
        message,
        flag: Some(flag.to_string()),
    }
}

fn hsv_value(flag: &str, s: &str) -> Result<Value, CliError> {
    let [h, s_, v] = numbers::<3>(flag, s)?;
    Ok(serde_json::json!({ "h": h, "s": s_, "v": v }))
}

fn collect_overrides(cmd: &Command) -> Result<Vec<(String, Value)>, CliError> {
    let c = cmd.common();
    let mut o = Overrides(c.set.iter().map(|s| parse_assignment(s)).collect::<Result<_, _>>()?);
    o.put("seed", c.seed);
    o.path("output_root", &c.out_root);
    let data = |o: &mut Overrides, d: &DataArgs| {
        o.path("data.root", &d.data);
        o.path("data.manifest", &d.manifest);
    };
    match cmd {
        Command::GenData {
            n_images,
            anomalous_fraction,
            size,
            ..
        } => {
            o.put("synthetic.n_images", *n_images);
            o.put("synthetic.anomalous_fraction", *anomalous_fraction);
            o.put("synthetic.image_size", size.map(|s| serde_json::json!([s, s])));
        }
        Command::TrainSsl {
            data: d,
            epochs,
            batch_size,
            lr,
            momentum,
            variant,
            beta,
            backbone,
            ..
        } => {
            data(&mut o, d);
            o.put("train.epochs", *epochs);
            o.put("train.batch_size", *batch_size);
            o.put("train.lr", *lr);
            o.put("train.momentum", *momentum);
            o.put("loss.variant", variant.clone());
            o.put("loss.beta", *beta);
            o.put("encoder.backbone", backbone.clone());
        }
        Command::Finetune {
            data: d,
            epochs,
            batch_size,
            lr,
            backbone,
            ..
        } => {
            data(&mut o, d);
            o.put("finetune.epochs", *epochs);
            o.put("finetune.batch_size", *batch_size);
            o.put("finetune.lr", *lr);
            o.put("encoder.backbone", backbone.clone());
        }
        Command::Classify { data: d, weight, .. } => {
            data(&mut o, d);
            o.put("ensemble.weight", *weight);
        }
        Command::Isolate {
            data: d,
            threshold,
            min_area,
            ..
        } => {
            data(&mut o, d);
            o.put("isolate.threshold", *threshold);
            o.put("isolate.min_area", *min_area);
        }
        Command::Baseline {
            data: d,
            k,
            thresholds,
            radius,
            bbox,
            lower,
            upper,
            ..
        } => {
            data(&mut o, d);
            o.put("baseline.kmeans_k", *k);
            o.put("baseline.otsu_thresholds", *thresholds);
            o.put("baseline.opening_radius", *radius);
            if let Some(b) = bbox {
                let [top, left, height, width] = numbers::<4>("--bbox", b)?;
                o.put(
                    "baseline.bbox",
                    Some(serde_json::json!({ "top": top, "left": left, "height": height, "width": width })),
                );
            }
            if let Some(s) = lower {
                o.put("baseline.hsv_lower", Some(hsv_value("--lower", s)?));
            }
            if let Some(s) = upper {
                o.put("baseline.hsv_upper", Some(hsv_value("--upper", s)?));
            }
        }
        Command::Evaluate { .. } | Command::Ablate { .. } => {}
    }
    Ok(o.0)
}

fn output_root(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_root.clone(),
    }
}

fn parse_runs(runs: &[String]) -> Result<Vec<AblationRun>, CliError> {
    runs.iter()
        .map(|r| {
            let (name, path) = r
                .split_once('=')
                .filter(|(n, p)| !n.is_empty() && !p.is_empty())
                .ok_or_else(|| flag_error("--run", format!("--run expects NAME=FILE, got {r:?}")))?;
            Ok(AblationRun {
                name: name.to_string(),
                predictions: PathBuf::from(path),
            })
        })
        .collect()
}

fn execute(cmd: &Command) -> Result<PathBuf, CliError> {
    let cfg = config::load(cmd.common().config.as_deref(), &collect_overrides(cmd)?)?;
    let method = match cmd {
        Command::Baseline { method, .. } => Some(
            method
                .parse::<SegmentationMethod>()
                .map_err(|e| flag_error("--method", e.to_string()))?,
        ),
        _ => None,
    };
    let runs = match cmd {
        Command::Ablate { runs, .. } => parse_runs(runs)?,
        _ => Vec::new(),
    };
    let run = RunDir::create(&output_root(&cfg, cmd.common().out_root.as_deref()), cmd.name(), cfg.seed)?;
    match cmd {
        Command::GenData { .. } => commands::gen_data(&cfg, &run)?,
        Command::TrainSsl { .. } => commands::train_ssl(&cfg, &run)?,
        Command::Finetune { checkpoint, .. } => commands::finetune(&cfg, checkpoint.as_deref(), &run)?,
        Command::Classify {
            model,
            second,
            validation,
            ..
        } => commands::classify(
            &cfg,
            &commands::ClassifyArgs {
                model,
                second: second.as_deref(),
                validation: validation.as_deref(),
            },
            &run,
        )?,
        Command::Isolate {
            model,
            class,
            overlay,
            only_anomalous,
            ..
        } => commands::isolate(
            &cfg,
            &commands::IsolateArgs {
                model,
                class_index: *class as usize,
                overlay: *overlay,
                only_anomalous: *only_anomalous,
            },
            &run,
        )?,
        Command::Baseline { only_anomalous, .. } => commands::baseline(
            &cfg,
            &commands::BaselineArgs {
                method: method.expect("parsed above"),
                only_anomalous: *only_anomalous,
            },
            &run,
        )?,
        Command::Evaluate { preds, labels, .. } => commands::evaluate(preds, labels, &run)?,
        Command::Ablate { labels, .. } => commands::ablate(labels, &runs, &run)?,
    }
    let resolved = serde_json::to_string_pretty(&cfg).map_err(hotspot_core::Error::from)?;
    std::fs::write(run.file("config.json"), resolved + "\n").map_err(|e| hotspot_core::Error::Io {
        path: run.file("config.json"),
        source: e,
    })?;
    run.commit()
}

fn clap_usage_error(e: &clap::Error) -> CliError {
    let flag = match e.get(ContextKind::InvalidArg) {
        Some(ContextValue::String(s)) => Some(s.clone()),
        Some(ContextValue::Strings(v)) => v.first().cloned(),
        _ => None,
    };
    let rendered = e.render().to_string();
    let message = rendered
        .lines()
        .next()
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ")
        .to_string();
    let message = match &flag {
        Some(f) if !message.contains(f.as_str()) => format!("{message} ({f})"),
        _ => message,
    };
    CliError::Usage { message, flag }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = clap_usage_error(&e);
            eprintln!("{}", err.record(None));
            return err.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(err) => {
            eprintln!("{}", err.record(Some(cli.command.name())));
            err.exit_code()
        }
    }
}
