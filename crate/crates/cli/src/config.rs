//! Run configuration: JSON file, then `--set` and flag overrides, then schema check.

use std::path::{Path, PathBuf};

use hotspot_core::baselines::{BBox, Hsv};
use hotspot_core::data::{SyntheticConfig, MANIFEST_FILE};
use hotspot_core::detect::FinetuneConfig;
use hotspot_core::isolate::IsolateConfig;
use hotspot_core::ssl::{EncoderSpec, LossConfig, PredictorSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Environment variable that relocates the artifact root.
pub const OUT_ROOT_ENV: &str = "HOTSPOT_OUT_ROOT";

/// Module seeds that follow the top-level `seed` unless set explicitly.
const SEEDED_KEYS: [&str; 5] = [
    "synthetic.seed",
    "train.seed",
    "train.augment.seed",
    "finetune.seed",
    "baseline.seed",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.csv`, `images/` and optionally `masks/`.
    pub root: Option<PathBuf>,
    /// Manifest path; defaults to `<root>/manifest.csv`.
    pub manifest: Option<PathBuf>,
}

impl DataConfig {
    pub fn resolve(&self) -> Result<(PathBuf, PathBuf), CliError> {
        match (&self.root, &self.manifest) {
            (Some(root), Some(m)) => Ok((root.clone(), m.clone())),
            (Some(root), None) => Ok((root.clone(), root.join(MANIFEST_FILE))),
            (None, Some(m)) => Ok((m.parent().unwrap_or(Path::new(".")).to_path_buf(), m.clone())),
            (None, None) => Err(CliError::usage("no dataset given; pass --data <dir> or set data.root")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Fixed weight of the first model; grid-searched when absent.
    pub weight: Option<f64>,
    pub batch_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            weight: None,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub kmeans_k: usize,
    /// Crop for `kmeans_pv`; the full image when absent.
    pub bbox: Option<BBox>,
    pub hsv_lower: Option<Hsv>,
    pub hsv_upper: Option<Hsv>,
    pub otsu_thresholds: usize,
    pub opening_radius: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kmeans_k: 2,
            bbox: None,
            hsv_lower: None,
            hsv_upper: None,
            otsu_thresholds: 4,
            opening_radius: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact root; overridden by `HOTSPOT_OUT_ROOT`.
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderSpec,
    pub predictor: PredictorSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub finetune: FinetuneConfig,
    pub ensemble: EnsembleConfig,
    pub isolate: IsolateConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("out"),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            encoder: EncoderSpec::default(),
            predictor: PredictorSpec::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            finetune: FinetuneConfig::default(),
            ensemble: EnsembleConfig::default(),
            isolate: IsolateConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: hotspot_core::Result<()>| r.map_err(|e| CliError::usage(format!("invalid config: {e}")));
        check(self.synthetic.validate())?;
        check(self.encoder.validate())?;
        check(self.train.validate())?;
        check(self.loss.validate())?;
        if self.predictor.input_dim != self.encoder.projection_dim {
            return Err(CliError::usage(format!(
                "invalid config: predictor.input_dim ({}) must equal encoder.projection_dim ({})",
                self.predictor.input_dim, self.encoder.projection_dim
            )));
        }
        if let Some(w) = self.ensemble.weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(CliError::usage("invalid config: ensemble.weight must lie in [0, 1]"));
            }
        }
        if self.ensemble.batch_size == 0 {
            return Err(CliError::usage("invalid config: ensemble.batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.isolate.threshold) {
            return Err(CliError::usage("invalid config: isolate.threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Parses `key.path=value`; the value is read as JSON, falling back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {s:?} is not of the form key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("override {s:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn lookup<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |v, seg| v.get(seg))
}

pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let segs: Vec<&str> = key.split('.').collect();
    for seg in &segs[..segs.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::usage(format!("config key {key:?} descends into a non-object")))?;
        cur = obj.entry(seg.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .ok_or_else(|| CliError::usage(format!("config key {key:?} descends into a non-object")))?
        .insert(segs[segs.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively replaces entries of `base` with those of `top`, keeping unset defaults.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds the run configuration from an optional file and ordered overrides.
pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut doc = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(CliError::usage("config file must hold a JSON object"));
    }
    for (k, v) in overrides {
        set_path(&mut doc, k, v.clone())?;
    }
    if let Some(seed) = doc.get("seed").cloned() {
        for key in SEEDED_KEYS {
            if lookup(&doc, key).is_none() {
                set_path(&mut doc, key, seed.clone())?;
            }
        }
    }
    if lookup(&doc, "predictor.input_dim").is_none() {
        if let Some(dim) = lookup(&doc, "encoder.projection_dim").cloned() {
            set_path(&mut doc, "predictor.input_dim", dim)?;
        }
    }
    let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
    overlay(&mut merged, doc);
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[&str]) -> Vec<(String, Value)> {
        pairs.iter().map(|s| parse_assignment(s).unwrap()).collect()
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = load(None, &ov(&["train.lr=0.5", "train.lr=0.25", "loss.variant=regular"])).unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.loss.variant, hotspot_core::ssl::LossVariant::Regular);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["bogus=1", "train.bogus=1", "encoder.xception.depth=3"] {
            let err = load(None, &ov(&[bad])).unwrap_err();
            assert!(err.is_usage(), "{bad}");
        }
    }

    #[test]
    fn top_level_seed_feeds_unset_module_seeds() {
        let cfg = load(None, &ov(&["seed=9", "finetune.seed=3"])).unwrap();
        assert_eq!((cfg.synthetic.seed, cfg.train.seed, cfg.finetune.seed, cfg.baseline.seed), (9, 9, 3, 9));
    }

    #[test]
    fn predictor_follows_projection_width() {
        let cfg = load(None, &ov(&["encoder.projection_dim=64"])).unwrap();
        assert_eq!(cfg.predictor.input_dim, 64);
        assert!(load(None, &ov(&["encoder.projection_dim=64", "predictor.input_dim=32"])).is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"epochs": 7, "lr": 0.1}}"#).unwrap();
        let cfg = load(Some(&p), &ov(&["train.lr=0.2"])).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.lr), (7, 0.2));
        std::fs::write(&p, "[1]").unwrap();
        assert!(load(Some(&p), &[]).unwrap_err().is_usage());
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(parse_assignment("a.b=3").unwrap(), ("a.b".into(), Value::from(3)));
        assert_eq!(parse_assignment("a=tiny").unwrap().1, Value::from("tiny"));
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("a..b=1").is_err());
    }
}
