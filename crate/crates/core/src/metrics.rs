//! Confusion-matrix metrics, ROC/AUC, Dice summaries and ablation tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::detect::{label_of, Prediction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[Label], predicted: &[Label]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::validation("no predictions to evaluate"));
        }
        if truth.len() != predicted.len() {
            return Err(Error::validation("truth and prediction counts differ"));
        }
        let mut c = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (Label::Anomalous, Label::Anomalous) => c.tp += 1,
                (Label::Normal, Label::Normal) => c.tn += 1,
                (Label::Normal, Label::Anomalous) => c.fp += 1,
                (Label::Anomalous, Label::Normal) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f_score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default)]
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den
    }
}

pub fn report_from_counts(c: ConfusionCounts) -> MetricsReport {
    let mut undefined = Vec::new();
    let accuracy = ratio(c.tp + c.tn, c.total() as f64, "accuracy", &mut undefined);
    let precision = ratio(c.tp, (c.tp + c.fp) as f64, "precision", &mut undefined);
    let sensitivity = ratio(c.tp, (c.tp + c.fn_) as f64, "sensitivity", &mut undefined);
    let specificity = ratio(c.tn, (c.tn + c.fp) as f64, "specificity", &mut undefined);
    let f_score = ratio(c.tp, c.tp as f64 + (c.fp + c.fn_) as f64 / 2.0, "f_score", &mut undefined);
    MetricsReport {
        accuracy,
        precision,
        sensitivity,
        specificity,
        f_score,
        auc: None,
        counts: c,
        undefined,
    }
}

pub fn confusion_metrics(truth: &[Label], predicted: &[Label]) -> Result<MetricsReport> {
    Ok(report_from_counts(ConfusionCounts::from_labels(truth, predicted)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Samples with `score >= threshold` are called anomalous.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC over every distinct score plus both infinite endpoints, and the
/// trapezoidal area under it.
pub fn auc_roc(scores: &[f64], truth: &[Label]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != truth.len() {
        return Err(Error::validation("score and label counts differ"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericDomain("non-finite score".into()));
    }
    let pos = truth.iter().filter(|&&l| l == Label::Anomalous).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("ROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area, in units of one (negative, positive) cell.
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            match truth[order[i]] {
                Label::Anomalous => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        twice_area += ((fp - fp0) * (tp + tp0)) as u128;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok((twice_area as f64 / (2 * pos * neg) as f64, points))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl std::fmt::Display for DiceSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.2}", self.mean, self.std)
    }
}

pub fn dice_summary(values: &[f64]) -> Result<DiceSummary> {
    if values.is_empty() {
        return Err(Error::validation("no Dice values to summarise"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(DiceSummary {
        mean,
        std: var.sqrt(),
        count: values.len(),
    })
}

/// Predictions joined with ground truth by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub truth: Label,
    pub predicted: Label,
    /// Probability of the anomalous class.
    pub score: f64,
}

pub fn join_truth(preds: &[Prediction], truth: &[(String, Option<Label>)]) -> Result<Vec<Scored>> {
    let lookup: HashMap<&str, Option<Label>> = truth.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    preds
        .iter()
        .map(|p| {
            let label = lookup
                .get(p.id.as_str())
                .ok_or_else(|| Error::validation(format!("no ground truth for image {:?}", p.id)))?
                .ok_or_else(|| Error::validation(format!("image {:?} is unlabelled in the manifest", p.id)))?;
            Ok(Scored {
                id: p.id.clone(),
                truth: label,
                predicted: p.label,
                score: p.probs[1],
            })
        })
        .collect()
}

/// Confusion metrics plus AUC when both classes are present.
pub fn evaluate_scored(rows: &[Scored]) -> Result<(MetricsReport, Option<Vec<RocPoint>>)> {
    let truth: Vec<Label> = rows.iter().map(|r| r.truth).collect();
    let predicted: Vec<Label> = rows.iter().map(|r| r.predicted).collect();
    let mut report = confusion_metrics(&truth, &predicted)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let roc = match auc_roc(&scores, &truth) {
        Ok((auc, points)) => {
            report.auc = Some(auc);
            Some(points)
        }
        Err(Error::Validation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((report, roc))
}

pub const PREDICTIONS_HEADER: [&str; 4] = ["id", "label", "p0", "p1"];

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREDICTIONS_HEADER)?;
    for p in preds {
        w.write_record([
            p.id.clone(),
            p.label.index().to_string(),
            format!("{:.9}", p.probs[0]),
            format!("{:.9}", p.probs[1]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        label: u8,
        p0: f64,
        p1: f64,
    }
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "predictions file not found")));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row?;
        let label = Label::from_index(row.label as usize)
            .map_err(|_| Error::validation(format!("{} row {}: label must be 0 or 1", path.display(), i + 1)))?;
        let probs = [row.p0, row.p1];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.p0 + row.p1 - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "{} row {}: p0 and p1 must be probabilities summing to 1",
                path.display(),
                i + 1
            )));
        }
        out.push(Prediction { id: row.id, label, probs });
    }
    Ok(out)
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub predictions: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub report: MetricsReport,
}

pub fn ablation_report(runs: &[AblationRun], truth: &[(String, Option<Label>)]) -> Result<Vec<AblationRow>> {
    runs.iter()
        .map(|run| {
            let preds = read_predictions(&run.predictions).map_err(|e| {
                Error::validation(format!("ablation run {:?} ({}): {e}", run.name, run.predictions.display()))
            })?;
            let (report, _) = evaluate_scored(&join_truth(&preds, truth)?)?;
            Ok(AblationRow {
                name: run.name.clone(),
                report,
            })
        })
        .collect()
}

pub fn render_ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Method | Accuracy | Precision | Sensitivity | Specificity | F-score |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.name, m.accuracy, m.precision, m.sensitivity, m.specificity, m.f_score
        );
    }
    s
}

/// Re-derives predicted labels from stored probabilities (tie toward normal).
pub fn relabel(preds: &mut [Prediction]) {
    for p in preds {
        p.label = label_of(&p.probs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Anomalous as A, Normal as N};

    fn labels_for(c: ConfusionCounts) -> (Vec<Label>, Vec<Label>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (n, tl, pl) in [(c.tp, A, A), (c.tn, N, N), (c.fp, N, A), (c.fn_, A, N)] {
            for _ in 0..n {
                t.push(tl);
                p.push(pl);
            }
        }
        (t, p)
    }

    #[test]
    fn table_row_counts() {
        let (t, p) = labels_for(ConfusionCounts { tp: 47, tn: 50, fp: 0, fn_: 3 });
        let m = confusion_metrics(&t, &p).unwrap();
        assert!((m.accuracy - 0.97).abs() < 1e-12);
        assert_eq!(m.precision, 1.0);
        assert!((m.sensitivity - 0.94).abs() < 1e-12);
        assert_eq!(m.specificity, 1.0);
        assert!((m.f_score - 47.0 / 48.5).abs() < 1e-12);
        assert_eq!(format!("{:.2}", m.f_score), "0.97");
    }

    #[test]
    fn derived_counts() {
        let (t, p) = labels_for(ConfusionCounts { tp: 30, tn: 20, fp: 10, fn_: 40 });
        let m = confusion_metrics(&t, &p).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, 0.75);
        assert!((m.sensitivity - 30.0 / 70.0).abs() < 1e-12 && (m.sensitivity - 0.4286).abs() < 1e-4);
        assert!((m.specificity - 20.0 / 30.0).abs() < 1e-12);
        assert!((m.f_score - 0.5455).abs() < 1e-4);
        let (t, _) = labels_for(ConfusionCounts { tp: 3, tn: 4, fp: 0, fn_: 0 });
        let m = confusion_metrics(&t, &t).unwrap();
        assert_eq!([m.accuracy, m.precision, m.sensitivity, m.specificity, m.f_score], [1.0; 5]);
        assert!(confusion_metrics(&[], &[]).is_err());
    }

    #[test]
    fn zero_denominator_is_flagged() {
        let m = confusion_metrics(&[A, N, N], &[N, N, N]).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.contains(&"precision".to_string()));
    }

    #[test]
    fn auc_examples() {
        let (auc, pts) = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[N, N, A, A]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        assert_eq!((pts.last().unwrap().fpr, pts.last().unwrap().tpr), (1.0, 1.0));
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[N, N, A, A]).unwrap().0, 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[N, A, N, A, A, N]).unwrap().0, 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[A, A]), Err(Error::Validation(_))));
    }

    #[test]
    fn dice_summary_format() {
        let s = dice_summary(&[0.7]).unwrap();
        assert_eq!((s.mean, s.std), (0.7, 0.0));
        let s = dice_summary(&[0.6, 0.8]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12 && (s.std - 0.1).abs() < 1e-12);
        assert_eq!(s.to_string(), "0.7000±0.10");
        let reported = DiceSummary { mean: 0.7359, std: 0.1, count: 1 };
        assert_eq!(reported.to_string(), "0.7359±0.10");
    }

    fn preds(rows: &[(&str, Label, f64)]) -> Vec<Prediction> {
        rows.iter()
            .map(|(id, l, p1)| Prediction {
                id: id.to_string(),
                label: *l,
                probs: [1.0 - p1, *p1],
            })
            .collect()
    }

    #[test]
    fn predictions_round_trip_and_ablation() {
        let dir = tempfile::tempdir().unwrap();
        let a = preds(&[("x", A, 0.9), ("y", N, 0.2), ("z", A, 0.6)]);
        let b = preds(&[("x", N, 0.3), ("y", N, 0.1), ("z", A, 0.7)]);
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_predictions(&pa, &a).unwrap();
        write_predictions(&pb, &b).unwrap();
        let back = read_predictions(&pa).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].id, "x");
        assert!((back[2].probs[1] - 0.6).abs() < 1e-9);

        let truth = vec![("x".to_string(), Some(A)), ("y".to_string(), Some(N)), ("z".to_string(), Some(N))];
        let runs = vec![
            AblationRun { name: "full".into(), predictions: pb.clone() },
            AblationRun { name: "no-ce".into(), predictions: pa.clone() },
        ];
        let rows = ablation_report(&runs, &truth).unwrap();
        assert_eq!(rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["full", "no-ce"]);
        let t: Vec<Label> = truth.iter().map(|(_, l)| l.unwrap()).collect();
        let direct = confusion_metrics(&t, &[N, N, A]).unwrap();
        assert_eq!(rows[0].report.accuracy, direct.accuracy);
        assert_eq!(rows[0].report.f_score, direct.f_score);
        let md = render_ablation_markdown(&rows[..1]);
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| full |"));

        let missing = vec![AblationRun { name: "ghost".into(), predictions: dir.path().join("nope.csv") }];
        let err = ablation_report(&missing, &truth).unwrap_err().to_string();
        assert!(err.contains("ghost"));
    }

    fn label_vec() -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { A } else { N }), 2..40)
    }

    proptest! {
        #[test]
        fn auc_equals_mann_whitney(scores in prop::collection::vec(0u8..10, 2..40), seed in any::<u64>()) {
            let truth: Vec<Label> = scores.iter().enumerate().map(|(i, _)| if (seed >> (i % 64)) & 1 == 1 { A } else { N }).collect();
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 10.0).collect();
            let pos: Vec<f64> = s.iter().zip(&truth).filter(|(_, &l)| l == A).map(|(v, _)| *v).collect();
            let neg: Vec<f64> = s.iter().zip(&truth).filter(|(_, &l)| l == N).map(|(v, _)| *v).collect();
            prop_assume!(!pos.is_empty() && !neg.is_empty());
            let mut u = 0.0;
            for p in &pos {
                for n in &neg {
                    u += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
                }
            }
            let (auc, _) = auc_roc(&s, &truth).unwrap();
            prop_assert!((auc - u / (pos.len() * neg.len()) as f64).abs() < 1e-12);
        }

        #[test]
        fn identities_and_invariances(truth in label_vec(), flips in prop::collection::vec(any::<bool>(), 40)) {
            let predicted: Vec<Label> = truth.iter().zip(&flips).map(|(&t, &f)| if f { if t == A { N } else { A } } else { t }).collect();
            let m = confusion_metrics(&truth, &predicted).unwrap();
            let c = m.counts;
            prop_assert_eq!(c.total() as usize, truth.len());
            prop_assert_eq!(m.accuracy, (c.tp + c.tn) as f64 / truth.len() as f64);
            let mut rev_t = truth.clone();
            let mut rev_p = predicted.clone();
            rev_t.reverse();
            rev_p.reverse();
            prop_assert_eq!(confusion_metrics(&rev_t, &rev_p).unwrap(), m.clone());
            let neg = |v: &[Label]| v.iter().map(|&l| if l == A { N } else { A }).collect::<Vec<_>>();
            let dual = confusion_metrics(&neg(&truth), &neg(&predicted)).unwrap();
            prop_assert_eq!(m.specificity, dual.sensitivity);
        }
    }
}
