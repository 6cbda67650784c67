use super::classifier::{label_of, Classifier, Prediction, Probs};
use crate::data::{Label, ThermalImage};
use crate::error::{Error, Result};

/// Grid resolution for the ensemble weight.
pub const WEIGHT_STEPS: usize = 100;

pub fn ensemble_probs(p1: &Probs, p2: &Probs, w: f64) -> Probs {
    [w * p1[0] + (1.0 - w) * p2[0], w * p1[1] + (1.0 - w) * p2[1]]
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub first: Classifier,
    pub second: Classifier,
    /// Weight of `first`, in `[0, 1]`.
    pub weight: f64,
}

impl EnsembleModel {
    pub fn new(first: Classifier, second: Classifier, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::validation(format!("ensemble weight must lie in [0, 1], got {weight}")));
        }
        Ok(Self { first, second, weight })
    }

    pub fn predict(&mut self, img: &ThermalImage) -> Result<(Label, Probs)> {
        let (_, p1) = self.first.classify(img)?;
        let (_, p2) = self.second.classify(img)?;
        let p = ensemble_probs(&p1, &p2, self.weight);
        Ok((label_of(&p), p))
    }

    pub fn predict_images(&mut self, images: &[ThermalImage], batch_size: usize) -> Result<Vec<Prediction>> {
        let a = self.first.predict_images(images, batch_size)?;
        let b = self.second.predict_images(images, batch_size)?;
        Ok(combine(&a, &b, self.weight))
    }
}

/// Weighted combination of two prediction lists over the same images.
pub fn combine(a: &[Prediction], b: &[Prediction], w: f64) -> Vec<Prediction> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let probs = ensemble_probs(&x.probs, &y.probs, w);
            Prediction {
                id: x.id.clone(),
                label: label_of(&probs),
                probs,
            }
        })
        .collect()
}

/// Accuracy-maximising weight on the grid `{0, 0.01, ..., 1}`. Among tied
/// maximisers the one nearest 0.5 wins, then the smaller one.
pub fn grid_search_weight_from_probs(p1: &[Probs], p2: &[Probs], labels: &[Label]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("empty validation set"));
    }
    if p1.len() != labels.len() || p2.len() != labels.len() {
        return Err(Error::validation("prediction and label counts differ"));
    }
    let half = WEIGHT_STEPS / 2;
    let mut best: Option<(usize, usize)> = None;
    for step in 0..=WEIGHT_STEPS {
        let w = step as f64 / WEIGHT_STEPS as f64;
        let correct = (0..labels.len())
            .filter(|&i| label_of(&ensemble_probs(&p1[i], &p2[i], w)) == labels[i])
            .count();
        let better = match best {
            None => true,
            Some((s, c)) => correct > c || (correct == c && step.abs_diff(half) < s.abs_diff(half)),
        };
        if better {
            best = Some((step, correct));
        }
    }
    Ok(best.expect("grid is non-empty").0 as f64 / WEIGHT_STEPS as f64)
}

pub fn grid_search_weight(c1: &mut Classifier, c2: &mut Classifier, validation: &[ThermalImage]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::validation("empty validation set"));
    }
    let labels: Vec<Label> = validation
        .iter()
        .map(|i| i.label.ok_or_else(|| Error::validation(format!("image {} has no label", i.id))))
        .collect::<Result<_>>()?;
    let p1: Vec<Probs> = c1.predict_images(validation, 32)?.into_iter().map(|p| p.probs).collect();
    let p2: Vec<Probs> = c2.predict_images(validation, 32)?.into_iter().map(|p| p.probs).collect();
    grid_search_weight_from_probs(&p1, &p2, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::softmax2;
    use proptest::prelude::*;

    #[test]
    fn ensemble_examples() {
        let p = ensemble_probs(&[0.8, 0.2], &[0.2, 0.8], 0.5);
        assert_eq!(p, [0.5, 0.5]);
        assert_eq!(label_of(&p), Label::Normal);
        let p = ensemble_probs(&[0.6, 0.4], &[0.1, 0.9], 0.7);
        assert!((p[0] - 0.45).abs() < 1e-12 && (p[1] - 0.55).abs() < 1e-12);
        assert_eq!(label_of(&p), Label::Anomalous);
        assert_eq!(ensemble_probs(&[0.3, 0.7], &[0.9, 0.1], 1.0), [0.3, 0.7]);
    }

    fn exhaustive(p1: &[Probs], p2: &[Probs], labels: &[Label]) -> Vec<(usize, usize)> {
        (0..=100)
            .map(|s| {
                let w = s as f64 / 100.0;
                let c = (0..labels.len())
                    .filter(|&i| label_of(&ensemble_probs(&p1[i], &p2[i], w)) == labels[i])
                    .count();
                (s, c)
            })
            .collect()
    }

    #[test]
    fn only_a_narrow_band_classifies_everything() {
        // Member 1 always says anomalous; member 2's normal probability puts
        // each sample's decision boundary just outside [0.3, 0.4].
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        let mut labels = Vec::new();
        for k in 0..5 {
            // Anomalous is predicted iff w > a.
            let a = 0.295 - 0.001 * k as f64;
            p1.push([0.0, 1.0]);
            p2.push([0.5 / (1.0 - a), 1.0 - 0.5 / (1.0 - a)]);
            labels.push(Label::Anomalous);
            // Normal is predicted iff w <= b.
            let b = 0.405 + 0.001 * k as f64;
            p1.push([0.0, 1.0]);
            p2.push([0.5 / (1.0 - b), 1.0 - 0.5 / (1.0 - b)]);
            labels.push(Label::Normal);
        }
        let table = exhaustive(&p1, &p2, &labels);
        let perfect: Vec<usize> = table.iter().filter(|(_, c)| *c == 10).map(|(s, _)| *s).collect();
        assert_eq!(perfect, (30..=40).collect::<Vec<_>>());
        assert_eq!(grid_search_weight_from_probs(&p1, &p2, &labels).unwrap(), 0.4);
    }

    #[test]
    fn identical_members_tie_at_half() {
        let p = vec![[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]];
        let labels = vec![Label::Normal, Label::Anomalous, Label::Anomalous];
        assert_eq!(grid_search_weight_from_probs(&p, &p, &labels).unwrap(), 0.5);
    }

    #[test]
    fn dominant_member_wins() {
        let labels = vec![Label::Normal, Label::Anomalous, Label::Normal, Label::Anomalous];
        let perfect = vec![[0.9, 0.1], [0.1, 0.9], [0.8, 0.2], [0.3, 0.7]];
        let wrong = vec![[0.1, 0.9], [0.9, 0.1], [0.2, 0.8], [0.7, 0.3]];
        let w = grid_search_weight_from_probs(&perfect, &wrong, &labels).unwrap();
        let table = exhaustive(&perfect, &wrong, &labels);
        let best = table.iter().map(|t| t.1).max().unwrap();
        let maximisers: Vec<f64> = table.iter().filter(|t| t.1 == best).map(|t| t.0 as f64 / 100.0).collect();
        let nearest = maximisers
            .iter()
            .copied()
            .min_by(|a, b| (a - 0.5).abs().partial_cmp(&(b - 0.5).abs()).unwrap())
            .unwrap();
        assert_eq!(w, nearest);
        assert!(w > 0.5);
        assert!(grid_search_weight_from_probs(&[], &[], &[]).is_err());
    }

    fn probs() -> impl Strategy<Value = Probs> {
        (0.0f64..=1.0).prop_map(|a| [1.0 - a, a])
    }

    proptest! {
        #[test]
        fn closure_and_convexity(p1 in probs(), p2 in probs(), w in 0.0f64..=1.0) {
            let p = ensemble_probs(&p1, &p2, w);
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            for k in 0..2 {
                prop_assert!(p[k] >= p1[k].min(p2[k]) - 1e-12 && p[k] <= p1[k].max(p2[k]) + 1e-12);
            }
        }

        #[test]
        fn logit_scaling_keeps_endpoint_labels(l1 in prop::array::uniform2(-5.0f64..5.0), l2 in prop::array::uniform2(-5.0f64..5.0), s in 0.1f64..10.0) {
            for w in [0.0, 1.0] {
                let a = label_of(&ensemble_probs(&softmax2(l1), &softmax2(l2), w));
                let b = label_of(&ensemble_probs(&softmax2([l1[0] * s, l1[1] * s]), &softmax2([l2[0] * s, l2[1] * s]), w));
                prop_assert_eq!(a, b);
            }
        }
    }
}
