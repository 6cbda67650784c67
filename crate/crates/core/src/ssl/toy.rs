//! A linear siamese pair small enough to check against finite differences.

use ndarray::{Array1, Array2};

use super::loss::{pair_loss, LossConfig};
use crate::error::Result;

/// `z = W x`, `p = Q z`, with one shared `W` for both views.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSiamese {
    pub encoder: Array2<f64>,
    pub predictor: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseGradients {
    pub loss: f64,
    /// Gradient reaching `W` through the prediction branch.
    pub encoder: Array2<f64>,
    pub predictor: Array2<f64>,
    /// Gradient reaching `W` through the stop-gradient target branch.
    pub target_branch: Array2<f64>,
}

impl LinearSiamese {
    /// Loss with separate encoder weights for the prediction and target
    /// branches; the trained model uses the same matrix for both.
    pub fn split_loss(
        &self,
        online: &Array2<f64>,
        target: &Array2<f64>,
        x1: &Array1<f64>,
        x2: &Array1<f64>,
        cfg: &LossConfig,
    ) -> Result<f64> {
        let p1 = self.predictor.dot(&online.dot(x1));
        let p2 = self.predictor.dot(&online.dot(x2));
        let z1 = target.dot(x1);
        let z2 = target.dot(x2);
        Ok(pair_loss(p1.as_slice().unwrap(), z1.as_slice().unwrap(), p2.as_slice().unwrap(), z2.as_slice().unwrap(), cfg)?.total)
    }

    pub fn loss(&self, x1: &Array1<f64>, x2: &Array1<f64>, cfg: &LossConfig) -> Result<f64> {
        self.split_loss(&self.encoder, &self.encoder, x1, x2, cfg)
    }

    pub fn gradients(&self, x1: &Array1<f64>, x2: &Array1<f64>, cfg: &LossConfig) -> Result<SiameseGradients> {
        let z1 = self.encoder.dot(x1);
        let z2 = self.encoder.dot(x2);
        let p1 = self.predictor.dot(&z1);
        let p2 = self.predictor.dot(&z2);
        let pl = pair_loss(p1.as_slice().unwrap(), z1.as_slice().unwrap(), p2.as_slice().unwrap(), z2.as_slice().unwrap(), cfg)?;
        let g1 = Array1::from(pl.grad_p1);
        let g2 = Array1::from(pl.grad_p2);
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(ndarray::Axis(1)).dot(&b.view().insert_axis(ndarray::Axis(0)))
        };
        let predictor = outer(&g1, &z1) + outer(&g2, &z2);
        let qt = self.predictor.t();
        let encoder = outer(&qt.dot(&g1), x1) + outer(&qt.dot(&g2), x2);
        Ok(SiameseGradients {
            loss: pl.total,
            encoder,
            predictor,
            target_branch: Array2::zeros(self.encoder.raw_dim()),
        })
    }
}
