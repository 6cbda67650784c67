//! Siamese objectives. Every `z` argument is a stop-gradient target: the
//! gradient helpers only ever return derivatives with respect to `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Symmetric negative cosine similarity only.
    Regular,
    /// Similarity plus a `beta`-weighted symmetric cross-entropy term.
    Compound,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Self::Regular),
            "compound" => Ok(Self::Compound),
            other => Err(Error::validation(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Cross-entropy weight; ignored by the regular variant.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Compound,
            beta: 2.0 / 3.0,
        }
    }
}

impl LossConfig {
    pub fn regular() -> Self {
        Self {
            variant: LossVariant::Regular,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::validation(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Weight actually applied to the cross-entropy term.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            LossVariant::Regular => 0.0,
            LossVariant::Compound => self.beta,
        }
    }
}

fn check_pair(p: &[f64], z: &[f64]) -> Result<()> {
    if p.len() != z.len() || p.is_empty() {
        return Err(Error::validation(format!(
            "vectors must be non-empty and equal length ({} vs {})",
            p.len(),
            z.len()
        )));
    }
    if p.iter().chain(z).any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite vector component".into()));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `-(p / |p|) . (z / |z|)` and its gradient with respect to `p`.
pub fn negative_cosine_similarity_grad(p: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(p, z)?;
    let (np, nz) = (norm(p), norm(z));
    if np == 0.0 || nz == 0.0 {
        return Err(Error::NumericDomain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let cos: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (np * nz);
    let grad = p
        .iter()
        .zip(z)
        .map(|(pi, zi)| -(zi / nz - cos * pi / np) / np)
        .collect();
    Ok((-cos.clamp(-1.0, 1.0), grad))
}

pub fn negative_cosine_similarity(p: &[f64], z: &[f64]) -> Result<f64> {
    negative_cosine_similarity_grad(p, z).map(|(v, _)| v)
}

/// `D(p1, sg(z2)) + D(p2, sg(z1))`.
pub fn symmetric_similarity_loss(p1: &[f64], z1: &[f64], p2: &[f64], z2: &[f64]) -> Result<f64> {
    Ok(negative_cosine_similarity(p1, z2)? + negative_cosine_similarity(p2, z1)?)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// `-sum softmax(p) * log softmax(z)` and its gradient with respect to `p`.
///
/// Both arguments are mapped onto the probability simplex first so the
/// logarithm is always defined.
pub fn cross_entropy_grad(p: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(p, z)?;
    let q = softmax(p);
    let l = log_softmax(z);
    let h: f64 = -q.iter().zip(&l).map(|(a, b)| a * b).sum::<f64>();
    let mean_l: f64 = q.iter().zip(&l).map(|(a, b)| a * b).sum();
    let grad = q.iter().zip(&l).map(|(qj, lj)| -qj * (lj - mean_l)).collect();
    Ok((h.max(0.0), grad))
}

pub fn cross_entropy_term(p: &[f64], z: &[f64]) -> Result<f64> {
    cross_entropy_grad(p, z).map(|(v, _)| v)
}

/// `L1 + beta * (H(p1, sg(z2)) + H(p2, sg(z1)))`; requires the compound variant.
pub fn compound_loss(
    p1: &[f64],
    z1: &[f64],
    p2: &[f64],
    z2: &[f64],
    cfg: &LossConfig,
) -> Result<f64> {
    if cfg.variant != LossVariant::Compound {
        return Err(Error::validation("compound_loss called with the regular variant"));
    }
    cfg.validate()?;
    Ok(pair_loss(p1, z1, p2, z2, cfg)?.total)
}

/// Loss of one view pair with gradients for both prediction vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub total: f64,
    pub similarity: f64,
    pub cross_entropy: f64,
    pub grad_p1: Vec<f64>,
    pub grad_p2: Vec<f64>,
}

pub fn pair_loss(p1: &[f64], z1: &[f64], p2: &[f64], z2: &[f64], cfg: &LossConfig) -> Result<PairLoss> {
    let (d1, mut g1) = negative_cosine_similarity_grad(p1, z2)?;
    let (d2, mut g2) = negative_cosine_similarity_grad(p2, z1)?;
    let beta = cfg.effective_beta();
    let mut ce = 0.0;
    if beta > 0.0 {
        let (h1, hg1) = cross_entropy_grad(p1, z2)?;
        let (h2, hg2) = cross_entropy_grad(p2, z1)?;
        ce = h1 + h2;
        g1.iter_mut().zip(hg1).for_each(|(g, h)| *g += beta * h);
        g2.iter_mut().zip(hg2).for_each(|(g, h)| *g += beta * h);
    }
    Ok(PairLoss {
        total: d1 + d2 + beta * ce,
        similarity: d1 + d2,
        cross_entropy: ce,
        grad_p1: g1,
        grad_p2: g2,
    })
}
