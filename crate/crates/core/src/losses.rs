//! Cross-entropy and the uncertainty-weighted cross-entropy, in f64.
//!
//! Both losses are means over voxels of `w(v) * -ln max(p_y(v), eps)`, with
//! `w = exp(-u)`. Plain cross-entropy is the same computation with `w = 1`,
//! so a zero uncertainty map reproduces it bit for bit.

use crate::data::{LabelSet, LabelSource, NUM_CLASSES};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-voxel class probabilities, class-major: `data[c * n + v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    classes: usize,
    voxels: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || !data.len().is_multiple_of(classes) {
            return Err(Error::Shape(format!(
                "{} values do not split into {classes} classes",
                data.len()
            )));
        }
        let voxels = data.len() / classes;
        Ok(ProbMap { classes, voxels, data })
    }

    /// Softmax over classes of class-major logits.
    pub fn from_logits(classes: usize, logits: &[f64]) -> Result<Self> {
        let mut p = ProbMap::new(classes, logits.to_vec())?;
        let n = p.voxels;
        for v in 0..n {
            let max = (0..classes).map(|c| logits[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (logits[c * n + v] - max).exp();
                p.data[c * n + v] = e;
                sum += e;
            }
            for c in 0..classes {
                p.data[c * n + v] /= sum;
            }
        }
        Ok(p)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    #[inline]
    pub fn get(&self, class: usize, voxel: usize) -> f64 {
        self.data[class * self.voxels + voxel]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-voxel class index, background 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMap(pub Vec<u8>);

impl TargetMap {
    /// Collapses a label set in which every organ is clinical or imputed.
    pub fn from_labels(labels: &LabelSet) -> Result<Self> {
        if labels.sources.contains(&LabelSource::None) {
            return Err(Error::validation("labels", "target needs every organ available or imputed"));
        }
        Ok(TargetMap(labels.to_class_map().into_raw_vec_and_offset().0))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn uncertainty_weight(u: f64) -> f64 {
    (-u).exp()
}

fn check(probs: &ProbMap, target: &TargetMap, u: Option<&[f64]>) -> Result<()> {
    if probs.voxels != target.len() {
        return Err(Error::Shape(format!(
            "{} probability voxels vs {} targets",
            probs.voxels,
            target.len()
        )));
    }
    if let Some(&bad) = target.0.iter().find(|&&y| y as usize >= probs.classes) {
        return Err(Error::Shape(format!("target class {bad} >= {}", probs.classes)));
    }
    if let Some(u) = u {
        if u.len() != probs.voxels {
            return Err(Error::Shape(format!(
                "{} uncertainty voxels vs {}",
                u.len(),
                probs.voxels
            )));
        }
        if u.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::validation("uncertainty", "values must be >= 0"));
        }
    }
    Ok(())
}

fn weighted_nll(probs: &ProbMap, target: &TargetMap, weight: impl Fn(usize) -> f64) -> f64 {
    let sum: f64 = target
        .0
        .iter()
        .enumerate()
        .map(|(v, &y)| weight(v) * -probs.get(y as usize, v).max(PROB_FLOOR).ln())
        .sum();
    sum / probs.voxels as f64
}

/// Mean of `-ln p_y` over voxels.
pub fn cross_entropy(probs: &ProbMap, target: &TargetMap) -> Result<f64> {
    check(probs, target, None)?;
    Ok(weighted_nll(probs, target, |_| 1.0))
}

/// Mean of `exp(-u) * -ln p_y` over voxels.
pub fn uce_loss(probs: &ProbMap, target: &TargetMap, u: &[f64]) -> Result<f64> {
    check(probs, target, Some(u))?;
    Ok(weighted_nll(probs, target, |v| uncertainty_weight(u[v])))
}

/// Gradient of [`uce_loss`] with respect to the class-major logits that
/// produced `probs`: `w / N * (p - onehot)`, zero where the floor is active.
pub fn uce_grad_logits(probs: &ProbMap, target: &TargetMap, u: &[f64]) -> Result<Vec<f64>> {
    check(probs, target, Some(u))?;
    let n = probs.voxels;
    let mut grad = vec![0.0; probs.data.len()];
    for (v, &y) in target.0.iter().enumerate() {
        let y = y as usize;
        if probs.get(y, v) < PROB_FLOOR {
            continue;
        }
        let scale = uncertainty_weight(u[v]) / n as f64;
        for c in 0..probs.classes {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad[c * n + v] = scale * (probs.get(c, v) - onehot);
        }
    }
    Ok(grad)
}

/// Loss and logit gradient in one pass; with `u = None` this is plain
/// cross-entropy.
pub fn loss_and_grad(probs: &ProbMap, target: &TargetMap, u: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    match u {
        Some(u) => Ok((uce_loss(probs, target, u)?, uce_grad_logits(probs, target, u)?)),
        None => {
            let zeros = vec![0.0; probs.voxels];
            Ok((cross_entropy(probs, target)?, uce_grad_logits(probs, target, &zeros)?))
        }
    }
}

/// Relative error used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the analytic logit gradient of
/// [`uce_loss`] and central differences with step `h`.
pub fn grad_check_uce(classes: usize, logits: &[f64], target: &TargetMap, u: &[f64], h: f64) -> Result<f64> {
    let probs = ProbMap::from_logits(classes, logits)?;
    let analytic = uce_grad_logits(&probs, target, u)?;
    let loss_at = |x: &[f64]| -> Result<f64> { uce_loss(&ProbMap::from_logits(classes, x)?, target, u) };
    let mut x = logits.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss_at(&x)?;
        x[i] = orig - h;
        let minus = loss_at(&x)?;
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`. Clamped to `[0, ln n]` so
/// rounding in the probabilities cannot leave the valid range.
pub fn voxel_entropy(probs: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut h) = (0usize, 0.0f64);
    for p in probs {
        n += 1;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h.clamp(0.0, (n.max(1) as f64).ln())
}

/// Entropy of each voxel's class distribution.
pub fn entropy(probs: &ProbMap) -> Vec<f64> {
    (0..probs.voxels)
        .map(|v| voxel_entropy((0..probs.classes).map(|c| probs.get(c, v))))
        .collect()
}

/// Upper bound of the entropy for the organ classes plus background.
pub fn max_entropy() -> f64 {
    (NUM_CLASSES as f64).ln()
}
