//! Segmentation, IoU, modality and content-alignment losses.
//!
//! Every function takes tensors with a leading batch dimension and returns a
//! scalar tensor, so the same code serves training (autodiff) and the f64
//! oracle tests.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp applied before BCE and Dice.
pub const PROB_EPS: f64 = 1e-7;
/// Dice smoothing, added to numerator and denominator so that an empty
/// prediction of an empty target scores zero loss after clamping.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Allowed deviation of contrastive rows from unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.01,
            lambda4: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {n} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// `[loss]` config section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Multiplier on the contrastive cosine similarities.
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            logit_scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn clamp_probs(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Per-pixel mean binary cross-entropy over all elements.
pub fn bce_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(probs, target, "bce_loss")?;
    let p = clamp_probs(probs)?;
    let t = target.to_dtype(p.dtype())?;
    let one_minus_t = t.affine(-1.0, 1.0)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let ll = ((&t * p.log()?)? + (one_minus_t * one_minus_p.log()?)?)?;
    Ok(ll.mean_all()?.neg()?)
}

/// Soft Dice loss `1 - (2 sum(p t) + s) / (sum(p^2) + sum(t^2) + s)`,
/// computed per sample (leading dimension) and averaged.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(probs, target, "dice_loss")?;
    let b = probs.dim(0)?;
    let p = clamp_probs(probs)?.reshape((b, ()))?;
    let t = target.to_dtype(p.dtype())?.reshape((b, ()))?;
    let inter = (&p * &t)?.sum(1)?;
    let denom = ((p.sqr()?.sum(1)? + t.sqr()?.sum(1)?)? + DICE_SMOOTH)?;
    let ratio = (((inter * 2.0)? + DICE_SMOOTH)? / denom)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean squared error between predicted and true IoU scores.
pub fn iou_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "iou_loss")?;
    if pred.elem_count() == 0 {
        return Err(Error::InvalidInput("iou_loss needs at least one prediction".into()));
    }
    Ok((pred - target.to_dtype(pred.dtype())?)?.sqr()?.mean_all()?)
}

fn one_hot(labels: &[u32], classes: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::InvalidInput(format!("label {l} out of range for {classes} classes")));
        }
        v[i * classes + l as usize] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), like.device())?.to_dtype(like.dtype())?)
}

/// Cross-entropy of `logits: B x C` against class indices, batch mean.
pub fn modality_cls_loss(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    let y = one_hot(labels, c, logits)?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((y * logp)?.sum(1)?.mean_all()?.neg()?)
}

fn diagonal_ce(sim: &Tensor) -> Result<Tensor> {
    let b = sim.dim(0)?;
    let labels: Vec<u32> = (0..b as u32).collect();
    modality_cls_loss(sim, &labels)
}

/// Symmetric CLIP-style loss between row-normalised `B x C` embeddings.
pub fn contrastive_loss(f_dc: &Tensor, f_sc: &Tensor, logit_scale: f64) -> Result<Tensor> {
    same_shape(f_dc, f_sc, "contrastive_loss")?;
    let (b, _) = f_dc.dims2()?;
    if b == 0 {
        return Err(Error::InvalidInput("contrastive_loss needs a non-empty batch".into()));
    }
    for (name, f) in [("F_dc", f_dc), ("F_sc", f_sc)] {
        let norms = f.sqr()?.sum(1)?.sqrt()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(n) = norms.iter().find(|n| (*n - 1.0).abs() > UNIT_NORM_TOL) {
            return Err(Error::InvalidInput(format!("{name} row norm {n} is not 1")));
        }
    }
    let sim1 = (f_dc.matmul(&f_sc.t()?)? * logit_scale)?;
    let sim2 = sim1.t()?;
    Ok(((diagonal_ce(&sim1)? + diagonal_ce(&sim2)?)? * 0.5)?)
}

/// Row-wise L2 normalisation.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(n + 1e-12)?)?)
}

/// IoU between `logits > 0` and the binary target, per sample. Used as the
/// regression target of the IoU head; carries no gradient.
pub fn iou_targets(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "iou_targets")?;
    let b = logits.dim(0)?;
    let l = logits.detach().to_dtype(DType::F32)?.reshape((b, ()))?.to_vec2::<f32>()?;
    let t = target.to_dtype(DType::F32)?.reshape((b, ()))?.to_vec2::<f32>()?;
    let ious: Vec<f64> = l
        .iter()
        .zip(&t)
        .map(|(l, t)| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in l.iter().zip(t) {
                let (a, b) = (a > 0.0, b > 0.5);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    Ok(Tensor::from_vec(ious, b, logits.device())?.to_dtype(logits.dtype())?)
}

/// Loss components for one batch; optional terms are absent when their
/// branch is disabled.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub bce: Tensor,
    pub dice: Tensor,
    pub iou: Tensor,
    pub mcls: Option<Tensor>,
    pub contrastive: Option<Tensor>,
}

/// Scalar values of each term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub iou: f64,
    pub mcls: Option<f64>,
    pub contrastive: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Column names for logging, in a fixed order.
    pub const COLUMNS: [&'static str; 6] = ["bce", "dice", "iou", "mcls", "contrastive", "total"];

    /// Present terms as (name, value), total last.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("bce", self.bce), ("dice", self.dice), ("iou", self.iou)];
        if let Some(m) = self.mcls {
            v.push(("mcls", m));
        }
        if let Some(c) = self.contrastive {
            v.push(("contrastive", c));
        }
        v.push(("total", self.total));
        v
    }

    /// Weighted sum of the present terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda1 * (self.bce + self.dice)
            + w.lambda2 * self.iou
            + w.lambda3 * self.mcls.unwrap_or(0.0)
            + w.lambda4 * self.contrastive.unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `l1 (bce + dice) + l2 iou + l3 mcls + l4 contrastive`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let mut total = ((&terms.bce + &terms.dice)? * w.lambda1)?;
    total = (total + (&terms.iou * w.lambda2)?)?;
    if let Some(m) = &terms.mcls {
        total = (total + (m * w.lambda3)?)?;
    }
    if let Some(c) = &terms.contrastive {
        total = (total + (c * w.lambda4)?)?;
    }
    let breakdown = LossBreakdown {
        bce: scalar(&terms.bce)?,
        dice: scalar(&terms.dice)?,
        iou: scalar(&terms.iou)?,
        mcls: terms.mcls.as_ref().map(scalar).transpose()?,
        contrastive: terms.contrastive.as_ref().map(scalar).transpose()?,
        total: scalar(&total)?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let gt = t(&[1.0, 0.0, 1.0, 0.0], &[1, 4]);
        assert!(s(bce_loss(&gt, &gt).unwrap()) <= 1e-6);
        let half = t(&[0.5; 4], &[1, 4]);
        assert!((s(bce_loss(&half, &gt).unwrap()) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_hand_values() {
        let m = t(&[1.0, 0.0, 0.0, 0.0], &[1, 4]);
        let p = t(&[1.0, 1.0, 0.0, 0.0], &[1, 4]);
        // Clamping moves the zeros to 1e-7, far inside the tolerance.
        assert!((s(dice_loss(&p, &m).unwrap()) - 1.0 / 3.0).abs() < 1e-6);
        assert!(s(dice_loss(&m, &m).unwrap()).abs() < 1e-6);
        let z = t(&[0.0; 4], &[1, 4]);
        assert!(s(dice_loss(&z, &z).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn iou_hand_values() {
        let v = s(iou_loss(&t(&[0.5, 0.0], &[2]), &t(&[1.0, 0.0], &[2])).unwrap());
        assert!((v - 0.125).abs() < 1e-12);
        let v = s(iou_loss(&t(&[0.2], &[1]), &t(&[0.6], &[1])).unwrap());
        assert!((v - 0.16).abs() < 1e-12);
        assert!(iou_loss(&t(&[], &[0]), &t(&[], &[0])).is_err());
    }

    #[test]
    fn cls_uniform_is_ln_c() {
        let v = s(modality_cls_loss(&t(&[0.0; 11], &[1, 11]), &[4]).unwrap());
        assert!((v - 11f64.ln()).abs() < 1e-12);
        assert!(modality_cls_loss(&t(&[0.0; 11], &[1, 11]), &[11]).is_err());
    }

    #[test]
    fn contrastive_hand_values() {
        let one = t(&[0.6, 0.8], &[1, 2]);
        assert!(s(contrastive_loss(&one, &one, 1.0).unwrap()).abs() < 1e-12);
        let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let v = s(contrastive_loss(&id, &id, 1.0).unwrap());
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        let bad = t(&[2.0, 0.0], &[1, 2]);
        assert!(contrastive_loss(&bad, &bad, 1.0).is_err());
    }

    #[test]
    fn total_with_unit_components() {
        // Unit mask loss split evenly between its two parts.
        let one = t(&[1.0], &[]);
        let half = t(&[0.5], &[]);
        let terms = LossTerms {
            bce: half.clone(),
            dice: half,
            iou: one.clone(),
            mcls: Some(one.clone()),
            contrastive: Some(one),
        };
        let (tot, b) = total_loss(&terms, &LossWeights::default()).unwrap();
        assert!((s(tot) - 2.02).abs() < 1e-12);
        assert!((b.weighted_sum(&LossWeights::default()) - b.total).abs() < 1e-9);
        let neg = LossWeights {
            lambda3: -1.0,
            ..Default::default()
        };
        assert!(total_loss(&terms, &neg).is_err());
    }

    #[test]
    fn iou_target_counts() {
        let logits = t(&[1.0, 1.0, -1.0, -1.0], &[1, 4]);
        let gt = t(&[1.0, 0.0, 0.0, 0.0], &[1, 4]);
        let v = iou_targets(&logits, &gt).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![0.5]);
    }
}
