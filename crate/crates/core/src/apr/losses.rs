use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which terms of the total loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub pose: bool,
    pub image: bool,
    pub rvs: bool,
    pub posemap: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self {
            pose: true,
            image: true,
            rvs: true,
            posemap: true,
        }
    }

    /// Loss-setting grid of the ablation table: 1 drops the PoseMap term,
    /// 2 the image term, 3 the RVS term, 4 keeps everything; 5 and 6 are
    /// the unlabelled fine-tuning settings (image only, image + PoseMap).
    pub fn experiment(index: usize) -> Result<Self> {
        let all = Self::all();
        Ok(match index {
            1 => Self {
                posemap: false,
                ..all
            },
            2 => Self {
                image: false,
                ..all
            },
            3 => Self { rvs: false, ..all },
            4 => all,
            5 => Self {
                pose: false,
                image: true,
                rvs: false,
                posemap: false,
            },
            6 => Self {
                pose: false,
                image: true,
                rvs: false,
                posemap: true,
            },
            _ => return Err(Error::invalid(format!("no loss setting {index}"))),
        })
    }

    pub fn any(&self) -> bool {
        self.pose || self.image || self.rvs || self.posemap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pose: f64,
    pub image: f64,
    pub rvs: f64,
    pub posemap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pose: 1.0,
            image: 1.0,
            rvs: 1.0,
            posemap: 1.0,
        }
    }
}

/// Scalar loss components of one step; absent terms were not computed.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub pose: Option<Tensor>,
    pub image: Option<Tensor>,
    pub posemap: Option<Tensor>,
    pub rvs: Option<Tensor>,
}

/// Squared L2 distance between raw 12-vectors `[B, 12]`, averaged over the batch.
pub fn loss_pose(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Mean over pixels of the squared channel distance between two batches of
/// feature maps `[B, F, h, w]`; `[Ba, Bb]` matrix of all pairs.
pub fn feature_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, f, h, w) = a.dims4()?;
    let bb = b.dims()[0];
    let a = a.reshape((ba, 1, f * h * w))?;
    let b = b.reshape((1, bb, f * h * w))?;
    Ok((a.broadcast_sub(&b)?.sqr()?.sum(D::Minus1)? / (h * w) as f64)?)
}

/// Source of negatives for the triplet image loss.
pub enum Negatives<'a> {
    /// Positives of the other batch items; the hardest one is used.
    InBatch,
    /// `[B, K, F, h, w]` explicit negatives per anchor; the hardest one is used.
    Explicit(&'a Tensor),
}

/// Hinge triplet loss `max(0, d(a, p) − d(a, n) + margin)` averaged over
/// the batch, with `n` the hardest (closest) negative for each anchor.
pub fn loss_image(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: Negatives,
    margin: f64,
) -> Result<Tensor> {
    let b = anchor.dims()[0];
    let (d_pos, d_neg) = match negatives {
        Negatives::InBatch => {
            if b < 2 {
                return Err(Error::invalid(
                    "in-batch negatives need a batch of at least 2",
                ));
            }
            let d = feature_distances(anchor, positive)?;
            let eye = Tensor::eye(b, d.dtype(), d.device())?;
            let d_pos = (&d * &eye)?.sum(1)?;
            let masked = (&d + eye.affine(1e9, 0.0)?)?;
            (d_pos, masked.min(1)?)
        }
        Negatives::Explicit(neg) => {
            let (nb, k, f, h, w) = neg.dims5()?;
            if k == 0 || nb != b {
                return Err(Error::invalid("need at least one negative per anchor"));
            }
            let d_pos = pairwise_diag(anchor, positive)?;
            let a = anchor.reshape((b, 1, f * h * w))?;
            let n = neg.reshape((b, k, f * h * w))?;
            let d = (a.broadcast_sub(&n)?.sqr()?.sum(D::Minus1)? / (h * w) as f64)?;
            (d_pos, d.min(1)?)
        }
    };
    Ok((d_pos - d_neg)?.affine(1.0, margin)?.relu()?.mean_all()?)
}

fn pairwise_diag(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, f, h, w) = a.dims4()?;
    let diff = (a - b)?.reshape((n, f * h * w))?;
    Ok((diff.sqr()?.sum(D::Minus1)? / (h * w) as f64)?)
}

/// Negatives for a batch of one: the positive map rolled by a quarter and
/// a half of its height and width, `[B, 3, F, h, w]`.
pub fn rolled_negatives(positive: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = positive.dims4()?;
    let shifts = [(h / 4, w / 4), (h / 2, w / 2), (h / 2, 0)];
    let rolled = shifts
        .iter()
        .map(|&(dy, dx)| positive.roll(dy as i32, 2)?.roll(dx as i32, 3))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rolled, 1)?)
}

/// Mean over all pixels of `1 − cos` between PoseMaps `[B, h, w, C]`. The
/// cosine is `x·y / sqrt(|x|²|y|²)`; a zero-norm pixel contributes 1.
pub fn loss_posemap(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let dot = (pred * target)?.sum(D::Minus1)?;
    let nn = (pred.sqr()?.sum(D::Minus1)? * target.sqr()?.sum(D::Minus1)?)?;
    let cos = (dot / nn.maximum(1e-30)?.sqrt()?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// `‖p̂ − p‖₂ + ‖F̂ − F‖₂` (Frobenius norm on the maps), averaged over the
/// batch. The feature term is skipped when `maps` is `None`.
pub fn loss_rvs(
    pred_pose: &Tensor,
    pose: &Tensor,
    maps: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let b = pred_pose.dims()[0];
    let mut per = (pred_pose - pose)?.sqr()?.sum(D::Minus1)?.sqrt()?;
    if let Some((pred, target)) = maps {
        let diff = (pred - target)?.reshape((b, ()))?;
        per = (per + diff.sqr()?.sum(D::Minus1)?.sqrt()?)?;
    }
    Ok(per.mean_all()?)
}

/// Weighted sum of the enabled terms.
pub fn loss_total(
    terms: &LossTerms,
    toggles: &LossToggles,
    weights: &LossWeights,
) -> Result<Tensor> {
    if !toggles.any() {
        return Err(Error::NoObjective);
    }
    let parts = [
        (toggles.pose, &terms.pose, weights.pose, "pose"),
        (toggles.image, &terms.image, weights.image, "image"),
        (toggles.posemap, &terms.posemap, weights.posemap, "posemap"),
        (toggles.rvs, &terms.rvs, weights.rvs, "rvs"),
    ];
    let mut total: Option<Tensor> = None;
    for (on, term, weight, name) in parts {
        if !on {
            continue;
        }
        let t = term
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{name} loss enabled but not computed")))?;
        let t = if weight == 1.0 {
            t.clone()
        } else {
            t.affine(weight, 0.0)?
        };
        total = Some(match total {
            None => t,
            Some(acc) => (acc + t)?,
        });
    }
    Ok(total.unwrap())
}

/// Self-supervised objective: image-feature triplet term plus PoseMap term.
pub fn loss_align(
    real: &Tensor,
    rendered: &Tensor,
    negatives: Negatives,
    margin: f64,
    posemap_pred: &Tensor,
    posemap_target: &Tensor,
) -> Result<Tensor> {
    let image = loss_image(real, rendered, negatives, margin)?;
    Ok((image + loss_posemap(posemap_pred, posemap_target)?)?)
}
