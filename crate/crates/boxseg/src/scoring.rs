//! Pseudo-mask quality estimation.
//!
//! The mask-aware confidence score is the geometric mean of the detection
//! confidence and the average probability of above-threshold pixels inside
//! the ground-truth box. Classification-score, matched-IoU, and mean-entropy
//! variants are provided for ablation, plus `none` which fixes the weight
//! at 1.

use serde::{Deserialize, Serialize};

use crate::geometry::{compute_iou, BBox, BitMask, ProbMask};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Which quality estimate weights the pseudo-mask loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    #[default]
    MaskAware,
    Cls,
    Iou,
    MeanEntropy,
    None,
}

/// A quality estimate with its provenance.
///
/// `value` is the raw score: in `[0, 1]` for mask-aware / cls / iou, and in
/// `(-inf, 1]` for mean-entropy. Use [`QualityScore::weight`] when scaling a
/// loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore<S> {
    pub value: S,
    pub variant: ScoreVariant,
}

impl<S: Scalar> QualityScore<S> {
    /// The score clamped to `[0, 1]` for use as a loss weight.
    pub fn weight(&self) -> S {
        self.value.max(S::zero()).min(S::one())
    }
}

/// Mask-aware confidence: `sqrt(c * mean probability of positive in-box
/// pixels)`; 0 when no in-box pixel exceeds the threshold.
pub fn mask_aware_score<S: Scalar>(
    m: &ProbMask<S>,
    box_mask: &BitMask,
    c: S,
    tau_m: S,
) -> Result<QualityScore<S>> {
    if m.h() != box_mask.h() || m.w() != box_mask.w() {
        return Err(Error::ShapeMismatch(
            "mask-aware score",
            m.h(),
            m.w(),
            box_mask.h(),
            box_mask.w(),
        ));
    }
    let mut num = S::zero();
    let mut den = S::zero();
    for (p, b) in m.data().iter().zip(box_mask.data()) {
        if *b == 1 && *p > tau_m {
            num += *p;
            den += S::one();
        }
    }
    let value = if den == S::zero() {
        S::zero()
    } else {
        (c * num / den).sqrt()
    };
    Ok(QualityScore {
        value,
        variant: ScoreVariant::MaskAware,
    })
}

/// Pass-through of the detection confidence.
pub fn cls_score<S: Scalar>(c: S) -> QualityScore<S> {
    QualityScore {
        value: c,
        variant: ScoreVariant::Cls,
    }
}

/// IoU between the matched predicted box and its ground-truth box.
pub fn iou_score<S: Scalar>(pred_box: &BBox<S>, gt_box: &BBox<S>) -> QualityScore<S> {
    QualityScore {
        value: compute_iou(pred_box, gt_box),
        variant: ScoreVariant::Iou,
    }
}

/// `1 + mean(p ln p + (1-p) ln(1-p))` over all pixels, with `0 ln 0 = 0`.
pub fn mean_entropy_score<S: Scalar>(m: &ProbMask<S>) -> QualityScore<S> {
    let n = m.data().len();
    let mut acc = S::zero();
    for &p in m.data() {
        acc += xlnx(p) + xlnx(S::one() - p);
    }
    let value = if n == 0 {
        S::one()
    } else {
        S::one() + acc / S::of(n as f64)
    };
    QualityScore {
        value,
        variant: ScoreVariant::MeanEntropy,
    }
}

#[inline]
fn xlnx<S: Scalar>(x: S) -> S {
    if x <= S::zero() {
        S::zero()
    } else {
        x * x.ln()
    }
}

/// Everything a score variant might need, gathered per assigned instance.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInputs<'a, S> {
    pub mask: &'a ProbMask<S>,
    pub box_mask: &'a BitMask,
    pub confidence: S,
    pub pred_box: &'a BBox<S>,
    pub gt_box: &'a BBox<S>,
    pub tau_m: S,
}

/// Dispatch on the configured variant; `None` fixes the score at 1.
pub fn quality_score<S: Scalar>(
    variant: ScoreVariant,
    inputs: &ScoreInputs<'_, S>,
) -> Result<QualityScore<S>> {
    Ok(match variant {
        ScoreVariant::MaskAware => {
            mask_aware_score(inputs.mask, inputs.box_mask, inputs.confidence, inputs.tau_m)?
        }
        ScoreVariant::Cls => cls_score(inputs.confidence),
        ScoreVariant::Iou => iou_score(inputs.pred_box, inputs.gt_box),
        ScoreVariant::MeanEntropy => mean_entropy_score(inputs.mask),
        ScoreVariant::None => QualityScore {
            value: S::one(),
            variant: ScoreVariant::None,
        },
    })
}
