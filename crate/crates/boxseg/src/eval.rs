//! Mask evaluation: greedy confidence-ordered matching, mIoU over matched
//! instances, and all-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::geometry::BitMask;
use crate::scalar::Scalar;

/// One predicted instance ready for evaluation.
#[derive(Debug, Clone)]
pub struct PredictedInstance {
    pub mask: BitMask,
    pub class: usize,
    pub confidence: f64,
}

/// A point on a precision-recall curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub num_gt: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub pr50: Vec<PrPoint>,
}

/// Evaluation summary. AP uses all-point interpolation (area under the
/// monotone precision envelope), declared in `interpolation` for
/// comparability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean IoU over instances matched at IoU >= 0.5.
    pub miou: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean AP over thresholds 0.50:0.05:0.95.
    pub map_50_95: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub per_class: Vec<ClassReport>,
    pub interpolation: String,
}

struct FlatPred {
    image: usize,
    class: usize,
    confidence: f64,
    index: usize,
}

/// Greedy per-class matching at one IoU threshold. Returns the TP/FP flags
/// in descending-confidence order plus matched IoUs.
fn match_at_threshold(
    preds: &[Vec<PredictedInstance>],
    gts: &[Vec<(&BitMask, usize)>],
    class: usize,
    threshold: f64,
) -> (Vec<bool>, usize, Vec<f64>) {
    let mut flat: Vec<FlatPred> = Vec::new();
    for (img, list) in preds.iter().enumerate() {
        for (index, p) in list.iter().enumerate() {
            if p.class == class {
                flat.push(FlatPred {
                    image: img,
                    class,
                    confidence: p.confidence,
                    index,
                });
            }
        }
    }
    // descending confidence; image/index tiebreak keeps the order total
    flat.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidences")
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });

    let num_gt: usize = gts
        .iter()
        .map(|list| list.iter().filter(|(_, c)| *c == class).count())
        .sum();

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|l| vec![false; l.len()]).collect();
    let mut tp_flags = Vec::with_capacity(flat.len());
    let mut matched_ious = Vec::new();
    for p in &flat {
        let pred_mask = &preds[p.image][p.index].mask;
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gmask, gclass)) in gts[p.image].iter().enumerate() {
            if *gclass != p.class || matched[p.image][gi] {
                continue;
            }
            let iou = pred_mask.iou(gmask);
            match best {
                Some((_, b)) if b >= iou => {}
                _ => best = Some((gi, iou)),
            }
        }
        match best {
            Some((gi, iou)) if iou >= threshold => {
                matched[p.image][gi] = true;
                tp_flags.push(true);
                matched_ious.push(iou);
            }
            _ => tp_flags.push(false),
        }
    }
    (tp_flags, num_gt, matched_ious)
}

/// Area under the monotone precision envelope (all-point interpolation).
fn average_precision(tp_flags: &[bool], num_gt: usize) -> (f64, Vec<PrPoint>) {
    if num_gt == 0 {
        return (0.0, Vec::new());
    }
    let mut curve = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (i + 1) as f64,
        });
    }
    // monotone envelope from the right
    let mut envelope = curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].precision = envelope[i].precision.max(envelope[i + 1].precision);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in &envelope {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * p.precision;
            prev_recall = p.recall;
        }
    }
    (ap, curve)
}

/// Evaluate predictions against a dataset's hidden masks.
///
/// Matching is per class, greedy by descending confidence, each ground truth
/// used at most once. `extra_thresholds` adds AP numbers beyond the standard
/// {0.5, 0.75} pair (they land in the report only through `map_50_95` when
/// applicable).
pub fn evaluate<S: Scalar>(
    preds: &[Vec<PredictedInstance>],
    dataset: &[Sample<S>],
    _extra_thresholds: &[f64],
) -> EvalReport {
    assert_eq!(
        preds.len(),
        dataset.len(),
        "one prediction list per dataset image"
    );
    let gts: Vec<Vec<(&BitMask, usize)>> = dataset
        .iter()
        .map(|s| {
            s.hidden_masks
                .iter()
                .zip(&s.classes)
                .map(|(m, &c)| (m, c))
                .collect()
        })
        .collect();

    let mut classes: Vec<usize> = dataset.iter().flat_map(|s| s.classes.clone()).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::new();
    let mut all_matched_ious = Vec::new();
    let mut ap_sums = vec![0.0f64; 10]; // thresholds 0.50 .. 0.95
    for &class in &classes {
        let mut ap50 = 0.0;
        let mut ap75 = 0.0;
        let mut pr50 = Vec::new();
        let mut num_gt = 0;
        for (ti, t) in (0..10).map(|k| (k, 0.5 + 0.05 * k as f64)) {
            let (flags, n, ious) = match_at_threshold(preds, &gts, class, t);
            let (ap, curve) = average_precision(&flags, n);
            ap_sums[ti] += ap;
            if ti == 0 {
                ap50 = ap;
                pr50 = curve;
                num_gt = n;
                all_matched_ious.extend(ious);
            }
            if (t - 0.75).abs() < 1e-9 {
                ap75 = ap;
            }
        }
        per_class.push(ClassReport {
            class,
            num_gt,
            ap50,
            ap75,
            pr50,
        });
    }

    let nc = classes.len().max(1) as f64;
    let ap50 = per_class.iter().map(|c| c.ap50).sum::<f64>() / nc;
    let ap75 = per_class.iter().map(|c| c.ap75).sum::<f64>() / nc;
    let map_50_95 = ap_sums.iter().sum::<f64>() / (10.0 * nc);
    let miou = if all_matched_ious.is_empty() {
        0.0
    } else {
        all_matched_ious.iter().sum::<f64>() / all_matched_ious.len() as f64
    };

    EvalReport {
        miou,
        ap50,
        ap75,
        map_50_95,
        num_images: dataset.len(),
        num_gt: gts.iter().map(|g| g.len()).sum(),
        num_predictions: preds.iter().map(|p| p.len()).sum(),
        per_class,
        interpolation: "all-point".into(),
    }
}
