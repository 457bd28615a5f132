//! Greedy, confidence-ordered, IoU-gated matching of predicted masks to
//! ground-truth boxes, producing rectified pseudo masks.
//!
//! Predictions below the confidence threshold are dropped; survivors are
//! processed in descending confidence order (ties broken by original index)
//! and each one claims the still-unassigned ground-truth box it overlaps
//! most, provided that IoU clears the gate. Unmatched ground truths keep an
//! all-zero pseudo mask.

use crate::geometry::{compute_iou, BBox, ProbMask};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Per-image prediction lists: boxes, masks, and confidences, all aligned.
#[derive(Debug, Clone)]
pub struct PredictionSet<S> {
    h: usize,
    w: usize,
    boxes: Vec<BBox<S>>,
    masks: Vec<ProbMask<S>>,
    scores: Vec<S>,
}

impl<S: Scalar> PredictionSet<S> {
    pub fn new(
        h: usize,
        w: usize,
        boxes: Vec<BBox<S>>,
        masks: Vec<ProbMask<S>>,
        scores: Vec<S>,
    ) -> Result<Self> {
        if masks.len() != boxes.len() {
            return Err(Error::LengthMismatch("masks", masks.len(), boxes.len()));
        }
        if scores.len() != boxes.len() {
            return Err(Error::LengthMismatch("scores", scores.len(), boxes.len()));
        }
        for m in &masks {
            if m.h() != h || m.w() != w {
                return Err(Error::ShapeMismatch("prediction mask", m.h(), m.w(), h, w));
            }
        }
        if scores
            .iter()
            .any(|s| *s < S::zero() || *s > S::one() || !s.is_finite())
        {
            return Err(Error::Config("confidence scores must lie in [0, 1]".into()));
        }
        Ok(PredictionSet {
            h,
            w,
            boxes,
            masks,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn boxes(&self) -> &[BBox<S>] {
        &self.boxes
    }

    pub fn masks(&self) -> &[ProbMask<S>] {
        &self.masks
    }

    pub fn scores(&self) -> &[S] {
        &self.scores
    }
}

/// Result of matching predictions to ground-truth boxes.
///
/// `assigned[j]` holds the index of the prediction claimed by ground truth
/// `j`, or `None` when unmatched; `pseudo_masks[j]` is the claimed mask
/// rectified by ground-truth box `j` (all-zero when unmatched).
#[derive(Debug, Clone)]
pub struct AssignmentResult<S> {
    pub assigned: Vec<Option<usize>>,
    pub pseudo_masks: Vec<ProbMask<S>>,
}

impl<S: Scalar> AssignmentResult<S> {
    /// Number of assigned ground truths (the pseudo-loss normalizer N_p).
    pub fn num_assigned(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }
}

/// Match predicted masks to ground-truth boxes and rectify them.
pub fn assign_pseudo_masks<S: Scalar>(
    preds: &PredictionSet<S>,
    gt_boxes: &[BBox<S>],
    tau_iou: S,
    tau_c: S,
) -> Result<AssignmentResult<S>> {
    if !(tau_iou > S::zero() && tau_iou <= S::one()) {
        return Err(Error::Config("tau_iou must lie in (0, 1]".into()));
    }
    if !(tau_c >= S::zero() && tau_c < S::one()) {
        return Err(Error::Config("tau_c must lie in [0, 1)".into()));
    }

    let k = gt_boxes.len();
    let mut assigned: Vec<Option<usize>> = vec![None; k];
    let mut pseudo_masks: Vec<ProbMask<S>> =
        vec![ProbMask::zeros(preds.h(), preds.w()); k];
    if k == 0 {
        return Ok(AssignmentResult {
            assigned,
            pseudo_masks,
        });
    }

    // confidence gate, then descending confidence with index tiebreak
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds.scores()[i] >= tau_c)
        .collect();
    order.sort_by(|&a, &b| {
        preds.scores()[b]
            .partial_cmp(&preds.scores()[a])
            .expect("finite confidences")
            .then(a.cmp(&b))
    });

    for i in order {
        let mut best: Option<(usize, S)> = None;
        for (j, gt) in gt_boxes.iter().enumerate() {
            if assigned[j].is_some() {
                continue;
            }
            let iou = compute_iou(&preds.boxes()[i], gt);
            match best {
                Some((_, u)) if iou <= u => {}
                _ => best = Some((j, iou)),
            }
        }
        if let Some((j, iou)) = best {
            if iou >= tau_iou {
                assigned[j] = Some(i);
                pseudo_masks[j] = preds.masks()[i].rectify(&gt_boxes[j]);
            }
        }
    }

    Ok(AssignmentResult {
        assigned,
        pseudo_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn const_mask(h: usize, w: usize, v: f64) -> ProbMask<f64> {
        ProbMask::new(Grid::filled(h, w, v))
    }

    #[test]
    fn no_predictions_leaves_everything_unassigned() {
        let preds = PredictionSet::new(4, 4, vec![], vec![], vec![]).unwrap();
        let gts = vec![bb(0.0, 0.0, 2.0, 2.0), bb(2.0, 2.0, 4.0, 4.0)];
        let r = assign_pseudo_masks(&preds, &gts, 0.5, 0.05).unwrap();
        assert_eq!(r.assigned, vec![None, None]);
        assert!(r.pseudo_masks.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert_eq!(r.num_assigned(), 0);
    }

    #[test]
    fn empty_ground_truth_yields_empty_result() {
        let preds = PredictionSet::new(
            4,
            4,
            vec![bb(0.0, 0.0, 2.0, 2.0)],
            vec![const_mask(4, 4, 1.0)],
            vec![0.9],
        )
        .unwrap();
        let r = assign_pseudo_masks(&preds, &[], 0.5, 0.05).unwrap();
        assert!(r.assigned.is_empty());
        assert!(r.pseudo_masks.is_empty());
    }

    #[test]
    fn higher_confidence_wins_the_contested_gt() {
        // pred A: conf 0.9, IoU 0.60; pred B: conf 0.95, IoU 0.55 — B is
        // processed first and claims the single GT, A's better IoU loses.
        let gt = bb(0.0, 0.0, 10.0, 10.0);
        let box_a = bb(0.0, 0.0, 10.0, 6.0); // IoU 0.6
        let box_b = bb(0.0, 0.0, 10.0, 5.5); // IoU 0.55
        let preds = PredictionSet::new(
            12,
            12,
            vec![box_a, box_b],
            vec![const_mask(12, 12, 0.8), const_mask(12, 12, 0.7)],
            vec![0.9, 0.95],
        )
        .unwrap();
        let r = assign_pseudo_masks(&preds, &[gt], 0.5, 0.05).unwrap();
        assert_eq!(r.assigned, vec![Some(1)]);
    }

    #[test]
    fn single_prediction_takes_argmax_gt() {
        let pred_box = bb(0.0, 0.0, 10.0, 7.0);
        let gt1 = bb(0.0, 0.0, 10.0, 10.0); // IoU 0.7
        let gt2 = bb(0.0, 0.0, 10.0, 11.7); // IoU ~0.598
        let preds = PredictionSet::new(
            12,
            12,
            vec![pred_box],
            vec![const_mask(12, 12, 0.9)],
            vec![0.8],
        )
        .unwrap();
        let r = assign_pseudo_masks(&preds, &[gt1, gt2], 0.5, 0.05).unwrap();
        assert_eq!(r.assigned, vec![Some(0), None]);
    }

    #[test]
    fn low_confidence_is_filtered_before_matching() {
        let gt = bb(0.0, 0.0, 4.0, 4.0);
        let preds = PredictionSet::new(
            4,
            4,
            vec![gt],
            vec![const_mask(4, 4, 1.0)],
            vec![0.04],
        )
        .unwrap();
        let r = assign_pseudo_masks(&preds, &[gt], 0.5, 0.05).unwrap();
        assert_eq!(r.assigned, vec![None]);
    }

    #[test]
    fn assigned_masks_are_rectified() {
        let gt = bb(0.0, 0.0, 2.0, 4.0);
        let preds = PredictionSet::new(
            4,
            4,
            vec![bb(0.0, 0.0, 2.2, 4.0)],
            vec![const_mask(4, 4, 1.0)],
            vec![0.9],
        )
        .unwrap();
        let r = assign_pseudo_masks(&preds, &[gt], 0.5, 0.05).unwrap();
        assert_eq!(r.assigned, vec![Some(0)]);
        let m = &r.pseudo_masks[0];
        for (y, x, v) in m.grid().iter_cells() {
            let expect = if x < 2 { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "cell ({y},{x})");
        }
    }

    #[test]
    fn rejects_mismatched_lengths_and_bad_thresholds() {
        assert!(PredictionSet::new(4, 4, vec![bb(0.0, 0.0, 1.0, 1.0)], vec![], vec![0.5]).is_err());
        let preds = PredictionSet::new(4, 4, vec![], vec![], vec![]).unwrap();
        assert!(assign_pseudo_masks(&preds, &[], 0.0, 0.05).is_err());
        assert!(assign_pseudo_masks(&preds, &[], 0.5, 1.0).is_err());
    }
}
