//! Single-level center-based detector: focal classification plus IoU box
//! regression on a stride-4 grid, with a plain greedy NMS for inference.

use crate::geometry::{compute_iou, BBox};
use crate::grid::Chw;
use crate::scalar::Scalar;

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;
const CENTER_RADIUS: f64 = 1.5;

/// Raw detector outputs: class logits `[num_classes, fh, fw]` and box
/// regression `[4, fh, fw]` (log-distances to the four sides).
#[derive(Debug, Clone)]
pub struct DetMaps<S> {
    pub cls: Chw<S>,
    pub reg: Chw<S>,
}

/// Gradients w.r.t. the raw detector outputs.
#[derive(Debug, Clone)]
pub struct DetGrads<S> {
    pub dcls: Chw<S>,
    pub dreg: Chw<S>,
}

/// Detection loss value with its components and output gradients.
#[derive(Debug, Clone)]
pub struct DetLoss<S> {
    pub value: S,
    pub cls_term: S,
    pub reg_term: S,
    pub num_pos: usize,
    pub grads: DetGrads<S>,
}

fn strides<S: Scalar>(det: &DetMaps<S>, img_h: usize, img_w: usize) -> (f64, f64) {
    (
        img_h as f64 / det.cls.h() as f64,
        img_w as f64 / det.cls.w() as f64,
    )
}

/// Focal term and its derivative w.r.t. the logit.
fn focal_term(z: f64, positive: bool) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-z).exp());
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    if positive {
        // -alpha (1-p)^g ln p
        let v = -FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * p.ln();
        let dv_dp = FOCAL_ALPHA
            * (FOCAL_GAMMA * (1.0 - p).powf(FOCAL_GAMMA - 1.0) * p.ln()
                - (1.0 - p).powf(FOCAL_GAMMA) / p);
        (v, dv_dp * p * (1.0 - p))
    } else {
        // -(1-alpha) p^g ln(1-p)
        let v = -(1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * (1.0 - p).ln();
        let dv_dp = -(1.0 - FOCAL_ALPHA)
            * (FOCAL_GAMMA * p.powf(FOCAL_GAMMA - 1.0) * (1.0 - p).ln()
                - p.powf(FOCAL_GAMMA) / (1.0 - p));
        (v, dv_dp * p * (1.0 - p))
    }
}

/// IoU of two boxes plus its partials w.r.t. the first box's coordinates.
fn iou_with_grad(p: &BBox<f64>, g: &BBox<f64>) -> (f64, [f64; 4]) {
    let ix1 = p.x1.max(g.x1);
    let iy1 = p.y1.max(g.y1);
    let ix2 = p.x2.min(g.x2);
    let iy2 = p.y2.min(g.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let area_p = p.area().max(0.0);
    let union = area_p + g.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    let overlap = iw > 0.0 && ih > 0.0;
    // d inter / d coord
    let di = [
        if overlap && p.x1 > g.x1 { -ih } else { 0.0 },
        if overlap && p.y1 > g.y1 { -iw } else { 0.0 },
        if overlap && p.x2 < g.x2 { ih } else { 0.0 },
        if overlap && p.y2 < g.y2 { iw } else { 0.0 },
    ];
    // d area_p / d coord
    let da = [-(p.y2 - p.y1), -(p.x2 - p.x1), p.y2 - p.y1, p.x2 - p.x1];
    let mut grad = [0.0; 4];
    for c in 0..4 {
        let dunion = da[c] - di[c];
        grad[c] = (di[c] * union - inter * dunion) / (union * union);
    }
    (iou, grad)
}

/// Simplified detection loss: focal classification over all locations plus
/// `1 - IoU` regression at center-sampled positives, both normalized by
/// `max(num_pos, 1)`. Images without ground truth contribute only negative
/// classification terms.
pub fn detection_loss<S: Scalar>(
    det: &DetMaps<S>,
    gt_boxes: &[BBox<S>],
    gt_classes: &[usize],
    img_h: usize,
    img_w: usize,
) -> DetLoss<S> {
    let (fh, fw) = (det.cls.h(), det.cls.w());
    let nc = det.cls.c();
    let (sy, sx) = strides(det, img_h, img_w);
    let radius = CENTER_RADIUS * sy.max(sx);

    // per-location assignment: smallest containing gt within the center radius
    let mut assign: Vec<Option<usize>> = vec![None; fh * fw];
    for y in 0..fh {
        for x in 0..fw {
            let cx = (x as f64 + 0.5) * sx;
            let cy = (y as f64 + 0.5) * sy;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gb) in gt_boxes.iter().enumerate() {
                let b = gb.cast::<f64>();
                let inside = cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2;
                let bcx = 0.5 * (b.x1 + b.x2);
                let bcy = 0.5 * (b.y1 + b.y2);
                let near = (cx - bcx).abs() <= radius && (cy - bcy).abs() <= radius;
                if inside && near {
                    let area = b.area();
                    match best {
                        Some((_, a)) if a <= area => {}
                        _ => best = Some((gi, area)),
                    }
                }
            }
            assign[y * fw + x] = best.map(|(gi, _)| gi);
        }
    }
    let num_pos = assign.iter().filter(|a| a.is_some()).count();
    let norm = num_pos.max(1) as f64;

    let mut dcls = Chw::zeros(nc, fh, fw);
    let mut dreg = Chw::zeros(4, fh, fw);
    let mut cls_total = 0.0;
    let mut reg_total = 0.0;

    for y in 0..fh {
        for x in 0..fw {
            let a = assign[y * fw + x];
            for c in 0..nc {
                let positive = a.map(|gi| gt_classes[gi] == c).unwrap_or(false);
                let z = det.cls.get(c, y, x).as_f64();
                let (v, dz) = focal_term(z, positive);
                cls_total += v;
                dcls.set(c, y, x, S::of(dz / norm));
            }
            if let Some(gi) = a {
                let cx = (x as f64 + 0.5) * sx;
                let cy = (y as f64 + 0.5) * sy;
                let z: Vec<f64> = (0..4).map(|c| det.reg.get(c, y, x).as_f64()).collect();
                let d: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| {
                        let s = if c == 0 || c == 2 { sx } else { sy };
                        v.clamp(-10.0, 10.0).exp() * s
                    })
                    .collect();
                let pred = BBox {
                    x1: cx - d[0],
                    y1: cy - d[1],
                    x2: cx + d[2],
                    y2: cy + d[3],
                };
                let (iou, giou) = iou_with_grad(&pred, &gt_boxes[gi].cast::<f64>());
                reg_total += 1.0 - iou;
                // chain: coord = cx ± exp(z)·s, so d coord/dz = ∓d
                let dcoord = [-giou[0] * d[0], -giou[1] * d[1], giou[2] * d[2], giou[3] * d[3]];
                for c in 0..4 {
                    dreg.set(c, y, x, S::of(-dcoord[c] / norm));
                }
            }
        }
    }

    let cls_term = S::of(cls_total / norm);
    let reg_term = S::of(reg_total / norm);
    DetLoss {
        value: cls_term + reg_term,
        cls_term,
        reg_term,
        num_pos,
        grads: DetGrads { dcls, dreg },
    }
}

/// Decoded detection: box, confidence, class.
pub type Detection<S> = (BBox<S>, S, usize);

/// Decode raw maps into boxes: sigmoid scores, threshold, greedy NMS,
/// truncation to `max_dets`.
pub fn decode<S: Scalar>(
    det: &DetMaps<S>,
    img_h: usize,
    img_w: usize,
    conf_thresh: f64,
    nms_iou: f64,
    max_dets: usize,
) -> Vec<Detection<S>> {
    let (fh, fw) = (det.cls.h(), det.cls.w());
    let (sy, sx) = strides(det, img_h, img_w);
    let mut cands: Vec<Detection<S>> = Vec::new();
    for y in 0..fh {
        for x in 0..fw {
            for c in 0..det.cls.c() {
                let score = 1.0 / (1.0 + (-det.cls.get(c, y, x).as_f64()).exp());
                if score < conf_thresh {
                    continue;
                }
                let cx = (x as f64 + 0.5) * sx;
                let cy = (y as f64 + 0.5) * sy;
                let dist = |ch: usize, s: f64| {
                    det.reg.get(ch, y, x).as_f64().clamp(-10.0, 10.0).exp() * s
                };
                let x1 = (cx - dist(0, sx)).clamp(0.0, img_w as f64);
                let y1 = (cy - dist(1, sy)).clamp(0.0, img_h as f64);
                let x2 = (cx + dist(2, sx)).clamp(0.0, img_w as f64);
                let y2 = (cy + dist(3, sy)).clamp(0.0, img_h as f64);
                if x2 <= x1 || y2 <= y1 {
                    continue;
                }
                let b = BBox {
                    x1: S::of(x1),
                    y1: S::of(y1),
                    x2: S::of(x2),
                    y2: S::of(y2),
                };
                cands.push((b, S::of(score), c));
            }
        }
    }
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));

    let mut kept: Vec<Detection<S>> = Vec::new();
    for cand in cands {
        if kept.len() >= max_dets {
            break;
        }
        let overlapping = kept
            .iter()
            .any(|k| compute_iou(&k.0, &cand.0).as_f64() >= nms_iou);
        if !overlapping {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_term_matches_finite_differences() {
        for &(z, pos) in &[(0.3, true), (-1.2, true), (0.7, false), (-0.4, false)] {
            let (_, dz) = focal_term(z, pos);
            let h = 1e-6;
            let fd = (focal_term(z + h, pos).0 - focal_term(z - h, pos).0) / (2.0 * h);
            assert!((dz - fd).abs() < 1e-6, "z={z} pos={pos}: {dz} vs {fd}");
        }
    }

    #[test]
    fn iou_grad_matches_finite_differences() {
        let p = BBox::new(1.0, 1.5, 5.0, 6.0).unwrap();
        let g = BBox::new(2.0, 1.0, 6.0, 5.0).unwrap();
        let (_, grad) = iou_with_grad(&p, &g);
        let h = 1e-6;
        let coords = [p.x1, p.y1, p.x2, p.y2];
        for c in 0..4 {
            let make = |delta: f64| {
                let mut v = coords;
                v[c] += delta;
                BBox {
                    x1: v[0],
                    y1: v[1],
                    x2: v[2],
                    y2: v[3],
                }
            };
            let fd = (iou_with_grad(&make(h), &g).0 - iou_with_grad(&make(-h), &g).0) / (2.0 * h);
            assert!((grad[c] - fd).abs() < 1e-6, "coord {c}: {} vs {fd}", grad[c]);
        }
    }

    #[test]
    fn no_gt_has_zero_regression_term() {
        let det = DetMaps {
            cls: Chw::<f64>::zeros(2, 4, 4),
            reg: Chw::<f64>::zeros(4, 4, 4),
        };
        let loss = detection_loss(&det, &[], &[], 16, 16);
        assert_eq!(loss.reg_term, 0.0);
        assert_eq!(loss.num_pos, 0);
        assert!(loss.cls_term > 0.0);
    }

    #[test]
    fn single_location_matches_scalar_oracle() {
        // 1x1 feature grid over a 4x4 image, one gt box covering everything
        let mut cls = Chw::<f64>::zeros(1, 1, 1);
        cls.set(0, 0, 0, 0.4);
        let mut reg = Chw::<f64>::zeros(4, 1, 1);
        for c in 0..4 {
            reg.set(c, 0, 0, 0.1 * (c as f64 + 1.0));
        }
        let det = DetMaps { cls, reg };
        let gt = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let loss = detection_loss(&det, &[gt], &[0], 4, 4);

        // oracle: location center (2,2), strides 4
        let (fl, _) = focal_term(0.4, true);
        let d: Vec<f64> = (0..4).map(|c| (0.1 * (c as f64 + 1.0)).exp() * 4.0).collect();
        let pred = BBox::new(2.0 - d[0], 2.0 - d[1], 2.0 + d[2], 2.0 + d[3]).unwrap();
        let (iou, _) = iou_with_grad(&pred, &gt);
        let expect = fl + (1.0 - iou);
        assert!((loss.value - expect).abs() < 1e-12);
        assert_eq!(loss.num_pos, 1);
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let mut cls = Chw::<f64>::zeros(1, 2, 2);
        cls.data_mut().fill(-0.3);
        let mut reg = Chw::<f64>::zeros(4, 2, 2);
        for (i, v) in reg.data_mut().iter_mut().enumerate() {
            *v = -0.2 + 0.07 * i as f64;
        }
        let det = DetMaps { cls, reg };
        let gt = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let loss = detection_loss(&det, &[gt], &[0], 8, 8);
        let h = 1e-6;
        for idx in 0..16 {
            let mut dp = det.clone();
            dp.reg.data_mut()[idx] += h;
            let mut dm = det.clone();
            dm.reg.data_mut()[idx] -= h;
            let fp = detection_loss(&dp, &[gt], &[0], 8, 8).value;
            let fm = detection_loss(&dm, &[gt], &[0], 8, 8).value;
            let fd = (fp - fm) / (2.0 * h);
            let got = loss.grads.dreg.data()[idx];
            assert!((got - fd).abs() < 1e-5, "reg[{idx}]: {got} vs {fd}");
        }
        for idx in 0..4 {
            let mut dp = det.clone();
            dp.cls.data_mut()[idx] += h;
            let mut dm = det.clone();
            dm.cls.data_mut()[idx] -= h;
            let fp = detection_loss(&dp, &[gt], &[0], 8, 8).value;
            let fm = detection_loss(&dm, &[gt], &[0], 8, 8).value;
            let fd = (fp - fm) / (2.0 * h);
            let got = loss.grads.dcls.data()[idx];
            assert!((got - fd).abs() < 1e-5, "cls[{idx}]: {got} vs {fd}");
        }
    }

    #[test]
    fn decode_thresholds_and_nms() {
        let mut cls = Chw::<f64>::zeros(1, 2, 2);
        cls.set(0, 0, 0, 3.0); // high score
        cls.set(0, 0, 1, 2.0); // overlapping, should be suppressed
        cls.set(0, 1, 1, -6.0); // below threshold
        let reg = Chw::<f64>::zeros(4, 2, 2); // distances = 1 stride
        let det = DetMaps { cls, reg };
        let out = decode(&det, 8, 8, 0.05, 0.3, 10);
        assert_eq!(out.len(), 1);
        assert!(out[0].1 > 0.9);
        assert_eq!(out[0].2, 0);
    }
}
