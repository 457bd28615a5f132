//! The training loop: teacher inference, pseudo-mask assignment, quality
//! scoring, student losses on augmented inputs, the gradient step, and the
//! EMA teacher update — plus the naive two-stage self-training pipeline and
//! the box-only / fully-supervised baselines.

pub mod augment;
pub mod checkpoint;
pub mod optim;

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_pseudo_masks, PredictionSet};
use crate::config::{Precision, RunConfig, TrainMode};
use crate::data::coco::{CocoAnnotation, CocoDataset, CocoRle, PseudoScore};
use crate::data::{load_eval_dataset, load_train_dataset, TrainSample};
use crate::eval::PredictedInstance;
use crate::geometry::{box_to_mask, BBox, BitMask, ProbMask};
use crate::grid::{Chw, Grid};
use crate::losses::{
    bce_loss, dice_loss, pairwise_color_loss_with_lab, projection_loss, pseudo_mask_loss,
    rgb_to_lab, warmup_weight, PairNeighborhood, PixelLoss, PseudoInstance, PseudoLossConfig,
};
use crate::model::detect::detection_loss;
use crate::model::SegModel;
use crate::scalar::Scalar;
use crate::scoring::{quality_score, ScoreInputs};
use crate::{Error, Result};
use augment::{augment, AugmentationPolicy};
use checkpoint::Checkpoint;
use optim::{lr_at, Sgd};

/// Teacher/labeler decode settings.
pub const INFER_NMS_IOU: f64 = 0.6;
pub const INFER_MAX_DETS: usize = 20;

const RNG_TAG_BATCH: u64 = 1;
const RNG_TAG_AUG: u64 = 2;

fn stream_rng(seed: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | (counter & 0x00ff_ffff_ffff_ffff));
    rng
}

/// Student, teacher, optimizer state, and the iteration counter.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub student: SegModel<S>,
    pub teacher: SegModel<S>,
    pub optimizer: Sgd<S>,
    pub iter: u64,
    pub ema_alpha: S,
    pub seed: u64,
}

impl<S: Scalar> TrainState<S> {
    /// Fresh state with the teacher initialized to the student.
    pub fn new(
        model_config: crate::model::ModelConfig,
        ema_alpha: f64,
        momentum: f64,
        seed: u64,
    ) -> Result<Self> {
        let student = SegModel::new(model_config)?;
        let teacher = student.clone();
        let optimizer = Sgd::new(student.param_count(), momentum);
        Ok(TrainState {
            student,
            teacher,
            optimizer,
            iter: 0,
            ema_alpha: S::of(ema_alpha),
            seed,
        })
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
    pub fn ema_update(&mut self) {
        let mut theta = self.teacher.params_flat();
        let xi = self.student.params_flat();
        ema_blend(&mut theta, &xi, self.ema_alpha);
        self.teacher
            .load_flat(&theta)
            .expect("teacher and student are shape-congruent");
    }
}

/// The EMA recursion on raw parameter slices.
pub fn ema_blend<S: Scalar>(teacher: &mut [S], student: &[S], alpha: S) {
    assert_eq!(teacher.len(), student.len(), "EMA shapes must match");
    let one_minus = S::one() - alpha;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + one_minus * *s;
    }
}

/// Per-step metrics, streamed as line-delimited JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub iter: u64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_box")]
    pub l_box: f64,
    #[serde(rename = "L_pseudo")]
    pub l_pseudo: f64,
    #[serde(rename = "N_p")]
    pub n_p: usize,
    pub mean_s: f64,
}

struct LossParams<S> {
    tau_iou: S,
    tau_c: S,
    tau_m: S,
    pixel: PixelLoss,
    pseudo_cfg: PseudoLossConfig<S>,
    lambda_box: S,
    sigma_color: S,
    tau_color: S,
    score_variant: crate::scoring::ScoreVariant,
    neigh: PairNeighborhood,
}

impl<S: Scalar> LossParams<S> {
    fn from_config(cfg: &RunConfig) -> Self {
        let l = &cfg.loss;
        let neigh = PairNeighborhood::default();
        LossParams {
            tau_iou: S::of(l.tau_iou),
            tau_c: S::of(l.tau_c),
            tau_m: S::of(l.tau_m),
            pixel: l.pixel_loss,
            pseudo_cfg: PseudoLossConfig {
                pixel: l.pixel_loss,
                affinity_form: l.affinity_form,
                lambda_pixel: S::of(l.lambda_pixel),
                lambda_affinity: S::of(l.lambda_affinity),
                tau_a: S::of(l.tau_a),
                tau_m: S::of(l.tau_m),
                neigh,
            },
            lambda_box: S::of(l.lambda_box),
            sigma_color: S::of(l.sigma_color),
            tau_color: S::of(l.tau_color),
            score_variant: l.quality_score,
            neigh,
        }
    }
}

/// One-mode trainer over an in-memory dataset.
pub struct Trainer<S> {
    mode: TrainMode,
    state: TrainState<S>,
    data: Vec<TrainSample<S>>,
    /// Fixed per-instance binary targets (self-train stage 2 and the oracle).
    fixed_targets: Option<Vec<Vec<Option<BitMask>>>>,
    policy: AugmentationPolicy,
    params: LossParams<S>,
    warmup_iters: u64,
    total_iters: u64,
    base_lr: f64,
    batch_size: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        cfg: &RunConfig,
        data: Vec<TrainSample<S>>,
        fixed_targets: Option<Vec<Vec<Option<BitMask>>>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if let Some(t) = &fixed_targets {
            if t.len() != data.len() {
                return Err(Error::LengthMismatch("fixed targets", t.len(), data.len()));
            }
        }
        let mut model_config = cfg.model.clone();
        model_config.seed = cfg.schedule.seed;
        let state = TrainState::new(
            model_config,
            cfg.loss.ema_alpha,
            cfg.schedule.momentum,
            cfg.schedule.seed,
        )?;
        let policy = AugmentationPolicy::from_level(
            cfg.augment.level,
            cfg.augment.scale_min,
            cfg.augment.scale_max,
            cfg.augment.flip_prob,
        );
        Ok(Trainer {
            mode: cfg.mode,
            state,
            data,
            fixed_targets,
            policy,
            params: LossParams::from_config(cfg),
            warmup_iters: cfg.warmup_iters(),
            total_iters: cfg.schedule.iters,
            base_lr: cfg.schedule.lr,
            batch_size: cfg.schedule.batch_size,
        })
    }

    pub fn state(&self) -> &TrainState<S> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState<S> {
        &mut self.state
    }

    /// Pseudo targets for one sample in the teacher's (canonical) frame:
    /// `(target mask, quality score)` per ground-truth box, or `None` when
    /// unassigned.
    fn teacher_targets(
        &self,
        sample: &TrainSample<S>,
    ) -> Result<Vec<Option<(ProbMask<S>, S)>>> {
        let (h, w) = (sample.image.h(), sample.image.w());
        // teacher consumes the raw canonical image, no photometric ops
        let out = self.state.teacher.forward_infer(
            &sample.image,
            self.params.tau_c.as_f64(),
            INFER_NMS_IOU,
            INFER_MAX_DETS,
        )?;
        let preds = PredictionSet::new(h, w, out.boxes, out.masks, out.confidences)?;
        let assignment =
            assign_pseudo_masks(&preds, &sample.boxes, self.params.tau_iou, self.params.tau_c)?;
        let mut targets = Vec::with_capacity(sample.boxes.len());
        for (j, assigned) in assignment.assigned.iter().enumerate() {
            match assigned {
                Some(i) => {
                    let gt_box = &sample.boxes[j];
                    let clamped = clamp_box(gt_box, h, w);
                    let box_mask = box_to_mask(&clamped, h, w)?;
                    let score = quality_score(
                        self.params.score_variant,
                        &ScoreInputs {
                            mask: &assignment.pseudo_masks[j],
                            box_mask: &box_mask,
                            confidence: preds.scores()[*i],
                            pred_box: &preds.boxes()[*i],
                            gt_box,
                            tau_m: self.params.tau_m,
                        },
                    )?;
                    targets.push(Some((assignment.pseudo_masks[j].clone(), score.weight())));
                }
                None => targets.push(None),
            }
        }
        Ok(targets)
    }

    /// Run one training step over a sampled batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let iter = self.state.iter;
        let batch = self.batch_size.min(self.data.len());
        let mut idx_rng = stream_rng(self.state.seed, RNG_TAG_BATCH, iter);
        let indices: Vec<usize> = (0..batch)
            .map(|_| rand::Rng::gen_range(&mut idx_rng, 0..self.data.len()))
            .collect();

        let pseudo_weight = match self.mode {
            TrainMode::Boxteacher => warmup_weight(iter, self.warmup_iters),
            TrainMode::BoxOnly => 0.0,
            // fixed-target modes train fully supervised from the start
            TrainMode::SelfTrain | TrainMode::OracleFullSup => 1.0,
        };

        self.state.student.zero_grads();
        let mut l_det_sum = 0.0;
        let mut l_box_sum = 0.0;
        let mut l_pseudo_sum = 0.0;
        let mut n_p_total = 0usize;
        let mut s_sum = 0.0;

        for (slot, &di) in indices.iter().enumerate() {
            let sample = &self.data[di];
            let mut aug_rng = stream_rng(self.state.seed, RNG_TAG_AUG, iter * 64 + slot as u64);
            let (img_s, transform, boxes_raw) =
                augment(&sample.image, &sample.boxes, &self.policy, &mut aug_rng)?;
            let (sh, sw) = (img_s.h(), img_s.w());
            let boxes_s: Vec<BBox<S>> = boxes_raw.iter().map(|b| clamp_box(b, sh, sw)).collect();

            // pseudo targets, warped into the student frame
            let mut instances: Vec<PseudoInstance<S>> = Vec::new();
            let mut instance_slots: Vec<usize> = Vec::new();
            if pseudo_weight > 0.0 || self.mode == TrainMode::Boxteacher {
                let teacher_frame: Vec<Option<(ProbMask<S>, S)>> = match self.mode {
                    TrainMode::Boxteacher => self.teacher_targets(sample)?,
                    TrainMode::SelfTrain | TrainMode::OracleFullSup => {
                        let fixed = self
                            .fixed_targets
                            .as_ref()
                            .expect("fixed-target modes carry targets");
                        fixed[di]
                            .iter()
                            .map(|m| m.as_ref().map(|bm| (bm.to_prob(), S::one())))
                            .collect()
                    }
                    TrainMode::BoxOnly => vec![None; sample.boxes.len()],
                };
                for (j, entry) in teacher_frame.into_iter().enumerate() {
                    if let Some((mask, score)) = entry {
                        let warped = mask.transform(&transform)?;
                        instances.push(PseudoInstance {
                            pred: ProbMask::zeros(0, 0), // filled after the forward pass
                            target: warped,
                            score,
                        });
                        instance_slots.push(j);
                    }
                }
            }

            let fwd = self.state.student.forward_train(&img_s, &boxes_s)?;
            let mut grads: Vec<Grid<S>> = boxes_s
                .iter()
                .map(|_| Grid::filled(sh, sw, S::zero()))
                .collect();

            // box-supervised losses: projection at full strength, the
            // pairwise consensus term ramped in like its reference
            // implementation so projection can fill boxes first
            if matches!(self.mode, TrainMode::BoxOnly | TrainMode::Boxteacher)
                && !boxes_s.is_empty()
            {
                let pair_w = S::of(warmup_weight(iter, self.warmup_iters));
                let lab = rgb_to_lab(&img_s);
                let inv_n = 1.0 / boxes_s.len() as f64;
                for (i, b) in boxes_s.iter().enumerate() {
                    let region = box_to_mask(b, sh, sw)?;
                    let proj = projection_loss(&fwd.masks[i], &region)?;
                    let pair = pairwise_color_loss_with_lab(
                        &fwd.masks[i],
                        &lab,
                        &region,
                        &self.params.neigh,
                        self.params.sigma_color,
                        self.params.tau_color,
                    );
                    let weighted = self.params.lambda_box * (proj.value + pair_w * pair.value);
                    l_box_sum += weighted.as_f64() * inv_n;
                    let scale = self.params.lambda_box * S::of(inv_n);
                    for ((g, a), c) in grads[i]
                        .data_mut()
                        .iter_mut()
                        .zip(proj.grad.data())
                        .zip(pair.grad.data())
                    {
                        *g += (*a + pair_w * *c) * scale;
                    }
                }
            }

            // pseudo-mask / fully-supervised mask losses
            if !instances.is_empty() {
                for (inst, &j) in instances.iter_mut().zip(&instance_slots) {
                    inst.pred = fwd.masks[j].clone();
                }
                n_p_total += instances.len();
                s_sum += instances
                    .iter()
                    .map(|i| i.score.as_f64())
                    .sum::<f64>();
                match self.mode {
                    TrainMode::Boxteacher => {
                        let pml = pseudo_mask_loss(&instances, &self.params.pseudo_cfg)?;
                        l_pseudo_sum += pml.value.as_f64();
                        let w = S::of(pseudo_weight);
                        for (slot_grad, &j) in pml.grads.iter().zip(&instance_slots) {
                            for (g, d) in grads[j].data_mut().iter_mut().zip(slot_grad.data()) {
                                *g += w * *d;
                            }
                        }
                    }
                    TrainMode::SelfTrain | TrainMode::OracleFullSup => {
                        let inv = 1.0 / instances.len() as f64;
                        for (inst, &j) in instances.iter().zip(&instance_slots) {
                            let bits = inst.target.binarize(self.params.tau_m);
                            let lv = match self.params.pixel {
                                PixelLoss::Dice => dice_loss(&inst.pred, &bits.to_prob())?,
                                PixelLoss::Bce => bce_loss(&inst.pred, &bits)?,
                            };
                            l_pseudo_sum += lv.value.as_f64() * inv;
                            let scale = S::of(inv);
                            for (g, d) in grads[j].data_mut().iter_mut().zip(lv.grad.data()) {
                                *g += *d * scale;
                            }
                        }
                    }
                    TrainMode::BoxOnly => unreachable!("box_only has no instances"),
                }
            }

            // detection loss
            let det_grads = match &fwd.det {
                Some(det) => {
                    let dl = detection_loss(det, &boxes_s, &sample.classes, sh, sw);
                    l_det_sum += dl.value.as_f64();
                    Some(dl.grads)
                }
                None => None,
            };

            self.state
                .student
                .backward(&fwd, &grads, det_grads.as_ref())?;
        }

        let inv_b = 1.0 / batch as f64;
        let l_det = l_det_sum * inv_b;
        let l_box = l_box_sum * inv_b;
        let l_pseudo = l_pseudo_sum * inv_b;
        let total = l_det + l_box + pseudo_weight * l_pseudo;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }

        let lr = lr_at(self.base_lr, iter, self.total_iters);
        let grads = self.state.student.grads_flat();
        let mut params = self.state.student.params_flat();
        self.state
            .optimizer
            .step(&mut params, &grads, S::of(lr), S::of(inv_b));
        self.state.student.load_flat(&params)?;
        self.state.ema_update();
        self.state.iter += 1;

        Ok(StepMetrics {
            iter,
            l_det,
            l_box,
            l_pseudo,
            n_p: n_p_total,
            mean_s: if n_p_total == 0 {
                0.0
            } else {
                s_sum / n_p_total as f64
            },
        })
    }
}

fn clamp_box<S: Scalar>(b: &BBox<S>, h: usize, w: usize) -> BBox<S> {
    let wl = S::of(w as f64);
    let hl = S::of(h as f64);
    let x1 = b.x1.max(S::zero()).min(wl);
    let y1 = b.y1.max(S::zero()).min(hl);
    BBox {
        x1,
        y1,
        x2: b.x2.max(x1).min(wl),
        y2: b.y2.max(y1).min(hl),
    }
}

/// Label a dataset with a trained model: run inference per image, assign
/// predictions to the ground-truth boxes, binarize, and collect scores.
///
/// Returns the COCO-style annotation set (segmentation present only for
/// assigned instances), the score sidecar, and the per-image targets.
pub fn pseudo_label_dataset<S: Scalar>(
    model: &SegModel<S>,
    data: &[TrainSample<S>],
    loss: &crate::config::LossConfig,
) -> Result<(CocoDataset, Vec<PseudoScore>, Vec<Vec<Option<BitMask>>>)> {
    let tau_iou = S::of(loss.tau_iou);
    let tau_c = S::of(loss.tau_c);
    let tau_m = S::of(loss.tau_m);
    let mut coco = CocoDataset::shapes_header();
    let mut scores = Vec::new();
    let mut targets = Vec::with_capacity(data.len());
    let mut ann_id: u64 = 1;
    for (i, sample) in data.iter().enumerate() {
        let (h, w) = (sample.image.h(), sample.image.w());
        coco.images.push(crate::data::coco::CocoImage {
            id: i as u64,
            file_name: format!("images/{i:06}.png"),
            width: w,
            height: h,
        });
        let out = model.forward_infer(&sample.image, loss.tau_c, INFER_NMS_IOU, INFER_MAX_DETS)?;
        let preds = PredictionSet::new(h, w, out.boxes, out.masks, out.confidences)?;
        let assignment = assign_pseudo_masks(&preds, &sample.boxes, tau_iou, tau_c)?;
        let mut image_targets = Vec::with_capacity(sample.boxes.len());
        for (j, assigned) in assignment.assigned.iter().enumerate() {
            let gt = sample.boxes[j].cast::<f64>();
            let mut ann = CocoAnnotation {
                id: ann_id,
                image_id: i as u64,
                category_id: sample.classes[j] as u64 + 1,
                bbox: [gt.x1, gt.y1, gt.x2 - gt.x1, gt.y2 - gt.y1],
                area: 0.0,
                iscrowd: 0,
                segmentation: None,
            };
            match assigned {
                Some(pi) => {
                    let bits = assignment.pseudo_masks[j].binarize(tau_m);
                    ann.area = bits.count_ones() as f64;
                    ann.segmentation = Some(CocoRle::from_mask(&bits));
                    let clamped = clamp_box(&sample.boxes[j], h, w);
                    let box_mask = box_to_mask(&clamped, h, w)?;
                    let q = quality_score(
                        loss.quality_score,
                        &ScoreInputs {
                            mask: &assignment.pseudo_masks[j],
                            box_mask: &box_mask,
                            confidence: preds.scores()[*pi],
                            pred_box: &preds.boxes()[*pi],
                            gt_box: &sample.boxes[j],
                            tau_m,
                        },
                    )?;
                    scores.push(PseudoScore {
                        annotation_id: ann_id,
                        confidence: preds.scores()[*pi].as_f64(),
                        quality: q.weight().as_f64(),
                    });
                    image_targets.push(Some(bits));
                }
                None => image_targets.push(None),
            }
            coco.annotations.push(ann);
            ann_id += 1;
        }
        targets.push(image_targets);
    }
    Ok((coco, scores, targets))
}

/// Recover the per-image binary targets from a persisted pseudo-label file.
pub fn targets_from_pseudo_labels(
    coco: &CocoDataset,
    expected_images: usize,
) -> Result<Vec<Vec<Option<BitMask>>>> {
    if coco.images.len() != expected_images {
        return Err(Error::LengthMismatch(
            "pseudo-label images",
            coco.images.len(),
            expected_images,
        ));
    }
    let mut targets = vec![Vec::new(); coco.images.len()];
    for img in &coco.images {
        for ann in coco.annotations_of(img.id) {
            let target = match &ann.segmentation {
                Some(rle) => Some(rle.to_mask()?),
                None => None,
            };
            targets[img.id as usize].push(target);
        }
    }
    Ok(targets)
}

/// Load a trained student model out of a checkpoint.
pub fn model_from_checkpoint<S: Scalar>(path: &Path) -> Result<SegModel<S>> {
    let ck = Checkpoint::<S>::load(path)?;
    let mut model = SegModel::new(ck.model_config)?;
    model.load_flat(&ck.student)?;
    Ok(model)
}

/// Run inference over a list of images, binarizing masks at 0.5.
pub fn infer_predictions<S: Scalar>(
    model: &SegModel<S>,
    images: &[Chw<S>],
    conf_thresh: f64,
) -> Result<Vec<Vec<PredictedInstance>>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let mo = model.forward_infer(img, conf_thresh, INFER_NMS_IOU, INFER_MAX_DETS)?;
        let mut list = Vec::with_capacity(mo.boxes.len());
        for k in 0..mo.boxes.len() {
            list.push(PredictedInstance {
                mask: mo.masks[k].binarize(S::of(0.5)),
                class: mo.classes[k],
                confidence: mo.confidences[k].as_f64(),
            });
        }
        out.push(list);
    }
    Ok(out)
}

/// Artifacts of a completed training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub iters: u64,
}

/// Train per the config, writing the snapshot, a metrics stream, the final
/// checkpoint, and (for self-training) the persisted pseudo labels.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    match cfg.schedule.precision {
        Precision::F32 => run_training_t::<f32>(cfg),
        Precision::F64 => run_training_t::<f64>(cfg),
    }
}

fn run_training_t<S: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write_snapshot(&cfg.out)?;
    let train_dir = cfg.dataset.join("train");

    let (data, fixed_targets): (Vec<TrainSample<S>>, Option<Vec<Vec<Option<BitMask>>>>) =
        match cfg.mode {
            TrainMode::OracleFullSup => {
                // the one training mode allowed behind the hidden-mask firewall
                let full = load_eval_dataset::<S>(&train_dir)?;
                let targets = full
                    .iter()
                    .map(|s| s.hidden_masks.iter().map(|m| Some(m.clone())).collect())
                    .collect();
                (full.iter().map(|s| s.to_train()).collect(), Some(targets))
            }
            TrainMode::SelfTrain => {
                let labeler_path = cfg.labeler.as_ref().expect("validated");
                if !labeler_path.exists() {
                    return Err(Error::Checkpoint(format!(
                        "labeler checkpoint {} does not exist",
                        labeler_path.display()
                    )));
                }
                let data = load_train_dataset::<S>(&train_dir)?;
                let labeler = model_from_checkpoint::<S>(labeler_path)?;
                let (coco, scores, targets) = pseudo_label_dataset(&labeler, &data, &cfg.loss)?;
                coco.save(&cfg.out.join("pseudo_labels.json"))?;
                crate::data::coco::save_pseudo_scores(
                    &cfg.out.join("pseudo_labels.scores.json"),
                    &scores,
                )?;
                (data, Some(targets))
            }
            TrainMode::BoxOnly | TrainMode::Boxteacher => {
                (load_train_dataset::<S>(&train_dir)?, None)
            }
        };

    let mut trainer = Trainer::new(cfg, data, fixed_targets)?;
    let metrics_path = cfg.out.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    for _ in 0..cfg.schedule.iters {
        let m = trainer.step()?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(metrics_file, "{line}")?;
    }
    metrics_file.flush()?;

    let state = trainer.state();
    let ckpt_path = cfg.out.join("checkpoint.bin");
    Checkpoint {
        config_hash: cfg.content_hash(),
        model_config: state.student.config().clone(),
        iter: state.iter,
        seed: state.seed,
        student: state.student.params_flat(),
        teacher: state.teacher.params_flat(),
        velocity: state.optimizer.velocity.clone(),
    }
    .save(&ckpt_path)?;

    Ok(RunSummary {
        out_dir: cfg.out.clone(),
        checkpoint: ckpt_path,
        metrics: metrics_path,
        iters: cfg.schedule.iters,
    })
}
