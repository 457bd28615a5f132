//! A deliberately tiny reference segmentation network.
//!
//! A few-block convolutional encoder at stride 4 feeds (a) an optional
//! single-level center-based detector and (b) a per-instance mask head that
//! predicts a probability mask at input resolution for each proposed box.
//! Two head flavors exist: the default renders the box as an extra input
//! plane; the dynamic-filter variant generates per-instance 1×1 conv weights
//! from box-pooled features. The framework only sees [`ModelOutput`] /
//! [`TrainForward`], so the heads are interchangeable.

pub mod detect;
pub mod layers;

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, ProbMask};
use crate::grid::{Chw, Grid};
use crate::scalar::Scalar;
use crate::{Error, Result};
use detect::{decode, DetGrads, DetMaps};
use layers::{
    relu, relu_backward, resize_bilinear, resize_bilinear_backward, sigmoid, Conv2d, Linear,
};

const WEIGHT_MAGIC: &[u8; 8] = b"BSEGWT01";

/// Mask-head flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskHeadKind {
    #[default]
    BoxConditioned,
    DynamicFilter,
}

/// Architecture knobs; parameter count and output shapes are pure functions
/// of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder block output widths; blocks 1 and 2 run at stride 2.
    pub channels: Vec<usize>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub detector: bool,
    pub mask_head: MaskHeadKind,
    /// Stop mask-head gradients at the encoder features, leaving the
    /// encoder to the detection loss.
    pub detach_mask_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![8, 12, 16, 16],
            head_channels: 12,
            num_classes: 2,
            detector: true,
            mask_head: MaskHeadKind::BoxConditioned,
            detach_mask_head: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.head_channels == 0 {
            return Err(Error::Config("model channel widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// What the network produced for one image: aligned boxes, confidences,
/// class ids, and instance masks at image resolution.
#[derive(Debug, Clone)]
pub struct ModelOutput<S> {
    pub boxes: Vec<BBox<S>>,
    pub confidences: Vec<S>,
    pub classes: Vec<usize>,
    pub masks: Vec<ProbMask<S>>,
}

#[derive(Debug, Clone)]
enum MaskHead<S> {
    BoxCond {
        convs: Vec<Conv2d<S>>,
    },
    Dynamic {
        controller: Linear<S>,
        hidden: usize,
    },
}

fn dynamic_param_len(feat_c: usize, hidden: usize) -> usize {
    let in_dim = feat_c + 2;
    hidden * in_dim + hidden + hidden + 1
}

#[derive(Debug, Clone)]
struct InstanceCache<S> {
    head_input: Chw<S>,
    /// Post-relu activations per head conv (box-conditioned head).
    conv_acts: Vec<Chw<S>>,
    /// Dynamic-head extras: controller input, generated params, hidden acts.
    dyn_ctrl_in: Vec<S>,
    dyn_params: Vec<S>,
    dyn_hidden: Chw<S>,
    dyn_pool_cells: Vec<(usize, usize)>,
    /// Upsampled probabilities (needed for the sigmoid backward).
    probs: ProbMask<S>,
}

#[derive(Debug, Clone)]
struct Cache<S> {
    /// Input to each encoder conv.
    enc_inputs: Vec<Chw<S>>,
    /// Post-relu output of each encoder conv.
    enc_acts: Vec<Chw<S>>,
    instances: Vec<InstanceCache<S>>,
    img_h: usize,
    img_w: usize,
}

/// A training forward pass: per-box masks, raw detector maps, and the
/// activations the backward pass needs.
#[derive(Debug, Clone)]
pub struct TrainForward<S> {
    pub masks: Vec<ProbMask<S>>,
    pub det: Option<DetMaps<S>>,
    cache: Cache<S>,
}

/// The reference segmentation network.
#[derive(Debug, Clone)]
pub struct SegModel<S> {
    config: ModelConfig,
    encoder: Vec<Conv2d<S>>,
    cls_head: Option<Conv2d<S>>,
    reg_head: Option<Conv2d<S>>,
    head: MaskHead<S>,
}

impl<S: Scalar> SegModel<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut encoder = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in config.channels.iter().enumerate() {
            let stride = if i == 1 || i == 2 { 2 } else { 1 };
            encoder.push(Conv2d::new(in_c, out_c, 3, stride, &mut rng));
            in_c = out_c;
        }
        let feat_c = *config.channels.last().expect("nonempty");
        let (cls_head, reg_head) = if config.detector {
            let mut cls = Conv2d::new(feat_c, config.num_classes, 3, 1, &mut rng);
            // focal prior: start every location at p ~ 0.01 so the negative
            // flood does not drown the few positives
            let prior_bias = S::of(-(0.99f64 / 0.01).ln());
            cls.b.fill(prior_bias);
            (
                Some(cls),
                Some(Conv2d::new(feat_c, 4, 3, 1, &mut rng)),
            )
        } else {
            (None, None)
        };
        let head = match config.mask_head {
            MaskHeadKind::BoxConditioned => {
                let hc = config.head_channels;
                MaskHead::BoxCond {
                    convs: vec![
                        Conv2d::new(feat_c + 3, hc, 3, 1, &mut rng),
                        Conv2d::new(hc, hc, 3, 1, &mut rng),
                        Conv2d::new(hc, 1, 1, 1, &mut rng),
                    ],
                }
            }
            MaskHeadKind::DynamicFilter => {
                let hidden = config.head_channels;
                let ctrl_in = feat_c + 4;
                let ctrl_out = dynamic_param_len(feat_c, hidden);
                MaskHead::Dynamic {
                    controller: Linear::new(ctrl_in, ctrl_out, &mut rng),
                    hidden,
                }
            }
        };
        Ok(SegModel {
            config,
            encoder,
            cls_head,
            reg_head,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn feat_c(&self) -> usize {
        *self.config.channels.last().expect("nonempty")
    }

    pub fn param_count(&self) -> usize {
        let mut n: usize = self.encoder.iter().map(|c| c.param_count()).sum();
        if let Some(c) = &self.cls_head {
            n += c.param_count();
        }
        if let Some(c) = &self.reg_head {
            n += c.param_count();
        }
        n += match &self.head {
            MaskHead::BoxCond { convs } => convs.iter().map(|c| c.param_count()).sum(),
            MaskHead::Dynamic { controller, .. } => controller.param_count(),
        };
        n
    }

    fn for_each_param_block(&self, mut f: impl FnMut(&[S])) {
        for c in &self.encoder {
            f(&c.w);
            f(&c.b);
        }
        if let Some(c) = &self.cls_head {
            f(&c.w);
            f(&c.b);
        }
        if let Some(c) = &self.reg_head {
            f(&c.w);
            f(&c.b);
        }
        match &self.head {
            MaskHead::BoxCond { convs } => {
                for c in convs {
                    f(&c.w);
                    f(&c.b);
                }
            }
            MaskHead::Dynamic { controller, .. } => {
                f(&controller.w);
                f(&controller.b);
            }
        }
    }

    fn for_each_param_block_mut(&mut self, mut f: impl FnMut(&mut Vec<S>)) {
        for c in &mut self.encoder {
            f(&mut c.w);
            f(&mut c.b);
        }
        if let Some(c) = &mut self.cls_head {
            f(&mut c.w);
            f(&mut c.b);
        }
        if let Some(c) = &mut self.reg_head {
            f(&mut c.w);
            f(&mut c.b);
        }
        match &mut self.head {
            MaskHead::BoxCond { convs } => {
                for c in convs {
                    f(&mut c.w);
                    f(&mut c.b);
                }
            }
            MaskHead::Dynamic { controller, .. } => {
                f(&mut controller.w);
                f(&mut controller.b);
            }
        }
    }

    /// Flat parameter vector (fixed order; pairs with [`Self::load_flat`]).
    pub fn params_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param_block(|b| out.extend_from_slice(b));
        out
    }

    pub fn load_flat(&mut self, params: &[S]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch(
                "parameters",
                params.len(),
                self.param_count(),
            ));
        }
        let mut offset = 0;
        self.for_each_param_block_mut(|b| {
            let n = b.len();
            b.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Flat gradient vector in the same order as [`Self::params_flat`].
    pub fn grads_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.encoder {
            out.extend_from_slice(&c.gw);
            out.extend_from_slice(&c.gb);
        }
        if let Some(c) = &self.cls_head {
            out.extend_from_slice(&c.gw);
            out.extend_from_slice(&c.gb);
        }
        if let Some(c) = &self.reg_head {
            out.extend_from_slice(&c.gw);
            out.extend_from_slice(&c.gb);
        }
        match &self.head {
            MaskHead::BoxCond { convs } => {
                for c in convs {
                    out.extend_from_slice(&c.gw);
                    out.extend_from_slice(&c.gb);
                }
            }
            MaskHead::Dynamic { controller, .. } => {
                out.extend_from_slice(&controller.gw);
                out.extend_from_slice(&controller.gb);
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for c in &mut self.encoder {
            c.zero_grads();
        }
        if let Some(c) = &mut self.cls_head {
            c.zero_grads();
        }
        if let Some(c) = &mut self.reg_head {
            c.zero_grads();
        }
        match &mut self.head {
            MaskHead::BoxCond { convs } => {
                for c in convs {
                    c.zero_grads();
                }
            }
            MaskHead::Dynamic { controller, .. } => controller.zero_grads(),
        }
    }

    fn run_encoder(&self, image: &Chw<S>) -> (Vec<Chw<S>>, Vec<Chw<S>>) {
        let mut inputs = Vec::with_capacity(self.encoder.len());
        let mut acts = Vec::with_capacity(self.encoder.len());
        let mut x = image.clone();
        for conv in &self.encoder {
            inputs.push(x.clone());
            let y = relu(conv.forward(&x));
            acts.push(y.clone());
            x = y;
        }
        (inputs, acts)
    }

    fn head_input(&self, feat: &Chw<S>, b: &BBox<S>, img_h: usize, img_w: usize) -> Chw<S> {
        let (fh, fw) = (feat.h(), feat.w());
        let extra = match self.head {
            MaskHead::BoxCond { .. } => 3,
            MaskHead::Dynamic { .. } => 2,
        };
        let c = feat.c() + extra;
        let mut input = Chw::zeros(c, fh, fw);
        input.data_mut()[..feat.data().len()].copy_from_slice(feat.data());
        let sx = img_w as f64 / fw as f64;
        let sy = img_h as f64 / fh as f64;
        let bf = b.cast::<f64>();
        let cx = 0.5 * (bf.x1 + bf.x2);
        let cy = 0.5 * (bf.y1 + bf.y2);
        for y in 0..fh {
            for x in 0..fw {
                let px = (x as f64 + 0.5) * sx;
                let py = (y as f64 + 0.5) * sy;
                match self.head {
                    MaskHead::BoxCond { .. } => {
                        let inside = px >= bf.x1 && px < bf.x2 && py >= bf.y1 && py < bf.y2;
                        input.set(feat.c(), y, x, if inside { S::one() } else { S::zero() });
                        input.set(feat.c() + 1, y, x, S::of((px - cx) / img_w as f64));
                        input.set(feat.c() + 2, y, x, S::of((py - cy) / img_h as f64));
                    }
                    MaskHead::Dynamic { .. } => {
                        input.set(feat.c(), y, x, S::of((px - cx) / img_w as f64));
                        input.set(feat.c() + 1, y, x, S::of((py - cy) / img_h as f64));
                    }
                }
            }
        }
        input
    }

    fn run_mask_head(
        &self,
        feat: &Chw<S>,
        b: &BBox<S>,
        img_h: usize,
        img_w: usize,
    ) -> Result<(ProbMask<S>, InstanceCache<S>)> {
        let input = self.head_input(feat, b, img_h, img_w);
        let (fh, fw) = (feat.h(), feat.w());
        match &self.head {
            MaskHead::BoxCond { convs } => {
                let a0 = relu(convs[0].forward(&input));
                let a1 = relu(convs[1].forward(&a0));
                let logits = convs[2].forward(&a1);
                let up = resize_bilinear(&logits, img_h, img_w);
                let probs = chw_to_probs(&up)?;
                Ok((
                    probs.clone(),
                    InstanceCache {
                        head_input: input,
                        conv_acts: vec![a0, a1],
                        dyn_ctrl_in: Vec::new(),
                        dyn_params: Vec::new(),
                        dyn_hidden: Chw::zeros(0, 0, 0),
                        dyn_pool_cells: Vec::new(),
                        probs,
                    },
                ))
            }
            MaskHead::Dynamic { controller, hidden } => {
                let feat_c = feat.c();
                let bf = b.cast::<f64>();
                let sx = img_w as f64 / fw as f64;
                let sy = img_h as f64 / fh as f64;
                // mean feature over cells whose center lies inside the box
                let mut cells = Vec::new();
                for y in 0..fh {
                    for x in 0..fw {
                        let px = (x as f64 + 0.5) * sx;
                        let py = (y as f64 + 0.5) * sy;
                        if px >= bf.x1 && px < bf.x2 && py >= bf.y1 && py < bf.y2 {
                            cells.push((y, x));
                        }
                    }
                }
                let mut ctrl_in = vec![S::zero(); feat_c + 4];
                if !cells.is_empty() {
                    let inv = S::of(cells.len() as f64).recip();
                    for c in 0..feat_c {
                        let mut acc = S::zero();
                        for &(y, x) in &cells {
                            acc += feat.get(c, y, x);
                        }
                        ctrl_in[c] = acc * inv;
                    }
                }
                ctrl_in[feat_c] = S::of(0.5 * (bf.x1 + bf.x2) / img_w as f64);
                ctrl_in[feat_c + 1] = S::of(0.5 * (bf.y1 + bf.y2) / img_h as f64);
                ctrl_in[feat_c + 2] = S::of((bf.x2 - bf.x1) / img_w as f64);
                ctrl_in[feat_c + 3] = S::of((bf.y2 - bf.y1) / img_h as f64);

                let params = controller.forward(&ctrl_in);
                let in_dim = feat_c + 2;
                let h = *hidden;
                let (w1, rest) = params.split_at(h * in_dim);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);

                // per-position two-layer 1x1 dynamic conv
                let mut hid = Chw::zeros(h, fh, fw);
                let mut logits = Chw::zeros(1, fh, fw);
                for y in 0..fh {
                    for x in 0..fw {
                        for o in 0..h {
                            let mut acc = b1[o];
                            for i in 0..in_dim {
                                acc += w1[o * in_dim + i] * input.get(i, y, x);
                            }
                            if acc < S::zero() {
                                acc = S::zero();
                            }
                            hid.set(o, y, x, acc);
                        }
                        let mut z = b2[0];
                        for o in 0..h {
                            z += w2[o] * hid.get(o, y, x);
                        }
                        logits.set(0, y, x, z);
                    }
                }
                let up = resize_bilinear(&logits, img_h, img_w);
                let probs = chw_to_probs(&up)?;
                Ok((
                    probs.clone(),
                    InstanceCache {
                        head_input: input,
                        conv_acts: Vec::new(),
                        dyn_ctrl_in: ctrl_in,
                        dyn_params: params,
                        dyn_hidden: hid,
                        dyn_pool_cells: cells,
                        probs,
                    },
                ))
            }
        }
    }

    /// Training forward: masks for the provided boxes plus raw detector maps.
    pub fn forward_train(&self, image: &Chw<S>, boxes: &[BBox<S>]) -> Result<TrainForward<S>> {
        if image.h() == 0 || image.w() == 0 {
            return Err(Error::Config("empty image".into()));
        }
        if image.c() != 3 {
            return Err(Error::Config("model expects RGB input".into()));
        }
        let (img_h, img_w) = (image.h(), image.w());
        let (enc_inputs, enc_acts) = self.run_encoder(image);
        let feat = enc_acts.last().expect("encoder nonempty");
        let det = match (&self.cls_head, &self.reg_head) {
            (Some(cls), Some(reg)) => Some(DetMaps {
                cls: cls.forward(feat),
                reg: reg.forward(feat),
            }),
            _ => None,
        };
        let mut masks = Vec::with_capacity(boxes.len());
        let mut instances = Vec::with_capacity(boxes.len());
        for b in boxes {
            let (m, cache) = self.run_mask_head(feat, b, img_h, img_w)?;
            masks.push(m);
            instances.push(cache);
        }
        Ok(TrainForward {
            masks,
            det,
            cache: Cache {
                enc_inputs,
                enc_acts,
                instances,
                img_h,
                img_w,
            },
        })
    }

    /// Inference: decode detector boxes, then predict a mask per detection.
    pub fn forward_infer(
        &self,
        image: &Chw<S>,
        conf_thresh: f64,
        nms_iou: f64,
        max_dets: usize,
    ) -> Result<ModelOutput<S>> {
        if image.h() == 0 || image.w() == 0 {
            return Err(Error::Config("empty image".into()));
        }
        let (img_h, img_w) = (image.h(), image.w());
        let (_, enc_acts) = self.run_encoder(image);
        let feat = enc_acts.last().expect("encoder nonempty");
        let (cls, reg) = match (&self.cls_head, &self.reg_head) {
            (Some(c), Some(r)) => (c, r),
            _ => {
                return Err(Error::Config(
                    "inference requires the detector head".into(),
                ))
            }
        };
        let det = DetMaps {
            cls: cls.forward(feat),
            reg: reg.forward(feat),
        };
        let detections = decode(&det, img_h, img_w, conf_thresh, nms_iou, max_dets);
        let mut out = ModelOutput {
            boxes: Vec::with_capacity(detections.len()),
            confidences: Vec::with_capacity(detections.len()),
            classes: Vec::with_capacity(detections.len()),
            masks: Vec::with_capacity(detections.len()),
        };
        for (b, score, class) in detections {
            let (m, _) = self.run_mask_head(feat, &b, img_h, img_w)?;
            out.boxes.push(b);
            out.confidences.push(score);
            out.classes.push(class);
            out.masks.push(m);
        }
        Ok(out)
    }

    /// Backward pass: `mask_grads[i]` is dL/d(probability) for instance `i`'s
    /// mask at image resolution. Accumulates parameter gradients.
    pub fn backward(
        &mut self,
        fwd: &TrainForward<S>,
        mask_grads: &[Grid<S>],
        det_grads: Option<&DetGrads<S>>,
    ) -> Result<()> {
        let cache = &fwd.cache;
        if mask_grads.len() != cache.instances.len() {
            return Err(Error::LengthMismatch(
                "mask gradients",
                mask_grads.len(),
                cache.instances.len(),
            ));
        }
        let feat = cache.enc_acts.last().expect("encoder nonempty");
        let (fh, fw) = (feat.h(), feat.w());
        let feat_c = self.feat_c();
        let detach = self.config.detach_mask_head;
        let mut dfeat = Chw::zeros(feat_c, fh, fw);

        for (inst, dp) in cache.instances.iter().zip(mask_grads) {
            if dp.h() != cache.img_h || dp.w() != cache.img_w {
                return Err(Error::ShapeMismatch(
                    "mask gradient",
                    dp.h(),
                    dp.w(),
                    cache.img_h,
                    cache.img_w,
                ));
            }
            // through the sigmoid: dz = dp * p * (1 - p)
            let mut dz_up = Chw::zeros(1, cache.img_h, cache.img_w);
            {
                let out = dz_up.data_mut();
                for (i, (d, p)) in dp.data().iter().zip(inst.probs.data()).enumerate() {
                    out[i] = *d * *p * (S::one() - *p);
                }
            }
            let dlogits = resize_bilinear_backward(&dz_up, fh, fw);
            let dinput = match &mut self.head {
                MaskHead::BoxCond { convs } => {
                    let mut d = convs[2].backward(&inst.conv_acts[1], &dlogits);
                    relu_backward(&mut d, &inst.conv_acts[1]);
                    let mut d = convs[1].backward(&inst.conv_acts[0], &d);
                    relu_backward(&mut d, &inst.conv_acts[0]);
                    convs[0].backward(&inst.head_input, &d)
                }
                MaskHead::Dynamic { controller, hidden } => {
                    let h = *hidden;
                    let in_dim = feat_c + 2;
                    let params = &inst.dyn_params;
                    let (w1, rest) = params.split_at(h * in_dim);
                    let (_b1, rest) = rest.split_at(h);
                    let (w2, _b2) = rest.split_at(h);
                    let mut dparams = vec![S::zero(); params.len()];
                    let mut dinput = Chw::zeros(in_dim, fh, fw);
                    {
                        let (dw1, drest) = dparams.split_at_mut(h * in_dim);
                        let (db1, drest) = drest.split_at_mut(h);
                        let (dw2, db2) = drest.split_at_mut(h);
                        for y in 0..fh {
                            for x in 0..fw {
                                let dzv = dlogits.get(0, y, x);
                                if dzv == S::zero() {
                                    continue;
                                }
                                db2[0] += dzv;
                                for o in 0..h {
                                    let hv = inst.dyn_hidden.get(o, y, x);
                                    dw2[o] += hv * dzv;
                                    if hv > S::zero() {
                                        let dh = w2[o] * dzv;
                                        db1[o] += dh;
                                        for i in 0..in_dim {
                                            dw1[o * in_dim + i] +=
                                                inst.head_input.get(i, y, x) * dh;
                                            dinput.set(
                                                i,
                                                y,
                                                x,
                                                dinput.get(i, y, x) + w1[o * in_dim + i] * dh,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let dctrl_in = controller.backward(&inst.dyn_ctrl_in, &dparams);
                    // pooled-feature gradient spreads evenly over pooled cells
                    if !detach && !inst.dyn_pool_cells.is_empty() {
                        let inv = S::of(inst.dyn_pool_cells.len() as f64).recip();
                        for c in 0..feat_c {
                            let g = dctrl_in[c] * inv;
                            for &(y, x) in &inst.dyn_pool_cells {
                                dfeat.set(c, y, x, dfeat.get(c, y, x) + g);
                            }
                        }
                    }
                    dinput
                }
            };
            if !detach {
                for c in 0..feat_c {
                    let src = dinput.channel(c);
                    let dst = dfeat.channel_mut(c);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }

        if let Some(dg) = det_grads {
            if let (Some(cls), Some(reg)) = (&mut self.cls_head, &mut self.reg_head) {
                let d1 = cls.backward(feat, &dg.dcls);
                let d2 = reg.backward(feat, &dg.dreg);
                for ((a, b), c) in dfeat.data_mut().iter_mut().zip(d1.data()).zip(d2.data()) {
                    *a += *b + *c;
                }
            }
        }

        // encoder chain
        let mut d = dfeat;
        for i in (0..self.encoder.len()).rev() {
            relu_backward(&mut d, &cache.enc_acts[i]);
            d = self.encoder[i].backward(&cache.enc_inputs[i], &d);
        }
        Ok(())
    }

    /// Write a versioned weight file: magic, config JSON, f64 parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(WEIGHT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        f.write_all(&(cfg.len() as u64).to_le_bytes())?;
        f.write_all(&cfg)?;
        let params = self.params_flat();
        f.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            f.write_all(&p.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    /// Load a weight file written by [`Self::save`].
    pub fn load(path: &Path) -> Result<SegModel<S>> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a weight file",
                path.display()
            )));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let cfg_len = u64::from_le_bytes(len8) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        f.read_exact(&mut cfg_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes).map_err(|e| {
            Error::Checkpoint(format!("{}: bad embedded config: {e}", path.display()))
        })?;
        f.read_exact(&mut len8)?;
        let n = u64::from_le_bytes(len8) as usize;
        let mut params = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            f.read_exact(&mut buf)?;
            params.push(S::of(f64::from_le_bytes(buf)));
        }
        let mut model = SegModel::new(config)?;
        model.load_flat(&params)?;
        Ok(model)
    }
}

fn chw_to_probs<S: Scalar>(logits: &Chw<S>) -> Result<ProbMask<S>> {
    let mut g = Grid::filled(logits.h(), logits.w(), S::zero());
    for y in 0..logits.h() {
        for x in 0..logits.w() {
            let z = logits.get(0, y, x);
            if !z.is_finite() {
                return Err(Error::NonFiniteOutput("mask head"));
            }
            g.set(y, x, sigmoid(z));
        }
    }
    Ok(ProbMask::new(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::dice_loss;

    fn tiny_config(head: MaskHeadKind) -> ModelConfig {
        ModelConfig {
            channels: vec![4, 5],
            head_channels: 4,
            num_classes: 1,
            detector: true,
            mask_head: head,
            seed: 7,
        }
    }

    fn test_image(h: usize, w: usize) -> Chw<f64> {
        let mut img = Chw::zeros(3, h, w);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 101.0;
        }
        img
    }

    #[test]
    fn zero_final_layer_outputs_sigmoid_bias() {
        let mut model = SegModel::<f64>::new(tiny_config(MaskHeadKind::BoxConditioned)).unwrap();
        if let MaskHead::BoxCond { convs } = &mut model.head {
            convs[2].w.fill(0.0);
            convs[2].b[0] = 0.3;
        }
        let img = test_image(8, 8);
        let b = BBox::new(1.0, 1.0, 6.0, 6.0).unwrap();
        let fwd = model.forward_train(&img, &[b]).unwrap();
        let expect = sigmoid(0.3);
        for &v in fwd.masks[0].data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = SegModel::<f64>::new(tiny_config(MaskHeadKind::BoxConditioned)).unwrap();
        let img = test_image(8, 8);
        let b = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let a = model.forward_train(&img, &[b]).unwrap();
        let c = model.forward_train(&img, &[b]).unwrap();
        assert_eq!(a.masks[0], c.masks[0]);
    }

    #[test]
    fn param_count_is_config_function() {
        let a = SegModel::<f64>::new(tiny_config(MaskHeadKind::BoxConditioned)).unwrap();
        let b = SegModel::<f64>::new(ModelConfig {
            seed: 99,
            ..tiny_config(MaskHeadKind::BoxConditioned)
        })
        .unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params_flat(), b.params_flat());
    }

    #[test]
    fn rejects_empty_image() {
        let model = SegModel::<f64>::new(tiny_config(MaskHeadKind::BoxConditioned)).unwrap();
        let img = Chw::<f64>::zeros(3, 0, 4);
        assert!(model.forward_train(&img, &[]).is_err());
    }

    fn model_loss(
        model: &SegModel<f64>,
        img: &Chw<f64>,
        b: &BBox<f64>,
        target: &ProbMask<f64>,
    ) -> f64 {
        let fwd = model.forward_train(img, &[*b]).unwrap();
        let mask_term = dice_loss(&fwd.masks[0], target).unwrap().value;
        let det_term = match &fwd.det {
            Some(det) => detect::detection_loss(det, &[*b], &[0], img.h(), img.w()).value,
            None => 0.0,
        };
        mask_term + det_term
    }

    fn check_model_gradients(head: MaskHeadKind) {
        let mut model = SegModel::<f64>::new(tiny_config(head)).unwrap();
        let img = test_image(8, 8);
        let b = BBox::new(1.0, 2.0, 7.0, 7.0).unwrap();
        let target = crate::geometry::box_to_mask(&BBox::new(2.0, 2.0, 6.0, 6.0).unwrap(), 8, 8)
            .unwrap()
            .to_prob::<f64>();

        let fwd = model.forward_train(&img, &[b]).unwrap();
        let mask_loss = dice_loss(&fwd.masks[0], &target).unwrap();
        let det = fwd.det.as_ref().unwrap();
        let det_loss = detect::detection_loss(det, &[b], &[0], 8, 8);
        model.zero_grads();
        model
            .backward(&fwd, &[mask_loss.grad.clone()], Some(&det_loss.grads))
            .unwrap();
        let analytic = model.grads_flat();

        let params = model.params_flat();
        let h = 1e-6;
        let mut checked = 0;
        for idx in (0..params.len()).step_by(17) {
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let mut mp = model.clone();
            mp.load_flat(&plus).unwrap();
            let mut mm = model.clone();
            mm.load_flat(&minus).unwrap();
            let fd = (model_loss(&mp, &img, &b, &target) - model_loss(&mm, &img, &b, &target))
                / (2.0 * h);
            let denom = analytic[idx].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic[idx] - fd) / denom).abs() < 1e-3,
                "param {idx}: analytic {} vs fd {fd}",
                analytic[idx]
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn box_conditioned_gradients_match_finite_differences() {
        check_model_gradients(MaskHeadKind::BoxConditioned);
    }

    #[test]
    fn dynamic_filter_gradients_match_finite_differences() {
        check_model_gradients(MaskHeadKind::DynamicFilter);
    }

    #[test]
    fn two_parameter_probe_gradients() {
        // the smallest possible mask path: a single 1x1 conv (one weight,
        // one bias) through a sigmoid into dice loss
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(1, 1, 1, 1, &mut rng);
        let x = Chw::from_vec(1, 2, 2, vec![0.2, -0.4, 0.8, 0.1]);
        let target = ProbMask::new(Grid::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]));
        let loss_of = |c: &Conv2d<f64>| {
            let z = c.forward(&x);
            let p = chw_to_probs(&z).unwrap();
            dice_loss(&p, &target).unwrap().value
        };
        let z = conv.forward(&x);
        let p = chw_to_probs(&z).unwrap();
        let l = dice_loss(&p, &target).unwrap();
        let mut dz = Chw::zeros(1, 2, 2);
        for (i, (g, pv)) in l.grad.data().iter().zip(p.data()).enumerate() {
            dz.data_mut()[i] = *g * *pv * (1.0 - *pv);
        }
        conv.backward(&x, &dz);
        let h = 1e-6;
        let fd_w = {
            let mut cp = conv.clone();
            cp.w[0] += h;
            let mut cm = conv.clone();
            cm.w[0] -= h;
            (loss_of(&cp) - loss_of(&cm)) / (2.0 * h)
        };
        let fd_b = {
            let mut cp = conv.clone();
            cp.b[0] += h;
            let mut cm = conv.clone();
            cm.b[0] -= h;
            (loss_of(&cp) - loss_of(&cm)) / (2.0 * h)
        };
        assert!((conv.gw[0] - fd_w).abs() < 1e-6, "{} vs {fd_w}", conv.gw[0]);
        assert!((conv.gb[0] - fd_b).abs() < 1e-6, "{} vs {fd_b}", conv.gb[0]);
        assert_eq!(conv.param_count(), 2);
    }

    #[test]
    fn weight_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let model = SegModel::<f64>::new(tiny_config(MaskHeadKind::BoxConditioned)).unwrap();
        model.save(&path).unwrap();
        let back = SegModel::<f64>::load(&path).unwrap();
        assert_eq!(back.params_flat(), model.params_flat());
        assert_eq!(back.config(), model.config());
    }
}
