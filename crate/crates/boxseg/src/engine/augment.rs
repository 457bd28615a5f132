//! Student-image augmentation: photometric perturbations followed by the
//! geometric resize+flip, with the geometric part returned as a
//! [`GeomTransform`] so teacher-frame pseudo masks can be warped into the
//! student frame through the exact same resampling path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, GeomTransform, ProbMask};
use crate::grid::Chw;
use crate::scalar::Scalar;
use crate::Result;

/// Augmentation strength preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugLevel {
    None,
    #[default]
    Weak,
    Strong,
}

/// Fully resolved augmentation recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub level: AugLevel,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl AugmentationPolicy {
    /// Identity: no photometric and no geometric perturbation.
    pub fn none() -> Self {
        AugmentationPolicy {
            level: AugLevel::None,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_kernel: 3,
            blur_sigma: (0.1, 2.0),
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
        }
    }

    /// Weak: color jitter p=0.2 with (0.2, 0.2, 0.2, 0.1), plus multi-scale
    /// and flip.
    pub fn weak(scale_min: f64, scale_max: f64, flip_prob: f64) -> Self {
        AugmentationPolicy {
            level: AugLevel::Weak,
            jitter_prob: 0.2,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_kernel: 3,
            blur_sigma: (0.1, 2.0),
            scale_min,
            scale_max,
            flip_prob,
        }
    }

    /// Strong: jitter p=0.8 with (0.4, 0.4, 0.4, 0.1), grayscale p=0.2,
    /// Gaussian blur p=0.5 with kernel 3 and sigma in (0.1, 2.0).
    pub fn strong(scale_min: f64, scale_max: f64, flip_prob: f64) -> Self {
        AugmentationPolicy {
            level: AugLevel::Strong,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_kernel: 3,
            blur_sigma: (0.1, 2.0),
            scale_min,
            scale_max,
            flip_prob,
        }
    }

    pub fn from_level(level: AugLevel, scale_min: f64, scale_max: f64, flip_prob: f64) -> Self {
        match level {
            AugLevel::None => AugmentationPolicy::none(),
            AugLevel::Weak => AugmentationPolicy::weak(scale_min, scale_max, flip_prob),
            AugLevel::Strong => AugmentationPolicy::strong(scale_min, scale_max, flip_prob),
        }
    }
}

fn luma<S: Scalar>(r: S, g: S, b: S) -> S {
    S::of(0.299) * r + S::of(0.587) * g + S::of(0.114) * b
}

fn clamp01<S: Scalar>(v: S) -> S {
    v.max(S::zero()).min(S::one())
}

fn apply_brightness<S: Scalar>(img: &mut Chw<S>, factor: f64) {
    let f = S::of(factor);
    for v in img.data_mut() {
        *v = clamp01(*v * f);
    }
}

fn apply_contrast<S: Scalar>(img: &mut Chw<S>, factor: f64) {
    let n = (img.h() * img.w()) as f64;
    let mut mean = S::zero();
    for y in 0..img.h() {
        for x in 0..img.w() {
            mean += luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
        }
    }
    let mean = mean / S::of(n);
    let f = S::of(factor);
    for v in img.data_mut() {
        *v = clamp01(mean + (*v - mean) * f);
    }
}

fn apply_saturation<S: Scalar>(img: &mut Chw<S>, factor: f64) {
    let f = S::of(factor);
    for y in 0..img.h() {
        for x in 0..img.w() {
            let l = luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                let v = img.get(c, y, x);
                img.set(c, y, x, clamp01(l + (v - l) * f));
            }
        }
    }
}

fn apply_hue<S: Scalar>(img: &mut Chw<S>, shift: f64) {
    for y in 0..img.h() {
        for x in 0..img.w() {
            let r = img.get(0, y, x).as_f64();
            let g = img.get(1, y, x).as_f64();
            let b = img.get(2, y, x).as_f64();
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let h = (h + shift).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            img.set(0, y, x, S::of(r.clamp(0.0, 1.0)));
            img.set(1, y, x, S::of(g.clamp(0.0, 1.0)));
            img.set(2, y, x, S::of(b.clamp(0.0, 1.0)));
        }
    }
}

fn apply_grayscale<S: Scalar>(img: &mut Chw<S>) {
    for y in 0..img.h() {
        for x in 0..img.w() {
            let l = luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                img.set(c, y, x, l);
            }
        }
    }
}

fn apply_blur<S: Scalar>(img: &mut Chw<S>, sigma: f64) {
    // separable 3-tap gaussian with clamped borders
    let k1 = (-0.5 / (sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * k1;
    let taps = [S::of(k1 / norm), S::of(1.0 / norm), S::of(k1 / norm)];
    let (h, w) = (img.h(), img.w());
    for c in 0..3 {
        let src = img.channel(c).to_vec();
        let mut tmp = vec![S::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                tmp[y * w + x] = taps[0] * src[y * w + xm]
                    + taps[1] * src[y * w + x]
                    + taps[2] * src[y * w + xp];
            }
        }
        let dst = img.channel_mut(c);
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                dst[y * w + x] =
                    taps[0] * tmp[ym * w + x] + taps[1] * tmp[y * w + x] + taps[2] * tmp[yp * w + x];
            }
        }
    }
}

/// Warp an RGB image through a [`GeomTransform`] using the exact resampling
/// path pseudo masks take, so the two stay aligned.
pub fn transform_image<S: Scalar>(image: &Chw<S>, t: &GeomTransform) -> Result<Chw<S>> {
    let mut out = Chw::zeros(3, t.out_h, t.out_w);
    for c in 0..3 {
        let plane = ProbMask::new(image.channel_grid(c)).transform(t)?;
        out.channel_mut(c).copy_from_slice(plane.data());
    }
    Ok(out)
}

/// Apply the policy: photometric ops first (brightness, contrast,
/// saturation, hue, grayscale, blur — in that fixed order), then the
/// geometric resize+flip. Returns the transform and the warped boxes.
pub fn augment<S: Scalar>(
    image: &Chw<S>,
    boxes: &[BBox<S>],
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Chw<S>, GeomTransform, Vec<BBox<S>>)> {
    let mut img = image.clone();

    if policy.jitter_prob > 0.0 && rng.gen_bool(policy.jitter_prob) {
        let b = rng.gen_range(1.0 - policy.brightness..=1.0 + policy.brightness);
        let c = rng.gen_range(1.0 - policy.contrast..=1.0 + policy.contrast);
        let s = rng.gen_range(1.0 - policy.saturation..=1.0 + policy.saturation);
        let h = rng.gen_range(-policy.hue..=policy.hue);
        apply_brightness(&mut img, b);
        apply_contrast(&mut img, c);
        apply_saturation(&mut img, s);
        apply_hue(&mut img, h);
    }
    if policy.grayscale_prob > 0.0 && rng.gen_bool(policy.grayscale_prob) {
        apply_grayscale(&mut img);
    }
    if policy.blur_prob > 0.0 && rng.gen_bool(policy.blur_prob) {
        let sigma = rng.gen_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        apply_blur(&mut img, sigma);
    }

    let scale = if policy.scale_max > policy.scale_min {
        rng.gen_range(policy.scale_min..=policy.scale_max)
    } else {
        policy.scale_min
    };
    let hflip = policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob);
    let out_h = ((image.h() as f64 * scale).round() as usize).max(1);
    let out_w = ((image.w() as f64 * scale).round() as usize).max(1);
    let t = GeomTransform {
        hflip,
        in_h: image.h(),
        in_w: image.w(),
        out_h,
        out_w,
    };

    let img = if t == GeomTransform::identity(image.h(), image.w()) {
        img
    } else {
        transform_image(&img, &t)?
    };
    let boxes = boxes.iter().map(|b| t.apply_box(b)).collect();
    Ok((img, t, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image() -> Chw<f64> {
        let mut img = Chw::zeros(3, 8, 8);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 97) as f64 / 97.0;
        }
        img
    }

    #[test]
    fn none_policy_is_identity() {
        let img = test_image();
        let boxes = vec![BBox::new(1.0, 1.0, 5.0, 6.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, t, b) = augment(&img, &boxes, &AugmentationPolicy::none(), &mut rng).unwrap();
        assert_eq!(out, img);
        assert_eq!(t, GeomTransform::identity(8, 8));
        assert_eq!(b[0], boxes[0]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let img = test_image();
        let boxes = vec![BBox::new(0.0, 0.0, 8.0, 8.0).unwrap()];
        let policy = AugmentationPolicy::strong(0.8, 1.0, 0.5);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&img, &boxes, &policy, &mut rng).unwrap()
        };
        let (a_img, a_t, a_b) = run(42);
        let (b_img, b_t, b_b) = run(42);
        assert_eq!(a_img, b_img);
        assert_eq!(a_t, b_t);
        assert_eq!(a_b, b_b);
        let (c_img, _, _) = run(43);
        assert_ne!(a_img, c_img);
    }

    #[test]
    fn flip_box_formula() {
        // a flipped box in width W maps (x1, y1, x2, y2) to (W-x2, y1, W-x1, y2)
        let t = GeomTransform {
            hflip: true,
            in_h: 8,
            in_w: 8,
            out_h: 8,
            out_w: 8,
        };
        let b = t.apply_box(&BBox::new(1.0, 2.0, 3.0, 7.0).unwrap());
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (5.0, 2.0, 7.0, 7.0));
    }

    #[test]
    fn presets_match_the_stated_recipes() {
        let w = AugmentationPolicy::weak(0.8, 1.0, 0.5);
        assert_eq!(w.jitter_prob, 0.2);
        assert_eq!((w.brightness, w.contrast, w.saturation, w.hue), (0.2, 0.2, 0.2, 0.1));
        assert_eq!(w.grayscale_prob, 0.0);
        assert_eq!(w.blur_prob, 0.0);

        let s = AugmentationPolicy::strong(0.8, 1.0, 0.5);
        assert_eq!(s.jitter_prob, 0.8);
        assert_eq!((s.brightness, s.contrast, s.saturation, s.hue), (0.4, 0.4, 0.4, 0.1));
        assert_eq!(s.grayscale_prob, 0.2);
        assert_eq!(s.blur_prob, 0.5);
        assert_eq!(s.blur_kernel, 3);
        assert_eq!(s.blur_sigma, (0.1, 2.0));
    }

    #[test]
    fn warped_mask_matches_directly_augmented_mask_for_flip() {
        // flip-only transform: warping a mask equals augmenting it directly
        let mut g = crate::grid::Grid::filled(8, 8, 0.0f64);
        g.set(2, 1, 1.0);
        g.set(5, 6, 1.0);
        let mask = ProbMask::new(g);
        let t = GeomTransform {
            hflip: true,
            in_h: 8,
            in_w: 8,
            out_h: 8,
            out_w: 8,
        };
        let warped = mask.transform(&t).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(warped.get(y, x), mask.get(y, 7 - x));
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
