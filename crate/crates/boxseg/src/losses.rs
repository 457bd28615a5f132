//! Differentiable training objectives.
//!
//! Box-supervised losses (max-projection and color-pairwise), the pseudo-mask
//! pixel losses (dice, bce), neighborhood probability refinement, the
//! noise-reduced affinity loss, and the score-weighted aggregate with linear
//! warmup. Every loss returns its scalar value together with the analytic
//! gradient with respect to every predicted-probability cell; the gradients
//! are validated against central finite differences in the test suites.

use serde::{Deserialize, Serialize};

use crate::geometry::{BitMask, ProbMask};
use crate::grid::{Chw, Grid};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability clamp for logarithms.
pub const PROB_EPS: f64 = 1e-6;

/// A loss evaluation: scalar value plus gradient w.r.t. the predicted mask.
#[derive(Debug, Clone)]
pub struct LossValue<S> {
    pub value: S,
    pub grad: Grid<S>,
}

impl<S: Scalar> LossValue<S> {
    fn zero(h: usize, w: usize) -> Self {
        LossValue {
            value: S::zero(),
            grad: Grid::filled(h, w, S::zero()),
        }
    }
}

/// Neighborhood pattern for pairwise terms: a `(2r+1)²-1` ring around each
/// pixel (default 3×3 minus center), optionally dilated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairNeighborhood {
    pub radius: usize,
    pub dilation: usize,
}

impl Default for PairNeighborhood {
    fn default() -> Self {
        PairNeighborhood {
            radius: 1,
            dilation: 1,
        }
    }
}

impl PairNeighborhood {
    /// All offsets except the center; symmetric by construction.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let d = self.dilation as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy != 0 || dx != 0 {
                    out.push((dy * d, dx * d));
                }
            }
        }
        out
    }

    /// One offset per unordered pair (lexicographically positive half).
    pub fn half_offsets(&self) -> Vec<(isize, isize)> {
        self.offsets()
            .into_iter()
            .filter(|&(dy, dx)| dy > 0 || (dy == 0 && dx > 0))
            .collect()
    }
}

fn check_shape<S: Scalar, T>(
    name: &'static str,
    p: &ProbMask<S>,
    h: usize,
    w: usize,
    _witness: &T,
) -> Result<()> {
    if p.h() != h || p.w() != w {
        return Err(Error::ShapeMismatch(name, p.h(), p.w(), h, w));
    }
    Ok(())
}

/// Dice loss `1 - (2 Σ pg + eps) / (Σ p² + Σ g² + eps)` with `eps = 1`.
pub fn dice_loss<S: Scalar>(p: &ProbMask<S>, g: &ProbMask<S>) -> Result<LossValue<S>> {
    check_shape("dice", p, g.h(), g.w(), g)?;
    Ok(dice_on_slices(p.data(), g.data(), p.h(), p.w()))
}

fn dice_on_slices<S: Scalar>(p: &[S], g: &[S], h: usize, w: usize) -> LossValue<S> {
    let eps = S::of(DICE_SMOOTH);
    let mut dot = S::zero();
    let mut pp = S::zero();
    let mut gg = S::zero();
    for (a, b) in p.iter().zip(g) {
        dot += *a * *b;
        pp += *a * *a;
        gg += *b * *b;
    }
    let num = S::of(2.0) * dot + eps;
    let den = pp + gg + eps;
    let value = S::one() - num / den;
    let mut grad = Vec::with_capacity(p.len());
    for (a, b) in p.iter().zip(g) {
        // d/dp_i [ -num/den ] = -(2 g_i * den - num * 2 p_i) / den²
        let d = -(S::of(2.0) * *b * den - num * S::of(2.0) * *a) / (den * den);
        grad.push(d);
    }
    LossValue {
        value,
        grad: Grid::from_vec(h, w, grad),
    }
}

/// Mean binary cross entropy against a bit mask, probabilities clamped to
/// `[eps, 1-eps]`.
pub fn bce_loss<S: Scalar>(p: &ProbMask<S>, g: &BitMask) -> Result<LossValue<S>> {
    if p.h() != g.h() || p.w() != g.w() {
        return Err(Error::ShapeMismatch("bce", p.h(), p.w(), g.h(), g.w()));
    }
    let eps = S::of(PROB_EPS);
    let hi = S::one() - eps;
    let n = S::of((p.h() * p.w()) as f64);
    let mut value = S::zero();
    let mut grad = Vec::with_capacity(p.data().len());
    for (a, b) in p.data().iter().zip(g.data()) {
        let clamped = (*a).max(eps).min(hi);
        let inside = *a > eps && *a < hi;
        if *b == 1 {
            value -= clamped.ln();
            grad.push(if inside { -(clamped.recip()) / n } else { S::zero() });
        } else {
            value -= (S::one() - clamped).ln();
            grad.push(if inside {
                (S::one() - clamped).recip() / n
            } else {
                S::zero()
            });
        }
    }
    Ok(LossValue {
        value: value / n,
        grad: Grid::from_vec(p.h(), p.w(), grad),
    })
}

/// Max-projection loss: dice between per-column maxima of `p` and of the box
/// mask, plus the same per-row term.
pub fn projection_loss<S: Scalar>(p: &ProbMask<S>, box_mask: &BitMask) -> Result<LossValue<S>> {
    if p.h() != box_mask.h() || p.w() != box_mask.w() {
        return Err(Error::ShapeMismatch(
            "projection",
            p.h(),
            p.w(),
            box_mask.h(),
            box_mask.w(),
        ));
    }
    let (h, w) = (p.h(), p.w());

    // column maxima with argmax rows (first max wins ties)
    let mut col_max = vec![S::zero(); w];
    let mut col_arg = vec![0usize; w];
    for x in 0..w {
        let mut best = p.get(0, x);
        let mut arg = 0usize;
        for y in 1..h {
            let v = p.get(y, x);
            if v > best {
                best = v;
                arg = y;
            }
        }
        col_max[x] = best;
        col_arg[x] = arg;
    }
    let mut row_max = vec![S::zero(); h];
    let mut row_arg = vec![0usize; h];
    for y in 0..h {
        let mut best = p.get(y, 0);
        let mut arg = 0usize;
        for x in 1..w {
            let v = p.get(y, x);
            if v > best {
                best = v;
                arg = x;
            }
        }
        row_max[y] = best;
        row_arg[y] = arg;
    }

    let col_target: Vec<S> = (0..w)
        .map(|x| {
            let any = (0..h).any(|y| box_mask.get(y, x) == 1);
            if any {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect();
    let row_target: Vec<S> = (0..h)
        .map(|y| {
            let any = (0..w).any(|x| box_mask.get(y, x) == 1);
            if any {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect();

    let col_loss = dice_on_slices(&col_max, &col_target, 1, w);
    let row_loss = dice_on_slices(&row_max, &row_target, 1, h);

    let mut grad = Grid::filled(h, w, S::zero());
    for x in 0..w {
        let y = col_arg[x];
        grad.set(y, x, grad.get(y, x) + col_loss.grad.get(0, x));
    }
    for y in 0..h {
        let x = row_arg[y];
        grad.set(y, x, grad.get(y, x) + row_loss.grad.get(0, y));
    }
    Ok(LossValue {
        value: col_loss.value + row_loss.value,
        grad,
    })
}

/// Agreement likelihood `p_i p_j + (1-p_i)(1-p_j)` and its partials,
/// log-clamped below at `PROB_EPS`.
#[inline]
fn pair_log_of_sum<S: Scalar>(pi: S, pj: S) -> (S, S, S) {
    let mu = pi * pj + (S::one() - pi) * (S::one() - pj);
    let safe = mu.max(S::of(PROB_EPS));
    let term = -(safe.ln());
    let two = S::of(2.0);
    let d_i = -(two * pj - S::one()) / safe;
    let d_j = -(two * pi - S::one()) / safe;
    (term, d_i, d_j)
}

/// Literal sum-of-logs pair term `-(log(p_i p_j) + log((1-p_i)(1-p_j)))`.
#[inline]
fn pair_as_written<S: Scalar>(pi: S, pj: S) -> (S, S, S) {
    let eps = S::of(PROB_EPS);
    let hi = S::one() - eps;
    let ci = pi.max(eps).min(hi);
    let cj = pj.max(eps).min(hi);
    let term = -((ci * cj).ln()) - ((S::one() - ci) * (S::one() - cj)).ln();
    let d = |p: S, c: S| {
        if p > eps && p < hi {
            -(c.recip()) + (S::one() - c).recip()
        } else {
            S::zero()
        }
    };
    (term, d(pi, ci), d(pj, cj))
}

/// Which pair term the affinity loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AffinityForm {
    /// `-log(p_i p_j + (1-p_i)(1-p_j))` — the default agreement likelihood.
    #[default]
    LogOfSum,
    /// The literal sum of logs, kept for ablation; its per-pair minimum sits
    /// at `p_i = p_j = 0.5`.
    AsWritten,
}

/// Color-pairwise loss: neighboring pixel pairs inside `region` whose LAB
/// similarity clears `tau_color` should agree in predicted probability.
pub fn pairwise_color_loss<S: Scalar>(
    p: &ProbMask<S>,
    image: &Chw<S>,
    region: &BitMask,
    neigh: &PairNeighborhood,
    sigma_color: S,
    tau_color: S,
) -> Result<LossValue<S>> {
    if image.c() != 3 {
        return Err(Error::Config("pairwise color loss needs an RGB image".into()));
    }
    if p.h() != image.h() || p.w() != image.w() {
        return Err(Error::ShapeMismatch(
            "pairwise color (image)",
            p.h(),
            p.w(),
            image.h(),
            image.w(),
        ));
    }
    if p.h() != region.h() || p.w() != region.w() {
        return Err(Error::ShapeMismatch(
            "pairwise color (region)",
            p.h(),
            p.w(),
            region.h(),
            region.w(),
        ));
    }
    let lab = rgb_to_lab(image);
    Ok(pairwise_color_loss_with_lab(
        p,
        &lab,
        region,
        neigh,
        sigma_color,
        tau_color,
    ))
}

/// [`pairwise_color_loss`] with a precomputed LAB image, so callers scoring
/// several instances against one image convert it once.
pub fn pairwise_color_loss_with_lab<S: Scalar>(
    p: &ProbMask<S>,
    lab: &Chw<S>,
    region: &BitMask,
    neigh: &PairNeighborhood,
    sigma_color: S,
    tau_color: S,
) -> LossValue<S> {
    let (h, w) = (p.h(), p.w());
    let offsets = neigh.half_offsets();

    let mut total = S::zero();
    let mut count = 0usize;
    let mut grad = Grid::filled(h, w, S::zero());
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) == 0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if region.get(ny, nx) == 0 {
                    continue;
                }
                let d0 = lab.get(0, y, x) - lab.get(0, ny, nx);
                let d1 = lab.get(1, y, x) - lab.get(1, ny, nx);
                let d2 = lab.get(2, y, x) - lab.get(2, ny, nx);
                let dist = (d0 * d0 + d1 * d1 + d2 * d2).sqrt();
                let sim = (-dist / sigma_color).exp();
                if sim < tau_color {
                    continue;
                }
                let (term, di, dj) = pair_log_of_sum(p.get(y, x), p.get(ny, nx));
                total += term;
                count += 1;
                grad.set(y, x, grad.get(y, x) + di);
                grad.set(ny, nx, grad.get(ny, nx) + dj);
            }
        }
    }
    if count == 0 {
        return LossValue::zero(h, w);
    }
    let inv = S::of(count as f64).recip();
    for v in grad.data_mut() {
        *v *= inv;
    }
    LossValue {
        value: total * inv,
        grad,
    }
}

/// Refined probability: per-pixel average of self and the neighborhood mean,
/// in-bounds neighbors only.
pub fn refine_probability<S: Scalar>(g: &ProbMask<S>, neigh: &PairNeighborhood) -> ProbMask<S> {
    let (h, w) = (g.h(), g.w());
    let offsets = neigh.offsets();
    let mut out = Grid::filled(h, w, S::zero());
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::zero();
            let mut n = 0usize;
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                acc += g.get(ny as usize, nx as usize);
                n += 1;
            }
            let v = if n == 0 {
                g.get(y, x)
            } else {
                S::of(0.5) * (g.get(y, x) + acc / S::of(n as f64))
            };
            out.set(y, x, v);
        }
    }
    ProbMask::new(out)
}

/// Affinity between two refined probabilities: `a·b + (1-a)(1-b)`.
pub fn pixel_affinity<S: Scalar>(a: S, b: S) -> S {
    a * b + (S::one() - a) * (S::one() - b)
}

/// Noise-reduced affinity loss.
///
/// The target `g` is refined, pair gates require `affinity > tau_a`
/// (strictly), each gated pixel averages its pair terms, and the loss is the
/// mean over pixels that have at least one gated pair (0 when none do).
pub fn affinity_loss<S: Scalar>(
    p: &ProbMask<S>,
    g: &ProbMask<S>,
    neigh: &PairNeighborhood,
    tau_a: S,
    form: AffinityForm,
) -> Result<LossValue<S>> {
    if p.h() != g.h() || p.w() != g.w() {
        return Err(Error::ShapeMismatch("affinity", p.h(), p.w(), g.h(), g.w()));
    }
    let (h, w) = (p.h(), p.w());
    let refined = refine_probability(g, neigh);
    let offsets = neigh.offsets();

    // gated neighbor count per pixel
    let mut gate_count = Grid::filled(h, w, 0u32);
    for y in 0..h {
        for x in 0..w {
            let mut n = 0u32;
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let mu = pixel_affinity(refined.get(y, x), refined.get(ny as usize, nx as usize));
                if mu > tau_a {
                    n += 1;
                }
            }
            gate_count.set(y, x, n);
        }
    }
    let active = gate_count.data().iter().filter(|&&n| n > 0).count();
    if active == 0 {
        return Ok(LossValue::zero(h, w));
    }
    let inv_active = S::of(active as f64).recip();

    let mut total = S::zero();
    let mut grad = Grid::filled(h, w, S::zero());
    for y in 0..h {
        for x in 0..w {
            let n_i = gate_count.get(y, x);
            if n_i == 0 {
                continue;
            }
            let inv_n = S::of(n_i as f64).recip();
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let mu = pixel_affinity(refined.get(y, x), refined.get(ny, nx));
                if mu <= tau_a {
                    continue;
                }
                let (term, di, dj) = match form {
                    AffinityForm::LogOfSum => pair_log_of_sum(p.get(y, x), p.get(ny, nx)),
                    AffinityForm::AsWritten => pair_as_written(p.get(y, x), p.get(ny, nx)),
                };
                let scale = inv_active * inv_n;
                total += term * scale;
                grad.set(y, x, grad.get(y, x) + di * scale);
                grad.set(ny, nx, grad.get(ny, nx) + dj * scale);
            }
        }
    }
    Ok(LossValue { value: total, grad })
}

/// Pixel-loss flavor for pseudo-mask supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelLoss {
    #[default]
    Dice,
    Bce,
}

/// One assigned pseudo instance ready for the aggregate loss: the student's
/// predicted mask, the (probability-valued) pseudo target, and its quality
/// weight.
#[derive(Debug, Clone)]
pub struct PseudoInstance<S> {
    pub pred: ProbMask<S>,
    pub target: ProbMask<S>,
    pub score: S,
}

/// Knobs for the aggregate pseudo-mask loss.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLossConfig<S> {
    pub pixel: PixelLoss,
    pub affinity_form: AffinityForm,
    pub lambda_pixel: S,
    pub lambda_affinity: S,
    pub tau_a: S,
    pub tau_m: S,
    pub neigh: PairNeighborhood,
}

/// Aggregate pseudo-mask loss and per-instance gradients.
#[derive(Debug, Clone)]
pub struct PseudoMaskLoss<S> {
    pub value: S,
    pub grads: Vec<Grid<S>>,
    pub mean_pixel: S,
    pub mean_affinity: S,
}

/// Score-weighted mean of `lambda_p * L_pixel + lambda_a * L_affinity` over
/// assigned instances; 0 when there are none.
///
/// The pixel term compares against the target binarized at `tau_m`; the
/// affinity term consumes the probability-valued target.
pub fn pseudo_mask_loss<S: Scalar>(
    instances: &[PseudoInstance<S>],
    cfg: &PseudoLossConfig<S>,
) -> Result<PseudoMaskLoss<S>> {
    let n = instances.len();
    if n == 0 {
        return Ok(PseudoMaskLoss {
            value: S::zero(),
            grads: Vec::new(),
            mean_pixel: S::zero(),
            mean_affinity: S::zero(),
        });
    }
    let inv_n = S::of(n as f64).recip();
    let mut value = S::zero();
    let mut mean_pixel = S::zero();
    let mut mean_affinity = S::zero();
    let mut grads = Vec::with_capacity(n);
    for inst in instances {
        if inst.score < S::zero() || inst.score > S::one() {
            return Err(Error::Config("pseudo-instance score must lie in [0, 1]".into()));
        }
        let target_bits = inst.target.binarize(cfg.tau_m);
        let pixel = match cfg.pixel {
            PixelLoss::Dice => dice_loss(&inst.pred, &target_bits.to_prob())?,
            PixelLoss::Bce => bce_loss(&inst.pred, &target_bits)?,
        };
        let affinity = affinity_loss(
            &inst.pred,
            &inst.target,
            &cfg.neigh,
            cfg.tau_a,
            cfg.affinity_form,
        )?;
        let weight = inst.score * inv_n;
        value += weight * (cfg.lambda_pixel * pixel.value + cfg.lambda_affinity * affinity.value);
        mean_pixel += pixel.value * inv_n;
        mean_affinity += affinity.value * inv_n;
        let mut grad = Grid::filled(inst.pred.h(), inst.pred.w(), S::zero());
        for ((out, gp), ga) in grad
            .data_mut()
            .iter_mut()
            .zip(pixel.grad.data())
            .zip(affinity.grad.data())
        {
            *out = weight * (cfg.lambda_pixel * *gp + cfg.lambda_affinity * *ga);
        }
        grads.push(grad);
    }
    Ok(PseudoMaskLoss {
        value,
        grads,
        mean_pixel,
        mean_affinity,
    })
}

/// Sentinel for a warmup that never completes (disables the pseudo loss).
pub const WARMUP_NEVER: u64 = u64::MAX;

/// Linear warmup coefficient `min(iteration / warmup_iters, 1)`.
///
/// `warmup_iters = 0` means no warmup (always 1); [`WARMUP_NEVER`] pins the
/// coefficient at exactly 0.
pub fn warmup_weight(iteration: u64, warmup_iters: u64) -> f64 {
    if warmup_iters == 0 {
        1.0
    } else if warmup_iters == WARMUP_NEVER {
        0.0
    } else {
        (iteration as f64 / warmup_iters as f64).min(1.0)
    }
}

/// sRGB (values in [0,1]) to CIE LAB under D65.
pub fn rgb_to_lab<S: Scalar>(image: &Chw<S>) -> Chw<S> {
    assert_eq!(image.c(), 3, "expected an RGB image");
    let (h, w) = (image.h(), image.w());
    let mut out = Chw::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let r = srgb_to_linear(image.get(0, y, x).as_f64());
            let g = srgb_to_linear(image.get(1, y, x).as_f64());
            let b = srgb_to_linear(image.get(2, y, x).as_f64());
            // sRGB D65 matrix
            let xn = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
            let yn = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
            let zn = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
            let fx = lab_f(xn);
            let fy = lab_f(yn);
            let fz = lab_f(zn);
            out.set(0, y, x, S::of(116.0 * fy - 16.0));
            out.set(1, y, x, S::of(500.0 * (fx - fy)));
            out.set(2, y, x, S::of(200.0 * (fy - fz)));
        }
    }
    out
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}
