//! Minimal NN building blocks with explicit forward/backward passes.
//!
//! Everything is direct (no autodiff tape): each layer stores nothing and
//! the caller keeps the activations it needs for the backward pass. The
//! shift-and-accumulate convolution order keeps inner loops contiguous.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grid::Chw;
use crate::scalar::Scalar;

/// 2D convolution with square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weights `[out_c][in_c][k][k]`, flattened.
    pub w: Vec<S>,
    pub b: Vec<S>,
    pub gw: Vec<S>,
    pub gb: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = out_c * in_c * k * k;
        let w = (0..n).map(|_| S::of(gauss(rng) * std)).collect();
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            w,
            b: vec![S::zero(); out_c],
            gw: vec![S::zero(); n],
            gb: vec![S::zero(); out_c],
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    #[inline]
    fn wt(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> S {
        self.w[((oc * self.in_c + ic) * self.k + ky) * self.k + kx]
    }

    pub fn forward(&self, x: &Chw<S>) -> Chw<S> {
        assert_eq!(x.c(), self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h(), x.w());
        let mut out = Chw::zeros(self.out_c, oh, ow);
        for oc in 0..self.out_c {
            out.channel_mut(oc).fill(self.b[oc]);
        }
        let (h, w) = (x.h(), x.w());
        for oc in 0..self.out_c {
            for ic in 0..self.in_c {
                let x_ch = x.channel(ic).to_vec();
                let out_ch = out.channel_mut(oc);
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = self.wt(oc, ic, ky, kx);
                        if wv == S::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                            let o_row = &mut out_ch[oy * ow..(oy + 1) * ow];
                            for (ox, o) in o_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, x: &Chw<S>, dy: &Chw<S>) -> Chw<S> {
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (dy.h(), dy.w());
        let mut dx = Chw::zeros(self.in_c, h, w);
        for oc in 0..self.out_c {
            let dy_ch = dy.channel(oc);
            self.gb[oc] += dy_ch.iter().copied().sum();
            for ic in 0..self.in_c {
                let x_ch = x.channel(ic);
                let dx_ch = dx.channel_mut(ic);
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let widx = ((oc * self.in_c + ic) * self.k + ky) * self.k + kx;
                        let wv = self.w[widx];
                        let mut gw = S::zero();
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = iy as usize * w;
                            let dy_row = &dy_ch[oy * ow..(oy + 1) * ow];
                            for (ox, &d) in dy_row.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    let xi = base + ix as usize;
                                    gw += x_ch[xi] * d;
                                    dx_ch[xi] += wv * d;
                                }
                            }
                        }
                        self.gw[widx] += gw;
                    }
                }
            }
        }
        dx
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(S::zero());
        self.gb.fill(S::zero());
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Fully-connected layer (used by the dynamic-filter controller).
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub in_n: usize,
    pub out_n: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
    pub gw: Vec<S>,
    pub gb: Vec<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_n: usize, out_n: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_n as f64).sqrt();
        let w = (0..in_n * out_n).map(|_| S::of(gauss(rng) * std)).collect();
        Linear {
            in_n,
            out_n,
            w,
            b: vec![S::zero(); out_n],
            gw: vec![S::zero(); in_n * out_n],
            gb: vec![S::zero(); out_n],
        }
    }

    pub fn forward(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.in_n);
        (0..self.out_n)
            .map(|o| {
                let row = &self.w[o * self.in_n..(o + 1) * self.in_n];
                self.b[o] + row.iter().zip(x).map(|(wv, xv)| *wv * *xv).sum::<S>()
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[S], dy: &[S]) -> Vec<S> {
        let mut dx = vec![S::zero(); self.in_n];
        for o in 0..self.out_n {
            self.gb[o] += dy[o];
            let row = &self.w[o * self.in_n..(o + 1) * self.in_n];
            let grow = &mut self.gw[o * self.in_n..(o + 1) * self.in_n];
            for i in 0..self.in_n {
                grow[i] += x[i] * dy[o];
                dx[i] += row[i] * dy[o];
            }
        }
        dx
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(S::zero());
        self.gb.fill(S::zero());
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// In-place ReLU; returns the activated buffer.
pub fn relu<S: Scalar>(mut x: Chw<S>) -> Chw<S> {
    for v in x.data_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    x
}

/// ReLU backward: zero the gradient where the activated output was zero.
pub fn relu_backward<S: Scalar>(dy: &mut Chw<S>, activated: &Chw<S>) {
    for (d, a) in dy.data_mut().iter_mut().zip(activated.data()) {
        if *a <= S::zero() {
            *d = S::zero();
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    (S::one() + (-z).exp()).recip()
}

/// Interpolation source pair for one output index (half-pixel centers).
#[inline]
fn lerp_coords(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let t = src - floor;
    let i0 = (floor.max(0.0) as usize).min(in_n - 1);
    let i1 = ((floor + 1.0).max(0.0) as usize).min(in_n - 1);
    (i0, i1, t)
}

/// Bilinear resize of a single-channel map to an arbitrary target size.
pub fn resize_bilinear<S: Scalar>(src: &Chw<S>, out_h: usize, out_w: usize) -> Chw<S> {
    let mut out = Chw::zeros(src.c(), out_h, out_w);
    for c in 0..src.c() {
        for oy in 0..out_h {
            let (y0, y1, ty) = lerp_coords(oy, out_h, src.h());
            let ty = S::of(ty);
            for ox in 0..out_w {
                let (x0, x1, tx) = lerp_coords(ox, out_w, src.w());
                let tx = S::of(tx);
                let one = S::one();
                let v = (one - ty) * ((one - tx) * src.get(c, y0, x0) + tx * src.get(c, y0, x1))
                    + ty * ((one - tx) * src.get(c, y1, x0) + tx * src.get(c, y1, x1));
                out.set(c, oy, ox, v);
            }
        }
    }
    out
}

/// Transpose of [`resize_bilinear`]: scatter output gradients back to the
/// source grid.
pub fn resize_bilinear_backward<S: Scalar>(
    dy: &Chw<S>,
    src_h: usize,
    src_w: usize,
) -> Chw<S> {
    let mut dx = Chw::zeros(dy.c(), src_h, src_w);
    for c in 0..dy.c() {
        for oy in 0..dy.h() {
            let (y0, y1, ty) = lerp_coords(oy, dy.h(), src_h);
            for ox in 0..dy.w() {
                let (x0, x1, tx) = lerp_coords(ox, dy.w(), src_w);
                let d = dy.get(c, oy, ox);
                let (ty_s, tx_s) = (S::of(ty), S::of(tx));
                let one = S::one();
                dx.set(c, y0, x0, dx.get(c, y0, x0) + (one - ty_s) * (one - tx_s) * d);
                dx.set(c, y0, x1, dx.get(c, y0, x1) + (one - ty_s) * tx_s * d);
                dx.set(c, y1, x0, dx.get(c, y1, x0) + ty_s * (one - tx_s) * d);
                dx.set(c, y1, x1, dx.get(c, y1, x1) + ty_s * tx_s * d);
            }
        }
    }
    dx
}

/// Standard normal sample via Box-Muller (keeps rand_distr out of the tree).
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1234)
    }

    #[test]
    fn conv_identity_kernel() {
        let mut c = Conv2d::<f64>::new(1, 1, 3, 1, &mut rng());
        c.w.fill(0.0);
        c.w[4] = 1.0; // center tap
        c.b[0] = 0.0;
        let x = Chw::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = c.forward(&x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_stride_two_shapes() {
        let c = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng());
        let x = Chw::zeros(2, 9, 11);
        let y = c.forward(&x);
        assert_eq!((y.c(), y.h(), y.w()), (3, 5, 6));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rng();
        let mut c = Conv2d::<f64>::new(2, 2, 3, 1, &mut rng);
        let x = Chw::from_vec(
            2,
            4,
            4,
            (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        // loss = sum of squared outputs / 2; dL/dy = y
        let y = c.forward(&x);
        let dx = c.backward(&x, &y.clone());
        let f = |cv: &Conv2d<f64>, xv: &Chw<f64>| -> f64 {
            cv.forward(xv).data().iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let h = 1e-6;
        // a few weight entries
        for idx in [0usize, 5, 17, 35] {
            let mut cp = c.clone();
            cp.w[idx] += h;
            let mut cm = c.clone();
            cm.w[idx] -= h;
            let fd = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
            assert!(
                (c.gw[idx] - fd).abs() / fd.abs().max(1e-6) < 1e-4,
                "w[{idx}]: {} vs {}",
                c.gw[idx],
                fd
            );
        }
        // a few input entries
        for idx in [0usize, 7, 21, 31] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (f(&c, &xp) - f(&c, &xm)) / (2.0 * h);
            assert!(
                (dx.data()[idx] - fd).abs() / fd.abs().max(1e-6) < 1e-4,
                "x[{idx}]: {} vs {}",
                dx.data()[idx],
                fd
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng();
        let mut l = Linear::<f64>::new(3, 2, &mut r);
        let x = vec![0.3, -0.7, 1.1];
        let y = l.forward(&x);
        let dx = l.backward(&x, &y.clone());
        let f = |lv: &Linear<f64>, xv: &[f64]| -> f64 {
            lv.forward(xv).iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let h = 1e-6;
        for idx in 0..6 {
            let mut lp = l.clone();
            lp.w[idx] += h;
            let mut lm = l.clone();
            lm.w[idx] -= h;
            let fd = (f(&lp, &x) - f(&lm, &x)) / (2.0 * h);
            assert!((l.gw[idx] - fd).abs() < 1e-6);
        }
        for idx in 0..3 {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&l, &xp) - f(&l, &xm)) / (2.0 * h);
            assert!((dx[idx] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_backward_is_transpose() {
        // <resize(x), y> == <x, resize_backward(y)> for all x, y
        let mut r = rng();
        let x = Chw::from_vec(1, 3, 3, (0..9).map(|_| r.gen_range(0.0..1.0)).collect());
        let y = Chw::from_vec(1, 5, 7, (0..35).map(|_| r.gen_range(0.0..1.0)).collect());
        let rx = resize_bilinear(&x, 5, 7);
        let bty = resize_bilinear_backward(&y, 3, 3);
        let lhs: f64 = rx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(bty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn relu_roundtrip() {
        let x = Chw::from_vec(1, 1, 4, vec![-1.0, 0.0, 2.0, -0.5]);
        let y = relu(x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        let mut dy = Chw::from_vec(1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        relu_backward(&mut dy, &y);
        assert_eq!(dy.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
