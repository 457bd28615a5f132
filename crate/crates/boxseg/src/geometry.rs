//! Boxes, masks, and the geometric transforms shared by every other module.
//!
//! Boxes are half-open pixel intervals: a cell belongs to a box iff its
//! center falls inside `[x1, x2) × [y1, y2)`, so `area = (x2-x1)*(y2-y1)`
//! exactly. Probability masks hold values in `[0, 1]`; bit masks hold
//! exactly 0 or 1.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Axis-aligned box in pixel coordinates, half-open on the right/bottom edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<S> {
    pub x1: S,
    pub y1: S,
    pub x2: S,
    pub y2: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x1: S, y1: S, x2: S, y2: S) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2)
            || !x1.is_finite()
            || !y1.is_finite()
            || !x2.is_finite()
            || !y2.is_finite()
        {
            return Err(Error::InvalidBox(
                x1.as_f64(),
                y1.as_f64(),
                x2.as_f64(),
                y2.as_f64(),
            ));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> S {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> S {
        self.x2 - self.x1
    }

    pub fn height(&self) -> S {
        self.y2 - self.y1
    }

    /// Whether a cell center `(x + 0.5, y + 0.5)` lies inside the box.
    #[inline]
    pub fn contains_cell(&self, y: usize, x: usize) -> bool {
        let cx = S::of(x as f64 + 0.5);
        let cy = S::of(y as f64 + 0.5);
        cx >= self.x1 && cx < self.x2 && cy >= self.y1 && cy < self.y2
    }

    pub fn cast<T: Scalar>(&self) -> BBox<T> {
        BBox {
            x1: T::of(self.x1.as_f64()),
            y1: T::of(self.y1.as_f64()),
            x2: T::of(self.x2.as_f64()),
            y2: T::of(self.y2.as_f64()),
        }
    }
}

/// Intersection area / union area; 0 when the union is empty.
pub fn compute_iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(S::zero());
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= S::zero() {
        S::zero()
    } else {
        inter / union
    }
}

/// H×W grid of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask<S> {
    grid: Grid<S>,
}

impl<S: Scalar> ProbMask<S> {
    /// Wrap a grid, checking the `[0, 1]` range invariant.
    pub fn new(grid: Grid<S>) -> Self {
        assert!(
            grid.data().iter().all(|v| *v >= S::zero() && *v <= S::one()),
            "probability mask values must lie in [0, 1]"
        );
        ProbMask { grid }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ProbMask {
            grid: Grid::filled(h, w, S::zero()),
        }
    }

    pub fn h(&self) -> usize {
        self.grid.h()
    }

    pub fn w(&self) -> usize {
        self.grid.w()
    }

    pub fn grid(&self) -> &Grid<S> {
        &self.grid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> S {
        self.grid.get(y, x)
    }

    pub fn data(&self) -> &[S] {
        self.grid.data()
    }

    /// Cell is 1 iff its probability strictly exceeds the threshold.
    pub fn binarize(&self, tau_m: S) -> BitMask {
        BitMask {
            grid: self.grid.map(|v| u8::from(v > tau_m)),
        }
    }

    /// Zero every cell whose center falls outside the box.
    pub fn rectify(&self, b: &BBox<S>) -> ProbMask<S> {
        let mut grid = self.grid.clone();
        for y in 0..grid.h() {
            for x in 0..grid.w() {
                if !b.contains_cell(y, x) {
                    grid.set(y, x, S::zero());
                }
            }
        }
        ProbMask { grid }
    }

    /// Flip, then bilinearly resample into the transform's output frame.
    pub fn transform(&self, t: &GeomTransform) -> Result<ProbMask<S>> {
        if t.out_h == 0 || t.out_w == 0 {
            return Err(Error::EmptyTransform);
        }
        let src = &self.grid;
        let mut out = Grid::filled(t.out_h, t.out_w, S::zero());
        for oy in 0..t.out_h {
            let (y0, y1, ty) = bilinear_coords(oy, t.out_h, src.h());
            for ox in 0..t.out_w {
                let (x0, x1, tx) = bilinear_coords(ox, t.out_w, src.w());
                let (sx0, sx1) = if t.hflip {
                    (src.w() - 1 - x0, src.w() - 1 - x1)
                } else {
                    (x0, x1)
                };
                let ty = S::of(ty);
                let tx = S::of(tx);
                let one = S::one();
                let v = (one - ty)
                    * ((one - tx) * src.get(y0, sx0) + tx * src.get(y0, sx1))
                    + ty * ((one - tx) * src.get(y1, sx0) + tx * src.get(y1, sx1));
                out.set(oy, ox, v.max(S::zero()).min(one));
            }
        }
        Ok(ProbMask { grid: out })
    }

    pub fn cast<T: Scalar>(&self) -> ProbMask<T> {
        ProbMask {
            grid: Grid::from_vec(
                self.h(),
                self.w(),
                self.data().iter().map(|&v| T::of(v.as_f64())).collect(),
            ),
        }
    }
}

/// Source interpolation pair for one output index (half-pixel-center rule).
///
/// Returns clamped neighbor indices and the fractional weight of the second.
fn bilinear_coords(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let t = src - floor;
    let i0 = (floor.max(0.0) as usize).min(in_n - 1);
    let i1 = ((floor + 1.0).max(0.0) as usize).min(in_n - 1);
    (i0, i1, t)
}

/// H×W grid of {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    grid: Grid<u8>,
}

impl BitMask {
    pub fn new(grid: Grid<u8>) -> Self {
        assert!(
            grid.data().iter().all(|&v| v <= 1),
            "bit mask values must be 0 or 1"
        );
        BitMask { grid }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BitMask {
            grid: Grid::filled(h, w, 0),
        }
    }

    pub fn h(&self) -> usize {
        self.grid.h()
    }

    pub fn w(&self) -> usize {
        self.grid.w()
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.grid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid.get(y, x)
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.grid.set(y, x, v);
    }

    pub fn data(&self) -> &[u8] {
        self.grid.data()
    }

    /// Number of one-cells.
    pub fn count_ones(&self) -> usize {
        self.data().iter().map(|&v| v as usize).sum()
    }

    pub fn rectify<S: Scalar>(&self, b: &BBox<S>) -> BitMask {
        let mut grid = self.grid.clone();
        for y in 0..grid.h() {
            for x in 0..grid.w() {
                if !b.contains_cell(y, x) {
                    grid.set(y, x, 0);
                }
            }
        }
        BitMask { grid }
    }

    /// Flip, then nearest-neighbor resample into the output frame.
    pub fn transform(&self, t: &GeomTransform) -> Result<BitMask> {
        if t.out_h == 0 || t.out_w == 0 {
            return Err(Error::EmptyTransform);
        }
        let src = &self.grid;
        let mut out = Grid::filled(t.out_h, t.out_w, 0u8);
        for oy in 0..t.out_h {
            let sy = nearest_coord(oy, t.out_h, src.h());
            for ox in 0..t.out_w {
                let mut sx = nearest_coord(ox, t.out_w, src.w());
                if t.hflip {
                    sx = src.w() - 1 - sx;
                }
                out.set(oy, ox, src.get(sy, sx));
            }
        }
        Ok(BitMask { grid: out })
    }

    /// Convert to a probability mask of 0.0 / 1.0 values.
    pub fn to_prob<S: Scalar>(&self) -> ProbMask<S> {
        ProbMask {
            grid: self.grid.map(|v| if v == 1 { S::one() } else { S::zero() }),
        }
    }

    /// Tight bounding box of the one-cells, or `None` for an empty mask.
    pub fn tight_bbox<S: Scalar>(&self) -> Option<BBox<S>> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for (y, x, v) in self.grid.iter_cells() {
            if v == 1 {
                any = true;
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
        any.then(|| BBox {
            x1: S::of(x1 as f64),
            y1: S::of(y1 as f64),
            x2: S::of(x2 as f64),
            y2: S::of(y2 as f64),
        })
    }

    /// Zero every cell that is set in `other`.
    pub fn subtract(&mut self, other: &BitMask) {
        assert!(self.grid.same_shape(&other.grid), "mask shapes must match");
        for (v, o) in self.grid.data_mut().iter_mut().zip(other.data()) {
            if *o == 1 {
                *v = 0;
            }
        }
    }

    /// Mask IoU against another bit mask of the same shape.
    pub fn iou(&self, other: &BitMask) -> f64 {
        assert!(self.grid.same_shape(&other.grid), "mask shapes must match");
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data().iter().zip(other.data()) {
            if *a == 1 && *b == 1 {
                inter += 1;
            }
            if *a == 1 || *b == 1 {
                union += 1;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Serialize as `"H W; c0 c1 ..."` — row-major run lengths, first run
    /// counting zeros (possibly zero-length).
    pub fn to_rle_text(&self) -> String {
        let mut runs: Vec<usize> = Vec::new();
        let mut current = 0u8;
        let mut count = 0usize;
        for &v in self.data() {
            if v == current {
                count += 1;
            } else {
                runs.push(count);
                current = v;
                count = 1;
            }
        }
        runs.push(count);
        let body: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
        format!("{} {}; {}", self.h(), self.w(), body.join(" "))
    }

    pub fn from_rle_text(text: &str) -> Result<BitMask> {
        let parse_err = |detail: &str| Error::Parse {
            file: "<rle>".into(),
            detail: detail.into(),
        };
        let (header, body) = text
            .split_once(';')
            .ok_or_else(|| parse_err("missing ';' separator"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err("bad dimension")))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(parse_err("header must be 'H W'"));
        }
        let (h, w) = (dims[0], dims[1]);
        let runs: Vec<usize> = body
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err("bad run length")))
            .collect::<Result<_>>()?;
        let total: usize = runs.iter().sum();
        if total != h * w {
            return Err(parse_err("run lengths do not cover H*W cells"));
        }
        let mut data = Vec::with_capacity(h * w);
        let mut value = 0u8;
        for run in runs {
            data.extend(std::iter::repeat(value).take(run));
            value = 1 - value;
        }
        Ok(BitMask {
            grid: Grid::from_vec(h, w, data),
        })
    }

    /// Row-major run lengths starting with the zero run (COCO-style counts).
    pub fn rle_counts(&self) -> Vec<usize> {
        let mut runs: Vec<usize> = Vec::new();
        let mut current = 0u8;
        let mut count = 0usize;
        for &v in self.data() {
            if v == current {
                count += 1;
            } else {
                runs.push(count);
                current = v;
                count = 1;
            }
        }
        runs.push(count);
        runs
    }

    pub fn from_rle_counts(h: usize, w: usize, counts: &[usize]) -> Result<BitMask> {
        let total: usize = counts.iter().sum();
        if total != h * w {
            return Err(Error::Parse {
                file: "<rle>".into(),
                detail: format!("counts sum {} != {}x{}", total, h, w),
            });
        }
        let mut data = Vec::with_capacity(h * w);
        let mut value = 0u8;
        for &run in counts {
            data.extend(std::iter::repeat(value).take(run));
            value = 1 - value;
        }
        Ok(BitMask {
            grid: Grid::from_vec(h, w, data),
        })
    }

    /// Write as a single-channel PNG with 0/255 values.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.w() as u32, self.h() as u32, |x, y| {
            image::Luma([self.get(y as usize, x as usize) * 255])
        });
        img.save(path)
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                detail: e.to_string(),
            })?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<BitMask> {
        let img = image::open(path)
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                detail: e.to_string(),
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let data: Vec<u8> = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
        Ok(BitMask {
            grid: Grid::from_vec(h as usize, w as usize, data),
        })
    }

    pub fn write_rle<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_rle_text().as_bytes())?;
        Ok(())
    }

    pub fn read_rle<R: BufRead>(mut input: R) -> Result<BitMask> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        Self::from_rle_text(&text)
    }
}

fn nearest_coord(o: usize, out_n: usize, in_n: usize) -> usize {
    let scale = in_n as f64 / out_n as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    (src.round().max(0.0) as usize).min(in_n - 1)
}

/// A cell is 1 iff its center lies strictly inside the half-open box.
pub fn box_to_mask<S: Scalar>(b: &BBox<S>, height: usize, width: usize) -> Result<BitMask> {
    if b.x1 < S::zero()
        || b.y1 < S::zero()
        || b.x2 > S::of(width as f64)
        || b.y2 > S::of(height as f64)
    {
        return Err(Error::BoxOutOfBounds(
            b.x1.as_f64(),
            b.y1.as_f64(),
            b.x2.as_f64(),
            b.y2.as_f64(),
            height,
            width,
        ));
    }
    let mut grid = Grid::filled(height, width, 0u8);
    for y in 0..height {
        for x in 0..width {
            if b.contains_cell(y, x) {
                grid.set(y, x, 1);
            }
        }
    }
    Ok(BitMask { grid })
}

/// Horizontal flip followed by a resize from the input frame to the output
/// frame. Teacher-frame pseudo masks are warped into each student's
/// augmented frame with one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeomTransform {
    pub hflip: bool,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl GeomTransform {
    pub fn identity(h: usize, w: usize) -> Self {
        GeomTransform {
            hflip: false,
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
        }
    }

    pub fn sx(&self) -> f64 {
        self.out_w as f64 / self.in_w as f64
    }

    pub fn sy(&self) -> f64 {
        self.out_h as f64 / self.in_h as f64
    }

    pub fn invert(&self) -> GeomTransform {
        GeomTransform {
            hflip: self.hflip,
            in_h: self.out_h,
            in_w: self.out_w,
            out_h: self.in_h,
            out_w: self.in_w,
        }
    }

    /// Transform a box from the input frame into the output frame.
    pub fn apply_box<S: Scalar>(&self, b: &BBox<S>) -> BBox<S> {
        let (x1, x2) = if self.hflip {
            (S::of(self.in_w as f64) - b.x2, S::of(self.in_w as f64) - b.x1)
        } else {
            (b.x1, b.x2)
        };
        BBox {
            x1: x1 * S::of(self.sx()),
            y1: b.y1 * S::of(self.sy()),
            x2: x2 * S::of(self.sx()),
            y2: b.y2 * S::of(self.sy()),
        }
    }
}
