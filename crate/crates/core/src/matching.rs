//! Dense correspondence from two descriptor fields: nearest-neighbour flow,
//! left-right consistency, median smoothing and inverse warping.

use rayon::prelude::*;

use crate::descriptor::DenseDescriptorField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    /// Non-empty and inside a `width x height` image.
    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("bounding box"));
        }
        if !self.fits(width, height) {
            return Err(Error::Config(format!(
                "bbox {self:?} exceeds {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// Pixel index `y * width + x` of each pixel, in scan order.
    pub fn pixels(&self, width: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for y in self.y..self.y + self.h {
            for x in self.x..self.x + self.w {
                out.push(y * width + x);
            }
        }
        out
    }

    /// Larger of the two sides.
    pub fn max_side(&self) -> usize {
        self.w.max(self.h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    /// `2 x H x W`: dx then dy per source pixel.
    pub flow: Tensor,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(flow: Tensor, valid: Vec<bool>) -> Result<Self> {
        let (c, h, w) = flow.shape();
        if c != 2 {
            return Err(Error::Shape(format!("flow needs 2 channels, got {c}")));
        }
        if valid.len() != h * w {
            return Err(Error::Shape(format!(
                "validity mask has {} entries for {h}x{w} flow",
                valid.len()
            )));
        }
        Ok(Self { flow, valid })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            flow: Tensor::zeros(2, height, width),
            valid: vec![true; height * width],
        }
    }

    /// Constant displacement everywhere, all valid.
    pub fn constant(height: usize, width: usize, dx: Real, dy: Real) -> Self {
        Self {
            flow: Tensor::from_fn(2, height, width, |c, _, _| if c == 0 { dx } else { dy }),
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn at(&self, x: usize, y: usize) -> (Real, Real) {
        (self.flow.at(0, y, x), self.flow.at(1, y, x))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Bilinear sample of one plane at a real position, clamping to the border.
pub fn sample_bilinear(plane: &[Real], height: usize, width: usize, x: Real, y: Real) -> Real {
    let x = x.clamp(0.0, (width - 1) as Real);
    let y = y.clamp(0.0, (height - 1) as Real);
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as Real;
    let fy = y - y0 as Real;
    let top = plane[y0 * width + x0] + fx * (plane[y0 * width + x1] - plane[y0 * width + x0]);
    let bottom = plane[y1 * width + x0] + fx * (plane[y1 * width + x1] - plane[y1 * width + x0]);
    top + fy * (bottom - top)
}

#[inline]
pub(crate) fn sq_dist(a: &[Real], b: &[Real]) -> Real {
    let mut acc = [0.0 as Real; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<Real>() + tail
}

/// Index into `candidates` of the row of `rows` nearest to `query`; the
/// first candidate wins ties.
#[inline]
pub(crate) fn argmin_rows(query: &[Real], rows: &[Real], dim: usize, candidates: &[usize]) -> usize {
    let mut best = Real::INFINITY;
    let mut best_i = candidates[0];
    for &j in candidates {
        let d = sq_dist(query, &rows[j * dim..(j + 1) * dim]);
        if d < best {
            best = d;
            best_i = j;
        }
    }
    best_i
}

/// Where target matches may land. `bbox` restricts to a rectangle, `window`
/// to a square of that radius around the source pixel; both may be combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SearchRegion {
    pub bbox: Option<BBox>,
    pub window: Option<usize>,
}

/// Winner-take-all flow from `a` to `b`. Ties go to the first target pixel
/// in scan order. With a window, source pixels whose window misses the bbox
/// get zero flow and are marked invalid.
pub fn nn_flow(a: &DenseDescriptorField, b: &DenseDescriptorField, region: SearchRegion) -> Result<FlowField> {
    let (dim, h, w) = a.values.shape();
    if b.values.shape() != (dim, h, w) {
        return Err(Error::Shape(format!(
            "fields differ: {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    let bbox = region.bbox.unwrap_or(BBox::full(w, h));
    bbox.check(w, h).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("search region"),
        other => other,
    })?;
    let rows_a = a.pixel_major();
    let rows_b = b.pixel_major();
    let full = bbox.pixels(w);
    let per_row: Vec<Vec<(Real, Real, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut cand = Vec::new();
            (0..w)
                .map(|x| {
                    let candidates: &[usize] = match region.window {
                        None => &full,
                        Some(r) => {
                            cand.clear();
                            let y0 = y.saturating_sub(r).max(bbox.y);
                            let y1 = (y + r + 1).min(bbox.y + bbox.h);
                            let x0 = x.saturating_sub(r).max(bbox.x);
                            let x1 = (x + r + 1).min(bbox.x + bbox.w);
                            for yy in y0..y1.max(y0) {
                                for xx in x0..x1.max(x0) {
                                    cand.push(yy * w + xx);
                                }
                            }
                            &cand
                        }
                    };
                    if candidates.is_empty() {
                        return (0.0, 0.0, false);
                    }
                    let i = y * w + x;
                    let j = argmin_rows(&rows_a[i * dim..(i + 1) * dim], &rows_b, dim, candidates);
                    ((j % w) as Real - x as Real, (j / w) as Real - y as Real, true)
                })
                .collect()
        })
        .collect();
    let mut flow = Tensor::zeros(2, h, w);
    let mut valid = vec![false; h * w];
    for (y, row) in per_row.into_iter().enumerate() {
        for (x, (dx, dy, ok)) in row.into_iter().enumerate() {
            *flow.at_mut(0, y, x) = dx;
            *flow.at_mut(1, y, x) = dy;
            valid[y * w + x] = ok;
        }
    }
    FlowField::new(flow, valid)
}

/// True where the forward match, rounded to a pixel, maps back to within
/// `tau` of the start. Out-of-image targets and invalid inputs give false.
pub fn lr_consistency_mask(ab: &FlowField, ba: &FlowField, tau: Real) -> Vec<bool> {
    let (h, w) = (ab.height(), ab.width());
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !ab.valid[i] {
                continue;
            }
            let (dx, dy) = ab.at(x, y);
            let tx = (x as Real + dx).round();
            let ty = (y as Real + dy).round();
            if tx < 0.0 || ty < 0.0 || tx >= ba.width() as Real || ty >= ba.height() as Real {
                continue;
            }
            let (tx, ty) = (tx as usize, ty as usize);
            if !ba.valid[ty * ba.width() + tx] {
                continue;
            }
            let (bx, by) = ba.at(tx, ty);
            let ex = dx + bx;
            let ey = dy + by;
            mask[i] = (ex * ex + ey * ey).sqrt() <= tau;
        }
    }
    mask
}

pub const SMOOTH_THRESHOLD: Real = 2.0;
pub const SMOOTH_ITERATIONS: usize = 3;

fn median(v: &mut [Real]) -> Real {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median filter over the valid 8-neighbours. Invalid pixels with at least
/// one valid neighbour are filled and become valid; valid pixels with a
/// component more than `threshold` from the neighbour median are replaced.
/// Each iteration reads only the previous iterate.
pub fn smooth_flow(field: &FlowField, iterations: usize, threshold: Real) -> FlowField {
    let (h, w) = (field.height(), field.width());
    let mut cur = field.clone();
    for _ in 0..iterations {
        let mut next = cur.clone();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let mut us = Vec::with_capacity(8);
                let mut vs = Vec::with_capacity(8);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if cur.valid[ny * w + nx] {
                            let (u, v) = cur.at(nx, ny);
                            us.push(u);
                            vs.push(v);
                        }
                    }
                }
                if us.is_empty() {
                    continue;
                }
                let mu = median(&mut us);
                let mv = median(&mut vs);
                let i = y * w + x;
                let (u, v) = cur.at(x, y);
                let outlier = (u - mu).abs() > threshold || (v - mv).abs() > threshold;
                if !cur.valid[i] || outlier {
                    *next.flow.at_mut(0, y, x) = mu;
                    *next.flow.at_mut(1, y, x) = mv;
                    next.valid[i] = true;
                    changed = true;
                }
            }
        }
        cur = next;
        if !changed {
            break;
        }
    }
    cur
}

/// Sample `target` at `i + flow(i)` for every pixel `i` of the flow.
pub fn warp_image(target: &Tensor, flow: &FlowField) -> Tensor {
    let (c, th, tw) = target.shape();
    let (h, w) = (flow.height(), flow.width());
    Tensor::from_fn(c, h, w, |ch, y, x| {
        let (dx, dy) = flow.at(x, y);
        sample_bilinear(target.plane(ch), th, tw, x as Real + dx, y as Real + dy)
    })
}

fn color_wheel() -> Vec<[Real; 3]> {
    const SEGMENTS: [(usize, usize, usize); 6] = [
        // (length, channel rising or falling, direction)
        (15, 1, 0),
        (6, 0, 1),
        (4, 2, 0),
        (11, 1, 1),
        (13, 0, 0),
        (6, 2, 1),
    ];
    let mut wheel = Vec::with_capacity(55);
    let mut col = [255.0, 0.0, 0.0];
    for (len, ch, falling) in SEGMENTS {
        for i in 0..len {
            let t = 255.0 * i as Real / len as Real;
            col[ch] = if falling == 1 { 255.0 - t } else { t };
            wheel.push(col);
        }
        col[ch] = if falling == 1 { 0.0 } else { 255.0 };
    }
    wheel
}

/// Colour-coded flow in the usual hue-for-direction, saturation-for-magnitude
/// scheme. `max_magnitude` defaults to the largest valid vector. Invalid
/// pixels are black. Returns interleaved RGB rows.
pub fn flow_to_rgb(field: &FlowField, max_magnitude: Option<Real>) -> Vec<u8> {
    let (h, w) = (field.height(), field.width());
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max = max_magnitude.unwrap_or_else(|| {
        let mut m: Real = 0.0;
        for y in 0..h {
            for x in 0..w {
                if field.valid[y * w + x] {
                    let (u, v) = field.at(x, y);
                    m = m.max((u * u + v * v).sqrt());
                }
            }
        }
        m
    });
    let max = if max > 0.0 { max } else { 1.0 };
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !field.valid[i] {
                continue;
            }
            let (u, v) = field.at(x, y);
            let (u, v) = (u / max, v / max);
            let rad = (u * u + v * v).sqrt();
            let a = (-v).atan2(-u) / std::f64::consts::PI as Real;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as Real;
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = (k0 + 1) % ncols;
            let f = fk - k0 as Real;
            for c in 0..3 {
                let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                let col = if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                };
                out[i * 3 + c] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
