//! Convolutional self-similarity (CSS) layers.
//!
//! A sampling pattern is a pair of 2-D offsets `(s, t)`. The layer shifts the
//! activation map by each offset (the two-stream shifting transformer) and
//! records the squared channel distance between the two shifted copies at
//! every pixel. The response is gated by `exp(-S / bandwidth)` and max-pooled
//! over a small window.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{clamp_index, conv2d, relu, spatial_gradient, ConvParams, Tensor};
use crate::Real;

/// How fractional offsets are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    /// Bilinear sampling at real coordinates; exactly differentiable.
    #[default]
    Bilinear,
    /// Offsets rounded to whole pixels; offset gradients use the
    /// spatial-derivative surrogate.
    Nearest,
}

impl ShiftMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftMode::Bilinear => "continuous-bilinear",
            ShiftMode::Nearest => "integer-nearest",
        }
    }

    pub fn tag(&self) -> u32 {
        match self {
            ShiftMode::Bilinear => 0,
            ShiftMode::Nearest => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ShiftMode::Bilinear),
            1 => Ok(ShiftMode::Nearest),
            t => Err(Error::Format(format!("unknown shift mode tag {t}"))),
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous-bilinear" | "bilinear" => Ok(ShiftMode::Bilinear),
            "integer-nearest" | "nearest" => Ok(ShiftMode::Nearest),
            other => Err(Error::Config(format!("unknown shift mode {other:?}"))),
        }
    }
}

/// A 2-D offset in feature-map pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offset {
    pub x: Real,
    pub y: Real,
}

impl Offset {
    pub const ZERO: Offset = Offset { x: 0.0, y: 0.0 };

    pub fn new(x: Real, y: Real) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> Real {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    /// Uniform sample from the disk of radius `radius`.
    pub fn random_in_disk(rng: &mut impl Rng, radius: Real) -> Self {
        let r = radius * rng.gen::<Real>().sqrt();
        let theta = 2.0 * std::f64::consts::PI as Real * rng.gen::<Real>();
        Self::new(r * theta.cos(), r * theta.sin())
    }

    pub fn clamp_to_radius(&mut self, radius: Real) {
        let n = self.norm();
        if n > radius {
            let s = radius / n;
            self.x *= s;
            self.y *= s;
        }
    }
}

/// Learnable sampling patterns of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPatterns {
    pub offsets_s: Vec<Offset>,
    pub offsets_t: Vec<Offset>,
    /// Gating bandwidth is `exp(log_bandwidth)`, positive by construction.
    pub log_bandwidth: Real,
}

impl LevelPatterns {
    pub fn new(offsets_s: Vec<Offset>, offsets_t: Vec<Offset>, bandwidth: Real) -> Result<Self> {
        if offsets_s.is_empty() || offsets_s.len() != offsets_t.len() {
            return Err(Error::Config(format!(
                "pattern streams must be non-empty and equal length, got {} and {}",
                offsets_s.len(),
                offsets_t.len()
            )));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self {
            offsets_s,
            offsets_t,
            log_bandwidth: bandwidth.ln(),
        })
    }

    pub fn random(rng: &mut impl Rng, count: usize, radius: Real) -> Self {
        let mut offsets_s = Vec::with_capacity(count);
        let mut offsets_t = Vec::with_capacity(count);
        for _ in 0..count {
            offsets_s.push(Offset::random_in_disk(rng, radius));
            offsets_t.push(Offset::random_in_disk(rng, radius));
        }
        Self {
            offsets_s,
            offsets_t,
            log_bandwidth: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets_s.is_empty()
    }

    pub fn bandwidth(&self) -> Real {
        self.log_bandwidth.exp()
    }

    pub fn clamp_to_radius(&mut self, radius: Real) {
        self.offsets_s
            .iter_mut()
            .chain(self.offsets_t.iter_mut())
            .for_each(|o| o.clamp_to_radius(radius));
    }

    /// Swap the two streams.
    pub fn swapped(&self) -> Self {
        Self {
            offsets_s: self.offsets_t.clone(),
            offsets_t: self.offsets_s.clone(),
            log_bandwidth: self.log_bandwidth,
        }
    }
}

/// Sampling patterns for every level.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPatterns {
    pub levels: Vec<LevelPatterns>,
}

impl SamplingPatterns {
    pub fn random(rng: &mut impl Rng, per_level: &[usize], radius: Real) -> Self {
        Self {
            levels: per_level
                .iter()
                .map(|&n| LevelPatterns::random(rng, n, radius))
                .collect(),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn per_level(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    pub fn clamp_to_radius(&mut self, radius: Real) {
        self.levels.iter_mut().for_each(|l| l.clamp_to_radius(radius));
    }
}

/// Layer hyper-parameters shared by all levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CssConfig {
    /// Half-width of the max-pooling window.
    pub pool_radius: usize,
    /// Offsets are kept inside this radius (feature-map pixels).
    pub pattern_radius: Real,
    pub shift_mode: ShiftMode,
}

impl Default for CssConfig {
    fn default() -> Self {
        Self {
            pool_radius: 1,
            pattern_radius: 4.0,
            shift_mode: ShiftMode::Bilinear,
        }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pattern_radius >= 1.0) {
            return Err(Error::Config(format!(
                "pattern radius must be >= 1, got {}",
                self.pattern_radius
            )));
        }
        Ok(())
    }
}

/// Integer part and fractional remainder of a shift, constant over the map.
///
/// Output pixel `x` reads the source at `x + base_x + frac_x`.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    base_x: isize,
    base_y: isize,
    frac_x: Real,
    frac_y: Real,
}

impl Stencil {
    fn new(offset: Offset, mode: ShiftMode) -> Self {
        match mode {
            ShiftMode::Bilinear => {
                let (ux, uy) = (-offset.x, -offset.y);
                let (bx, by) = (ux.floor(), uy.floor());
                Self {
                    base_x: bx as isize,
                    base_y: by as isize,
                    frac_x: ux - bx,
                    frac_y: uy - by,
                }
            }
            ShiftMode::Nearest => Self {
                base_x: -(offset.x.round() as isize),
                base_y: -(offset.y.round() as isize),
                frac_x: 0.0,
                frac_y: 0.0,
            },
        }
    }

    /// Clamped source taps for every output row or column.
    fn taps(base: isize, len: usize) -> Vec<(usize, usize)> {
        (0..len as isize)
            .map(|i| (clamp_index(i + base, len), clamp_index(i + base + 1, len)))
            .collect()
    }
}

/// Per-pattern sampling tables over an `h x w` map.
struct ShiftTable {
    stencil: Stencil,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl ShiftTable {
    fn new(offset: Offset, mode: ShiftMode, h: usize, w: usize) -> Self {
        let stencil = Stencil::new(offset, mode);
        Self {
            rows: Stencil::taps(stencil.base_y, h),
            cols: Stencil::taps(stencil.base_x, w),
            stencil,
        }
    }

    #[inline]
    fn corners(&self, plane: &[Real], w: usize, y: usize, x: usize) -> [Real; 4] {
        let (r0, r1) = self.rows[y];
        let (c0, c1) = self.cols[x];
        [
            plane[r0 * w + c0],
            plane[r0 * w + c1],
            plane[r1 * w + c0],
            plane[r1 * w + c1],
        ]
    }

    #[inline]
    fn sample(&self, plane: &[Real], w: usize, y: usize, x: usize) -> Real {
        let [a00, a01, a10, a11] = self.corners(plane, w, y, x);
        let (fx, fy) = (self.stencil.frac_x, self.stencil.frac_y);
        let top = a00 + fx * (a01 - a00);
        let bot = a10 + fx * (a11 - a10);
        top + fy * (bot - top)
    }

    /// Derivative of [`Self::sample`] with respect to the offset `(x, y)`.
    #[inline]
    fn offset_derivative(&self, plane: &[Real], w: usize, y: usize, x: usize) -> (Real, Real) {
        let [a00, a01, a10, a11] = self.corners(plane, w, y, x);
        let (fx, fy) = (self.stencil.frac_x, self.stencil.frac_y);
        let top = a00 + fx * (a01 - a00);
        let bot = a10 + fx * (a11 - a10);
        let d_fx = (a01 - a00) + fy * ((a11 - a10) - (a01 - a00));
        let d_fy = bot - top;
        // source coordinate is x - offset, so d/d(offset) = -d/d(frac)
        (-d_fx, -d_fy)
    }

    /// Scatter `g` back onto the four taps of pixel `(y, x)`.
    #[inline]
    fn scatter(&self, dst: &mut [Real], w: usize, y: usize, x: usize, g: Real) {
        let (r0, r1) = self.rows[y];
        let (c0, c1) = self.cols[x];
        let (fx, fy) = (self.stencil.frac_x, self.stencil.frac_y);
        let top = g * (1.0 - fy);
        let bot = g * fy;
        dst[r0 * w + c0] += top * (1.0 - fx);
        dst[r0 * w + c1] += top * fx;
        dst[r1 * w + c0] += bot * (1.0 - fx);
        dst[r1 * w + c1] += bot * fx;
    }
}

/// `out(y, x) = act(y - offset.y, x - offset.x)` with clamped borders.
pub fn shift_transform(act: &Tensor, offset: Offset, mode: ShiftMode) -> Tensor {
    let (c, h, w) = act.shape();
    let table = ShiftTable::new(offset, mode, h, w);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = act.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = table.sample(src, w, y, x);
            }
        }
    }
    out
}

/// Efficient CSS: squared channel distance between the two shifted streams,
/// computed directly on the activation map. Output is `L x H x W`.
pub fn css_forward(act: &Tensor, patterns: &LevelPatterns, mode: ShiftMode) -> Tensor {
    let (c, h, w) = act.shape();
    let n = h * w;
    let mut out = Tensor::zeros(patterns.len(), h, w);
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(l, dst)| {
            let ts = ShiftTable::new(patterns.offsets_s[l], mode, h, w);
            let tt = ShiftTable::new(patterns.offsets_t[l], mode, h, w);
            for ch in 0..c {
                let src = act.plane(ch);
                for y in 0..h {
                    for x in 0..w {
                        let d = ts.sample(src, w, y, x) - tt.sample(src, w, y, x);
                        dst[y * w + x] += d * d;
                    }
                }
            }
        });
    out
}

/// Adjoints of [`css_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CssGrad {
    pub act: Tensor,
    pub offsets_s: Vec<Offset>,
    pub offsets_t: Vec<Offset>,
}

const PATTERN_CHUNK: usize = 8;

pub fn css_backward(
    act: &Tensor,
    patterns: &LevelPatterns,
    mode: ShiftMode,
    grad_out: &Tensor,
) -> Result<CssGrad> {
    let (c, h, w) = act.shape();
    let expected = (patterns.len(), h, w);
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "css grad_out is {:?}, expected {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let n = h * w;
    let len = patterns.len();

    // Pattern chunks are fixed, so the reduction order does not depend on
    // the thread count.
    let chunks: Vec<(Tensor, Vec<(Offset, Offset)>)> = (0..len.div_ceil(PATTERN_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut grad_act = Tensor::zeros(c, h, w);
            let mut offs = Vec::new();
            for l in chunk * PATTERN_CHUNK..((chunk + 1) * PATTERN_CHUNK).min(len) {
                let g = grad_out.plane(l);
                let ts = ShiftTable::new(patterns.offsets_s[l], mode, h, w);
                let tt = ShiftTable::new(patterns.offsets_t[l], mode, h, w);
                let mut gs = Offset::ZERO;
                let mut gt = Offset::ZERO;
                for ch in 0..c {
                    let src = act.plane(ch);
                    let (sgx, sgy, tgx, tgy) = match mode {
                        ShiftMode::Nearest => {
                            let plane = Tensor::new(1, h, w, src.to_vec()).expect("plane");
                            let shifted_s = shift_transform(&plane, patterns.offsets_s[l], mode);
                            let shifted_t = shift_transform(&plane, patterns.offsets_t[l], mode);
                            let (sx, sy) = spatial_gradient(&shifted_s);
                            let (tx, ty) = spatial_gradient(&shifted_t);
                            (Some(sx), Some(sy), Some(tx), Some(ty))
                        }
                        ShiftMode::Bilinear => (None, None, None, None),
                    };
                    let dst = grad_act.plane_mut(ch);
                    for y in 0..h {
                        for x in 0..w {
                            let i = y * w + x;
                            let gv = g[i];
                            if gv == 0.0 {
                                continue;
                            }
                            let d = ts.sample(src, w, y, x) - tt.sample(src, w, y, x);
                            let gd = 2.0 * gv * d;
                            ts.scatter(dst, w, y, x, gd);
                            tt.scatter(dst, w, y, x, -gd);
                            let (dsx, dsy, dtx, dty) = match mode {
                                ShiftMode::Bilinear => {
                                    let (a, b) = ts.offset_derivative(src, w, y, x);
                                    let (c2, d2) = tt.offset_derivative(src, w, y, x);
                                    (a, b, c2, d2)
                                }
                                ShiftMode::Nearest => (
                                    -sgx.as_ref().unwrap().data()[i],
                                    -sgy.as_ref().unwrap().data()[i],
                                    -tgx.as_ref().unwrap().data()[i],
                                    -tgy.as_ref().unwrap().data()[i],
                                ),
                            };
                            gs.x += gd * dsx;
                            gs.y += gd * dsy;
                            gt.x -= gd * dtx;
                            gt.y -= gd * dty;
                        }
                    }
                }
                offs.push((gs, gt));
            }
            (grad_act, offs)
        })
        .collect();

    let mut grad_act = Tensor::zeros(c, h, w);
    let mut offsets_s = Vec::with_capacity(len);
    let mut offsets_t = Vec::with_capacity(len);
    for (ga, offs) in chunks {
        grad_act.add_assign(&ga);
        for (s, t) in offs {
            offsets_s.push(s);
            offsets_t.push(t);
        }
    }
    debug_assert_eq!(grad_act.plane_len(), n);
    Ok(CssGrad {
        act: grad_act,
        offsets_s,
        offsets_t,
    })
}

/// Conv layers each followed by ReLU; the similarity network used by the
/// brute-force oracle and the self-test.
pub fn conv_stack_forward(image: &Tensor, layers: &[ConvParams]) -> Result<Tensor> {
    let mut x = image.clone();
    for p in layers {
        x = relu(&conv2d(&x, p)?);
    }
    Ok(x)
}

/// Valid (unpadded) convolution of a small patch followed by ReLU.
fn valid_conv_relu(patch: &Tensor, p: &ConvParams) -> Tensor {
    let (_, h, w) = patch.shape();
    let (oh, ow) = (h + 1 - p.kernel_h, w + 1 - p.kernel_w);
    Tensor::from_fn(p.out_channels, oh, ow, |o, y, x| {
        let mut acc = p.bias[o];
        for c in 0..p.in_channels {
            for ky in 0..p.kernel_h {
                for kx in 0..p.kernel_w {
                    acc += p.weight(o, c, ky, kx) * patch.at(c, y + ky, x + kx);
                }
            }
        }
        acc.max(0.0)
    })
}

/// Brute-force CSS result: values are defined only where `interior` holds.
#[derive(Debug, Clone)]
pub struct CssReference {
    /// `L x H x W`; zero outside the interior.
    pub values: Tensor,
    /// `L x H x W` flags: both receptive fields lie fully inside the image.
    pub interior: Vec<bool>,
}

/// Straightforward CSS: for every pixel and pattern, crop the two shifted
/// receptive fields from the image, run the conv stack on each crop
/// separately and compare the centre activations. Offsets are rounded to
/// whole pixels.
pub fn css_reference(image: &Tensor, patterns: &LevelPatterns, layers: &[ConvParams]) -> CssReference {
    let (c, h, w) = image.shape();
    let ry: usize = layers.iter().map(|p| p.kernel_h / 2).sum();
    let rx: usize = layers.iter().map(|p| p.kernel_w / 2).sum();
    let len = patterns.len();
    let mut values = Tensor::zeros(len, h, w);
    let mut interior = vec![false; len * h * w];

    let crop = |cy: isize, cx: isize| -> Option<Tensor> {
        let (y0, x0) = (cy - ry as isize, cx - rx as isize);
        let (y1, x1) = (cy + ry as isize, cx + rx as isize);
        if y0 < 0 || x0 < 0 || y1 >= h as isize || x1 >= w as isize {
            return None;
        }
        Some(Tensor::from_fn(c, 2 * ry + 1, 2 * rx + 1, |ch, y, x| {
            image.at(ch, y0 as usize + y, x0 as usize + x)
        }))
    };
    let describe = |cy: isize, cx: isize| -> Option<Vec<Real>> {
        let mut x = crop(cy, cx)?;
        for p in layers {
            x = valid_conv_relu(&x, p);
        }
        Some(x.column(0, 0))
    };

    for l in 0..len {
        let s = patterns.offsets_s[l];
        let t = patterns.offsets_t[l];
        let (sx, sy) = (s.x.round() as isize, s.y.round() as isize);
        let (tx, ty) = (t.x.round() as isize, t.y.round() as isize);
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as isize, x as isize);
                let (Some(fs), Some(ft)) = (describe(yi - sy, xi - sx), describe(yi - ty, xi - tx))
                else {
                    continue;
                };
                let d: Real = fs.iter().zip(&ft).map(|(a, b)| (a - b) * (a - b)).sum();
                *values.at_mut(l, y, x) = d;
                interior[(l * h + y) * w + x] = true;
            }
        }
    }
    CssReference { values, interior }
}

/// Exponential gating followed by max pooling over a `(2r+1)^2` window.
pub fn gate_and_pool(css_out: &Tensor, bandwidth: Real, pool_radius: usize) -> Tensor {
    gate_and_pool_indexed(css_out, bandwidth, pool_radius).0
}

/// Pooled output plus, per output element, the in-plane index of the window
/// element that won (first in row-major scan order on ties).
pub fn gate_and_pool_indexed(
    css_out: &Tensor,
    bandwidth: Real,
    pool_radius: usize,
) -> (Tensor, Vec<u32>) {
    let (l, h, w) = css_out.shape();
    let n = h * w;
    let r = pool_radius as isize;
    let mut out = Tensor::zeros(l, h, w);
    let mut argmax = vec![0u32; l * n];
    out.data_mut()
        .par_chunks_mut(n)
        .zip(argmax.par_chunks_mut(n))
        .enumerate()
        .for_each(|(ch, (dst, idx))| {
            let src = css_out.plane(ch);
            let gated: Vec<Real> = src.iter().map(|s| (-s / bandwidth).exp()).collect();
            for y in 0..h as isize {
                let ylo = (y - r).max(0) as usize;
                let yhi = (y + r).min(h as isize - 1) as usize;
                for x in 0..w as isize {
                    let xlo = (x - r).max(0) as usize;
                    let xhi = (x + r).min(w as isize - 1) as usize;
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = 0;
                    for yy in ylo..=yhi {
                        for xx in xlo..=xhi {
                            let v = gated[yy * w + xx];
                            if v > best {
                                best = v;
                                best_i = yy * w + xx;
                            }
                        }
                    }
                    let i = y as usize * w + x as usize;
                    dst[i] = best;
                    idx[i] = best_i as u32;
                }
            }
        });
    (out, argmax)
}

/// Adjoint of [`gate_and_pool`]: `(grad_css, grad_bandwidth)`.
pub fn gate_and_pool_backward(
    css_out: &Tensor,
    bandwidth: Real,
    pool_radius: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Real)> {
    if !grad_out.same_shape(css_out) {
        return Err(Error::Shape(format!(
            "pool grad_out is {:?}, expected {:?}",
            grad_out.shape(),
            css_out.shape()
        )));
    }
    let (pooled, argmax) = gate_and_pool_indexed(css_out, bandwidth, pool_radius);
    Ok(gate_and_pool_backward_indexed(
        css_out, bandwidth, &pooled, &argmax, grad_out,
    ))
}

pub(crate) fn gate_and_pool_backward_indexed(
    css_out: &Tensor,
    bandwidth: Real,
    pooled: &Tensor,
    argmax: &[u32],
    grad_out: &Tensor,
) -> (Tensor, Real) {
    let (l, h, w) = css_out.shape();
    let n = h * w;
    let mut grad = Tensor::zeros(l, h, w);
    let mut grad_bw = 0.0;
    for ch in 0..l {
        let src = css_out.plane(ch);
        let g = grad_out.plane(ch);
        let p = pooled.plane(ch);
        let idx = &argmax[ch * n..(ch + 1) * n];
        let dst = grad.plane_mut(ch);
        for i in 0..n {
            if g[i] == 0.0 {
                continue;
            }
            let j = idx[i] as usize;
            let v = p[i];
            dst[j] -= g[i] * v / bandwidth;
            grad_bw += g[i] * v * src[j] / (bandwidth * bandwidth);
        }
    }
    (grad, grad_bw)
}
