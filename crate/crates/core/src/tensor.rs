//! Dense rank-3 tensors and the handful of differentiable kernels the
//! descriptor pipeline is built from.
//!
//! Layout is channel-major planes, row-major within a plane. Every border
//! access uses replicate (clamp-to-edge) addressing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Real;

/// Dense `channels x height x width` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: Real) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> Real,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[Real] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [Real] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> Real {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut Real {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel vector at pixel `(y, x)`.
    pub fn column(&self, y: usize, x: usize) -> Vec<Real> {
        let n = self.plane_len();
        let i = y * self.width + x;
        (0..self.channels).map(|c| self.data[c * n + i]).collect()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: Real) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    /// Stack tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("tensor list"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::Shape(format!(
                    "cannot concatenate {}x{} with {}x{}",
                    h, w, p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(channels, h, w, data)
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Tensor {
        let n = self.plane_len();
        Tensor {
            channels: end - start,
            height: self.height,
            width: self.width,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Pixel-major copy: row `y * width + x` holds the channel vector.
    pub fn to_pixel_major(&self) -> Vec<Real> {
        let n = self.plane_len();
        let c = self.channels;
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            let plane = self.plane(ch);
            for (i, v) in plane.iter().enumerate() {
                out[i * c + ch] = *v;
            }
        }
        out
    }
}

#[inline]
pub(crate) fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Weights and bias of one centered convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// `out x in x kh x kw`, row-major.
    pub weights: Vec<Real>,
    pub bias: Vec<Real>,
}

impl ConvParams {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<Real>,
        bias: Vec<Real>,
    ) -> Result<Self> {
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}x{}",
                kernel_h, kernel_w
            )));
        }
        if weights.len() != out_channels * in_channels * kernel_h * kernel_w {
            return Err(Error::Shape(format!(
                "weights length {} does not match {}x{}x{}x{}",
                weights.len(),
                out_channels,
                in_channels,
                kernel_h,
                kernel_w
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                out_channels
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    /// 1x1 identity map on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels, 1, 1);
        for c in 0..channels {
            p.weights[c * channels + c] = 1.0;
        }
        p
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> Real {
        self.weights[((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx]
    }

    fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn same_shape(&self, other: &ConvParams) -> bool {
        self.out_channels == other.out_channels
            && self.in_channels == other.in_channels
            && self.kernel_h == other.kernel_h
            && self.kernel_w == other.kernel_w
    }
}

/// `dst[x] += w * src[clamp(x + shift)]` over a full row.
#[inline]
fn axpy_shifted(dst: &mut [Real], src: &[Real], w: Real, shift: isize) {
    let n = dst.len() as isize;
    // columns whose source index needs clamping
    let lo = (-shift).clamp(0, n);
    let hi = (n - shift).clamp(lo, n);
    for x in 0..lo {
        dst[x as usize] += w * src[clamp_index(x + shift, n as usize)];
    }
    let (a, b) = (lo as usize, hi as usize);
    let s0 = (lo + shift) as usize;
    for (d, s) in dst[a..b].iter_mut().zip(&src[s0..s0 + (b - a)]) {
        *d += w * *s;
    }
    for x in hi..n {
        dst[x as usize] += w * src[clamp_index(x + shift, n as usize)];
    }
}

/// Sum over a row of `g[x] * src[clamp(x + shift)]`.
#[inline]
fn dot_shifted(g: &[Real], src: &[Real], shift: isize) -> Real {
    let n = g.len() as isize;
    let mut acc = 0.0;
    for x in 0..n {
        acc += g[x as usize] * src[clamp_index(x + shift, n as usize)];
    }
    acc
}

/// Scatter adjoint of [`axpy_shifted`]: `dst[clamp(x + shift)] += w * g[x]`.
#[inline]
fn scatter_shifted(dst: &mut [Real], g: &[Real], w: Real, shift: isize) {
    let n = g.len() as isize;
    for x in 0..n {
        dst[clamp_index(x + shift, n as usize)] += w * g[x as usize];
    }
}

/// Stride-1 convolution with replicate padding; output keeps the input's
/// spatial size.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    if input.channels != params.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {}",
            params.in_channels, input.channels
        )));
    }
    let (h, w) = (input.height, input.width);
    let (ph, pw) = ((params.kernel_h / 2) as isize, (params.kernel_w / 2) as isize);
    let mut out = Tensor::zeros(params.out_channels, h, w);
    let n = h * w;
    out.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(params.bias[o]);
            for c in 0..params.in_channels {
                let src = input.plane(c);
                for ky in 0..params.kernel_h {
                    for kx in 0..params.kernel_w {
                        let wv = params.weight(o, c, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - ph;
                        let dx = kx as isize - pw;
                        for y in 0..h {
                            let sy = clamp_index(y as isize + dy, h);
                            axpy_shifted(
                                &mut plane[y * w..(y + 1) * w],
                                &src[sy * w..(sy + 1) * w],
                                wv,
                                dx,
                            );
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`conv2d`]: returns `(grad_input, grad_params)`.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, ConvParams)> {
    if input.channels != params.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {}",
            params.in_channels, input.channels
        )));
    }
    let expected = (params.out_channels, input.height, input.width);
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv grad_out is {:?}, expected {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let (h, w) = (input.height, input.width);
    let (ph, pw) = ((params.kernel_h / 2) as isize, (params.kernel_w / 2) as isize);
    let n = h * w;

    let mut grad_input = Tensor::zeros(input.channels, h, w);
    grad_input
        .data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(c, dst)| {
            for o in 0..params.out_channels {
                let g = grad_out.plane(o);
                for ky in 0..params.kernel_h {
                    for kx in 0..params.kernel_w {
                        let wv = params.weight(o, c, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - ph;
                        let dx = kx as isize - pw;
                        for y in 0..h {
                            let sy = clamp_index(y as isize + dy, h);
                            scatter_shifted(
                                &mut dst[sy * w..(sy + 1) * w],
                                &g[y * w..(y + 1) * w],
                                wv,
                                dx,
                            );
                        }
                    }
                }
            }
        });

    let klen = params.kernel_len();
    let per_out = params.in_channels * klen;
    let mut grad_params = ConvParams::zeros(
        params.out_channels,
        params.in_channels,
        params.kernel_h,
        params.kernel_w,
    );
    grad_params
        .weights
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, gw)| {
            let g = grad_out.plane(o);
            for c in 0..params.in_channels {
                let src = input.plane(c);
                for ky in 0..params.kernel_h {
                    for kx in 0..params.kernel_w {
                        let dy = ky as isize - ph;
                        let dx = kx as isize - pw;
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = clamp_index(y as isize + dy, h);
                            acc += dot_shifted(&g[y * w..(y + 1) * w], &src[sy * w..(sy + 1) * w], dx);
                        }
                        gw[c * klen + ky * params.kernel_w + kx] = acc;
                    }
                }
            }
        });
    for o in 0..params.out_channels {
        grad_params.bias[o] = grad_out.plane(o).iter().sum();
    }
    Ok((grad_input, grad_params))
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of [`relu`] given its input; passes where the input is positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, x) in g.data.iter_mut().zip(&input.data) {
        if *x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

#[derive(Debug, Clone, Copy)]
struct Lerp {
    i0: usize,
    i1: usize,
    frac: Real,
}

/// Align-corners source coordinates for resampling an axis of `len_in` to `len_out`.
fn align_corners_axis(len_in: usize, len_out: usize) -> Vec<Lerp> {
    (0..len_out)
        .map(|o| {
            let s = if len_out > 1 {
                o as Real * (len_in - 1) as Real / (len_out - 1) as Real
            } else {
                0.0
            };
            let i0 = (s.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            Lerp {
                i0,
                i1,
                frac: s - i0 as Real,
            }
        })
        .collect()
}

/// Bilinear resize with the align-corners convention.
pub fn bilinear_resample(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert!(out_h >= 1 && out_w >= 1, "resample target must be non-empty");
    let (c, h, w) = input.shape();
    if h == out_h && w == out_w {
        return input.clone();
    }
    let rows = align_corners_axis(h, out_h);
    let cols = align_corners_axis(w, out_w);
    let mut out = Tensor::zeros(c, out_h, out_w);
    out.data
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(ch, dst)| {
            let src = input.plane(ch);
            for (y, ry) in rows.iter().enumerate() {
                let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
                let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
                for (x, cx) in cols.iter().enumerate() {
                    let top = r0[cx.i0] + cx.frac * (r0[cx.i1] - r0[cx.i0]);
                    let bot = r1[cx.i0] + cx.frac * (r1[cx.i1] - r1[cx.i0]);
                    dst[y * out_w + x] = top + ry.frac * (bot - top);
                }
            }
        });
    out
}

/// Adjoint of [`bilinear_resample`] back onto an `in_h x in_w` grid.
pub fn bilinear_resample_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, out_h, out_w) = grad_out.shape();
    if in_h == out_h && in_w == out_w {
        return grad_out.clone();
    }
    let rows = align_corners_axis(in_h, out_h);
    let cols = align_corners_axis(in_w, out_w);
    let mut grad = Tensor::zeros(c, in_h, in_w);
    grad.data
        .par_chunks_mut(in_h * in_w)
        .enumerate()
        .for_each(|(ch, dst)| {
            let g = grad_out.plane(ch);
            for (y, ry) in rows.iter().enumerate() {
                for (x, cx) in cols.iter().enumerate() {
                    let gv = g[y * out_w + x];
                    let top = gv * (1.0 - ry.frac);
                    let bot = gv * ry.frac;
                    dst[ry.i0 * in_w + cx.i0] += top * (1.0 - cx.frac);
                    dst[ry.i0 * in_w + cx.i1] += top * cx.frac;
                    dst[ry.i1 * in_w + cx.i0] += bot * (1.0 - cx.frac);
                    dst[ry.i1 * in_w + cx.i1] += bot * cx.frac;
                }
            }
        });
    grad
}

/// Central differences inside, one-sided at the borders. A 1-pixel axis
/// yields a zero gradient along it.
pub fn spatial_gradient(input: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = input.shape();
    let mut gx = Tensor::zeros(c, h, w);
    let mut gy = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = input.plane(ch);
        if w >= 2 {
            let dst = gx.plane_mut(ch);
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let out = &mut dst[y * w..(y + 1) * w];
                out[0] = row[1] - row[0];
                out[w - 1] = row[w - 1] - row[w - 2];
                for x in 1..w - 1 {
                    out[x] = (row[x + 1] - row[x - 1]) / 2.0;
                }
            }
        }
        if h >= 2 {
            let dst = gy.plane_mut(ch);
            for y in 0..h {
                let (a, b, div) = if y == 0 {
                    (0, 1, 1.0)
                } else if y == h - 1 {
                    (h - 2, h - 1, 1.0)
                } else {
                    (y - 1, y + 1, 2.0)
                };
                for x in 0..w {
                    dst[y * w + x] = (src[b * w + x] - src[a * w + x]) / div;
                }
            }
        }
    }
    (gx, gy)
}

/// Divide each pixel's channel vector by `sqrt(|v|^2 + eps)`.
pub fn channelwise_l2_normalize(input: &Tensor, eps: Real) -> Tensor {
    let norms = inverse_norms(input, eps);
    let mut out = input.clone();
    let n = input.plane_len();
    for c in 0..input.channels {
        for (v, inv) in out.data[c * n..(c + 1) * n].iter_mut().zip(&norms) {
            *v *= *inv;
        }
    }
    out
}

fn inverse_norms(input: &Tensor, eps: Real) -> Vec<Real> {
    let n = input.plane_len();
    let mut sq = vec![0.0; n];
    for c in 0..input.channels {
        for (s, v) in sq.iter_mut().zip(input.plane(c)) {
            *s += v * v;
        }
    }
    sq.iter().map(|s| 1.0 / (s + eps).sqrt()).collect()
}

/// Adjoint of [`channelwise_l2_normalize`] given its input.
pub fn channelwise_l2_normalize_backward(input: &Tensor, eps: Real, grad_out: &Tensor) -> Tensor {
    let n = input.plane_len();
    let inv = inverse_norms(input, eps);
    // per-pixel <out, g>
    let mut proj = vec![0.0; n];
    for c in 0..input.channels {
        let x = input.plane(c);
        let g = grad_out.plane(c);
        for i in 0..n {
            proj[i] += x[i] * inv[i] * g[i];
        }
    }
    let mut grad = Tensor::zeros(input.channels, input.height, input.width);
    for c in 0..input.channels {
        let x = input.plane(c);
        let g = grad_out.plane(c);
        let dst = grad.plane_mut(c);
        for i in 0..n {
            let out = x[i] * inv[i];
            dst[i] = (g[i] - out * proj[i]) * inv[i];
        }
    }
    grad
}

/// 2x2 average pooling; output is `ceil(h/2) x ceil(w/2)` and a partial
/// window averages only the pixels it covers.
pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Tensor::from_fn(c, oh, ow, |ch, y, x| {
        let mut acc = 0.0;
        let mut count = 0;
        for sy in 2 * y..(2 * y + 2).min(h) {
            for sx in 2 * x..(2 * x + 2).min(w) {
                acc += input.at(ch, sy, sx);
                count += 1;
            }
        }
        acc / count as Real
    })
}

pub fn avg_pool2_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = grad_out.shape();
    let mut grad = Tensor::zeros(c, in_h, in_w);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let ys = 2 * y..(2 * y + 2).min(in_h);
                let xs = 2 * x..(2 * x + 2).min(in_w);
                let count = (ys.len() * xs.len()) as Real;
                let g = grad_out.at(ch, y, x) / count;
                for sy in ys {
                    for sx in xs.clone() {
                        *grad.at_mut(ch, sy, sx) += g;
                    }
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{fd_check, random_tensor, rel_err, STRICT_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conv(rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> ConvParams {
        let weights = (0..o * i * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvParams::new(o, i, k, k, weights, bias).unwrap()
    }

    /// Six nested loops, no row tricks.
    fn conv_loop_nest(input: &Tensor, p: &ConvParams) -> Tensor {
        let (_, h, w) = input.shape();
        let (ph, pw) = ((p.kernel_h / 2) as isize, (p.kernel_w / 2) as isize);
        Tensor::from_fn(p.out_channels, h, w, |o, y, x| {
            let mut acc = p.bias[o];
            for c in 0..p.in_channels {
                for ky in 0..p.kernel_h {
                    for kx in 0..p.kernel_w {
                        let sy = (y as isize + ky as isize - ph).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + kx as isize - pw).clamp(0, w as isize - 1) as usize;
                        acc += p.weight(o, c, ky, kx) * input.at(c, sy, sx);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 3, 5, 7);
        let y = conv2d(&x, &ConvParams::identity(3)).unwrap();
        assert_eq!(x, y);
        let z = bilinear_resample(&y, 5, 7);
        assert_eq!(x, z);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut p = ConvParams::zeros(2, 3, 3, 3);
        p.bias = vec![0.5, -2.0];
        p.weights.iter_mut().for_each(|w| *w = 0.3);
        let y = conv2d(&Tensor::zeros(3, 4, 4), &p).unwrap();
        assert!(y.plane(0).iter().all(|v| *v == 0.5));
        assert!(y.plane(1).iter().all(|v| *v == -2.0));
    }

    #[test]
    fn conv_matches_loop_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3, 5] {
            let x = random_tensor(&mut rng, 3, 8, 8);
            let p = random_conv(&mut rng, 4, 3, k);
            let fast = conv2d(&x, &p).unwrap();
            let slow = conv_loop_nest(&x, &p);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!(rel_err(*a, *b) <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let p = ConvParams::zeros(2, 3, 3, 3);
        assert!(matches!(conv2d(&Tensor::zeros(2, 4, 4), &p), Err(Error::Config(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvParams::new(1, 1, 2, 3, vec![0.0; 6], vec![0.0]).is_err());
    }

    #[test]
    fn conv_backward_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 3, 6, 6);
        let p = random_conv(&mut rng, 2, 3, 3);
        let (gi, gp) = conv2d_backward(&x, &p, &Tensor::zeros(2, 6, 6)).unwrap();
        assert!(gi.data().iter().all(|v| *v == 0.0));
        assert!(gp.weights.iter().chain(&gp.bias).all(|v| *v == 0.0));

        let g = random_tensor(&mut rng, 3, 6, 6);
        let (gi, _) = conv2d_backward(&x, &ConvParams::identity(3), &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn conv_backward_shape_mismatch() {
        let p = ConvParams::zeros(2, 3, 3, 3);
        let x = Tensor::zeros(3, 4, 4);
        assert!(matches!(
            conv2d_backward(&x, &p, &Tensor::zeros(2, 4, 5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 3, 6, 7);
        let p = random_conv(&mut rng, 4, 3, 3);
        let probe = random_tensor(&mut rng, 4, 6, 7);
        let loss = |x: &Tensor, p: &ConvParams| -> Real {
            conv2d(x, p)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (gi, gp) = conv2d_backward(&x, &p, &probe).unwrap();

        let report = fd_check(x.data(), gi.data(), |v| {
            loss(&Tensor::new(3, 6, 7, v.to_vec()).unwrap(), &p)
        });
        assert!(report.max_rel <= STRICT_TOL, "input {report:?}");
        let report = fd_check(&p.weights, &gp.weights, |v| {
            let mut q = p.clone();
            q.weights.copy_from_slice(v);
            loss(&x, &q)
        });
        assert!(report.max_rel <= STRICT_TOL, "weights {report:?}");
        let report = fd_check(&p.bias, &gp.bias, |v| {
            let mut q = p.clone();
            q.bias.copy_from_slice(v);
            loss(&x, &q)
        });
        assert!(report.max_rel <= STRICT_TOL, "bias {report:?}");
    }

    #[test]
    fn relu_cases() {
        let neg = Tensor::filled(2, 3, 3, -0.5);
        assert!(relu(&neg).data().iter().all(|v| *v == 0.0));
        let pos = Tensor::filled(2, 3, 3, 0.7);
        assert_eq!(relu(&pos), pos);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random_tensor(&mut rng, 2, 4, 4);
        // keep clear of the kink
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v = 0.1
            }
        });
        let probe = random_tensor(&mut rng, 2, 4, 4);
        let g = relu_backward(&x, &probe);
        let report = fd_check(x.data(), g.data(), |v| {
            relu(&Tensor::new(2, 4, 4, v.to_vec()).unwrap())
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(report.max_rel <= STRICT_TOL, "{report:?}");
    }

    #[test]
    fn resample_cases() {
        let t = Tensor::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_resample(&t, 3, 3);
        assert_eq!(up.at(0, 1, 1), 1.5);
        assert_eq!(up.at(0, 0, 0), 0.0);
        assert_eq!(up.at(0, 2, 2), 3.0);

        let c = Tensor::filled(2, 5, 4, 0.37);
        for (h, w) in [(1, 1), (3, 9), (11, 2)] {
            let r = bilinear_resample(&c, h, w);
            assert!(r.data().iter().all(|v| *v == 0.37));
        }
    }

    #[test]
    fn resample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, 2, 4, 5);
        let g = random_tensor(&mut rng, 2, 9, 7);
        let y = bilinear_resample(&x, 9, 7);
        let gx = bilinear_resample_backward(&g, 4, 5);
        let lhs: Real = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: Real = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!(rel_err(lhs, rhs) < 1e-12);
    }

    #[test]
    fn spatial_gradient_cases() {
        let c = Tensor::filled(2, 4, 5, 3.0);
        let (gx, gy) = spatial_gradient(&c);
        assert!(gx.data().iter().chain(gy.data()).all(|v| *v == 0.0));

        let ramp = Tensor::from_fn(1, 4, 6, |_, _, x| x as Real);
        let (gx, gy) = spatial_gradient(&ramp);
        assert!(gx.data().iter().all(|v| *v == 1.0));
        assert!(gy.data().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_tensor(&mut rng, 2, 5, 6);
        let (gx, gy) = spatial_gradient(&r);
        for c in 0..2 {
            for y in 1..4 {
                for x in 1..5 {
                    assert_eq!(gx.at(c, y, x), (r.at(c, y, x + 1) - r.at(c, y, x - 1)) / 2.0);
                    assert_eq!(gy.at(c, y, x), (r.at(c, y + 1, x) - r.at(c, y - 1, x)) / 2.0);
                }
            }
        }

        let row = Tensor::from_fn(1, 1, 4, |_, _, x| (x * x) as Real);
        let (gx, gy) = spatial_gradient(&row);
        assert!(gy.data().iter().all(|v| *v == 0.0));
        assert_eq!(gx.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn normalize_cases() {
        let mut unit = Tensor::zeros(3, 2, 2);
        unit.plane_mut(1).fill(1.0);
        let out = channelwise_l2_normalize(&unit, 1e-8);
        for (a, b) in out.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        let z = channelwise_l2_normalize(&Tensor::zeros(3, 2, 2), 1e-8);
        assert!(z.data().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, 4, 8, 8);
        let out = channelwise_l2_normalize(&x, 1e-8);
        for y in 0..8 {
            for xx in 0..8 {
                let n_in: Real = x.column(y, xx).iter().map(|v| v * v).sum::<Real>().sqrt();
                let n_out: Real = out.column(y, xx).iter().map(|v| v * v).sum::<Real>().sqrt();
                assert!(n_out <= 1.0);
                if n_in >= 0.1 {
                    assert!(n_out >= 1.0 - 1e-3);
                }
            }
        }
        let probe = random_tensor(&mut rng, 4, 8, 8);
        let g = channelwise_l2_normalize_backward(&x, 1e-8, &probe);
        let report = fd_check(x.data(), g.data(), |v| {
            channelwise_l2_normalize(&Tensor::new(4, 8, 8, v.to_vec()).unwrap(), 1e-8)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(report.max_rel <= STRICT_TOL, "{report:?}");
    }

    #[test]
    fn avg_pool_odd_sizes_and_adjoint() {
        let x = Tensor::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as Real);
        let p = avg_pool2(&x);
        assert_eq!(p.shape(), (1, 2, 2));
        assert_eq!(p.at(0, 0, 0), 2.0);
        assert_eq!(p.at(0, 1, 1), 8.0);
        assert_eq!(p.at(0, 0, 1), 3.5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 2, 5, 6);
        let g = random_tensor(&mut rng, 2, 3, 3);
        let lhs: Real = avg_pool2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = avg_pool2_backward(&g, 5, 6);
        let rhs: Real = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!(rel_err(lhs, rhs) < 1e-12);
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(Tensor::new(2, 2, 2, vec![0.0; 8]).is_ok());
    }
}
