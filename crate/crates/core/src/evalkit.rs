//! Correspondence metrics and synthetic ground-truth pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learning::ImagePairSample;
use crate::matching::{sample_bilinear, BBox, FlowField};
use crate::tensor::{bilinear_resample, Tensor};
use crate::Real;

pub const PCK_ALPHAS: [Real; 3] = [0.05, 0.1, 0.15];
pub const FLOW_THRESHOLD: Real = 5.0;
/// Longer image side after the resize that precedes flow accuracy.
pub const FLOW_EVAL_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<(Real, Real)>,
    /// Height and width of the object box the tolerance is relative to.
    pub bbox_h: usize,
    pub bbox_w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFlow {
    pub flow: Tensor,
    pub mask: Vec<bool>,
}

fn flow_at(flow: &Tensor, x: Real, y: Real) -> (Real, Real) {
    let (_, h, w) = flow.shape();
    (
        sample_bilinear(flow.plane(0), h, w, x, y),
        sample_bilinear(flow.plane(1), h, w, x, y),
    )
}

/// Share of source keypoints whose predicted match lies within
/// `alpha * max(h, w)` of the annotated target keypoint.
pub fn pck(
    pred: &FlowField,
    source: &[(Real, Real)],
    target: &[(Real, Real)],
    bbox_hw: (usize, usize),
    alpha: Real,
) -> Result<Real> {
    if source.is_empty() {
        return Err(Error::Empty("keypoint list"));
    }
    if source.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} source keypoints but {} target keypoints",
            source.len(),
            target.len()
        )));
    }
    let tol = alpha * bbox_hw.0.max(bbox_hw.1) as Real;
    let hits = source
        .iter()
        .zip(target)
        .filter(|((sx, sy), (tx, ty))| {
            let (dx, dy) = flow_at(&pred.flow, *sx, *sy);
            let (ex, ey) = (sx + dx - tx, sy + dy - ty);
            (ex * ex + ey * ey).sqrt() <= tol
        })
        .count();
    Ok(hits as Real / source.len() as Real)
}

fn rescaled_dims(h: usize, w: usize, size: usize) -> (usize, usize) {
    let longer = h.max(w) as Real;
    let fit = |d: usize| ((d as Real * size as Real / longer).round() as usize).max(1);
    (fit(h), fit(w))
}

fn axis_factor(new: usize, old: usize) -> Real {
    if old > 1 && new > 1 {
        (new - 1) as Real / (old - 1) as Real
    } else {
        new as Real / old as Real
    }
}

/// Flow resized so the longer side is `size`; vectors follow the
/// per-axis coordinate scaling of the resampling grid.
pub fn rescale_flow(flow: &Tensor, size: usize) -> Tensor {
    let (_, h, w) = flow.shape();
    let (nh, nw) = rescaled_dims(h, w, size);
    let mut out = bilinear_resample(flow, nh, nw);
    let (fx, fy) = (axis_factor(nw, w), axis_factor(nh, h));
    out.plane_mut(0).iter_mut().for_each(|v| *v *= fx);
    out.plane_mut(1).iter_mut().for_each(|v| *v *= fy);
    out
}

fn rescale_mask(mask: &[bool], h: usize, w: usize, size: usize) -> Vec<bool> {
    let (nh, nw) = rescaled_dims(h, w, size);
    let t = Tensor::from_fn(1, h, w, |_, y, x| if mask[y * w + x] { 1.0 } else { 0.0 });
    bilinear_resample(&t, nh, nw).data().iter().map(|v| *v >= 0.5).collect()
}

/// Share of foreground pixels with endpoint error strictly below
/// `threshold`, measured after resizing the longer side to 100 pixels.
pub fn flow_accuracy(pred: &FlowField, gt: &GroundTruthFlow, threshold: Real) -> Result<Real> {
    if pred.flow.shape() != gt.flow.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.flow.shape(),
            gt.flow.shape()
        )));
    }
    let (_, h, w) = gt.flow.shape();
    if gt.mask.len() != h * w {
        return Err(Error::Shape("ground-truth mask size".into()));
    }
    let p = rescale_flow(&pred.flow, FLOW_EVAL_SIZE);
    let g = rescale_flow(&gt.flow, FLOW_EVAL_SIZE);
    let mask = rescale_mask(&gt.mask, h, w, FLOW_EVAL_SIZE);
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Empty("foreground mask"));
    }
    let plane = p.plane_len();
    let hits = (0..plane)
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let ex = p.data()[i] - g.data()[i];
            let ey = p.data()[plane + i] - g.data()[plane + i];
            (ex * ex + ey * ey).sqrt() < threshold
        })
        .count();
    Ok(hits as Real / n as Real)
}

/// `key=value` pairs on one line.
pub fn format_report(fields: &[(&str, String)]) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`, over pixels at least
/// `margin` from the border.
pub fn psnr(a: &Tensor, b: &Tensor, margin: usize) -> Real {
    let (c, h, w) = a.shape();
    let mut se = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                let d = a.at(ch, y, x) - b.at(ch, y, x);
                se += d * d;
                n += 1;
            }
        }
    }
    if se == 0.0 {
        return Real::INFINITY;
    }
    10.0 * (1.0 / (se / n as Real)).log10()
}

/// Limits for [`WarpParams::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpBounds {
    /// Relative scale change, e.g. 0.1 for 0.9..1.1.
    pub scale: Real,
    /// Degrees.
    pub rotation: Real,
    /// Pixels per axis.
    pub translation: Real,
    /// Peak pixels of the sinusoidal field.
    pub amplitude: Real,
    /// Cycles across the image.
    pub max_frequency: Real,
}

impl Default for WarpBounds {
    fn default() -> Self {
        Self {
            scale: 0.1,
            rotation: 10.0,
            translation: 5.0,
            amplitude: 3.0,
            max_frequency: 1.0,
        }
    }
}

/// Similarity about the image centre plus a smooth sinusoidal field:
/// `T(p) = c + s R (p - c) + t + d(p)` with
/// `d(p) = (ax sin(2 pi f y / H + px), ay sin(2 pi f x / W + py))`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WarpParams {
    pub scale: Real,
    /// Radians.
    pub rotation: Real,
    pub tx: Real,
    pub ty: Real,
    pub amp_x: Real,
    pub amp_y: Real,
    pub frequency: Real,
    pub phase_x: Real,
    pub phase_y: Real,
}

impl WarpParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            ..Self::default()
        }
    }

    pub fn translation(tx: Real, ty: Real) -> Self {
        Self {
            tx,
            ty,
            ..Self::identity()
        }
    }

    pub fn random(bounds: &WarpBounds, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, b: Real| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
        let two_pi = 2.0 * std::f64::consts::PI as Real;
        Self {
            scale: 1.0 + sym(rng, bounds.scale),
            rotation: sym(rng, bounds.rotation).to_radians(),
            tx: sym(rng, bounds.translation),
            ty: sym(rng, bounds.translation),
            amp_x: sym(rng, bounds.amplitude),
            amp_y: sym(rng, bounds.amplitude),
            frequency: if bounds.max_frequency > 0.0 {
                rng.gen_range(0.5 * bounds.max_frequency..=bounds.max_frequency)
            } else {
                0.0
            },
            phase_x: rng.gen_range(0.0..two_pi),
            phase_y: rng.gen_range(0.0..two_pi),
        }
    }
}

struct Warp {
    p: WarpParams,
    cx: Real,
    cy: Real,
    h: Real,
    w: Real,
}

impl Warp {
    fn new(p: WarpParams, height: usize, width: usize) -> Result<Self> {
        let finite = [p.scale, p.rotation, p.tx, p.ty, p.amp_x, p.amp_y, p.frequency, p.phase_x, p.phase_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(p.scale > 0.0) {
            return Err(Error::DegenerateWarp(format!("non-invertible similarity {p:?}")));
        }
        let two_pi = 2.0 * std::f64::consts::PI as Real;
        // Lipschitz constant of the deformation must stay below the scale
        let lip = two_pi * p.frequency * (p.amp_x.abs() / height as Real).max(p.amp_y.abs() / width as Real);
        if lip >= 0.9 * p.scale {
            return Err(Error::DegenerateWarp(format!(
                "deformation slope {lip:.3} too steep for scale {}",
                p.scale
            )));
        }
        Ok(Self {
            p,
            cx: (width as Real - 1.0) / 2.0,
            cy: (height as Real - 1.0) / 2.0,
            h: height as Real,
            w: width as Real,
        })
    }

    fn deformation(&self, x: Real, y: Real) -> (Real, Real) {
        let two_pi = 2.0 * std::f64::consts::PI as Real;
        let p = &self.p;
        (
            p.amp_x * (two_pi * p.frequency * y / self.h + p.phase_x).sin(),
            p.amp_y * (two_pi * p.frequency * x / self.w + p.phase_y).sin(),
        )
    }

    /// `T(p) - p`.
    fn displacement(&self, x: Real, y: Real) -> (Real, Real) {
        let p = &self.p;
        let (c, s) = (p.rotation.cos() * p.scale, p.rotation.sin() * p.scale);
        let (u, v) = (x - self.cx, y - self.cy);
        let (dx, dy) = self.deformation(x, y);
        (c * u - s * v - u + p.tx + dx, s * u + c * v - v + p.ty + dy)
    }

    fn forward(&self, x: Real, y: Real) -> (Real, Real) {
        let (dx, dy) = self.displacement(x, y);
        (x + dx, y + dy)
    }

    /// Fixed-point solve of `T(p) = q`.
    fn inverse(&self, qx: Real, qy: Real) -> (Real, Real) {
        let p = &self.p;
        let (c, s) = (p.rotation.cos() / p.scale, p.rotation.sin() / p.scale);
        let (mut x, mut y) = (qx, qy);
        for _ in 0..50 {
            let (dx, dy) = self.deformation(x, y);
            let (u, v) = (qx - p.tx - dx - self.cx, qy - p.ty - dy - self.cy);
            let nx = self.cx + c * u + s * v;
            let ny = self.cy - s * u + c * v;
            let done = (nx - x).abs() < 1e-12 && (ny - y).abs() < 1e-12;
            x = nx;
            y = ny;
            if done {
                break;
            }
        }
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub sample: ImagePairSample,
    pub gt: GroundTruthFlow,
    pub source_keypoints: KeypointSet,
    pub target_keypoints: KeypointSet,
}

/// Margin between the image border and the source box.
pub const SYNTH_MARGIN: usize = 4;
/// Keypoint grid is `SYNTH_GRID x SYNTH_GRID` over the source box.
pub const SYNTH_GRID: usize = 5;

/// Warp `image` into a target view. Ground-truth flow maps each source
/// pixel to its warped position; the target samples the source at the
/// inverse warp with replicate borders.
pub fn synth_pair(image: &Tensor, params: &WarpParams) -> Result<SynthPair> {
    let (c, h, w) = image.shape();
    if h <= 2 * SYNTH_MARGIN || w <= 2 * SYNTH_MARGIN {
        return Err(Error::Config(format!("image {h}x{w} too small for synthetic pairs")));
    }
    let warp = Warp::new(*params, h, w)?;
    let mut target = Tensor::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = warp.inverse(x as Real, y as Real);
            for ch in 0..c {
                *target.at_mut(ch, y, x) = sample_bilinear(image.plane(ch), h, w, sx, sy);
            }
        }
    }
    let source_bbox = BBox::new(SYNTH_MARGIN, SYNTH_MARGIN, w - 2 * SYNTH_MARGIN, h - 2 * SYNTH_MARGIN);
    let inside = |x: Real, y: Real| x >= 0.0 && y >= 0.0 && x <= (w - 1) as Real && y <= (h - 1) as Real;

    let mut flow = Tensor::zeros(2, h, w);
    let mut mask = vec![false; h * w];
    let (mut x0, mut y0, mut x1, mut y1) = (Real::INFINITY, Real::INFINITY, Real::NEG_INFINITY, Real::NEG_INFINITY);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = warp.displacement(x as Real, y as Real);
            *flow.at_mut(0, y, x) = dx;
            *flow.at_mut(1, y, x) = dy;
            let (tx, ty) = (x as Real + dx, y as Real + dy);
            if source_bbox.contains(x, y) {
                mask[y * w + x] = inside(tx, ty);
                x0 = x0.min(tx);
                y0 = y0.min(ty);
                x1 = x1.max(tx);
                y1 = y1.max(ty);
            }
        }
    }
    let clip = |v: Real, hi: usize| v.round().clamp(0.0, (hi - 1) as Real) as usize;
    let (bx0, by0, bx1, by1) = (clip(x0, w), clip(y0, h), clip(x1, w), clip(y1, h));
    let target_bbox = BBox::new(bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1);
    if target_bbox.w < 2 || target_bbox.h < 2 {
        return Err(Error::DegenerateWarp("object leaves the target image".into()));
    }

    let mut src_pts = Vec::new();
    let mut tgt_pts = Vec::new();
    for gy in 0..SYNTH_GRID {
        for gx in 0..SYNTH_GRID {
            let x = source_bbox.x as Real + (source_bbox.w - 1) as Real * gx as Real / (SYNTH_GRID - 1) as Real;
            let y = source_bbox.y as Real + (source_bbox.h - 1) as Real * gy as Real / (SYNTH_GRID - 1) as Real;
            let (tx, ty) = warp.forward(x, y);
            if inside(tx, ty) {
                src_pts.push((x, y));
                tgt_pts.push((tx, ty));
            }
        }
    }
    let sample = ImagePairSample::new(image.clone(), target, source_bbox, target_bbox)?;
    Ok(SynthPair {
        sample,
        gt: GroundTruthFlow { flow, mask },
        source_keypoints: KeypointSet {
            points: src_pts,
            bbox_h: source_bbox.h,
            bbox_w: source_bbox.w,
        },
        target_keypoints: KeypointSet {
            points: tgt_pts,
            bbox_h: target_bbox.h,
            bbox_w: target_bbox.w,
        },
    })
}

/// Random warp within `bounds` drawn from `seed`, then [`synth_pair`].
pub fn synth_pair_seeded(image: &Tensor, bounds: &WarpBounds, seed: u64) -> Result<SynthPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_pair(image, &WarpParams::random(bounds, &mut rng))
}

/// Smooth random colour texture in `[0, 1]`: a sum of oriented sinusoids
/// and Gaussian blobs per channel.
pub fn synthetic_texture(height: usize, width: usize, rng: &mut impl Rng) -> Tensor {
    let two_pi = 2.0 * std::f64::consts::PI as Real;
    let mut out = Tensor::zeros(3, height, width);
    for ch in 0..3 {
        let waves: Vec<(Real, Real, Real, Real)> = (0..6)
            .map(|_| {
                let f: Real = rng.gen_range(0.03..0.2);
                let a: Real = rng.gen_range(0.0..two_pi);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..two_pi), rng.gen_range(0.3..1.0))
            })
            .collect();
        let blobs: Vec<(Real, Real, Real, Real)> = (0..10)
            .map(|_| {
                (
                    rng.gen_range(0.0..width as Real),
                    rng.gen_range(0.0..height as Real),
                    rng.gen_range(2.0..6.0),
                    rng.gen_range(-1.5..1.5),
                )
            })
            .collect();
        let plane = out.plane_mut(ch);
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as Real, y as Real);
                let mut v = 0.0;
                for (fx, fy, ph, amp) in &waves {
                    v += amp * (two_pi * (fx * xf + fy * yf) + ph).sin();
                }
                for (bx, by, s, amp) in &blobs {
                    let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                    v += amp * (-d2 / (2.0 * s * s)).exp();
                }
                plane[y * width + x] = v;
            }
        }
        let (lo, hi) = plane
            .iter()
            .fold((Real::INFINITY, Real::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = (hi - lo).max(1e-12);
        plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::warp_image;

    #[test]
    fn pck_cases() {
        let src = vec![(1.0, 1.0), (2.0, 3.0), (4.0, 4.0), (5.0, 2.0)];
        let exact: Vec<_> = src.iter().map(|(x, y)| (x + 2.0, y - 1.0)).collect();
        let flow = FlowField::constant(8, 8, 2.0, -1.0);
        for a in PCK_ALPHAS {
            assert_eq!(pck(&flow, &src, &exact, (10, 20), a).unwrap(), 1.0);
        }
        let tol = 0.1 * 20.0;
        let off: Vec<_> = exact.iter().map(|(x, y)| (x + tol + 1e-9, *y)).collect();
        assert_eq!(pck(&flow, &src, &off, (10, 20), 0.1).unwrap(), 0.0);
        let half: Vec<_> = exact
            .iter()
            .enumerate()
            .map(|(i, (x, y))| if i % 2 == 0 { (*x, *y) } else { (x + 50.0, *y) })
            .collect();
        assert_eq!(pck(&flow, &src, &half, (10, 20), 0.15).unwrap(), 0.5);
        assert!(pck(&flow, &[], &[], (10, 20), 0.1).is_err());
    }

    #[test]
    fn pck_samples_flow_between_pixels() {
        let flow = FlowField::new(Tensor::from_fn(2, 4, 4, |c, _, x| if c == 0 { x as Real } else { 0.0 }), vec![true; 16]).unwrap();
        // flow at x = 1.5 is 1.5
        assert_eq!(pck(&flow, &[(1.5, 2.0)], &[(3.0, 2.0)], (4, 4), 1e-9).unwrap(), 1.0);
    }

    fn gt(h: usize, w: usize, mask: Vec<bool>) -> GroundTruthFlow {
        GroundTruthFlow { flow: FlowField::constant(h, w, 1.0, 2.0).flow, mask }
    }

    #[test]
    fn flow_accuracy_cases() {
        let g = gt(50, 40, vec![true; 2000]);
        let exact = FlowField::new(g.flow.clone(), vec![true; 2000]).unwrap();
        assert_eq!(flow_accuracy(&exact, &g, FLOW_THRESHOLD).unwrap(), 1.0);
        let far = FlowField::constant(50, 40, 1.0 + FLOW_THRESHOLD + 1.0, 2.0);
        assert_eq!(flow_accuracy(&far, &g, FLOW_THRESHOLD).unwrap(), 0.0);
        let empty = gt(50, 40, vec![false; 2000]);
        assert!(flow_accuracy(&exact, &empty, FLOW_THRESHOLD).is_err());
    }

    #[test]
    fn flow_accuracy_counts_at_evaluation_size() {
        // already at 100 pixels: no resampling, exact counting
        let (h, w) = (100, 60);
        let mask: Vec<bool> = (0..h * w).map(|i| i % 3 != 0).collect();
        let g = gt(h, w, mask.clone());
        let mut pred = FlowField::new(g.flow.clone(), vec![true; h * w]).unwrap();
        let mut wrong = 0;
        for i in 0..h * w {
            if i % 7 == 0 {
                pred.flow.data_mut()[i] += 5.0; // exactly T: not counted
                if mask[i] {
                    wrong += 1;
                }
            } else if i % 11 == 0 {
                pred.flow.data_mut()[i] += 4.999;
            }
        }
        let n = mask.iter().filter(|m| **m).count();
        let want = (n - wrong) as Real / n as Real;
        assert!((flow_accuracy(&pred, &g, 5.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn flow_rescale_scales_vectors() {
        let f = FlowField::constant(50, 25, 1.0, 1.0);
        let r = rescale_flow(&f.flow, 100);
        assert_eq!(r.shape(), (2, 100, 50));
        assert!((r.at(0, 3, 3) - 49.0 / 24.0).abs() < 1e-12);
        assert!((r.at(1, 3, 3) - 99.0 / 49.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_translation_warps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = synthetic_texture(32, 40, &mut rng);
        let p = synth_pair(&img, &WarpParams::identity()).unwrap();
        assert_eq!(p.sample.target, img);
        assert!(p.gt.flow.data().iter().all(|v| *v == 0.0));
        let zero = FlowField::zeros(32, 40);
        let s = &p.source_keypoints;
        let bbox = (p.target_keypoints.bbox_h, p.target_keypoints.bbox_w);
        assert_eq!(pck(&zero, &s.points, &p.target_keypoints.points, bbox, 0.05).unwrap(), 1.0);

        let t = synth_pair(&img, &WarpParams::translation(3.0, 0.0)).unwrap();
        for y in 0..32 {
            for x in 0..40 {
                assert_eq!((t.gt.flow.at(0, y, x), t.gt.flow.at(1, y, x)), (3.0, 0.0));
            }
        }
        for y in 0..32 {
            for x in 3..40 {
                assert!((t.sample.target.at(0, y, x) - img.at(0, y, x - 3)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_pairs_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = synthetic_texture(24, 24, &mut rng);
        let a = synth_pair_seeded(&img, &WarpBounds::default(), 9).unwrap();
        let b = synth_pair_seeded(&img, &WarpBounds::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warp_roundtrip_reconstructs_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = synthetic_texture(64, 64, &mut rng);
        for seed in 0..5 {
            let p = synth_pair_seeded(&img, &WarpBounds::default(), seed).unwrap();
            let flow = FlowField::new(p.gt.flow.clone(), p.gt.mask.clone()).unwrap();
            let back = warp_image(&p.sample.target, &flow);
            let q = psnr(&back, &img, 12);
            assert!(q > 30.0, "seed {seed}: {q} dB");
            let bb = p.sample.target_bbox;
            assert!(bb.fits(64, 64) && !bb.is_empty());
            assert!(!p.source_keypoints.points.is_empty());
        }
    }

    #[test]
    fn degenerate_warps_rejected() {
        let img = Tensor::zeros(3, 32, 32);
        let bad = WarpParams { scale: 0.0, ..WarpParams::identity() };
        assert!(matches!(synth_pair(&img, &bad), Err(Error::DegenerateWarp(_))));
        let steep = WarpParams { amp_x: 20.0, frequency: 1.0, ..WarpParams::identity() };
        assert!(matches!(synth_pair(&img, &steep), Err(Error::DegenerateWarp(_))));
        let gone = WarpParams::translation(100.0, 0.0);
        assert!(matches!(synth_pair(&img, &gone), Err(Error::DegenerateWarp(_))));
    }

    #[test]
    fn texture_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = synthetic_texture(16, 20, &mut rng);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(t.shape(), (3, 16, 20));
    }

    #[test]
    fn report_line() {
        let s = format_report(&[("pck@0.1", "0.5".into()), ("n", "3".into())]);
        assert_eq!(s, "pck@0.1=0.5 n=3");
    }
}
