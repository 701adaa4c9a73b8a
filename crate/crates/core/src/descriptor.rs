//! Dense descriptor assembly: CSS per pyramid level, gating and pooling,
//! upsampling to input resolution, concatenation and per-pixel L2
//! normalization.

use crate::backbone::{backbone_backward_traced, backbone_forward_traced, BackboneTrace, FeaturePyramid};
use crate::css::{
    css_backward, css_forward, gate_and_pool_backward_indexed, gate_and_pool_indexed, CssConfig,
    SamplingPatterns,
};
use crate::error::{Error, Result};
use crate::model::{LevelGrad, Model, ModelGrad};
use crate::tensor::{
    bilinear_resample, bilinear_resample_backward, channelwise_l2_normalize,
    channelwise_l2_normalize_backward, Tensor,
};
use crate::{Real, NORM_EPS};

/// Channel range `[start, end)` of one level inside the descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpan {
    pub level: usize,
    pub start: usize,
    pub end: usize,
}

impl LevelSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// `L x H x W` descriptor at input resolution, unit norm per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDescriptorField {
    pub values: Tensor,
    pub level_spans: Vec<LevelSpan>,
}

impl DenseDescriptorField {
    /// Wrap a tensor as a single-span field (e.g. one loaded from disk).
    pub fn from_tensor(values: Tensor) -> Self {
        let dim = values.channels();
        Self {
            values,
            level_spans: vec![LevelSpan {
                level: 0,
                start: 0,
                end: dim,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.channels()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn descriptor_at(&self, x: usize, y: usize) -> Result<Vec<Real>> {
        if x >= self.width() || y >= self.height() {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(self.values.column(y, x))
    }

    /// Pixel-major copy for fast nearest-neighbour scans.
    pub fn pixel_major(&self) -> Vec<Real> {
        self.values.to_pixel_major()
    }
}

#[derive(Debug, Clone)]
struct LevelTape {
    act: Tensor,
    css: Tensor,
    pooled: Tensor,
    argmax: Vec<u32>,
}

/// Forward intermediates needed by [`extract_backward_traced`].
#[derive(Debug, Clone)]
pub struct ExtractTape {
    backbone: Option<BackboneTrace>,
    levels: Vec<LevelTape>,
    /// Concatenated responses before the final normalization.
    responses: Tensor,
}

impl ExtractTape {
    /// Gated and pooled responses at input resolution, before normalization.
    pub fn responses(&self) -> &Tensor {
        &self.responses
    }
}

pub fn extract_dense(image: &Tensor, model: &Model) -> Result<DenseDescriptorField> {
    Ok(extract_dense_traced(image, model)?.0)
}

pub fn extract_dense_traced(image: &Tensor, model: &Model) -> Result<(DenseDescriptorField, ExtractTape)> {
    model.validate()?;
    let (pyramid, trace) = backbone_forward_traced(image, &model.backbone)?;
    let (field, mut tape) =
        extract_from_pyramid(&pyramid, image.height(), image.width(), &model.patterns, &model.css)?;
    tape.backbone = Some(trace);
    Ok((field, tape))
}

/// Descriptor from externally supplied activations; the pyramid is frozen.
pub fn extract_from_pyramid(
    pyramid: &FeaturePyramid,
    height: usize,
    width: usize,
    patterns: &SamplingPatterns,
    css: &CssConfig,
) -> Result<(DenseDescriptorField, ExtractTape)> {
    pyramid.validate()?;
    if pyramid.levels.len() != patterns.levels.len() {
        return Err(Error::Config(format!(
            "{} pyramid levels but {} pattern levels",
            pyramid.levels.len(),
            patterns.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    let mut upsampled = Vec::with_capacity(pyramid.levels.len());
    let mut spans = Vec::with_capacity(pyramid.levels.len());
    let mut start = 0;
    for (k, (lvl, pat)) in pyramid.levels.iter().zip(&patterns.levels).enumerate() {
        let s = css_forward(&lvl.activation, pat, css.shift_mode);
        let (pooled, argmax) = gate_and_pool_indexed(&s, pat.bandwidth(), css.pool_radius);
        upsampled.push(bilinear_resample(&pooled, height, width));
        spans.push(LevelSpan {
            level: k,
            start,
            end: start + pat.len(),
        });
        start += pat.len();
        levels.push(LevelTape {
            act: lvl.activation.clone(),
            css: s,
            pooled,
            argmax,
        });
    }
    let responses = Tensor::concat_channels(&upsampled)?;
    let values = channelwise_l2_normalize(&responses, NORM_EPS);
    Ok((
        DenseDescriptorField {
            values,
            level_spans: spans,
        },
        ExtractTape {
            backbone: None,
            levels,
            responses,
        },
    ))
}

/// Gradients of every learnable parameter given `d loss / d field`.
/// With `freeze_backbone` (or an injected pyramid) the backbone gradient is
/// identically zero.
pub fn extract_backward_traced(
    tape: &ExtractTape,
    model: &Model,
    grad_field: &Tensor,
    freeze_backbone: bool,
) -> Result<ModelGrad> {
    if !grad_field.same_shape(&tape.responses) {
        return Err(Error::Shape(format!(
            "field gradient is {:?}, expected {:?}",
            grad_field.shape(),
            tape.responses.shape()
        )));
    }
    let (_, h, w) = tape.responses.shape();
    let grad_resp = channelwise_l2_normalize_backward(&tape.responses, NORM_EPS, grad_field);
    let mut grad = ModelGrad::zeros(model);
    let mut grad_taps = Vec::with_capacity(tape.levels.len());
    let mut start = 0;
    for (k, (lt, pat)) in tape.levels.iter().zip(&model.patterns.levels).enumerate() {
        let g_up = grad_resp.slice_channels(start, start + pat.len());
        start += pat.len();
        let g_pooled = bilinear_resample_backward(&g_up, lt.pooled.height(), lt.pooled.width());
        let bw = pat.bandwidth();
        let (g_css, g_bw) = gate_and_pool_backward_indexed(&lt.css, bw, &lt.pooled, &lt.argmax, &g_pooled);
        let cg = css_backward(&lt.act, pat, model.css.shift_mode, &g_css)?;
        grad.patterns[k] = LevelGrad {
            offsets_s: cg.offsets_s,
            offsets_t: cg.offsets_t,
            log_bandwidth: g_bw * bw,
        };
        grad_taps.push(cg.act);
    }
    debug_assert_eq!((h, w), (grad_field.height(), grad_field.width()));
    if !freeze_backbone {
        if let Some(trace) = &tape.backbone {
            grad.backbone = backbone_backward_traced(trace, &model.backbone, &grad_taps)?;
        }
    }
    Ok(grad)
}

pub fn extract_backward(
    image: &Tensor,
    model: &Model,
    grad_field: &Tensor,
    freeze_backbone: bool,
) -> Result<ModelGrad> {
    let (_, tape) = extract_dense_traced(image, model)?;
    extract_backward_traced(&tape, model, grad_field, freeze_backbone)
}
