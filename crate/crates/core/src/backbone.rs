//! Small trainable convolutional feature extractor producing one tapped
//! activation map per pyramid level.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool2, avg_pool2_backward, channelwise_l2_normalize, channelwise_l2_normalize_backward,
    conv2d, conv2d_backward, relu, relu_backward, ConvParams, Tensor,
};
use crate::{Real, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub convs: usize,
    pub channels: usize,
    pub kernel: usize,
    /// 1 or 2; a factor of 2 applies 2x2 average pooling at stage entry.
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
}

impl Default for BackboneConfig {
    /// Three taps at strides 2, 4, 4.
    fn default() -> Self {
        Self {
            in_channels: 3,
            stages: vec![
                StageConfig {
                    convs: 2,
                    channels: 16,
                    kernel: 3,
                    downsample: 2,
                },
                StageConfig {
                    convs: 2,
                    channels: 32,
                    kernel: 3,
                    downsample: 2,
                },
                StageConfig {
                    convs: 2,
                    channels: 32,
                    kernel: 3,
                    downsample: 1,
                },
            ],
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut stride = 1;
        self.stages
            .iter()
            .map(|s| {
                stride *= s.downsample;
                stride
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("backbone input channels must be positive".into()));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.convs == 0 || s.channels == 0 {
                return Err(Error::Config(format!("stage {k} has no layers or channels")));
            }
            if s.kernel % 2 == 0 {
                return Err(Error::Config(format!("stage {k} kernel {} is even", s.kernel)));
            }
            if s.downsample != 1 && s.downsample != 2 {
                return Err(Error::Config(format!(
                    "stage {k} downsample must be 1 or 2, got {}",
                    s.downsample
                )));
            }
        }
        Ok(())
    }

    /// Layer shapes `(out, in, kernel)` in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let mut in_c = self.in_channels;
        for s in &self.stages {
            for _ in 0..s.convs {
                shapes.push((s.channels, in_c, s.kernel));
                in_c = s.channels;
            }
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    /// All conv layers, stage by stage.
    pub layers: Vec<ConvParams>,
}

impl BackboneParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(o, i, k)| {
                let fan_in = (i * k * k) as Real;
                let fan_out = (o * k * k) as Real;
                let a = (6.0 / (fan_in + fan_out)).sqrt();
                let weights = (0..o * i * k * k).map(|_| rng.gen_range(-a..=a)).collect();
                ConvParams::new(o, i, k, k, weights, vec![0.0; o])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "backbone declares {} layers but has {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (idx, ((o, i, k), p)) in shapes.iter().zip(&self.layers).enumerate() {
            if p.out_channels != *o || p.in_channels != *i || p.kernel_h != *k || p.kernel_w != *k {
                return Err(Error::Config(format!(
                    "layer {idx} is {}x{}x{}x{}, expected {o}x{i}x{k}x{k}",
                    p.out_channels, p.in_channels, p.kernel_h, p.kernel_w
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<ConvParams> {
        self.layers
            .iter()
            .map(|p| ConvParams::zeros(p.out_channels, p.in_channels, p.kernel_h, p.kernel_w))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub activation: Tensor,
    pub stride: usize,
}

/// Tapped activations, shallowest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self> {
        let p = Self { levels };
        p.validate()?;
        Ok(p)
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let strides = self.strides();
        if strides.is_empty() {
            return Err(Error::Empty("feature pyramid"));
        }
        let ok = strides.iter().all(|s| s.is_power_of_two()) && strides.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::StrideOrder(strides));
        }
        Ok(())
    }

    /// Check level sizes against an `h x w` input.
    pub fn check_sizes(&self, h: usize, w: usize) -> Result<()> {
        for (k, l) in self.levels.iter().enumerate() {
            let want = (h.div_ceil(l.stride), w.div_ceil(l.stride));
            let got = (l.activation.height(), l.activation.width());
            if want != got {
                return Err(Error::Shape(format!(
                    "level {k} is {got:?}, expected {want:?} for {h}x{w} input at stride {}",
                    l.stride
                )));
            }
        }
        Ok(())
    }
}

fn broadcast_gray(image: &Tensor, in_channels: usize) -> Result<Tensor> {
    if image.channels() == in_channels {
        return Ok(image.clone());
    }
    if image.channels() == 1 {
        let (_, h, w) = image.shape();
        let plane = image.plane(0);
        return Ok(Tensor::from_fn(in_channels, h, w, |_, y, x| plane[y * w + x]));
    }
    Err(Error::Config(format!(
        "backbone expects {} or 1 input channels, got {}",
        in_channels,
        image.channels()
    )))
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    stages: Vec<StageTrace>,
}

#[derive(Debug, Clone)]
struct StageTrace {
    /// Spatial size of the stage input before pooling.
    entry_hw: (usize, usize),
    pooled: bool,
    /// Input to each conv and its pre-ReLU output.
    conv_inputs: Vec<Tensor>,
    pre_relu: Vec<Tensor>,
    /// Stage output before tap normalization.
    output: Tensor,
}

pub fn backbone_forward(image: &Tensor, params: &BackboneParams) -> Result<FeaturePyramid> {
    Ok(backbone_forward_traced(image, params)?.0)
}

pub fn backbone_forward_traced(
    image: &Tensor,
    params: &BackboneParams,
) -> Result<(FeaturePyramid, BackboneTrace)> {
    params.validate()?;
    let cfg = &params.config;
    let (_, h, w) = image.shape();
    let deepest = *cfg.strides().last().expect("validated");
    if h < deepest || w < deepest {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            stride: deepest,
        });
    }
    let mut x = broadcast_gray(image, cfg.in_channels)?;
    let mut layer = 0;
    let mut levels = Vec::with_capacity(cfg.stages.len());
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut stride = 1;
    for stage in &cfg.stages {
        let entry_hw = (x.height(), x.width());
        let pooled = stage.downsample == 2;
        if pooled {
            x = avg_pool2(&x);
        }
        stride *= stage.downsample;
        let mut conv_inputs = Vec::with_capacity(stage.convs);
        let mut pre_relu = Vec::with_capacity(stage.convs);
        for _ in 0..stage.convs {
            let z = conv2d(&x, &params.layers[layer])?;
            layer += 1;
            conv_inputs.push(x);
            x = relu(&z);
            pre_relu.push(z);
        }
        levels.push(PyramidLevel {
            activation: channelwise_l2_normalize(&x, NORM_EPS),
            stride,
        });
        stages.push(StageTrace {
            entry_hw,
            pooled,
            conv_inputs,
            pre_relu,
            output: x.clone(),
        });
    }
    Ok((
        FeaturePyramid { levels },
        BackboneTrace { stages },
    ))
}

/// Parameter gradients given the gradient of each exposed tap. A stage
/// output feeds both its tap and the next stage; both contributions add.
pub fn backbone_backward_traced(
    trace: &BackboneTrace,
    params: &BackboneParams,
    grad_taps: &[Tensor],
) -> Result<Vec<ConvParams>> {
    if grad_taps.len() != trace.stages.len() {
        return Err(Error::Shape(format!(
            "got {} tap gradients for {} levels",
            grad_taps.len(),
            trace.stages.len()
        )));
    }
    let mut grads = params.zeros_like();
    let mut layer = params.layers.len();
    let mut carry: Option<Tensor> = None;
    for (k, st) in trace.stages.iter().enumerate().rev() {
        if !grad_taps[k].same_shape(&st.output) {
            return Err(Error::Shape(format!(
                "tap {k} gradient is {:?}, expected {:?}",
                grad_taps[k].shape(),
                st.output.shape()
            )));
        }
        let mut g = channelwise_l2_normalize_backward(&st.output, NORM_EPS, &grad_taps[k]);
        if let Some(c) = carry.take() {
            g.add_assign(&c);
        }
        for (input, z) in st.conv_inputs.iter().zip(&st.pre_relu).rev() {
            layer -= 1;
            let gz = relu_backward(z, &g);
            let (gi, gp) = conv2d_backward(input, &params.layers[layer], &gz)?;
            grads[layer] = gp;
            g = gi;
        }
        if st.pooled {
            g = avg_pool2_backward(&g, st.entry_hw.0, st.entry_hw.1);
        }
        carry = Some(g);
    }
    debug_assert_eq!(layer, 0);
    Ok(grads)
}

pub fn backbone_backward(
    image: &Tensor,
    params: &BackboneParams,
    grad_taps: &[Tensor],
) -> Result<Vec<ConvParams>> {
    let (_, trace) = backbone_forward_traced(image, params)?;
    backbone_backward_traced(&trace, params, grad_taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check_subset, GRAD_TOL};
    use crate::test_util::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stages: vec![
                StageConfig {
                    convs: 1,
                    channels: 4,
                    kernel: 3,
                    downsample: 2,
                },
                StageConfig {
                    convs: 2,
                    channels: 3,
                    kernel: 3,
                    downsample: 1,
                },
            ],
        }
    }

    fn probe_loss(p: &FeaturePyramid, probes: &[Tensor]) -> Real {
        p.levels
            .iter()
            .zip(probes)
            .map(|(l, g)| l.activation.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<Real>())
            .sum()
    }

    #[test]
    fn default_config_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.levels(), 3);
        let params = BackboneParams::init(cfg, &mut rng).unwrap();
        let image = Tensor::from_fn(3, 64, 64, |_, _, _| rng.gen_range(0.0..1.0));
        let pyr = backbone_forward(&image, &params).unwrap();
        assert_eq!(pyr.strides(), vec![2, 4, 4]);
        let sizes: Vec<_> = pyr.levels.iter().map(|l| l.activation.shape()).collect();
        assert_eq!(sizes, vec![(16, 32, 32), (32, 16, 16), (32, 16, 16)]);
        pyr.check_sizes(64, 64).unwrap();
    }

    #[test]
    fn odd_sizes_use_ceil() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = BackboneParams::init(BackboneConfig::default(), &mut rng).unwrap();
        let image = Tensor::filled(1, 13, 9, 0.5);
        let pyr = backbone_forward(&image, &params).unwrap();
        pyr.check_sizes(13, 9).unwrap();
        assert!(matches!(
            backbone_forward(&Tensor::zeros(3, 3, 8), &params),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params = BackboneParams::init(BackboneConfig::default(), &mut rng).unwrap();
        let pyr = backbone_forward(&Tensor::zeros(3, 16, 16), &params).unwrap();
        assert!(pyr
            .levels
            .iter()
            .all(|l| l.activation.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_stage_identity_is_normalized_input() {
        let cfg = BackboneConfig {
            in_channels: 3,
            stages: vec![StageConfig {
                convs: 1,
                channels: 3,
                kernel: 1,
                downsample: 1,
            }],
        };
        let params = BackboneParams {
            config: cfg,
            layers: vec![ConvParams::identity(3)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let image = Tensor::from_fn(3, 6, 6, |_, _, _| rng.gen_range(0.0..1.0));
        let pyr = backbone_forward(&image, &params).unwrap();
        assert_eq!(pyr.levels[0].activation, channelwise_l2_normalize(&image, NORM_EPS));
    }

    #[test]
    fn tap_norms_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let params = BackboneParams::init(BackboneConfig::default(), &mut rng).unwrap();
        let image = Tensor::from_fn(3, 24, 24, |_, _, _| rng.gen_range(0.0..1.0));
        let (pyr, trace) = backbone_forward_traced(&image, &params).unwrap();
        for (l, st) in pyr.levels.iter().zip(&trace.stages) {
            for y in 0..l.activation.height() {
                for x in 0..l.activation.width() {
                    let n: Real = l.activation.column(y, x).iter().map(|v| v * v).sum::<Real>().sqrt();
                    let pre: Real = st.output.column(y, x).iter().map(|v| v * v).sum::<Real>().sqrt();
                    assert!(n <= 1.0);
                    if pre >= 0.1 {
                        assert!(n >= 1.0 - 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_zero_taps_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let params = BackboneParams::init(small_config(), &mut rng).unwrap();
        let image = random_tensor(&mut rng, 3, 8, 8);
        let pyr = backbone_forward(&image, &params).unwrap();
        let zeros: Vec<Tensor> = pyr
            .levels
            .iter()
            .map(|l| {
                let (c, h, w) = l.activation.shape();
                Tensor::zeros(c, h, w)
            })
            .collect();
        let g = backbone_backward(&image, &params, &zeros).unwrap();
        assert!(g.iter().all(|p| p.weights.iter().chain(&p.bias).all(|v| *v == 0.0)));
    }

    fn randomize_biases(params: &mut BackboneParams, rng: &mut ChaCha8Rng) {
        for l in &mut params.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut params = BackboneParams::init(small_config(), &mut rng).unwrap();
        randomize_biases(&mut params, &mut rng);
        let image = random_tensor(&mut rng, 3, 7, 6);
        let pyr = backbone_forward(&image, &params).unwrap();
        let probes: Vec<Tensor> = pyr
            .levels
            .iter()
            .map(|l| {
                let (c, h, w) = l.activation.shape();
                random_tensor(&mut rng, c, h, w)
            })
            .collect();
        let grads = backbone_backward(&image, &params, &probes).unwrap();
        for (li, g) in grads.iter().enumerate() {
            let x = &params.layers[li].weights;
            let idx: Vec<usize> = (0..x.len()).collect();
            let report = fd_check_subset(x, &g.weights, &idx, true, |v| {
                let mut q = params.clone();
                q.layers[li].weights.copy_from_slice(v);
                probe_loss(&backbone_forward(&image, &q).unwrap(), &probes)
            });
            assert!(report.max_rel <= GRAD_TOL, "layer {li} {report:?}");
            assert!(report.skipped * 10 <= report.checked, "{report:?}");
        }
    }

    #[test]
    fn gradients_superpose_over_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut params = BackboneParams::init(small_config(), &mut rng).unwrap();
        randomize_biases(&mut params, &mut rng);
        let image = random_tensor(&mut rng, 3, 8, 8);
        let (pyr, trace) = backbone_forward_traced(&image, &params).unwrap();
        let probes: Vec<Tensor> = pyr
            .levels
            .iter()
            .map(|l| {
                let (c, h, w) = l.activation.shape();
                random_tensor(&mut rng, c, h, w)
            })
            .collect();
        let both = backbone_backward_traced(&trace, &params, &probes).unwrap();
        let mut sum = params.zeros_like();
        for k in 0..probes.len() {
            let only: Vec<Tensor> = probes
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    if j == k {
                        p.clone()
                    } else {
                        let (c, h, w) = p.shape();
                        Tensor::zeros(c, h, w)
                    }
                })
                .collect();
            let g = backbone_backward_traced(&trace, &params, &only).unwrap();
            for (s, gi) in sum.iter_mut().zip(&g) {
                for (a, b) in s.weights.iter_mut().zip(&gi.weights) {
                    *a += b;
                }
            }
        }
        for (a, b) in both.iter().zip(&sum) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pyramid_stride_validation() {
        let lvl = |s| PyramidLevel {
            activation: Tensor::zeros(1, 2, 2),
            stride: s,
        };
        assert!(FeaturePyramid::new(vec![lvl(2), lvl(4), lvl(4)]).is_ok());
        assert!(matches!(
            FeaturePyramid::new(vec![lvl(4), lvl(2)]),
            Err(Error::StrideOrder(_))
        ));
        assert!(matches!(
            FeaturePyramid::new(vec![lvl(3)]),
            Err(Error::StrideOrder(_))
        ));
    }
}
