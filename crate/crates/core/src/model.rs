//! The full set of learnable parameters and their gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::css::{CssConfig, LevelPatterns, Offset, SamplingPatterns};
use crate::error::{Error, Result};
use crate::tensor::ConvParams;
use crate::Real;

/// Sampling patterns per level in the default model.
pub const DEFAULT_PATTERNS_PER_LEVEL: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub patterns_per_level: Vec<usize>,
    pub css: CssConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let levels = backbone.levels();
        Self {
            backbone,
            patterns_per_level: vec![DEFAULT_PATTERNS_PER_LEVEL; levels],
            css: CssConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.backbone.levels()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.patterns_per_level.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.css.validate()?;
        if self.patterns_per_level.len() != self.backbone.levels() {
            return Err(Error::Config(format!(
                "{} pattern counts for {} backbone levels",
                self.patterns_per_level.len(),
                self.backbone.levels()
            )));
        }
        if self.patterns_per_level.contains(&0) {
            return Err(Error::Config("every level needs at least one pattern".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub patterns: SamplingPatterns,
    pub css: CssConfig,
}

impl Model {
    /// Random initialization: Glorot backbone, patterns uniform in the disk
    /// of the configured radius, unit bandwidth.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneParams::init(config.backbone.clone(), &mut rng)?;
        let patterns =
            SamplingPatterns::random(&mut rng, &config.patterns_per_level, config.css.pattern_radius);
        Ok(Self {
            backbone,
            patterns,
            css: config.css,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config.clone(),
            patterns_per_level: self.patterns.per_level(),
            css: self.css,
        }
    }

    pub fn levels(&self) -> usize {
        self.patterns.levels.len()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.patterns.total_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.config().validate()?;
        for (k, l) in self.patterns.levels.iter().enumerate() {
            if l.offsets_s.len() != l.offsets_t.len() {
                return Err(Error::Config(format!("level {k} streams differ in length")));
            }
            if !l.log_bandwidth.is_finite() {
                return Err(Error::Config(format!("level {k} bandwidth is not finite")));
            }
        }
        Ok(())
    }
}

/// Gradient of one level's pattern parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrad {
    pub offsets_s: Vec<Offset>,
    pub offsets_t: Vec<Offset>,
    /// With respect to the log-bandwidth parameter.
    pub log_bandwidth: Real,
}

impl LevelGrad {
    pub fn zeros(len: usize) -> Self {
        Self {
            offsets_s: vec![Offset::ZERO; len],
            offsets_t: vec![Offset::ZERO; len],
            log_bandwidth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub backbone: Vec<ConvParams>,
    pub patterns: Vec<LevelGrad>,
}

impl ModelGrad {
    pub fn zeros(model: &Model) -> Self {
        Self {
            backbone: model.backbone.zeros_like(),
            patterns: model.patterns.levels.iter().map(|l| LevelGrad::zeros(l.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.patterns.iter_mut().zip(&other.patterns) {
            for (x, y) in a.offsets_s.iter_mut().zip(&b.offsets_s) {
                x.x += y.x;
                x.y += y.y;
            }
            for (x, y) in a.offsets_t.iter_mut().zip(&b.offsets_t) {
                x.x += y.x;
                x.y += y.y;
            }
            a.log_bandwidth += b.log_bandwidth;
        }
    }

    pub fn backbone_is_zero(&self) -> bool {
        self.backbone
            .iter()
            .all(|p| p.weights.iter().chain(&p.bias).all(|v| *v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    BackboneWeight,
    BackboneBias,
    OffsetS,
    OffsetT,
    LogBandwidth,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::BackboneWeight => "W_c.weights",
            ParamGroup::BackboneBias => "W_c.bias",
            ParamGroup::OffsetS => "W_s",
            ParamGroup::OffsetT => "W_t",
            ParamGroup::LogBandwidth => "W_lambda",
        }
    }
}

impl Model {
    /// Flat view used by the gradient checks. Order: backbone weights and
    /// biases layer by layer, then per level `s` offsets, `t` offsets and
    /// log-bandwidth.
    pub fn flatten(&self) -> Vec<(ParamGroup, Real)> {
        let mut out = Vec::new();
        for l in &self.backbone.layers {
            out.extend(l.weights.iter().map(|v| (ParamGroup::BackboneWeight, *v)));
            out.extend(l.bias.iter().map(|v| (ParamGroup::BackboneBias, *v)));
        }
        for l in &self.patterns.levels {
            out.extend(l.offsets_s.iter().flat_map(|o| [(ParamGroup::OffsetS, o.x), (ParamGroup::OffsetS, o.y)]));
            out.extend(l.offsets_t.iter().flat_map(|o| [(ParamGroup::OffsetT, o.x), (ParamGroup::OffsetT, o.y)]));
            out.push((ParamGroup::LogBandwidth, l.log_bandwidth));
        }
        out
    }

    /// Overwrite parameters from a flat vector in [`Model::flatten`] order.
    pub fn set_flat(&mut self, values: &[Real]) {
        let mut it = values.iter().copied();
        let mut next = || it.next().expect("flat parameter vector too short");
        for l in &mut self.backbone.layers {
            l.weights.iter_mut().for_each(|v| *v = next());
            l.bias.iter_mut().for_each(|v| *v = next());
        }
        for l in &mut self.patterns.levels {
            for o in l.offsets_s.iter_mut().chain(l.offsets_t.iter_mut()) {
                o.x = next();
                o.y = next();
            }
            l.log_bandwidth = next();
        }
    }
}

impl ModelGrad {
    /// Same order as [`Model::flatten`].
    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::new();
        for l in &self.backbone {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        for l in &self.patterns {
            out.extend(l.offsets_s.iter().flat_map(|o| [o.x, o.y]));
            out.extend(l.offsets_t.iter().flat_map(|o| [o.x, o.y]));
            out.push(l.log_bandwidth);
        }
        out
    }
}

/// Patterns for the handcrafted self-similarity baseline: a fixed ring of
/// offsets compared against the centre, frozen at unit bandwidth.
pub fn handcrafted_patterns(count: usize, radius: Real) -> Result<LevelPatterns> {
    let offsets_s = (0..count)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI as Real * i as Real / count as Real;
            Offset::new(radius * a.cos(), radius * a.sin())
        })
        .collect();
    LevelPatterns::new(offsets_s, vec![Offset::ZERO; count], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_structure() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.levels(), 3);
        assert_eq!(cfg.patterns_per_level, vec![64, 64, 64]);
        assert_eq!(cfg.descriptor_dim(), 192);
        let m = Model::init(cfg, 0).unwrap();
        m.validate().unwrap();
        for l in &m.patterns.levels {
            assert_eq!(l.bandwidth(), 1.0);
            assert!(l.offsets_s.iter().chain(&l.offsets_t).all(|o| o.norm() <= 4.0));
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(ModelConfig::default(), 5).unwrap();
        let b = Model::init(ModelConfig::default(), 5).unwrap();
        let c = Model::init(ModelConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn flat_roundtrip() {
        let m = Model::init(ModelConfig::default(), 1).unwrap();
        let flat: Vec<Real> = m.flatten().into_iter().map(|(_, v)| v).collect();
        let mut n = Model::init(ModelConfig::default(), 2).unwrap();
        n.set_flat(&flat);
        assert_eq!(m, n);
        assert_eq!(ModelGrad::zeros(&m).flatten().len(), flat.len());
    }

    #[test]
    fn mismatched_pattern_levels_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.patterns_per_level = vec![8, 8];
        assert!(Model::init(cfg, 0).is_err());
    }

    #[test]
    fn handcrafted_ring() {
        let p = handcrafted_patterns(8, 2.0).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.offsets_s.iter().all(|o| (o.norm() - 2.0).abs() < 1e-12));
        assert!(p.offsets_t.iter().all(|o| *o == Offset::ZERO));
    }
}
