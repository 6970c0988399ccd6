//! Four-stage single-path backbone built from rep layers.
//!
//! Layout, all 3x3 rep layers:
//! - stem: `in_channels -> stage_channels[0]`, stride 1;
//! - per stage: one transition layer (stride 1 in stage 1, stride 2 after)
//!   followed by `stage_blocks[s]` blocks of `layers_per_block` layers each.
//!
//! Stage 1 runs at the canvas resolution; each later stage halves it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{RepBlockParams, RepLayer};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Width of the incoming pillar features.
    pub in_channels: usize,
    pub stage_blocks: [usize; NUM_STAGES],
    pub stage_channels: [usize; NUM_STAGES],
    /// 3x3 layers per counted block (two, as in a basic residual block).
    #[serde(default = "default_layers_per_block")]
    pub layers_per_block: usize,
    /// Canvas `(height, width)` used for MAC accounting.
    pub input_hw: [usize; 2],
}

fn default_layers_per_block() -> usize {
    2
}

impl BackboneConfig {
    pub fn new(in_channels: usize, stage_blocks: [usize; NUM_STAGES], base_channels: usize, input_hw: [usize; 2]) -> Self {
        Self {
            in_channels,
            stage_blocks,
            stage_channels: std::array::from_fn(|s| base_channels << s),
            layers_per_block: default_layers_per_block(),
            input_hw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stage_channels[0] == 0 || self.layers_per_block == 0 {
            return Err(Error::Config("channel counts and layers_per_block must be positive".into()));
        }
        for s in 1..NUM_STAGES {
            if self.stage_channels[s] != 2 * self.stage_channels[s - 1] {
                return Err(Error::Config(format!(
                    "stage channels must double per stage, got {:?}",
                    self.stage_channels
                )));
            }
        }
        if self.input_hw.contains(&0) {
            return Err(Error::Config("input grid dims must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_stride(s: usize) -> usize {
        if s == 0 {
            1
        } else {
            2
        }
    }

    /// Spatial dims of each stage output for the configured input.
    pub fn stage_hw(&self) -> [[usize; 2]; NUM_STAGES] {
        let mut hw = self.input_hw;
        std::array::from_fn(|s| {
            if Self::stage_stride(s) == 2 {
                hw = hw.map(|d| (d - 1) / 2 + 1);
            }
            hw
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub transition: RepLayer,
    pub layers: Vec<RepLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub stem: RepLayer,
    pub stages: Vec<Stage>,
}

impl BackboneParams {
    fn build(cfg: &BackboneConfig, mut make: impl FnMut(usize, usize, usize) -> RepBlockParams) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stage_channels[0];
        let stem = RepLayer::Branched(make(cfg.in_channels, c0, 1));
        let mut prev = c0;
        let stages = (0..NUM_STAGES)
            .map(|s| {
                let c = cfg.stage_channels[s];
                let transition = RepLayer::Branched(make(prev, c, BackboneConfig::stage_stride(s)));
                prev = c;
                let layers = (0..cfg.stage_blocks[s] * cfg.layers_per_block)
                    .map(|_| RepLayer::Branched(make(c, c, 1)))
                    .collect();
                Stage { transition, layers }
            })
            .collect();
        Ok(Self { stem, stages })
    }

    pub fn random<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, |ci, co, s| RepBlockParams::random(ci, co, s, rng))
    }

    pub fn identity(cfg: &BackboneConfig) -> Result<Self> {
        Self::build(cfg, RepBlockParams::identity)
    }

    pub fn layers(&self) -> impl Iterator<Item = &RepLayer> {
        std::iter::once(&self.stem)
            .chain(self.stages.iter().flat_map(|s| std::iter::once(&s.transition).chain(&s.layers)))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut RepLayer> {
        std::iter::once(&mut self.stem)
            .chain(self.stages.iter_mut().flat_map(|s| std::iter::once(&mut s.transition).chain(&mut s.layers)))
    }

    /// Inference copy with every layer collapsed to one 3x3 conv.
    pub fn fused(&self) -> Result<Self> {
        let mut out = self.clone();
        for layer in out.layers_mut() {
            *layer = layer.fused()?;
        }
        Ok(out)
    }

    /// Fits every branched layer's statistics on the activations produced
    /// by `x`, front to back.
    pub fn fit_statistics(&mut self, x: &DenseTensor) -> Result<()> {
        let mut h = self.stem.fit_forward(x)?;
        for stage in &mut self.stages {
            h = stage.transition.fit_forward(&h)?;
            for layer in &mut stage.layers {
                h = layer.fit_forward(&h)?;
            }
        }
        Ok(())
    }

    pub fn is_fused(&self) -> bool {
        self.layers().all(RepLayer::is_fused)
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(RepLayer::param_count).sum()
    }

    pub fn in_channels(&self) -> usize {
        self.stem.signature().0
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.transition.signature().1).collect()
    }
}

/// Outputs of the four stages; the last two feed the neck.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneFeatures {
    pub stages: Vec<DenseTensor>,
}

impl BackboneFeatures {
    /// `(finer, coarser)` neck inputs: stage 3 and stage 4 outputs.
    pub fn neck_inputs(&self) -> (&DenseTensor, &DenseTensor) {
        (&self.stages[2], &self.stages[3])
    }
}

pub fn backbone_forward(x: &DenseTensor, params: &BackboneParams) -> Result<BackboneFeatures> {
    if x.channels() != params.in_channels() {
        return Err(Error::Shape(format!(
            "backbone expects {} input channels, got {}",
            params.in_channels(),
            x.channels()
        )));
    }
    let mut h = params.stem.forward(x)?;
    let mut stages = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        h = stage.transition.forward(&h)?;
        for layer in &stage.layers {
            h = layer.forward(&h)?;
        }
        stages.push(h.clone());
    }
    Ok(BackboneFeatures { stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn non_doubling_channels_rejected() {
        let mut cfg = BackboneConfig::new(8, [1, 1, 1, 1], 8, [16, 16]);
        cfg.stage_channels[2] = 24;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_shapes_halve() {
        let cfg = BackboneConfig::new(4, [1, 1, 1, 1], 4, [16, 12]);
        assert_eq!(cfg.stage_hw(), [[16, 12], [8, 6], [4, 3], [2, 2]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = BackboneParams::random(&cfg, &mut rng).unwrap();
        let x = DenseTensor::full([1, 4, 16, 12], 0.3);
        let out = backbone_forward(&x, &params).unwrap();
        let shapes: Vec<_> = out.stages.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![[1, 4, 16, 12], [1, 8, 8, 6], [1, 16, 4, 3], [1, 32, 2, 2]]);
    }

    #[test]
    fn zero_blocks_keep_transitions() {
        let cfg = BackboneConfig::new(4, [0, 2, 2, 2], 4, [8, 8]);
        let params = BackboneParams::identity(&cfg).unwrap();
        assert!(params.stages[0].layers.is_empty());
        assert_eq!(params.stages[1].layers.len(), 4);
        assert_eq!(params.stages[0].transition.signature(), (4, 4, 1));
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let cfg = BackboneConfig::new(4, [0, 0, 0, 0], 4, [8, 8]);
        let params = BackboneParams::identity(&cfg).unwrap();
        assert!(backbone_forward(&DenseTensor::zeros([1, 3, 8, 8]), &params).is_err());
    }
}
