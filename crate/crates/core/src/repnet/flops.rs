//! Analytic MAC and parameter accounting for the backbone.
//!
//! Every rep layer is counted in its fused form: one 3x3 convolution costs
//! `9 * c_in * c_out * h_out * w_out` multiply-accumulates and holds
//! `9 * c_in * c_out + c_out` parameters. GFLOPs are reported as GMACs.

use serde::Serialize;

use super::backbone::{BackboneConfig, NUM_STAGES};
use crate::error::{Error, Result};

const KERNEL_TAPS: u64 = 9;

fn layer_macs(c_in: usize, c_out: usize, hw: [usize; 2]) -> u64 {
    KERNEL_TAPS * (c_in * c_out) as u64 * (hw[0] * hw[1]) as u64
}

fn layer_params(c_in: usize, c_out: usize) -> u64 {
    KERNEL_TAPS * (c_in * c_out) as u64 + c_out as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub stage: usize,
    pub channels: usize,
    pub hw: [usize; 2],
    pub blocks: usize,
    pub transition_macs: u64,
    /// Cost of one counted block (`layers_per_block` layers).
    pub per_block_macs: u64,
    pub total_macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub config: BackboneConfig,
    pub stem_macs: u64,
    pub stem_params: u64,
    pub stages: Vec<StageCost>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl MacReport {
    pub fn total_gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// MAC cost of the stem and all transitions, i.e. the total at ratio (0,0,0,0).
    pub fn fixed_macs(&self) -> u64 {
        self.stem_macs + self.stages.iter().map(|s| s.transition_macs).sum::<u64>()
    }
}

pub fn count_macs(cfg: &BackboneConfig) -> Result<MacReport> {
    cfg.validate()?;
    let hw = cfg.stage_hw();
    let c0 = cfg.stage_channels[0];
    let stem_macs = layer_macs(cfg.in_channels, c0, cfg.input_hw);
    let stem_params = layer_params(cfg.in_channels, c0);
    let mut prev = c0;
    let stages: Vec<StageCost> = (0..NUM_STAGES)
        .map(|s| {
            let c = cfg.stage_channels[s];
            let transition_macs = layer_macs(prev, c, hw[s]);
            let per_block_macs = cfg.layers_per_block as u64 * layer_macs(c, c, hw[s]);
            let blocks = cfg.stage_blocks[s];
            let params = layer_params(prev, c) + (blocks * cfg.layers_per_block) as u64 * layer_params(c, c);
            prev = c;
            StageCost {
                stage: s + 1,
                channels: c,
                hw: hw[s],
                blocks,
                transition_macs,
                per_block_macs,
                total_macs: transition_macs + blocks as u64 * per_block_macs,
                params,
            }
        })
        .collect();
    let total_macs = stem_macs + stages.iter().map(|s| s.total_macs).sum::<u64>();
    let total_params = stem_params + stages.iter().map(|s| s.params).sum::<u64>();
    Ok(MacReport { config: cfg.clone(), stem_macs, stem_params, stages, total_macs, total_params })
}

/// Fused (inference) parameter count of the backbone.
pub fn count_params(cfg: &BackboneConfig) -> Result<u64> {
    Ok(count_macs(cfg)?.total_params)
}

/// Per-block MACs of one stage as a monomial
/// `coeff * c0^2 * h0 * w0 * 2^(channel_exp + spatial_exp)`, where `c0` and
/// `h0 x w0` are the stage-1 width and resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockScaling {
    pub coeff: u64,
    pub channel_exp: i32,
    pub spatial_exp: i32,
}

impl BlockScaling {
    pub fn net_exp(&self) -> i32 {
        self.channel_exp + self.spatial_exp
    }

    pub fn eval(&self, c0: u64, h0w0: u64) -> f64 {
        self.coeff as f64 * (c0 * c0 * h0w0) as f64 * 2f64.powi(self.net_exp())
    }
}

/// Symbolic per-block scaling of every stage. Widths must be power-of-two
/// multiples of the stage-1 width; each stride-2 stage contributes `2^-2`
/// to the spatial factor.
pub fn block_scaling(cfg: &BackboneConfig) -> Result<[BlockScaling; NUM_STAGES]> {
    cfg.validate()?;
    let c0 = cfg.stage_channels[0];
    let mut halvings = 0;
    let mut out = [BlockScaling { coeff: 0, channel_exp: 0, spatial_exp: 0 }; NUM_STAGES];
    for (s, slot) in out.iter_mut().enumerate() {
        let c = cfg.stage_channels[s];
        if !c.is_multiple_of(c0) || !(c / c0).is_power_of_two() {
            return Err(Error::Config(format!("stage width {c} is not a power-of-two multiple of {c0}")));
        }
        if BackboneConfig::stage_stride(s) == 2 {
            halvings += 1;
        }
        *slot = BlockScaling {
            coeff: KERNEL_TAPS * cfg.layers_per_block as u64,
            channel_exp: 2 * (c / c0).trailing_zeros() as i32,
            spatial_exp: -2 * halvings,
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repnet::BackboneParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn per_block_macs_equal_across_stages() {
        let cfg = BackboneConfig::new(64, [2, 2, 2, 2], 64, [64, 64]);
        let r = count_macs(&cfg).unwrap();
        let first = r.stages[0].per_block_macs;
        assert!(r.stages.iter().all(|s| s.per_block_macs == first));
        assert_eq!(first, 2 * 9 * 64 * 64 * 64 * 64);
    }

    #[test]
    fn symbolic_exponents_cancel() {
        let cfg = BackboneConfig::new(64, [6, 6, 3, 1], 64, [752, 752]);
        for s in block_scaling(&cfg).unwrap() {
            assert_eq!(s.net_exp(), 0);
            assert_eq!(s.coeff, 18);
        }
    }

    #[test]
    fn zero_ratio_is_transitions_only() {
        let cfg = BackboneConfig::new(16, [0, 0, 0, 0], 16, [32, 32]);
        let r = count_macs(&cfg).unwrap();
        assert!(r.total_macs > 0);
        assert_eq!(r.total_macs, r.fixed_macs());
    }

    #[test]
    fn analytic_params_match_instantiated_fused_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig::new(5, [1, 2, 0, 1], 4, [16, 16]);
        let fused = BackboneParams::random(&cfg, &mut rng).unwrap().fused().unwrap();
        assert_eq!(count_params(&cfg).unwrap(), fused.param_count() as u64);
    }
}
