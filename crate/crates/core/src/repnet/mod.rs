//! Dense compute, reparameterizable blocks and their exact fusion, the
//! stage-ratio backbone, the two-level neck, and MAC accounting.

mod backbone;
mod block;
mod conv;
mod flops;
mod neck;

pub use backbone::{backbone_forward, BackboneConfig, BackboneFeatures, BackboneParams, Stage, NUM_STAGES};
pub use block::{fuse_rep_block, RepBlockParams, RepLayer};
pub use conv::{bn_fold, conv2d, identity_to_3x3, pad_1x1_to_3x3, BnParams, ConvParams, DEFAULT_BN_EPS};
pub use flops::{block_scaling, count_macs, count_params, BlockScaling, MacReport, StageCost};
pub use neck::{neck_fuse, NeckParams};
