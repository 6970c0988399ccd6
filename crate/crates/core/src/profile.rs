//! Named configuration bundles.

use serde::{Deserialize, Serialize};

use crate::dethead::{DecodeConfig, NmsConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::pillargrid::GridConfig;
use crate::pointcloud::{AugmentSpec, Range3D};
use crate::repnet::BackboneConfig;

/// Post-processing after decoding: rectification, score floor, NMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostConfig {
    pub decode: DecodeConfig,
    /// one exponent per class, or one shared by all
    pub rectify_alpha: Vec<f64>,
    /// detections with a rectified score below this are dropped before NMS
    pub score_thresh: f64,
    pub nms: NmsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub class_names: Vec<String>,
    pub model: ModelConfig,
    pub post: PostConfig,
    pub loss_weights: LossWeights,
    pub augment: AugmentSpec,
}

pub const PROFILE_NAMES: [&str; 3] = ["waymo", "nuscenes", "desk"];

const STAGE_BLOCKS: [usize; 4] = [6, 6, 3, 1];
const BASE_CHANNELS: usize = 64;
const MAPE_DIM: usize = 64;

fn square_grid(half: f64, z: (f64, f64), pillar: f64) -> GridConfig {
    let range = Range3D::new((-half, half), (-half, half), z).expect("static range");
    GridConfig::new(range, pillar, pillar).expect("static grid")
}

fn model(grid: GridConfig, mape_dim: usize, base: usize, classes: usize) -> ModelConfig {
    let backbone = BackboneConfig::new(mape_dim, STAGE_BLOCKS, base, [grid.ny(), grid.nx()]);
    ModelConfig { grid, mape_dim, mape_layers: 1, backbone, neck_channels: 2 * base, head_hidden: base, classes }
}

impl Profile {
    pub fn waymo() -> Self {
        let grid = square_grid(75.2, (-2.0, 4.0), 0.2);
        Profile {
            name: "waymo".into(),
            class_names: ["vehicle", "pedestrian", "cyclist"].map(String::from).to_vec(),
            model: model(grid, MAPE_DIM, BASE_CHANNELS, 3),
            post: PostConfig {
                decode: DecodeConfig::default(),
                rectify_alpha: vec![0.68, 0.71, 0.65],
                score_thresh: 0.1,
                nms: NmsConfig::ClassSpecific(vec![0.8, 0.55, 0.55]),
            },
            loss_weights: LossWeights::default(),
            augment: AugmentSpec::training_default(),
        }
    }

    pub fn nuscenes() -> Self {
        let grid = square_grid(54.0, (-5.0, 3.0), 0.15);
        let classes = [
            "car",
            "truck",
            "construction_vehicle",
            "bus",
            "trailer",
            "barrier",
            "motorcycle",
            "bicycle",
            "pedestrian",
            "traffic_cone",
        ];
        Profile {
            name: "nuscenes".into(),
            class_names: classes.map(String::from).to_vec(),
            model: model(grid, MAPE_DIM, BASE_CHANNELS, classes.len()),
            post: PostConfig {
                decode: DecodeConfig::default(),
                rectify_alpha: vec![0.5],
                score_thresh: 0.2,
                nms: NmsConfig::ClassAgnostic(0.2),
            },
            loss_weights: LossWeights::default(),
            augment: AugmentSpec::training_default(),
        }
    }

    /// Small grid and narrow network that runs end to end in well under a
    /// second on a CPU. Post-processing follows the waymo profile.
    pub fn desk() -> Self {
        let grid = square_grid(12.8, (-2.0, 4.0), 0.4);
        let waymo = Self::waymo();
        Profile {
            name: "desk".into(),
            class_names: waymo.class_names.clone(),
            model: model(grid, 16, 16, 3),
            post: waymo.post,
            loss_weights: LossWeights::default(),
            augment: AugmentSpec::training_default(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "waymo" => Ok(Self::waymo()),
            "nuscenes" => Ok(Self::nuscenes()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown profile {name:?}; expected one of {PROFILE_NAMES:?}"))),
        }
    }

    /// Reads a profile from TOML. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Profile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        self.augment.validate()?;
        let classes = self.model.classes;
        if self.class_names.len() != classes {
            return Err(Error::Config(format!("{} class names for {classes} classes", self.class_names.len())));
        }
        let alphas = &self.post.rectify_alpha;
        if !(alphas.len() == 1 || alphas.len() == classes) || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("rectify_alpha needs 1 or one-per-class values in [0, 1]".into()));
        }
        if let NmsConfig::ClassSpecific(t) = &self.post.nms {
            if t.len() != classes {
                return Err(Error::Config(format!("{} NMS thresholds for {classes} classes", t.len())));
            }
        }
        Ok(())
    }
}
