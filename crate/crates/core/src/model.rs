//! Full detector: pillar encoder, backbone, neck and head, plus the detect
//! pipeline that runs them end to end.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dethead::{decode, head_forward, nms, rectify_detections, Detection, HeadGeometry, HeadOutput, HeadParams};
use crate::error::{Error, Result};
use crate::mape::{fit_normalization, mape_encode, MapeParams};
use crate::pillargrid::{assign_pillars, augment_points, scatter, BevCanvas, GridConfig, Pillar};
use crate::pointcloud::{generate_scene, PointCloud, Range3D, SceneSpec};
use crate::profile::PostConfig;
use crate::repnet::{backbone_forward, neck_fuse, BackboneConfig, BackboneParams, NeckParams};
use crate::tensor::DenseTensor;

/// The head runs on the neck output, at a quarter of the canvas resolution.
pub const HEAD_STRIDE: usize = 4;

const CALIBRATION_WINDOW: usize = 64;
const CALIBRATION_SEED: u64 = 0x5eed_ca11;

/// Canvas sides must divide by this so the neck's 2x upsampling lines up.
const CANVAS_MULTIPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub mape_dim: usize,
    pub mape_layers: usize,
    pub backbone: BackboneConfig,
    pub neck_channels: usize,
    pub head_hidden: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        if self.backbone.input_hw != [ny, nx] {
            return Err(Error::Config(format!(
                "backbone input {:?} does not match the {ny}x{nx} grid",
                self.backbone.input_hw
            )));
        }
        if nx % CANVAS_MULTIPLE != 0 || ny % CANVAS_MULTIPLE != 0 {
            return Err(Error::Config(format!("grid {ny}x{nx} must divide by {CANVAS_MULTIPLE} on both sides")));
        }
        if self.backbone.in_channels != self.mape_dim {
            return Err(Error::Config("backbone input width must equal the pillar feature width".into()));
        }
        if [self.mape_dim, self.mape_layers, self.neck_channels, self.head_hidden, self.classes].contains(&0) {
            return Err(Error::Config("model widths, depth and class count must be positive".into()));
        }
        Ok(())
    }

    pub fn head_hw(&self) -> [usize; 2] {
        self.backbone.stage_hw()[2]
    }

    pub fn head_geometry(&self) -> HeadGeometry {
        HeadGeometry::from_grid(&self.grid, HEAD_STRIDE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub mape: MapeParams,
    pub backbone: BackboneParams,
    pub neck: NeckParams,
    pub head: HeadParams,
}

impl Model {
    /// Random weights with normalization statistics fitted on a synthetic
    /// scene, so activations stay bounded through the whole network.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::random_uncalibrated(config, seed)?;
        model.calibrate(seed)?;
        Ok(model)
    }

    /// Random weights and random normalization statistics.
    pub fn random_uncalibrated(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.backbone.stage_channels;
        Ok(Model {
            config: config.clone(),
            mape: MapeParams::random_deep(config.mape_dim, config.mape_layers, &mut rng),
            backbone: BackboneParams::random(&config.backbone, &mut rng)?,
            neck: NeckParams::random(c[2], c[3], config.neck_channels, &mut rng),
            head: HeadParams::random(config.neck_channels, config.head_hidden, config.classes, &mut rng),
        })
    }

    /// Fits encoder and backbone statistics on a generated scene confined
    /// to a central window of at most 64x64 pillars.
    pub fn calibrate(&mut self, seed: u64) -> Result<()> {
        let grid = self.config.grid;
        let (wx, wy) = (grid.nx().min(CALIBRATION_WINDOW), grid.ny().min(CALIBRATION_WINDOW));
        let (ix0, iy0) = ((grid.nx() - wx) / 2, (grid.ny() - wy) / 2);
        let r = grid.range;
        let x0 = r.x_min + ix0 as f64 * grid.pillar_x;
        let y0 = r.y_min + iy0 as f64 * grid.pillar_y;
        // keep clear of the window edges so every point maps inside it
        let margin = 1e-6;
        let window = Range3D::new(
            (x0 + margin, (x0 + wx as f64 * grid.pillar_x).min(r.x_max) - margin),
            (y0 + margin, (y0 + wy as f64 * grid.pillar_y).min(r.y_max) - margin),
            (r.z_min, r.z_max),
        )?;
        let mut spec = SceneSpec::small(window, 4);
        spec.num_classes = self.config.classes as u32;
        spec.background_points = 4 * wx * wy;
        let (cloud, _) = generate_scene(&spec, seed ^ CALIBRATION_SEED)?;

        let pillars = assign_pillars(&cloud, &grid)?;
        let aug: Vec<_> = pillars.iter().map(|p| augment_points(&cloud, p, &grid)).collect();
        fit_normalization(&mut self.mape, &aug)?;

        let d = self.config.mape_dim;
        let mut canvas = DenseTensor::zeros([1, d, wy, wx]);
        for (p, a) in pillars.iter().zip(&aug) {
            let f = mape_encode(a, &self.mape)?.f;
            let (row, col) = (p.iy - iy0, p.ix - ix0);
            for (c, v) in f.iter().enumerate() {
                let i = canvas.index(0, c, row, col);
                canvas.data_mut()[i] = *v as f32;
            }
        }
        self.backbone.fit_statistics(&canvas)
    }

    /// Pass-through encoder, backbone and neck; a zero head.
    pub fn identity(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.mape_layers != 1 {
            return Err(Error::Config("identity encoder has exactly one layer".into()));
        }
        let c = config.backbone.stage_channels;
        Ok(Model {
            config: config.clone(),
            mape: MapeParams::identity(config.mape_dim),
            backbone: BackboneParams::identity(&config.backbone)?,
            neck: NeckParams::identity(c[2], c[3], config.neck_channels),
            head: HeadParams::zeros(config.neck_channels, config.head_hidden, config.classes),
        })
    }

    pub fn mode(&self) -> Mode {
        if self.backbone.is_fused() {
            Mode::Fused
        } else {
            Mode::Train
        }
    }

    pub fn fused(&self) -> Result<Self> {
        Ok(Model { backbone: self.backbone.fused()?, ..self.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.mape.validate()?;
        self.head.validate()?;
        let c = self.config.backbone.stage_channels;
        let shapes_ok = self.mape.feature_dim() == self.config.mape_dim
            && self.backbone.in_channels() == self.config.mape_dim
            && self.backbone.stage_channels() == c.to_vec()
            && self.neck.fine_proj.c_in == c[2]
            && self.neck.coarse_proj.c_in == c[3]
            && self.neck.out_channels() == self.config.neck_channels
            && self.head.in_channels() == self.config.neck_channels
            && self.head.classes() == self.config.classes;
        if !shapes_ok {
            return Err(Error::Shape("model parameters do not match the model config".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.mape.to_flat().len() + self.backbone.param_count() + self.neck.param_count() + self.head.param_count()
    }
}

/// Pillarizes a cloud, encodes every pillar and scatters the features.
pub fn encode_canvas(model: &Model, cloud: &PointCloud) -> Result<(Vec<Pillar>, BevCanvas)> {
    let grid = &model.config.grid;
    let pillars = assign_pillars(cloud, grid)?;
    let features = pillars
        .par_iter()
        .map(|p| {
            let aug = augment_points(cloud, p, grid);
            mape_encode(&aug, &model.mape).map(|f| f.f.iter().map(|&v| v as f32).collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    let canvas = scatter(&pillars, &features, model.config.mape_dim, grid)?;
    Ok((pillars, canvas))
}

/// Backbone then neck; returns the head input.
pub fn dense_features(model: &Model, canvas: &DenseTensor) -> Result<DenseTensor> {
    let feats = backbone_forward(canvas, &model.backbone)?;
    let (fine, coarse) = feats.neck_inputs();
    neck_fuse(fine, coarse, &model.neck)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub encode: Duration,
    pub backbone: Duration,
    pub head: Duration,
    pub post: Duration,
}

#[derive(Debug, Clone)]
pub struct DetectRun {
    pub pillars: usize,
    pub detections: Vec<Detection>,
    pub timings: StageTimings,
}

/// Rectify, drop low scores, then NMS.
pub fn postprocess(out: &HeadOutput, geom: &HeadGeometry, post: &PostConfig) -> Result<Vec<Detection>> {
    let mut dets = decode(out, geom, &post.decode)?;
    rectify_detections(&mut dets, &post.rectify_alpha)?;
    dets.retain(|d| d.final_score >= post.score_thresh);
    nms(&dets, &post.nms)
}

/// Runs the whole detector on one cloud. An empty cloud yields no
/// detections without running the network. `head_override` replaces the
/// head output after the dense stages have run.
pub fn detect(model: &Model, cloud: &PointCloud, post: &PostConfig, head_override: Option<&HeadOutput>) -> Result<DetectRun> {
    let mut timings = StageTimings::default();
    if cloud.is_empty() {
        return Ok(DetectRun { pillars: 0, detections: Vec::new(), timings });
    }
    let t = Instant::now();
    let (pillars, canvas) = encode_canvas(model, cloud).map_err(|e| e.at_stage("encode"))?;
    timings.encode = t.elapsed();

    let t = Instant::now();
    let x = dense_features(model, &canvas.features).map_err(|e| e.at_stage("backbone"))?;
    timings.backbone = t.elapsed();

    let t = Instant::now();
    let computed = head_forward(&x, &model.head).map_err(|e| e.at_stage("head"))?;
    let out = match head_override {
        Some(o) => {
            if o.heatmap.shape() != computed.heatmap.shape() {
                return Err(Error::Shape("injected head output does not match the head".into()).at_stage("head"));
            }
            o.clone()
        }
        None => computed,
    };
    timings.head = t.elapsed();

    let t = Instant::now();
    let detections = postprocess(&out, &model.config.head_geometry(), post).map_err(|e| e.at_stage("post"))?;
    timings.post = t.elapsed();
    Ok(DetectRun { pillars: pillars.len(), detections, timings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FuseReport {
    pub probes: usize,
    pub probe_hw: [usize; 2],
    /// largest `max|fused - branched| / max|branched|` over probes and stages
    pub max_rel_discrepancy: f64,
}

/// Compares backbone outputs of two models on random probe canvases.
pub fn fuse_equivalence(reference: &Model, fused: &Model, probes: usize, seed: u64) -> Result<FuseReport> {
    let [h, w] = reference.config.backbone.input_hw;
    let probe_hw = [h.min(32), w.min(32)];
    let c = reference.config.mape_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let n = c * probe_hw[0] * probe_hw[1];
        let data = (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect();
        let x = DenseTensor::from_vec([1, c, probe_hw[0], probe_hw[1]], data)?;
        let a = backbone_forward(&x, &reference.backbone)?;
        let b = backbone_forward(&x, &fused.backbone)?;
        for (ra, rb) in a.stages.iter().zip(&b.stages) {
            worst = worst.max(rb.max_relative_diff(ra)?);
        }
    }
    Ok(FuseReport { probes, probe_hw, max_rel_discrepancy: worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dethead::render_head_output;
    use crate::pointcloud::{generate_scene, SceneSpec};
    use crate::profile::Profile;

    #[test]
    fn desk_model_runs_end_to_end() {
        let p = Profile::desk();
        let model = Model::random(&p.model, 1).unwrap();
        model.validate().unwrap();
        let (cloud, _) = generate_scene(&SceneSpec::small(p.model.grid.range, 3), 5).unwrap();
        let a = detect(&model, &cloud, &p.post, None).unwrap();
        let b = detect(&model, &cloud, &p.post, None).unwrap();
        assert!(a.pillars > 0);
        assert_eq!(a.detections, b.detections);
    }

    #[test]
    fn empty_cloud_gives_no_detections() {
        let p = Profile::desk();
        let model = Model::random(&p.model, 1).unwrap();
        assert!(detect(&model, &PointCloud::empty(), &p.post, None).unwrap().detections.is_empty());
    }

    #[test]
    fn fusion_preserves_backbone() {
        let p = Profile::desk();
        let model = Model::random(&p.model, 2).unwrap();
        let fused = model.fused().unwrap();
        assert_eq!(fused.mode(), Mode::Fused);
        let r = fuse_equivalence(&model, &fused, 2, 0).unwrap();
        assert!(r.max_rel_discrepancy < 1e-4, "{r:?}");
    }

    #[test]
    fn injected_head_output_decodes_planted_boxes() {
        let p = Profile::desk();
        let model = Model::identity(&p.model).unwrap();
        let (cloud, boxes) = generate_scene(&SceneSpec::small(p.model.grid.range, 2), 9).unwrap();
        let geom = p.model.head_geometry();
        let out = render_head_output(&boxes, &geom, 3, p.model.head_hw(), 0.9).unwrap();
        let run = detect(&model, &cloud, &p.post, Some(&out)).unwrap();
        assert_eq!(run.detections.len(), boxes.len());
        for b in &boxes {
            assert!(run.detections.iter().any(|d| (d.bbox.cx - b.cx).abs() < 1e-4 && (d.bbox.cy - b.cy).abs() < 1e-4));
        }
    }

    #[test]
    fn calibrated_model_keeps_activations_bounded() {
        let p = Profile::desk();
        let model = Model::random(&p.model, 3).unwrap();
        let (cloud, _) = generate_scene(&SceneSpec::small(p.model.grid.range, 3), 8).unwrap();
        let (_, canvas) = encode_canvas(&model, &cloud).unwrap();
        let x = dense_features(&model, &canvas.features).unwrap();
        assert!(x.is_finite());
        assert!(x.max_abs() < 1e3, "{}", x.max_abs());
    }

    #[test]
    fn mismatched_config_rejected() {
        let mut c = Profile::desk().model;
        c.backbone.input_hw = [8, 8];
        assert!(Model::random(&c, 0).is_err());
    }
}
