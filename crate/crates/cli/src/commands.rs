use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use pillardet::checkpoint::{load_checkpoint, save_checkpoint};
use pillardet::dethead::{head_forward, render_head_output, DetectionRecord};
use pillardet::error::Error;
use pillardet::losses::render_gaussian_targets;
use pillardet::model::{dense_features, detect, encode_canvas, fuse_equivalence, Model};
use pillardet::pillargrid::assign_pillars;
use pillardet::pointcloud::{crop_to_range, generate_scene, load_boxes, load_cloud, save_boxes, save_cloud, PointCloud, SceneSpec};
use pillardet::profile::Profile;
use pillardet::repnet::{block_scaling, count_macs, BackboneConfig};
use pillardet::train::train_step;

use crate::output::{Emitter, Format};
use crate::{Command, Global};

/// Largest fused-vs-branched discrepancy accepted by `fuse`.
const FUSE_TOLERANCE: f64 = 1e-4;

pub(crate) fn run(g: &Global, cmd: Command) -> Result<()> {
    let profile = load_profile(&g.profile)?;
    let mut em = Emitter::new(g.format);
    let artifact_out = matches!(cmd, Command::Generate(_) | Command::Init(_));
    match cmd {
        Command::Generate(a) => generate(g, &profile, &a, &mut em)?,
        Command::Pillarize(a) => pillarize(&profile, &a, &mut em)?,
        Command::Encode(a) => encode(g, &profile, &a, &mut em)?,
        Command::Init(a) => init(g, &profile, &a, &mut em)?,
        Command::Fuse(a) => fuse(g, &a, &mut em)?,
        Command::Flops(a) => flops(&profile, &a, &mut em)?,
        Command::Detect(a) => detect_cmd(g, &profile, &a, &mut em)?,
        Command::Bench(a) => bench(g, &profile, &a, &mut em)?,
        Command::TrainStep(a) => train_step_cmd(g, &profile, &a, &mut em)?,
    }
    // commands that write an artifact to --out report on stdout
    em.finish(if artifact_out { None } else { g.out.as_deref() })
}

fn load_profile(spec: &str) -> Result<Profile> {
    if spec.ends_with(".toml") {
        let text = std::fs::read_to_string(spec).with_context(|| format!("reading profile {spec}"))?;
        return Profile::from_toml(&text).with_context(|| format!("profile {spec}"));
    }
    Ok(Profile::by_name(spec)?)
}

fn read_cloud(path: &Path, profile: &Profile, crop: bool) -> Result<PointCloud> {
    let cloud = load_cloud(path).with_context(|| format!("loading cloud {}", path.display()))?;
    Ok(if crop { crop_to_range(&cloud, &profile.model.grid.range) } else { cloud })
}

fn model_for(g: &Global, profile: &Profile, checkpoint: Option<&Path>, identity: bool) -> Result<Model> {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None if identity => Model::identity(&profile.model)?,
        None => Model::random(&profile.model, g.seed)?,
    };
    if model.config != profile.model {
        bail!(Error::Config("checkpoint model does not match the selected profile".into()));
    }
    Ok(model)
}

fn required_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| anyhow::anyhow!(Error::Config("--out is required for this command".into())))
}

pub(crate) fn boxes_path(cloud: &Path) -> PathBuf {
    let mut s = cloud.as_os_str().to_owned();
    s.push(".boxes.toml");
    PathBuf::from(s)
}

#[derive(Debug, Args)]
pub(crate) struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    objects: usize,
    #[arg(long, default_value_t = 64)]
    points_per_object: usize,
    #[arg(long, default_value_t = 500)]
    background: usize,
}

#[derive(Serialize)]
struct GenerateSummary {
    cloud: String,
    boxes: String,
    points: usize,
    objects: usize,
}

fn generate(g: &Global, profile: &Profile, a: &GenerateArgs, em: &mut Emitter) -> Result<()> {
    let out = required_out(g)?;
    let mut spec = SceneSpec::small(profile.model.grid.range, a.objects);
    spec.num_classes = profile.model.classes as u32;
    spec.points_per_object = a.points_per_object;
    spec.background_points = a.background;
    let (cloud, boxes) = generate_scene(&spec, g.seed)?;
    save_cloud(out, &cloud)?;
    let bp = boxes_path(out);
    save_boxes(&bp, &boxes)?;
    let s = GenerateSummary {
        cloud: out.display().to_string(),
        boxes: bp.display().to_string(),
        points: cloud.len(),
        objects: boxes.len(),
    };
    em.summary(&s, |s| format!("wrote {} points to {} and {} boxes to {}", s.points, s.cloud, s.objects, s.boxes))
}

#[derive(Debug, Args)]
pub(crate) struct PillarizeArgs {
    cloud: PathBuf,
    /// Drop points outside the profile range instead of failing
    #[arg(long)]
    crop: bool,
    /// Emit one record per pillar after the summary
    #[arg(long)]
    records: bool,
}

#[derive(Serialize)]
struct PillarSummary {
    points: usize,
    pillars: usize,
    nx: usize,
    ny: usize,
    /// pillar counts by points-per-pillar bucket `[2^k, 2^(k+1))`
    histogram: String,
}

#[derive(Serialize)]
struct PillarRecord {
    ix: usize,
    iy: usize,
    points: usize,
}

fn pillarize(profile: &Profile, a: &PillarizeArgs, em: &mut Emitter) -> Result<()> {
    let grid = &profile.model.grid;
    let cloud = read_cloud(&a.cloud, profile, a.crop)?;
    let pillars = assign_pillars(&cloud, grid)?;
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for p in &pillars {
        *hist.entry(p.len().ilog2()).or_default() += 1;
    }
    let histogram = hist
        .iter()
        .map(|(k, n)| format!("{}-{}:{n}", 1usize << k, (2usize << k) - 1))
        .collect::<Vec<_>>()
        .join(" ");
    let s = PillarSummary { points: cloud.len(), pillars: pillars.len(), nx: grid.nx(), ny: grid.ny(), histogram };
    if !(a.records && em.format() == Format::Csv) {
        em.summary(&s, |s| {
            format!("points: {}\npillars: {}\ngrid: {}x{}\nhistogram: {}", s.points, s.pillars, s.nx, s.ny, s.histogram)
        })?;
    }
    if a.records {
        let rows: Vec<PillarRecord> = pillars.iter().map(|p| PillarRecord { ix: p.ix, iy: p.iy, points: p.len() }).collect();
        em.records(&rows, |r| format!("{} {} {}", r.ix, r.iy, r.points))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub(crate) struct EncodeArgs {
    cloud: PathBuf,
    /// Checkpoint to take encoder weights from; random weights from --seed otherwise
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    crop: bool,
}

#[derive(Serialize)]
struct FeatureRecord {
    ix: usize,
    iy: usize,
    points: usize,
    feature: String,
}

fn encode(g: &Global, profile: &Profile, a: &EncodeArgs, em: &mut Emitter) -> Result<()> {
    let model = model_for(g, profile, a.checkpoint.as_deref(), false)?;
    let cloud = read_cloud(&a.cloud, profile, a.crop)?;
    let (pillars, canvas) = encode_canvas(&model, &cloud)?;
    let feats = pillardet::pillargrid::gather(&canvas, &pillars);
    let rows: Vec<FeatureRecord> = pillars
        .iter()
        .zip(&feats)
        .map(|(p, f)| FeatureRecord {
            ix: p.ix,
            iy: p.iy,
            points: p.len(),
            feature: f.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" "),
        })
        .collect();
    em.records(&rows, |r| format!("{} {} {} | {}", r.ix, r.iy, r.points, r.feature))
}

#[derive(Debug, Args)]
pub(crate) struct InitArgs {
    /// Pass-through encoder, backbone and neck instead of random weights
    #[arg(long)]
    identity: bool,
}

#[derive(Serialize)]
struct InitSummary {
    checkpoint: String,
    params: usize,
}

fn init(g: &Global, profile: &Profile, a: &InitArgs, em: &mut Emitter) -> Result<()> {
    let out = required_out(g)?;
    let model = model_for(g, profile, None, a.identity)?;
    save_checkpoint(&model, out)?;
    let s = InitSummary { checkpoint: out.display().to_string(), params: model.param_count() };
    em.summary(&s, |s| format!("wrote {} ({} parameters)", s.checkpoint, s.params))
}

#[derive(Debug, Args)]
pub(crate) struct FuseArgs {
    checkpoint: PathBuf,
    /// Where the fused checkpoint goes
    fused: PathBuf,
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

#[derive(Serialize)]
struct FuseSummary {
    fused: String,
    probes: usize,
    probe_h: usize,
    probe_w: usize,
    max_rel_discrepancy: f64,
    params_before: usize,
    params_after: usize,
}

fn fuse(g: &Global, a: &FuseArgs, em: &mut Emitter) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let fused = model.fused()?;
    let r = fuse_equivalence(&model, &fused, a.probes, g.seed)?;
    let s = FuseSummary {
        fused: a.fused.display().to_string(),
        probes: r.probes,
        probe_h: r.probe_hw[0],
        probe_w: r.probe_hw[1],
        max_rel_discrepancy: r.max_rel_discrepancy,
        params_before: model.param_count(),
        params_after: fused.param_count(),
    };
    if !(r.max_rel_discrepancy < FUSE_TOLERANCE) {
        bail!(Error::Invariant(format!(
            "fused backbone deviates by {:.3e} (bound {FUSE_TOLERANCE:e})",
            r.max_rel_discrepancy
        )));
    }
    save_checkpoint(&fused, &a.fused)?;
    em.summary(&s, |s| {
        format!(
            "wrote {}\nprobes: {} at {}x{}\nmax relative discrepancy: {:.3e}\nparameters: {} -> {}",
            s.fused, s.probes, s.probe_h, s.probe_w, s.max_rel_discrepancy, s.params_before, s.params_after
        )
    })
}

#[derive(Debug, Args)]
pub(crate) struct FlopsArgs {
    /// Blocks per stage, e.g. 6,6,3,1; repeatable. Defaults to the stage sweep table.
    #[arg(long = "ratio", value_parser = parse_ratio)]
    ratios: Vec<[usize; 4]>,
}

fn parse_ratio(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().map_err(|e| format!("{x:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected 4 comma-separated counts, got {}", v.len()))
}

fn default_ratios() -> Vec<[usize; 4]> {
    let mut v = vec![[2, 2, 2, 2]];
    for s in 0..4 {
        for n in [0, 4, 6] {
            let mut r = [2; 4];
            r[s] = n;
            v.push(r);
        }
    }
    v.push([3, 4, 6, 3]);
    v.push([6, 6, 3, 1]);
    v
}

#[derive(Serialize)]
struct FlopsRow {
    kind: &'static str,
    ratio: String,
    gmacs: f64,
    params_m: f64,
    delta_gmacs: f64,
}

fn ratio_label(r: &[usize; 4]) -> String {
    r.map(|n| n.to_string()).join(",")
}

fn flops(profile: &Profile, a: &FlopsArgs, em: &mut Emitter) -> Result<()> {
    let base = &profile.model.backbone;
    let ratios = if a.ratios.is_empty() { default_ratios() } else { a.ratios.clone() };
    let cfg_for = |r: [usize; 4]| BackboneConfig { stage_blocks: r, ..base.clone() };
    let first = count_macs(&cfg_for(ratios[0]))?;
    let mut rows = Vec::new();
    let mut totals = BTreeMap::new();
    for r in &ratios {
        let rep = count_macs(&cfg_for(*r))?;
        totals.insert(*r, rep.total_macs);
        rows.push(FlopsRow {
            kind: "total",
            ratio: ratio_label(r),
            gmacs: rep.total_gmacs(),
            params_m: rep.total_params as f64 / 1e6,
            delta_gmacs: (rep.total_macs as f64 - first.total_macs as f64) / 1e9,
        });
    }
    for s in &first.stages {
        rows.push(FlopsRow {
            kind: "slope_per_2_blocks",
            ratio: format!("stage{}", s.stage),
            gmacs: 2.0 * s.per_block_macs as f64 / 1e9,
            params_m: 0.0,
            delta_gmacs: 0.0,
        });
    }
    let scaling = block_scaling(base)?;
    em.note(format!(
        "profile {}: grid {}x{}, channels {:?}, {} layers per block",
        profile.name, base.input_hw[0], base.input_hw[1], base.stage_channels, base.layers_per_block
    ));
    em.records(&rows, |r| match r.kind {
        "total" => format!("{:>9}  {:>9.2} GMACs  {:>7.2} M params  delta {:+.2}", r.ratio, r.gmacs, r.params_m, r.delta_gmacs),
        _ => format!("{:>9}  {:>9.2} GMACs per 2 blocks", r.ratio, r.gmacs),
    })?;
    let (a1, b1) = ([6, 6, 3, 1], [3, 4, 6, 3]);
    if let (Some(x), Some(y)) = (totals.get(&a1), totals.get(&b1)) {
        em.note(format!(
            "({}) vs ({}): {} vs {} MACs, {}",
            ratio_label(&a1),
            ratio_label(&b1),
            x,
            y,
            if x == y { "equal" } else { "different" }
        ));
    }
    let exps = scaling.map(|b| b.net_exp());
    em.note(format!("per-block MAC growth exponents by stage: {exps:?} (all zero means stage-independent)"));
    Ok(())
}

#[derive(Debug, Args)]
pub(crate) struct DetectArgs {
    cloud: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pass-through weights instead of random ones when no checkpoint is given
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    crop: bool,
    /// Replace the head output with one rendered from these boxes
    #[arg(long)]
    inject_boxes: Option<PathBuf>,
}

fn detect_cmd(g: &Global, profile: &Profile, a: &DetectArgs, em: &mut Emitter) -> Result<()> {
    let model = model_for(g, profile, a.checkpoint.as_deref(), a.identity)?;
    let cloud = read_cloud(&a.cloud, profile, a.crop)?;
    let injected = match &a.inject_boxes {
        Some(p) => {
            let boxes = load_boxes(p)?;
            let cfg = &model.config;
            Some(render_head_output(&boxes, &cfg.head_geometry(), cfg.classes, cfg.head_hw(), 0.9)?)
        }
        None => None,
    };
    let run = detect(&model, &cloud, &profile.post, injected.as_ref())?;
    let rows: Vec<DetectionRecord> = run.detections.iter().map(|d| d.record()).collect();
    em.records(&rows, |r| {
        format!(
            "class {} score {:.4} (cls {:.4}, iou {:.4}) center ({:.3}, {:.3}, {:.3}) size ({:.3}, {:.3}, {:.3}) yaw {:.4}",
            r.class, r.final_score, r.cls_score, r.iou_score, r.cx, r.cy, r.cz, r.l, r.w, r.h, r.yaw
        )
    })
}

#[derive(Debug, Args)]
pub(crate) struct BenchArgs {
    /// Point counts of the generated clouds
    #[arg(long, value_delimiter = ',', default_value = "20000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Serialize)]
struct BenchRow {
    stage: String,
    p50: f64,
    p90: f64,
    mean: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn bench(g: &Global, profile: &Profile, a: &BenchArgs, em: &mut Emitter) -> Result<()> {
    if a.repeats == 0 || a.sizes.is_empty() {
        bail!(Error::Config("bench needs at least one size and one repeat".into()));
    }
    let model = Model::random(&profile.model, g.seed)?.fused()?;
    let mut rows = Vec::new();
    for &n in &a.sizes {
        let mut spec = SceneSpec::small(profile.model.grid.range, 4);
        spec.num_classes = profile.model.classes as u32;
        spec.background_points = n.saturating_sub(spec.num_objects * spec.points_per_object);
        let (cloud, _) = generate_scene(&spec, g.seed)?;
        let mut samples: [Vec<f64>; 4] = Default::default();
        for _ in 0..a.repeats {
            let t = detect(&model, &cloud, &profile.post, None)?.timings;
            for (s, d) in samples.iter_mut().zip([t.encode, t.backbone, t.head, t.post]) {
                s.push(ms(d));
            }
        }
        for (name, mut s) in ["encode", "backbone", "head", "post"].into_iter().zip(samples) {
            s.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                stage: format!("{name}@{}", cloud.len()),
                p50: percentile(&s, 0.5),
                p90: percentile(&s, 0.9),
                mean: s.iter().sum::<f64>() / s.len() as f64,
            });
        }
    }
    em.note("stage                p50 ms     p90 ms    mean ms");
    em.records(&rows, |r| format!("{:<16} {:>10.3} {:>10.3} {:>10.3}", r.stage, r.p50, r.p90, r.mean))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Args)]
pub(crate) struct TrainStepArgs {
    /// Cloud to train on; a scene is generated from --seed when absent
    #[arg(long, requires = "boxes")]
    cloud: Option<PathBuf>,
    #[arg(long, requires = "cloud")]
    boxes: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

#[derive(Serialize)]
struct LossRow {
    phase: &'static str,
    cls: f64,
    iou: f64,
    diou: f64,
    reg: f64,
    total: f64,
    grad_norm: f64,
    matches: usize,
}

fn train_step_cmd(g: &Global, profile: &Profile, a: &TrainStepArgs, em: &mut Emitter) -> Result<()> {
    let model = model_for(g, profile, a.checkpoint.as_deref(), false)?;
    let (cloud, boxes) = match (&a.cloud, &a.boxes) {
        (Some(c), Some(b)) => (read_cloud(c, profile, false)?, load_boxes(b)?),
        _ => {
            let mut spec = SceneSpec::small(profile.model.grid.range, 4);
            spec.num_classes = profile.model.classes as u32;
            generate_scene(&spec, g.seed)?
        }
    };
    let cfg = &model.config;
    let (_, canvas) = encode_canvas(&model, &cloud).context("encode")?;
    let x = dense_features(&model, &canvas.features).context("backbone")?;
    let out = head_forward(&x, &model.head).context("head")?;
    let geom = cfg.head_geometry();
    let targets = render_gaussian_targets(&boxes, &geom, cfg.classes, cfg.head_hw())?;
    let (_, r) = train_step(&out, &targets, &geom, &profile.loss_weights, a.lr)?;
    let row = |phase, p: pillardet::losses::LossParts, total| LossRow {
        phase,
        cls: p.cls,
        iou: p.iou,
        diou: p.diou,
        reg: p.reg,
        total,
        grad_norm: r.grad_norm,
        matches: r.matches,
    };
    let rows = [row("before", r.before, r.total_before), row("after", r.after, r.total_after)];
    em.records(&rows, |r| {
        format!(
            "{:<6} total {:.6}  cls {:.6}  iou {:.6}  diou {:.6}  reg {:.6}",
            r.phase, r.total, r.cls, r.iou, r.diou, r.reg
        )
    })?;
    em.note(format!("matches {}  gradient norm {:.6e}  lr {}", r.matches, r.grad_norm, a.lr));
    Ok(())
}
