use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use pillardet::pointcloud::{load_boxes, load_cloud, save_cloud, Point, PointCloud};
use pillardet::profile::Profile;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pillardet")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).expect("valid json line")).collect()
}

fn generate(dir: &Path, seed: &str) {
    ok(dir, &["generate", "--seed", seed, "--out", "c.bin"]);
}

#[test]
fn empty_cloud_has_no_pillars() {
    let dir = tempfile::tempdir().unwrap();
    save_cloud(dir.path().join("e.bin"), &PointCloud::empty()).unwrap();
    let rec = json_lines(&ok(dir.path(), &["pillarize", "e.bin", "--format", "json-lines"]));
    assert_eq!(rec[0]["points"], 0);
    assert_eq!(rec[0]["pillars"], 0);
    let out = ok(dir.path(), &["detect", "e.bin", "--format", "json-lines"]);
    assert!(out.trim().is_empty(), "{out}");
}

#[test]
fn pillar_count_matches_distinct_cells() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "4");
    let rec = json_lines(&ok(dir.path(), &["pillarize", "c.bin", "--format", "json-lines"]));
    let cloud = load_cloud(dir.path().join("c.bin")).unwrap();
    let grid = Profile::desk().model.grid;
    let cells: HashSet<(i64, i64)> = cloud
        .points()
        .iter()
        .map(|p| {
            (((p.x - grid.range.x_min) / grid.pillar_x).floor() as i64, ((p.y - grid.range.y_min) / grid.pillar_y).floor() as i64)
        })
        .collect();
    assert_eq!(rec[0]["points"], cloud.len());
    assert_eq!(rec[0]["pillars"], cells.len());
}

#[test]
fn out_of_range_point_is_reported_by_index() {
    let dir = tempfile::tempdir().unwrap();
    let mut pts: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 0.5, 0.0, 0.1)).collect();
    pts[3].x = 500.0;
    save_cloud(dir.path().join("o.bin"), &PointCloud::new(pts).unwrap()).unwrap();
    let o = run(dir.path(), &["pillarize", "o.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("point 3"), "{}", stderr(&o));
    let cropped = json_lines(&ok(dir.path(), &["pillarize", "o.bin", "--crop", "--format", "json-lines"]));
    assert_eq!(cropped[0]["points"], 4);
}

#[test]
fn fused_checkpoint_matches_branched_one() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["init", "--seed", "5", "--out", "m.toml"]);
    let rec = json_lines(&ok(dir.path(), &["fuse", "m.toml", "f.toml", "--format", "json-lines"]));
    let d = rec[0]["max_rel_discrepancy"].as_f64().unwrap();
    assert!(d < 1e-4, "{d}");
    assert!(rec[0]["params_after"].as_u64() < rec[0]["params_before"].as_u64());
    assert!(dir.path().join("f.toml").exists());
}

#[test]
fn corrupted_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["init", "--out", "m.toml"]);
    let path = dir.path().join("m.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("format", "formt", 1)).unwrap();
    let o = run(dir.path(), &["fuse", "m.toml", "f.toml"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(dir.path(), &["detect", "missing.bin"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flops_table_is_allocation_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let rec = json_lines(&ok(dir.path(), &["flops", "--profile", "waymo", "--format", "json-lines"]));
    let total = |ratio: &str| {
        rec.iter().find(|r| r["kind"] == "total" && r["ratio"] == ratio).map(|r| r["gmacs"].as_f64().unwrap()).unwrap()
    };
    assert_eq!(total("6,6,3,1"), total("3,4,6,3"));
    let slopes: Vec<f64> =
        rec.iter().filter(|r| r["kind"] == "slope_per_2_blocks").map(|r| r["gmacs"].as_f64().unwrap()).collect();
    assert_eq!(slopes.len(), 4);
    assert!(slopes.iter().all(|s| *s == slopes[0] && *s > 0.0));
    let params = |ratio: &str| {
        rec.iter().find(|r| r["kind"] == "total" && r["ratio"] == ratio).map(|r| r["params_m"].as_f64().unwrap()).unwrap()
    };
    assert!(params("6,6,3,1") < params("3,4,6,3"));
}

#[test]
fn injected_boxes_decode_back() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "2");
    let boxes = load_boxes(dir.path().join("c.bin.boxes.toml")).unwrap();
    let rec = json_lines(&ok(
        dir.path(),
        &["detect", "c.bin", "--identity", "--inject-boxes", "c.bin.boxes.toml", "--format", "json-lines"],
    ));
    assert_eq!(rec.len(), boxes.len());
    for b in &boxes {
        let hit = rec.iter().any(|r| {
            r["class"] == b.class_id
                && (r["cx"].as_f64().unwrap() - b.cx).abs() < 1e-4
                && (r["cy"].as_f64().unwrap() - b.cy).abs() < 1e-4
                && (r["l"].as_f64().unwrap() - b.l).abs() < 1e-5
        });
        assert!(hit, "box {b:?} not recovered");
    }
}

#[test]
fn detection_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "3");
    ok(dir.path(), &["init", "--seed", "9", "--out", "m.toml"]);
    let a = ok(dir.path(), &["detect", "c.bin", "--checkpoint", "m.toml", "--format", "csv"]);
    let b = ok(dir.path(), &["detect", "c.bin", "--checkpoint", "m.toml", "--format", "csv"]);
    assert_eq!(a, b);
    assert!(a.starts_with("cx,cy,cz,l,w,h,yaw,class,cls_score,iou_score,final_score"));
}

#[test]
fn bench_reports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["bench", "--sizes", "500,1000", "--repeats", "1", "--format", "csv"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("stage,p50,p90,mean"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.len(), 4);
        let v: Vec<f64> = r[1..].iter().map(|x| x.parse().unwrap()).collect();
        // one repeat makes every statistic the same sample
        assert!(v.iter().all(|x| *x == v[0] && *x >= 0.0));
    }
    let stages: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert!(stages.contains(&"backbone@1000") && stages.contains(&"post@500"));
}

#[test]
fn train_step_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let rec = json_lines(&ok(dir.path(), &["train-step", "--seed", "1", "--format", "json-lines"]));
    assert_eq!(rec.len(), 2);
    assert_eq!(rec[0]["phase"], "before");
    assert!(rec[1]["total"].as_f64().unwrap() < rec[0]["total"].as_f64().unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["pillarize"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["flops", "--profile", "nowhere"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}
