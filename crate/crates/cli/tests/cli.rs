use std::path::Path;
use std::process::{Command, Output};

use levk::io::{write_label_frame, write_point_frame, write_prediction_set, LabelFrame, Manifest, ManifestEntry, Point, PointFrame, PredictionSet};
use levk::trust::softmax;
use levk::ClassId;

fn levk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levk")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = levk(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Nine-class predictions on 2-D features; classes 9 and 10 are OOD and sit
/// between the ID clusters.
fn prediction_frame(seed: u64) -> PredictionSet {
    let mut set = PredictionSet::new(2, 9, 2, true);
    let center = |c: usize| [3.0 * c as f64, if c.is_multiple_of(2) { 0.0 } else { 2.0 }];
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut jitter = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    };
    for k in 0..400 {
        let gt = k % 11;
        let mu = if gt < 9 { center(gt) } else { [3.0 * (gt - 9) as f64 + 1.5, 1.0] };
        let f = [mu[0] + jitter(), mu[1] + jitter()];
        let logits: Vec<f64> = (0..9).map(|c| -0.5 * ((f[0] - center(c)[0]).powi(2) + (f[1] - center(c)[1]).powi(2))).collect();
        let probs: Vec<f32> = softmax(&logits).iter().map(|&v| v as f32).collect();
        let l: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
        let two = |v: &[f32]| [v, v].concat();
        set.push(Some(ClassId(gt as u16)), &two(&probs), Some(&two(&l)), Some(&[f[0] as f32, f[1] as f32]));
    }
    set
}

fn prediction_manifest(dir: &Path) -> std::path::PathBuf {
    let mut entries = Vec::new();
    for k in 0..2 {
        let path = dir.join(format!("pred/{k:06}.levk"));
        write_prediction_set(&prediction_frame(k), &path).unwrap();
        entries.push(ManifestEntry { frame_id: format!("{k:06}"), points: None, labels: None, predictions: Some(path) });
    }
    let m = dir.join("preds.csv");
    Manifest { entries }.save(&m).unwrap();
    m
}

#[test]
fn weights_match_the_reference_row() {
    let out = ok(&["weights", "--table", "semantickitti"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 12);
    let weight = |row: &str| row.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    assert!(lines[9].starts_with("8,bike,1120000,") && (weight(lines[9]) - 8.98).abs() <= 0.01, "{}", lines[9]);
    assert!(lines[11].starts_with("10,rider,") && (weight(lines[11]) - 25.09).abs() <= 0.01, "{}", lines[11]);
}

#[test]
fn evaluation_pipeline_writes_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = prediction_manifest(d);
    let (model, scores, report) = (d.join("md.bin"), d.join("scores.csv"), d.join("report"));

    ok(&["fit-mahalanobis", "--manifest", p(&manifest), "--table", "augkitti", "--out", p(&model)]);
    for _ in 0..2 {
        ok(&["score", "--manifest", p(&manifest), "--methods", "conf,md", "--model", p(&model), "--out", p(&scores)]);
    }
    let text = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().next().unwrap(), "frame_id,point,gt,pd,conf_raw,conf_g,md_raw,md_g");
    assert_eq!(text.lines().count(), 1 + 2 * 800);
    let clash = levk(&["score", "--manifest", p(&manifest), "--methods", "du", "--out", p(&scores)]);
    assert!(!clash.status.success());

    ok(&["confusion", "--manifest", p(&manifest), "--table", "augkitti", "--out", p(&d.join("confusion.csv"))]);
    ok(&["metrics", "--manifest", p(&manifest), "--table", "augkitti", "--out", p(&d.join("metrics.csv"))]);
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 10);
    assert!(metrics.lines().next().unwrap().ends_with(",nll,weight"));

    ok(&[
        "evaluate", "--manifest", p(&manifest), "--table", "augkitti", "--method", "md", "--model", p(&model), "--out",
        p(&report),
    ]);
    for f in ["auroc.csv", "wpre_at.csv", "counts_io.csv", "counts_cw.csv", "counts_cwood.csv", "tsd_road.csv", "roc_road_io.csv", "metrics.csv", "report.json"] {
        assert!(report.join(f).is_file(), "{f} missing");
    }
    let auroc = std::fs::read_to_string(report.join("auroc.csv")).unwrap();
    assert!(auroc.lines().next().unwrap().contains("io"));
    assert_eq!(auroc.lines().count(), 10);
}

#[test]
fn md_without_a_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prediction_manifest(dir.path());
    let out = levk(&["evaluate", "--manifest", p(&manifest), "--table", "augkitti", "--method", "md", "--out", p(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));
}

/// Road patch with a wall behind it, SemanticKITTI ids.
fn target_frame(id: &str) -> (PointFrame, LabelFrame) {
    let (mut pts, mut labels) = (Vec::new(), Vec::new());
    for i in 0..280 {
        for j in 0..80 {
            pts.push(Point::new(2.0 + i as f32 * 0.1, -4.0 + j as f32 * 0.1, -1.73, 0.3));
            labels.push(40);
        }
    }
    for j in 0..160 {
        for h in 0..40 {
            pts.push(Point::new(30.0, -8.0 + j as f32 * 0.1, -1.7 + h as f32 * 0.1, 0.6));
            labels.push(50);
        }
    }
    let n = pts.len();
    (PointFrame::new(id, pts), LabelFrame::new(labels, vec![0; n]))
}

/// One SemanticPOSS pedestrian at (8, 1) on a road patch.
fn aux_frame(id: &str) -> (PointFrame, LabelFrame) {
    let (mut pts, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..20 {
        for a in 0..10 {
            let phi = std::f32::consts::PI * (0.5 + a as f32 / 10.0);
            pts.push(Point::new(8.0 + 0.25 * phi.cos(), 1.0 + 0.25 * phi.sin(), -1.68 + 0.085 * h as f32, 0.4));
            labels.push(4);
            ids.push(1);
        }
    }
    for i in 0..40 {
        pts.push(Point::new(5.0 + i as f32 * 0.2, 0.0, -1.73, 0.2));
        labels.push(22);
        ids.push(0);
    }
    (PointFrame::new(id, pts), LabelFrame::new(labels, ids))
}

fn write_frames(dir: &Path, frames: &[(PointFrame, LabelFrame)]) -> std::path::PathBuf {
    let mut entries = Vec::new();
    for (f, l) in frames {
        let (bin, lab) = (dir.join(format!("velodyne/{}.bin", f.frame_id)), dir.join(format!("labels/{}.label", f.frame_id)));
        write_point_frame(f, &bin).unwrap();
        write_label_frame(l, &lab).unwrap();
        entries.push(ManifestEntry { frame_id: f.frame_id.clone(), points: Some(bin), labels: Some(lab), predictions: None });
    }
    let m = dir.join("manifest.csv");
    Manifest { entries }.save(&m).unwrap();
    m
}

#[test]
fn augment_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = write_frames(&d.join("src"), &[target_frame("000000"), target_frame("000001")]);
    let aux = write_frames(&d.join("aux"), &[aux_frame("a0")]);
    let config = d.join("aug.toml");
    std::fs::write(&config, "max_pose_trials = 64\n").unwrap();
    for out in ["x", "y"] {
        let stdout = ok(&[
            "augment", "--source-manifest", p(&src), "--aux-manifest", p(&aux), "--classes", "people", "--per-frame", "1",
            "--seed", "5", "--cell-size", "0.05", "--config", p(&config), "--out-dir", p(&d.join(out)),
        ]);
        assert!(stdout.contains("2 instances placed"), "{stdout}");
    }
    for f in ["manifest.csv", "velodyne/000000.bin", "labels/000001.label", "provenance/000000.json"] {
        assert_eq!(std::fs::read(d.join("x").join(f)).unwrap(), std::fs::read(d.join("y").join(f)).unwrap(), "{f}");
    }
    let bad = levk(&["augment", "--source-manifest", p(&src), "--aux-manifest", p(&aux), "--classes", "unicorn", "--out-dir", p(&d.join("z"))]);
    assert!(!bad.status.success());
}
