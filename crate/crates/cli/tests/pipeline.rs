use std::path::{Path, PathBuf};
use std::process::Command;

use soh_cli::commands::{
    cmd_evaluate, cmd_fit_source, cmd_plot, cmd_synth, cmd_transfer, cmd_verify, PlotOptions,
    SynthKind,
};
use soh_cli::config::Evaluation;
use soh_cli::plot::PlotKind;
use soh_cli::report::{EvaluationReport, Split};
use soh_cli::run::{list_files, TIMINGS_FILE};
use soh_cli::PipelineConfig;
use soh_core::transfer::{rmse_soh, Verdict};

/// Synthetic fleet plus a pipeline config with short training.
fn fixture(dir: &Path) -> PipelineConfig {
    let data = dir.join("data");
    cmd_synth(SynthKind::Fleet, None, 5, &data).unwrap();
    let mut cfg = PipelineConfig::load(&data.join("pipeline.json")).unwrap();
    cfg.training.epochs = 60;
    cfg.training.lstm_hidden = vec![8];
    cfg.cdl.n_restarts = 2;
    cfg.out_dir = dir.join("out");
    cfg
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    list_files(dir)
        .unwrap()
        .into_iter()
        .filter(|f| f != TIMINGS_FILE)
        .map(|f| {
            let bytes = std::fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let first = cmd_fit_source(&cfg, &[3], None).unwrap();
    let a = tmp.path().join("first");
    std::fs::rename(&first, &a).unwrap();
    let b = cmd_fit_source(&cfg, &[3], None).unwrap();
    assert_eq!(first, b);
    let (fa, fb) = (read_all(&a), read_all(&b));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between identical runs");
    }
    assert!(cmd_verify(&a).unwrap().iter().all(|c| c.ok));
}

#[test]
fn self_transfer_matches_source_test_rmse() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture(tmp.path());
    let src = cmd_fit_source(&cfg, &[1], None).unwrap();
    cfg.transfer.evaluation = Evaluation::HeldOut;
    cfg.transfer.t = 5;
    let t = cmd_transfer(&cfg, &src, &[cfg.source_battery.clone()], None).unwrap();
    let fit = EvaluationReport::load(&src.join("reports/report.json")).unwrap();
    let tr = EvaluationReport::load(&t.join("reports/report.json")).unwrap();
    for (s, d) in fit.runs[0].batteries[0]
        .stages
        .iter()
        .zip(&tr.runs[0].batteries[0].stages)
    {
        assert_eq!(
            d.decision.as_ref().unwrap().verdict,
            Verdict::Direct,
            "stage {}",
            s.stage_id
        );
        assert_eq!(s.test_rmse, d.test_rmse, "stage {}", s.stage_id);
    }
}

#[test]
fn drifted_target_is_compensated_and_similar_one_mostly_not() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let src = cmd_fit_source(&cfg, &[2], None).unwrap();
    let t = cmd_transfer(&cfg, &src, &[], None).unwrap();
    let r = EvaluationReport::load(&t.join("reports/report.json")).unwrap();
    let b = &r.runs[0].batteries;
    let drifted = b.iter().find(|b| b.battery_id == "SYN-C").unwrap();
    let improved = drifted
        .stages
        .iter()
        .filter(|s| s.test_rmse < s.uncompensated_rmse)
        .count();
    assert!(drifted
        .stages
        .iter()
        .all(|s| s.decision.as_ref().unwrap().verdict == Verdict::Compensate));
    assert!(
        improved >= 2,
        "compensation improved {improved} of 3 stages"
    );
    let similar = b.iter().find(|b| b.battery_id == "SYN-B").unwrap();
    let direct = similar
        .stages
        .iter()
        .filter(|s| s.decision.as_ref().unwrap().verdict == Verdict::Direct)
        .count();
    assert!(
        direct >= 2,
        "only {direct} direct stages for the similar cell"
    );
    for s in similar
        .stages
        .iter()
        .filter(|s| s.decision.as_ref().unwrap().verdict == Verdict::Direct)
    {
        assert_eq!(s.test_rmse, s.uncompensated_rmse);
        assert!(s
            .cycles
            .iter()
            .all(|c| c.correction == 0.0 && c.predicted == c.source));
    }
}

#[test]
fn multi_seed_table_matches_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let run = cmd_fit_source(&cfg, &[1, 2, 3], None).unwrap();
    let path = run.join("reports/report.json");
    cmd_evaluate(std::slice::from_ref(&path), Some(&tmp.path().join("eval"))).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("eval/table.csv")).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let stage: u64 = f[2].parse().unwrap();
        let mut rmses = Vec::new();
        for run in report["runs"].as_array().unwrap() {
            let st = run["batteries"][0]["stages"]
                .as_array()
                .unwrap()
                .iter()
                .find(|s| s["stage_id"].as_u64() == Some(stage))
                .unwrap();
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for c in st["cycles"].as_array().unwrap() {
                if c["split"] == "test" {
                    p.push(c["predicted"].as_f64().unwrap());
                    t.push(c["truth"].as_f64().unwrap());
                }
            }
            rmses.push(rmse_soh(&p, &t, 2.0).unwrap());
        }
        let mean = rmses.iter().sum::<f64>() / 3.0;
        let std = (rmses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        let got_mean: f64 = f[4].parse().unwrap();
        let got_std: f64 = f[5].parse().unwrap();
        assert!((got_mean - mean).abs() < 1e-12, "stage {stage}");
        assert!((got_std - std).abs() < 1e-12, "stage {stage}");
    }
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn plots_are_deterministic_and_structured() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture(tmp.path());
    cfg.training.epochs = 5;
    let run = cmd_fit_source(&cfg, &[1], None).unwrap();
    let report = run.join("reports/report.json");
    let o1 = tmp.path().join("p1");
    let o2 = tmp.path().join("p2");
    let opts = PlotOptions::default();
    let a = cmd_plot(PlotKind::Prediction, &report, &o1, &opts).unwrap();
    let b = cmd_plot(PlotKind::Prediction, &report, &o2, &opts).unwrap();
    assert_eq!(std::fs::read(&a[0]).unwrap(), std::fs::read(&b[0]).unwrap());
    let svg = std::fs::read_to_string(&a[0]).unwrap();
    assert_eq!(
        svg.matches("<polyline").count(),
        6,
        "one truth/prediction pair per stage"
    );

    let f = cmd_plot(
        PlotKind::Features,
        &run.join("reports/features.csv"),
        &o1,
        &PlotOptions {
            stage: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let svg = std::fs::read_to_string(&f[0]).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 9);
    assert_eq!(svg.matches(">consistency ").count(), 4);
    assert_eq!(svg.matches(">discrepancy ").count(), 5);

    let c = cmd_plot(
        PlotKind::Capacity,
        &tmp.path().join("data/labels.csv"),
        &o1,
        &opts,
    )
    .unwrap();
    assert_eq!(
        std::fs::read_to_string(&c[0])
            .unwrap()
            .matches("<polyline")
            .count(),
        3
    );
}

#[test]
fn single_labeled_cycle_stage_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture(tmp.path());
    cfg.train_cycles.insert(1, 1);
    let err = cmd_fit_source(&cfg, &[1], Some("bad")).unwrap_err();
    assert!(err.to_string().contains("stage 1"), "{err}");
    assert_eq!(err.exit_code(), 1);
    let out = std::fs::read_dir(&cfg.out_dir)
        .map(|d| d.count())
        .unwrap_or(0);
    assert_eq!(out, 0, "no artifacts may remain");
}

#[test]
fn compensation_without_labels_names_the_requirement() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture(tmp.path());
    cfg.training.epochs = 5;
    let src = cmd_fit_source(&cfg, &[1], None).unwrap();
    let labels = tmp.path().join("data/labels.csv");
    let kept: String = std::fs::read_to_string(&labels)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("SYN-C"))
        .map(|l| format!("{l}\n"))
        .collect();
    let unlabeled = tmp.path().join("data/labels_partial.csv");
    std::fs::write(&unlabeled, kept).unwrap();
    let mut target = cfg.data.clone();
    target.labels = Some(unlabeled);
    cfg.transfer.data = Some(target);
    let err = cmd_transfer(&cfg, &src, &["SYN-C".into()], None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("first 10 target cycles"), "{err}");
}

#[test]
fn verify_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture(tmp.path());
    cfg.training.epochs = 5;
    let run = cmd_fit_source(&cfg, &[1], None).unwrap();
    assert!(cmd_verify(&run).unwrap().iter().all(|c| c.ok));
    let path = run.join("reports/report.json");
    let mut report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    report["runs"][0]["batteries"][0]["stages"][0]["test_rmse"] = serde_json::json!(0.001);
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let failed: Vec<_> = cmd_verify(&run)
        .unwrap()
        .into_iter()
        .filter(|c| !c.ok)
        .collect();
    assert!(failed.iter().any(|c| c.name == "file reports/report.json"));
    assert!(failed.iter().any(|c| c.name.starts_with("rmse")));
}

#[test]
fn held_out_split_is_chronological() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture(tmp.path());
    cfg.training.epochs = 5;
    let run = cmd_fit_source(&cfg, &[1], None).unwrap();
    let r = EvaluationReport::load(&run.join("reports/report.json")).unwrap();
    for s in &r.runs[0].batteries[0].stages {
        let first_test = s
            .cycles
            .iter()
            .position(|c| c.split == Split::Test)
            .unwrap();
        assert!(s.cycles[..first_test]
            .iter()
            .all(|c| c.split == Split::Train));
        assert!(s.cycles[first_test..]
            .iter()
            .all(|c| c.split == Split::Test));
        assert!(s
            .cycles
            .windows(2)
            .all(|w| w[0].cycle_index < w[1].cycle_index));
        assert_eq!(first_test, (0.7 * s.cycles.len() as f64).floor() as usize);
    }
}

fn soh(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_soh"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let d = data.to_str().unwrap();
    assert!(soh(&["synth", "--out", d, "--quiet"]).status.success());
    let bad_kind = soh(&[
        "plot",
        "--kind",
        "bars",
        "--input",
        &format!("{d}/labels.csv"),
    ]);
    assert_eq!(bad_kind.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_kind.stderr).contains("prediction, capacity, features"));
    let missing = soh(&["verify", &format!("{d}/nothing")]);
    assert_eq!(missing.status.code(), Some(3));
    let cfg: PathBuf = data.join("pipeline.json");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"seeds\": []", "\"sedes\": []");
    std::fs::write(&cfg, text).unwrap();
    let typo = soh(&["fit-source", "--config", cfg.to_str().unwrap()]);
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("sedes"));
}
