//! The subcommands, callable without the argument parser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use soh_core::dataio::synthetic::{
    generate_synthetic, simulate_fleet, FleetConfig, SyntheticConfig,
};
use soh_core::dataio::{write_labels_csv, write_stage_table_csv, write_telemetry_csv};
use soh_core::psr::EmbeddedCache;
use soh_core::transfer::{TransferPredictor, BUNDLE_MANIFEST};
use soh_core::EmbeddingConfig;

use crate::config::{DataPaths, Param, PipelineConfig, CONFIG_SCHEMA};
use crate::error::{invalid, io_err, Result};
use crate::pipeline::{fit_source, load_dataset, transfer_target, Dataset};
use crate::plot::{self, PlotKind};
use crate::report::{self, rmse_of, EvaluationReport, ReportKind, SeedRun, Split, REPORT_SCHEMA};
use crate::run::{
    combined_hash, default_run_id, list_files, sha256_file, RunDir, RunManifest, MANIFEST_FILE,
    MANIFEST_SCHEMA, TIMINGS_FILE,
};

pub const REPORT_FILE: &str = "report.json";
pub const FEATURES_FILE: &str = "features.csv";

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

fn manifest(
    cfg: &PipelineConfig,
    command: &str,
    seeds: &[u64],
    source_run: Option<String>,
) -> RunManifest {
    RunManifest {
        schema_version: MANIFEST_SCHEMA,
        run_id: String::new(),
        command: command.to_string(),
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        source_run,
        config: cfg.clone(),
        files: BTreeMap::new(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_figure(dir: &Path, stem: &str, fig: &plot::Figure) -> Result<Vec<PathBuf>> {
    let svg = dir.join(format!("{stem}.svg"));
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&svg, &plot::render_svg(fig))?;
    write_text(&csv, &plot::render_csv(fig))?;
    Ok(vec![svg, csv])
}

#[derive(Debug, Serialize)]
struct BatterySummary {
    battery_id: String,
    cycles: usize,
    labeled: usize,
    min_samples: usize,
    max_samples: usize,
    stage_cycles: BTreeMap<u32, usize>,
}

fn summarize(data: &Dataset, k: usize) -> Result<Vec<BatterySummary>> {
    let mut ids: Vec<&str> = data.records.iter().map(|r| r.battery_id.as_str()).collect();
    ids.dedup();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|b| {
            let recs: Vec<_> = data.records.iter().filter(|r| r.battery_id == b).collect();
            let stages = data.stages_of(b, k)?;
            Ok(BatterySummary {
                battery_id: b.to_string(),
                cycles: recs.len(),
                labeled: recs.iter().filter(|r| r.capacity_ah.is_some()).count(),
                min_samples: recs.iter().map(|r| r.len()).min().unwrap_or(0),
                max_samples: recs.iter().map(|r| r.len()).max().unwrap_or(0),
                stage_cycles: stages.iter().map(|(id, s)| (*id, s.len())).collect(),
            })
        })
        .collect()
}

/// Loads and validates every configured data file and records a summary.
pub fn cmd_ingest(cfg: &PipelineConfig, run_id: Option<&str>) -> Result<PathBuf> {
    let mut summaries = summarize(&load_dataset(&cfg.data)?, cfg.samples_per_cycle)?;
    if let Some(d) = &cfg.transfer.data {
        summaries.extend(summarize(&load_dataset(d)?, cfg.samples_per_cycle)?);
    }
    let seeds = cfg.run_seeds();
    let id = run_id
        .map(str::to_string)
        .unwrap_or_else(|| default_run_id("ingest", &cfg.hash(), &seeds));
    let run = RunDir::create(&cfg.out_dir, &id)?;
    soh_core::write_json(&run.reports().join("ingest_summary.json"), &summaries)?;
    run.commit(manifest(cfg, "ingest", &seeds, None))
}

/// Fits source models for every seed and writes bundles, report, features
/// and prediction plots.
pub fn cmd_fit_source(
    cfg: &PipelineConfig,
    seeds: &[u64],
    run_id: Option<&str>,
) -> Result<PathBuf> {
    let data = load_dataset(&cfg.data)?;
    let id = run_id
        .map(str::to_string)
        .unwrap_or_else(|| default_run_id("fit-source", &cfg.hash(), seeds));
    let run = RunDir::create(&cfg.out_dir, &id)?;
    let mut runs = Vec::new();
    let mut features = Vec::new();
    let mut timings = BTreeMap::new();
    for &seed in seeds {
        let fit = fit_source(cfg, &data, seed)?;
        fit.predictor
            .save_bundle(&run.models().join(seed_dir(seed)))?;
        if !fit.sweeps.is_empty() {
            soh_core::write_json(
                &run.reports().join(format!("sweep_{}.json", seed_dir(seed))),
                &fit.sweeps,
            )?;
        }
        features.extend(fit.features.into_iter().map(|f| (seed, f)));
        timings.insert(seed_dir(seed), fit.timings);
        runs.push(SeedRun {
            seed,
            batteries: vec![fit.report],
        });
    }
    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA,
        kind: ReportKind::FitSource,
        run_id: id.clone(),
        config_hash: cfg.hash(),
        source_battery: cfg.source_battery.clone(),
        rated_capacity_ah: cfg.rated_capacity_ah,
        seeds: seeds.to_vec(),
        runs,
    };
    soh_core::write_json(&run.reports().join(REPORT_FILE), &report)?;
    plot::write_features_csv(&run.reports().join(FEATURES_FILE), &features)?;
    for &seed in seeds {
        write_figure(
            &run.plots(),
            &format!("prediction_{}", seed_dir(seed)),
            &plot::prediction_figure(&report, None, Some(seed))?,
        )?;
    }
    soh_core::write_json(&run.path().join(TIMINGS_FILE), &timings)?;
    run.commit(manifest(cfg, "fit-source", seeds, None))
}

/// Transfers every seed's source bundle to each target battery.
pub fn cmd_transfer(
    cfg: &PipelineConfig,
    source_run: &Path,
    targets: &[String],
    run_id: Option<&str>,
) -> Result<PathBuf> {
    let source = RunManifest::load(source_run)?;
    if source.command != "fit-source" {
        return Err(invalid(format!(
            "{} is a {} run, not a fit-source run",
            source_run.display(),
            source.command
        )));
    }
    let targets: Vec<String> = if targets.is_empty() {
        cfg.transfer.targets.clone()
    } else {
        targets.to_vec()
    };
    if targets.is_empty() {
        return Err(invalid(
            "no target batteries: pass --target or set transfer.targets",
        ));
    }
    let data = load_dataset(cfg.target_data())?;
    let seeds = source.seeds.clone();
    let id = run_id.map(str::to_string).unwrap_or_else(|| {
        default_run_id(
            "transfer",
            &combined_hash(&[&cfg.hash(), &source.run_id]),
            &seeds,
        )
    });
    let run = RunDir::create(&cfg.out_dir, &id)?;
    let mut runs = Vec::new();
    let mut timings = BTreeMap::new();
    for &seed in &seeds {
        let bundle =
            TransferPredictor::load_bundle(&source_run.join("models").join(seed_dir(seed)))?;
        let mut batteries = Vec::new();
        for target in &targets {
            let tf = transfer_target(cfg, &bundle, &data, target, seed)?;
            tf.predictor
                .save_bundle(&run.models().join(seed_dir(seed)).join(target))?;
            timings.insert(format!("{}/{target}", seed_dir(seed)), tf.timings);
            batteries.push(tf.report);
        }
        runs.push(SeedRun { seed, batteries });
    }
    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA,
        kind: ReportKind::Transfer,
        run_id: id.clone(),
        config_hash: cfg.hash(),
        source_battery: source.config.source_battery.clone(),
        rated_capacity_ah: cfg.rated_capacity_ah,
        seeds: seeds.clone(),
        runs,
    };
    soh_core::write_json(&run.reports().join(REPORT_FILE), &report)?;
    for &seed in &seeds {
        for target in &targets {
            let fig = plot::prediction_figure(&report, Some(target), Some(seed))?;
            write_figure(
                &run.plots(),
                &format!("prediction_{}_{target}", seed_dir(seed)),
                &fig,
            )?;
        }
    }
    soh_core::write_json(&run.path().join(TIMINGS_FILE), &timings)?;
    run.commit(manifest(cfg, "transfer", &seeds, Some(source.run_id)))
}

/// Aggregates reports into a comparison table, written as text and CSV
/// when `out` is given.
pub fn cmd_evaluate(reports: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let loaded = reports
        .iter()
        .map(|p| EvaluationReport::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rows = report::aggregate(&loaded)?;
    let text = report::render_text(&rows);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_text(&dir.join("table.txt"), &text)?;
        write_text(&dir.join("table.csv"), &report::render_csv(&rows))?;
    }
    Ok(text)
}

#[derive(Debug, Clone, Default)]
pub struct PlotOptions {
    pub stage: Option<u32>,
    pub battery: Option<String>,
    pub seed: Option<u64>,
}

pub fn cmd_plot(
    kind: PlotKind,
    input: &Path,
    out: &Path,
    opts: &PlotOptions,
) -> Result<Vec<PathBuf>> {
    if !input.exists() {
        return Err(invalid(format!(
            "plot input {} does not exist",
            input.display()
        )));
    }
    let (stem, fig) = match kind {
        PlotKind::Prediction => {
            let r = EvaluationReport::load(input)?;
            (
                "prediction".to_string(),
                plot::prediction_figure(&r, opts.battery.as_deref(), opts.seed)?,
            )
        }
        PlotKind::Capacity => ("capacity".to_string(), plot::capacity_figure(input)?),
        PlotKind::Features => {
            let stem = match opts.stage {
                Some(st) => format!("features_stage{st}"),
                None => "features".to_string(),
            };
            (stem, plot::features_figure(input, opts.stage, opts.seed)?)
        }
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_figure(out, &stem, &fig)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        ok,
        detail: detail.into(),
    }
}

/// Checks manifest hashes, recomputes every reported RMSE from the stored
/// per-cycle pairs, and loads every model bundle.
pub fn cmd_verify(run_dir: &Path) -> Result<Vec<Check>> {
    let m = RunManifest::load(run_dir)?;
    let mut checks = Vec::new();
    let present: Vec<String> = list_files(run_dir)?
        .into_iter()
        .filter(|f| f != MANIFEST_FILE && f != TIMINGS_FILE)
        .collect();
    for f in &present {
        match m.files.get(f) {
            None => checks.push(check(
                format!("file {f}"),
                false,
                "not listed in the manifest",
            )),
            Some(h) => {
                let actual = sha256_file(&run_dir.join(f))?;
                checks.push(check(
                    format!("file {f}"),
                    &actual == h,
                    if &actual == h {
                        "hash matches".into()
                    } else {
                        format!("hash {actual} != {h}")
                    },
                ));
            }
        }
    }
    for f in m.files.keys().filter(|f| !present.contains(f)) {
        checks.push(check(format!("file {f}"), false, "listed but missing"));
    }

    let report_path = run_dir.join("reports").join(REPORT_FILE);
    if report_path.exists() {
        let r = EvaluationReport::load(&report_path)?;
        for run in &r.runs {
            for b in &run.batteries {
                for s in &b.stages {
                    let name = format!(
                        "rmse seed {} {} stage {}",
                        run.seed, b.battery_id, s.stage_id
                    );
                    let rated = r.rated_capacity_ah;
                    let train = if s.train_rmse.is_some() {
                        Some(rmse_of(
                            &s.cycles,
                            &[Split::Train, Split::Adapt],
                            false,
                            rated,
                        )?)
                    } else {
                        None
                    };
                    let test = rmse_of(&s.cycles, &[Split::Test], false, rated)?;
                    let unc = rmse_of(&s.cycles, &[Split::Test], true, rated)?;
                    let sums = s
                        .cycles
                        .iter()
                        .all(|c| c.predicted == c.source - c.correction);
                    let ok = train == s.train_rmse
                        && test == s.test_rmse
                        && unc == s.uncompensated_rmse
                        && sums;
                    checks.push(check(
                        name,
                        ok,
                        format!(
                            "test {test} (stored {}), uncompensated {unc} (stored {})",
                            s.test_rmse, s.uncompensated_rmse
                        ),
                    ));
                }
            }
        }
    }
    for f in present
        .iter()
        .filter(|f| f.ends_with(&format!("/{BUNDLE_MANIFEST}")))
    {
        let dir = run_dir.join(f.trim_end_matches(BUNDLE_MANIFEST));
        let res = TransferPredictor::load_bundle(&dir);
        checks.push(check(
            format!(
                "bundle {}",
                f.trim_end_matches(&format!("/{BUNDLE_MANIFEST}"))
            ),
            res.is_ok(),
            match res {
                Ok(p) => format!("{} stages", p.stages.len()),
                Err(e) => e.to_string(),
            },
        ));
    }
    Ok(checks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Fleet,
    Latent,
}

/// Writes synthetic data into `out`. Fleet data comes with a ready pipeline
/// config; latent data with its ground-truth mixing.
pub fn cmd_synth(
    kind: SynthKind,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let read = |p: &Path| -> Result<String> { std::fs::read_to_string(p).map_err(io_err(p)) };
    match kind {
        SynthKind::Fleet => {
            let fleet: FleetConfig = match config {
                Some(p) => serde_json::from_str(&read(p)?)
                    .map_err(|e| invalid(format!("fleet config: {e}")))?,
                None => FleetConfig::default(),
            };
            let (records, table) = simulate_fleet(&fleet, seed)?;
            let files = [
                "telemetry.csv",
                "labels.csv",
                "stages.csv",
                "fleet.json",
                "pipeline.json",
            ]
            .map(|f| out.join(f));
            write_telemetry_csv(&files[0], &records)?;
            write_labels_csv(&files[1], &records)?;
            write_stage_table_csv(&files[2], &table)?;
            soh_core::write_json(&files[3], &fleet)?;
            let ids: Vec<String> = fleet.cells.iter().map(|c| c.battery_id.clone()).collect();
            let mut cfg = PipelineConfig {
                schema_version: CONFIG_SCHEMA,
                data: DataPaths {
                    telemetry: "telemetry.csv".into(),
                    labels: Some("labels.csv".into()),
                    stage_table: "stages.csv".into(),
                },
                source_battery: ids[0].clone(),
                seed,
                out_dir: "out".into(),
                ..PipelineConfig::default()
            };
            cfg.embedding.tau = Param::Fixed(EmbeddingConfig::default().tau);
            cfg.transfer.targets = ids[1..].to_vec();
            cfg.training.learning_rate = 1e-2;
            cfg.training.epochs = 200;
            cfg.training.lstm_hidden = vec![16];
            soh_core::write_json(&files[4], &cfg)?;
            Ok(files.to_vec())
        }
        SynthKind::Latent => {
            let cfg: SyntheticConfig = match config {
                Some(p) => serde_json::from_str(&read(p)?)
                    .map_err(|e| invalid(format!("synthetic config: {e}")))?,
                None => SyntheticConfig::default(),
            };
            let data = generate_synthetic(&cfg, seed)?;
            let files =
                ["latent_cycles.json", "ground_truth.json", "capacities.json"].map(|f| out.join(f));
            EmbeddedCache::new(EmbeddingConfig::default(), data.cycles).save(&files[0])?;
            soh_core::write_json(&files[1], &data.truth)?;
            soh_core::write_json(&files[2], &data.capacities)?;
            Ok(files.to_vec())
        }
    }
}
