//! Per-stage source fitting and target transfer.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use soh_core::cdl::{fit_cdl, sweep_s, transform, CdlOptions, SweepReport};
use soh_core::dataio::{load_cycles, load_stage_table, partition_stages, Signal};
use soh_core::estimators::{self, select_backbone};
use soh_core::psr::{embed_cycle, select_r, select_tau};
use soh_core::transfer::{
    fit_control_limit, CompensationConfig, Preprocessing, StageModels, TransferPredictor,
};
use soh_core::{
    ComponentSplit, CycleRecord, EmbeddingConfig, NormalizationStats, StageDataset, StageTable,
};

use crate::config::{derive_seed, DataPaths, DimSetting, Evaluation, Param, PipelineConfig};
use crate::error::{in_stage, invalid, Result};
use crate::report::{finish_stage, BatteryReport, CyclePrediction, Role, Split, StageReport};

const CDL_PURPOSE: u64 = 1;
const TRAIN_PURPOSE: u64 = 2;
const COMPENSATION_PURPOSE: u64 = 3;

pub struct Dataset {
    pub records: Vec<CycleRecord>,
    pub table: StageTable,
}

pub fn load_dataset(paths: &DataPaths) -> Result<Dataset> {
    Ok(Dataset {
        records: load_cycles(&paths.telemetry, paths.labels.as_deref())?,
        table: load_stage_table(&paths.stage_table)?,
    })
}

impl Dataset {
    /// The battery's stage datasets, each resampled to `k`.
    pub fn stages_of(&self, battery: &str, k: usize) -> Result<BTreeMap<u32, StageDataset>> {
        let records: Vec<CycleRecord> = self
            .records
            .iter()
            .filter(|r| r.battery_id == battery)
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(invalid(format!("no cycles for battery {battery}")));
        }
        Ok(partition_stages(&records, &self.table, k)?)
    }

    /// Raw cycles of one stage of one battery, in cycle order.
    pub fn raw_stage(&self, battery: &str, stage: u32) -> Vec<&CycleRecord> {
        let mut v: Vec<&CycleRecord> = self
            .records
            .iter()
            .filter(|r| {
                r.battery_id == battery
                    && self.table.stage_of(battery, r.cycle_index) == Some(stage)
            })
            .collect();
        v.sort_by_key(|r| r.cycle_index);
        v
    }
}

/// Training-cycle count of a stage: the configured override, else
/// `floor(fraction · n)`.
pub fn n_train(cfg: &PipelineConfig, stage: u32, n: usize) -> Result<usize> {
    let k = cfg
        .train_cycles
        .get(&stage)
        .copied()
        .unwrap_or((cfg.train_fraction * n as f64).floor() as usize);
    if k < 2 {
        return Err(invalid(format!(
            "stage {stage}: {n} labeled cycles leave {k} for training; at least 2 are needed"
        )));
    }
    if k >= n {
        return Err(invalid(format!(
            "stage {stage}: {k} training cycles of {n} leave no test cycles"
        )));
    }
    Ok(k)
}

fn lower_median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Fixed parameters pass through; `"auto"` ones take the median choice over
/// the normalized voltage of the training cycles.
pub fn choose_embedding(
    cfg: &PipelineConfig,
    train: &[CycleRecord],
) -> soh_core::Result<EmbeddingConfig> {
    let e = &cfg.embedding;
    let voltages: Vec<Vec<f64>> = train.iter().map(|c| c.signal(Signal::Voltage)).collect();
    let tau = match e.tau {
        Param::Fixed(t) => t,
        Param::Auto(_) => lower_median(
            voltages
                .iter()
                .map(|v| select_tau(v, e.max_lag))
                .collect::<soh_core::Result<_>>()?,
        ),
    };
    let r = match e.r {
        Param::Fixed(r) => r,
        Param::Auto(_) => lower_median(
            voltages
                .iter()
                .map(|v| select_r(v, tau, e.max_r, e.fnn_threshold, e.fnn_cutoff))
                .collect::<soh_core::Result<_>>()?,
        ),
    };
    EmbeddingConfig::new(tau, r)
}

/// Elbow of a sweep: the candidate after which the objective jumps most in
/// ratio. When every candidate ties, nothing drifts and the largest is kept.
pub fn choose_dim(sweep: &SweepReport) -> usize {
    let mut rows: Vec<_> = sweep.rows.iter().collect();
    rows.sort_by_key(|r| r.s);
    if sweep.tie || rows.len() < 2 {
        return rows.last().map(|r| r.s).unwrap_or(1);
    }
    let hi = rows.iter().map(|r| r.objective).fold(0.0, f64::max);
    let delta = 1e-9 * (1.0 + hi);
    let mut best = (rows[0].s, f64::NEG_INFINITY);
    for w in rows.windows(2) {
        let ratio = (w[1].objective + delta) / (w[0].objective + delta);
        if ratio > best.1 {
            best = (w[0].s, ratio);
        }
    }
    best.0
}

/// Time-averaged component of one cycle, for trajectory plots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureRow {
    pub battery_id: String,
    pub stage_id: u32,
    pub cycle_index: u32,
    pub block: &'static str,
    pub component: usize,
    pub value: f64,
}

fn feature_rows(stage: u32, splits: &[ComponentSplit]) -> Vec<FeatureRow> {
    let mut rows = Vec::new();
    for s in splits {
        for (block, v) in [
            ("consistency", s.consistency_mean()),
            ("discrepancy", s.discrepancy_mean()),
        ] {
            for (i, x) in v.iter().enumerate() {
                rows.push(FeatureRow {
                    battery_id: s.battery_id.clone(),
                    stage_id: stage,
                    cycle_index: s.cycle_index,
                    block,
                    component: i + 1,
                    value: *x,
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub preprocess_ms: u128,
    pub cdl_ms: u128,
    pub train_ms: u128,
    pub predict_ms: u128,
}

pub struct StageFit {
    pub models: StageModels,
    pub report: StageReport,
    pub features: Vec<FeatureRow>,
    pub sweep: Option<SweepReport>,
    pub timings: StageTimings,
}

fn labels(stage: &StageDataset) -> Result<Vec<f64>> {
    stage.capacities.clone().ok_or_else(|| {
        invalid(format!(
            "stage {}: every source cycle needs a capacity label",
            stage.stage_id
        ))
    })
}

/// Normalizes, embeds and decomposes one source stage, trains its estimator
/// and control limit, and scores every cycle.
pub fn fit_stage(cfg: &PipelineConfig, stage: &StageDataset, seed: u64) -> Result<StageFit> {
    let id = stage.stage_id;
    let ctx = in_stage(id);
    let capacities = labels(stage)?;
    let n = stage.len();
    let k_train = n_train(cfg, id, n)?;
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let stats = NormalizationStats::fit(&stage.cycles[..k_train]).map_err(in_stage(id))?;
    let normalized: Vec<CycleRecord> = stage.cycles.iter().map(|c| stats.apply(c)).collect();
    let embedding = choose_embedding(cfg, &normalized[..k_train]).map_err(in_stage(id))?;
    let embedded = normalized
        .iter()
        .map(|c| embed_cycle(c, &embedding, id))
        .collect::<soh_core::Result<Vec<_>>>()
        .map_err(in_stage(id))?;
    timings.preprocess_ms = clock.elapsed().as_millis();

    let clock = Instant::now();
    let opts = CdlOptions {
        n_restarts: cfg.cdl.n_restarts,
        max_iters: cfg.cdl.max_iters,
        grad_tol: cfg.cdl.grad_tol,
        allow_ridge: cfg.cdl.allow_ridge,
        seed: derive_seed(seed, id, CDL_PURPOSE),
        ..CdlOptions::default()
    };
    let train_embedded = &embedded[..k_train];
    let (s, sweep) = match &cfg.consistency_dim {
        DimSetting::Fixed(s) => (*s, None),
        DimSetting::Sweep(c) => {
            let sweep = sweep_s(train_embedded, c, &opts).map_err(in_stage(id))?;
            (choose_dim(&sweep), Some(sweep))
        }
    };
    let mut subspace = fit_cdl(train_embedded, s, &opts).map_err(in_stage(id))?;
    subspace.stage_id = id;
    timings.cdl_ms = clock.elapsed().as_millis();

    let splits = embedded
        .iter()
        .map(|e| transform(&subspace, e))
        .collect::<soh_core::Result<Vec<_>>>()
        .map_err(in_stage(id))?;
    let inputs: Vec<DMatrix<f64>> = splits.iter().map(|s| s.discrepancy.clone()).collect();

    let clock = Instant::now();
    let backbone = select_backbone(k_train, cfg.backbone_threshold);
    let mut train_cfg = cfg.training_for(id).clone();
    train_cfg.seed = derive_seed(seed, id, TRAIN_PURPOSE);
    let estimator = estimators::train(
        backbone,
        id,
        &inputs[..k_train],
        &capacities[..k_train],
        &train_cfg,
    )
    .map_err(in_stage(id))?;
    timings.train_ms = clock.elapsed().as_millis();

    let clock = Instant::now();
    let predictions = estimator.predict_series(&inputs).map_err(in_stage(id))?;
    timings.predict_ms = clock.elapsed().as_millis();
    let limit = fit_control_limit(id, &splits[..k_train], cfg.transfer.alpha).map_err(ctx)?;

    let cycles = stage
        .cycles
        .iter()
        .enumerate()
        .map(|(i, c)| CyclePrediction {
            cycle_index: c.cycle_index,
            split: if i < k_train {
                Split::Train
            } else {
                Split::Test
            },
            truth: capacities[i],
            source: predictions[i],
            correction: 0.0,
            predicted: predictions[i],
        })
        .collect();
    let mut report = StageReport {
        stage_id: id,
        backbone,
        consistency_dim: s,
        tau: embedding.tau,
        r: embedding.r,
        train_rmse: None,
        test_rmse: 0.0,
        uncompensated_rmse: 0.0,
        baseline_rmse: None,
        decision: None,
        cycles,
    };
    let train_mean = capacities[..k_train].iter().sum::<f64>() / k_train as f64;
    finish_stage(&mut report, cfg.rated_capacity_ah, Some(train_mean))?;

    Ok(StageFit {
        models: StageModels {
            preprocessing: Preprocessing::new(id, stage.k, stats, embedding),
            subspace,
            estimator,
            limit,
            decision: None,
            compensation: None,
        },
        report,
        features: feature_rows(id, &splits),
        sweep,
        timings,
    })
}

pub struct SourceFit {
    pub predictor: TransferPredictor,
    pub report: BatteryReport,
    pub features: Vec<FeatureRow>,
    pub sweeps: BTreeMap<u32, SweepReport>,
    pub timings: BTreeMap<u32, StageTimings>,
}

pub fn fit_source(cfg: &PipelineConfig, data: &Dataset, seed: u64) -> Result<SourceFit> {
    let stages = data.stages_of(&cfg.source_battery, cfg.samples_per_cycle)?;
    let mut out = SourceFit {
        predictor: TransferPredictor::default(),
        report: BatteryReport {
            battery_id: cfg.source_battery.clone(),
            role: Role::Source,
            stages: Vec::new(),
        },
        features: Vec::new(),
        sweeps: BTreeMap::new(),
        timings: BTreeMap::new(),
    };
    for (id, stage) in &stages {
        log::info!(
            "seed {seed}: fitting stage {id} on {} cycles of {}",
            stage.len(),
            cfg.source_battery
        );
        let fit = fit_stage(cfg, stage, seed)?;
        out.predictor.stages.insert(*id, fit.models);
        out.report.stages.push(fit.report);
        out.features.extend(fit.features);
        if let Some(s) = fit.sweep {
            out.sweeps.insert(*id, s);
        }
        out.timings.insert(*id, fit.timings);
    }
    Ok(out)
}

pub struct TargetFit {
    pub predictor: TransferPredictor,
    pub report: BatteryReport,
    pub timings: BTreeMap<u32, u128>,
}

/// Applies the source models to every stage of a target battery: similarity
/// check and, on drift, compensation from the first `T` cycles.
pub fn transfer_target(
    cfg: &PipelineConfig,
    source: &TransferPredictor,
    data: &Dataset,
    battery: &str,
    seed: u64,
) -> Result<TargetFit> {
    let mut predictor = source.clone();
    let mut report = BatteryReport {
        battery_id: battery.to_string(),
        role: Role::Target,
        stages: Vec::new(),
    };
    let mut timings = BTreeMap::new();
    let t = cfg.transfer.t;
    let stage_ids: Vec<u32> = data
        .table
        .entries()
        .iter()
        .filter(|e| e.battery_id == battery)
        .map(|e| e.stage_id)
        .collect();
    if stage_ids.is_empty() {
        return Err(invalid(format!(
            "stage table has no entries for target battery {battery}"
        )));
    }
    for id in stage_ids {
        let clock = Instant::now();
        let raw = data.raw_stage(battery, id);
        let n = raw.len();
        if n <= t {
            return Err(invalid(format!(
                "stage {id}: target {battery} has {n} cycles; the first {t} feed the similarity check and none would be left to evaluate"
            )));
        }
        let holdout_start = match cfg.transfer.evaluation {
            Evaluation::Remaining => t,
            Evaluation::HeldOut => {
                let k = n_train(cfg, id, n)?;
                if k < t {
                    return Err(invalid(format!(
                        "stage {id}: held-out evaluation needs T = {t} <= {k} training-split cycles"
                    )));
                }
                k
            }
        };
        let splits = raw
            .iter()
            .map(|c| predictor.decompose(id, c))
            .collect::<soh_core::Result<Vec<_>>>()
            .map_err(in_stage(id))?;
        let first: Option<Vec<f64>> = raw[..t].iter().map(|c| c.capacity_ah).collect();
        let comp_cfg = CompensationConfig {
            seed: derive_seed(seed, id, COMPENSATION_PURPOSE),
            ..cfg.transfer.compensation.clone()
        };
        let decision = predictor
            .adapt_stage(id, &splits, first.as_deref(), t, &comp_cfg)
            .map_err(in_stage(id))?
            .clone();
        let estimates = predictor.predict_stage(id, &splits).map_err(in_stage(id))?;
        let truths: Vec<f64> = raw
            .iter()
            .map(|c| {
                c.capacity_ah.ok_or_else(|| {
                    invalid(format!("stage {id}: target {battery} cycle {} has no capacity label to evaluate against", c.cycle_index))
                })
            })
            .collect::<Result<_>>()?;
        let models = predictor.stage(id).map_err(in_stage(id))?;
        let cycles = raw
            .iter()
            .zip(&estimates)
            .enumerate()
            .map(|(i, (c, e))| CyclePrediction {
                cycle_index: c.cycle_index,
                split: if i < t {
                    Split::Adapt
                } else if i >= holdout_start {
                    Split::Test
                } else {
                    Split::Unused
                },
                truth: truths[i],
                source: e.source,
                correction: e.correction,
                predicted: e.corrected,
            })
            .collect();
        let mut stage = StageReport {
            stage_id: id,
            backbone: models.estimator.backbone,
            consistency_dim: models.subspace.s,
            tau: models.preprocessing.embedding.tau,
            r: models.preprocessing.embedding.r,
            train_rmse: None,
            test_rmse: 0.0,
            uncompensated_rmse: 0.0,
            baseline_rmse: None,
            decision: Some(decision),
            cycles,
        };
        finish_stage(&mut stage, cfg.rated_capacity_ah, None)?;
        report.stages.push(stage);
        timings.insert(id, clock.elapsed().as_millis());
    }
    Ok(TargetFit {
        predictor,
        report,
        timings,
    })
}
