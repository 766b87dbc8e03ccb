//! Transfer of stage models to a new battery.
//!
//! The consistency components of a stage should look alike on any cell that
//! follows the same degradation pattern. A Hotelling-style control limit on
//! their per-cycle time averages decides whether the source model applies
//! directly; when most of the first `T` target cycles fall outside it, a
//! small network learns the source model's error from those cycles and the
//! corrected estimate subtracts it.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::cdl::{transform, ComponentSplit, SubspaceModel};
use crate::dataio::{resample_cycle, CycleRecord, NormalizationStats};
use crate::error::{Error, Result};
use crate::estimators::nn::{
    export_tensors, import_tensors, Adam, AdamConfig, Dense, NamedTensor, Parameters,
};
use crate::estimators::TrainedEstimator;
use crate::linalg::{column_covariance, serde_matrix, serde_vector};
use crate::psr::{embed_cycle, EmbeddedCycle, EmbeddingConfig};

pub const CONTROL_LIMIT_SCHEMA: u32 = 1;
pub const COMPENSATION_SCHEMA: u32 = 1;
pub const BUNDLE_SCHEMA: u32 = 1;
pub const PREPROCESSING_SCHEMA: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_T: usize = 10;
/// SOH above this is reported as a regeneration flag.
pub const SOH_FLAG_THRESHOLD: f64 = 1.05;

/// Name of the limit formula recorded with each [`ControlLimit`].
pub const CL_FORMULA: &str = "S(N^2-1)/(N(N-1)) * F(S, N-S; 1-alpha)";

/// Upper `1 - alpha` quantile of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_quantile(d1: f64, d2: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!(
            "significance {alpha} must lie in (0, 1)"
        )));
    }
    let dist = FisherSnedecor::new(d1, d2)
        .map_err(|e| Error::validation(format!("F distribution ({d1}, {d2}): {e}")))?;
    Ok(dist.inverse_cdf(1.0 - alpha))
}

/// `S (N² − 1) / (N (N − 1)) · F(S, N − S; 1 − α)`.
pub fn control_limit_value(s: usize, n: usize, alpha: f64) -> Result<f64> {
    if n <= s {
        return Err(Error::validation(format!(
            "control limit needs more training cycles ({n}) than consistency components ({s})"
        )));
    }
    let (sf, nf) = (s as f64, n as f64);
    let coefficient = sf * (nf * nf - 1.0) / (nf * (nf - 1.0));
    Ok(coefficient * f_quantile(sf, nf - sf, alpha)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLimit {
    pub schema_version: u32,
    pub stage_id: u32,
    /// Training mean of the per-cycle time-averaged consistency vectors.
    #[serde(with = "serde_vector")]
    pub s_bar: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub lambda: DMatrix<f64>,
    pub cl: f64,
    pub alpha: f64,
    pub n_c: usize,
    /// Ridge added to `lambda` when it was singular.
    pub ridge: f64,
    pub formula: String,
}

impl ControlLimit {
    pub fn dim(&self) -> usize {
        self.s_bar.len()
    }

    /// `(v − S̄)ᵀ Λ⁻¹ (v − S̄)`.
    pub fn statistic(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!(
                "consistency vector has length {}, limit expects {}",
                v.len(),
                self.dim()
            )));
        }
        let chol =
            self.lambda.clone().cholesky().ok_or_else(|| {
                Error::numerical("control-limit covariance is not positive definite")
            })?;
        let d = v - &self.s_bar;
        Ok(d.dot(&chol.solve(&d)))
    }

    pub fn statistic_of(&self, split: &ComponentSplit) -> Result<f64> {
        self.statistic(&split.consistency_mean())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = crate::read_json(path)?;
        if v.schema_version != CONTROL_LIMIT_SCHEMA {
            return Err(Error::validation(format!(
                "control limit schema {} is not supported",
                v.schema_version
            )));
        }
        Ok(v)
    }
}

/// Fits the limit from per-cycle consistency vectors.
pub fn fit_control_limit_vectors(
    stage_id: u32,
    vectors: &[DVector<f64>],
    alpha: f64,
) -> Result<ControlLimit> {
    let n = vectors.len();
    let s = vectors
        .first()
        .ok_or_else(|| Error::validation("control limit needs training cycles"))?
        .len();
    if vectors.iter().any(|v| v.len() != s) {
        return Err(Error::shape("consistency vectors have different lengths"));
    }
    let cl = control_limit_value(s, n, alpha)?;
    let x = DMatrix::from_fn(s, n, |r, c| vectors[c][r]);
    let s_bar = crate::linalg::row_means(&x);
    let mut lambda = column_covariance(&x, &s_bar);
    let mut ridge = 0.0;
    if lambda.clone().cholesky().is_none()
        || lambda.clone().symmetric_eigen().eigenvalues.min() <= 1e-12 * lambda.trace()
    {
        ridge = 1e-8 * lambda.trace().max(f64::MIN_POSITIVE) / s as f64;
        lambda += DMatrix::identity(s, s) * ridge;
        log::warn!("stage {stage_id}: consistency covariance is singular; added ridge {ridge:e}");
    }
    Ok(ControlLimit {
        schema_version: CONTROL_LIMIT_SCHEMA,
        stage_id,
        s_bar,
        lambda,
        cl,
        alpha,
        n_c: n,
        ridge,
        formula: CL_FORMULA.to_string(),
    })
}

/// Fits the limit of one stage from its training component splits.
pub fn fit_control_limit(
    stage_id: u32,
    train_splits: &[ComponentSplit],
    alpha: f64,
) -> Result<ControlLimit> {
    let vectors: Vec<DVector<f64>> = train_splits.iter().map(|s| s.consistency_mean()).collect();
    fit_control_limit_vectors(stage_id, &vectors, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Direct,
    Compensate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftDecision {
    pub stage_id: u32,
    pub limit: f64,
    /// Statistic of each inspected target cycle, in order.
    pub statistics: Vec<f64>,
    pub cycle_indices: Vec<u32>,
    pub exceedances: usize,
    pub verdict: Verdict,
}

/// Drift is declared when strictly more than half of the statistics exceed the limit.
pub fn vote(statistics: &[f64], limit: f64) -> (usize, Verdict) {
    let exceed = statistics.iter().filter(|&&t| t > limit).count();
    let verdict = if 2 * exceed > statistics.len() {
        Verdict::Compensate
    } else {
        Verdict::Direct
    };
    (exceed, verdict)
}

/// Checks the first `t` target cycles against the source limit.
pub fn similarity_check(
    cl: &ControlLimit,
    target_splits: &[ComponentSplit],
    t: usize,
) -> Result<DriftDecision> {
    if t == 0 {
        return Err(Error::validation("similarity check needs T >= 1"));
    }
    if target_splits.len() < t {
        return Err(Error::validation(format!(
            "stage {}: similarity check needs the first {t} target cycles, got {}",
            cl.stage_id,
            target_splits.len()
        )));
    }
    let used = &target_splits[..t];
    let statistics = used
        .iter()
        .map(|s| cl.statistic_of(s))
        .collect::<Result<Vec<_>>>()?;
    let (exceedances, verdict) = vote(&statistics, cl.cl);
    Ok(DriftDecision {
        stage_id: cl.stage_id,
        limit: cl.cl,
        statistics,
        cycle_indices: used.iter().map(|s| s.cycle_index).collect(),
        exceedances,
        verdict,
    })
}

/// Per-row mean then per-row population standard deviation of `S_d`.
pub fn discrepancy_summary(s_d: &DMatrix<f64>) -> DVector<f64> {
    let f = s_d.nrows();
    let k = s_d.ncols() as f64;
    let mut out = DVector::zeros(2 * f);
    for (r, row) in s_d.row_iter().enumerate() {
        let m = row.sum() / k;
        let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k;
        out[r] = m;
        out[f + r] = var.sqrt();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompensationConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            hidden: 50,
            epochs: 500,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Dense ReLU layer and linear output mapping a discrepancy summary to
/// the source model's error `E = Q̂ − Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationNet {
    pub hidden: Dense,
    pub out: Dense,
}

impl Parameters for CompensationNet {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        vec![
            ("hidden.w".into(), &self.hidden.w),
            ("hidden.b".into(), &self.hidden.b),
            ("out.w".into(), &self.out.w),
            ("out.b".into(), &self.out.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        vec![
            ("hidden.w".into(), &mut self.hidden.w),
            ("hidden.b".into(), &mut self.hidden.b),
            ("out.w".into(), &mut self.out.w),
            ("out.b".into(), &mut self.out.b),
        ]
    }
}

impl CompensationNet {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            hidden: Dense::zeros(input, hidden),
            out: Dense::zeros(hidden, 1),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> f64 {
        let h = self.hidden.forward(x).map(|v| v.max(0.0));
        self.out.forward(&h)[0]
    }

    /// Mean squared error over `(x, e)` pairs and its gradient.
    pub fn loss_and_gradient(&self, xs: &[DVector<f64>], es: &[f64]) -> (f64, CompensationNet) {
        let mut grad = self.clone();
        grad.zero_grad();
        let scale = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, e) in xs.iter().zip(es) {
            let pre = self.hidden.forward(x);
            let h = pre.map(|v| v.max(0.0));
            let y = self.out.forward(&h)[0];
            let err = y - e;
            loss += err * err * scale;
            let dh = self.out.backward(
                &h,
                &DVector::from_element(1, 2.0 * err * scale),
                &mut grad.out,
            );
            let dpre = dh.zip_map(&pre, |d, z| if z > 0.0 { d } else { 0.0 });
            self.hidden.backward(x, &dpre, &mut grad.hidden);
        }
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationModel {
    pub stage_id: u32,
    pub config: CompensationConfig,
    /// Summary features are standardized with the fitting cycles' statistics.
    pub input_mean: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub net: CompensationNet,
    pub train_cycles: usize,
    pub loss_trace: Vec<f64>,
}

impl CompensationModel {
    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    fn features(&self, s_d: &DMatrix<f64>) -> Result<DVector<f64>> {
        let raw = discrepancy_summary(s_d);
        if raw.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "compensation expects {} discrepancy rows, got {}",
                self.input_dim() / 2,
                s_d.nrows()
            )));
        }
        Ok((raw - &self.input_mean).component_div(&self.input_scale))
    }

    /// Predicted source-model error for one cycle.
    pub fn predict(&self, s_d: &DMatrix<f64>) -> Result<f64> {
        Ok(self.net.forward(&self.features(s_d)?))
    }

    pub fn to_file(&self) -> CompensationFile {
        CompensationFile {
            schema_version: COMPENSATION_SCHEMA,
            stage_id: self.stage_id,
            hyperparameters: self.config.clone(),
            input_mean: self.input_mean.iter().copied().collect(),
            input_scale: self.input_scale.iter().copied().collect(),
            train_cycles: self.train_cycles,
            loss_trace: self.loss_trace.clone(),
            weights: export_tensors(&self.net),
        }
    }

    pub fn from_file(f: CompensationFile) -> Result<Self> {
        if f.schema_version != COMPENSATION_SCHEMA {
            return Err(Error::validation(format!(
                "compensation schema {} is not supported",
                f.schema_version
            )));
        }
        if f.input_mean.len() != f.input_scale.len() {
            return Err(Error::shape(
                "compensation input statistics differ in length",
            ));
        }
        let mut net = CompensationNet::zeros(f.input_mean.len(), f.hyperparameters.hidden);
        import_tensors(&mut net, &f.weights)?;
        Ok(Self {
            stage_id: f.stage_id,
            config: f.hyperparameters,
            input_mean: DVector::from_vec(f.input_mean),
            input_scale: DVector::from_vec(f.input_scale),
            net,
            train_cycles: f.train_cycles,
            loss_trace: f.loss_trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(crate::read_json(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationFile {
    pub schema_version: u32,
    pub stage_id: u32,
    pub hyperparameters: CompensationConfig,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub train_cycles: usize,
    pub loss_trace: Vec<f64>,
    pub weights: BTreeMap<String, NamedTensor>,
}

/// Fits the error model from discrepancy matrices of the first target
/// cycles and the source errors `E = Q̂ − Q` on them.
///
/// The output layer starts at zero weight with its bias at `mean(E)`, so
/// training begins from the best constant correction.
pub fn fit_compensation_from_errors(
    stage_id: u32,
    s_d: &[DMatrix<f64>],
    errors: &[f64],
    cfg: &CompensationConfig,
) -> Result<CompensationModel> {
    if s_d.len() < 2 || s_d.len() != errors.len() {
        return Err(Error::validation(format!(
            "stage {stage_id}: compensation needs at least 2 labeled target cycles with one error each"
        )));
    }
    if cfg.hidden == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::validation(
            "compensation needs hidden units, epochs and a positive learning rate",
        ));
    }
    let raw: Vec<DVector<f64>> = s_d.iter().map(discrepancy_summary).collect();
    let dim = raw[0].len();
    if raw.iter().any(|r| r.len() != dim) {
        return Err(Error::shape(
            "target cycles have different discrepancy dimensions",
        ));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().fold(DVector::zeros(dim), |acc, r| acc + r) / n;
    let scale = raw
        .iter()
        .fold(DVector::zeros(dim), |acc, r| {
            acc + (r - &mean).map(|x| x * x)
        })
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
    let xs: Vec<DVector<f64>> = raw
        .iter()
        .map(|r| (r - &mean).component_div(&scale))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = CompensationNet::zeros(dim, cfg.hidden);
    net.hidden.init(&mut rng);
    net.out.b[0] = errors.iter().sum::<f64>() / n;
    let mut adam = Adam::new(
        &net,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = net.loss_and_gradient(&xs, errors);
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "stage {stage_id}: non-finite compensation loss at epoch {epoch}"
            )));
        }
        loss_trace.push(loss);
        adam.step(&mut net, &grad);
    }
    Ok(CompensationModel {
        stage_id,
        config: cfg.clone(),
        input_mean: mean,
        input_scale: scale,
        net,
        train_cycles: s_d.len(),
        loss_trace,
    })
}

/// Resampling length, source z-score statistics and embedding of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub schema_version: u32,
    pub stage_id: u32,
    pub samples_per_cycle: usize,
    pub normalization: NormalizationStats,
    pub embedding: EmbeddingConfig,
}

impl Preprocessing {
    pub fn new(
        stage_id: u32,
        samples_per_cycle: usize,
        normalization: NormalizationStats,
        embedding: EmbeddingConfig,
    ) -> Self {
        Self {
            schema_version: PREPROCESSING_SCHEMA,
            stage_id,
            samples_per_cycle,
            normalization,
            embedding,
        }
    }

    /// Resamples, normalizes and embeds a raw cycle. Cycles that already have
    /// `samples_per_cycle` samples are still put on the uniform time grid, as
    /// during fitting.
    pub fn embed(&self, cycle: &CycleRecord) -> Result<EmbeddedCycle> {
        let resampled = resample_cycle(cycle, self.samples_per_cycle)?;
        embed_cycle(
            &self.normalization.apply(&resampled),
            &self.embedding,
            self.stage_id,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = crate::read_json(path)?;
        if v.schema_version != PREPROCESSING_SCHEMA {
            return Err(Error::validation(format!(
                "preprocessing schema {} is not supported",
                v.schema_version
            )));
        }
        Ok(v)
    }
}

/// Source models of one stage plus the transfer state for a target.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModels {
    pub preprocessing: Preprocessing,
    pub subspace: SubspaceModel,
    pub estimator: TrainedEstimator,
    pub limit: ControlLimit,
    pub decision: Option<DriftDecision>,
    pub compensation: Option<CompensationModel>,
}

/// One transfer estimate with its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEstimate {
    pub source: f64,
    pub correction: f64,
    pub corrected: f64,
}

/// Per-stage source models, limits and (after transfer) decisions and
/// compensation models.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferPredictor {
    pub stages: BTreeMap<u32, StageModels>,
}

impl TransferPredictor {
    pub fn stage(&self, stage_id: u32) -> Result<&StageModels> {
        self.stages
            .get(&stage_id)
            .ok_or_else(|| Error::validation(format!("no source model for stage {stage_id}")))
    }

    /// Decomposes a raw cycle with the stage's source transforms.
    pub fn decompose(&self, stage_id: u32, cycle: &CycleRecord) -> Result<ComponentSplit> {
        let models = self.stage(stage_id)?;
        transform(&models.subspace, &models.preprocessing.embed(cycle)?)
    }

    /// Runs the similarity check for one stage and, on drift, fits the
    /// compensation from the first `t` labeled target cycles.
    pub fn adapt_stage(
        &mut self,
        stage_id: u32,
        target_splits: &[ComponentSplit],
        target_capacities: Option<&[f64]>,
        t: usize,
        cfg: &CompensationConfig,
    ) -> Result<&DriftDecision> {
        let models = self
            .stages
            .get_mut(&stage_id)
            .ok_or_else(|| Error::validation(format!("no source model for stage {stage_id}")))?;
        let decision = similarity_check(&models.limit, target_splits, t)?;
        models.compensation = match decision.verdict {
            Verdict::Direct => None,
            Verdict::Compensate => {
                let caps = target_capacities
                    .filter(|c| c.len() >= t)
                    .ok_or_else(|| {
                        Error::validation(format!(
                            "stage {stage_id}: drift declared; compensation needs capacity labels for the first {t} target cycles"
                        ))
                    })?;
                let s_d: Vec<DMatrix<f64>> = target_splits
                    .iter()
                    .map(|s| s.discrepancy.clone())
                    .collect();
                let source = models.estimator.predict_series(&s_d[..t])?;
                let errors: Vec<f64> = source.iter().zip(&caps[..t]).map(|(p, q)| p - q).collect();
                Some(fit_compensation_from_errors(
                    stage_id,
                    &s_d[..t],
                    &errors,
                    cfg,
                )?)
            }
        };
        models.decision = Some(decision);
        Ok(models.decision.as_ref().expect("just set"))
    }

    /// Estimates for every cycle of a target stage given its chronological
    /// component splits (windows for TemCap reach back within the stage).
    pub fn predict_stage(
        &self,
        stage_id: u32,
        splits: &[ComponentSplit],
    ) -> Result<Vec<TransferEstimate>> {
        let models = self.stage(stage_id)?;
        let s_d: Vec<DMatrix<f64>> = splits.iter().map(|s| s.discrepancy.clone()).collect();
        let source = models.estimator.predict_series(&s_d)?;
        source
            .into_iter()
            .zip(&s_d)
            .map(|(q, x)| {
                let correction = match &models.compensation {
                    Some(c) => c.predict(x)?,
                    None => 0.0,
                };
                Ok(TransferEstimate {
                    source: q,
                    correction,
                    corrected: q - correction,
                })
            })
            .collect()
    }

    /// Estimate for the last cycle of `history`.
    pub fn predict_transfer(
        &self,
        stage_id: u32,
        history: &[ComponentSplit],
    ) -> Result<TransferEstimate> {
        let models = self.stage(stage_id)?;
        let len = match &models.estimator.network {
            crate::estimators::Network::Temcap(m) => m.config.window,
            crate::estimators::Network::Lstm(_) => 1,
        };
        let start = history.len().saturating_sub(len);
        let window: Vec<DMatrix<f64>> =
            crate::estimators::window_indices(history.len() - 1 - start, len)
                .into_iter()
                .map(|k| history[start + k].discrepancy.clone())
                .collect();
        let last = history
            .last()
            .ok_or_else(|| Error::validation("empty history"))?;
        let source = models.estimator.predict_window(&window)?;
        let correction = match &models.compensation {
            Some(c) => c.predict(&last.discrepancy)?,
            None => 0.0,
        };
        Ok(TransferEstimate {
            source,
            correction,
            corrected: source - correction,
        })
    }

    /// Writes every stage's models plus a manifest into `dir`.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut stages = Vec::new();
        for (id, m) in &self.stages {
            let entry = BundleStage {
                stage_id: *id,
                preprocessing: format!("stage{id}_preprocessing.json"),
                subspace: format!("stage{id}_subspace.json"),
                estimator: format!("stage{id}_estimator.json"),
                control_limit: format!("stage{id}_control_limit.json"),
                compensation: m
                    .compensation
                    .as_ref()
                    .map(|_| format!("stage{id}_compensation.json")),
                decision: m.decision.clone(),
            };
            m.preprocessing.save(&dir.join(&entry.preprocessing))?;
            m.subspace.save(&dir.join(&entry.subspace))?;
            m.estimator.save(&dir.join(&entry.estimator))?;
            m.limit.save(&dir.join(&entry.control_limit))?;
            if let (Some(c), Some(name)) = (&m.compensation, &entry.compensation) {
                c.save(&dir.join(name))?;
            }
            stages.push(entry);
        }
        crate::write_json(
            &dir.join(BUNDLE_MANIFEST),
            &BundleManifest {
                schema_version: BUNDLE_SCHEMA,
                stages,
            },
        )
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = crate::read_json(&dir.join(BUNDLE_MANIFEST))?;
        if manifest.schema_version != BUNDLE_SCHEMA {
            return Err(Error::validation(format!(
                "bundle schema {} is not supported",
                manifest.schema_version
            )));
        }
        let mut stages = BTreeMap::new();
        for e in manifest.stages {
            let compensation = e
                .compensation
                .as_ref()
                .map(|n| CompensationModel::load(&dir.join(n)))
                .transpose()?;
            let compensate = e.decision.as_ref().map(|d| d.verdict) == Some(Verdict::Compensate);
            if compensation.is_some() != compensate {
                return Err(Error::validation(format!(
                    "stage {}: compensation model must be present exactly when drift was declared",
                    e.stage_id
                )));
            }
            stages.insert(
                e.stage_id,
                StageModels {
                    preprocessing: Preprocessing::load(&dir.join(&e.preprocessing))?,
                    subspace: SubspaceModel::load(&dir.join(&e.subspace))?,
                    estimator: TrainedEstimator::load(&dir.join(&e.estimator))?,
                    limit: ControlLimit::load(&dir.join(&e.control_limit))?,
                    decision: e.decision,
                    compensation,
                },
            );
        }
        Ok(Self { stages })
    }
}

pub const BUNDLE_MANIFEST: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleStage {
    pub stage_id: u32,
    pub preprocessing: String,
    pub subspace: String,
    pub estimator: String,
    pub control_limit: String,
    pub compensation: Option<String>,
    pub decision: Option<DriftDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub stages: Vec<BundleStage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Soh {
    pub ratio: f64,
    /// Above [`SOH_FLAG_THRESHOLD`], usually capacity regeneration or a bad rating.
    pub flagged: bool,
}

/// `Q_i / Q_rated`.
pub fn soh(capacity_ah: f64, rated_ah: f64) -> Result<Soh> {
    if !(rated_ah > 0.0) {
        return Err(Error::validation(format!(
            "rated capacity {rated_ah} must be positive"
        )));
    }
    let ratio = capacity_ah / rated_ah;
    Ok(Soh {
        ratio,
        flagged: ratio > SOH_FLAG_THRESHOLD,
    })
}

/// Root mean squared capacity error as a percentage of the rated capacity.
pub fn rmse_soh(predictions: &[f64], truths: &[f64], rated_ah: f64) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::validation(format!(
            "RMSE needs equal, non-empty inputs (got {} and {})",
            predictions.len(),
            truths.len()
        )));
    }
    if !(rated_ah > 0.0) {
        return Err(Error::validation(format!(
            "rated capacity {rated_ah} must be positive"
        )));
    }
    let mse = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt() / rated_ah * 100.0)
}
