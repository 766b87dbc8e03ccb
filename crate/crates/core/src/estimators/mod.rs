//! Per-stage capacity regressors on discrepancy components.

pub mod lstm;
pub mod nn;
pub mod temcap;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lstm::{lstm_forward, LstmRegressor};
pub use nn::{Activation, Parameters};
pub use temcap::{squash, temcap_forward, TemCapConfig, TemCapModel};

use crate::error::{Error, Result};
use nn::{export_tensors, import_tensors, Adam, AdamConfig, NamedTensor};
use temcap::CapsuleTrace;

pub const ESTIMATOR_SCHEMA: u32 = 1;
pub const DEFAULT_BACKBONE_THRESHOLD: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Lstm,
    Temcap,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Lstm => "lstm",
            Backbone::Temcap => "temcap",
        })
    }
}

/// LSTM for fewer than `threshold` training cycles, TemCap otherwise.
pub fn select_backbone(n_train_cycles: usize, threshold: usize) -> Backbone {
    if n_train_cycles < threshold {
        Backbone::Lstm
    } else {
        Backbone::Temcap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Samples per update; `None` trains full batch. Batches follow cycle order.
    pub batch_size: Option<usize>,
    pub lstm_hidden: Vec<usize>,
    pub fc_hidden: Vec<usize>,
    pub output_activation: Activation,
    pub temcap: TemCapConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-3,
            seed: 0,
            batch_size: None,
            lstm_hidden: vec![30],
            fc_hidden: Vec::new(),
            output_activation: Activation::Identity,
            temcap: TemCapConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::validation("batch size must be positive"));
        }
        self.temcap.validate()
    }
}

/// Trainable weights of either backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Lstm(LstmRegressor),
    Temcap(TemCapModel),
}

impl Parameters for Network {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        match self {
            Network::Lstm(m) => m.tensors(),
            Network::Temcap(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        match self {
            Network::Lstm(m) => m.tensors_mut(),
            Network::Temcap(m) => m.tensors_mut(),
        }
    }
}

/// Cycle indices of the window ending at cycle `i`; positions before the
/// first cycle repeat cycle 0.
pub fn window_indices(i: usize, len: usize) -> Vec<usize> {
    (0..len).map(|k| (i + k + 1).saturating_sub(len)).collect()
}

impl Network {
    fn zeros(backbone: Backbone, cfg: &TrainConfig, rows: usize, cols: usize) -> Result<Self> {
        Ok(match backbone {
            Backbone::Lstm => Network::Lstm(LstmRegressor::zeros(
                rows,
                &cfg.lstm_hidden,
                &cfg.fc_hidden,
                cfg.output_activation,
            )?),
            Backbone::Temcap => {
                Network::Temcap(TemCapModel::zeros(cfg.temcap.clone(), rows, cols)?)
            }
        })
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        match self {
            Network::Lstm(m) => m.init(rng),
            Network::Temcap(m) => m.init(rng),
        }
    }

    /// Raw network outputs for every cycle of a chronological sequence.
    pub fn outputs(&self, inputs: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        match self {
            Network::Lstm(m) => inputs.iter().map(|x| lstm_forward(m, x)).collect(),
            Network::Temcap(m) => {
                let feats = inputs
                    .iter()
                    .map(|x| m.capsules(x).map(|t| t.features()))
                    .collect::<Result<Vec<_>>>()?;
                (0..inputs.len())
                    .map(|i| {
                        let seq: Vec<DVector<f64>> = window_indices(i, m.config.window)
                            .into_iter()
                            .map(|k| feats[k].clone())
                            .collect();
                        m.trl.forward(&seq)
                    })
                    .collect()
            }
        }
    }

    /// Mean squared error over the cycles in `batch` and its gradient.
    /// `inputs` is the whole chronological sequence so TemCap windows can
    /// reach back before the batch.
    pub fn loss_and_gradient(
        &self,
        inputs: &[DMatrix<f64>],
        targets: &[f64],
        batch: &[usize],
    ) -> Result<(f64, Network)> {
        if inputs.len() != targets.len() || batch.is_empty() {
            return Err(Error::shape(
                "loss needs one target per input and a non-empty batch",
            ));
        }
        let mut grad = self.clone();
        grad.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        match (self, &mut grad) {
            (Network::Lstm(m), Network::Lstm(g)) => {
                let shape = inputs[batch[0]].shape();
                if let Some(&i) = batch.iter().find(|&&i| inputs[i].shape() != shape) {
                    return Err(Error::shape(format!(
                        "cycle {i} has shape {:?}, expected {shape:?}",
                        inputs[i].shape()
                    )));
                }
                let xs: Vec<DMatrix<f64>> = (0..shape.1)
                    .map(|t| {
                        DMatrix::from_fn(shape.0, batch.len(), |r, b| inputs[batch[b]][(r, t)])
                    })
                    .collect();
                let tr = m.forward_batch(&xs)?;
                let dy: Vec<f64> = tr
                    .outputs()
                    .iter()
                    .zip(batch)
                    .map(|(y, &i)| {
                        let err = y - targets[i];
                        loss += err * err * scale;
                        2.0 * err * scale
                    })
                    .collect();
                m.backward_batch(&tr, &dy, g);
            }
            (Network::Temcap(m), Network::Temcap(g)) => {
                let len = m.config.window;
                let needed: BTreeSet<usize> =
                    batch.iter().flat_map(|&i| window_indices(i, len)).collect();
                let mut caps: BTreeMap<usize, CapsuleTrace> = BTreeMap::new();
                for &k in &needed {
                    caps.insert(k, m.capsules(&inputs[k])?);
                }
                let feat_dim = m.config.advanced_capsules * m.config.advanced_dim;
                let mut dfeat: BTreeMap<usize, DVector<f64>> = needed
                    .iter()
                    .map(|&k| (k, DVector::zeros(feat_dim)))
                    .collect();
                let feats: BTreeMap<usize, DVector<f64>> =
                    caps.iter().map(|(&k, c)| (k, c.features())).collect();
                let windows: Vec<Vec<usize>> =
                    batch.iter().map(|&i| window_indices(i, len)).collect();
                let xs: Vec<DMatrix<f64>> = (0..len)
                    .map(|t| {
                        let mut x = DMatrix::zeros(feat_dim, batch.len());
                        for (b, w) in windows.iter().enumerate() {
                            x.set_column(b, &feats[&w[t]]);
                        }
                        x
                    })
                    .collect();
                let tr = m.trl.forward_batch(&xs)?;
                let dy: Vec<f64> = tr
                    .outputs()
                    .iter()
                    .zip(batch)
                    .map(|(y, &i)| {
                        let err = y - targets[i];
                        loss += err * err * scale;
                        2.0 * err * scale
                    })
                    .collect();
                let dseq = m.trl.backward_batch(&tr, &dy, &mut g.trl);
                for (b, w) in windows.iter().enumerate() {
                    for (t, k) in w.iter().enumerate() {
                        *dfeat.get_mut(k).expect("window cycle cached") += dseq[t].column(b);
                    }
                }
                for (k, trace) in &caps {
                    m.capsules_backward(trace, &dfeat[k], g);
                }
            }
            _ => unreachable!("gradient has the model's variant"),
        }
        Ok((loss, grad))
    }
}

/// A trained per-stage regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEstimator {
    pub backbone: Backbone,
    pub stage_id: u32,
    pub config: TrainConfig,
    pub network: Network,
    /// Targets are standardized as `(Q − mean) / scale` during training.
    pub target_mean: f64,
    pub target_scale: f64,
    /// Mean squared capacity error (Ah²) on the training set, per epoch.
    pub loss_trace: Vec<f64>,
}

fn input_shape(inputs: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::validation("no training cycles"))?;
    let shape = first.shape();
    if inputs.iter().any(|x| x.shape() != shape) {
        return Err(Error::shape(
            "training cycles have different discrepancy shapes",
        ));
    }
    Ok(shape)
}

/// Trains `backbone` on chronologically ordered discrepancy matrices and
/// their capacities by Adam on the mean squared error.
pub fn train(
    backbone: Backbone,
    stage_id: u32,
    inputs: &[DMatrix<f64>],
    capacities: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainedEstimator> {
    cfg.validate()?;
    if inputs.len() != capacities.len() {
        return Err(Error::shape(format!(
            "{} training inputs but {} capacities",
            inputs.len(),
            capacities.len()
        )));
    }
    let min_cycles = match backbone {
        Backbone::Lstm => 2,
        Backbone::Temcap => cfg.temcap.window + 1,
    };
    if inputs.len() < min_cycles {
        return Err(Error::validation(format!(
            "stage {stage_id}: {backbone} training needs at least {min_cycles} labeled cycles, got {}",
            inputs.len()
        )));
    }
    if capacities.iter().any(|q| !q.is_finite()) {
        return Err(Error::validation(format!(
            "stage {stage_id}: non-finite capacity label"
        )));
    }
    let (rows, cols) = input_shape(inputs)?;
    let n = capacities.len() as f64;
    let mean = capacities.iter().sum::<f64>() / n;
    let std = (capacities.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-9 * mean.abs().max(1.0) {
        std
    } else {
        1.0
    };
    let targets: Vec<f64> = capacities.iter().map(|q| (q - mean) / scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut network = Network::zeros(backbone, cfg, rows, cols)?;
    network.init(&mut rng);
    let mut adam = Adam::new(
        &network,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let order: Vec<usize> = (0..inputs.len()).collect();
    let batch = cfg.batch_size.unwrap_or(order.len()).min(order.len());
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, grad) = network.loss_and_gradient(inputs, &targets, chunk)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::numerical(format!(
                    "stage {stage_id}: non-finite training loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut network, &grad);
        }
        loss_trace.push(epoch_loss / order.len() as f64 * scale * scale);
    }
    if !network.all_finite() {
        return Err(Error::numerical(format!(
            "stage {stage_id}: weights became non-finite after {} epochs",
            cfg.epochs
        )));
    }
    log::debug!(
        "stage {stage_id}: {backbone} trained, final loss {:.3e}",
        loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TrainedEstimator {
        backbone,
        stage_id,
        config: cfg.clone(),
        network,
        target_mean: mean,
        target_scale: scale,
        loss_trace,
    })
}

impl TrainedEstimator {
    pub fn input_shape(&self) -> (usize, usize) {
        match &self.network {
            Network::Lstm(m) => (m.input_dim(), 0),
            Network::Temcap(m) => (m.input_rows, m.input_cols),
        }
    }

    fn unscale(&self, y: f64) -> f64 {
        self.target_mean + self.target_scale * y
    }

    /// Capacity estimate from one cycle's discrepancy components. TemCap
    /// needs a window; use [`predict_window`](Self::predict_window).
    pub fn predict_cycle(&self, s_d: &DMatrix<f64>) -> Result<f64> {
        match &self.network {
            Network::Lstm(m) => Ok(self.unscale(lstm_forward(m, s_d)?)),
            Network::Temcap(m) => Err(Error::validation(format!(
                "TemCap predicts from a window of {} cycles",
                m.config.window
            ))),
        }
    }

    /// Capacity of the last cycle of `window`. An LSTM only looks at the
    /// last cycle.
    pub fn predict_window(&self, window: &[DMatrix<f64>]) -> Result<f64> {
        match &self.network {
            Network::Lstm(m) => {
                let last = window
                    .last()
                    .ok_or_else(|| Error::validation("empty window"))?;
                Ok(self.unscale(lstm_forward(m, last)?))
            }
            Network::Temcap(m) => Ok(self.unscale(temcap_forward(m, window)?)),
        }
    }

    /// Estimates for every cycle of a chronological sequence; TemCap
    /// windows at the start repeat the first cycle.
    pub fn predict_series(&self, inputs: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        Ok(self
            .network
            .outputs(inputs)?
            .into_iter()
            .map(|y| self.unscale(y))
            .collect())
    }

    pub fn to_file(&self) -> EstimatorFile {
        let (rows, cols) = self.input_shape();
        EstimatorFile {
            schema_version: ESTIMATOR_SCHEMA,
            backbone: self.backbone,
            stage_id: self.stage_id,
            hyperparameters: self.config.clone(),
            input_rows: rows,
            input_cols: cols,
            seed: self.config.seed,
            target_mean: self.target_mean,
            target_scale: self.target_scale,
            loss_trace: self.loss_trace.clone(),
            weights: export_tensors(&self.network),
        }
    }

    pub fn from_file(file: EstimatorFile) -> Result<Self> {
        if file.schema_version != ESTIMATOR_SCHEMA {
            return Err(Error::validation(format!(
                "estimator schema {} is not supported",
                file.schema_version
            )));
        }
        let mut network = Network::zeros(
            file.backbone,
            &file.hyperparameters,
            file.input_rows,
            file.input_cols,
        )?;
        import_tensors(&mut network, &file.weights)?;
        Ok(Self {
            backbone: file.backbone,
            stage_id: file.stage_id,
            config: file.hyperparameters,
            network,
            target_mean: file.target_mean,
            target_scale: file.target_scale,
            loss_trace: file.loss_trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(crate::read_json(path)?)
    }
}

/// On-disk form of a [`TrainedEstimator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorFile {
    pub schema_version: u32,
    pub backbone: Backbone,
    pub stage_id: u32,
    pub hyperparameters: TrainConfig,
    pub input_rows: usize,
    /// Samples per discrepancy row; 0 for the LSTM, which accepts any length.
    pub input_cols: usize,
    pub seed: u64,
    pub target_mean: f64,
    pub target_scale: f64,
    pub loss_trace: Vec<f64>,
    pub weights: BTreeMap<String, NamedTensor>,
}
