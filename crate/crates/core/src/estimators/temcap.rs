//! Temporal capsule network.
//!
//! Per cycle, a `1 × kernel` convolution with `filters` output maps runs
//! over each row of the discrepancy matrix (no pooling) followed by ReLU.
//! At every output position the filter responses are cut into groups of
//! `capsule_dim` consecutive filters; each group is one basic capsule, and
//! its group index is the capsule type. Every basic capsule predicts each
//! advanced capsule through a matrix shared by its type, dynamic routing
//! combines the predictions, and the squashed advanced capsules are
//! flattened into one vector per cycle. An LSTM over a window of such
//! vectors estimates the capacity of the window's last cycle.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{LstmRegressor, LstmTrace};
use super::nn::{fill_uniform, Activation, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemCapConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Basic capsule dimension `M`.
    pub capsule_dim: usize,
    /// Advanced capsule count `D`.
    pub advanced_capsules: usize,
    pub advanced_dim: usize,
    pub routing_iters: usize,
    pub trl_hidden: Vec<usize>,
    /// Cycles per sequence fed to the recurrent layer.
    pub window: usize,
}

impl Default for TemCapConfig {
    fn default() -> Self {
        Self {
            filters: 32,
            kernel: 2,
            stride: 2,
            capsule_dim: 4,
            advanced_capsules: 4,
            advanced_dim: 8,
            routing_iters: 3,
            trl_hidden: vec![16],
            window: 5,
        }
    }
}

impl TemCapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.capsule_dim == 0 || self.filters % self.capsule_dim != 0 {
            return Err(Error::validation(format!(
                "filter count {} must be a positive multiple of the capsule dimension {}",
                self.filters, self.capsule_dim
            )));
        }
        if self.kernel == 0 || self.stride == 0 || self.routing_iters == 0 || self.window == 0 {
            return Err(Error::validation(
                "kernel, stride, routing iterations and window must be positive",
            ));
        }
        if self.advanced_capsules == 0 || self.advanced_dim == 0 {
            return Err(Error::validation(
                "advanced capsule count and dimension must be positive",
            ));
        }
        Ok(())
    }

    pub fn capsule_types(&self) -> usize {
        self.filters / self.capsule_dim
    }
}

/// `s = (‖v‖²/(1+‖v‖²)) · v/‖v‖`, with `s = 0` at `v = 0`.
pub fn squash(v: &DVector<f64>) -> DVector<f64> {
    let n2 = v.norm_squared();
    if n2 == 0.0 {
        return DVector::zeros(v.len());
    }
    let n = n2.sqrt();
    v * (n / (1.0 + n2))
}

/// Vector-Jacobian product of [`squash`] at `v`.
pub fn squash_backward(v: &DVector<f64>, ds: &DVector<f64>) -> DVector<f64> {
    let n2 = v.norm_squared();
    if n2 == 0.0 {
        return DVector::zeros(v.len());
    }
    let n = n2.sqrt();
    let alpha = n / (1.0 + n2);
    let dalpha_over_n = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n);
    ds * alpha + v * (dalpha_over_n * v.dot(ds))
}

fn softmax_rows(b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = b.clone();
    for mut row in c.row_iter_mut() {
        let mx = row.max();
        row.apply(|x| *x = (*x - mx).exp());
        let s = row.sum();
        row /= s;
    }
    c
}

/// Dynamic routing state for one cycle, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// `uhat[j]` is `advanced_dim × n`: column `m` predicts capsule `j` from basic capsule `m`.
    pub uhat: Vec<DMatrix<f64>>,
    /// Coupling coefficients per iteration, `n × D`.
    pub coupling: Vec<DMatrix<f64>>,
    pub pre: Vec<Vec<DVector<f64>>>,
    pub squashed: Vec<Vec<DVector<f64>>>,
}

impl RoutingTrace {
    pub fn output(&self) -> &[DVector<f64>] {
        self.squashed.last().expect("at least one iteration")
    }
}

/// Routes predictions `uhat[j]` (each `dim × n`) into advanced capsules.
pub fn dynamic_routing(uhat: Vec<DMatrix<f64>>, iters: usize) -> RoutingTrace {
    let d = uhat.len();
    let n = uhat.first().map_or(0, |u| u.ncols());
    let mut logits = DMatrix::zeros(n, d);
    let mut coupling = Vec::with_capacity(iters);
    let mut pre = Vec::with_capacity(iters);
    let mut squashed = Vec::with_capacity(iters);
    for it in 0..iters {
        let c = softmax_rows(&logits);
        let v: Vec<DVector<f64>> = (0..d).map(|j| &uhat[j] * c.column(j)).collect();
        let s: Vec<DVector<f64>> = v.iter().map(squash).collect();
        if it + 1 < iters {
            for j in 0..d {
                let agree = uhat[j].tr_mul(&s[j]);
                let mut col = logits.column_mut(j);
                col += agree;
            }
        }
        coupling.push(c);
        pre.push(v);
        squashed.push(s);
    }
    RoutingTrace {
        uhat,
        coupling,
        pre,
        squashed,
    }
}

/// Gradient of the routed output with respect to every prediction.
pub fn dynamic_routing_backward(
    trace: &RoutingTrace,
    ds_out: &[DVector<f64>],
) -> Vec<DMatrix<f64>> {
    let iters = trace.coupling.len();
    let d = trace.uhat.len();
    let n = trace.uhat[0].ncols();
    let mut duhat: Vec<DMatrix<f64>> = trace
        .uhat
        .iter()
        .map(|u| DMatrix::zeros(u.nrows(), n))
        .collect();
    // gradient with respect to the logits entering the next iteration
    let mut dlogits_next = DMatrix::<f64>::zeros(n, d);
    for it in (0..iters).rev() {
        let c = &trace.coupling[it];
        let s = &trace.squashed[it];
        let mut dc = DMatrix::zeros(n, d);
        for j in 0..d {
            let mut ds = if it + 1 == iters {
                ds_out[j].clone()
            } else {
                DVector::zeros(s[j].len())
            };
            if it + 1 < iters {
                let db = dlogits_next.column(j);
                ds += &trace.uhat[j] * db;
                duhat[j] += &s[j] * db.transpose();
            }
            let dv = squash_backward(&trace.pre[it][j], &ds);
            dc.set_column(j, &trace.uhat[j].tr_mul(&dv));
            duhat[j] += &dv * c.column(j).transpose();
        }
        // softmax over advanced capsules, row by row
        let mut dlogits = if it + 1 < iters {
            dlogits_next.clone()
        } else {
            DMatrix::zeros(n, d)
        };
        for m in 0..n {
            let dot: f64 = (0..d).map(|j| c[(m, j)] * dc[(m, j)]).sum();
            for j in 0..d {
                dlogits[(m, j)] += c[(m, j)] * (dc[(m, j)] - dot);
            }
        }
        dlogits_next = dlogits;
    }
    duhat
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemCapModel {
    pub config: TemCapConfig,
    /// Discrepancy rows per cycle.
    pub input_rows: usize,
    /// Samples per row.
    pub input_cols: usize,
    /// `filters × kernel`.
    pub conv_w: DMatrix<f64>,
    pub conv_b: DMatrix<f64>,
    /// Indexed `type * D + j`, each `advanced_dim × capsule_dim`.
    pub route_w: Vec<DMatrix<f64>>,
    pub trl: LstmRegressor,
}

/// Forward state of the capsule layers for one cycle.
pub struct CapsuleTrace {
    x: DMatrix<f64>,
    /// Convolution pre-activations, `filters × (rows·positions)`.
    conv_pre: DMatrix<f64>,
    /// Basic capsules as columns, `capsule_dim × n`.
    u: DMatrix<f64>,
    routing: RoutingTrace,
}

impl CapsuleTrace {
    /// Advanced capsules flattened into one vector.
    pub fn features(&self) -> DVector<f64> {
        let out = self.routing.output();
        let dim = out[0].len();
        let mut v = DVector::zeros(out.len() * dim);
        for (j, s) in out.iter().enumerate() {
            v.rows_mut(j * dim, dim).copy_from(s);
        }
        v
    }

    pub fn routing(&self) -> &RoutingTrace {
        &self.routing
    }
}

impl TemCapModel {
    pub fn zeros(config: TemCapConfig, input_rows: usize, input_cols: usize) -> Result<Self> {
        config.validate()?;
        if input_rows == 0 || input_cols < config.kernel {
            return Err(Error::shape(format!(
                "TemCap input {input_rows}x{input_cols} is smaller than the {}-sample kernel",
                config.kernel
            )));
        }
        let types = config.capsule_types();
        let route_w = (0..types * config.advanced_capsules)
            .map(|_| DMatrix::zeros(config.advanced_dim, config.capsule_dim))
            .collect();
        let trl = LstmRegressor::zeros(
            config.advanced_capsules * config.advanced_dim,
            &config.trl_hidden,
            &[],
            Activation::Identity,
        )?;
        Ok(Self {
            conv_w: DMatrix::zeros(config.filters, config.kernel),
            conv_b: DMatrix::zeros(config.filters, 1),
            route_w,
            trl,
            input_rows,
            input_cols,
            config,
        })
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let kb = 1.0 / (self.config.kernel as f64).sqrt();
        fill_uniform(&mut self.conv_w, kb, rng);
        fill_uniform(&mut self.conv_b, kb, rng);
        let rb = 1.0 / (self.config.capsule_dim as f64).sqrt();
        for w in &mut self.route_w {
            fill_uniform(w, rb, rng);
        }
        self.trl.init(rng);
    }

    pub fn positions(&self) -> usize {
        (self.input_cols - self.config.kernel) / self.config.stride + 1
    }

    /// Number of basic capsules per cycle.
    pub fn basic_capsules(&self) -> usize {
        self.input_rows * self.positions() * self.config.capsule_types()
    }

    pub fn capsules(&self, x: &DMatrix<f64>) -> Result<CapsuleTrace> {
        if x.shape() != (self.input_rows, self.input_cols) {
            return Err(Error::shape(format!(
                "TemCap expects {}x{} discrepancy matrices, got {:?}",
                self.input_rows,
                self.input_cols,
                x.shape()
            )));
        }
        let cfg = &self.config;
        let (p, types, m_dim, d) = (
            self.positions(),
            cfg.capsule_types(),
            cfg.capsule_dim,
            cfg.advanced_capsules,
        );
        let sites = self.input_rows * p;
        // patches: kernel × sites
        let patches = DMatrix::from_fn(cfg.kernel, sites, |k, site| {
            let (r, q) = (site / p, site % p);
            x[(r, q * cfg.stride + k)]
        });
        let mut conv_pre = &self.conv_w * &patches;
        for mut col in conv_pre.column_iter_mut() {
            col += self.conv_b.column(0);
        }
        let n = sites * types;
        let mut u = DMatrix::zeros(m_dim, n);
        for site in 0..sites {
            for t in 0..types {
                for k in 0..m_dim {
                    u[(k, site * types + t)] = conv_pre[(t * m_dim + k, site)].max(0.0);
                }
            }
        }
        let mut uhat = vec![DMatrix::zeros(cfg.advanced_dim, n); d];
        for (j, uh) in uhat.iter_mut().enumerate() {
            for t in 0..types {
                let w = &self.route_w[t * d + j];
                for site in 0..sites {
                    let m = site * types + t;
                    uh.set_column(m, &(w * u.column(m)));
                }
            }
        }
        let routing = dynamic_routing(uhat, cfg.routing_iters);
        Ok(CapsuleTrace {
            x: x.clone(),
            conv_pre,
            u,
            routing,
        })
    }

    /// Accumulates capsule-layer gradients given `dL/d(features)`.
    pub fn capsules_backward(
        &self,
        trace: &CapsuleTrace,
        dfeat: &DVector<f64>,
        grad: &mut TemCapModel,
    ) {
        let cfg = &self.config;
        let (p, types, m_dim, d, a_dim) = (
            self.positions(),
            cfg.capsule_types(),
            cfg.capsule_dim,
            cfg.advanced_capsules,
            cfg.advanced_dim,
        );
        let ds: Vec<DVector<f64>> = (0..d)
            .map(|j| dfeat.rows(j * a_dim, a_dim).into_owned())
            .collect();
        let duhat = dynamic_routing_backward(&trace.routing, &ds);
        let sites = self.input_rows * p;
        let mut du = DMatrix::zeros(m_dim, trace.u.ncols());
        for (j, dj) in duhat.iter().enumerate() {
            for t in 0..types {
                let w = &self.route_w[t * d + j];
                let mut gw = DMatrix::zeros(a_dim, m_dim);
                for site in 0..sites {
                    let m = site * types + t;
                    gw.ger(1.0, &dj.column(m), &trace.u.column(m), 1.0);
                    let back = w.tr_mul(&dj.column(m));
                    let mut col = du.column_mut(m);
                    col += back;
                }
                grad.route_w[t * d + j] += gw;
            }
        }
        let mut dpre = DMatrix::zeros(cfg.filters, sites);
        for site in 0..sites {
            for t in 0..types {
                for k in 0..m_dim {
                    let f = t * m_dim + k;
                    if trace.conv_pre[(f, site)] > 0.0 {
                        dpre[(f, site)] = du[(k, site * types + t)];
                    }
                }
            }
        }
        for site in 0..sites {
            let (r, q) = (site / p, site % p);
            for f in 0..cfg.filters {
                let g = dpre[(f, site)];
                if g == 0.0 {
                    continue;
                }
                grad.conv_b[(f, 0)] += g;
                for k in 0..cfg.kernel {
                    grad.conv_w[(f, k)] += g * trace.x[(r, q * cfg.stride + k)];
                }
            }
        }
    }

    /// Recurrent layer over a sequence of per-cycle feature vectors.
    pub fn trl_trace(&self, features: &[DVector<f64>]) -> Result<LstmTrace> {
        self.trl.forward_trace(features)
    }
}

impl Parameters for TemCapModel {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let d = self.config.advanced_capsules;
        let mut out = vec![
            ("bcl.kernel".to_string(), &self.conv_w),
            ("bcl.bias".to_string(), &self.conv_b),
        ];
        for (k, w) in self.route_w.iter().enumerate() {
            out.push((format!("acl.w.{}.{}", k / d, k % d), w));
        }
        for (n, t) in self.trl.tensors() {
            out.push((format!("trl.{n}"), t));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let d = self.config.advanced_capsules;
        let mut out = vec![
            ("bcl.kernel".to_string(), &mut self.conv_w),
            ("bcl.bias".to_string(), &mut self.conv_b),
        ];
        for (k, w) in self.route_w.iter_mut().enumerate() {
            out.push((format!("acl.w.{}.{}", k / d, k % d), w));
        }
        for (n, t) in self.trl.tensors_mut() {
            out.push((format!("trl.{n}"), t));
        }
        out
    }
}

/// Capacity estimate for the last cycle of a window of exactly `L`
/// discrepancy matrices.
pub fn temcap_forward(model: &TemCapModel, window: &[DMatrix<f64>]) -> Result<f64> {
    if window.len() != model.config.window {
        return Err(Error::validation(format!(
            "TemCap needs a window of {} cycles, got {}",
            model.config.window,
            window.len()
        )));
    }
    let feats = window
        .iter()
        .map(|x| model.capsules(x).map(|t| t.features()))
        .collect::<Result<Vec<_>>>()?;
    model.trl.forward(&feats)
}
