//! LSTM regressor: a stack of LSTM layers over a sequence of feature
//! vectors, with the final hidden state fed through a dense head.
//!
//! Gate rows are ordered input, forget, candidate, output.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::nn::{fill_uniform, sigmoid, Activation, Head, HeadTrace, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_x: DMatrix<f64>,
    pub w_h: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

struct Step {
    x: DVector<f64>,
    h_prev: DVector<f64>,
    c_prev: DVector<f64>,
    i: DVector<f64>,
    f: DVector<f64>,
    g: DVector<f64>,
    o: DVector<f64>,
    tanh_c: DVector<f64>,
}

/// Cached forward pass of one layer over a sequence.
pub struct LayerTrace {
    steps: Vec<Step>,
    pub outputs: Vec<DVector<f64>>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: DMatrix::zeros(4 * hidden, input),
            w_h: DMatrix::zeros(4 * hidden, hidden),
            b: DMatrix::zeros(4 * hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }

    /// Every gate pre-activation has fan-in `input + hidden`.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / ((self.input_dim() + self.hidden()) as f64).sqrt();
        fill_uniform(&mut self.w_x, bound, rng);
        fill_uniform(&mut self.w_h, bound, rng);
        fill_uniform(&mut self.b, bound, rng);
    }

    pub fn forward(&self, xs: &[DVector<f64>]) -> LayerTrace {
        let hn = self.hidden();
        let mut h = DVector::zeros(hn);
        let mut c = DVector::zeros(hn);
        let mut steps = Vec::with_capacity(xs.len());
        let mut outputs = Vec::with_capacity(xs.len());
        for x in xs {
            let z = &self.w_x * x + &self.w_h * &h + self.b.column(0);
            let i = z.rows(0, hn).map(sigmoid);
            let f = z.rows(hn, hn).map(sigmoid);
            let g = z.rows(2 * hn, hn).map(f64::tanh);
            let o = z.rows(3 * hn, hn).map(sigmoid);
            let c_new = f.component_mul(&c) + i.component_mul(&g);
            let tanh_c = c_new.map(f64::tanh);
            let h_new = o.component_mul(&tanh_c);
            steps.push(Step {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                tanh_c,
            });
            outputs.push(h_new.clone());
            h = h_new;
            c = c_new;
        }
        LayerTrace { steps, outputs }
    }

    /// Backpropagation through time. `dh[t]` is the loss gradient arriving
    /// at output `t` from above; returns the gradient for each input.
    pub fn backward(
        &self,
        trace: &LayerTrace,
        dh: &[DVector<f64>],
        grad: &mut LstmLayer,
    ) -> Vec<DVector<f64>> {
        let hn = self.hidden();
        let mut dh_next = DVector::zeros(hn);
        let mut dc_next = DVector::zeros(hn);
        let mut dxs = vec![DVector::zeros(self.input_dim()); trace.steps.len()];
        let mut dz = DVector::zeros(4 * hn);
        for t in (0..trace.steps.len()).rev() {
            let s = &trace.steps[t];
            let dh_t = &dh[t] + &dh_next;
            let d_o = dh_t.component_mul(&s.tanh_c);
            let dc = dh_t
                .component_mul(&s.o)
                .component_mul(&s.tanh_c.map(|v| 1.0 - v * v))
                + &dc_next;
            let di = dc.component_mul(&s.g);
            let dg = dc.component_mul(&s.i);
            let df = dc.component_mul(&s.c_prev);
            dc_next = dc.component_mul(&s.f);
            dz.rows_mut(0, hn)
                .copy_from(&di.zip_map(&s.i, |d, v| d * v * (1.0 - v)));
            dz.rows_mut(hn, hn)
                .copy_from(&df.zip_map(&s.f, |d, v| d * v * (1.0 - v)));
            dz.rows_mut(2 * hn, hn)
                .copy_from(&dg.zip_map(&s.g, |d, v| d * (1.0 - v * v)));
            dz.rows_mut(3 * hn, hn)
                .copy_from(&d_o.zip_map(&s.o, |d, v| d * v * (1.0 - v)));
            grad.w_x.ger(1.0, &dz, &s.x, 1.0);
            grad.w_h.ger(1.0, &dz, &s.h_prev, 1.0);
            let mut gb = grad.b.column_mut(0);
            gb += &dz;
            dxs[t] = self.w_x.tr_mul(&dz);
            dh_next = self.w_h.tr_mul(&dz);
        }
        dxs
    }
}

struct BatchStep {
    x: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    c_prev: DMatrix<f64>,
    i: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    o: DMatrix<f64>,
    tanh_c: DMatrix<f64>,
}

/// Cached forward pass of one layer over a batch of equal-length sequences.
/// Every matrix holds one sequence per column.
pub struct BatchLayerTrace {
    steps: Vec<BatchStep>,
    pub outputs: Vec<DMatrix<f64>>,
}

impl LstmLayer {
    /// Same recurrence as [`forward`](Self::forward), with `xs[t]` holding
    /// step `t` of every sequence as columns, so each step is one
    /// matrix-matrix product instead of one product per sequence.
    pub fn forward_batch(&self, xs: &[DMatrix<f64>]) -> BatchLayerTrace {
        let hn = self.hidden();
        let batch = xs.first().map_or(0, |x| x.ncols());
        let mut h = DMatrix::zeros(hn, batch);
        let mut c = DMatrix::zeros(hn, batch);
        let mut z = DMatrix::zeros(4 * hn, batch);
        let mut steps = Vec::with_capacity(xs.len());
        let mut outputs = Vec::with_capacity(xs.len());
        for x in xs {
            z.gemm(1.0, &self.w_x, x, 0.0);
            z.gemm(1.0, &self.w_h, &h, 1.0);
            for mut col in z.column_iter_mut() {
                col += self.b.column(0);
            }
            let i = z.rows(0, hn).map(sigmoid);
            let f = z.rows(hn, hn).map(sigmoid);
            let g = z.rows(2 * hn, hn).map(f64::tanh);
            let o = z.rows(3 * hn, hn).map(sigmoid);
            let c_new = f.component_mul(&c) + i.component_mul(&g);
            let tanh_c = c_new.map(f64::tanh);
            let h_new = o.component_mul(&tanh_c);
            steps.push(BatchStep {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                tanh_c,
            });
            outputs.push(h_new.clone());
            h = h_new;
            c = c_new;
        }
        BatchLayerTrace { steps, outputs }
    }

    /// Batched backpropagation through time; gradients are summed over the
    /// batch.
    pub fn backward_batch(
        &self,
        trace: &BatchLayerTrace,
        dh: &[DMatrix<f64>],
        grad: &mut LstmLayer,
    ) -> Vec<DMatrix<f64>> {
        let hn = self.hidden();
        let batch = dh.first().map_or(0, |d| d.ncols());
        let mut dh_next = DMatrix::zeros(hn, batch);
        let mut dc_next = DMatrix::zeros(hn, batch);
        // both transposes are formed once: a plain product is much faster than tr_mul
        let w_x_t = self.w_x.transpose();
        let w_h_t = self.w_h.transpose();
        let mut dxs = vec![DMatrix::zeros(0, 0); trace.steps.len()];
        let mut dz = DMatrix::zeros(4 * hn, batch);
        for t in (0..trace.steps.len()).rev() {
            let s = &trace.steps[t];
            let dh_t = &dh[t] + &dh_next;
            let d_o = dh_t.component_mul(&s.tanh_c);
            let dc = dh_t
                .component_mul(&s.o)
                .component_mul(&s.tanh_c.map(|v| 1.0 - v * v))
                + &dc_next;
            let di = dc.component_mul(&s.g);
            let dg = dc.component_mul(&s.i);
            let df = dc.component_mul(&s.c_prev);
            dc_next = dc.component_mul(&s.f);
            dz.rows_mut(0, hn)
                .copy_from(&di.zip_map(&s.i, |d, v| d * v * (1.0 - v)));
            dz.rows_mut(hn, hn)
                .copy_from(&df.zip_map(&s.f, |d, v| d * v * (1.0 - v)));
            dz.rows_mut(2 * hn, hn)
                .copy_from(&dg.zip_map(&s.g, |d, v| d * (1.0 - v * v)));
            dz.rows_mut(3 * hn, hn)
                .copy_from(&d_o.zip_map(&s.o, |d, v| d * v * (1.0 - v)));
            grad.w_x.gemm(1.0, &dz, &s.x.transpose(), 1.0);
            grad.w_h.gemm(1.0, &dz, &s.h_prev.transpose(), 1.0);
            let mut gb = grad.b.column_mut(0);
            gb += dz.column_sum();
            dxs[t] = &w_x_t * &dz;
            dh_next = &w_h_t * &dz;
        }
        dxs
    }
}

/// Stacked LSTM over a sequence followed by a dense head on the last
/// hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmRegressor {
    pub layers: Vec<LstmLayer>,
    pub head: Head,
}

pub struct LstmTrace {
    layers: Vec<LayerTrace>,
    head: HeadTrace,
}

impl LstmTrace {
    pub fn output(&self) -> f64 {
        self.head.y
    }
}

pub struct BatchTrace {
    layers: Vec<BatchLayerTrace>,
    heads: Vec<HeadTrace>,
}

impl BatchTrace {
    pub fn outputs(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.y).collect()
    }
}

impl LstmRegressor {
    /// Zero-initialized network; `hidden` lists the LSTM layer widths and
    /// `fc` the ReLU head widths.
    pub fn zeros(
        input: usize,
        hidden: &[usize],
        fc: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if input == 0 || hidden.is_empty() || hidden.iter().chain(fc).any(|&h| h == 0) {
            return Err(Error::validation(
                "LSTM needs a positive input size and at least one non-empty layer",
            ));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut dim = input;
        for &h in hidden {
            layers.push(LstmLayer::zeros(dim, h));
            dim = h;
        }
        Ok(Self {
            layers,
            head: Head::zeros(dim, fc, activation),
        })
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for l in &mut self.layers {
            l.init(rng);
        }
        self.head.init(rng);
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn forward_trace(&self, xs: &[DVector<f64>]) -> Result<LstmTrace> {
        if xs.is_empty() {
            return Err(Error::shape("LSTM input sequence is empty"));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.input_dim()) {
            return Err(Error::shape(format!(
                "LSTM expects {} features per step, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let trace = match k {
                0 => l.forward(xs),
                _ => l.forward(&layers[k - 1].outputs),
            };
            layers.push(trace);
        }
        let last = layers
            .last()
            .expect("at least one layer")
            .outputs
            .last()
            .expect("non-empty");
        let head = self.head.forward(last);
        Ok(LstmTrace { layers, head })
    }

    pub fn forward(&self, xs: &[DVector<f64>]) -> Result<f64> {
        Ok(self.forward_trace(xs)?.output())
    }

    /// Accumulates `dL/dθ` into `grad` for `dL/dy = dy` and returns the
    /// gradient for each input step.
    pub fn backward(
        &self,
        trace: &LstmTrace,
        dy: f64,
        grad: &mut LstmRegressor,
    ) -> Vec<DVector<f64>> {
        let dlast = self.head.backward(&trace.head, dy, &mut grad.head);
        let n_layers = self.layers.len();
        let t_len = trace.layers[0].outputs.len();
        let top = self.layers[n_layers - 1].hidden();
        let mut upstream = vec![DVector::zeros(top); t_len];
        upstream[t_len - 1] = dlast;
        for k in (0..n_layers).rev() {
            upstream = self.layers[k].backward(&trace.layers[k], &upstream, &mut grad.layers[k]);
        }
        upstream
    }
}

impl LstmRegressor {
    /// Forward pass over equal-length sequences; `xs[t]` is `input × batch`.
    pub fn forward_batch(&self, xs: &[DMatrix<f64>]) -> Result<BatchTrace> {
        let batch = xs.first().map_or(0, |x| x.ncols());
        if batch == 0 {
            return Err(Error::shape("LSTM batch is empty"));
        }
        if let Some(x) = xs.iter().find(|x| x.shape() != (self.input_dim(), batch)) {
            return Err(Error::shape(format!(
                "LSTM batch step is {:?}, expected ({}, {batch})",
                x.shape(),
                self.input_dim()
            )));
        }
        let mut layers: Vec<BatchLayerTrace> = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let trace = match k {
                0 => l.forward_batch(xs),
                _ => l.forward_batch(&layers[k - 1].outputs),
            };
            layers.push(trace);
        }
        let last = layers
            .last()
            .expect("at least one layer")
            .outputs
            .last()
            .expect("non-empty");
        let heads = last
            .column_iter()
            .map(|h| self.head.forward(&h.into_owned()))
            .collect();
        Ok(BatchTrace { layers, heads })
    }

    /// Accumulates the gradient for per-sequence output gradients `dy`
    /// and returns the gradient for each input step.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        dy: &[f64],
        grad: &mut LstmRegressor,
    ) -> Vec<DMatrix<f64>> {
        let n_layers = self.layers.len();
        let t_len = trace.layers[0].outputs.len();
        let top = self.layers[n_layers - 1].hidden();
        let mut dlast = DMatrix::zeros(top, dy.len());
        for (b, (h, &d)) in trace.heads.iter().zip(dy).enumerate() {
            dlast.set_column(b, &self.head.backward(h, d, &mut grad.head));
        }
        let mut upstream = vec![DMatrix::zeros(top, dy.len()); t_len];
        upstream[t_len - 1] = dlast;
        for k in (0..n_layers).rev() {
            upstream =
                self.layers[k].backward_batch(&trace.layers[k], &upstream, &mut grad.layers[k]);
        }
        upstream
    }
}

impl Parameters for LstmRegressor {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("lstm{k}.w_x"), &l.w_x));
            out.push((format!("lstm{k}.w_h"), &l.w_h));
            out.push((format!("lstm{k}.b"), &l.b));
        }
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("lstm{k}.w_x"), &mut l.w_x));
            out.push((format!("lstm{k}.w_h"), &mut l.w_h));
            out.push((format!("lstm{k}.b"), &mut l.b));
        }
        out.extend(self.head.tensors_mut());
        out
    }
}

/// Columns of a `(J-S) × K'` discrepancy matrix as the time steps.
pub fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

/// Capacity estimate from one cycle's discrepancy components.
pub fn lstm_forward(model: &LstmRegressor, s_d: &DMatrix<f64>) -> Result<f64> {
    if s_d.nrows() != model.input_dim() {
        return Err(Error::shape(format!(
            "LSTM expects {} discrepancy rows, got {}",
            model.input_dim(),
            s_d.nrows()
        )));
    }
    model.forward(&columns(s_d))
}
