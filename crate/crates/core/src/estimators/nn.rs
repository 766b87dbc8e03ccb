//! Building blocks shared by the regressors: dense layers, activations,
//! named parameter access, Adam and a finite-difference gradient checker.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fills `m` from U(-bound, bound).
pub fn fill_uniform(m: &mut DMatrix<f64>, bound: f64, rng: &mut ChaCha8Rng) {
    for x in m.iter_mut() {
        *x = rng.random_range(-bound..=bound);
    }
}

/// Access to every trainable tensor by a stable name, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)>;

    fn zero_grad(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += other * k`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, k: f64)
    where
        Self: Sized,
    {
        let src: Vec<DMatrix<f64>> = other
            .tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        for ((_, t), s) in self.tensors_mut().into_iter().zip(src) {
            *t += s * k;
        }
    }
}

/// Row-major tensor as stored in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            shape: [m.nrows(), m.ncols()],
            data,
        }
    }
}

pub fn export_tensors<P: Parameters>(p: &P) -> BTreeMap<String, NamedTensor> {
    p.tensors()
        .into_iter()
        .map(|(n, t)| (n, NamedTensor::from_matrix(t)))
        .collect()
}

/// Copies stored tensors into an already-shaped model, checking that every
/// name is present with the expected shape and nothing is left over.
pub fn import_tensors<P: Parameters>(
    p: &mut P,
    stored: &BTreeMap<String, NamedTensor>,
) -> Result<()> {
    let mut used = 0;
    for (name, t) in p.tensors_mut() {
        let src = stored
            .get(&name)
            .ok_or_else(|| Error::validation(format!("model file lacks tensor `{name}`")))?;
        if src.shape != [t.nrows(), t.ncols()] || src.data.len() != t.len() {
            return Err(Error::shape(format!(
                "tensor `{name}` has shape {:?}, expected [{}, {}]",
                src.shape,
                t.nrows(),
                t.ncols()
            )));
        }
        *t = DMatrix::from_row_slice(t.nrows(), t.ncols(), &src.data);
        used += 1;
    }
    if used != stored.len() {
        return Err(Error::validation(format!(
            "model file has {} tensors, architecture expects {used}",
            stored.len()
        )));
    }
    Ok(())
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: DMatrix::zeros(output, input),
            b: DMatrix::zeros(output, 1),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.w.ncols() as f64).sqrt();
        fill_uniform(&mut self.w, bound, rng);
        fill_uniform(&mut self.b, bound, rng);
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + self.b.column(0)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &DVector<f64>, dy: &DVector<f64>, grad: &mut Dense) -> DVector<f64> {
        grad.w += dy * x.transpose();
        let mut gb = grad.b.column_mut(0);
        gb += dy;
        self.w.transpose() * dy
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a DMatrix<f64>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut DMatrix<f64>)>,
    ) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

/// A stack of ReLU dense layers followed by a scalar output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Vec<Dense>,
    pub out: Dense,
    pub activation: Activation,
}

/// Cached activations of one [`Head`] evaluation.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    out_pre: f64,
    pub y: f64,
}

impl Head {
    pub fn zeros(input: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut dim = input;
        for &h in hidden {
            layers.push(Dense::zeros(dim, h));
            dim = h;
        }
        Self {
            hidden: layers,
            out: Dense::zeros(dim, 1),
            activation,
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for l in &mut self.hidden {
            l.init(rng);
        }
        self.out.init(rng);
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).input_dim()
    }

    pub fn forward(&self, x: &DVector<f64>) -> HeadTrace {
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut a = x.clone();
        for l in &self.hidden {
            let z = l.forward(&a);
            inputs.push(a);
            a = z.map(|v| v.max(0.0));
            pre.push(z);
        }
        let out_pre = self.out.forward(&a)[0];
        inputs.push(a);
        HeadTrace {
            inputs,
            pre,
            out_pre,
            y: self.activation.apply(out_pre),
        }
    }

    /// Returns `dL/dx` given `dL/dy`.
    pub fn backward(&self, trace: &HeadTrace, dy: f64, grad: &mut Head) -> DVector<f64> {
        let dz = dy * self.activation.derivative(trace.out_pre, trace.y);
        let n = self.hidden.len();
        let mut da = self.out.backward(
            &trace.inputs[n],
            &DVector::from_element(1, dz),
            &mut grad.out,
        );
        for k in (0..n).rev() {
            let dz = da.zip_map(&trace.pre[k], |d, z| if z > 0.0 { d } else { 0.0 });
            da = self.hidden[k].backward(&trace.inputs[k], &dz, &mut grad.hidden[k]);
        }
        da
    }
}

impl Parameters for Head {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.hidden.iter().enumerate() {
            l.push_tensors(&format!("fc{k}"), &mut out);
        }
        self.out.push_tensors("out", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.hidden.iter_mut().enumerate() {
            l.push_tensors_mut(&format!("fc{k}"), &mut out);
        }
        self.out.push_tensors_mut("out", &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one model.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<P: Parameters>(model: &P, cfg: AdamConfig) -> Self {
        let zeros: Vec<DMatrix<f64>> = model
            .tensors()
            .into_iter()
            .map(|(_, t)| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step<P: Parameters>(&mut self, model: &mut P, grad: &P) {
        self.t += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.t);
        let bias2 = 1.0 - c.beta2.powi(self.t);
        let grads = grad.tensors();
        for (k, (_, p)) in model.tensors_mut().into_iter().enumerate() {
            let g = grads[k].1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                p[i] -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Per-tensor comparison of an analytic gradient against central finite
/// differences of `loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub tensor: String,
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`, zero when both vanish.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

pub fn finite_difference_check<P, F>(
    model: &P,
    analytic: &P,
    step: f64,
    loss: F,
) -> Vec<GradientCheck>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let names: Vec<(String, usize)> = model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let grads: Vec<DMatrix<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (k, (name, len)) in names.into_iter().enumerate() {
        let mut fd = DMatrix::zeros(grads[k].nrows(), grads[k].ncols());
        for i in 0..len {
            let orig = probe.tensors()[k].1[i];
            probe.tensors_mut()[k].1[i] = orig + step;
            let up = loss(&probe);
            probe.tensors_mut()[k].1[i] = orig - step;
            let dn = loss(&probe);
            probe.tensors_mut()[k].1[i] = orig;
            fd[i] = (up - dn) / (2.0 * step);
        }
        let scale = grads[k].norm().max(fd.norm());
        let relative_error = if scale == 0.0 {
            0.0
        } else {
            (&grads[k] - &fd).norm() / scale
        };
        out.push(GradientCheck {
            tensor: name,
            relative_error,
            analytic_norm: grads[k].norm(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Identity, Activation::Sigmoid, Activation::Tanh] {
            let mut head = Head::zeros(3, &[5, 4], act);
            head.init(&mut rng);
            let x = DVector::from_vec(vec![0.3, -1.2, 0.7]);
            let loss = |h: &Head| {
                let y = h.forward(&x).y;
                (y - 0.4) * (y - 0.4)
            };
            let trace = head.forward(&x);
            let mut grad = head.clone();
            grad.zero_grad();
            head.backward(&trace, 2.0 * (trace.y - 0.4), &mut grad);
            for c in finite_difference_check(&head, &grad, 1e-5, loss) {
                assert!(
                    c.relative_error < 1e-6,
                    "{act:?} {}: {}",
                    c.tensor,
                    c.relative_error
                );
            }
        }
    }

    #[test]
    fn tensor_export_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = Head::zeros(2, &[3], Activation::Identity);
        head.init(&mut rng);
        let stored = export_tensors(&head);
        assert_eq!(stored["fc0.w"].shape, [3, 2]);
        assert_eq!(stored["fc0.w"].data[1], head.hidden[0].w[(0, 1)]);
        let mut back = Head::zeros(2, &[3], Activation::Identity);
        import_tensors(&mut back, &stored).unwrap();
        assert_eq!(back, head);
        let mut wrong = Head::zeros(2, &[4], Activation::Identity);
        assert!(import_tensors(&mut wrong, &stored).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let d = Dense::zeros(1, 1);
        let mut g = Dense::zeros(1, 1);
        g.w[0] = 3.0;
        g.b[0] = -0.5;
        let wrap = |d: Dense| Head {
            hidden: vec![],
            out: d,
            activation: Activation::Identity,
        };
        let (mut model, grad) = (wrap(d), wrap(g));
        let mut adam = Adam::new(&model, AdamConfig::default());
        adam.step(&mut model, &grad);
        assert!((model.out.w[0] + 1e-3).abs() < 1e-9);
        assert!((model.out.b[0] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
