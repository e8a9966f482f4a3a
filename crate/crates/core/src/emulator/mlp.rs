//! Dense network: affine → layer norm → GELU for hidden layers, affine output.
//!
//! Inputs and outputs are standardized per channel; a channel is a contiguous
//! block of `size / channels` features (one field on the grid).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation
    Gelu,
    /// Linear test harness.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh()),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_K * (z + GELU_C * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * z * z)
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Identity),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

pub fn gelu(z: f64) -> f64 {
    Activation::Gelu.apply(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Layer-norm gain and offset; empty on the output layer or when layer
    /// norm is disabled.
    pub ln_gain: Array1<f64>,
    pub ln_offset: Array1<f64>,
}

/// Per-channel affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let block = x.len() / self.channels();
        x.iter().enumerate().map(|(i, v)| (v - self.mean[i / block]) / self.std[i / block]).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        let block = z.len() / self.channels();
        z.iter().enumerate().map(|(i, v)| v * self.std[i / block] + self.mean[i / block]).collect()
    }

    fn validate(&self, size: usize, what: &str) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() || size % self.mean.len() != 0 {
            return Err(invalid(format!("{what} standardization does not partition {size} features")));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid(format!("{what} standardization needs finite means and positive stds")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub mse: f64,
    pub c_precip: f64,
    pub c_moisture: f64,
    pub c_mass: f64,
    pub c_energy: f64,
}

/// Outcome of a training run, stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_train: LossComponents,
    pub val_mse: f64,
    /// mse of predicting zero anomaly on the validation pairs.
    pub val_baseline_mse: f64,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub lag: usize,
    pub grid_level: usize,
    /// Layer widths from input to output.
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub input_norm: Standardization,
    pub output_norm: Standardization,
    pub report: Option<TrainReport>,
}

/// Parameter gradients with the same layout as [`MlpModel::layers`], plus the
/// gradient with respect to the (physical) input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub input: Array2<f64>,
}

impl Gradients {
    /// Flattened in [`MlpModel::params`] order.
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    /// Input to each layer (standardized input for layer 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer, after layer norm when enabled.
    pre: Vec<Array2<f64>>,
    /// Normalized affine output and reciprocal std per row (layer norm only).
    xhat: Vec<Array2<f64>>,
    rstd: Vec<Array1<f64>>,
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
        out.extend(l.ln_gain.iter());
        out.extend(l.ln_offset.iter());
    }
    out
}

impl MlpModel {
    /// Random initialization: weights `N(0, 1/fan_in)`, zero biases, unit
    /// layer-norm gains. Parameters are rounded to `f32` so that the model file
    /// reproduces them exactly.
    pub fn new(
        sizes: &[usize],
        activation: Activation,
        layer_norm: bool,
        input_norm: Standardization,
        output_norm: Standardization,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("layer sizes {sizes:?} need an input, an output and no zero widths")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let scale = (1.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32 as f64
                });
                let hidden_ln = layer_norm && i + 1 < n;
                let ln = if hidden_ln { fan_out } else { 0 };
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    ln_gain: Array1::ones(ln),
                    ln_offset: Array1::zeros(ln),
                }
            })
            .collect();
        let model = Self {
            lag: 0,
            grid_level: 0,
            sizes: sizes.to_vec(),
            layers,
            activation,
            layer_norm,
            input_norm,
            output_norm,
            report: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + l.ln_gain.len() + l.ln_offset.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() != self.layers.len() + 1 {
            return Err(invalid("layer count does not match sizes"));
        }
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.sizes[i], self.sizes[i + 1]);
            if l.weight.dim() != (fan_out, fan_in) || l.bias.len() != fan_out {
                return Err(invalid(format!("layer {i} is not {fan_in} → {fan_out}")));
            }
            let ln = if self.layer_norm && i + 1 < n { fan_out } else { 0 };
            if l.ln_gain.len() != ln || l.ln_offset.len() != ln {
                return Err(invalid(format!("layer {i} layer-norm parameters have the wrong length")));
            }
            let finite = l.weight.iter().chain(&l.bias).chain(&l.ln_gain).chain(&l.ln_offset).all(|v| v.is_finite());
            if !finite {
                return Err(invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        self.input_norm.validate(self.n_inputs(), "input")?;
        self.output_norm.validate(self.n_outputs(), "output")?;
        Ok(())
    }

    /// All trainable parameters in a fixed order: per layer the weight
    /// (row-major), bias, layer-norm gain, layer-norm offset.
    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter vector length");
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            let tail = l.bias.iter_mut().chain(l.ln_gain.iter_mut()).chain(l.ln_offset.iter_mut());
            for a in l.weight.iter_mut().chain(tail) {
                *a = it.next().expect("length checked");
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(invalid(format!("input has {} values, model expects {}", x.len(), self.n_inputs())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Prediction in physical units for one flattened input sample.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let xs = Array2::from_shape_vec((1, x.len()), self.input_norm.standardize(x)).expect("shape");
        let z = self.forward_std(xs.view(), None);
        Ok(self.output_norm.destandardize(z.as_slice().expect("contiguous")))
    }

    /// Batched forward pass in standardized units; rows are samples.
    pub(crate) fn forward_std(&self, x: ArrayView2<f64>, mut trace: Option<&mut Trace>) -> Array2<f64> {
        let n = self.layers.len();
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(a);
            }
            if i + 1 == n {
                return z;
            }
            if self.layer_norm {
                let (xhat, rstd) = normalize_rows(&z);
                z = &xhat * &l.ln_gain + &l.ln_offset;
                if let Some(t) = trace.as_deref_mut() {
                    t.xhat.push(xhat);
                    t.rstd.push(rstd);
                }
            }
            a = z.mapv(|v| self.activation.apply(v));
            if let Some(t) = trace.as_deref_mut() {
                t.pre.push(z);
            }
        }
        unreachable!("at least one layer")
    }

    pub(crate) fn forward_traced(&self, x: ArrayView2<f64>) -> (Array2<f64>, Trace) {
        let mut trace = Trace { inputs: Vec::new(), pre: Vec::new(), xhat: Vec::new(), rstd: Vec::new() };
        let y = self.forward_std(x, Some(&mut trace));
        (y, trace)
    }

    /// Reverse pass given the loss gradient with respect to the standardized
    /// output. The returned input gradient is with respect to the standardized
    /// input.
    pub(crate) fn backward_std(&self, trace: &Trace, grad_out: &Array2<f64>) -> Gradients {
        let n = self.layers.len();
        let mut grads: Vec<Layer> = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            if i + 1 < n {
                // through activation, then layer norm
                let pre = &trace.pre[i];
                g.zip_mut_with(pre, |gv, &z| *gv *= self.activation.derivative(z));
                let (mut dgain, mut doffset) = (Array1::zeros(0), Array1::zeros(0));
                if self.layer_norm {
                    let xhat = &trace.xhat[i];
                    dgain = (&g * xhat).sum_axis(Axis(0));
                    doffset = g.sum_axis(Axis(0));
                    let dxhat = &g * &l.ln_gain;
                    g = layer_norm_backward(&dxhat, xhat, &trace.rstd[i]);
                }
                grads.push(Layer { weight: Array2::zeros((0, 0)), bias: Array1::zeros(0), ln_gain: dgain, ln_offset: doffset });
            } else {
                grads.push(Layer {
                    weight: Array2::zeros((0, 0)),
                    bias: Array1::zeros(0),
                    ln_gain: Array1::zeros(0),
                    ln_offset: Array1::zeros(0),
                });
            }
            let last = grads.last_mut().expect("pushed");
            last.weight = g.t().dot(&trace.inputs[i]);
            last.bias = g.sum_axis(Axis(0));
            g = g.dot(&l.weight);
        }
        grads.reverse();
        Gradients { layers: grads, input: g }
    }

    /// Gradients of the scalar loss whose gradient with respect to the
    /// physical output is `grad_output`; rows of `x` and `grad_output` are
    /// samples in physical units.
    pub fn backward(&self, x: &Array2<f64>, grad_output: &Array2<f64>) -> Result<Gradients> {
        if x.ncols() != self.n_inputs() || grad_output.ncols() != self.n_outputs() || x.nrows() != grad_output.nrows() {
            return Err(invalid("backward shapes do not match the model"));
        }
        for row in x.outer_iter() {
            self.check_input(row.as_slice().expect("standard layout"))?;
        }
        let xs = self.standardize_batch(x);
        let (_, trace) = self.forward_traced(xs.view());
        let mut gs = grad_output.clone();
        scale_blocks(&mut gs, &self.output_norm.std, |g, s| g * s);
        let mut grads = self.backward_std(&trace, &gs);
        scale_blocks(&mut grads.input, &self.input_norm.std, |g, s| g / s);
        Ok(grads)
    }

    pub(crate) fn standardize_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        let block = x.ncols() / self.input_norm.channels();
        for mut row in out.outer_iter_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_norm.mean[i / block]) / self.input_norm.std[i / block];
            }
        }
        out
    }
}

fn scale_blocks(a: &mut Array2<f64>, std: &[f64], f: impl Fn(f64, f64) -> f64) {
    let block = a.ncols() / std.len();
    for mut row in a.outer_iter_mut() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = f(*v, std[i / block]);
        }
    }
}

/// Row-wise `(z - mean) / sqrt(var + eps)`; a zero row maps to zero.
fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = z.ncols() as f64;
    let mut out = z.clone();
    let mut rstd = Array1::zeros(z.nrows());
    for (mut row, r) in out.outer_iter_mut().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *r);
    }
    (out, rstd)
}

fn layer_norm_backward(dxhat: &Array2<f64>, xhat: &Array2<f64>, rstd: &Array1<f64>) -> Array2<f64> {
    let n = dxhat.ncols() as f64;
    let mut out = Array2::zeros(dxhat.dim());
    for (((mut o, d), xh), &r) in out.outer_iter_mut().zip(dxhat.outer_iter()).zip(xhat.outer_iter()).zip(rstd) {
        let sum_d = d.sum();
        let sum_dx = d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        for ((ov, dv), xv) in o.iter_mut().zip(d).zip(xh) {
            *ov = r / n * (n * dv - sum_d - xv * sum_dx);
        }
    }
    out
}
