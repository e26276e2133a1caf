//! Fully connected feedforward network with a scalar output.
//!
//! Parameters are kept in one flat vector, layer by layer; within a layer the
//! weight matrix (row-major, `out × in`) comes first, then the biases. The
//! trainers work directly on that vector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, NUM_INPUTS};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MAX_HIDDEN_LAYERS: usize = 15;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LogSigmoid,
    TanSigmoid,
    PositiveLinear,
    Identity,
}

impl Activation {
    pub const HIDDEN: [Activation; 3] = [
        Activation::LogSigmoid,
        Activation::TanSigmoid,
        Activation::PositiveLinear,
    ];

    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::LogSigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::TanSigmoid => z.tanh(),
            Activation::PositiveLinear => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LogSigmoid => a * (1.0 - a),
            Activation::TanSigmoid => 1.0 - a * a,
            Activation::PositiveLinear => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LogSigmoid => "log_sigmoid",
            Activation::TanSigmoid => "tan_sigmoid",
            Activation::PositiveLinear => "positive_linear",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_sigmoid" | "logsig" => Ok(Activation::LogSigmoid),
            "tan_sigmoid" | "tansig" => Ok(Activation::TanSigmoid),
            "positive_linear" | "poslin" | "relu" => Ok(Activation::PositiveLinear),
            "identity" | "purelin" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden_act: Activation,
    params: Vec<f64>,
    /// Start of each layer's block in `params`.
    offsets: Vec<usize>,
}

pub fn num_params_for(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

fn layer_offsets(widths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(widths.len());
    let mut at = 0;
    offsets.push(0);
    for w in widths.windows(2) {
        at += w[1] * (w[0] + 1);
        offsets.push(at);
    }
    offsets
}

fn check_layout(hidden: &[usize]) -> Result<()> {
    if hidden.is_empty() || hidden.len() > MAX_HIDDEN_LAYERS {
        return Err(Error::Config(format!(
            "need 1..={MAX_HIDDEN_LAYERS} hidden layers, got {}",
            hidden.len()
        )));
    }
    if hidden.contains(&0) {
        return Err(Error::Config("hidden layer widths must be positive".into()));
    }
    Ok(())
}

impl Mlp {
    /// Five inputs, one output.
    pub fn build(hidden: &[usize], hidden_act: Activation, seed: u64) -> Result<Self> {
        Self::build_with_inputs(NUM_INPUTS, hidden, hidden_act, seed)
    }

    /// Weights are drawn from `U[-0.5, 0.5] / sqrt(fan_in)`, biases from
    /// `U[-0.5, 0.5]`, in parameter order.
    pub fn build_with_inputs(
        n_inputs: usize,
        hidden: &[usize],
        hidden_act: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(n_inputs, hidden, hidden_act)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..mlp.num_layers() {
            let (fan_in, fan_out) = (mlp.widths[l], mlp.widths[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let (w, b) = mlp.layer_params_mut(l);
            debug_assert_eq!(w.len(), fan_in * fan_out);
            for v in w.iter_mut() {
                *v = rng.gen_range(-0.5..=0.5) * scale;
            }
            for v in b.iter_mut() {
                *v = rng.gen_range(-0.5..=0.5);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(n_inputs: usize, hidden: &[usize], hidden_act: Activation) -> Result<Self> {
        check_layout(hidden)?;
        if n_inputs == 0 {
            return Err(Error::Config("network needs at least one input".into()));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(n_inputs);
        widths.extend_from_slice(hidden);
        widths.push(1);
        let n = num_params_for(&widths);
        Ok(Self {
            offsets: layer_offsets(&widths),
            widths,
            hidden_act,
            params: vec![0.0; n],
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_act
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    /// Number of weight layers (hidden layers + output layer).
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.hidden_act
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    /// Copy of `self` carrying the parameters `v`.
    pub fn unflatten(&self, v: &[f64]) -> Result<Mlp> {
        let mut m = self.clone();
        m.set_params(v)?;
        Ok(m)
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "weight vector of length {} for {} parameters",
                v.len(),
                self.params.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weight vector".into()));
        }
        self.params.copy_from_slice(v);
        Ok(())
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let n_w = self.widths[l] * self.widths[l + 1];
        let block = &self.params[self.offsets[l]..self.offsets[l + 1]];
        block.split_at(n_w)
    }

    fn layer_params_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let n_w = self.widths[l] * self.widths[l + 1];
        let block = &mut self.params[self.offsets[l]..self.offsets[l + 1]];
        block.split_at_mut(n_w)
    }

    /// Pre-activations and outputs of every layer, input included as layer 0
    /// output.
    fn forward_trace(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut out = Vec::with_capacity(self.num_layers() + 1);
        out.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer_params(l);
            let input = &out[l];
            let fan_in = self.widths[l];
            let act = self.activation(l);
            let z: Vec<f64> = b
                .iter()
                .zip(w.chunks_exact(fan_in))
                .map(|(bi, row)| bi + crate::numkernel::dot(row, input))
                .collect();
            let a: Vec<f64> = z.iter().map(|&zi| act.value(zi)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: l + 1 });
            }
            pre.push(z);
            out.push(a);
        }
        Ok((pre, out))
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_inputs() {
            return Err(Error::Shape(format!(
                "input of length {} for a {}-input network",
                x.len(),
                self.n_inputs()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: 0 });
        }
        let (_, out) = self.forward_trace(x)?;
        Ok(out[self.num_layers()][0])
    }

    /// Writes `∂ŷ/∂w` for one sample into `grad` and returns `ŷ`.
    fn output_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (pre, out) = self.forward_trace(x)?;
        let n_layers = self.num_layers();
        // delta = ∂ŷ/∂z for the current layer
        let mut delta = vec![self.activation(n_layers - 1).derivative(pre[n_layers - 1][0], out[n_layers][0])];
        for l in (0..n_layers).rev() {
            let fan_in = self.widths[l];
            let input = &out[l];
            let n_w = fan_in * self.widths[l + 1];
            let block = &mut grad[self.offsets[l]..self.offsets[l + 1]];
            let (gw, gb) = block.split_at_mut(n_w);
            for (i, &d) in delta.iter().enumerate() {
                gb[i] = d;
                for (g, &a) in gw[i * fan_in..(i + 1) * fan_in].iter_mut().zip(input) {
                    *g = d * a;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer_params(l);
            let act = self.activation(l - 1);
            let mut prev = vec![0.0; fan_in];
            for (i, &d) in delta.iter().enumerate() {
                crate::numkernel::axpy(d, &w[i * fan_in..(i + 1) * fan_in], &mut prev);
            }
            for (k, p) in prev.iter_mut().enumerate() {
                *p *= act.derivative(pre[l - 1][k], out[l][k]);
            }
            delta = prev;
        }
        Ok(out[n_layers][0])
    }

    /// Jacobian of the errors `e_i = t_i − ŷ_i` with respect to the
    /// parameters (samples × parameters), plus the errors themselves.
    pub fn error_jacobian(&self, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let n = self.num_params();
        let mut values = vec![0.0; inputs.len() * n];
        let mut errors = Vec::with_capacity(inputs.len());
        for ((x, t), row) in inputs.iter().zip(targets).zip(values.chunks_exact_mut(n)) {
            if x.len() != self.n_inputs() {
                return Err(Error::Shape("input width".into()));
            }
            let y = self.output_gradient(x, row)?;
            row.iter_mut().for_each(|g| *g = -*g);
            errors.push(t - y);
        }
        Ok((Matrix::new(inputs.len(), n, values)?, errors))
    }

    pub fn save(&self, normalizer: &Normalizer, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let doc = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            layer_widths: self.widths.clone(),
            hidden_activation: self.hidden_act,
            weights: self.params.clone(),
            normalizer: normalizer.clone(),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Mlp, Normalizer)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<(Mlp, Normalizer)> {
        let doc: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "schema_version {} (expected {MODEL_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let w = &doc.layer_widths;
        if w.len() < 3 || *w.last().unwrap() != 1 || w[0] != NUM_INPUTS {
            return Err(Error::Model(format!(
                "layer_widths {w:?} must be [{NUM_INPUTS}, hidden.., 1]"
            )));
        }
        let mut mlp = Mlp::zeros(w[0], &w[1..w.len() - 1], doc.hidden_activation)
            .map_err(|e| Error::Model(e.to_string()))?;
        mlp.set_params(&doc.weights)
            .map_err(|e| Error::Model(e.to_string()))?;
        doc.normalizer.validate()?;
        Ok((mlp, doc.normalizer))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    layer_widths: Vec<usize>,
    hidden_activation: Activation,
    weights: Vec<f64>,
    normalizer: Normalizer,
}
