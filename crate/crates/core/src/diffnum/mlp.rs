//! Multilayer perceptrons stored in a [`ParamStore`] under a name prefix.
//!
//! Layer `i` owns `<prefix>.l<i>.w` (`[fan_in, fan_out]`) and
//! `<prefix>.l<i>.b` (`[fan_out]`). Hidden layers apply the activation; the
//! output layer is affine, optionally followed by `softplus(x) + 1e-4` on its
//! trailing columns (used for standard deviations).

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{softplus, Tape, Var};
use super::tensor::Tensor;
use crate::domain::SeededRng;
use crate::error::{config_err, Error, Result};

/// Lower bound added to every softplus standard-deviation output.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    /// Softplus plus floor on the last `n` output columns.
    SoftplusTail(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        Self { layer_widths, activation, output_transform: OutputTransform::Identity }
    }

    pub fn with_softplus_tail(mut self, n: usize) -> Self {
        self.output_transform = OutputTransform::SoftplusTail(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(config_err("an MLP needs at least one layer"));
        }
        if self.layer_widths.contains(&0) {
            return Err(config_err(format!("MLP widths must be >= 1, got {:?}", self.layer_widths)));
        }
        if let OutputTransform::SoftplusTail(n) = self.output_transform {
            if n > self.output_dim() {
                return Err(config_err("softplus tail wider than the output"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { prefix: prefix.to_string(), spec })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Registers parameters with uniform `±sqrt(6/(fan_in+fan_out))` weights
    /// and zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        for (i, w) in self.spec.layer_widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
            store.insert(&self.weight_name(i), vec![fan_in, fan_out], weights)?;
            store.insert(&self.bias_name(i), vec![fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }

    /// Registers all-zero parameters.
    pub fn init_zeros(&self, store: &mut ParamStore) -> Result<()> {
        for (i, w) in self.spec.layer_widths.windows(2).enumerate() {
            store.insert(&self.weight_name(i), vec![w[0], w[1]], vec![0.0; w[0] * w[1]])?;
            store.insert(&self.bias_name(i), vec![w[1]], vec![0.0; w[1]])?;
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim() {
            return Err(Error::Config(format!(
                "network `{}` expects {} inputs, got {cols}",
                self.prefix,
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn check_params(&self, store: &ParamStore) -> Result<()> {
        for (i, w) in self.spec.layer_widths.windows(2).enumerate() {
            let wid = store.id(&self.weight_name(i))?;
            let bid = store.id(&self.bias_name(i))?;
            if store.entry(wid).shape != [w[0], w[1]] || store.entry(bid).shape != [w[1]] {
                return Err(Error::Config(format!(
                    "parameters of `{}` layer {i} do not match widths {:?}",
                    self.prefix, self.spec.layer_widths
                )));
            }
        }
        Ok(())
    }

    /// Plain evaluation on a batch of rows.
    pub fn forward_batch(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        self.check_params(store)?;
        let n_layers = self.spec.num_layers();
        let mut x = input.clone();
        for i in 0..n_layers {
            let w = store.tensor(store.id(&self.weight_name(i))?);
            let b = store.get(&self.bias_name(i))?;
            let mut z = x.matmul(&w)?;
            let cols = z.cols();
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v += b[k % cols];
            }
            if i + 1 < n_layers {
                z = match self.spec.activation {
                    Activation::Tanh => z.map(f64::tanh),
                    Activation::Relu => z.map(|v| v.max(0.0)),
                };
            }
            x = z;
        }
        if let OutputTransform::SoftplusTail(n) = self.spec.output_transform {
            let cols = x.cols();
            for (k, v) in x.data_mut().iter_mut().enumerate() {
                if k % cols >= cols - n {
                    *v = softplus(*v) + STD_FLOOR;
                }
            }
        }
        Ok(x)
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(store, &Tensor::row(input.to_vec()))?.into_data())
    }

    /// Differentiable evaluation recorded on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).cols())?;
        self.check_params(store)?;
        let n_layers = self.spec.num_layers();
        let mut x = input;
        for i in 0..n_layers {
            let w = tape.param(store, &self.weight_name(i))?;
            let b = tape.param(store, &self.bias_name(i))?;
            let z = tape.matmul(x, w)?;
            let z = tape.add(z, b)?;
            x = if i + 1 < n_layers {
                match self.spec.activation {
                    Activation::Tanh => tape.tanh(z),
                    Activation::Relu => tape.relu(z),
                }
            } else {
                z
            };
        }
        if let OutputTransform::SoftplusTail(n) = self.spec.output_transform {
            let cols = tape.value(x).cols();
            let head = tape.slice_cols(x, 0, cols - n)?;
            let tail = tape.slice_cols(x, cols - n, cols)?;
            let tail = tape.softplus(tail);
            let tail = tape.offset(tail, STD_FLOOR);
            x = tape.concat_cols(&[head, tail])?;
        }
        Ok(x)
    }
}
