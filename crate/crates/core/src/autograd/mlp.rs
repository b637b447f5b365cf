use rand::Rng;

use super::params::ParameterStore;
use super::tape::{ParamVars, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Activation::Softplus),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Softplus => tape.softplus(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Shape of a multilayer perceptron.
///
/// `layer_widths` lists the input width first and the output width last, so a
/// spec with `n` widths has `n - 1` affine layers. The final layer is split
/// into named `heads` whose widths must add up to the output width.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub dropout_rate: f64,
    pub heads: Vec<(String, usize)>,
}

impl MlpSpec {
    /// A spec whose single head spans the whole output.
    pub fn new(layer_widths: Vec<usize>, hidden_activation: Activation, dropout_rate: f64) -> Self {
        let out = layer_widths.last().copied().unwrap_or(0);
        Self {
            layer_widths,
            hidden_activation,
            dropout_rate,
            heads: vec![("out".to_string(), out)],
        }
    }

    pub fn with_heads(mut self, heads: &[(&str, usize)]) -> Self {
        self.heads = heads.iter().map(|(n, w)| (n.to_string(), *w)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("MLP layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        let total: usize = self.heads.iter().map(|(_, w)| w).sum();
        if total != self.output_width() || self.heads.iter().any(|(_, w)| *w == 0) {
            return Err(Error::config(format!(
                "heads {:?} do not partition output width {}",
                self.heads,
                self.output_width()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn weight_path(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.weight")
    }

    pub fn bias_path(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.bias")
    }

    /// Adds freshly initialized parameters under `prefix`. Weights are
    /// uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, prefix: &str, store: &mut ParameterStore, rng: &mut R) {
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
            store.insert(Self::weight_path(prefix, l), glorot(fan_in, fan_out, rng));
            store.insert(Self::bias_path(prefix, l), Tensor::zeros(&[fan_out]));
        }
    }
}

/// Uniform Glorot initialization of a `fan_in × fan_out` weight matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

/// Named outputs of [`mlp_forward`], in head declaration order.
#[derive(Clone, Debug)]
pub struct Heads(Vec<(String, Var)>);

impl Heads {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(format!("no head named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.0.iter()
    }
}

/// Runs the MLP stored under `prefix` on `input`.
///
/// Hidden layers apply affine, activation, then dropout (train mode only).
/// The last layer is affine; head-specific activations are left to callers.
pub fn mlp_forward<R: Rng + ?Sized>(
    spec: &MlpSpec,
    prefix: &str,
    tape: &mut Tape,
    params: &ParamVars,
    input: Var,
    train: bool,
    rng: &mut R,
) -> Result<Heads> {
    let width = tape.value(input).cols();
    if tape.value(input).rank() != 2 || width != spec.input_width() {
        return Err(Error::Shape {
            op: "mlp_forward",
            left: tape.value(input).shape().to_vec(),
            right: vec![spec.input_width()],
        });
    }
    let mut h = input;
    for l in 0..spec.num_layers() {
        let w = params.get(&MlpSpec::weight_path(prefix, l))?;
        let b = params.get(&MlpSpec::bias_path(prefix, l))?;
        h = tape.matmul(h, w)?;
        h = tape.add(h, b)?;
        if l + 1 < spec.num_layers() {
            h = spec.hidden_activation.apply(tape, h)?;
            h = tape.dropout(h, spec.dropout_rate, train, rng)?;
        }
    }
    if spec.heads.len() == 1 {
        return Ok(Heads(vec![(spec.heads[0].0.clone(), h)]));
    }
    let mut heads = Vec::with_capacity(spec.heads.len());
    let mut start = 0;
    for (name, w) in &spec.heads {
        heads.push((name.clone(), tape.slice(h, start, *w)?));
        start += w;
    }
    Ok(Heads(heads))
}
