use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given both the input and the cached output.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

/// Fully connected layer widths from input to output, with one nonlinearity
/// applied after every hidden layer (never after the output layer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    activation: Activation,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "architecture needs at least an input and an output width, all positive; got {widths:?}"
            )));
        }
        Ok(Self { widths, activation })
    }

    /// `input -> hidden... -> outputs`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        Self::new(widths, activation)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Zero-filled parameters with the right names and shapes.
    pub fn zero_params(&self) -> ParameterSet {
        let mut set = ParameterSet::new();
        for (layer, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            set.insert(Self::weight_name(layer), Tensor::zeros(&[fan_out, fan_in]))
                .expect("layer names are unique");
            set.insert(Self::bias_name(layer), Tensor::zeros(&[fan_out]))
                .expect("layer names are unique");
        }
        set
    }

    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = self.zero_params();
        for layer in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let id = set.id(&Self::weight_name(layer)).unwrap();
            for w in set.value_mut(id).data_mut() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        set
    }

    /// Checks that `params` holds exactly this architecture's tensors.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.zero_params();
        if params.len() != expected.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors for widths {:?}, found {}",
                expected.len(),
                self.widths,
                params.len()
            )));
        }
        for id in expected.ids() {
            let name = expected.name(id);
            let found = params
                .id(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name:?}")))?;
            if params.value(found).shape() != expected.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("parameter {name}"),
                    expected: expected.value(id).shape().to_vec(),
                    actual: params.value(found).shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Records the network on `tape` for a `rows x input_dim` input node and
/// returns the `rows x output_dim` logits node.
pub fn mlp_on_tape(
    tape: &mut Tape,
    params: &ParameterSet,
    arch: &Architecture,
    input: Var,
) -> Result<Var> {
    let got = tape.value(input).cols();
    if got != arch.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "network input".into(),
            expected: vec![arch.input_dim()],
            actual: vec![got],
        });
    }
    let mut h = input;
    for layer in 0..arch.num_layers() {
        let lookup = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name:?}")))
        };
        let w = tape.param(params, lookup(Architecture::weight_name(layer))?);
        let b = tape.param(params, lookup(Architecture::bias_name(layer))?);
        h = tape.affine(h, w, b)?;
        if layer + 1 < arch.num_layers() {
            h = tape.activation(h, arch.activation());
        }
    }
    Ok(h)
}

/// Network output for a single feature vector.
pub fn forward_mlp(params: &ParameterSet, x: &[f64], arch: &Architecture) -> Result<Vec<f64>> {
    if x.len() != arch.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "network input".into(),
            expected: vec![arch.input_dim()],
            actual: vec![x.len()],
        });
    }
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::row(x.to_vec())?);
    let out = mlp_on_tape(&mut tape, params, arch, input)?;
    Ok(tape.value(out).data().to_vec())
}
