use indexmap::IndexMap;

use crate::effects::{Context, ParamInit};
use crate::error::{PplError, Result};
use crate::random::RandomStream;
use crate::tensor::Tensor;

/// Initialization gain applied to the Glorot-uniform bound.
pub const INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// `sigmoid(h W + b)`, for Bernoulli probabilities.
    Probs,
    /// `(h W_loc + b_loc, softplus(h W_scale + b_scale))`, for Normal parameters.
    LocScale,
}

#[derive(Debug, Clone)]
pub enum MlpOutput {
    Probs(Tensor),
    LocScale { loc: Tensor, scale: Tensor },
}

/// Multi-layer perceptron with tanh hidden layers whose weights live in the
/// param store under `{prefix}.{W1,b1,...}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    /// `[input, hidden..., output]`
    sizes: Vec<usize>,
    head: Head,
    gain: f64,
}

fn glorot_uniform(rng: &mut RandomStream, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| a * (2.0 * rng.uniform() - 1.0)).collect();
    Tensor::new(data, &[fan_in, fan_out]).expect("sized")
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>, head: Head) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(PplError::InvalidArgument(format!(
                "MLP needs at least input and output sizes, all positive; got {sizes:?}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            sizes,
            head,
            gain: INIT_GAIN,
        })
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("len >= 2")
    }

    /// `(local name, fan_in, fan_out)` for every weight matrix, in order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let n = self.sizes.len();
        let mut layers: Vec<(String, usize, usize)> = (0..n - 2)
            .map(|i| (format!("{}", i + 1), self.sizes[i], self.sizes[i + 1]))
            .collect();
        let (fan_in, fan_out) = (self.sizes[n - 2], self.sizes[n - 1]);
        match self.head {
            Head::Probs => layers.push(("out".into(), fan_in, fan_out)),
            Head::LocScale => {
                layers.push(("loc".into(), fan_in, fan_out));
                layers.push(("scale".into(), fan_in, fan_out));
            }
        }
        layers
    }

    /// Lazy initializers for `W*`/`b*` in registration order.
    pub fn param_inits(&self) -> Vec<(String, ParamInit)> {
        let gain = self.gain;
        let mut out = Vec::new();
        for (suffix, fan_in, fan_out) in self.layers() {
            out.push((
                format!("W{suffix}"),
                ParamInit::lazy(move |rng| glorot_uniform(rng, fan_in, fan_out, gain)),
            ));
            out.push((format!("b{suffix}"), ParamInit::Value(Tensor::zeros(&[fan_out]))));
        }
        out
    }

    /// Registers the weights and runs the network on `x` of shape `[B, input]`.
    pub fn forward(&self, ctx: &mut Context, x: &Tensor) -> Result<MlpOutput> {
        let params = ctx.register_module(&self.prefix, self.param_inits())?;
        self.apply(&params, x)
    }

    /// Pure forward pass given already-resolved weights keyed by local name.
    pub fn apply(&self, params: &IndexMap<String, Tensor>, x: &Tensor) -> Result<MlpOutput> {
        if x.rank() != 2 || x.shape()[1] != self.input_dim() {
            return Err(PplError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "mlp input",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.input_dim()],
            }));
        }
        let get = |name: &str| {
            params
                .get(name)
                .ok_or_else(|| PplError::InvalidArgument(format!("missing MLP weight `{name}`")))
        };
        let linear = |h: &Tensor, suffix: &str| -> Result<Tensor> {
            Ok(h.matmul(get(&format!("W{suffix}"))?)?.add(get(&format!("b{suffix}"))?)?)
        };
        let mut h = x.clone();
        for i in 1..self.sizes.len() - 1 {
            h = linear(&h, &i.to_string())?.tanh();
        }
        Ok(match self.head {
            Head::Probs => MlpOutput::Probs(linear(&h, "out")?.sigmoid()),
            Head::LocScale => MlpOutput::LocScale {
                loc: linear(&h, "loc")?,
                scale: linear(&h, "scale")?.softplus(),
            },
        })
    }
}
