//! Dense layers, activations and MLP stacks shared by every model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Lower bound of the predictive standard deviation.
pub const STD_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Mish,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(),
            Activation::Mish => mish(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    /// Plain affine output.
    None,
    /// Hidden activation applied to the last layer too (feature extractors).
    Hidden,
    /// Halves become `(mean, logstd)` with `std = 0.1 + 0.9 * softplus(logstd)`.
    SplitMeanLogStd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("MLP widths must be >= 1, got {widths:?}")));
        }
        if output == OutputActivation::SplitMeanLogStd && widths.last().unwrap() % 2 != 0 {
            return Err(Error::Config(format!(
                "split-mean-logstd needs an even output width, got {widths:?}"
            )));
        }
        Ok(Self {
            widths,
            hidden,
            output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Affine map `x W + b` with `W: in x out` and a `1 x out` bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Matrix::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let weight = store.register(format!("{prefix}.weight"), weight)?;
        let bias = store.register(format!("{prefix}.bias"), Matrix::zeros((1, fan_out)))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.matmul(g.param(store, self.weight)) + g.param(store, self.bias)
    }
}

/// Result of an MLP pass.
#[derive(Debug, Clone, Copy)]
pub enum MlpOutput<'g> {
    Plain(Var<'g>),
    Gaussian { mean: Var<'g>, std: Var<'g> },
}

impl<'g> MlpOutput<'g> {
    pub fn plain(self) -> Result<Var<'g>> {
        match self {
            MlpOutput::Plain(v) => Ok(v),
            MlpOutput::Gaussian { .. } => Err(Error::Config(
                "expected a plain MLP output, got a split Gaussian head".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Registers `{prefix}.layer{i}.{weight,bias}` for each affine layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.layer{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        input: Var<'g>,
    ) -> Result<MlpOutput<'g>> {
        let (rows, cols) = input.shape();
        if cols != self.spec.input_width() {
            return Err(Error::Shape {
                op: "mlp input",
                left: (rows, cols),
                right: (rows, self.spec.input_width()),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last || self.spec.output == OutputActivation::Hidden {
                h = self.spec.hidden.apply(h);
            }
        }
        Ok(match self.spec.output {
            OutputActivation::SplitMeanLogStd => {
                let (mean, std) = split_mean_logstd(h);
                MlpOutput::Gaussian { mean, std }
            }
            _ => MlpOutput::Plain(h),
        })
    }
}

/// `mish(x) = x * tanh(softplus(x))`
pub fn mish(x: Var<'_>) -> Var<'_> {
    x * x.softplus().tanh()
}

/// `1 / (1 + exp(-x / tau))`
pub fn tempered_sigmoid<'g>(x: Var<'g>, tau: Var<'g>) -> Var<'g> {
    x.div(tau).sigmoid()
}

/// Split `[mean | logstd]` columns and map `logstd` through the floored softplus.
pub fn split_mean_logstd(out: Var<'_>) -> (Var<'_>, Var<'_>) {
    let half = out.cols() / 2;
    let mean = out.slice_cols(0, half);
    let std = out
        .slice_cols(half, 2 * half)
        .softplus()
        .scale(1.0 - STD_FLOOR)
        .add_scalar(STD_FLOOR);
    (mean, std)
}

/// Learnable temperature stored as `log(tau)` so that `tau > 0`.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    /// Starts at `tau = 1`.
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        let log_tau = store.register(name, Matrix::zeros((1, 1)))?;
        Ok(Self { log_tau })
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau)[[0, 0]].exp()
    }

    pub fn var<'g>(&self, g: &'g Graph, store: &ParamStore) -> Var<'g> {
        g.param(store, self.log_tau).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval_unary(f: impl for<'g> Fn(Var<'g>) -> Var<'g>, x: f64) -> f64 {
        let g = Graph::new();
        f(g.scalar(x)).item()
    }

    #[test]
    fn tempered_sigmoid_values() {
        let ts = |x: f64, tau: f64| {
            let g = Graph::new();
            tempered_sigmoid(g.scalar(x), g.scalar(tau)).item()
        };
        assert_eq!(ts(0.0, 0.3), 0.5);
        assert!((ts(3f64.ln(), 1.0) - 0.75).abs() < 1e-15);
        assert!((ts(1.0, 0.5) - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!((ts(1.0, 0.5) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn tempered_sigmoid_differentiates_in_tau() {
        let g = Graph::new();
        let x = g.scalar(1.0);
        let tau = g.scalar(0.5);
        let y = tempered_sigmoid(x, tau);
        g.backward(y).unwrap();
        // d/dtau s(x/tau) = -s(1-s) x / tau^2
        let s = y.item();
        let expected = -s * (1.0 - s) * 1.0 / 0.25;
        assert!((tau.grad().unwrap()[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn mish_values() {
        assert_eq!(eval_unary(mish, 0.0), 0.0);
        assert!((eval_unary(mish, 20.0) - 20.0).abs() < 1e-6);
        let expected = (1.0 + std::f64::consts::E).ln().tanh();
        assert!((eval_unary(mish, 1.0) - expected).abs() < 1e-15);
        assert!((eval_unary(mish, 1.0) - 0.86509).abs() < 1e-5);
    }

    #[test]
    fn split_head_at_zero_logstd() {
        let g = Graph::new();
        let (_, std) = split_mean_logstd(g.constant(array![[0.3, 0.0]]));
        let expected = 0.1 + 0.9 * std::f64::consts::LN_2;
        assert!((std.item() - expected).abs() < 1e-15);
        assert!((std.item() - 0.7238).abs() < 1e-4);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputActivation::None).unwrap();
        let mlp = Mlp::new(&mut store, "id", spec, &mut rng).unwrap();
        *store.get_mut(mlp.layers[0].weight) = Matrix::eye(2);
        let g = Graph::new();
        let x = array![[1.5, -2.0], [0.0, 3.0]];
        let out = mlp.forward(&g, &store, g.constant(x.clone())).unwrap();
        assert_eq!(out.plain().unwrap().to_matrix(), x);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec =
            MlpSpec::new(vec![3, 5, 4], Activation::LeakyRelu, OutputActivation::None).unwrap();
        let mlp = Mlp::new(&mut store, "z", spec, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let g = Graph::new();
        let out = mlp
            .forward(&g, &store, g.constant(array![[1.0, -4.0, 9.0]]))
            .unwrap()
            .plain()
            .unwrap();
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(vec![3, 4], Activation::Relu, OutputActivation::None).unwrap();
        let mlp = Mlp::new(&mut store, "m", spec, &mut rng).unwrap();
        let g = Graph::new();
        let err = mlp.forward(&g, &store, g.constant(Matrix::zeros((2, 2))));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn glorot_bounds_and_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec =
            MlpSpec::new(vec![10, 20, 2], Activation::Relu, OutputActivation::None).unwrap();
        Mlp::new(&mut store, "decoder", spec, &mut rng).unwrap();
        let w = store.get(store.find("decoder.layer1.weight").unwrap());
        let bound = (6.0f64 / 22.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(store
            .get(store.find("decoder.layer0.bias").unwrap())
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, OutputActivation::None).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, OutputActivation::None).is_err());
        assert!(
            MlpSpec::new(vec![3, 3], Activation::Relu, OutputActivation::SplitMeanLogStd).is_err()
        );
    }

    #[test]
    fn temperature_starts_at_one() {
        let mut store = ParamStore::new();
        let t = Temperature::new(&mut store, "tau").unwrap();
        assert_eq!(t.tau(&store), 1.0);
    }
}
