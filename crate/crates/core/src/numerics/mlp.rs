//! Stacked dense layers with explicit forward/backward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation. The relu subgradient
    /// at exactly zero is taken as 0.
    #[inline]
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `y = act(W x + b)`, weights are `(out, in)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A multi-layer perceptron. Adjacent layer dims chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer activations recorded by [`Mlp::forward_cached`], consumed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (layer count entries).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation `z = Wx + b` of each layer.
    pre_acts: Vec<Vec<f64>>,
}

/// Gradients mirroring [`Mlp`] structure.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.out_dim(), l.in_dim()), vec![0.0; l.out_dim()]))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *x += y;
            }
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            for x in w.as_mut_slice() {
                *x *= s;
            }
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }
}

impl Mlp {
    /// Builds an MLP with the given layer sizes `[in, h1, ..., out]`. Hidden
    /// layers use relu; the final layer uses `final_act`. Weights get
    /// Xavier-uniform init from `rng`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], final_act: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "mlp needs at least [in, out] sizes, got {sizes:?}"
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("mlp sizes must be nonzero: {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for i in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.as_mut_slice() {
                *v = rng.gen_range(-limit..limit);
            }
            let act = if i + 1 == sizes.len() - 1 {
                final_act
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight: w,
                bias: vec![0.0; fan_out],
                activation: act,
            });
        }
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::dim("Mlp::from_layers chaining", w[0].out_dim(), w[1].in_dim()));
            }
        }
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    /// Multiply-accumulate count of one forward evaluation.
    pub fn mac_cost(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.in_dim() * l.out_dim()) as u64)
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_acts: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if cur.len() != layer.in_dim() {
                return Err(Error::dim(format!("mlp layer {i}"), layer.in_dim(), cur.len()));
            }
            let mut z = layer.weight.matvec(&cur);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            cache.inputs.push(cur);
            let out = z.iter().map(|&v| layer.activation.apply(v)).collect();
            cache.pre_acts.push(z);
            cur = out;
        }
        Ok((cur, cache))
    }

    /// Backpropagates `grad_out = dLoss/dOutput` through the cached forward
    /// pass, returning parameter gradients and `dLoss/dInput`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if grad_out.len() != self.output_dim() {
            return Err(Error::dim("mlp backward grad_out", self.output_dim(), grad_out.len()));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_acts[i];
            let x = &cache.inputs[i];
            // dL/dz = dL/dy * act'(z)
            let mut gz = g.clone();
            for (gi, zi) in gz.iter_mut().zip(z) {
                *gi *= layer.activation.deriv(*zi);
            }
            let (gw, gb) = &mut grads.layers[i];
            gw.add_outer(1.0, &gz, x);
            for (b, v) in gb.iter_mut().zip(&gz) {
                *b += v;
            }
            g = layer.weight.matvec_t(&gz);
        }
        Ok((grads, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize, act: Activation) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = identity_layer(2, Activation::Identity);
        assert_eq!(mlp.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mlp = identity_layer(2, Activation::Relu);
        assert_eq!(mlp.forward(&[-1.0, 3.0]).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn two_layer_forward_matches_scalar_loop_oracle() {
        // Fixed small weights; the oracle re-evaluates with nested scalar loops.
        let l1 = Layer {
            weight: Matrix::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
            bias: vec![0.01, -0.02],
            activation: Activation::Relu,
        };
        let l2 = Layer {
            weight: Matrix::from_vec(1, 2, vec![0.7, -0.8]).unwrap(),
            bias: vec![0.03],
            activation: Activation::Identity,
        };
        let x = [1.0, 2.0, -1.0];

        let w1: [[f64; 3]; 2] = [[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        let b1: [f64; 2] = [0.01, -0.02];
        let mut h = [0.0f64; 2];
        for o in 0..2 {
            let mut z = b1[o];
            for i in 0..3 {
                z += w1[o][i] * x[i];
            }
            h[o] = z.max(0.0);
        }
        let expected = 0.7 * h[0] - 0.8 * h[1] + 0.03;

        let mlp = Mlp::from_layers(vec![l1, l2]).unwrap();
        let got = mlp.forward(&x).unwrap()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, expected {expected}");
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Identity, &mut rng).unwrap();
        let (_, cache) = mlp.forward_cached(&[0.3, -0.4, 0.5]).unwrap();
        let (grads, gin) = mlp.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(gin.iter().all(|&g| g == 0.0));
        for (w, b) in &grads.layers {
            assert!(w.as_slice().iter().all(|&g| g == 0.0));
            assert!(b.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_weight_grad_is_input() {
        // loss = output[0] => dLoss/dW row 0 = x.
        let mlp = Mlp::from_layers(vec![Layer {
            weight: Matrix::zeros(2, 3),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = [1.5, -2.5, 0.5];
        let (_, cache) = mlp.forward_cached(&x).unwrap();
        let (grads, _) = mlp.backward(&cache, &[1.0, 0.0]).unwrap();
        assert_eq!(grads.layers[0].0.row(0), &x);
        assert_eq!(grads.layers[0].0.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_two_layer_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&[4, 5, 3], Activation::Identity, &mut rng).unwrap();
        // Nudge inputs away from relu kinks by using an input with margin.
        let x: Vec<f64> = (0..4).map(|i| 0.37 + 0.21 * i as f64).collect();
        let target = [0.2, -0.1, 0.4];

        // loss = 0.5 * || mlp(x) - target ||^2
        let flat = flatten(&mlp);
        let loss = |p: &[f64]| {
            let m = unflatten(&mlp, p);
            let y = m.forward(&x).unwrap();
            0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let (y, cache) = mlp.forward_cached(&x).unwrap();
        let grad_out: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let (grads, _) = mlp.backward(&cache, &grad_out).unwrap();
        let analytic = flatten_grads(&grads);

        let report = finite_diff_check(loss, &flat, &analytic, 1e-5, 1e-5).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    fn flatten(m: &Mlp) -> Vec<f64> {
        let mut out = Vec::new();
        for l in m.layers() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn flatten_grads(g: &MlpGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &g.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    fn unflatten(proto: &Mlp, p: &[f64]) -> Mlp {
        let mut m = proto.clone();
        let mut i = 0;
        for l in m.layers_mut() {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&p[i..i + n]);
            i += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[i..i + nb]);
            i += nb;
        }
        m
    }
}
