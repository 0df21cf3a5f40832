use rand::Rng;

use super::array::Array;
use super::tape::{Gradients, Tape, Tensor};
use crate::error::{EraError, Result};

/// A collection of named trainable arrays with a stable order.
pub trait ParamSet {
    fn params(&self) -> Vec<(String, &Array)>;
    fn params_mut(&mut self) -> Vec<&mut Array>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected network; the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    weights: Vec<Array>,
    biases: Vec<Array>,
    activation: Activation,
    layer_norm: bool,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`. Weights and biases start uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            weights.push(Array::with_data(&[fan_in, fan_out], draw(fan_in * fan_out)));
            biases.push(Array::with_data(&[fan_out], draw(fan_out)));
        }
        Self {
            weights,
            biases,
            activation,
            layer_norm: false,
        }
    }

    /// Normalizes each hidden pre-activation row (no affine parameters).
    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("nonempty").shape()[1]
    }

    /// Scales the last layer, e.g. to start a policy head near zero.
    pub fn scale_output_layer(&mut self, k: f64) {
        let last = self.weights.len() - 1;
        for x in self.weights[last].data_mut() {
            *x *= k;
        }
        for x in self.biases[last].data_mut() {
            *x *= k;
        }
    }

    /// Registers the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        self.bind_with(tape, true)
    }

    /// Registers the parameters as constants; inputs still receive gradients.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundMlp {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &Tape, trainable: bool) -> BoundMlp {
        let leaf = |a: &Array| {
            if trainable {
                tape.param(a)
            } else {
                tape.constant(a.clone())
            }
        };
        BoundMlp {
            weights: self.weights.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
            activation: self.activation,
            layer_norm: self.layer_norm,
        }
    }

    /// Plain forward pass without recording anything.
    pub fn predict(&self, x: &Array) -> Result<Array> {
        let tape = Tape::new();
        let xin = tape.constant(x.clone());
        Ok(self.bind_frozen(&tape).forward(&xin)?.value())
    }
}

impl ParamSet for Mlp {
    fn params(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{i}.weight"), w));
            out.push((format!("layer{i}.bias"), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
    layer_norm: bool,
}

impl BoundMlp {
    /// `x` is `[batch, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.weights.len();
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if i + 1 < n {
                if self.layer_norm {
                    h = h.layer_norm_rows();
                }
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }

    /// Gradients in [`ParamSet`] order.
    pub fn grads(&self, g: &Gradients) -> Vec<Array> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [g.wrt(w), g.wrt(b)])
            .collect()
    }
}

/// `target ← τ·source + (1 - τ)·target`, parameter by parameter.
pub fn polyak_update<T: ParamSet>(target: &mut T, source: &T, tau: f64) -> Result<()> {
    let src: Vec<&Array> = source.params().into_iter().map(|(_, a)| a).collect();
    let dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(EraError::DimensionMismatch {
            context: "polyak_update",
            expected: dst.len(),
            got: src.len(),
        });
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape() != s.shape() {
            return Err(EraError::ShapeMismatch {
                op: "polyak_update",
                lhs: d.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        for (x, y) in d.data_mut().iter_mut().zip(s.data()) {
            *x = tau * y + (1.0 - tau) * *x;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 8, 2], Activation::Relu, &mut rng);
        assert_eq!((mlp.input_dim(), mlp.output_dim()), (3, 2));
        assert_eq!(mlp.params().len(), 4);
        let y = mlp.predict(&Array::zeros(&[5, 3])).unwrap();
        assert_eq!(y.shape(), &[5, 2]);
    }

    #[test]
    fn layer_norm_keeps_parameter_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plain = Mlp::new(&[3, 8, 2], Activation::Relu, &mut rng);
        let normed = plain.clone().with_layer_norm(true);
        assert_eq!(plain.params().len(), normed.params().len());
        let x = Array::matrix(2, 3, vec![0.1, -2.0, 3.0, 0.5, 0.5, -0.5]).unwrap();
        assert_ne!(plain.predict(&x).unwrap(), normed.predict(&x).unwrap());
        let err = crate::autodiff::finite_difference_check(&[x], |t| {
            Ok(normed.bind_frozen(t[0].tape()).forward(&t[0])?.tanh().sum())
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn polyak_moves_toward_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = Mlp::new(&[2, 4, 1], Activation::Tanh, &mut rng);
        let mut dst = Mlp::new(&[2, 4, 1], Activation::Tanh, &mut rng);
        let before = dst.params()[0].1.data()[0];
        let s = src.params()[0].1.data()[0];
        polyak_update(&mut dst, &src, 0.25).unwrap();
        let after = dst.params()[0].1.data()[0];
        assert!((after - (0.25 * s + 0.75 * before)).abs() < 1e-15);
        polyak_update(&mut dst, &src, 1.0).unwrap();
        assert_eq!(dst.params()[3].1, src.params()[3].1);
    }

    #[test]
    fn frozen_binding_passes_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[2, 4, 1], Activation::Tanh, &mut rng);
        let tape = Tape::new();
        let bound = mlp.bind_frozen(&tape);
        let x = tape.param(&Array::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let y = bound.forward(&x).unwrap().sum();
        let g = tape.backward(&y).unwrap();
        assert!(g.wrt(&x).data().iter().any(|v| *v != 0.0));
        assert!(bound.grads(&g).iter().all(|a| a.data().iter().all(|v| *v == 0.0)));
    }
}
