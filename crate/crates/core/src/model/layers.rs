use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Collects `(name, leaf)` pairs in a fixed traversal order.
pub(crate) type Named<'a, T> = Vec<(String, &'a T)>;

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Dense layer `x · W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform(rng, vec![fan_in, fan_out], bound),
            bias: uniform(rng, vec![fan_out], bound),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{}.weight", prefix), &self.weight));
        out.push((format!("{}.bias", prefix), &self.bias));
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl Linear<Var> {
    /// Applies the layer to the rows of `x` (`N × in`).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

/// Learned scale and shift of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

impl Norm<Tensor> {
    pub fn init(width: usize) -> Self {
        Norm {
            gamma: Tensor::ones(vec![width]).expect("positive width"),
            beta: Tensor::zeros(vec![width]).expect("positive width"),
        }
    }
}

impl<T> Norm<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{}.gamma", prefix), &self.gamma));
        out.push((format!("{}.beta", prefix), &self.beta));
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

impl Norm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

/// Chain of dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl Mlp<Tensor> {
    /// `dims` lists every width including input and output, e.g. `[10, 50, 50, 100, 2]`.
    pub fn init(rng: &mut impl Rng, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer widths must be positive and at least two, got {:?}",
                dims
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1]))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(|l| l.fan_out()));
        dims
    }
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("{}.{}", prefix, i), out);
        }
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for l in &mut self.layers {
            l.leaves_mut(out);
        }
    }
}

impl Mlp<Var> {
    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::init(&mut rng, 16, 3);
        assert_eq!(l.weight.shape(), &[16, 3]);
        assert!(l.weight.data().iter().chain(l.bias.data()).all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn mlp_dims_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(&mut rng, &[10, 50, 50, 100, 2]).unwrap();
        assert_eq!(m.dims(), vec![10, 50, 50, 100, 2]);
        assert!(Mlp::init(&mut rng, &[10]).is_err());
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(&mut rng, &[3, 4, 2]).unwrap();
        let m = m.map(&mut |t: &Tensor| t.zeros_like());
        let mut tape = Tape::new();
        let vars = m.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let x = tape.constant(Tensor::ones(vec![5, 3]).unwrap());
        let y = vars.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[5, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
