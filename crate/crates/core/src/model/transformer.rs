use rand::Rng;

use super::layers::{Linear, Named, Norm};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Post-norm encoder block: `z' = LN(MSA(z) + z)`, `out = LN(MLP(z') + z')`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub norm1: Norm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    pub norm2: Norm<T>,
}

/// Default head count, or one head when the width does not divide evenly.
pub fn default_heads(width: usize) -> usize {
    if width.is_multiple_of(4) {
        4
    } else {
        1
    }
}

impl Block<Tensor> {
    pub fn init(rng: &mut impl Rng, width: usize) -> Self {
        Block {
            query: Linear::init(rng, width, width),
            key: Linear::init(rng, width, width),
            value: Linear::init(rng, width, width),
            output: Linear::init(rng, width, width),
            norm1: Norm::init(width),
            mlp_in: Linear::init(rng, width, 4 * width),
            mlp_out: Linear::init(rng, 4 * width, width),
            norm2: Norm::init(width),
        }
    }
}

impl<T> Block<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            norm1: self.norm1.map(f),
            mlp_in: self.mlp_in.map(f),
            mlp_out: self.mlp_out.map(f),
            norm2: self.norm2.map(f),
        }
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.query.named(&format!("{}.query", prefix), out);
        self.key.named(&format!("{}.key", prefix), out);
        self.value.named(&format!("{}.value", prefix), out);
        self.output.named(&format!("{}.output", prefix), out);
        self.norm1.named(&format!("{}.norm1", prefix), out);
        self.mlp_in.named(&format!("{}.mlp_in", prefix), out);
        self.mlp_out.named(&format!("{}.mlp_out", prefix), out);
        self.norm2.named(&format!("{}.norm2", prefix), out);
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.query.leaves_mut(out);
        self.key.leaves_mut(out);
        self.value.leaves_mut(out);
        self.output.leaves_mut(out);
        self.norm1.leaves_mut(out);
        self.mlp_in.leaves_mut(out);
        self.mlp_out.leaves_mut(out);
        self.norm2.leaves_mut(out);
    }
}

impl Block<Var> {
    /// `z` holds `batch` sequences of `tokens` rows each, stacked as `(batch·tokens) × E`.
    pub fn forward(&self, tape: &mut Tape, z: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if shape.len() != 2 || shape[0] != batch * tokens {
            return Err(Error::shape(
                "transformer_block",
                format!("input {:?} for {} sequences of {} tokens", shape, batch, tokens),
            ));
        }
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::shape(
                "transformer_block",
                format!("width {} is not divisible by {} heads", width, heads),
            ));
        }
        let attn = self.attention(tape, z, batch, tokens, heads)?;
        let res = tape.add(attn, z)?;
        let z1 = self.norm1.forward(tape, res)?;
        let h = self.mlp_in.forward(tape, z1)?;
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, h)?;
        let res = tape.add(h, z1)?;
        self.norm2.forward(tape, res)
    }

    fn attention(&self, tape: &mut Tape, z: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let width = tape.shape(z)[1];
        let head_dim = width / heads;
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[batch, tokens, heads, head_dim])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[batch * heads, tokens, head_dim])
        };
        let q = self.query.forward(tape, z)?;
        let q = split(tape, q)?;
        let k = self.key.forward(tape, z)?;
        let k = split(tape, k)?;
        let v = self.value.forward(tape, z)?;
        let v = split(tape, v)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let weights = tape.softmax(scores);
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.reshape(ctx, &[batch, heads, tokens, head_dim])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * tokens, width])?;
        self.output.forward(tape, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(block: &Block<Tensor>, z: &Tensor, batch: usize, tokens: usize) -> Tensor {
        let mut tape = Tape::new();
        let b = block.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let x = tape.constant(z.clone());
        let y = b.forward(&mut tape, x, batch, tokens, default_heads(z.cols())).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::init(&mut rng, 8);
        let z = random(&mut rng, vec![2 * 16, 8]);
        let y = run(&block, &z, 2, 16);
        assert_eq!(y.shape(), &[32, 8]);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_sublayers_reduce_to_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = Block::init(&mut rng, 8);
        for l in [
            &mut block.query,
            &mut block.key,
            &mut block.value,
            &mut block.output,
            &mut block.mlp_in,
            &mut block.mlp_out,
        ] {
            l.weight = l.weight.zeros_like();
            l.bias = l.bias.zeros_like();
        }
        let z = random(&mut rng, vec![16, 8]);
        let y = run(&block, &z, 1, 16);
        let ln = ops::layer_norm(&z, &block.norm1.gamma, &block.norm1.beta).unwrap();
        assert!(y.max_abs_diff(&ln) < 1e-4, "{}", y.max_abs_diff(&ln));
    }

    #[test]
    fn rows_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::init(&mut rng, 12);
        let z = random(&mut rng, vec![6, 12]);
        let perm = [4, 0, 5, 2, 1, 3];
        let y = run(&block, &z, 1, 6);
        let yp = run(&block, &z.select_rows(&perm).unwrap(), 1, 6);
        assert!(yp.max_abs_diff(&y.select_rows(&perm).unwrap()) < 1e-12);
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::init(&mut rng, 6);
        let mut tape = Tape::new();
        let b = block.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let x = tape.constant(random(&mut rng, vec![4, 6]));
        assert!(b.forward(&mut tape, x, 1, 4, 4).is_err());
        assert!(b.forward(&mut tape, x, 1, 4, 1).is_ok());
        assert_eq!(default_heads(6), 1);
    }
}
