//! Transformer autoencoder with a dimension-reduction head.

mod layers;
mod patch;
mod transformer;

pub use layers::{Linear, Mlp, Norm};
pub use patch::{
    patchify, patchify_batch, positional_encoding, unpatchify, unpatchify_batch, PatchGrid, GRID_SIDE,
};
pub use transformer::{default_heads, Block};

use rand::Rng;
use rayon::prelude::*;

use crate::diffcore::{ops, Tape, Tensor, Var};
use crate::error::{Error, Result};
use layers::Named;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: PatchGrid,
    /// Width `m` of the feature space.
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// `None` picks [`default_heads`].
    pub heads: Option<usize>,
    /// Hidden widths of the encoding stack; the decoding stack mirrors them.
    pub hidden: Vec<usize>,
    pub reduction_hidden: Vec<usize>,
    /// When false, positional encodings and transformer blocks are skipped.
    pub use_transformer: bool,
}

impl ModelConfig {
    pub fn new(grid: PatchGrid) -> Self {
        ModelConfig {
            grid,
            embed_dim: 10,
            encoder_blocks: 4,
            decoder_blocks: 1,
            heads: None,
            hidden: vec![512, 512, 3072],
            reduction_hidden: vec![50, 50, 100],
            use_transformer: true,
        }
    }

    /// Token width, equal to the flattened patch size.
    pub fn token_width(&self) -> usize {
        self.grid.patch_len()
    }

    pub fn head_count(&self) -> usize {
        self.heads.unwrap_or_else(|| default_heads(self.token_width()))
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.grid.dim()];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = self.encoder_dims();
        dims.reverse();
        dims
    }

    pub fn reduction_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.embed_dim];
        dims.extend(&self.reduction_hidden);
        dims.push(2);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        if self.use_transformer {
            let heads = self.head_count();
            if heads == 0 || !self.token_width().is_multiple_of(heads) {
                return Err(Error::invalid(format!(
                    "token width {} is not divisible by {} heads",
                    self.token_width(),
                    heads
                )));
            }
            if !self.token_width().is_multiple_of(2) {
                return Err(Error::invalid(format!(
                    "token width {} must be even for positional encodings",
                    self.token_width()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub encoding: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub decoding: Mlp<T>,
    pub blocks: Vec<Block<T>>,
    pub to_patch: Linear<T>,
}

/// All learnable weights: encoder `w`, decoder `u`, dim-reduction `v`.
///
/// The leaf type is `Tensor` for stored weights and `Var` while recording a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub reduction: Mlp<T>,
}

impl ModelParams<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let e = config.token_width();
        let patch_embed = Linear::init(rng, e, e);
        let blocks = (0..config.encoder_blocks).map(|_| Block::init(rng, e)).collect();
        let encoding = Mlp::init(rng, &config.encoder_dims())?;
        let decoding = Mlp::init(rng, &config.decoder_dims())?;
        let dec_blocks = (0..config.decoder_blocks).map(|_| Block::init(rng, e)).collect();
        let to_patch = Linear::init(rng, e, e);
        let reduction = Mlp::init(rng, &config.reduction_dims())?;
        Ok(ModelParams {
            encoder: Encoder {
                patch_embed,
                blocks,
                encoding,
            },
            decoder: Decoder {
                decoding,
                blocks: dec_blocks,
                to_patch,
            },
            reduction,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: Encoder {
                patch_embed: self.encoder.patch_embed.map(f),
                blocks: self.encoder.blocks.iter().map(|b| b.map(f)).collect(),
                encoding: self.encoder.encoding.map(f),
            },
            decoder: Decoder {
                decoding: self.decoder.decoding.map(f),
                blocks: self.decoder.blocks.iter().map(|b| b.map(f)).collect(),
                to_patch: self.decoder.to_patch.map(f),
            },
            reduction: self.reduction.map(f),
        }
    }

    /// Every leaf with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Named<T> = Vec::new();
        self.encoder.patch_embed.named("encoder.patch_embed", &mut out);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            b.named(&format!("encoder.block{}", i), &mut out);
        }
        self.encoder.encoding.named("encoder.encoding", &mut out);
        self.decoder.decoding.named("decoder.decoding", &mut out);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            b.named(&format!("decoder.block{}", i), &mut out);
        }
        self.decoder.to_patch.named("decoder.to_patch", &mut out);
        self.reduction.named("reduction", &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable leaves in the same order as [`ModelParams::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.encoder.patch_embed.leaves_mut(&mut out);
        for b in &mut self.encoder.blocks {
            b.leaves_mut(&mut out);
        }
        self.encoder.encoding.leaves_mut(&mut out);
        self.decoder.decoding.leaves_mut(&mut out);
        for b in &mut self.decoder.blocks {
            b.leaves_mut(&mut out);
        }
        self.decoder.to_patch.leaves_mut(&mut out);
        self.reduction.leaves_mut(&mut out);
        out
    }
}

impl ModelParams<Var> {
    /// `[B, C, H, W]` images to `[B, m]` features.
    pub fn encode(&self, tape: &mut Tape, images: Var, config: &ModelConfig) -> Result<Var> {
        let grid = &config.grid;
        let batch = tape.shape(images)[0];
        let tokens = patchify_batch(tape, images, grid)?;
        let mut z = self.encoder.patch_embed.forward(tape, tokens)?;
        if config.use_transformer {
            z = add_positions(tape, z, batch, grid)?;
            for block in &self.encoder.blocks {
                z = block.forward(tape, z, batch, grid.patch_count(), config.head_count())?;
            }
        }
        let flat = tape.reshape(z, &[batch, grid.dim()])?;
        self.encoder.encoding.forward(tape, flat)
    }

    /// `[B, m]` features to `[B, C, H, W]` reconstructions.
    pub fn decode(&self, tape: &mut Tape, z_w: Var, config: &ModelConfig) -> Result<Var> {
        let grid = &config.grid;
        check_width("decode", tape, z_w, config.embed_dim)?;
        let batch = tape.shape(z_w)[0];
        let flat = self.decoder.decoding.forward(tape, z_w)?;
        let mut z = tape.reshape(flat, &[batch * grid.patch_count(), grid.patch_len()])?;
        if config.use_transformer {
            z = add_positions(tape, z, batch, grid)?;
            for block in &self.decoder.blocks {
                z = block.forward(tape, z, batch, grid.patch_count(), config.head_count())?;
            }
        }
        let patches = self.decoder.to_patch.forward(tape, z)?;
        unpatchify_batch(tape, patches, grid)
    }

    /// `[B, m]` features to `[B, 2]` clustering coordinates.
    pub fn dim_reduce(&self, tape: &mut Tape, z_w: Var) -> Result<Var> {
        let m = self.reduction.layers[0].weight;
        let m = tape.shape(m)[0];
        check_width("dim_reduce", tape, z_w, m)?;
        self.reduction.forward(tape, z_w)
    }
}

fn check_width(op: &'static str, tape: &Tape, x: Var, width: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::shape(op, format!("expected B x {}, got {:?}", width, shape)));
    }
    Ok(())
}

/// Token embeddings are scaled by `√E` before the sinusoidal table is added.
fn add_positions(tape: &mut Tape, z: Var, batch: usize, grid: &PatchGrid) -> Result<Var> {
    let pe = positional_encoding(grid.patch_count(), grid.patch_len())?;
    let pe = tape.constant(pe.reshape(vec![grid.dim()])?);
    let flat = tape.reshape(z, &[batch, grid.dim()])?;
    let flat = tape.scale(flat, (grid.patch_len() as f64).sqrt());
    let flat = tape.add_row(flat, pe)?;
    tape.reshape(flat, &[batch * grid.patch_count(), grid.patch_len()])
}

/// Per-sample coordinates in the feature space and the clustering space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub z_w: Tensor,
    pub z_v: Tensor,
}

/// Stored weights together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

/// Rows per forward chunk when embedding a whole dataset.
pub const EMBED_CHUNK: usize = 256;

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Model { config, params })
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let g = &self.config.grid;
        if images.rank() != 4 || images.shape()[1..] != [g.channels, g.height, g.width] {
            return Err(Error::shape(
                "encode",
                format!("images {:?} do not match grid {:?}", images.shape(), g),
            ));
        }
        Ok(())
    }

    /// Forward-only pass computing `z_w` and `z_v` for every image.
    pub fn embed(&self, images: &Tensor) -> Result<EmbeddingSet> {
        self.check_images(images)?;
        let n = images.rows();
        let starts: Vec<usize> = (0..n).step_by(EMBED_CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let len = EMBED_CHUNK.min(n - s);
                let chunk = ops::slice(images, 0, s, len)?;
                let mut tape = Tape::new();
                let p = self.params.map(&mut |t: &Tensor| tape.constant(t.clone()));
                let x = tape.constant(chunk);
                let z_w = p.encode(&mut tape, x, &self.config)?;
                let z_v = p.dim_reduce(&mut tape, z_w)?;
                Ok((tape.value(z_w).clone(), tape.value(z_v).clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let z_w: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
        let z_v: Vec<&Tensor> = parts.iter().map(|p| &p.1).collect();
        let out = EmbeddingSet {
            z_w: ops::concat(&z_w, 0)?,
            z_v: ops::concat(&z_v, 0)?,
        };
        if !out.z_w.all_finite() || !out.z_v.all_finite() {
            return Err(Error::NonFinite("embedding contains non-finite values".into()));
        }
        Ok(out)
    }

    /// Forward-only autoencoder pass.
    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let p = self.params.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let x = tape.constant(images.clone());
        let z = p.encode(&mut tape, x, &self.config)?;
        let y = p.decode(&mut tape, z, &self.config)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::new(PatchGrid::new(1, 8, 8).unwrap());
        c.hidden = vec![12, 16];
        c.reduction_hidden = vec![6];
        c.encoder_blocks = 2;
        c
    }

    fn images(rng: &mut ChaCha8Rng, n: usize, grid: &PatchGrid) -> Tensor {
        let len = n * grid.dim();
        Tensor::new(
            vec![n, grid.channels, grid.height, grid.width],
            (0..len).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_wiring_matches_the_architecture() {
        let c = ModelConfig::new(PatchGrid::new(1, 32, 32).unwrap());
        assert_eq!(c.encoder_dims(), vec![1024, 512, 512, 3072, 10]);
        assert_eq!(c.decoder_dims(), vec![10, 3072, 512, 512, 1024]);
        assert_eq!(c.reduction_dims(), vec![10, 50, 50, 100, 2]);
        assert_eq!(c.token_width() * c.grid.patch_count(), c.grid.dim());
        assert_eq!(c.head_count(), 4);
    }

    #[test]
    fn shapes_follow_the_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(small_config(), &mut rng).unwrap();
        let x = images(&mut rng, 3, &model.config.grid);
        let e = model.embed(&x).unwrap();
        assert_eq!(e.z_w.shape(), &[3, 10]);
        assert_eq!(e.z_v.shape(), &[3, 2]);
        assert_eq!(model.reconstruct(&x).unwrap().shape(), &[3, 1, 8, 8]);
    }

    #[test]
    fn batch_order_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::new(small_config(), &mut rng).unwrap();
        let x = images(&mut rng, 4, &model.config.grid);
        let perm = [2, 0, 3, 1];
        let a = model.embed(&x).unwrap();
        let b = model.embed(&x.select_rows(&perm).unwrap()).unwrap();
        assert!(b.z_v.max_abs_diff(&a.z_v.select_rows(&perm).unwrap()) < 1e-12);
        let r = model.reconstruct(&x).unwrap();
        let rp = model.reconstruct(&x.select_rows(&perm).unwrap()).unwrap();
        assert!(rp.max_abs_diff(&r.select_rows(&perm).unwrap()) < 1e-12);
    }

    #[test]
    fn repeated_forward_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::new(small_config(), &mut rng).unwrap();
        let x = images(&mut rng, 2, &model.config.grid);
        assert_eq!(model.embed(&x).unwrap(), model.embed(&x).unwrap());
        assert_eq!(model.reconstruct(&x).unwrap(), model.reconstruct(&x).unwrap());
    }

    #[test]
    fn seeded_init_is_reproducible_and_names_are_unique() {
        let a = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let names: Vec<String> = a.params.named().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(a.params.clone().leaves_mut().len(), names.len());
    }

    #[test]
    fn zero_reduction_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = Model::new(small_config(), &mut rng).unwrap();
        model.params.reduction = model.params.reduction.map(&mut |t: &Tensor| t.zeros_like());
        let x = images(&mut rng, 3, &model.config.grid);
        assert!(model.embed(&x).unwrap().z_v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabling_the_transformer_skips_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut config = small_config();
        config.use_transformer = false;
        let mut model = Model::new(config, &mut rng).unwrap();
        let x = images(&mut rng, 2, &model.config.grid);
        let before = model.embed(&x).unwrap();
        for b in &mut model.params.encoder.blocks {
            *b = b.map(&mut |t: &Tensor| t.zeros_like());
        }
        assert_eq!(model.embed(&x).unwrap(), before);
    }

    #[test]
    fn mismatched_images_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = Model::new(small_config(), &mut rng).unwrap();
        let x = Tensor::zeros(vec![2, 1, 8, 4]).unwrap();
        assert!(model.embed(&x).is_err());
    }
}
