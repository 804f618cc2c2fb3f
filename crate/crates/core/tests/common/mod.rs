#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tdec::cluster_head::{knn_indices, neighbor_weights_var, soft_assign_var};
use tdec::diffcore::{grad_check, ops, Tape, Tensor, Var};
use tdec::losses;
use tdec::model::{ModelConfig, ModelParams, PatchGrid};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| { let v: f64 = StandardNormal.sample(rng); scale * v }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A small architecture whose shapes vary with the seed.
pub fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let side = if rng.random_bool(0.5) { 8 } else { 16 };
    let channels = rng.random_range(1..=2);
    let mut mc = ModelConfig::new(PatchGrid::new(channels, side, side).unwrap());
    mc.embed_dim = rng.random_range(2..=4);
    mc.hidden = vec![rng.random_range(3..=6)];
    mc.reduction_hidden = vec![rng.random_range(3..=5)];
    mc.encoder_blocks = 1;
    mc.decoder_blocks = 1;
    mc.heads = Some(if mc.token_width().is_multiple_of(2) { 2 } else { 1 });
    mc.use_transformer = rng.random_bool(0.75);
    mc
}

/// Leaves in `map` traversal order, and the inverse used inside loss closures.
pub fn flatten(params: &ModelParams<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.map(&mut |t: &Tensor| out.push(t.clone()));
    out
}

pub fn rebuild(template: &ModelParams<Tensor>, vars: &[Var]) -> ModelParams<Var> {
    let mut it = vars.iter();
    template.map(&mut |_| *it.next().expect("one var per leaf"))
}

/// Reconstruction loss of a random small autoencoder, checked through every weight.
pub fn reconstruction_trial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mc = small_config(&mut r);
    let g = mc.grid;
    let params = ModelParams::init(&mc, &mut r).unwrap();
    let batch = r.random_range(1..=3);
    let x = uniform(&mut r, &[batch, g.channels, g.height, g.width], 0.0, 1.0);
    let template = params.clone();
    grad_check(
        |tape, vars| {
            let p = rebuild(&template, vars);
            let xv = tape.constant(x.clone());
            let z = p.encode(tape, xv, &mc)?;
            let y = p.decode(tape, z, &mc)?;
            losses::reconstruction_loss_var(tape, xv, y)
        },
        &flatten(&params),
        FD_STEP,
    )
    .unwrap()
}

/// Dimension-reduction loss through the high affinities of `z_w`, the reduction block
/// and the low affinities of its output; σ is searched once and held fixed.
pub fn dim_trial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mc = small_config(&mut r);
    let params = ModelParams::init(&mc, &mut r).unwrap();
    let n = r.random_range(4..=9);
    let z_w = normal(&mut r, &[n, mc.embed_dim], 1.0);
    let sq = ops::cross_sqdist(&z_w, &z_w).unwrap();
    let (sigmas, _) = losses::search_sigmas(&sq, losses::default_perplexity(n), 1e-10).unwrap();
    let reduction = params.reduction.clone();
    let mut blocks = vec![z_w];
    reduction.map(&mut |t: &Tensor| blocks.push(t.clone()));
    grad_check(
        |tape, vars| {
            let mut it = vars[1..].iter();
            let red = reduction.map(&mut |_| *it.next().unwrap());
            let z_v = red.forward(tape, vars[0])?;
            let phi = losses::high_affinities_var(tape, vars[0], &sigmas)?;
            losses::dim_loss_var(tape, phi, z_v)
        },
        &blocks,
        FD_STEP,
    )
    .unwrap()
}

/// Clustering loss through the neighbor-weighted soft assignment with fixed centers.
///
/// With `k = 0` the live points are their own neighbors with unit weight.
pub fn clustering_trial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(5..=12);
    let clusters = r.random_range(2..=4);
    let k = r.random_range(0..=3.min(n - 1));
    let z = normal(&mut r, &[n, 2], 1.5);
    let jitter = normal(&mut r, &[n, 2], 0.05);
    let moved: Vec<f64> = z.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect();
    let snapshot = Tensor::new(vec![n, 2], moved).unwrap();
    let centers = normal(&mut r, &[clusters, 2], 1.5);
    let p = {
        let mut q = uniform(&mut r, &[n, clusters], 0.05, 1.0);
        for i in 0..n {
            let s: f64 = q.row(i).iter().sum();
            q.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        losses::target_distribution(&q).unwrap()
    };
    let knn = if k > 0 { Some(knn_indices(&snapshot, k).unwrap()) } else { None };
    grad_check(
        |tape, vars| {
            let c = tape.constant(centers.clone());
            let (nb, theta) = match &knn {
                Some(knn) => {
                    let flat: Vec<usize> = knn.iter().flatten().cloned().collect();
                    let nb = tape.constant(snapshot.select_rows(&flat)?);
                    let theta = neighbor_weights_var(tape, vars[0], nb, k)?;
                    (nb, theta)
                }
                None => (vars[0], tape.constant(Tensor::ones(vec![n, 1])?)),
            };
            let q = soft_assign_var(tape, nb, theta, c)?;
            losses::clustering_loss_var(tape, &p, q)
        },
        &[z],
        FD_STEP,
    )
    .unwrap()
}

/// Clustering loss with the live coordinates produced by the reduction block.
pub fn clustering_through_reduction_trial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mc = small_config(&mut r);
    let params = ModelParams::init(&mc, &mut r).unwrap();
    let n = r.random_range(4..=8);
    let z_w = normal(&mut r, &[n, mc.embed_dim], 1.0);
    let centers = normal(&mut r, &[3, 2], 0.5);
    let q0 = uniform(&mut r, &[n, 3], 0.1, 1.0);
    let q0 = {
        let mut q = q0;
        for i in 0..n {
            let s: f64 = q.row(i).iter().sum();
            q.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        q
    };
    let p = losses::target_distribution(&q0).unwrap();
    let reduction = params.reduction.clone();
    let mut blocks = vec![z_w];
    reduction.map(&mut |t: &Tensor| blocks.push(t.clone()));
    grad_check(
        |tape, vars| {
            let mut it = vars[1..].iter();
            let red = reduction.map(&mut |_| *it.next().unwrap());
            let z_v = red.forward(tape, vars[0])?;
            let theta = tape.constant(Tensor::ones(vec![n, 1])?);
            let c = tape.constant(centers.clone());
            let q = soft_assign_var(tape, z_v, theta, c)?;
            losses::clustering_loss_var(tape, &p, q)
        },
        &blocks,
        FD_STEP,
    )
    .unwrap()
}

/// A scalar reduction that mixes every entry with distinct weights.
pub fn weighted_sum(tape: &mut Tape, x: Var, rng_seed: u64) -> tdec::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = uniform(&mut rng(rng_seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(x, w)?;
    Ok(tape.sum(m))
}
