//! Pretraining and joint self-training.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster_head::{self, ClusterState, HeadMode, NEIGHBOR_FRACTION};
use crate::data::{shuffled_indices, Dataset};
use crate::diffcore::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, combine, LossBundle, PERPLEXITY_TOL};
use crate::metrics;
use crate::model::{EmbeddingSet, Model, ModelConfig, ModelParams};

/// Largest rotation applied by [`augment`], in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Hyperparameters of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Neighbors per point in the assignment; 0 means each point is its own neighbor.
    pub k: usize,
    /// Number of clusters `K`.
    pub clusters: usize,
    pub neighbor_fraction: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// `None` uses [`losses::default_perplexity`] of each batch.
    pub perplexity: Option<f64>,
    pub use_transformer: bool,
    pub use_clustering_head: bool,
    pub use_dim_reduction: bool,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.1,
            beta: 0.001,
            k: 50,
            clusters: 0,
            neighbor_fraction: NEIGHBOR_FRACTION,
            epsilon: 0.001,
            lr: 0.01,
            batch_size: 256,
            pretrain_epochs: 200,
            max_iter: 500,
            seed: 0,
            perplexity: None,
            use_transformer: true,
            use_clustering_head: true,
            use_dim_reduction: true,
            augment: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail(format!("alpha and beta must be nonnegative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return fail(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.clusters == 0 {
            return fail("clusters (K) must be set to at least 1".into());
        }
        if !(self.neighbor_fraction > 0.0 && self.neighbor_fraction < 1.0) {
            return fail(format!("neighbor_fraction must lie in (0, 1), got {}", self.neighbor_fraction));
        }
        if let Some(p) = self.perplexity {
            if !(p > 0.0) {
                return fail(format!("perplexity must be positive, got {}", p));
            }
        }
        Ok(())
    }
}

/// Which space assignments happen in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterSpace {
    /// The 2-D output of the dim-reduction block.
    Reduced,
    /// The `m`-dimensional encoder output.
    Feature,
}

/// Pathways selected by the ablation flags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub use_transformer: bool,
    pub head: HeadMode,
    pub space: ClusterSpace,
    pub dim_loss: bool,
}

/// Maps the three ablation flags onto model and head pathways.
pub fn apply_ablation(config: &RunConfig) -> Variant {
    let head = if config.use_clustering_head {
        HeadMode::DensityPeaks {
            k: config.k,
            neighbor_fraction: config.neighbor_fraction,
        }
    } else {
        HeadMode::Plain
    };
    Variant {
        use_transformer: config.use_transformer,
        head,
        space: if config.use_dim_reduction {
            ClusterSpace::Reduced
        } else {
            ClusterSpace::Feature
        },
        dim_loss: config.use_dim_reduction,
    }
}

/// Fraction of positions whose labels differ.
pub fn label_change(previous: &[usize], current: &[usize]) -> Result<f64> {
    if previous.len() != current.len() || current.is_empty() {
        return Err(Error::shape(
            "stop_check",
            format!("label vectors of length {} and {}", previous.len(), current.len()),
        ));
    }
    let changed = previous.iter().zip(current).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / current.len() as f64)
}

/// True when the label-change fraction is at most `epsilon`.
pub fn stop_check(previous: &[usize], current: &[usize], epsilon: f64) -> Result<bool> {
    Ok(label_change(previous, current)? <= epsilon)
}

/// Rotation about the image center followed by an integer shift, bilinear with zero fill.
pub fn augment_with(image: &Tensor, degrees: f64, shift_y: i64, shift_x: i64) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape("augment", format!("expected C x H x W, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // Undo the shift, then rotate back into source coordinates.
            let dy = (y as i64 - shift_y) as f64 - cy;
            let dx = (x as i64 - shift_x) as f64 - cx;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let ty = sy - y0;
            let tx = sx - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let px = |yy: i64, xx: i64| -> f64 {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize]
                    }
                };
                let mut v = 0.0;
                let corners = [
                    (y0, x0, (1.0 - ty) * (1.0 - tx)),
                    (y0, x0 + 1, (1.0 - ty) * tx),
                    (y0 + 1, x0, ty * (1.0 - tx)),
                    (y0 + 1, x0 + 1, ty * tx),
                ];
                for (yy, xx, wgt) in corners {
                    if wgt != 0.0 {
                        v += wgt * px(yy, xx);
                    }
                }
                out[ch * h * w + y * w + x] = v;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Random rotation in ±10° and random shift of up to a tenth of each side.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape("augment", format!("expected C x H x W, got {:?}", image.shape())));
    }
    let degrees = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let max_y = image.shape()[1] as f64 / 10.0;
    let max_x = image.shape()[2] as f64 / 10.0;
    let shift_y = rng.random_range(-max_y..=max_y).round() as i64;
    let shift_x = rng.random_range(-max_x..=max_x).round() as i64;
    augment_with(image, degrees, shift_y, shift_x)
}

fn augment_batch(images: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let shape = images.shape().to_vec();
    let mut data = Vec::with_capacity(images.len());
    for row in images.iter_rows() {
        let img = Tensor::new(shape[1..].to_vec(), row.to_vec())?;
        data.extend(augment(&img, rng)?.into_data());
    }
    Tensor::new(shape, data)
}

/// Mean losses of one pretraining epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub losses: LossBundle,
}

/// One outer iteration of joint training.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub losses: LossBundle,
    pub label_change: f64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    /// Clusters that received no hard label at this iteration.
    pub empty_clusters: usize,
}

/// Everything a joint-training run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub labels: Vec<usize>,
    pub embeddings: EmbeddingSet,
    pub state: ClusterState,
    /// True when the label-change criterion ended the run.
    pub converged: bool,
}

/// Frozen per-iteration quantities the clustering loss is measured against.
struct Targets<'a> {
    p: &'a Tensor,
    centers: &'a Tensor,
    /// Full-dataset coordinates in the clustering space, frozen for the epoch.
    snapshot: &'a Tensor,
    knn: Option<&'a [Vec<usize>]>,
}

/// A model together with the run configuration and random stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: RunConfig,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    /// Seeds the stream from `config.seed` and initializes weights from it.
    pub fn new(mut model_config: ModelConfig, config: RunConfig) -> Result<Self> {
        config.validate()?;
        model_config.use_transformer = config.use_transformer;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(model_config, &mut rng)?;
        Ok(Trainer { model, config, rng })
    }

    pub fn from_parts(mut model: Model, config: RunConfig, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        model.config.use_transformer = config.use_transformer;
        Ok(Trainer { model, config, rng })
    }

    pub fn variant(&self) -> Variant {
        apply_ablation(&self.config)
    }

    fn perplexity(&self, batch: usize) -> f64 {
        self.config.perplexity.unwrap_or_else(|| losses::default_perplexity(batch))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let g = &self.model.config.grid;
        if (data.channels(), data.height(), data.width()) != (g.channels, g.height, g.width) {
            return Err(Error::invalid(format!(
                "dataset images are {}x{}x{} but the model expects {}x{}x{}",
                data.channels(),
                data.height(),
                data.width(),
                g.channels,
                g.height,
                g.width
            )));
        }
        Ok(())
    }

    /// Losses of one batch, and the gradient of every parameter block when `train` is set.
    fn batch_losses(
        &self,
        images: Tensor,
        rows: &[usize],
        targets: Option<&Targets>,
        train: bool,
    ) -> Result<(LossBundle, Option<Vec<Tensor>>)> {
        let variant = self.variant();
        let cfg = &self.model.config;
        let n = images.rows();
        let mut tape = Tape::new();
        let params: ModelParams<Var> = if train {
            self.model.params.map(&mut |t: &Tensor| tape.leaf(t.clone()))
        } else {
            self.model.params.map(&mut |t: &Tensor| tape.constant(t.clone()))
        };
        let x = tape.constant(images);
        let z_w = params.encode(&mut tape, x, cfg)?;
        let recon = params.decode(&mut tape, z_w, cfg)?;
        let l_rec = losses::reconstruction_loss_var(&mut tape, x, recon)?;
        let mut total = l_rec;
        let mut z_v = None;
        let mut l_dim_value = 0.0;
        if variant.dim_loss && n >= 2 {
            let zv = params.dim_reduce(&mut tape, z_w)?;
            let sq = crate::diffcore::ops::cross_sqdist(tape.value(z_w), tape.value(z_w))?;
            let (sigmas, _) = losses::search_sigmas(&sq, self.perplexity(n), PERPLEXITY_TOL)?;
            let phi = losses::high_affinities_var(&mut tape, z_w, &sigmas)?;
            let l_dim = losses::dim_loss_var(&mut tape, phi, zv)?;
            l_dim_value = tape.value(l_dim).item()?;
            let weighted = tape.scale(l_dim, self.config.beta);
            total = tape.add(total, weighted)?;
            z_v = Some(zv);
        }
        let mut l_clu_value = 0.0;
        if let Some(t) = targets {
            let space = match variant.space {
                ClusterSpace::Reduced => match z_v {
                    Some(v) => v,
                    None => params.dim_reduce(&mut tape, z_w)?,
                },
                ClusterSpace::Feature => z_w,
            };
            let (neighbors, theta) = match t.knn {
                Some(knn) => {
                    let k = knn[0].len();
                    let flat: Vec<usize> = rows.iter().flat_map(|&i| knn[i].iter().cloned()).collect();
                    let nb = tape.constant(t.snapshot.select_rows(&flat)?);
                    let theta = cluster_head::neighbor_weights_var(&mut tape, space, nb, k)?;
                    (nb, theta)
                }
                None => (space, tape.constant(Tensor::ones(vec![n, 1])?)),
            };
            let centers = tape.constant(t.centers.clone());
            let q = cluster_head::soft_assign_var(&mut tape, neighbors, theta, centers)?;
            let p = t.p.select_rows(rows)?;
            let l_clu = losses::clustering_loss_var(&mut tape, &p, q)?;
            let l_clu = tape.scale(l_clu, 1.0 / n as f64);
            l_clu_value = tape.value(l_clu).item()?;
            let weighted = tape.scale(l_clu, self.config.alpha);
            total = tape.add(total, weighted)?;
        }
        let bundle = combine(
            tape.value(l_rec).item()?,
            l_dim_value,
            l_clu_value,
            if targets.is_some() { self.config.alpha } else { 0.0 },
            self.config.beta,
        );
        if !tape.value(total).item()?.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !train {
            return Ok((bundle, None));
        }
        let mut grads = tape.backward(total)?;
        let leaves = params.leaves();
        Ok((bundle, Some(leaves.into_iter().map(|&v| grads.take(v)).collect())))
    }

    /// One shuffled pass of Adam updates; returns the mean batch losses.
    fn epoch(&mut self, data: &Dataset, adam: &mut AdamState, targets: Option<&Targets>) -> Result<LossBundle> {
        let order = shuffled_indices(data.len(), &mut self.rng);
        let cfg = AdamConfig::with_lr(self.config.lr);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for (b, rows) in order.chunks(self.config.batch_size).enumerate() {
            let clean = data.images.select_rows(rows)?;
            let images = if self.config.augment {
                augment_batch(&clean, &mut self.rng)?
            } else {
                clean
            };
            let (bundle, grads) = self
                .batch_losses(images, rows, targets, true)
                .map_err(|e| annotate(e, b))?;
            let grads = grads.expect("training pass returns gradients");
            adam_step(&mut self.model.params.leaves_mut(), &grads, adam, &cfg)?;
            sums[0] += bundle.l_rec;
            sums[1] += bundle.l_dim;
            sums[2] += bundle.l_clu;
            batches += 1;
        }
        let k = batches as f64;
        Ok(combine(
            sums[0] / k,
            sums[1] / k,
            sums[2] / k,
            if targets.is_some() { self.config.alpha } else { 0.0 },
            self.config.beta,
        ))
    }

    /// Forward-only losses over the clean data in index order.
    fn evaluate_losses(&self, data: &Dataset, targets: Option<&Targets>) -> Result<LossBundle> {
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        let order: Vec<usize> = (0..data.len()).collect();
        for rows in order.chunks(self.config.batch_size) {
            let (bundle, _) = self.batch_losses(data.images.select_rows(rows)?, rows, targets, false)?;
            sums[0] += bundle.l_rec;
            sums[1] += bundle.l_dim;
            sums[2] += bundle.l_clu;
            batches += 1;
        }
        let k = batches as f64;
        Ok(combine(
            sums[0] / k,
            sums[1] / k,
            sums[2] / k,
            if targets.is_some() { self.config.alpha } else { 0.0 },
            self.config.beta,
        ))
    }

    /// Mini-batch Adam on the structure loss only.
    pub fn pretrain(&mut self, data: &Dataset) -> Result<Vec<PretrainRecord>> {
        self.check_data(data)?;
        let mut adam = AdamState::named(self.model.params.named());
        let mut records = Vec::with_capacity(self.config.pretrain_epochs);
        for epoch in 1..=self.config.pretrain_epochs {
            let losses = self
                .epoch(data, &mut adam, None)
                .map_err(|e| annotate_stage(e, "pretraining epoch", epoch))?;
            info!("pretrain epoch {}: l_stru {:.6}", epoch, losses.l_stru);
            records.push(PretrainRecord { epoch, losses });
        }
        Ok(records)
    }

    /// Full-dataset embedding on clean images plus one pass of the clustering head.
    pub fn assign(&self, data: &Dataset) -> Result<(EmbeddingSet, ClusterState)> {
        self.check_data(data)?;
        let emb = self.model.embed(&data.images)?;
        let state = self.assign_embedded(&emb)?;
        Ok((emb, state))
    }

    fn assign_embedded(&self, emb: &EmbeddingSet) -> Result<ClusterState> {
        let variant = self.variant();
        let space = match variant.space {
            ClusterSpace::Reduced => &emb.z_v,
            ClusterSpace::Feature => &emb.z_w,
        };
        cluster_head::assign(space, self.config.clusters, variant.head)
    }

    /// Alternates center/assignment updates with epochs of joint training until labels settle.
    pub fn train(&mut self, data: &Dataset) -> Result<TrainReport> {
        self.check_data(data)?;
        let n = data.len();
        if self.config.clusters > n {
            return Err(Error::invalid(format!(
                "K = {} clusters exceeds the {} samples",
                self.config.clusters, n
            )));
        }
        let variant = self.variant();
        let mut adam = AdamState::named(self.model.params.named());
        let mut records: Vec<IterationRecord> = Vec::new();
        let mut previous: Option<ClusterState> = None;
        for iter in 1..=self.config.max_iter + 1 {
            let emb = self.model.embed(&data.images)?;
            let mut state = self.assign_embedded(&emb)?;
            if let Some(prev) = &previous {
                let perm = cluster_head::match_labels(&prev.labels, &state.labels, self.config.clusters)?;
                align(&mut state, &perm)?;
            }
            let change = match &previous {
                Some(prev) => label_change(&prev.labels, &state.labels)?,
                None => 1.0,
            };
            let stop = previous.is_some() && change <= self.config.epsilon;
            let terminal = stop || iter == self.config.max_iter + 1;
            let empty = (0..self.config.clusters)
                .filter(|t| !state.labels.contains(t))
                .count();
            if empty > 0 {
                warn!("iteration {}: {} clusters received no points", iter, empty);
            }
            let (acc, nmi) = match &data.labels {
                Some(truth) => (
                    Some(metrics::accuracy(&state.labels, truth)?),
                    Some(metrics::nmi(&state.labels, truth)?),
                ),
                None => (None, None),
            };
            let p = losses::target_distribution(&state.q)?;
            let snapshot = match variant.space {
                ClusterSpace::Reduced => &emb.z_v,
                ClusterSpace::Feature => &emb.z_w,
            };
            let uses_neighbors = matches!(variant.head, HeadMode::DensityPeaks { k, .. } if k.min(n - 1) > 0);
            let targets = Targets {
                p: &p,
                centers: &state.centers.coords,
                snapshot,
                knn: if uses_neighbors { Some(&state.knn) } else { None },
            };
            let losses = if terminal {
                self.evaluate_losses(data, Some(&targets))?
            } else {
                self.epoch(data, &mut adam, Some(&targets))
                    .map_err(|e| annotate_stage(e, "training iteration", iter))?
            };
            info!(
                "iteration {}: l_total {:.6}, label change {:.4}{}",
                iter,
                losses.l_total,
                change,
                acc.map(|a| format!(", acc {:.4}", a)).unwrap_or_default()
            );
            records.push(IterationRecord {
                iter,
                losses,
                label_change: change,
                acc,
                nmi,
                empty_clusters: empty,
            });
            if terminal {
                return Ok(TrainReport {
                    records,
                    labels: state.labels.clone(),
                    embeddings: emb,
                    state,
                    converged: stop,
                });
            }
            previous = Some(state);
        }
        unreachable!("the last iteration is terminal")
    }
}

/// Reorders centers, memberships and labels so that new cluster `perm[t]` becomes `t`.
fn align(state: &mut ClusterState, perm: &[usize]) -> Result<()> {
    let mut inverse = vec![0; perm.len()];
    for (slot, &s) in perm.iter().enumerate() {
        inverse[s] = slot;
    }
    state.centers.coords = state.centers.coords.select_rows(perm)?;
    if !state.centers.indices.is_empty() {
        state.centers.indices = perm.iter().map(|&s| state.centers.indices[s]).collect();
    }
    let k = perm.len();
    let mut q = state.q.clone();
    for (dst, src) in q.data_mut().chunks_mut(k).zip(state.q.iter_rows()) {
        for (slot, &s) in perm.iter().enumerate() {
            dst[slot] = src[s];
        }
    }
    state.q = q;
    for l in &mut state.labels {
        *l = inverse[*l];
    }
    Ok(())
}

fn annotate(e: Error, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{} in batch {}", what, batch)),
        other => other,
    }
}

fn annotate_stage(e: Error, stage: &str, index: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{} during {} {}", what, stage, index)),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};
    use crate::model::PatchGrid;

    fn tiny() -> (ModelConfig, RunConfig, Dataset) {
        let data = make_blobs(&BlobSpec::ring(3, 10, 0.1, 2.0, 64, 3)).unwrap();
        let mut mc = ModelConfig::new(PatchGrid::new(1, 8, 8).unwrap());
        mc.hidden = vec![8];
        mc.reduction_hidden = vec![6];
        mc.encoder_blocks = 1;
        let rc = RunConfig {
            clusters: 3,
            k: 4,
            batch_size: 8,
            pretrain_epochs: 2,
            max_iter: 3,
            seed: 5,
            ..Default::default()
        };
        (mc, rc, data)
    }

    #[test]
    fn stop_rule_examples() {
        assert!(stop_check(&[0, 1, 2], &[0, 1, 2], 0.001).unwrap());
        assert!(!stop_check(&[0, 0], &[1, 1], 0.5).unwrap());
        let a = vec![0; 1000];
        let mut b = a.clone();
        b[17] = 1;
        assert!(stop_check(&a, &b, 0.001).unwrap());
        assert!(stop_check(&[0], &[0, 1], 0.5).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let img = Tensor::new(vec![2, 8, 8], (0..128).map(|v| v as f64 / 128.0).collect()).unwrap();
        assert_eq!(augment_with(&img, 0.0, 0, 0).unwrap(), img);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &mut rng).unwrap().shape(), img.shape());
    }

    #[test]
    fn augmentation_is_seeded() {
        let img = Tensor::new(vec![1, 12, 12], (0..144).map(|v| (v % 7) as f64 / 7.0).collect()).unwrap();
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shift_moves_pixels() {
        let mut img = Tensor::zeros(vec![1, 4, 4]).unwrap();
        img.data_mut()[5] = 1.0;
        let s = augment_with(&img, 0.0, 1, 2).unwrap();
        assert_eq!(s.data()[2 * 4 + 3], 1.0);
        assert_eq!(s.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn ablation_selector() {
        let full = apply_ablation(&RunConfig::default());
        assert!(full.use_transformer && full.dim_loss);
        assert_eq!(full.space, ClusterSpace::Reduced);
        assert!(matches!(full.head, HeadMode::DensityPeaks { k: 50, .. }));
        let none = apply_ablation(&RunConfig {
            use_transformer: false,
            use_clustering_head: false,
            use_dim_reduction: false,
            ..Default::default()
        });
        assert!(!none.use_transformer && !none.dim_loss);
        assert_eq!(none.space, ClusterSpace::Feature);
        assert_eq!(none.head, HeadMode::Plain);
    }

    #[test]
    fn zero_pretrain_epochs_keeps_params() {
        let (mc, mut rc, data) = tiny();
        rc.pretrain_epochs = 0;
        let mut t = Trainer::new(mc, rc).unwrap();
        let before = t.model.params.clone();
        assert!(t.pretrain(&data).unwrap().is_empty());
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (mc, rc, data) = tiny();
        let mut a = Trainer::new(mc.clone(), rc.clone()).unwrap();
        let mut b = Trainer::new(mc, rc).unwrap();
        let ra = a.pretrain(&data).unwrap();
        let rb = b.pretrain(&data).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn epsilon_one_stops_at_second_iteration() {
        let (mc, mut rc, data) = tiny();
        rc.epsilon = 1.0;
        rc.max_iter = 10;
        let mut t = Trainer::new(mc, rc).unwrap();
        let report = t.train(&data).unwrap();
        assert_eq!(report.records.len(), 2);
        assert!(report.converged);
        assert_eq!(report.records[0].label_change, 1.0);
        assert!(report.records.iter().all(|r| (0.0..=1.0).contains(&r.label_change)));
    }

    #[test]
    fn max_iter_bounds_the_run() {
        let (mc, mut rc, data) = tiny();
        rc.epsilon = 1e-9;
        rc.max_iter = 2;
        let mut t = Trainer::new(mc, rc).unwrap();
        let report = t.train(&data).unwrap();
        assert!(report.records.len() <= 3);
        let iters: Vec<usize> = report.records.iter().map(|r| r.iter).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(report.labels.len(), data.len());
    }

    #[test]
    fn every_ablation_runs_with_the_same_schema() {
        for mask in 0..8u8 {
            let (mc, mut rc, data) = tiny();
            rc.use_transformer = mask & 1 != 0;
            rc.use_clustering_head = mask & 2 != 0;
            rc.use_dim_reduction = mask & 4 != 0;
            rc.max_iter = 1;
            let mut t = Trainer::new(mc, rc).unwrap();
            t.pretrain(&data).unwrap();
            let r = t.train(&data).unwrap();
            assert!(!r.records.is_empty());
            assert!(r.records[0].acc.is_some());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (mc, rc, _) = tiny();
        for bad in [
            RunConfig { clusters: 0, ..rc.clone() },
            RunConfig { epsilon: 0.0, ..rc.clone() },
            RunConfig { batch_size: 1, ..rc.clone() },
            RunConfig { alpha: -1.0, ..rc.clone() },
        ] {
            assert!(Trainer::new(mc.clone(), bad).is_err());
        }
    }
}
