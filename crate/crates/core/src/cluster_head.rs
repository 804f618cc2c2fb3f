//! Density-peak centers and neighbor-weighted Student-t assignment.
//!
//! Everything here works on `n × d` point matrices of any width, although the
//! pipeline normally calls it with the 2-D clustering coordinates.

use std::cmp::Ordering;

use log::warn;
use rand::Rng;
use rayon::prelude::*;

use crate::diffcore::{ops::sq_dist, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Squared distances below this are raised to it before inversion.
pub const SQ_DIST_FLOOR: f64 = 1e-12;

/// Default share of points expected inside the density bandwidth.
pub const NEIGHBOR_FRACTION: f64 = 0.02;

fn check_points(op: &'static str, z: &Tensor, min: usize) -> Result<()> {
    if z.rank() != 2 || z.rows() < min {
        return Err(Error::shape(
            op,
            format!("need at least {} points as rows, got {:?}", min, z.shape()),
        ));
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Kernel width for the density estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcBandwidth {
    pub dc: f64,
    pub neighbor_fraction: f64,
    /// Set when every pairwise distance was zero and `dc` fell back to 1.
    pub degenerate: bool,
}

/// Nearest-rank `neighbor_fraction` quantile of all pairwise distances.
pub fn bandwidth_dc(z: &Tensor, neighbor_fraction: f64) -> Result<DcBandwidth> {
    check_points("bandwidth_dc", z, 2)?;
    if !(neighbor_fraction > 0.0 && neighbor_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "neighbor_fraction must lie in (0, 1), got {}",
            neighbor_fraction
        )));
    }
    let n = z.rows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(dist(z.row(i), z.row(j)));
        }
    }
    // The tiny shrink keeps products like 0.02 * 4950 from rounding up past an integer.
    let rank = ((neighbor_fraction * d.len() as f64) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let rank = rank.min(d.len());
    let (_, &mut q, _) = d.select_nth_unstable_by(rank - 1, f64::total_cmp);
    let mut out = DcBandwidth {
        dc: q,
        neighbor_fraction,
        degenerate: false,
    };
    if q <= 0.0 {
        match d.iter().cloned().filter(|&v| v > 0.0).min_by(f64::total_cmp) {
            Some(v) => out.dc = v,
            None => {
                warn!("all {} points coincide; using dc = 1", n);
                out.dc = 1.0;
                out.degenerate = true;
            }
        }
    }
    Ok(out)
}

/// Gaussian-kernel densities, self term included.
pub fn densities(z: &Tensor, dc: f64) -> Result<Vec<f64>> {
    check_points("densities", z, 1)?;
    if !(dc > 0.0) {
        return Err(Error::invalid(format!("dc must be positive, got {}", dc)));
    }
    let n = z.rows();
    let dc2 = dc * dc;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let mut rho = 0.0;
            for j in 0..n {
                rho += (-sq_dist(zi, z.row(j)) / dc2).exp();
            }
            rho
        })
        .collect())
}

/// Strict density order: equal densities rank the lower index as denser.
#[inline]
pub fn denser(rho: &[f64], j: usize, i: usize) -> bool {
    rho[j] > rho[i] || (rho[j] == rho[i] && j < i)
}

/// Distance to the nearest denser point, or to the farthest point for the density maximum.
pub fn min_dist_delta(z: &Tensor, rho: &[f64]) -> Result<Vec<f64>> {
    check_points("min_dist_delta", z, 1)?;
    let n = z.rows();
    if rho.len() != n {
        return Err(Error::shape("min_dist_delta", format!("{} densities for {} points", rho.len(), n)));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let mut nearest = f64::INFINITY;
            let mut farthest = 0.0f64;
            let mut has_denser = false;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = dist(zi, z.row(j));
                farthest = farthest.max(d);
                if denser(rho, j, i) {
                    has_denser = true;
                    nearest = nearest.min(d);
                }
            }
            if has_denser {
                nearest
            } else {
                farthest
            }
        })
        .collect())
}

/// Chosen cluster centers.
#[derive(Clone, Debug, PartialEq)]
pub struct Centers {
    /// Source point of each center; empty when centers are not data points.
    pub indices: Vec<usize>,
    /// `K × d` coordinates.
    pub coords: Tensor,
}

/// `γ_i = ρ_i · δ_i`.
pub fn decision_values(rho: &[f64], delta: &[f64]) -> Vec<f64> {
    rho.iter().zip(delta).map(|(r, d)| r * d).collect()
}

/// The `K` points with the largest γ; ties prefer higher ρ, then lower index.
pub fn select_centers(rho: &[f64], delta: &[f64], z: &Tensor, k: usize) -> Result<Centers> {
    let n = z.rows();
    if rho.len() != n || delta.len() != n {
        return Err(Error::shape("select_centers", "rho, delta and points disagree in length"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= K <= n, got K = {} for n = {}", k, n)));
    }
    let gamma = decision_values(rho, delta);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        gamma[b]
            .total_cmp(&gamma[a])
            .then(rho[b].total_cmp(&rho[a]))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(Centers {
        coords: z.select_rows(&order)?,
        indices: order,
    })
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest other points of every point; equal distances prefer lower index.
pub fn knn_indices(z: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    check_points("knn_indices", z, 1)?;
    let n = z.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k = {} neighbors needs 1 <= k <= n - 1 = {}; lower k",
            k,
            n.saturating_sub(1)
        )));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(zi, z.row(j)), j))
                .collect();
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_distance);
                cand.truncate(k);
            }
            cand.sort_by(by_distance);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Neighbor lists for the no-neighbor degradation: every point is its own single neighbor.
pub fn self_neighbors(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

fn check_knn(op: &'static str, knn: &[Vec<usize>], n: usize, pool: usize) -> Result<usize> {
    let k = knn.first().map(|l| l.len()).unwrap_or(0);
    if knn.len() != n || k == 0 {
        return Err(Error::shape(op, format!("{} neighbor lists for {} points", knn.len(), n)));
    }
    for (i, l) in knn.iter().enumerate() {
        if l.len() != k || l.iter().any(|&s| s >= pool) {
            return Err(Error::shape(op, format!("neighbor list {} is invalid", i)));
        }
    }
    Ok(k)
}

/// Normalized inverse squared distances to each neighbor.
pub fn neighbor_weights(z: &Tensor, knn: &[Vec<usize>]) -> Result<Tensor> {
    let n = z.rows();
    let k = check_knn("neighbor_weights", knn, n, n)?;
    let mut theta = Vec::with_capacity(n * k);
    for (i, list) in knn.iter().enumerate() {
        let w: Vec<f64> = list
            .iter()
            .map(|&s| 1.0 / sq_dist(z.row(s), z.row(i)).max(SQ_DIST_FLOOR))
            .collect();
        let total: f64 = w.iter().sum();
        theta.extend(w.iter().map(|v| v / total));
    }
    Tensor::new(vec![n, k], theta)
}

/// Uniform weights, one per listed neighbor.
pub fn uniform_weights(n: usize, k: usize) -> Result<Tensor> {
    Tensor::full(vec![n, k], 1.0 / k as f64)
}

/// Neighbor-weighted Student-t memberships (`n × K`).
pub fn soft_assign(z: &Tensor, centers: &Tensor, knn: &[Vec<usize>], theta: &Tensor) -> Result<Tensor> {
    let n = z.rows();
    let k = check_knn("soft_assign", knn, n, n)?;
    if centers.rank() != 2 || centers.cols() != z.cols() {
        return Err(Error::shape(
            "soft_assign",
            format!("centers {:?} for points {:?}", centers.shape(), z.shape()),
        ));
    }
    if theta.shape() != [n, k] {
        return Err(Error::shape("soft_assign", format!("weights {:?}, expected [{}, {}]", theta.shape(), n, k)));
    }
    let kc = centers.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut num = vec![0.0; kc];
            for (s_pos, &s) in knn[i].iter().enumerate() {
                let w = theta.at(i, s_pos);
                for (t, acc) in num.iter_mut().enumerate() {
                    *acc += w / (1.0 + sq_dist(z.row(s), centers.row(t)));
                }
            }
            let total: f64 = num.iter().sum();
            num.iter().map(|v| v / total).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// `argmax_t q_it`, lowest `t` on ties.
pub fn hard_labels(q: &Tensor) -> Vec<usize> {
    q.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (t, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// Taped θ: `neighbors` holds the `k` neighbor rows of each point, stacked point-major.
pub fn neighbor_weights_var(tape: &mut Tape, z: Var, neighbors: Var, k: usize) -> Result<Var> {
    let n = tape.shape(z)[0];
    let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let own = tape.gather_rows(z, &repeat)?;
    let diff = tape.sub(neighbors, own)?;
    let sq = tape.square(diff);
    let sq = tape.sum_axis(sq, 1)?;
    let sq = tape.clamp_min(sq, SQ_DIST_FLOOR);
    let inv = tape.recip(sq)?;
    let inv = tape.reshape(inv, &[n, k])?;
    normalize_rows(tape, inv)
}

/// Taped [`soft_assign`] given stacked neighbor rows and their weights.
pub fn soft_assign_var(tape: &mut Tape, neighbors: Var, theta: Var, centers: Var) -> Result<Var> {
    let (n, k) = (tape.shape(theta)[0], tape.shape(theta)[1]);
    let kc = tape.shape(centers)[0];
    let sq = tape.cross_sqdist(neighbors, centers)?;
    let one_plus = tape.add_scalar(sq, 1.0);
    let kernel = tape.recip(one_plus)?;
    let kernel = tape.reshape(kernel, &[n, k, kc])?;
    let w = tape.reshape(theta, &[n, 1, k])?;
    let num = tape.matmul(w, kernel)?;
    let num = tape.reshape(num, &[n, kc])?;
    normalize_rows(tape, num)
}

fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let total = tape.sum_axis(x, 1)?;
    let inv = tape.recip(total)?;
    tape.mul_col(x, inv)
}

/// Full output of one pass of the clustering head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub dc: f64,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub centers: Centers,
    pub knn: Vec<Vec<usize>>,
    pub theta: Tensor,
    pub q: Tensor,
    pub labels: Vec<usize>,
}

/// How centers and memberships are formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadMode {
    /// Density-peak centers and `k`-neighbor weighting; `k = 0` means each point is its own neighbor.
    DensityPeaks { k: usize, neighbor_fraction: f64 },
    /// Farthest-point-seeded Lloyd centers and plain Student-t memberships.
    Plain,
}

/// Runs the head on `z` for `clusters` clusters.
pub fn assign(z: &Tensor, clusters: usize, mode: HeadMode) -> Result<ClusterState> {
    let n = z.rows();
    match mode {
        HeadMode::DensityPeaks { k, neighbor_fraction } => {
            let bw = bandwidth_dc(z, neighbor_fraction)?;
            let rho = densities(z, bw.dc)?;
            let delta = min_dist_delta(z, &rho)?;
            let gamma = decision_values(&rho, &delta);
            let centers = select_centers(&rho, &delta, z, clusters)?;
            let k = k.min(n - 1);
            let (knn, theta) = if k == 0 {
                (self_neighbors(n), uniform_weights(n, 1)?)
            } else {
                let knn = knn_indices(z, k)?;
                let theta = neighbor_weights(z, &knn)?;
                (knn, theta)
            };
            let q = soft_assign(z, &centers.coords, &knn, &theta)?;
            let labels = hard_labels(&q);
            Ok(ClusterState {
                dc: bw.dc,
                rho,
                delta,
                gamma,
                centers,
                knn,
                theta,
                q,
                labels,
            })
        }
        HeadMode::Plain => {
            let coords = lloyd_centers(z, clusters, LLOYD_ITERS)?;
            let knn = self_neighbors(n);
            let theta = uniform_weights(n, 1)?;
            let q = soft_assign(z, &coords, &knn, &theta)?;
            let labels = hard_labels(&q);
            Ok(ClusterState {
                dc: 0.0,
                rho: Vec::new(),
                delta: Vec::new(),
                gamma: Vec::new(),
                centers: Centers {
                    indices: Vec::new(),
                    coords,
                },
                knn,
                theta,
                q,
                labels,
            })
        }
    }
}

/// Lloyd iteration cap used by [`HeadMode::Plain`].
pub const LLOYD_ITERS: usize = 100;

fn nearest_center(x: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for t in 0..centers.rows() {
        let d = sq_dist(x, centers.row(t));
        if d < best.1 {
            best = (t, d);
        }
    }
    best
}

/// One Lloyd refinement loop; empty clusters keep their previous center.
fn lloyd(z: &Tensor, mut centers: Tensor, iters: usize) -> (Tensor, Vec<usize>, f64) {
    let (n, d, k) = (z.rows(), z.cols(), centers.rows());
    let mut labels = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (t, _) = nearest_center(z.row(i), &centers);
            if *label != t {
                *label = t;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &t) in labels.iter().enumerate() {
            counts[t] += 1;
            for (s, v) in sums[t * d..(t + 1) * d].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for t in 0..k {
            if counts[t] > 0 {
                for (c, s) in centers.row_mut(t).iter_mut().zip(&sums[t * d..(t + 1) * d]) {
                    *c = s / counts[t] as f64;
                }
            }
        }
    }
    let inertia = (0..n).map(|i| nearest_center(z.row(i), &centers).1).sum();
    let labels = (0..n).map(|i| nearest_center(z.row(i), &centers).0).collect();
    (centers, labels, inertia)
}

/// Lloyd centers seeded deterministically by farthest-point traversal from the point nearest the mean.
pub fn lloyd_centers(z: &Tensor, clusters: usize, iters: usize) -> Result<Tensor> {
    check_points("lloyd_centers", z, 1)?;
    let n = z.rows();
    if clusters == 0 || clusters > n {
        return Err(Error::invalid(format!("need 1 <= K <= n, got K = {} for n = {}", clusters, n)));
    }
    let d = z.cols();
    let mut mean = vec![0.0; d];
    for row in z.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let first = (0..n)
        .min_by(|&a, &b| sq_dist(z.row(a), &mean).total_cmp(&sq_dist(z.row(b), &mean)))
        .expect("n >= 1");
    let mut chosen = vec![first];
    let mut gap: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(first))).collect();
    while chosen.len() < clusters {
        let next = (0..n)
            .max_by(|&a, &b| gap[a].total_cmp(&gap[b]).then(b.cmp(&a)))
            .expect("n >= 1");
        chosen.push(next);
        for (i, g) in gap.iter_mut().enumerate() {
            *g = g.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    let (centers, _, _) = lloyd(z, z.select_rows(&chosen)?, iters);
    Ok(centers)
}

/// Result of the best k-means restart.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Tensor,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// k-means++ seeding plus Lloyd iterations, keeping the lowest-inertia restart.
pub fn kmeans(z: &Tensor, clusters: usize, restarts: usize, iters: usize, rng: &mut impl Rng) -> Result<KMeans> {
    check_points("kmeans", z, 1)?;
    let n = z.rows();
    if clusters == 0 || clusters > n || restarts == 0 {
        return Err(Error::invalid(format!(
            "need 1 <= K <= n and at least one restart, got K = {}, n = {}, restarts = {}",
            clusters, n, restarts
        )));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let mut chosen = vec![rng.random_range(0..n)];
        let mut gap: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
        while chosen.len() < clusters {
            let total: f64 = gap.iter().sum();
            let next = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, g) in gap.iter().enumerate() {
                    if r < *g {
                        pick = i;
                        break;
                    }
                    r -= g;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            chosen.push(next);
            for (i, g) in gap.iter_mut().enumerate() {
                *g = g.min(sq_dist(z.row(i), z.row(next)));
            }
        }
        let (centers, labels, inertia) = lloyd(z, z.select_rows(&chosen)?, iters);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans {
                centers,
                labels,
                inertia,
            });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Greedy nearest-coordinate matching of new centers onto previous ones.
///
/// Returns `perm` with `perm[t]` the new center that takes over slot `t`.
pub fn match_centers(previous: &Tensor, current: &Tensor) -> Result<Vec<usize>> {
    if previous.shape() != current.shape() {
        return Err(Error::shape(
            "match_centers",
            format!("{:?} vs {:?}", previous.shape(), current.shape()),
        ));
    }
    let k = previous.rows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
    for t in 0..k {
        for s in 0..k {
            pairs.push((sq_dist(previous.row(t), current.row(s)), t, s));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; k];
    let mut taken = vec![false; k];
    for (_, t, s) in pairs {
        if perm[t] == usize::MAX && !taken[s] {
            perm[t] = s;
            taken[s] = true;
        }
    }
    Ok(perm)
}

/// Matching of new clusters onto previous ones that maximizes shared members.
///
/// Returns `perm` with `perm[t]` the new cluster that takes over slot `t`.
pub fn match_labels(previous: &[usize], current: &[usize], clusters: usize) -> Result<Vec<usize>> {
    if previous.len() != current.len() {
        return Err(Error::shape(
            "match_labels",
            format!("label vectors of length {} and {}", previous.len(), current.len()),
        ));
    }
    if previous.iter().chain(current).any(|&l| l >= clusters) {
        return Err(Error::invalid(format!("labels must lie below K = {}", clusters)));
    }
    let mut cost = Tensor::zeros(vec![clusters, clusters])?;
    for (&t, &s) in previous.iter().zip(current) {
        cost.row_mut(t)[s] -= 1.0;
    }
    crate::metrics::hungarian(&cost)
}
