//! Training objectives: reconstruction, pairwise-affinity KL, and self-training KL.

use log::warn;
use rayon::prelude::*;

use crate::diffcore::{ops, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to this value before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default tolerance on the achieved perplexity.
pub const PERPLEXITY_TOL: f64 = 1e-5;

const SEARCH_STEPS: usize = 200;

// Stand-in for -inf on masked logits; exp underflows to exactly 0.
const MASKED: f64 = -1e300;

/// Mean over the batch of the squared L2 reconstruction error.
pub fn reconstruction_loss(input: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    if input.shape() != reconstructed.shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", input.shape(), reconstructed.shape()),
        ));
    }
    let n = input.rows();
    let total: f64 = input
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / n as f64)
}

/// Taped [`reconstruction_loss`].
pub fn reconstruction_loss_var(tape: &mut Tape, input: Var, reconstructed: Var) -> Result<Var> {
    let n = tape.shape(input)[0];
    let diff = tape.sub(input, reconstructed)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Perplexity used when none is configured: `min(30, (n - 1) / 3)`.
pub fn default_perplexity(n: usize) -> f64 {
    (30.0f64).min((n as f64 - 1.0) / 3.0)
}

/// Outcome of a per-point bandwidth search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaSearch {
    pub sigma: f64,
    /// `2^H` of the conditional row at `sigma`.
    pub perplexity: f64,
    /// False when the target was unreachable and `sigma` fell back to 1.
    pub converged: bool,
}

/// Conditional probabilities `φ_{j|i}` of one point given squared distances to the others.
pub fn conditional_row(sq_distances: &[f64], sigma: f64) -> Vec<f64> {
    let min = sq_distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = 1.0 / (2.0 * sigma * sigma);
    let mut row: Vec<f64> = sq_distances.iter().map(|&d| (-(d - min) * scale).exp()).collect();
    let total: f64 = row.iter().sum();
    for v in &mut row {
        *v /= total;
    }
    row
}

/// `2^H` with `H` the entropy of `row` in bits.
pub fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    h.exp2()
}

/// Finds σ so that the conditional row has the requested perplexity.
pub fn sigma_search(sq_distances: &[f64], perplexity: f64, tol: f64) -> Result<SigmaSearch> {
    if sq_distances.is_empty() {
        return Err(Error::invalid("sigma_search needs at least one other point"));
    }
    if sq_distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::domain("sigma_search", "distances must be finite and nonnegative"));
    }
    if !(perplexity > 0.0 && tol > 0.0) {
        return Err(Error::invalid(format!(
            "perplexity {} and tolerance {} must be positive",
            perplexity, tol
        )));
    }
    let perp = |log_sigma: f64| perplexity_of(&conditional_row(sq_distances, log_sigma.exp()));
    let fallback = SigmaSearch {
        sigma: 1.0,
        perplexity: perp(0.0),
        converged: false,
    };
    let mut mid = 0.0;
    let mut p = perp(mid);
    if (p - perplexity).abs() <= tol {
        return Ok(SigmaSearch {
            sigma: 1.0,
            perplexity: p,
            converged: true,
        });
    }
    // Perplexity grows with σ; expand until the target is bracketed.
    let (mut lo, mut hi);
    if p < perplexity {
        lo = mid;
        hi = mid + 1.0;
        let mut steps = 0;
        while perp(hi) < perplexity {
            lo = hi;
            hi += 1.0;
            steps += 1;
            if steps > SEARCH_STEPS {
                return Ok(fallback);
            }
        }
    } else {
        hi = mid;
        lo = mid - 1.0;
        let mut steps = 0;
        while perp(lo) > perplexity {
            hi = lo;
            lo -= 1.0;
            steps += 1;
            if steps > SEARCH_STEPS {
                return Ok(fallback);
            }
        }
    }
    for _ in 0..SEARCH_STEPS {
        mid = 0.5 * (lo + hi);
        p = perp(mid);
        if (p - perplexity).abs() <= tol {
            return Ok(SigmaSearch {
                sigma: mid.exp(),
                perplexity: p,
                converged: true,
            });
        }
        if p < perplexity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(fallback)
}

/// Symmetric joint probabilities over the feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct HighAffinities {
    pub phi: Tensor,
    pub sigmas: Vec<f64>,
    /// Rows whose σ search fell back to 1.
    pub unconverged: usize,
}

fn check_points(op: &'static str, z: &Tensor) -> Result<()> {
    if z.rank() != 2 || z.rows() < 2 {
        return Err(Error::shape(op, format!("need at least 2 points as rows, got {:?}", z.shape())));
    }
    Ok(())
}

/// Per-point σ from the squared-distance matrix, excluding the diagonal.
pub fn search_sigmas(sq: &Tensor, perplexity: f64, tol: f64) -> Result<(Vec<f64>, usize)> {
    let n = sq.rows();
    let found = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq.at(i, j)).collect();
            sigma_search(&others, perplexity, tol)
        })
        .collect::<Result<Vec<_>>>()?;
    let unconverged = found.iter().filter(|s| !s.converged).count();
    if unconverged > 0 {
        warn!(
            "sigma search missed perplexity {} on {} of {} points; using sigma = 1 there",
            perplexity, unconverged, n
        );
    }
    Ok((found.iter().map(|s| s.sigma).collect(), unconverged))
}

fn conditional_matrix(sq: &Tensor, sigmas: &[f64]) -> Tensor {
    let n = sq.rows();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq.at(i, j)).collect();
        let row = conditional_row(&others, sigmas[i]);
        let mut it = row.into_iter();
        for j in 0..n {
            if j != i {
                cond[i * n + j] = it.next().expect("n - 1 values");
            }
        }
    }
    Tensor::new(vec![n, n], cond).expect("square")
}

/// `φ_ij = (φ_{j|i} + φ_{i|j}) / 2n` with Gaussian conditionals.
pub fn high_affinities(z_w: &Tensor, perplexity: f64) -> Result<HighAffinities> {
    check_points("high_affinities", z_w)?;
    let n = z_w.rows();
    let sq = ops::cross_sqdist(z_w, z_w)?;
    let (sigmas, unconverged) = search_sigmas(&sq, perplexity, PERPLEXITY_TOL)?;
    let cond = conditional_matrix(&sq, &sigmas);
    let mut phi = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            phi[i * n + j] = (cond.at(i, j) + cond.at(j, i)) / (2.0 * n as f64);
        }
    }
    Ok(HighAffinities {
        phi: Tensor::new(vec![n, n], phi)?,
        sigmas,
        unconverged,
    })
}

fn diagonal_mask(n: usize, on: f64, off: f64) -> Tensor {
    let data = (0..n * n).map(|k| if k / n == k % n { on } else { off }).collect();
    Tensor::new(vec![n, n], data).expect("square")
}

/// Taped joint probabilities with each σ held fixed at the given value.
pub fn high_affinities_var(tape: &mut Tape, z_w: Var, sigmas: &[f64]) -> Result<Var> {
    let n = tape.shape(z_w)[0];
    if sigmas.len() != n {
        return Err(Error::shape(
            "high_affinities",
            format!("{} sigmas for {} points", sigmas.len(), n),
        ));
    }
    let sq = tape.cross_sqdist(z_w, z_w)?;
    let scale = Tensor::new(vec![n], sigmas.iter().map(|s| -1.0 / (2.0 * s * s)).collect())?;
    let scale = tape.constant(scale);
    let logits = tape.mul_col(sq, scale)?;
    let mask = tape.constant(diagonal_mask(n, MASKED, 0.0));
    let logits = tape.add(logits, mask)?;
    let cond = tape.softmax(logits);
    let cond_t = tape.transpose(cond)?;
    let sym = tape.add(cond, cond_t)?;
    Ok(tape.scale(sym, 1.0 / (2.0 * n as f64)))
}

/// Student-t joint probabilities over the clustering space.
pub fn low_affinities(z_v: &Tensor) -> Result<Tensor> {
    check_points("low_affinities", z_v)?;
    let n = z_v.rows();
    let sq = ops::cross_sqdist(z_v, z_v)?;
    let mut kernel = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = 1.0 / (1.0 + sq.at(i, j));
                kernel[i * n + j] = k;
                total += k;
            }
        }
    }
    for k in &mut kernel {
        *k /= total;
    }
    Tensor::new(vec![n, n], kernel)
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `Σ a log(a / b)` with `0 log 0 = 0`.
fn kl(op: &'static str, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(op, a, b)?;
    let mut total = 0.0;
    for (k, (&p, &q)) in a.data().iter().zip(b.data()).enumerate() {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::domain(
                    op,
                    format!("entry {} has mass {} against zero reference", k, p),
                ));
            }
            total += p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln());
        }
    }
    Ok(total)
}

/// `KL(Φ ‖ Ω)`.
pub fn dim_loss(phi: &Tensor, omega: &Tensor) -> Result<f64> {
    kl("dim_loss", phi, omega)
}

/// Taped `KL(Φ ‖ Ω(z_v))` with `Ω` built from `z_v` inside the tape.
///
/// Uses `log ω_ij = -log(1 + d_ij) - log Σ_{a≠b} (1 + d_ab)^-1`, so no floor is needed on `Ω`.
pub fn dim_loss_var(tape: &mut Tape, phi: Var, z_v: Var) -> Result<Var> {
    let n = tape.shape(z_v)[0];
    if tape.shape(phi) != [n, n] {
        return Err(Error::shape(
            "dim_loss",
            format!("affinities {:?} for {} points", tape.shape(phi), n),
        ));
    }
    let floored = tape.clamp_min(phi, PROB_FLOOR);
    let log_phi = tape.ln(floored)?;
    let entropy = tape.mul(phi, log_phi)?;
    let entropy = tape.sum(entropy);

    let sq = tape.cross_sqdist(z_v, z_v)?;
    let one_plus = tape.add_scalar(sq, 1.0);
    let log_kernel = tape.ln(one_plus)?;
    let cross = tape.mul(phi, log_kernel)?;
    let cross = tape.sum(cross);

    let kernel = tape.recip(one_plus)?;
    let off_diag = tape.constant(diagonal_mask(n, 0.0, 1.0));
    let kernel = tape.mul(kernel, off_diag)?;
    let z = tape.sum(kernel);
    let log_z = tape.ln(z)?;
    let mass = tape.sum(phi);
    let norm = tape.mul(mass, log_z)?;

    let partial = tape.add(entropy, cross)?;
    tape.add(partial, norm)
}

/// Sharpened targets `p_it ∝ q_it² / f_t` with `f_t = Σ_i q_it`.
pub fn target_distribution(q: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 {
        return Err(Error::shape("target_distribution", format!("expected n x K, got {:?}", q.shape())));
    }
    let k = q.cols();
    let mut freq = vec![0.0; k];
    for row in q.iter_rows() {
        for (f, v) in freq.iter_mut().zip(row) {
            *f += v;
        }
    }
    if let Some(t) = freq.iter().position(|&f| f <= 0.0) {
        return Err(Error::domain(
            "target_distribution",
            format!("soft cluster {} has zero total assignment", t),
        ));
    }
    let mut p = q.clone();
    for row in p.data_mut().chunks_mut(k) {
        for (v, f) in row.iter_mut().zip(&freq) {
            *v = *v * *v / f;
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(p)
}

/// `KL(P ‖ Q)` summed over all rows.
pub fn clustering_loss(p: &Tensor, q: &Tensor) -> Result<f64> {
    kl("clustering_loss", p, q)
}

/// Taped [`clustering_loss`] with `P` constant.
pub fn clustering_loss_var(tape: &mut Tape, p: &Tensor, q: Var) -> Result<Var> {
    if p.shape() != tape.shape(q) {
        return Err(Error::shape(
            "clustering_loss",
            format!("{:?} vs {:?}", p.shape(), tape.shape(q)),
        ));
    }
    let entropy: f64 = p
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.max(PROB_FLOOR).ln())
        .sum();
    let pv = tape.constant(p.clone());
    let floored = tape.clamp_min(q, PROB_FLOOR);
    let log_q = tape.ln(floored)?;
    let cross = tape.mul(pv, log_q)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    Ok(tape.add_scalar(neg, entropy))
}

/// Loss components and their weighted combinations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_rec: f64,
    pub l_dim: f64,
    pub l_clu: f64,
    pub l_stru: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `l_stru = l_rec + β·l_dim`, `l_total = l_stru + α·l_clu`.
pub fn combine(l_rec: f64, l_dim: f64, l_clu: f64, alpha: f64, beta: f64) -> LossBundle {
    let l_stru = l_rec + beta * l_dim;
    LossBundle {
        l_rec,
        l_dim,
        l_clu,
        l_stru,
        l_total: l_stru + alpha * l_clu,
        alpha,
        beta,
    }
}
