//! Clustering accuracy under the best label matching, and normalized mutual information.

use std::collections::BTreeMap;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Minimum-cost perfect matching on a square matrix.
///
/// Returns `assignment` with `assignment[row] = column`.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    if cost.rank() != 2 || cost.rows() != cost.cols() {
        return Err(Error::shape("hungarian", format!("cost matrix must be square, got {:?}", cost.shape())));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("hungarian cost matrix".into()));
    }
    let n = cost.rows();
    // Shortest augmenting paths with row/column potentials; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if !used[c] {
                    let cur = cost.at(r0 - 1, c - 1) - u[r0] - v[c];
                    if cur < min_v[c] {
                        min_v[c] = cur;
                        way[c] = col0;
                    }
                    if min_v[c] < delta {
                        delta = min_v[c];
                        col1 = c;
                    }
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_v[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for c in 1..=n {
        assignment[owner[c] - 1] = c - 1;
    }
    Ok(assignment)
}

fn check_lengths(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            op,
            format!("label vectors must be nonempty and equally long, got {} and {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Dense re-indexing of the distinct values in `labels`.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

fn contingency(predicted: &[usize], truth: &[usize]) -> (Vec<Vec<usize>>, usize, usize) {
    let (p, kp) = compact(predicted);
    let (t, kt) = compact(truth);
    let mut table = vec![vec![0usize; kt]; kp];
    for (&a, &b) in p.iter().zip(&t) {
        table[a][b] += 1;
    }
    (table, kp, kt)
}

/// Fraction of samples correct under the best one-to-one cluster-to-class mapping.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths("accuracy", predicted, truth)?;
    let (table, kp, kt) = contingency(predicted, truth);
    let k = kp.max(kt);
    let mut cost = vec![0.0; k * k];
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i * k + j] = -(c as f64);
        }
    }
    let assignment = hungarian(&Tensor::new(vec![k, k], cost)?)?;
    let matched: usize = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < kp && j < kt)
        .map(|(i, &j)| table[i][j])
        .sum();
    Ok(matched as f64 / predicted.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(truth; predicted) / max(H(truth), H(predicted))`, natural logarithms.
pub fn nmi(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths("nmi", predicted, truth)?;
    let n = predicted.len() as f64;
    let (table, kp, kt) = contingency(predicted, truth);
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..kt).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(rows.iter().cloned(), n);
    let ht = entropy(cols.iter().cloned(), n);
    let denom = hp.max(ht);
    if denom == 0.0 {
        // Both constant: identical partitions iff each has a single block.
        return Ok(if kp == kt { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_favoring_cost() {
        let mut c = Tensor::ones(vec![4, 4]).unwrap();
        for i in 0..4 {
            c.row_mut(i)[i] = 0.0;
        }
        assert_eq!(hungarian(&c).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn anti_diagonal_two_by_two() {
        let c = Tensor::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap(), vec![1, 0]);
        assert!(hungarian(&Tensor::zeros(vec![2, 3]).unwrap()).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[2, 0, 1, 0], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 1, 0], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn accuracy_with_more_clusters_than_classes() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[3, 3, 3, 3], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-15);
        assert_eq!(nmi(&[4, 4], &[7, 7]).unwrap(), 1.0);
    }
}
