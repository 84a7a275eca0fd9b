use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};

const RESTARTS: usize = 10;
const MAX_ITERS: usize = 100;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding; the best of several restarts by
/// inertia. Returns one cluster label per point.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(AttrError::InvalidInput(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RESTARTS {
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points.iter().map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min)).collect();
            let total: f64 = d.iter().sum();
            let next = if total > 0.0 {
                let mut r = rng.random_range(0.0..total);
                d.iter().position(|&w| {
                    r -= w;
                    r < 0.0
                })
                .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
        }
        let mut labels = vec![0; n];
        for iter in 0..MAX_ITERS {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let l = (0..k).min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b]))).unwrap_or(0);
                changed |= l != labels[i];
                labels[i] = l;
            }
            if iter > 0 && !changed {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.map(|(_, l)| l).unwrap_or_default())
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AttrError::InvalidInput("labelings must be non-empty and of equal length".into()));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c as f64)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum::<usize>() as f64)).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum::<usize>() as f64)).sum();
    let expected = rows * cols / choose2(a.len() as f64);
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return Ok(if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// ARI of `predicted` against `count` random permutations of `truth`.
pub fn permutation_baseline<R: Rng + ?Sized>(predicted: &[usize], truth: &[usize], count: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut shuffled = truth.to_vec();
    (0..count)
        .map(|_| {
            shuffled.shuffle(rng);
            adjusted_rand_index(predicted, &shuffled)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub ari: f64,
    pub baseline_mean: f64,
    /// 99th percentile of the permutation baseline.
    pub baseline_p99: f64,
    pub permutations: usize,
}

/// Clusters 2-D points into as many groups as `truth` has labels and
/// compares against a label-permutation baseline.
pub fn cluster_agreement<R: Rng + ?Sized>(points: &[[f64; 2]], truth: &[usize], permutations: usize, rng: &mut R) -> Result<ClusterReport> {
    let k = truth.iter().collect::<std::collections::BTreeSet<_>>().len();
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    let labels = kmeans(&pts, k, rng)?;
    let ari = adjusted_rand_index(&labels, truth)?;
    let mut base = permutation_baseline(&labels, truth, permutations, rng)?;
    base.sort_by(f64::total_cmp);
    let baseline_mean = base.iter().sum::<f64>() / base.len().max(1) as f64;
    let baseline_p99 = base.get(((base.len() as f64 * 0.99).ceil() as usize).saturating_sub(1)).copied().unwrap_or(0.0);
    Ok(ClusterReport { ari, baseline_mean, baseline_p99, permutations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_labelings_score_one_up_to_renaming() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        let b = [2, 2, 0, 0, 1, 1, 1];
        assert!((adjusted_rand_index(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_ari_value() {
        // Contingency [[2,1],[0,2]]: index 1+1=2, rows 3+1=4, cols 1+3=4, pairs 10.
        let a = [0, 0, 0, 1, 1];
        let b = [0, 0, 1, 1, 1];
        let expected = 4.0 * 4.0 / 10.0;
        let want = (2.0 - expected) / (4.0 - expected);
        assert!((adjusted_rand_index(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn separated_blobs_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..20 {
                pts.push([center[0] + rng.random_range(-1.0..1.0), center[1] + rng.random_range(-1.0..1.0)]);
                truth.push(c);
            }
        }
        let r = cluster_agreement(&pts, &truth, 100, &mut rng).unwrap();
        assert!((r.ari - 1.0).abs() < 1e-12);
        assert!(r.baseline_p99 < 0.2 && r.baseline_mean.abs() < 0.05);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kmeans(&[vec![0.0]], 2, &mut rng).is_err());
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }
}
