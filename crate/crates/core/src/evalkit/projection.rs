use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{AttrError, Result};

/// Relative eigenvalue below which a principal direction counts as empty.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each principal component.
    pub variances: [f64; 2],
}

/// Projects onto the top two principal components. Each component's sign is
/// chosen so the projected coordinate of largest magnitude is positive.
pub fn project2d(embeddings: &[Vec<f64>]) -> Result<Projection> {
    let n = embeddings.len();
    if n < 3 {
        return Err(AttrError::InvalidInput(format!("projection needs at least 3 points, got {n}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(AttrError::InvalidInput("embeddings must share a non-zero dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| embeddings[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let second = if d > 1 { eig.eigenvalues[order[1]].max(0.0) } else { 0.0 };

    let component = |k: usize| -> Vec<f64> {
        let v = eig.eigenvectors.column(order[k]);
        let mut coords: Vec<f64> = (0..n).map(|i| centered.row(i).dot(&v.transpose())).collect();
        let big = coords.iter().copied().fold(0.0f64, |a, c| if c.abs() > a.abs() { c } else { a });
        if big < 0.0 {
            coords.iter_mut().for_each(|c| *c = -*c);
        }
        coords
    };

    if top <= 0.0 || second <= RANK_TOL * top {
        let layout = if top > 0.0 { component(0) } else { vec![0.0; n] };
        return Err(AttrError::DegenerateRank { variances: [top, second], layout });
    }
    let (c0, c1) = (component(0), component(1));
    Ok(Projection { points: c0.into_iter().zip(c1).map(|(a, b)| [a, b]).collect(), variances: [top, second] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centered_planar_points_are_recovered_up_to_rotation() {
        let pts = [[2.0, 0.5], [-1.0, 1.5], [-1.5, -0.5], [0.5, -1.5]];
        let emb: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0], p[1]]).collect();
        let p = project2d(&emb).unwrap();
        // Pairwise distances survive a rotation or reflection.
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                let d1 = ((p.points[i][0] - p.points[j][0]).powi(2) + (p.points[i][1] - p.points[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-10);
            }
        }
        // Three dimensions with a zero third axis reconstruct exactly too.
        let emb3: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0], 0.0, p[1]]).collect();
        let q = project2d(&emb3).unwrap();
        for (a, b) in p.points.iter().zip(&q.points) {
            assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_points_report_degenerate_rank() {
        let emb = vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![3.0, 6.0, 9.0]];
        match project2d(&emb) {
            Err(AttrError::DegenerateRank { layout, variances }) => {
                assert_eq!(layout.len(), 3);
                assert!(variances[0] > 0.0);
                let unit = 14f64.sqrt() / 3.0;
                for (got, want) in layout.iter().zip([-4.0, -1.0, 5.0]) {
                    assert!((got - want * unit).abs() < 1e-9, "{layout:?}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_points_are_rejected() {
        assert!(project2d(&[vec![1.0], vec![2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn translation_does_not_change_the_projection(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 5..12),
            shift in proptest::collection::vec(-50.0f64..50.0, 4),
        ) {
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            match (project2d(&pts), project2d(&moved)) {
                (Ok(a), Ok(b)) => {
                    prop_assume!(a.variances[0] > 1.001 * a.variances[1] && a.variances[1] > 1e-3);
                    for (x, y) in a.points.iter().zip(&b.points) {
                        prop_assert!((x[0] - y[0]).abs() < 1e-6 && (x[1] - y[1]).abs() < 1e-6);
                    }
                }
                (Err(_), _) | (_, Err(_)) => {}
            }
        }
    }
}
