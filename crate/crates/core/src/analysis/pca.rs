//! PCA by cyclic Jacobi rotations, and a 2D logistic separability score.

use serde::{Deserialize, Serialize};

use super::{check_rect, AnalysisError, Result};

/// Eigen-decomposition of a symmetric `n x n` row-major matrix. Returns
/// eigenvalues in descending order and matching unit eigenvectors.
pub fn jacobi_eigen(mat: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Up to two orthonormal principal axes.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Coordinates on the kept axes; missing axes read as 0.
    pub projections: Vec<[f64; 2]>,
    /// Fewer than two non-negligible components.
    pub rank_deficient: bool,
}

/// Mean-centered PCA keeping the top two components.
pub fn pca2(rows: &[Vec<f64>]) -> Result<PcaResult> {
    if rows.len() < 3 {
        return Err(AnalysisError::TooFewSamples { need: 3, got: rows.len() });
    }
    let d = check_rect(rows)?;
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n - 1.0;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (values, vectors) = jacobi_eigen(&cov, d);
    let trace: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let kept: Vec<usize> = (0..d.min(2))
        .filter(|&i| values[i] > 1e-12 * trace.max(f64::MIN_POSITIVE))
        .collect();
    let components: Vec<Vec<f64>> = kept.iter().map(|&i| vectors[i].clone()).collect();
    let projections = rows
        .iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (k, c) in components.iter().enumerate() {
                p[k] = c.iter().zip(r).zip(&mean).map(|((c, x), m)| c * (x - m)).sum();
            }
            p
        })
        .collect();
    if kept.len() < 2 {
        log::warn!("covariance has rank {} < 2", kept.len());
    }
    Ok(PcaResult {
        mean,
        eigenvalues: kept.iter().map(|&i| values[i]).collect(),
        rank_deficient: kept.len() < 2,
        components,
        projections,
    })
}

fn solve3(h: [[f64; 3]; 3], g: [f64; 3]) -> [f64; 3] {
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&h[i]);
        m[i][3] = g[i];
    }
    for c in 0..3 {
        let piv = (c..3).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        m.swap(c, piv);
        for r in 0..3 {
            if r != c && m[c][c] != 0.0 {
                let f = m[r][c] / m[c][c];
                for k in c..4 {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
}

/// Training accuracy of a ridge-regularized logistic fit in 2D.
pub fn separability(points: &[[f64; 2]], labels: &[bool]) -> Result<f64> {
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(AnalysisError::SingleClass);
    }
    let x: Vec<[f64; 3]> = points.iter().map(|p| [1.0, p[0], p[1]]).collect();
    let mut w = [0.0; 3];
    let lambda = 1e-3;
    for _ in 0..100 {
        let mut g = [0.0; 3];
        let mut h = [[0.0; 3]; 3];
        for (xi, &yi) in x.iter().zip(labels) {
            let z: f64 = (0..3).map(|k| w[k] * xi[k]).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let y = if yi { 1.0 } else { 0.0 };
            for a in 0..3 {
                g[a] += (y - p) * xi[a];
                for b in 0..3 {
                    h[a][b] += p * (1.0 - p) * xi[a] * xi[b];
                }
            }
        }
        for a in 0..3 {
            g[a] -= lambda * w[a];
            h[a][a] += lambda;
        }
        let step = solve3(h, g);
        let mut delta = 0.0;
        for a in 0..3 {
            w[a] += step[a];
            delta += step[a].abs();
        }
        if !delta.is_finite() || delta < 1e-12 {
            break;
        }
    }
    let correct = x
        .iter()
        .zip(labels)
        .filter(|(xi, &yi)| ((0..3).map(|k| w[k] * xi[k]).sum::<f64>() > 0.0) == yi)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPca {
    pub pca: PcaResult,
    pub separability: f64,
}

/// PCA of representations labelled positive (`true`) or negative, with the
/// separability of the two groups in the projected plane.
pub fn pca_pairs(rows: &[Vec<f64>], labels: &[bool]) -> Result<PairPca> {
    let pca = pca2(rows)?;
    let separability = separability(&pca.projections, labels)?;
    Ok(PairPca { pca, separability })
}

pub fn projections_csv(p: &PairPca, labels: &[bool]) -> String {
    let mut out = String::from("pc1,pc2,label\n");
    for (xy, &l) in p.pca.projections.iter().zip(labels) {
        out.push_str(&format!("{},{},{}\n", xy[0], xy[1], if l { "pos" } else { "neg" }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal() {
        let (vals, vecs) = jacobi_eigen(&[1.0, 0.0, 0.0, 3.0], 2);
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs[0].iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn axis_aligned_2d_is_recovered() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![3.0 * (i as f64 - 4.5), if i % 2 == 0 { 1.0 } else { -1.0 }])
            .collect();
        let p = pca2(&rows).unwrap();
        for (r, xy) in rows.iter().zip(&p.projections) {
            let back: Vec<f64> = (0..2)
                .map(|j| p.mean[j] + xy[0] * p.components[0][j] + xy[1] * p.components[1][j])
                .collect();
            assert!((back[0] - r[0]).abs() < 1e-9 && (back[1] - r[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_one_is_flagged() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let p = pca2(&rows).unwrap();
        assert!(p.rank_deficient);
        assert_eq!(p.components.len(), 1);
    }

    #[test]
    fn separated_clusters() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let j = (i as f64 * 0.37).sin() * 0.1;
            rows.push(vec![5.0 + j, j, 1.0]);
            labels.push(true);
            rows.push(vec![-5.0 - j, j, 1.0]);
            labels.push(false);
        }
        let r = pca_pairs(&rows, &labels).unwrap();
        assert!(r.separability >= 0.95);
    }
}
