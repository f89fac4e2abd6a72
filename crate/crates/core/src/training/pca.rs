//! Two-component PCA by power iteration with deflation, for representation
//! diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;

/// Top-2 principal projection of a representation batch.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// One `(pc1, pc2)` pair per input row.
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
    /// Fraction of total variance carried by the two components.
    pub explained_variance: f64,
}

/// Covariance-times-vector without forming the covariance matrix:
/// `X^T (X v) / (n - 1)` over the centered data.
fn cov_matvec(centered: &Tensor, v: &[f64]) -> Vec<f64> {
    let (n, d) = (centered.shape()[0], centered.shape()[1]);
    let mut xv = vec![0.0; n];
    for r in 0..n {
        let row = centered.row(r);
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * v[j];
        }
        xv[r] = acc;
    }
    let mut out = vec![0.0; d];
    for r in 0..n {
        let row = centered.row(r);
        let s = xv[r];
        for j in 0..d {
            out[j] += row[j] * s;
        }
    }
    let denom = (n - 1) as f64;
    for o in out.iter_mut() {
        *o /= denom;
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// First-nonzero-loading-positive sign convention.
fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Deterministic orthonormal fallback direction for rank-deficient data.
fn orthogonal_fallback(v1: &[f64]) -> Vec<f64> {
    let d = v1.len();
    let mut best = 0;
    for j in 1..d {
        if v1[j].abs() < v1[best].abs() {
            best = j;
        }
    }
    let mut v = vec![0.0; d];
    v[best] = 1.0;
    let dot: f64 = v.iter().zip(v1).map(|(a, b)| a * b).sum();
    for (x, &b) in v.iter_mut().zip(v1) {
        *x -= dot * b;
    }
    normalize(&mut v);
    fix_sign(&mut v);
    v
}

fn power_iterate(
    centered: &Tensor,
    deflate: Option<(&[f64], f64)>,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let d = centered.shape()[1];
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    for _ in 0..POWER_MAX_ITERS {
        let mut w = cov_matvec(centered, &v);
        if let Some((v1, lambda1)) = deflate {
            let proj: f64 = v1.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wj, &v1j) in w.iter_mut().zip(v1) {
                *wj -= lambda1 * proj * v1j;
            }
        }
        let norm = normalize(&mut w);
        if norm < 1e-300 {
            // Rank-deficient residual: eigenvalue 0 in this subspace.
            let v2 = match deflate {
                Some((v1, _)) => orthogonal_fallback(v1),
                None => orthogonal_fallback(&vec![0.0; d]),
            };
            return (v2, 0.0);
        }
        // Sign-align before measuring the step.
        let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        let delta = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a * sign - b).abs())
            .fold(0.0f64, f64::max);
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    // Rayleigh quotient for the eigenvalue.
    let mut av = cov_matvec(centered, &v);
    if let Some((v1, lambda1)) = deflate {
        let proj: f64 = v1.iter().zip(&v).map(|(a, b)| a * b).sum();
        for (wj, &v1j) in av.iter_mut().zip(v1) {
            *wj -= lambda1 * proj * v1j;
        }
    }
    let lambda: f64 = av.iter().zip(&v).map(|(a, b)| a * b).sum();
    fix_sign(&mut v);
    (v, lambda.max(0.0))
}

/// Project mean-centered rows onto the top-2 eigenvectors of the sample
/// covariance. Deterministic (fixed internal start vector seed, sign
/// convention: first nonzero loading positive).
pub fn pca_project(reps: &Tensor) -> Result<PcaProjection> {
    if reps.rank() != 2 {
        return Err(Error::Dimension("pca: want an N x F matrix".into()));
    }
    let (n, d) = (reps.shape()[0], reps.shape()[1]);
    if n < 3 {
        return Err(Error::Data(alloc::format!("pca needs at least 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::Dimension("pca needs at least 2 feature dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += reps.at(r, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = reps.clone();
    for r in 0..n {
        for j in 0..d {
            centered.data_mut()[r * d + j] -= mean[j];
        }
    }
    let trace: f64 =
        centered.data().iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if trace < 1e-30 {
        return Err(Error::Data("pca: data has zero variance (rank 0)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca0_57a7);
    let (v1, l1) = power_iterate(&centered, None, &mut rng);
    let (v2, l2) = power_iterate(&centered, Some((&v1, l1)), &mut rng);

    let coords = (0..n)
        .map(|r| {
            let row = centered.row(r);
            let p1: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
            let p2: f64 = row.iter().zip(&v2).map(|(a, b)| a * b).sum();
            [p1, p2]
        })
        .collect();
    Ok(PcaProjection {
        coords,
        eigenvalues: [l1, l2],
        explained_variance: (l1 + l2) / trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Cyclic Jacobi eigensolver, as an independent oracle for small
    /// covariance matrices.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[i][j] * a[i][j];
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-18 {
                        continue;
                    }
                    let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    fn sample_cov(data: &Tensor) -> Vec<Vec<f64>> {
        let (n, d) = (data.shape()[0], data.shape()[1]);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += data.at(r, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![vec![0.0; d]; d];
        for r in 0..n {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (data.at(r, i) - mean[i]) * (data.at(r, j) - mean[j]);
                }
            }
        }
        for row in cov.iter_mut() {
            for v in row.iter_mut() {
                *v /= (n - 1) as f64;
            }
        }
        cov
    }

    #[test]
    fn eigenvalues_match_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = Tensor::new(&[20, 5], (0..100).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let proj = pca_project(&data).unwrap();
        let ev = jacobi_eigenvalues(sample_cov(&data));
        assert!((proj.eigenvalues[0] - ev[0]).abs() < 1e-8 * ev[0].max(1.0));
        assert!((proj.eigenvalues[1] - ev[1]).abs() < 1e-8 * ev[0].max(1.0));
    }

    #[test]
    fn two_dimensional_data_is_recovered_up_to_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 50;
        let mut data = Vec::with_capacity(n * 2);
        for _ in 0..n {
            data.push(rng.random_range(-3.0..3.0));
            data.push(rng.random_range(-1.0..1.0));
        }
        let t = Tensor::new(&[n, 2], data).unwrap();
        let proj = pca_project(&t).unwrap();
        assert!((proj.explained_variance - 1.0).abs() < 1e-9);
        // A projection onto an orthonormal basis preserves pairwise
        // distances of the centered data.
        let mut mean = [0.0; 2];
        for r in 0..n {
            mean[0] += t.at(r, 0) / n as f64;
            mean[1] += t.at(r, 1) / n as f64;
        }
        for a in 0..5 {
            for b in 5..10 {
                let orig = ((t.at(a, 0) - t.at(b, 0)).powi(2) + (t.at(a, 1) - t.at(b, 1)).powi(2))
                    .sqrt();
                let proj_d = ((proj.coords[a][0] - proj.coords[b][0]).powi(2)
                    + (proj.coords[a][1] - proj.coords[b][1]).powi(2))
                .sqrt();
                assert!((orig - proj_d).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn duplicated_rows_project_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let base: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut doubled = Vec::new();
        for r in 0..10 {
            doubled.extend_from_slice(&base[r * 3..(r + 1) * 3]);
            doubled.extend_from_slice(&base[r * 3..(r + 1) * 3]);
        }
        let t = Tensor::new(&[20, 3], doubled).unwrap();
        let proj = pca_project(&t).unwrap();
        for r in 0..10 {
            assert_eq!(proj.coords[2 * r], proj.coords[2 * r + 1]);
        }
    }

    #[test]
    fn isotropic_gaussian_top2_share() {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (n, d) = (8192, 128);
        let data: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t = Tensor::new(&[n, d], data).unwrap();
        let proj = pca_project(&t).unwrap();
        // Expectation is 2/d; finite-sample top eigenvalues are inflated by
        // roughly (1 + sqrt(d/n))^2, so allow a generous band.
        let ideal = 2.0 / d as f64;
        assert!(
            proj.explained_variance > 0.5 * ideal && proj.explained_variance < 2.0 * ideal,
            "top-2 share {} vs ideal {}",
            proj.explained_variance,
            ideal
        );
    }

    #[test]
    fn rank_zero_data_errors() {
        let t = Tensor::filled(&[5, 4], 3.3);
        assert!(matches!(pca_project(&t), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let data: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[12, 5], data).unwrap();
        let a = pca_project(&t).unwrap();
        let b = pca_project(&t).unwrap();
        assert_eq!(a.coords, b.coords);
    }
}
