//! Distribution samplers used by the Gibbs updates: multivariate normal,
//! inverse gamma, inverse Wishart, Dirichlet, and categorical draws.
//!
//! Parameterizations (matching the model's conjugate updates):
//! * inverse gamma `IG(a, b)` has density ∝ x^{-a-1} exp(-b/x) — `b` is a
//!   rate — with mean `b / (a - 1)` for `a > 1`;
//! * inverse Wishart `IW(n, S)` has mean `S / (n - d - 1)` for `n > d + 1`.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::numkit::mat::{invert_lower, Cholesky, Mat, SpdMatrix};
use crate::numkit::rng::RngStream;

/// Draw from N(mean, A) given the lower Cholesky factor of A: `mean + L z`.
pub fn sample_mvn(rng: &mut RngStream, mean: &[f64], cov_chol: &Cholesky) -> Vec<f64> {
    let n = mean.len();
    debug_assert_eq!(cov_chol.dim(), n);
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let l = cov_chol.lower();
    let mut out = mean.to_vec();
    for i in 0..n {
        for k in 0..=i {
            out[i] += l[(i, k)] * z[k];
        }
    }
    out
}

/// Draw from IG(shape, rate) by inverting a gamma draw.
pub fn sample_inverse_gamma(rng: &mut RngStream, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "inverse gamma needs positive shape and rate, got shape={shape}, rate={rate}"
        )));
    }
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidParameter(format!("gamma sampler: {e}")))?;
    let g: f64 = gamma.sample(rng);
    Ok(1.0 / g)
}

/// Draw from IW(dof, scale) via the Bartlett decomposition.
///
/// With `scale = Ls Ls^T` and `A` lower triangular where `A_ii^2 ~ χ²_{dof-i}`
/// (zero-based `i`) and `A_ij ~ N(0,1)` below the diagonal, the draw is
/// `(Ls A^{-T})(Ls A^{-T})^T`. Requires `dof > d - 1` so every χ² degree of
/// freedom is positive.
pub fn sample_inverse_wishart(rng: &mut RngStream, dof: f64, scale: &SpdMatrix) -> Result<Mat> {
    let d = scale.dim();
    if dof <= d as f64 - 1.0 {
        return Err(Error::InvalidParameter(format!(
            "inverse Wishart needs dof > dim - 1, got dof={dof} with dim={d}"
        )));
    }
    let ls = scale.cholesky()?.lower().clone();
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::InvalidParameter(format!("chi-squared sampler: {e}")))?;
        let c: f64 = chi.sample(rng);
        a[(i, i)] = c.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let a_inv_t = invert_lower(&a)?.transpose();
    let m = ls.matmul(&a_inv_t);
    let mut omega = m.matmul(&m.transpose());
    omega.symmetrize_mut();
    Ok(omega)
}

/// Draw from Dirichlet(alpha) by normalizing independent gamma draws.
pub fn sample_dirichlet(rng: &mut RngStream, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "Dirichlet needs a non-empty vector of positive concentrations, got {alpha:?}"
        )));
    }
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let gamma = Gamma::new(a, 1.0)
            .map_err(|e| Error::InvalidParameter(format!("gamma sampler: {e}")))?;
        draws.push(gamma.sample(rng) as f64);
    }
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All gamma draws underflowed to zero (possible for tiny alphas);
        // fall back to the mean rather than returning NaNs.
        let asum: f64 = alpha.iter().sum();
        return Ok(alpha.iter().map(|&a| a / asum).collect());
    }
    for v in &mut draws {
        *v /= total;
    }
    Ok(draws)
}

/// Draw a zero-based index with the given probabilities (assumed to sum to
/// one up to rounding) by inverting the cumulative sum.
pub fn sample_categorical(rng: &mut RngStream, probs: &[f64]) -> usize {
    debug_assert!(!probs.is_empty());
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (idx, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(id: u64) -> RngStream {
        RngStream::new(20_240_817, id)
    }

    #[test]
    fn mvn_matches_target_moments() {
        let cov = SpdMatrix::new(Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]])).unwrap();
        let chol = cov.cholesky().unwrap();
        let mean = [1.0, -2.0];
        let mut rng = stream(1);
        let n = 200_000;
        let mut m = [0.0f64; 2];
        let mut s = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let x = sample_mvn(&mut rng, &mean, &chol);
            m[0] += x[0];
            m[1] += x[1];
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        let nf = n as f64;
        // Means: SE = sqrt(var/n); 4 SE bounds.
        assert!((m[0] / nf - 1.0).abs() < 4.0 * (4.0f64 / nf).sqrt());
        assert!((m[1] / nf + 2.0).abs() < 4.0 * (3.0f64 / nf).sqrt());
        assert!((s[0][0] / nf - 4.0).abs() < 0.1);
        assert!((s[1][1] / nf - 3.0).abs() < 0.1);
        assert!((s[0][1] / nf - 2.0).abs() < 0.1);
    }

    #[test]
    fn inverse_gamma_matches_known_mean_and_variance() {
        // IG(3, 2): mean = 2/(3-1) = 1, variance = 4/((2^2)(1)) = 1.
        let mut rng = stream(2);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = sample_inverse_gamma(&mut rng, 3.0, 2.0).unwrap();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (1.0f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean}");
        // Variance of an IG(3,·) has heavy tails; loose bound only.
        assert!((var - 1.0).abs() < 0.25, "var {var}");
    }

    #[test]
    fn inverse_gamma_rejects_bad_parameters() {
        let mut rng = stream(3);
        assert!(sample_inverse_gamma(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_inverse_gamma(&mut rng, 1.0, -1.0).is_err());
    }

    #[test]
    fn inverse_wishart_mean_is_scale_over_excess_dof() {
        // IW(n, S) has mean S/(n-d-1); with d=2, n=6, S=[[2,.5],[.5,1]] the
        // mean is S/3.
        let s = SpdMatrix::new(Mat::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]])).unwrap();
        let mut rng = stream(4);
        let n = 100_000;
        let mut acc = Mat::zeros(2, 2);
        for _ in 0..n {
            let draw = sample_inverse_wishart(&mut rng, 6.0, &s).unwrap();
            acc = acc.add(&draw);
        }
        acc.scale_mut(1.0 / n as f64);
        let expect = Mat::from_rows(&[vec![2.0 / 3.0, 0.5 / 3.0], vec![0.5 / 3.0, 1.0 / 3.0]]);
        assert!(
            acc.max_abs_diff(&expect) < 0.02,
            "sample mean {acc:?} vs {expect:?}"
        );
    }

    #[test]
    fn one_dimensional_inverse_wishart_reduces_to_inverse_gamma() {
        // IW(4, 5) on scalars is IG(2, 2.5) with mean 2.5.
        let s = SpdMatrix::new(Mat::from_rows(&[vec![5.0]])).unwrap();
        let mut rng = stream(5);
        let n = 200_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_inverse_wishart(&mut rng, 4.0, &s).unwrap()[(0, 0)];
        }
        let mean = sum / n as f64;
        assert!((mean - 2.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn inverse_wishart_rejects_insufficient_dof() {
        let s = SpdMatrix::new(Mat::identity(3)).unwrap();
        let mut rng = stream(6);
        assert!(sample_inverse_wishart(&mut rng, 2.0, &s).is_err());
        assert!(sample_inverse_wishart(&mut rng, 2.5, &s).is_ok());
    }

    #[test]
    fn dirichlet_matches_mean_and_stays_on_simplex() {
        let alpha = [5.0, 3.0];
        let mut rng = stream(7);
        let n = 200_000;
        let mut sum0 = 0.0;
        for _ in 0..n {
            let p = sample_dirichlet(&mut rng, &alpha).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(p[0] >= 0.0 && p[1] >= 0.0);
            sum0 += p[0];
        }
        // Dir(5,3) first component has mean 0.625, variance 0.625*0.375/9.
        let mean = sum0 / n as f64;
        let se = (0.625 * 0.375 / 9.0 / n as f64).sqrt();
        assert!((mean - 0.625).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn dirichlet_rejects_nonpositive_alpha() {
        let mut rng = stream(8);
        assert!(sample_dirichlet(&mut rng, &[1.0, 0.0]).is_err());
        assert!(sample_dirichlet(&mut rng, &[]).is_err());
    }

    #[test]
    fn categorical_frequencies_match_probabilities() {
        let probs = [0.75, 0.25];
        let mut rng = stream(9);
        let n = 100_000;
        let mut count0 = 0usize;
        for _ in 0..n {
            if sample_categorical(&mut rng, &probs) == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        let se = (0.75 * 0.25 / n as f64).sqrt();
        assert!((freq - 0.75).abs() < 4.0 * se, "freq {freq}");
    }

    #[test]
    fn categorical_is_deterministic_per_stream() {
        let probs = [0.2, 0.3, 0.5];
        let draws_a: Vec<usize> = {
            let mut rng = stream(10);
            (0..50).map(|_| sample_categorical(&mut rng, &probs)).collect()
        };
        let draws_b: Vec<usize> = {
            let mut rng = stream(10);
            (0..50).map(|_| sample_categorical(&mut rng, &probs)).collect()
        };
        assert_eq!(draws_a, draws_b);
    }
}
