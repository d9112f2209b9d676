//! Empirical-Bayes prior construction and sampler initialization.
//!
//! The pipeline turns a raw panel into a `PriorSpec` and a starting
//! `ModelState` in five steps:
//!
//! 1. stack the panel into an (S·T)×R matrix and extract `L` unrotated
//!    factor loadings by iterated principal-axis factoring of the
//!    correlation matrix, taking uniquenesses as one minus communality;
//! 2. post-multiply the loadings by the inverse of their top L×L block so
//!    the leading block becomes exactly the identity (lower unitriangular);
//! 3. estimate per-cell factor scores by weighted least squares;
//! 4. cluster the scores with restarted k-means++ and relabel clusters in
//!    decreasing size order;
//! 5. rescale scores by the inverse LDL factor of the first cluster's
//!    sample covariance, so that cluster's covariance becomes diagonal, and
//!    read prior centers and scales off the transformed per-cluster moments.
//!
//! The loadings are intentionally not compensated for the score rescaling
//! in step 5; the first sampler sweeps re-cohere the two blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    compute_sweep_stats, ClusterParams, Dataset, FactorLoadings, LatentState, MarkovParams,
    ModelDims, ModelState, PriorSpec, Uniquenesses,
};
use crate::numkit::{dot, invert_lower, symmetric_eigen, Mat, RngStream, SpdMatrix};

/// Everything the pipeline computed along the way. Useful for inspection
/// and reused by `initialize_state`.
#[derive(Debug, Clone)]
pub struct EbArtifacts {
    /// Raw extracted loadings, before the constraint transform.
    pub b_tilde: Mat,
    /// The L×L transform with `b_hat = b_tilde * transform`.
    pub transform: Mat,
    /// Constrained loadings.
    pub b_hat: FactorLoadings,
    /// Preliminary uniquenesses (correlation scale, in [0.005, 1]).
    pub v_hat: Vec<f64>,
    /// Factor scores after the identification rescaling, row per cell.
    pub x_hat: Mat,
    /// Size-ordered cluster labels per cell (zero-based).
    pub labels: Vec<usize>,
    /// Maps each final label to the k-means label it came from.
    pub cluster_order: Vec<usize>,
    /// Unit-lower LDL factor of the first cluster's score covariance.
    pub l1: Mat,
    /// The matching positive diagonal.
    pub d1: Vec<f64>,
}

/// Result of the full pipeline.
#[derive(Debug, Clone)]
pub struct EbInit {
    pub priors: PriorSpec,
    pub state: ModelState,
    pub artifacts: EbArtifacts,
}

const PAF_TOL: f64 = 1e-5;
const PAF_MAX_ITER: usize = 200;
// Accept the state at the iteration cap as long as the communality steps have
// decayed by an order of magnitude; error only when the fit is still taking
// full-size steps, which marks a genuinely stuck or oscillating iteration.
const PAF_PROGRESS_FACTOR: f64 = 0.1;

/// Sample covariance matrix of the columns of `y` (n − 1 denominator).
fn covariance_matrix(y: &Mat) -> Result<Mat> {
    let (n, r) = (y.rows(), y.cols());
    let nf = n as f64;
    let mut means = vec![0.0; r];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(y.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= nf;
    }
    let mut cov = Mat::zeros(r, r);
    for i in 0..n {
        let row = y.row(i);
        for a in 0..r {
            let da = row[a] - means[a];
            for b in a..r {
                cov[(a, b)] += da * (row[b] - means[b]);
            }
        }
    }
    let denom = (nf - 1.0).max(1.0);
    for a in 0..r {
        for b in a..r {
            let c = cov[(a, b)] / denom;
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    for a in 0..r {
        if !(cov[(a, a)].is_finite() && cov[(a, a)] > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "variable {} is constant or non-finite; cannot factor its covariance",
                a + 1
            )));
        }
    }
    Ok(cov)
}

/// Starting communalities: the squared-multiple-correlation analogue
/// `var_r − 1/(cov⁻¹)_rr` where the covariance matrix is invertible,
/// otherwise each variable's largest absolute covariance with any other
/// variable, capped just below its variance.
fn starting_communalities(cov: &Mat) -> Vec<f64> {
    let r = cov.rows();
    if let Ok(inv) = SpdMatrix::from_symmetric(cov.clone()).inverse() {
        let inv = inv.into_mat();
        let smc: Vec<f64> = (0..r).map(|a| cov[(a, a)] - 1.0 / inv[(a, a)]).collect();
        if smc
            .iter()
            .enumerate()
            .all(|(a, h)| h.is_finite() && *h >= 0.0 && *h < cov[(a, a)])
        {
            return smc;
        }
    }
    (0..r)
        .map(|a| {
            (0..r)
                .filter(|&b| b != a)
                .fold(0.0f64, |acc, b| acc.max(cov[(a, b)].abs()))
                .min(0.999 * cov[(a, a)])
        })
        .collect()
}

/// Top-`n_factors` principal-axis loadings of the covariance matrix with its
/// diagonal replaced by the given communalities: scaled leading eigenvectors
/// of the reduced matrix, with negative eigenvalues truncated at zero.
fn principal_axes(cov: &Mat, h2: &[f64], n_factors: usize) -> Mat {
    let r = cov.rows();
    let mut reduced = cov.clone();
    for a in 0..r {
        reduced[(a, a)] = h2[a];
    }
    let (eigenvalues, vectors) = symmetric_eigen(&reduced);
    Mat::from_fn(r, n_factors, |a, l| {
        vectors[(a, l)] * eigenvalues[l].max(0.0).sqrt()
    })
}

fn row_communalities(loadings: &Mat) -> Vec<f64> {
    (0..loadings.rows())
        .map(|a| dot(loadings.row(a), loadings.row(a)))
        .collect()
}

/// Extract `n_factors` unrotated loadings from the stacked data by iterated
/// principal-axis factoring, along with preliminary uniquenesses (one minus
/// communality, clipped to [0.005, 1]).
///
/// The covariance matrix of the input as given is factored; with the
/// intended standardized input that is its correlation matrix, on which the
/// one-minus-communality uniquenesses live naturally. Starting from
/// squared-multiple-correlation communalities, each pass re-extracts the
/// principal axes of the reduced matrix and feeds the implied communalities
/// back into its diagonal, until they settle or the iteration cap is hit;
/// the capped state is accepted as long as the updates have shrunk by an
/// order of magnitude, since weakly-structured data drifts long after the
/// fit has stopped changing at any meaningful scale.
pub fn extract_loadings(y_stacked: &Mat, n_factors: usize) -> Result<(Mat, Vec<f64>)> {
    let (n, r) = (y_stacked.rows(), y_stacked.cols());
    if n <= r {
        return Err(Error::InvalidParameter(format!(
            "factor extraction needs more observations than variables, got {n} rows for {r} variables"
        )));
    }
    if n_factors == 0 || n_factors >= r {
        return Err(Error::InvalidParameter(format!(
            "factor count must be in 1..{r}, got {n_factors}"
        )));
    }
    let cov = covariance_matrix(y_stacked)?;
    let mut h2 = starting_communalities(&cov);
    let mut loadings = Mat::zeros(r, n_factors);
    let mut converged = false;
    let mut first_delta = f64::INFINITY;
    let mut last_delta = f64::INFINITY;
    for iter in 0..PAF_MAX_ITER {
        loadings = principal_axes(&cov, &h2, n_factors);
        let mut delta = 0.0f64;
        for (a, h) in row_communalities(&loadings).into_iter().enumerate() {
            let new_h2 = h.min(cov[(a, a)]);
            delta = delta.max((new_h2 - h2[a]).abs());
            h2[a] = new_h2;
        }
        if iter == 0 {
            first_delta = delta.max(PAF_TOL);
        }
        last_delta = delta;
        if delta < PAF_TOL {
            converged = true;
            break;
        }
    }
    if !converged && !(last_delta < PAF_PROGRESS_FACTOR * first_delta) {
        return Err(Error::ConvergenceFailure(format!(
            "communality updates still at full size after {PAF_MAX_ITER} principal-axis iterations"
        )));
    }
    let v_hat = row_communalities(&loadings)
        .iter()
        .map(|&h| (1.0 - h).clamp(0.005, 1.0))
        .collect();
    Ok((loadings, v_hat))
}

/// Find the transform `M` that maps raw loadings onto the identified form:
/// the inverse of the top L×L block, so `b_hat = b_tilde * M` has an exact
/// identity leading block. Rows 1..L of the result are overwritten with
/// exact 0/1 values rather than trusting floating-point cancellation.
pub fn constrain_loadings(b_tilde: &Mat) -> Result<(Mat, FactorLoadings)> {
    let l = b_tilde.cols();
    if b_tilde.rows() <= l {
        return Err(Error::DimensionMismatch(format!(
            "loadings must have more rows than columns, got {}x{}",
            b_tilde.rows(),
            l
        )));
    }
    let top = Mat::from_fn(l, l, |i, j| b_tilde[(i, j)]);
    // Condition number of the top block via the spectrum of top' * top.
    let gram = top.transpose().matmul(&top);
    let (eigs, _) = symmetric_eigen(&gram);
    let (max_e, min_e) = (eigs[0].max(0.0), eigs[l - 1]);
    if min_e <= 0.0 || (max_e / min_e).sqrt() > 1e8 {
        return Err(Error::SingularTopBlock(format!(
            "condition number {:.3e}",
            if min_e > 0.0 {
                (max_e / min_e).sqrt()
            } else {
                f64::INFINITY
            }
        )));
    }
    let m = top
        .inverse()
        .ok_or_else(|| Error::SingularTopBlock("pivot collapse during inversion".into()))?;
    let mut b_hat = b_tilde.matmul(&m);
    for i in 0..l {
        for j in 0..l {
            b_hat[(i, j)] = if i == j { 1.0 } else { 0.0 };
        }
    }
    Ok((m, FactorLoadings::new(b_hat)?))
}

/// Weighted least squares factor scores: each row of the result is
/// `(B' V^{-1} B)^{-1} B' V^{-1} y` for the matching observation row.
pub fn wls_scores(y_stacked: &Mat, loadings: &Mat, uniquenesses: &[f64]) -> Result<Mat> {
    let (r, l) = (loadings.rows(), loadings.cols());
    if y_stacked.cols() != r || uniquenesses.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "scores need {} variables; observations have {} and uniquenesses {}",
            r,
            y_stacked.cols(),
            uniquenesses.len()
        )));
    }
    if uniquenesses.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter(
            "uniquenesses must be positive for weighted least squares".into(),
        ));
    }
    let mut gram = Mat::zeros(l, l);
    for a in 0..r {
        let w = 1.0 / uniquenesses[a];
        gram.add_outer(loadings.row(a), w);
    }
    gram.symmetrize_mut();
    let chol = SpdMatrix::from_symmetric(gram)
        .cholesky_strict()
        .map_err(|_| Error::SingularGram)?;
    let mut scores = Mat::zeros(y_stacked.rows(), l);
    for i in 0..y_stacked.rows() {
        let y = y_stacked.row(i);
        let mut rhs = vec![0.0; l];
        for a in 0..r {
            let w = y[a] / uniquenesses[a];
            for (acc, &b) in rhs.iter_mut().zip(loadings.row(a)) {
                *acc += b * w;
            }
        }
        scores.row_mut(i).copy_from_slice(&chol.solve_vec(&rhs));
    }
    Ok(scores)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One k-means run: k-means++ seeding followed by Lloyd iterations.
/// Returns (labels, within-cluster sum of squares).
fn kmeans_once(points: &Mat, k: usize, rng: &mut RngStream) -> (Vec<usize>, f64) {
    let n = points.rows();
    let dim = points.cols();
    let mut centers = Mat::zeros(k, dim);

    // Seeding: first center uniform, the rest by squared-distance weighting.
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u: f64 = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(idx));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), centers.row(c)));
        }
    }

    let mut labels = vec![0usize; n];
    for _iter in 0..300 {
        // Assignment step; nearest center, ties to the smallest index.
        let mut changed = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = sq_dist(points.row(i), centers.row(0));
            for c in 1..k {
                let d = sq_dist(points.row(i), centers.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // Update step.
        let mut counts = vec![0usize; k];
        let mut sums = Mat::zeros(k, dim);
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &v) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an emptied center at the point farthest from its
                // current center (first such point on ties).
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = sq_dist(points.row(i), centers.row(labels[i]));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centers.row_mut(c).copy_from_slice(points.row(far));
                changed = true;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (cv, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *cv = s * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n)
        .map(|i| sq_dist(points.row(i), centers.row(labels[i])))
        .sum();
    (labels, wcss)
}

/// Relabel clusters in decreasing size order (ties broken by the smaller
/// original label). Returns the relabeled assignment and the permutation
/// mapping each new label to its original one.
fn size_order_labels(labels: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut counts = vec![0usize; k];
    for &z in labels {
        counts[z] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut new_of_old = vec![0usize; k];
    for (new, &old) in order.iter().enumerate() {
        new_of_old[old] = new;
    }
    (labels.iter().map(|&z| new_of_old[z]).collect(), order)
}

fn kmeans_best_of(points: &Mat, k: usize, rng: &RngStream, restarts: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..restarts {
        let mut sub = rng.substream(restart as u64);
        let (labels, wcss) = kmeans_once(points, k, &mut sub);
        if best.as_ref().is_none_or(|(_, best_wcss)| wcss < *best_wcss) {
            best = Some((labels, wcss));
        }
    }
    best.expect("at least one restart")
}

/// Cluster the score rows into `n_clusters` groups. Runs 20 restarts of
/// k-means++ and keeps the lowest within-cluster sum of squares; the final
/// labels are size-ordered. If the best partition leaves any cluster with
/// fewer than 2 members the whole procedure retries on a fresh substream,
/// up to 10 times, because a singleton cluster has no usable covariance.
pub fn kmeans_cluster(points: &Mat, n_clusters: usize, rng: &RngStream) -> Result<Vec<usize>> {
    kmeans_cluster_detailed(points, n_clusters, rng).map(|(labels, _)| labels)
}

/// As `kmeans_cluster`, also returning the size-order permutation
/// (new label -> original k-means label).
pub fn kmeans_cluster_detailed(
    points: &Mat,
    n_clusters: usize,
    rng: &RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = points.rows();
    if n_clusters == 0 || n < n_clusters {
        return Err(Error::InvalidParameter(format!(
            "cannot split {n} points into {n_clusters} clusters"
        )));
    }
    let mut last_offender = (0usize, 0usize);
    for attempt in 0..10u64 {
        let attempt_rng = rng.substream(1_000 + attempt);
        let (labels, _) = kmeans_best_of(points, n_clusters, &attempt_rng, 20);
        let (ordered, order) = size_order_labels(&labels, n_clusters);
        let mut counts = vec![0usize; n_clusters];
        for &z in &ordered {
            counts[z] += 1;
        }
        match counts.iter().position(|&c| c < 2) {
            None => return Ok((ordered, order)),
            Some(cluster) => last_offender = (cluster, counts[cluster]),
        }
    }
    Err(Error::EmptyCluster {
        cluster: last_offender.0 + 1,
        size: last_offender.1,
    })
}

/// The score rescaling and per-cluster prior quantities.
#[derive(Debug, Clone)]
pub struct ScoreTransform {
    pub l1: Mat,
    pub d1: Vec<f64>,
    pub l1_inv: Mat,
    /// Scores premultiplied by `l1_inv`, row per cell.
    pub transformed: Mat,
}

/// Per-cluster sample moments of score rows (mean and covariance with the
/// n-1 denominator).
fn cluster_moments(x: &Mat, labels: &[usize], n_clusters: usize) -> Result<(Mat, Vec<Mat>)> {
    let l = x.cols();
    let mut counts = vec![0usize; n_clusters];
    for &z in labels {
        counts[z] += 1;
    }
    if let Some(cluster) = counts.iter().position(|&c| c < 2) {
        return Err(Error::EmptyCluster {
            cluster: cluster + 1,
            size: counts[cluster],
        });
    }
    let mut means = Mat::zeros(n_clusters, l);
    for (i, &z) in labels.iter().enumerate() {
        for (m, &v) in means.row_mut(z).iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for g in 0..n_clusters {
        let inv = 1.0 / counts[g] as f64;
        for m in means.row_mut(g) {
            *m *= inv;
        }
    }
    let mut covs = vec![Mat::zeros(l, l); n_clusters];
    let mut centered = vec![0.0; l];
    for (i, &z) in labels.iter().enumerate() {
        for (c, (&v, &m)) in centered.iter_mut().zip(x.row(i).iter().zip(means.row(z))) {
            *c = v - m;
        }
        covs[z].add_outer(&centered, 1.0);
    }
    for g in 0..n_clusters {
        covs[g].scale_mut(1.0 / (counts[g] as f64 - 1.0));
        covs[g].symmetrize_mut();
    }
    Ok((means, covs))
}

/// Build the full prior specification from clustered scores, and rescale
/// the scores so the first cluster's sample covariance becomes diagonal.
///
/// With `Omega_1 = L1 D1 L1'` the transformed scores are `L1^{-1} x`; the
/// first cluster's location prior gets covariance `diag(D1)` and the other
/// clusters get `L1^{-1} Omega_g L1^{-T}`, which also serve as the
/// inverse-Wishart scale matrices. Fixed strengths follow the model's
/// standard choices.
pub fn build_priors(
    x_hat: &Mat,
    labels: &[usize],
    n_clusters: usize,
) -> Result<(PriorSpec, ScoreTransform)> {
    let l = x_hat.cols();
    if labels.len() != x_hat.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} score rows",
            labels.len(),
            x_hat.rows()
        )));
    }
    let (raw_means, raw_covs) = cluster_moments(x_hat, labels, n_clusters)?;

    let omega1 = SpdMatrix::new(raw_covs[0].clone()).map_err(|_| Error::NotPositiveDefinite {
        context: "first cluster's score covariance".into(),
    })?;
    let (l1, d1) = omega1.ldl().map_err(|_| Error::NotPositiveDefinite {
        context: "first cluster's score covariance".into(),
    })?;
    let l1_inv = invert_lower(&l1)?;

    let mut transformed = Mat::zeros(x_hat.rows(), l);
    for i in 0..x_hat.rows() {
        transformed
            .row_mut(i)
            .copy_from_slice(&l1_inv.matvec(x_hat.row(i)));
    }

    let mut mu_mean = Mat::zeros(n_clusters, l);
    for g in 0..n_clusters {
        mu_mean
            .row_mut(g)
            .copy_from_slice(&l1_inv.matvec(raw_means.row(g)));
    }

    let mut mu_cov: Vec<SpdMatrix> = Vec::with_capacity(n_clusters);
    mu_cov.push(SpdMatrix::diagonal(&d1));
    for cov in raw_covs.iter().skip(1) {
        let mut c = l1_inv.matmul(cov).matmul(&l1_inv.transpose());
        c.symmetrize_mut();
        let spd = SpdMatrix::from_symmetric(c);
        spd.cholesky().map_err(|_| Error::NotPositiveDefinite {
            context: "transformed cluster score covariance".into(),
        })?;
        mu_cov.push(spd);
    }

    let mut omega_scale = mu_cov.clone();
    // Entry 0 is never read (the reference cluster has per-diagonal IG
    // priors); keep a well-formed placeholder.
    omega_scale[0] = SpdMatrix::diagonal(&vec![1.0; l]);

    let priors = PriorSpec {
        mu_mean,
        mu_cov: mu_cov.clone(),
        n_omega_diag: vec![4.0; l],
        s2_omega_diag: d1.clone(),
        n_omega: l as f64 + 2.0,
        omega_scale,
        n_sigma: 2.2,
        s2_sigma: 0.1 / 2.2,
        n_tau: 1.0,
        s2_tau: 1.0,
        alpha_init: vec![2.0; n_clusters],
        alpha_trans: Mat::from_fn(n_clusters, n_clusters, |_, _| 2.0),
    };
    let transform = ScoreTransform {
        l1,
        d1,
        l1_inv,
        transformed,
    };
    Ok((priors, transform))
}

/// Sample variance of the free entries in each loading column, floored at
/// 0.1, as the starting value for the column shrinkage scales.
fn tau2_start(b_hat: &FactorLoadings) -> Vec<f64> {
    let l = b_hat.n_factors();
    let mut tau2 = vec![0.0; l];
    for col in 0..l {
        let vals: Vec<f64> = b_hat
            .free_entries()
            .filter(|&(_, c, _)| c == col)
            .map(|(_, _, v)| v)
            .collect();
        let n = vals.len() as f64;
        let var = if vals.len() >= 2 {
            let mean = vals.iter().sum::<f64>() / n;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        tau2[col] = var.max(0.1);
    }
    tau2
}

/// Assemble the starting sampler state from the pipeline's artifacts:
/// loadings and uniquenesses from factor extraction, scores and labels from
/// the transformed clustering, cluster parameters from the prior centers,
/// and Markov parameters from smoothed empirical label frequencies.
pub fn initialize_state(
    dataset: &Dataset,
    priors: &PriorSpec,
    artifacts: &EbArtifacts,
) -> Result<ModelState> {
    let dims = ModelDims {
        n_subjects: dataset.n_subjects(),
        n_times: dataset.n_times(),
        n_vars: dataset.n_vars(),
        n_factors: artifacts.b_hat.n_factors(),
        n_clusters: priors.alpha_init.len(),
    };
    dims.validate()?;
    priors.validate(&dims)?;

    let stats = compute_sweep_stats(&artifacts.labels, &dims);
    let g = dims.n_clusters;
    let mut init_probs: Vec<f64> = (0..g)
        .map(|k| stats.n_first[k] + priors.alpha_init[k])
        .collect();
    let total: f64 = init_probs.iter().sum();
    for p in &mut init_probs {
        *p /= total;
    }
    let mut trans = Mat::from_fn(g, g, |j, k| {
        stats.transitions[(j, k)] + priors.alpha_trans[(j, k)]
    });
    for j in 0..g {
        let row_total: f64 = trans.row(j).iter().sum();
        for v in trans.row_mut(j) {
            *v /= row_total;
        }
    }

    let mut omega: Vec<SpdMatrix> = Vec::with_capacity(g);
    // The reference cluster's covariance starts at the diagonal of its
    // prior scale; the identification constraint requires exact zeros off
    // the diagonal.
    omega.push(SpdMatrix::diagonal(&artifacts.d1));
    for cov in priors.mu_cov.iter().skip(1) {
        omega.push(cov.clone());
    }

    let state = ModelState {
        loadings: artifacts.b_hat.clone(),
        uniquenesses: Uniquenesses::new(artifacts.v_hat.clone())?,
        tau2: tau2_start(&artifacts.b_hat),
        clusters: ClusterParams {
            mu: priors.mu_mean.clone(),
            omega,
        },
        markov: MarkovParams { init_probs, trans },
        latent: LatentState {
            factors: artifacts.x_hat.clone(),
            labels: artifacts.labels.clone(),
        },
    };
    crate::model::validate_state(&state, &dims)?;
    Ok(state)
}

/// Run the whole pipeline: extraction, constraint, scores, clustering,
/// prior construction, and state assembly.
pub fn empirical_bayes_init(
    dataset: &Dataset,
    n_factors: usize,
    n_clusters: usize,
    rng: &RngStream,
) -> Result<EbInit> {
    let stacked = dataset.stacked();
    let (b_tilde, v_hat) = extract_loadings(&stacked, n_factors)?;
    let (transform, b_hat) = constrain_loadings(&b_tilde)?;
    let scores = wls_scores(&stacked, b_hat.as_mat(), &v_hat)?;
    let (labels, cluster_order) = kmeans_cluster_detailed(&scores, n_clusters, rng)?;
    let (priors, score_transform) = build_priors(&scores, &labels, n_clusters)?;
    let artifacts = EbArtifacts {
        b_tilde,
        transform,
        b_hat,
        v_hat,
        x_hat: score_transform.transformed,
        labels,
        cluster_order,
        l1: score_transform.l1,
        d1: score_transform.d1,
    };
    let state = initialize_state(dataset, &priors, &artifacts)?;
    Ok(EbInit {
        priors,
        state,
        artifacts,
    })
}
