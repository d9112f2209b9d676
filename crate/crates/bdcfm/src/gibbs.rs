//! Full-conditional updates and the Gibbs sweep loop.
//!
//! Each update redraws one block of unknowns from its conditional
//! distribution given everything else: factor scores, cluster means, cluster
//! covariances, free loadings, uniquenesses, loading-column scales, initial
//! cluster probabilities, transition rows, and per-cell cluster assignments,
//! in that order. [`run_gibbs`] wires the sweep to a [`ChainOutput`] with
//! burn-in and thinning; [`gibbs_sweep`], [`sample_prior_state`], and
//! [`sample_observations`] expose the pieces needed to run the sampler as a
//! joint-distribution self-check (redraw the data from the current state
//! between sweeps and compare parameter marginals against the prior).
//!
//! Randomness is organized so that results never depend on thread
//! scheduling: every sweep phase draws from its own counter-derived stream,
//! and the two per-subject phases (factor scores and assignments) hand each
//! subject a substream of the phase stream.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    compute_sweep_stats, validate_state, ChainOutput, ChainStorage, ClusterParams, Dataset,
    FactorLoadings, LatentState, MarkovParams, ModelDims, ModelState, PriorSpec, Uniquenesses,
};
use crate::numkit::{
    dot, sample_categorical, sample_dirichlet, sample_inverse_gamma, sample_inverse_wishart,
    sample_mvn, solve_lower, solve_lower_transpose, Cholesky, Mat, RngStream, SpdMatrix,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Sweep-loop knobs. `total_iterations` counts every sweep including
/// burn-in; the state after sweep `s` is stored when `s > burn_in` and
/// `(s − burn_in)` is a multiple of `thin`.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub total_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Run the per-subject phases on the rayon pool. Output is identical
    /// either way; this is purely a wall-clock switch.
    pub parallel_subjects: bool,
    /// Multiply the initial-distribution weight into the first time point's
    /// assignment draw. Off by default: the single-site conditional then
    /// uses only the forward transition out of t = 1, and the initial
    /// distribution enters through its own update. Turn it on when the
    /// sampler must be exactly self-consistent with the joint model, e.g.
    /// for joint-distribution validation.
    pub include_initial_prob_in_z1: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            total_iterations: 50_000,
            burn_in: 10_000,
            thin: 10,
            seed: 1,
            parallel_subjects: true,
            include_initial_prob_in_z1: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.total_iterations {
            return Err(Error::InvalidParameter(format!(
                "burn-in ({}) must be smaller than total iterations ({})",
                self.burn_in, self.total_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thinning must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of states a full run stores.
    pub fn n_kept(&self) -> usize {
        (self.total_iterations - self.burn_in) / self.thin
    }

    fn keeps(&self, sweep: u64) -> bool {
        let burn = self.burn_in as u64;
        sweep > burn && (sweep - burn) % self.thin as u64 == 0
    }
}

// Stream ids for the sampler live far above the ids the data generator
// hands out, so reusing one seed across generation and fitting never makes
// the two consume overlapping streams.
const SAMPLER_STREAM_BASE: u64 = 1 << 40;
const PHASES_PER_SWEEP: u64 = 16;

const PHASE_FACTORS: u64 = 0;
const PHASE_MEANS: u64 = 1;
const PHASE_COVARIANCES: u64 = 2;
const PHASE_LOADINGS: u64 = 3;
const PHASE_UNIQUENESSES: u64 = 4;
const PHASE_LOADING_SCALES: u64 = 5;
const PHASE_INITIAL_PROBS: u64 = 6;
const PHASE_TRANSITIONS: u64 = 7;
const PHASE_ASSIGNMENTS: u64 = 8;

fn phase_rng(seed: u64, sweep: u64, phase: u64) -> RngStream {
    RngStream::new(seed, SAMPLER_STREAM_BASE + sweep * PHASES_PER_SWEEP + phase)
}

fn not_pd(context: String) -> impl FnOnce(Error) -> Error {
    move |_| Error::NotPositiveDefinite { context }
}

/// Draw a multivariate normal given the Cholesky factor of its PRECISION:
/// mean + Lᵀ⁻¹z. Complements `sample_mvn`, which wants the covariance factor.
fn draw_from_precision(rng: &mut RngStream, mean: &[f64], prec_chol: &Cholesky) -> Vec<f64> {
    let z: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(rng)).collect();
    let u = solve_lower_transpose(prec_chol.lower(), &z);
    mean.iter().zip(&u).map(|(m, v)| m + v).collect()
}

/// Per-cluster pieces of the factor-score conditional, which depends on the
/// cell only through its cluster and its observation: one precision Cholesky
/// per cluster instead of one per cell.
struct FactorConditionals {
    /// Cholesky of BᵀV⁻¹B + Ω_g⁻¹ per cluster.
    precisions: Vec<Cholesky>,
    /// BᵀV⁻¹, applied to each observation vector.
    obs_map: Mat,
    /// Ω_g⁻¹μ_g per cluster.
    prior_pull: Vec<Vec<f64>>,
}

fn factor_conditionals(state: &ModelState, dims: &ModelDims) -> Result<FactorConditionals> {
    let (r_vars, l) = (dims.n_vars, dims.n_factors);
    let b = state.loadings.as_mat();
    let v = state.uniquenesses.values();
    let mut obs_map = Mat::zeros(l, r_vars);
    let mut gram = Mat::zeros(l, l);
    for a in 0..r_vars {
        let w = 1.0 / v[a];
        for k in 0..l {
            obs_map[(k, a)] = b[(a, k)] * w;
        }
        gram.add_outer(b.row(a), w);
    }
    let mut precisions = Vec::with_capacity(dims.n_clusters);
    let mut prior_pull = Vec::with_capacity(dims.n_clusters);
    for (g, omega) in state.clusters.omega.iter().enumerate() {
        let omega_inv = omega
            .inverse()
            .map_err(not_pd(format!("covariance of cluster {}", g + 1)))?;
        let mut prec = gram.add(omega_inv.as_mat());
        prec.symmetrize_mut();
        let chol = SpdMatrix::from_symmetric(prec)
            .cholesky()
            .map_err(not_pd(format!("factor-score precision for cluster {}", g + 1)))?;
        precisions.push(chol);
        prior_pull.push(omega_inv.as_mat().matvec(state.clusters.mu.row(g)));
    }
    Ok(FactorConditionals {
        precisions,
        obs_map,
        prior_pull,
    })
}

impl FactorConditionals {
    fn conditional_mean(&self, g: usize, y: &[f64]) -> Vec<f64> {
        let mut rhs = self.obs_map.matvec(y);
        for (r, p) in rhs.iter_mut().zip(&self.prior_pull[g]) {
            *r += p;
        }
        self.precisions[g].solve_vec(&rhs)
    }

    fn draw(&self, g: usize, y: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let mean = self.conditional_mean(g, y);
        let z: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(rng)).collect();
        let u = solve_lower_transpose(self.precisions[g].lower(), &z);
        mean.iter().zip(&u).map(|(m, v)| m + v).collect()
    }
}

/// Redraw every cell's factor score from N(m_it, C_it) with
/// C_it = (BᵀV⁻¹B + Ω_g⁻¹)⁻¹ and m_it = C_it(BᵀV⁻¹y_it + Ω_g⁻¹μ_g),
/// where g is the cell's current assignment.
pub fn update_factors(
    state: &mut ModelState,
    data: &Dataset,
    dims: &ModelDims,
    rng: &RngStream,
    parallel: bool,
) -> Result<()> {
    let cond = factor_conditionals(state, dims)?;
    let (t_len, l) = (dims.n_times, dims.n_factors);
    let LatentState { factors, labels } = &mut state.latent;
    let labels: &[usize] = labels;
    let subject = |i: usize, chunk: &mut [f64]| {
        let mut srng = rng.substream(i as u64);
        for t in 0..t_len {
            let g = labels[i * t_len + t];
            let x = cond.draw(g, data.obs(i, t), &mut srng);
            chunk[t * l..(t + 1) * l].copy_from_slice(&x);
        }
    };
    let chunks = factors.data_mut().chunks_mut(t_len * l);
    if parallel {
        chunks
            .collect::<Vec<_>>()
            .into_par_iter()
            .enumerate()
            .for_each(|(i, chunk)| subject(i, chunk));
    } else {
        for (i, chunk) in chunks.enumerate() {
            subject(i, chunk);
        }
    }
    Ok(())
}

/// Exponentiate log weights in place after subtracting their maximum and
/// normalize to a probability vector. Errors if every weight is zero.
fn normalize_log_weights(logw: &mut [f64]) -> Result<()> {
    let max = logw.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return Err(Error::InvalidParameter(
            "assignment weights all vanished; no cluster can explain the score".into(),
        ));
    }
    let mut total = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in logw.iter_mut() {
        *w /= total;
    }
    Ok(())
}

/// Redraw every cell's cluster assignment from its single-site conditional:
/// the Gaussian density of the cell's score under each cluster times the
/// transition weights to the (current) neighboring assignments. The first
/// time point uses only the outgoing transition unless
/// `include_initial_prob` adds the initial-distribution weight; the last
/// uses only the incoming one.
pub fn update_assignments(
    state: &mut ModelState,
    dims: &ModelDims,
    include_initial_prob: bool,
    rng: &RngStream,
    parallel: bool,
) -> Result<()> {
    let (t_len, l, n_clusters) = (dims.n_times, dims.n_factors, dims.n_clusters);
    let mut densities = Vec::with_capacity(n_clusters);
    for (g, omega) in state.clusters.omega.iter().enumerate() {
        let chol = omega
            .cholesky()
            .map_err(not_pd(format!("covariance of cluster {}", g + 1)))?;
        let log_det = chol.log_det();
        densities.push((chol, log_det));
    }
    let mu = &state.clusters.mu;
    let init_probs = &state.markov.init_probs;
    let trans = &state.markov.trans;
    let factors = &state.latent.factors;
    let log_density = |x: &[f64], g: usize| -> f64 {
        let diff: Vec<f64> = x.iter().zip(mu.row(g)).map(|(a, b)| a - b).collect();
        let u = solve_lower(densities[g].0.lower(), &diff);
        -0.5 * (l as f64 * LN_2PI + densities[g].1 + dot(&u, &u))
    };
    let subject = |i: usize, labels: &mut [usize]| -> Result<()> {
        let mut srng = rng.substream(i as u64);
        let mut logw = vec![0.0; n_clusters];
        for t in 0..t_len {
            let x = factors.row(i * t_len + t);
            for (g, w) in logw.iter_mut().enumerate() {
                let mut lw = log_density(x, g);
                if t > 0 {
                    lw += trans[(labels[t - 1], g)].ln();
                } else if include_initial_prob {
                    lw += init_probs[g].ln();
                }
                if t + 1 < t_len {
                    lw += trans[(g, labels[t + 1])].ln();
                }
                *w = lw;
            }
            normalize_log_weights(&mut logw)?;
            labels[t] = sample_categorical(&mut srng, &logw);
        }
        Ok(())
    };
    let chunks = state.latent.labels.chunks_mut(t_len);
    if parallel {
        chunks
            .collect::<Vec<_>>()
            .into_par_iter()
            .enumerate()
            .try_for_each(|(i, chunk)| subject(i, chunk))
    } else {
        for (i, chunk) in chunks.enumerate() {
            subject(i, chunk)?;
        }
        Ok(())
    }
}

/// Precision Cholesky and mean of one cluster location's conditional.
fn cluster_mean_posterior(
    state: &ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    g: usize,
) -> Result<(Cholesky, Vec<f64>)> {
    let l = dims.n_factors;
    let mut count = 0.0;
    let mut sum = vec![0.0; l];
    for (cell, &z) in state.latent.labels.iter().enumerate() {
        if z == g {
            count += 1.0;
            for (s, x) in sum.iter_mut().zip(state.latent.factors.row(cell)) {
                *s += x;
            }
        }
    }
    let prior_prec = priors.mu_cov[g]
        .inverse()
        .map_err(not_pd(format!("location prior covariance for cluster {}", g + 1)))?;
    let omega_inv = state.clusters.omega[g]
        .inverse()
        .map_err(not_pd(format!("covariance of cluster {}", g + 1)))?;
    let mut prec = Mat::from_fn(l, l, |i, j| {
        prior_prec.as_mat()[(i, j)] + count * omega_inv.as_mat()[(i, j)]
    });
    prec.symmetrize_mut();
    let chol = SpdMatrix::from_symmetric(prec)
        .cholesky()
        .map_err(not_pd(format!("location precision for cluster {}", g + 1)))?;
    let mut rhs = prior_prec.as_mat().matvec(priors.mu_mean.row(g));
    for (r, pull) in rhs.iter_mut().zip(omega_inv.as_mat().matvec(&sum)) {
        *r += pull;
    }
    let mean = chol.solve_vec(&rhs);
    Ok((chol, mean))
}

/// Redraw each cluster's location from its conditional: precision
/// C_g^μ⁻¹ + n_g·Ω_g⁻¹ and mean pulled between the prior center and the
/// member scores. A memberless cluster draws from its prior untouched.
pub fn update_cluster_means(
    state: &mut ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    for g in 0..dims.n_clusters {
        let (chol, mean) = cluster_mean_posterior(state, priors, dims, g)?;
        let draw = draw_from_precision(rng, &mean, &chol);
        state.clusters.mu.row_mut(g).copy_from_slice(&draw);
    }
    Ok(())
}

/// Shape and rate of one reference-cluster variance's conditional.
fn reference_variance_posterior(state: &ModelState, priors: &PriorSpec, factor: usize) -> (f64, f64) {
    let mut count = 0.0;
    let mut sum_sq = 0.0;
    let mu = state.clusters.mu.row(0);
    for (cell, &z) in state.latent.labels.iter().enumerate() {
        if z == 0 {
            count += 1.0;
            let d = state.latent.factors[(cell, factor)] - mu[factor];
            sum_sq += d * d;
        }
    }
    let n = priors.n_omega_diag[factor];
    let shape = (n + count) / 2.0;
    let rate = (n * priors.s2_omega_diag[factor] + sum_sq) / 2.0;
    (shape, rate)
}

/// Redraw the reference cluster's diagonal score variances, one
/// inverse-gamma conditional per factor.
pub fn update_reference_variances(
    state: &mut ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    let mut diag = vec![0.0; dims.n_factors];
    for (factor, d) in diag.iter_mut().enumerate() {
        let (shape, rate) = reference_variance_posterior(state, priors, factor);
        *d = sample_inverse_gamma(rng, shape, rate)?;
    }
    state.clusters.omega[0] = SpdMatrix::diagonal(&diag);
    Ok(())
}

/// Degrees of freedom and scale of one non-reference covariance conditional.
fn cluster_covariance_posterior(
    state: &ModelState,
    priors: &PriorSpec,
    g: usize,
) -> (f64, SpdMatrix) {
    let mu = state.clusters.mu.row(g);
    let mut scale = priors.omega_scale[g].as_mat().clone();
    let mut count = 0.0;
    for (cell, &z) in state.latent.labels.iter().enumerate() {
        if z == g {
            count += 1.0;
            let diff: Vec<f64> = state
                .latent
                .factors
                .row(cell)
                .iter()
                .zip(mu)
                .map(|(x, m)| x - m)
                .collect();
            scale.add_outer(&diff, 1.0);
        }
    }
    (priors.n_omega + count, SpdMatrix::from_symmetric(scale))
}

/// Redraw every non-reference cluster covariance from its inverse-Wishart
/// conditional: prior scale plus the member scatter around the cluster mean.
pub fn update_cluster_covariances(
    state: &mut ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    for g in 1..dims.n_clusters {
        let (dof, scale) = cluster_covariance_posterior(state, priors, g);
        let draw = sample_inverse_wishart(rng, dof, &scale)?;
        state.clusters.omega[g] = SpdMatrix::from_symmetric(draw);
    }
    Ok(())
}

/// Score cross-products feeding the loadings and uniqueness updates:
/// `gram = Σ x xᵀ` over all cells and `cross[k, r] = Σ x_k y_r`.
fn score_moments(state: &ModelState, data: &Dataset, dims: &ModelDims) -> (Mat, Mat) {
    let (l, r_vars) = (dims.n_factors, dims.n_vars);
    let mut gram = Mat::zeros(l, l);
    let mut cross = Mat::zeros(l, r_vars);
    for i in 0..dims.n_subjects {
        for t in 0..dims.n_times {
            let x = state.latent.factors.row(dims.cell(i, t));
            let y = data.obs(i, t);
            gram.add_outer(x, 1.0);
            for (k, &xk) in x.iter().enumerate() {
                for (a, &ya) in y.iter().enumerate() {
                    cross[(k, a)] += xk * ya;
                }
            }
        }
    }
    (gram, cross)
}

/// Precision Cholesky and mean for one loadings row's free prefix, given
/// precomputed score moments. Row 0 has nothing free.
fn loadings_row_posterior(
    state: &ModelState,
    dims: &ModelDims,
    gram: &Mat,
    cross: &Mat,
    row: usize,
) -> Result<Option<(Cholesky, Vec<f64>)>> {
    let l = dims.n_factors;
    let n_free = row.min(l);
    if n_free == 0 {
        return Ok(None);
    }
    let sigma2 = state.uniquenesses.values()[row];
    let mut prec = Mat::from_fn(n_free, n_free, |i, j| gram[(i, j)] / sigma2);
    for k in 0..n_free {
        prec[(k, k)] += 1.0 / state.tau2[k];
    }
    prec.symmetrize_mut();
    let chol = SpdMatrix::from_symmetric(prec)
        .cholesky()
        .map_err(not_pd(format!("loadings precision for row {}", row + 1)))?;
    // Rows inside the identified block regress y minus the row's own unit
    // factor; rows below it regress y directly.
    let rhs: Vec<f64> = (0..n_free)
        .map(|k| {
            let mut s = cross[(k, row)];
            if row < l {
                s -= gram[(k, row)];
            }
            s / sigma2
        })
        .collect();
    let mean = chol.solve_vec(&rhs);
    Ok(Some((chol, mean)))
}

/// Redraw the free entries of every loadings row from their joint normal
/// conditional, leaving the fixed unit/zero pattern untouched.
pub fn update_loadings(
    state: &mut ModelState,
    data: &Dataset,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    let (gram, cross) = score_moments(state, data, dims);
    for row in 1..dims.n_vars {
        if let Some((chol, mean)) = loadings_row_posterior(state, dims, &gram, &cross, row)? {
            let draw = draw_from_precision(rng, &mean, &chol);
            state.loadings.set_row_free(row, &draw);
        }
    }
    Ok(())
}

/// Shape and rate of one uniqueness's conditional.
fn uniqueness_posterior(
    state: &ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    dims: &ModelDims,
    var: usize,
) -> (f64, f64) {
    let b_row = state.loadings.as_mat().row(var);
    let mut sum_sq = 0.0;
    for i in 0..dims.n_subjects {
        for t in 0..dims.n_times {
            let x = state.latent.factors.row(dims.cell(i, t));
            let resid = data.obs(i, t)[var] - dot(b_row, x);
            sum_sq += resid * resid;
        }
    }
    let shape = (priors.n_sigma + dims.n_cells() as f64) / 2.0;
    let rate = (priors.n_sigma * priors.s2_sigma + sum_sq) / 2.0;
    (shape, rate)
}

/// Redraw every idiosyncratic variance from its inverse-gamma conditional.
pub fn update_uniquenesses(
    state: &mut ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    for var in 0..dims.n_vars {
        let (shape, rate) = uniqueness_posterior(state, data, priors, dims, var);
        let draw = sample_inverse_gamma(rng, shape, rate)?;
        state.uniquenesses.set(var, draw);
    }
    Ok(())
}

/// Shape and rate of one loading-column scale's conditional.
fn loading_scale_posterior(
    state: &ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    factor: usize,
) -> (f64, f64) {
    let b = state.loadings.as_mat();
    let n_free = dims.n_vars - (factor + 1);
    let norm_sq: f64 = (factor + 1..dims.n_vars)
        .map(|r| b[(r, factor)] * b[(r, factor)])
        .sum();
    let shape = (priors.n_tau + n_free as f64) / 2.0;
    let rate = (priors.n_tau * priors.s2_tau + norm_sq) / 2.0;
    (shape, rate)
}

/// Redraw each loading column's shrinkage scale τ²_l from its inverse-gamma
/// conditional over that column's free entries.
pub fn update_loading_scales(
    state: &mut ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    for factor in 0..dims.n_factors {
        let (shape, rate) = loading_scale_posterior(state, priors, dims, factor);
        state.tau2[factor] = sample_inverse_gamma(rng, shape, rate)?;
    }
    Ok(())
}

/// Redraw the initial cluster distribution from its Dirichlet conditional:
/// concentration plus the first-time-point occupancy counts.
pub fn update_initial_probs(
    state: &mut ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    let stats = compute_sweep_stats(&state.latent.labels, dims);
    let alpha: Vec<f64> = stats
        .n_first
        .iter()
        .zip(&priors.alpha_init)
        .map(|(n, a)| n + a)
        .collect();
    state.markov.init_probs = sample_dirichlet(rng, &alpha)?;
    Ok(())
}

/// Redraw each transition row from its Dirichlet conditional: concentration
/// plus the observed one-step transition counts out of that cluster.
pub fn update_transition_matrix(
    state: &mut ModelState,
    priors: &PriorSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    let stats = compute_sweep_stats(&state.latent.labels, dims);
    for j in 0..dims.n_clusters {
        let alpha: Vec<f64> = (0..dims.n_clusters)
            .map(|g| stats.transitions[(j, g)] + priors.alpha_trans[(j, g)])
            .collect();
        let draw = sample_dirichlet(rng, &alpha)?;
        state.markov.trans.row_mut(j).copy_from_slice(&draw);
    }
    Ok(())
}

/// One full sweep over every block, in a fixed scan order (scores, means,
/// covariances, loadings, uniquenesses, loading scales, initial
/// distribution, transitions, assignments). `sweep` indexes the
/// deterministic random streams, so replaying the same seed and sweep
/// number reproduces the draw exactly.
pub fn gibbs_sweep(
    state: &mut ModelState,
    data: &Dataset,
    dims: &ModelDims,
    priors: &PriorSpec,
    config: &SamplerConfig,
    sweep: u64,
) -> Result<()> {
    let seed = config.seed;
    update_factors(
        state,
        data,
        dims,
        &phase_rng(seed, sweep, PHASE_FACTORS),
        config.parallel_subjects,
    )?;
    update_cluster_means(state, priors, dims, &mut phase_rng(seed, sweep, PHASE_MEANS))?;
    {
        let mut rng = phase_rng(seed, sweep, PHASE_COVARIANCES);
        update_reference_variances(state, priors, dims, &mut rng)?;
        update_cluster_covariances(state, priors, dims, &mut rng)?;
    }
    update_loadings(state, data, dims, &mut phase_rng(seed, sweep, PHASE_LOADINGS))?;
    update_uniquenesses(
        state,
        data,
        priors,
        dims,
        &mut phase_rng(seed, sweep, PHASE_UNIQUENESSES),
    )?;
    update_loading_scales(
        state,
        priors,
        dims,
        &mut phase_rng(seed, sweep, PHASE_LOADING_SCALES),
    )?;
    update_initial_probs(
        state,
        priors,
        dims,
        &mut phase_rng(seed, sweep, PHASE_INITIAL_PROBS),
    )?;
    update_transition_matrix(
        state,
        priors,
        dims,
        &mut phase_rng(seed, sweep, PHASE_TRANSITIONS),
    )?;
    update_assignments(
        state,
        dims,
        config.include_initial_prob_in_z1,
        &phase_rng(seed, sweep, PHASE_ASSIGNMENTS),
        config.parallel_subjects,
    )?;
    Ok(())
}

fn attach_sweep(err: Error, sweep: u64) -> Error {
    match err {
        Error::NotPositiveDefinite { context } => Error::NotPositiveDefinite {
            context: format!("{context} (sweep {sweep})"),
        },
        other => other,
    }
}

/// Run the full sampler: validate everything, sweep `total_iterations`
/// times, and store every `thin`-th post-burn-in state in a [`ChainOutput`]
/// along with per-cell assignment frequencies. Deterministic in the seed.
pub fn run_gibbs(
    data: &Dataset,
    priors: &PriorSpec,
    init: ModelState,
    config: &SamplerConfig,
    storage: ChainStorage,
) -> Result<ChainOutput> {
    let dims = ModelDims {
        n_subjects: data.n_subjects(),
        n_times: data.n_times(),
        n_vars: data.n_vars(),
        n_factors: init.loadings.n_factors(),
        n_clusters: init.clusters.mu.rows(),
    };
    dims.validate()?;
    validate_state(&init, &dims)?;
    priors.validate(&dims)?;
    config.validate()?;
    let mut state = init;
    let mut output = ChainOutput::new(dims, storage)?;
    for sweep in 1..=config.total_iterations as u64 {
        gibbs_sweep(&mut state, data, &dims, priors, config, sweep)
            .map_err(|e| attach_sweep(e, sweep))?;
        if config.keeps(sweep) {
            output.push_state(&state)?;
        }
    }
    output.finish()?;
    Ok(output)
}

/// Draw a complete model state from the prior, consuming `rng` in a fixed
/// order (loading scales, loadings, uniquenesses, reference variances,
/// covariances, locations, initial distribution, transitions, assignments,
/// scores). With `include_initial_prob_in_z1` enabled the sampler's
/// conditionals are exactly consistent with this joint draw.
pub fn sample_prior_state(
    dims: &ModelDims,
    priors: &PriorSpec,
    rng: &mut RngStream,
) -> Result<ModelState> {
    dims.validate()?;
    priors.validate(dims)?;
    let (l, r_vars, n_clusters) = (dims.n_factors, dims.n_vars, dims.n_clusters);

    let mut tau2 = vec![0.0; l];
    for t in tau2.iter_mut() {
        *t = sample_inverse_gamma(rng, priors.n_tau / 2.0, priors.n_tau * priors.s2_tau / 2.0)?;
    }
    let mut loadings = FactorLoadings::unit(r_vars, l)?;
    for row in 1..r_vars {
        for col in 0..row.min(l) {
            let z: f64 = StandardNormal.sample(rng);
            loadings.set_free(row, col, z * tau2[col].sqrt());
        }
    }
    let mut sigma2 = vec![0.0; r_vars];
    for s in sigma2.iter_mut() {
        *s = sample_inverse_gamma(
            rng,
            priors.n_sigma / 2.0,
            priors.n_sigma * priors.s2_sigma / 2.0,
        )?;
    }
    let mut diag = vec![0.0; l];
    for (k, d) in diag.iter_mut().enumerate() {
        *d = sample_inverse_gamma(
            rng,
            priors.n_omega_diag[k] / 2.0,
            priors.n_omega_diag[k] * priors.s2_omega_diag[k] / 2.0,
        )?;
    }
    let mut omega = vec![SpdMatrix::diagonal(&diag)];
    for g in 1..n_clusters {
        let draw = sample_inverse_wishart(rng, priors.n_omega, &priors.omega_scale[g])?;
        omega.push(SpdMatrix::from_symmetric(draw));
    }
    let mut mu = Mat::zeros(n_clusters, l);
    for g in 0..n_clusters {
        let chol = priors.mu_cov[g]
            .cholesky()
            .map_err(not_pd(format!("location prior covariance for cluster {}", g + 1)))?;
        let draw = sample_mvn(rng, priors.mu_mean.row(g), &chol);
        mu.row_mut(g).copy_from_slice(&draw);
    }
    let init_probs = sample_dirichlet(rng, &priors.alpha_init)?;
    let mut trans = Mat::zeros(n_clusters, n_clusters);
    for j in 0..n_clusters {
        let alpha: Vec<f64> = (0..n_clusters).map(|g| priors.alpha_trans[(j, g)]).collect();
        trans.row_mut(j).copy_from_slice(&sample_dirichlet(rng, &alpha)?);
    }
    let mut labels = vec![0usize; dims.n_cells()];
    for i in 0..dims.n_subjects {
        let mut prev = sample_categorical(rng, &init_probs);
        labels[dims.cell(i, 0)] = prev;
        for t in 1..dims.n_times {
            prev = sample_categorical(rng, trans.row(prev));
            labels[dims.cell(i, t)] = prev;
        }
    }
    let mut factors = Mat::zeros(dims.n_cells(), l);
    let chols: Vec<Cholesky> = omega
        .iter()
        .enumerate()
        .map(|(g, om)| {
            om.cholesky()
                .map_err(not_pd(format!("covariance of cluster {}", g + 1)))
        })
        .collect::<Result<_>>()?;
    for (cell, &z) in labels.iter().enumerate() {
        let draw = sample_mvn(rng, mu.row(z), &chols[z]);
        factors.row_mut(cell).copy_from_slice(&draw);
    }

    let state = ModelState {
        loadings,
        uniquenesses: Uniquenesses::new(sigma2)?,
        tau2,
        clusters: ClusterParams { mu, omega },
        markov: MarkovParams { init_probs, trans },
        latent: LatentState { factors, labels },
    };
    validate_state(&state, dims)?;
    Ok(state)
}

/// Draw a synthetic panel from the observation equation at the given state:
/// y_it = B·x_it + ε_it with ε ~ N(0, diag(σ²)). Cells are visited
/// subject-major, so the draw is a fixed function of the stream.
pub fn sample_observations(
    state: &ModelState,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let b = state.loadings.as_mat();
    let sd: Vec<f64> = state
        .uniquenesses
        .values()
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let mut values = Vec::with_capacity(dims.n_cells() * dims.n_vars);
    for cell in 0..dims.n_cells() {
        let x = state.latent.factors.row(cell);
        for r in 0..dims.n_vars {
            let z: f64 = StandardNormal.sample(rng);
            values.push(dot(b.row(r), x) + sd[r] * z);
        }
    }
    Dataset::with_numbered_subjects(dims.n_subjects, dims.n_times, dims.n_vars, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{SimConfig, simulate_dataset};
    use proptest::prelude::*;

    fn stream(id: u64) -> RngStream {
        RngStream::new(0xC0FFEE, id)
    }

    fn dims(s: usize, t: usize, r: usize, l: usize, g: usize) -> ModelDims {
        ModelDims {
            n_subjects: s,
            n_times: t,
            n_vars: r,
            n_factors: l,
            n_clusters: g,
        }
    }

    /// A hand-assembled valid state for small test models.
    fn flat_state(d: &ModelDims) -> ModelState {
        let loadings = FactorLoadings::unit(d.n_vars, d.n_factors).unwrap();
        let uniquenesses = Uniquenesses::new(vec![1.0; d.n_vars]).unwrap();
        let omega = (0..d.n_clusters)
            .map(|_| SpdMatrix::diagonal(&vec![1.0; d.n_factors]))
            .collect();
        let g = d.n_clusters as f64;
        ModelState {
            loadings,
            uniquenesses,
            tau2: vec![1.0; d.n_factors],
            clusters: ClusterParams {
                mu: Mat::zeros(d.n_clusters, d.n_factors),
                omega,
            },
            markov: MarkovParams {
                init_probs: vec![1.0 / g; d.n_clusters],
                trans: Mat::from_fn(d.n_clusters, d.n_clusters, |_, _| 1.0 / g),
            },
            latent: LatentState {
                factors: Mat::zeros(d.n_cells(), d.n_factors),
                labels: vec![0; d.n_cells()],
            },
        }
    }

    fn constant_dataset(d: &ModelDims, value: f64) -> Dataset {
        Dataset::with_numbered_subjects(
            d.n_subjects,
            d.n_times,
            d.n_vars,
            vec![value; d.n_cells() * d.n_vars],
        )
        .unwrap()
    }

    #[test]
    fn factor_conditional_identity_loadings_halve_observation() {
        // Identity-like loadings (unit block over a zero row), unit noise and
        // unit score covariance at zero mean make the conditional exactly
        // N(y/2, I/2) in the loaded coordinates.
        let d = dims(1, 1, 3, 2, 1);
        let state = flat_state(&d);
        let cond = factor_conditionals(&state, &d).unwrap();
        let y = [0.8, -0.4, 7.0];
        let mean = cond.conditional_mean(0, &y);
        assert!((mean[0] - 0.4).abs() < 1e-12);
        assert!((mean[1] - -0.2).abs() < 1e-12);
        // Covariance columns: solving the precision against unit vectors.
        let c0 = cond.precisions[0].solve_vec(&[1.0, 0.0]);
        let c1 = cond.precisions[0].solve_vec(&[0.0, 1.0]);
        assert!((c0[0] - 0.5).abs() < 1e-12 && c0[1].abs() < 1e-12);
        assert!((c1[1] - 0.5).abs() < 1e-12 && c1[0].abs() < 1e-12);
    }

    #[test]
    fn factor_conditional_scalar_case() {
        // One factor loading on two variables as (1, 2): precision
        // 1 + 4 + 1 = 6, mean (y1 + 2 y2)/6.
        let d = dims(1, 1, 2, 1, 1);
        let mut state = flat_state(&d);
        state.loadings.set_free(1, 0, 2.0);
        let cond = factor_conditionals(&state, &d).unwrap();
        let mean = cond.conditional_mean(0, &[1.0, 1.0]);
        assert!((mean[0] - 0.5).abs() < 1e-12);
        let c = cond.precisions[0].solve_vec(&[1.0]);
        assert!((c[0] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn factor_draws_match_conditional_moments() {
        let d = dims(1, 1, 2, 1, 1);
        let mut state = flat_state(&d);
        state.loadings.set_free(1, 0, 2.0);
        let data = constant_dataset(&d, 1.0);
        let n = 40_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for rep in 0..n {
            update_factors(&mut state, &data, &d, &stream(1000 + rep), false).unwrap();
            let x = state.latent.factors[(0, 0)];
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let (true_mean, true_var) = (0.5, 1.0 / 6.0);
        let se_mean = (true_var / n as f64).sqrt();
        let se_var = true_var * (2.0 / n as f64).sqrt();
        assert!((mean - true_mean).abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - true_var).abs() < 4.0 * se_var, "var {var}");
    }

    #[test]
    fn parallel_and_serial_factor_updates_agree() {
        let config = SimConfig::four_cluster_benchmark(99);
        let mut small = config.clone();
        small.dims.n_subjects = 12;
        let (data, truth) = simulate_dataset(&small).unwrap();
        let mut serial = truth.as_model_state();
        let mut parallel = serial.clone();
        let d = small.dims;
        update_factors(&mut serial, &data, &d, &stream(7), false).unwrap();
        update_factors(&mut parallel, &data, &d, &stream(7), true).unwrap();
        assert_eq!(serial.latent.factors.data(), parallel.latent.factors.data());
        update_assignments(&mut serial, &d, false, &stream(8), false).unwrap();
        update_assignments(&mut parallel, &d, false, &stream(8), true).unwrap();
        assert_eq!(serial.latent.labels, parallel.latent.labels);
    }

    #[test]
    fn cluster_mean_posterior_scalar_case() {
        // One member at x = 2 with unit score variance against a unit
        // standard-normal prior: precision 2, mean 1.
        let d = dims(1, 1, 2, 1, 2);
        let mut state = flat_state(&d);
        state.latent.factors[(0, 0)] = 2.0;
        state.latent.labels[0] = 1;
        let priors = PriorSpec::reference(&d);
        let (chol, mean) = cluster_mean_posterior(&state, &priors, &d, 1).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-12);
        let c = chol.solve_vec(&[1.0]);
        assert!((c[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_cluster_mean_reduces_to_prior() {
        let d = dims(2, 2, 2, 1, 2);
        let mut state = flat_state(&d);
        // All cells in cluster 1, so cluster 2 is empty.
        let mut priors = PriorSpec::reference(&d);
        priors.mu_mean[(1, 0)] = 3.0;
        priors.mu_cov[1] = SpdMatrix::diagonal(&[4.0]);
        let (chol, mean) = cluster_mean_posterior(&state, &priors, &d, 1).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-12);
        let c = chol.solve_vec(&[1.0]);
        assert!((c[0] - 4.0).abs() < 1e-10);
        // And the draw distribution matches the prior moments.
        let n = 40_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for rep in 0..n {
            update_cluster_means(&mut state, &priors, &d, &mut stream(5000 + rep)).unwrap();
            let v = state.clusters.mu[(1, 0)];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((mean - 3.0).abs() < 4.0 * (4.0f64 / n as f64).sqrt());
        assert!((var - 4.0).abs() < 4.0 * 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn reference_variance_posterior_hand_case() {
        // Two members at ±1 around the mean with strength-4 unit prior:
        // shape (4 + 2)/2 = 3, rate (4 + 2)/2 = 3.
        let d = dims(2, 1, 2, 1, 2);
        let mut state = flat_state(&d);
        state.latent.factors[(0, 0)] = 1.0;
        state.latent.factors[(1, 0)] = -1.0;
        let mut priors = PriorSpec::reference(&d);
        priors.n_omega_diag = vec![4.0];
        priors.s2_omega_diag = vec![1.0];
        let (shape, rate) = reference_variance_posterior(&state, &priors, 0);
        assert!((shape - 3.0).abs() < 1e-12);
        assert!((rate - 3.0).abs() < 1e-12);
        // Empty reference cluster falls back to the prior.
        state.latent.labels = vec![1; 2];
        let (shape, rate) = reference_variance_posterior(&state, &priors, 0);
        assert!((shape - 2.0).abs() < 1e-12);
        assert!((rate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_posterior_scalar_case() {
        // One member with squared deviation 4, prior dof 3 and unit scale:
        // inverse-Wishart(4, 5).
        let d = dims(1, 1, 2, 1, 2);
        let mut state = flat_state(&d);
        state.latent.factors[(0, 0)] = 2.0;
        state.latent.labels[0] = 1;
        let mut priors = PriorSpec::reference(&d);
        priors.n_omega = 3.0;
        let (dof, scale) = cluster_covariance_posterior(&state, &priors, 1);
        assert!((dof - 4.0).abs() < 1e-12);
        assert!((scale.as_mat()[(0, 0)] - 5.0).abs() < 1e-12);
        // Empty cluster keeps the prior parameters.
        state.latent.labels[0] = 0;
        let (dof, scale) = cluster_covariance_posterior(&state, &priors, 1);
        assert!((dof - 3.0).abs() < 1e-12);
        assert!((scale.as_mat()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loadings_posterior_hand_cases() {
        // In-block row: four cells with score (1, 0) and residual target
        // 0.5 each give precision 1 + 4 = 5 and mean 2/5.
        let d = dims(4, 1, 3, 2, 1);
        let mut state = flat_state(&d);
        for cell in 0..4 {
            state.latent.factors[(cell, 0)] = 1.0;
        }
        let data = Dataset::with_numbered_subjects(
            4,
            1,
            3,
            (0..4).flat_map(|_| [0.0, 0.5, 0.0]).collect(),
        )
        .unwrap();
        let (gram, cross) = score_moments(&state, &data, &d);
        let (chol, mean) = loadings_row_posterior(&state, &d, &gram, &cross, 1)
            .unwrap()
            .unwrap();
        assert!((mean[0] - 0.4).abs() < 1e-12);
        assert!((chol.solve_vec(&[1.0])[0] - 0.2).abs() < 1e-12);

        // Below-block row: unit scores over four cells, precision 1 + 4 = 5,
        // mean Σy/5.
        let d = dims(4, 1, 2, 1, 1);
        let mut state = flat_state(&d);
        for cell in 0..4 {
            state.latent.factors[(cell, 0)] = 1.0;
        }
        let ys = [3.0, 1.0, -1.0, 5.0];
        let data = Dataset::with_numbered_subjects(
            4,
            1,
            2,
            ys.iter().flat_map(|&y| [0.0, y]).collect(),
        )
        .unwrap();
        let (gram, cross) = score_moments(&state, &data, &d);
        let (chol, mean) = loadings_row_posterior(&state, &d, &gram, &cross, 1)
            .unwrap()
            .unwrap();
        let expected = ys.iter().sum::<f64>() / 5.0;
        assert!((mean[0] - expected).abs() < 1e-12);
        assert!((chol.solve_vec(&[1.0])[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn loadings_update_keeps_structure() {
        let d = dims(5, 2, 4, 2, 1);
        let mut state = flat_state(&d);
        let data = constant_dataset(&d, 0.3);
        update_loadings(&mut state, &data, &d, &mut stream(3)).unwrap();
        validate_state(&state, &d).unwrap();
        let b = state.loadings.as_mat();
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(1, 1)], 1.0);
        assert_eq!(b[(0, 1)], 0.0);
        assert_ne!(b[(1, 0)], 0.0);
    }

    #[test]
    fn uniqueness_posterior_hand_case() {
        // Single cell, loading row (2) on one factor at x = 1, y = 2 + √3:
        // squared residual 3 with the reference prior gives shape 1.6 and
        // rate 1.55.
        let d = dims(1, 1, 2, 1, 1);
        let mut state = flat_state(&d);
        state.loadings.set_free(1, 0, 2.0);
        state.latent.factors[(0, 0)] = 1.0;
        let data = Dataset::with_numbered_subjects(
            1,
            1,
            2,
            vec![1.0, 2.0 + 3.0f64.sqrt()],
        )
        .unwrap();
        let priors = PriorSpec::reference(&d);
        let (shape, rate) = uniqueness_posterior(&state, &data, &priors, &d, 1);
        assert!((shape - 1.6).abs() < 1e-12);
        assert!((rate - 1.55).abs() < 1e-12);
    }

    #[test]
    fn loading_scale_posterior_hand_cases() {
        // Zero column over 20 variables: shape (1 + 19)/2 = 10, rate 1/2.
        let d = dims(1, 1, 20, 3, 1);
        let state = flat_state(&d);
        let priors = PriorSpec::reference(&d);
        let (shape, rate) = loading_scale_posterior(&state, &priors, &d, 0);
        assert!((shape - 10.0).abs() < 1e-12);
        assert!((rate - 0.5).abs() < 1e-12);

        // Free entries (1, 1) in the first column of a 3-variable model:
        // shape 3/2, rate 3/2.
        let d = dims(1, 1, 3, 2, 1);
        let mut state = flat_state(&d);
        state.loadings.set_free(1, 0, 1.0);
        state.loadings.set_free(2, 0, 1.0);
        let priors = PriorSpec::reference(&d);
        let (shape, rate) = loading_scale_posterior(&state, &priors, &d, 0);
        assert!((shape - 1.5).abs() < 1e-12);
        assert!((rate - 1.5).abs() < 1e-12);
    }

    #[test]
    fn initial_probs_match_dirichlet_moments() {
        // Counts (3, 1) with concentration (2, 2): Dirichlet(5, 3), mean
        // 5/8 on the first coordinate.
        let d = dims(4, 1, 2, 1, 2);
        let mut state = flat_state(&d);
        state.latent.labels = vec![0, 0, 0, 1];
        let priors = PriorSpec::reference(&d);
        let n = 30_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for rep in 0..n {
            update_initial_probs(&mut state, &priors, &d, &mut stream(9000 + rep)).unwrap();
            let p = state.markov.init_probs[0];
            sum += p;
            sum_sq += p * p;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let (tm, tv) = (0.625, 0.625 * 0.375 / 9.0);
        assert!((mean - tm).abs() < 4.0 * (tv / n as f64).sqrt(), "mean {mean}");
        assert!((var - tv).abs() < 4.0 * tv * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn transition_rows_match_dirichlet_moments() {
        // One subject over three times labeled (1, 2, 2): one move out of
        // each cluster, each row becomes Dirichlet(2, 3).
        let d = dims(1, 3, 2, 1, 2);
        let mut state = flat_state(&d);
        state.latent.labels = vec![0, 1, 1];
        let priors = PriorSpec::reference(&d);
        let n = 30_000;
        let mut sums = [0.0f64; 2];
        for rep in 0..n {
            update_transition_matrix(&mut state, &priors, &d, &mut stream(11_000 + rep)).unwrap();
            sums[0] += state.markov.trans[(0, 0)];
            sums[1] += state.markov.trans[(1, 0)];
        }
        let se = (0.4 * 0.6 / 6.0 / n as f64).sqrt();
        assert!((sums[0] / n as f64 - 0.4).abs() < 4.0 * se);
        assert!((sums[1] / n as f64 - 0.4).abs() < 4.0 * se);
    }

    #[test]
    fn assignment_final_time_uses_incoming_transition() {
        // Two clusters with equal densities at the last time point and
        // identical transition rows (0.75, 0.25): the conditional is exactly
        // those transition weights whatever the first label does.
        let d = dims(1, 2, 2, 1, 2);
        let mut state = flat_state(&d);
        state.clusters.mu = Mat::from_rows(&[vec![0.0], vec![2.0]]);
        state.latent.factors[(0, 0)] = 1.0; // t = 1 score, also equidistant
        state.latent.factors[(1, 0)] = 1.0; // t = 2 score
        state.markov.trans = Mat::from_rows(&[vec![0.75, 0.25], vec![0.75, 0.25]]);
        let n = 100_000;
        let mut first = 0usize;
        for rep in 0..n {
            update_assignments(&mut state, &d, false, &stream(200_000 + rep), false).unwrap();
            if state.latent.labels[1] == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / n as f64;
        let se = (0.75 * 0.25 / n as f64).sqrt();
        assert!((freq - 0.75).abs() < 4.0 * se, "frequency {freq}");
    }

    #[test]
    fn symmetric_clusters_split_assignments_evenly() {
        let d = dims(1, 1, 2, 1, 2);
        let mut state = flat_state(&d);
        state.latent.factors[(0, 0)] = 0.7;
        let n = 100_000;
        let mut first = 0usize;
        for rep in 0..n {
            update_assignments(&mut state, &d, true, &stream(300_000 + rep), false).unwrap();
            if state.latent.labels[0] == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / n as f64;
        assert!((freq - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt(), "frequency {freq}");
    }

    #[test]
    fn single_cluster_assignments_are_constant() {
        let d = dims(3, 2, 2, 1, 1);
        let mut state = flat_state(&d);
        update_assignments(&mut state, &d, false, &stream(17), false).unwrap();
        assert!(state.latent.labels.iter().all(|&z| z == 0));
    }

    #[test]
    fn distant_clusters_never_produce_non_finite_weights() {
        // A score 1000 standard deviations from one cluster must still give
        // a clean draw for the other.
        let d = dims(1, 1, 2, 1, 2);
        let mut state = flat_state(&d);
        state.clusters.mu = Mat::from_rows(&[vec![0.0], vec![1000.0]]);
        state.latent.factors[(0, 0)] = 1000.0;
        update_assignments(&mut state, &d, false, &stream(23), false).unwrap();
        assert_eq!(state.latent.labels[0], 1);
        validate_state(&state, &d).unwrap();
    }

    #[test]
    fn every_update_preserves_state_validity() {
        let mut config = SimConfig::four_cluster_benchmark(7);
        config.dims.n_subjects = 10;
        config.dims.n_times = 3;
        let (data, truth) = simulate_dataset(&config).unwrap();
        let d = config.dims;
        let priors = PriorSpec::reference(&d);
        let mut state = truth.as_model_state();
        let sampler = SamplerConfig {
            total_iterations: 40,
            burn_in: 0,
            thin: 1,
            seed: 12,
            parallel_subjects: false,
            include_initial_prob_in_z1: false,
        };
        for sweep in 1..=40 {
            gibbs_sweep(&mut state, &data, &d, &priors, &sampler, sweep).unwrap();
            validate_state(&state, &d).unwrap();
        }
    }

    #[test]
    fn runs_are_deterministic_in_the_seed() {
        let mut config = SimConfig::four_cluster_benchmark(21);
        config.dims.n_subjects = 8;
        config.dims.n_times = 3;
        let (data, truth) = simulate_dataset(&config).unwrap();
        let priors = PriorSpec::reference(&config.dims);
        let sampler = SamplerConfig {
            total_iterations: 30,
            burn_in: 10,
            thin: 2,
            seed: 77,
            parallel_subjects: true,
            include_initial_prob_in_z1: false,
        };
        let a = run_gibbs(&data, &priors, truth.as_model_state(), &sampler, ChainStorage::Memory)
            .unwrap();
        let b = run_gibbs(&data, &priors, truth.as_model_state(), &sampler, ChainStorage::Memory)
            .unwrap();
        assert_eq!(a.n_stored(), sampler.n_kept());
        for (ba, bb) in a.blocks().iter().zip(b.blocks()) {
            for col in 0..ba.columns().len() {
                assert_eq!(ba.load_column(col).unwrap(), bb.load_column(col).unwrap());
            }
        }
        assert_eq!(
            a.assignment_frequencies().unwrap(),
            b.assignment_frequencies().unwrap()
        );
        let mut other = sampler.clone();
        other.seed = 78;
        let c = run_gibbs(&data, &priors, truth.as_model_state(), &other, ChainStorage::Memory)
            .unwrap();
        let same = a.block("sigma2").load_column(0).unwrap() == c.block("sigma2").load_column(0).unwrap();
        assert!(!same, "different seeds should not reproduce the chain");
    }

    #[test]
    fn config_validation_and_keep_arithmetic() {
        let mut c = SamplerConfig::default();
        assert_eq!(c.n_kept(), 4_000);
        c.total_iterations = 100;
        c.burn_in = 100;
        assert!(c.validate().is_err());
        c.burn_in = 20;
        c.thin = 0;
        assert!(c.validate().is_err());
        c.thin = 7;
        c.validate().unwrap();
        assert_eq!(c.n_kept(), (100 - 20) / 7);
        let kept: Vec<u64> = (1..=100).filter(|&s| c.keeps(s)).collect();
        assert_eq!(kept.len(), c.n_kept());
        assert_eq!(kept[0], 27);
        assert_eq!(*kept.last().unwrap(), 97);
    }

    #[test]
    fn prior_state_and_observations_are_valid_and_deterministic() {
        let d = dims(3, 2, 3, 1, 2);
        let mut priors = PriorSpec::reference(&d);
        priors.n_sigma = 6.0;
        priors.n_omega = 6.0;
        let s1 = sample_prior_state(&d, &priors, &mut stream(31)).unwrap();
        let s2 = sample_prior_state(&d, &priors, &mut stream(31)).unwrap();
        validate_state(&s1, &d).unwrap();
        assert_eq!(s1.latent.labels, s2.latent.labels);
        assert_eq!(s1.clusters.mu.data(), s2.clusters.mu.data());
        let y1 = sample_observations(&s1, &d, &mut stream(32)).unwrap();
        let y2 = sample_observations(&s1, &d, &mut stream(32)).unwrap();
        assert_eq!(y1.obs(2, 1), y2.obs(2, 1));
        assert!(y1.obs(0, 0).iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn log_weight_normalization_sums_to_one(
            raw in proptest::collection::vec(-700.0f64..700.0, 1..6)
        ) {
            let mut w = raw.clone();
            normalize_log_weights(&mut w).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
        }
    }
}
