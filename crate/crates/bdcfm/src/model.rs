//! Model vocabulary: panel data, parameter blocks, sampler state, prior
//! hyperparameters, counting statistics, and chain storage.
//!
//! Cluster labels and all other indices are zero-based everywhere inside the
//! crate; they are converted to one-based form only at file and report
//! boundaries (chain column names, CSV output, truth files).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Mat, SpdMatrix};

/// Panel dimensions: `S` subjects observed on `R` variables at `T` common
/// time points, modelled with `L` factors and `G` clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_subjects: usize,
    pub n_times: usize,
    pub n_vars: usize,
    pub n_factors: usize,
    pub n_clusters: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_times == 0 || self.n_clusters == 0 {
            return Err(Error::InvalidParameter(
                "subjects, times, and clusters must all be positive".into(),
            ));
        }
        if self.n_factors == 0 {
            return Err(Error::InvalidParameter("need at least one factor".into()));
        }
        if self.n_factors >= self.n_vars {
            return Err(Error::InvalidParameter(format!(
                "need fewer factors than variables, got L={} with R={}",
                self.n_factors, self.n_vars
            )));
        }
        Ok(())
    }

    /// Flat index of the (subject, time) cell.
    #[inline]
    pub fn cell(&self, subject: usize, time: usize) -> usize {
        debug_assert!(subject < self.n_subjects && time < self.n_times);
        subject * self.n_times + time
    }

    pub fn n_cells(&self) -> usize {
        self.n_subjects * self.n_times
    }
}

/// A complete S×T×R panel. Storage is subject-major, then time, then
/// variable.
#[derive(Debug, Clone)]
pub struct Dataset {
    subject_ids: Vec<String>,
    n_times: usize,
    n_vars: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(
        subject_ids: Vec<String>,
        n_times: usize,
        n_vars: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let s = subject_ids.len();
        if s == 0 || n_times == 0 || n_vars == 0 {
            return Err(Error::InvalidParameter(
                "dataset needs at least one subject, time point, and variable".into(),
            ));
        }
        if values.len() != s * n_times * n_vars {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for {} subjects x {} times x {} variables, got {}",
                s * n_times * n_vars,
                s,
                n_times,
                n_vars,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let subject = pos / (n_times * n_vars);
            let rem = pos % (n_times * n_vars);
            return Err(Error::NonFiniteValue(format!(
                "subject {}, time {}, variable {}",
                subject_ids[subject],
                rem / n_vars + 1,
                rem % n_vars + 1
            )));
        }
        Ok(Dataset {
            subject_ids,
            n_times,
            n_vars,
            values,
        })
    }

    /// Synthetic panels get subject ids "1".."S".
    pub fn with_numbered_subjects(
        n_subjects: usize,
        n_times: usize,
        n_vars: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let ids = (1..=n_subjects).map(|i| i.to_string()).collect();
        Dataset::new(ids, n_times, n_vars, values)
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Observation vector for one (subject, time) cell.
    pub fn obs(&self, subject: usize, time: usize) -> &[f64] {
        let start = (subject * self.n_times + time) * self.n_vars;
        &self.values[start..start + self.n_vars]
    }

    /// All observations stacked into an (S·T)×R matrix, subject-major.
    pub fn stacked(&self) -> Mat {
        let rows = self.n_subjects() * self.n_times;
        Mat::from_fn(rows, self.n_vars, |row, r| {
            self.values[row * self.n_vars + r]
        })
    }

    /// Per-variable means and sample standard deviations over all cells.
    pub fn column_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = (self.n_subjects() * self.n_times) as f64;
        let mut means = vec![0.0; self.n_vars];
        for cell in self.values.chunks_exact(self.n_vars) {
            for (m, &v) in means.iter_mut().zip(cell) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let mut sds = vec![0.0; self.n_vars];
        for cell in self.values.chunks_exact(self.n_vars) {
            for (s, (&v, &m)) in sds.iter_mut().zip(cell.iter().zip(&means)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut sds {
            *s = (*s / (n - 1.0).max(1.0)).sqrt();
        }
        (means, sds)
    }

    /// Z-score every variable. Returns the standardized panel along with the
    /// means and standard deviations used.
    pub fn standardized(&self) -> Result<(Dataset, Vec<f64>, Vec<f64>)> {
        let (means, sds) = self.column_moments();
        if let Some(r) = sds.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variable {} is constant; cannot standardize",
                r + 1
            )));
        }
        let values = self
            .values
            .chunks_exact(self.n_vars)
            .flat_map(|cell| {
                cell.iter()
                    .zip(means.iter().zip(&sds))
                    .map(|(&v, (&m, &s))| (v - m) / s)
            })
            .collect();
        let ds = Dataset::new(self.subject_ids.clone(), self.n_times, self.n_vars, values)?;
        Ok((ds, means, sds))
    }
}

/// R×L loading matrix constrained to be lower unitriangular in its top L×L
/// block: unit diagonal, zeros above the diagonal. Entry (r, l) is free
/// exactly when `l < r` (zero-based).
#[derive(Debug, Clone)]
pub struct FactorLoadings(Mat);

impl FactorLoadings {
    pub fn new(m: Mat) -> Result<Self> {
        let (r, l) = (m.rows(), m.cols());
        if l >= r {
            return Err(Error::DimensionMismatch(format!(
                "loadings need more rows than columns, got {r}x{l}"
            )));
        }
        for row in 0..l {
            if m[(row, row)] != 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "loading diagonal entry ({},{}) must be exactly 1, got {}",
                    row + 1,
                    row + 1,
                    m[(row, row)]
                )));
            }
            for col in (row + 1)..l {
                if m[(row, col)] != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "loading entry ({},{}) above the diagonal must be exactly 0, got {}",
                        row + 1,
                        col + 1,
                        m[(row, col)]
                    )));
                }
            }
        }
        if let Some(bad) = m.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("loading value {bad}")));
        }
        Ok(FactorLoadings(m))
    }

    /// Identity-like starting point: unit diagonal, zeros elsewhere.
    pub fn unit(n_vars: usize, n_factors: usize) -> Result<Self> {
        FactorLoadings::new(Mat::from_fn(n_vars, n_factors, |r, l| {
            if r == l {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn n_vars(&self) -> usize {
        self.0.rows()
    }

    pub fn n_factors(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    #[inline]
    pub fn is_free(row: usize, col: usize) -> bool {
        col < row
    }

    /// Number of unconstrained entries for given dimensions.
    pub fn n_free(n_vars: usize, n_factors: usize) -> usize {
        (0..n_vars).map(|r| r.min(n_factors)).sum()
    }

    /// Free entries in row-major order as (row, col, value).
    pub fn free_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let l = self.n_factors();
        (0..self.n_vars()).flat_map(move |r| (0..r.min(l)).map(move |c| (r, c, self.0[(r, c)])))
    }

    /// Overwrite one free entry. Constrained positions are rejected in debug
    /// builds and silently ignored in release builds.
    pub fn set_free(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(Self::is_free(row, col), "entry ({row},{col}) is constrained");
        if Self::is_free(row, col) {
            self.0[(row, col)] = value;
        }
    }

    /// Replace an entire row's free prefix (used by the row-wise updates).
    pub fn set_row_free(&mut self, row: usize, values: &[f64]) {
        let n_free = row.min(self.n_factors());
        debug_assert_eq!(values.len(), n_free);
        for (c, &v) in values.iter().enumerate().take(n_free) {
            self.0[(row, c)] = v;
        }
    }
}

/// Per-variable idiosyncratic variances, all strictly positive.
#[derive(Debug, Clone)]
pub struct Uniquenesses(Vec<f64>);

impl Uniquenesses {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "uniquenesses must be positive and finite, got {values:?}"
            )));
        }
        Ok(Uniquenesses(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        debug_assert!(value > 0.0);
        self.0[idx] = value;
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cluster locations and scales: a G×L matrix of means and one L×L
/// covariance per cluster. The first cluster's covariance is constrained to
/// be diagonal; that, together with the unitriangular loadings, pins down
/// the rotation/scale ambiguity of the factor representation.
#[derive(Debug, Clone)]
pub struct ClusterParams {
    pub mu: Mat,
    pub omega: Vec<SpdMatrix>,
}

impl ClusterParams {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let (g, l) = (dims.n_clusters, dims.n_factors);
        if self.mu.rows() != g || self.mu.cols() != l {
            return Err(Error::DimensionMismatch(format!(
                "cluster means must be {}x{}, got {}x{}",
                g,
                l,
                self.mu.rows(),
                self.mu.cols()
            )));
        }
        if self.omega.len() != g {
            return Err(Error::DimensionMismatch(format!(
                "expected {} cluster covariances, got {}",
                g,
                self.omega.len()
            )));
        }
        for (k, om) in self.omega.iter().enumerate() {
            if om.dim() != l {
                return Err(Error::DimensionMismatch(format!(
                    "cluster {} covariance must be {}x{}, got {}x{}",
                    k + 1,
                    l,
                    l,
                    om.dim(),
                    om.dim()
                )));
            }
            om.cholesky().map_err(|_| Error::NotPositiveDefinite {
                context: format!("covariance of cluster {}", k + 1),
            })?;
        }
        let first = self.omega[0].as_mat();
        for i in 0..l {
            for j in 0..l {
                if i != j && first[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "reference-cluster covariance must be diagonal; entry ({},{}) = {}",
                        i + 1,
                        j + 1,
                        first[(i, j)]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Markov regime dynamics: initial distribution and row-stochastic
/// transition matrix.
#[derive(Debug, Clone)]
pub struct MarkovParams {
    pub init_probs: Vec<f64>,
    pub trans: Mat,
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "{what} has a negative or non-finite entry: {p:?}"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

impl MarkovParams {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let g = dims.n_clusters;
        if self.init_probs.len() != g || self.trans.rows() != g || self.trans.cols() != g {
            return Err(Error::DimensionMismatch(format!(
                "Markov parameters must have {} states",
                g
            )));
        }
        check_simplex(&self.init_probs, "initial distribution")?;
        for j in 0..g {
            check_simplex(self.trans.row(j), &format!("transition row {}", j + 1))?;
        }
        Ok(())
    }
}

/// Latent variables: one factor vector and one cluster label per
/// (subject, time) cell. Factor rows are indexed by `ModelDims::cell`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub factors: Mat,
    pub labels: Vec<usize>,
}

impl LatentState {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let cells = dims.n_cells();
        if self.factors.rows() != cells || self.factors.cols() != dims.n_factors {
            return Err(Error::DimensionMismatch(format!(
                "factor scores must be {}x{}, got {}x{}",
                cells,
                dims.n_factors,
                self.factors.rows(),
                self.factors.cols()
            )));
        }
        if self.labels.len() != cells {
            return Err(Error::DimensionMismatch(format!(
                "expected {} labels, got {}",
                cells,
                self.labels.len()
            )));
        }
        if let Some(bad) = self.factors.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("factor score {bad}")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&z| z >= dims.n_clusters) {
            return Err(Error::InvalidParameter(format!(
                "cluster label {} out of range (G = {})",
                bad + 1,
                dims.n_clusters
            )));
        }
        Ok(())
    }
}

/// The complete set of model unknowns visited by the sampler.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub loadings: FactorLoadings,
    pub uniquenesses: Uniquenesses,
    /// Column-wise loading shrinkage scales τ²_l.
    pub tau2: Vec<f64>,
    pub clusters: ClusterParams,
    pub markov: MarkovParams,
    pub latent: LatentState,
}

/// Check every structural invariant of a sampler state: loading shape,
/// positive variances, SPD covariances with a diagonal reference cluster,
/// simplex rows, label ranges, finite scores.
pub fn validate_state(state: &ModelState, dims: &ModelDims) -> Result<()> {
    dims.validate()?;
    if state.loadings.n_vars() != dims.n_vars || state.loadings.n_factors() != dims.n_factors {
        return Err(Error::DimensionMismatch(format!(
            "loadings must be {}x{}, got {}x{}",
            dims.n_vars,
            dims.n_factors,
            state.loadings.n_vars(),
            state.loadings.n_factors()
        )));
    }
    // Re-run the constructor checks: the matrix may have been edited in place.
    FactorLoadings::new(state.loadings.as_mat().clone())?;
    if state.uniquenesses.len() != dims.n_vars {
        return Err(Error::DimensionMismatch(format!(
            "expected {} uniquenesses, got {}",
            dims.n_vars,
            state.uniquenesses.len()
        )));
    }
    Uniquenesses::new(state.uniquenesses.values().to_vec())?;
    if state.tau2.len() != dims.n_factors {
        return Err(Error::DimensionMismatch(format!(
            "expected {} shrinkage scales, got {}",
            dims.n_factors,
            state.tau2.len()
        )));
    }
    if state.tau2.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "shrinkage scales must be positive and finite, got {:?}",
            state.tau2
        )));
    }
    state.clusters.validate(dims)?;
    state.markov.validate(dims)?;
    state.latent.validate(dims)?;
    Ok(())
}

/// Counting statistics of one label configuration, shared by several
/// conditional updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepStats {
    /// Number of subjects starting in each cluster (length G).
    pub n_first: Vec<f64>,
    /// G×G transition counts: entry (j, g) counts moves from j to g.
    pub transitions: Mat,
    /// T×G occupancy: entry (t, g) counts subjects in cluster g at time t.
    pub occupancy: Mat,
    /// Column sums of `occupancy` (length G).
    pub cluster_totals: Vec<f64>,
}

pub fn compute_sweep_stats(labels: &[usize], dims: &ModelDims) -> SweepStats {
    let (s, t_len, g) = (dims.n_subjects, dims.n_times, dims.n_clusters);
    debug_assert_eq!(labels.len(), s * t_len);
    let mut n_first = vec![0.0; g];
    let mut transitions = Mat::zeros(g, g);
    let mut occupancy = Mat::zeros(t_len, g);
    for i in 0..s {
        let row = &labels[i * t_len..(i + 1) * t_len];
        n_first[row[0]] += 1.0;
        for t in 0..t_len {
            occupancy[(t, row[t])] += 1.0;
            if t + 1 < t_len {
                transitions[(row[t], row[t + 1])] += 1.0;
            }
        }
    }
    let cluster_totals = (0..g)
        .map(|k| (0..t_len).map(|t| occupancy[(t, k)]).sum())
        .collect();
    SweepStats {
        n_first,
        transitions,
        occupancy,
        cluster_totals,
    }
}

/// Prior hyperparameters for every parameter block. The empirical-Bayes
/// pipeline fills the data-driven pieces (cluster-mean centers and scale
/// matrices); `reference` gives neutral unit-scale values for direct use.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    /// Prior mean of each cluster location (G×L).
    pub mu_mean: Mat,
    /// Prior covariance of each cluster location (one per cluster).
    pub mu_cov: Vec<SpdMatrix>,
    /// Per-factor IG strength for the diagonal reference-cluster variances.
    pub n_omega_diag: Vec<f64>,
    /// Per-factor IG scale s²_ω for the reference-cluster variances.
    pub s2_omega_diag: Vec<f64>,
    /// Inverse-Wishart degrees of freedom for the non-reference covariances.
    pub n_omega: f64,
    /// Inverse-Wishart scale per cluster; entry 0 is unused (the reference
    /// cluster has the per-diagonal IG prior above).
    pub omega_scale: Vec<SpdMatrix>,
    /// IG strength / scale for the uniquenesses.
    pub n_sigma: f64,
    pub s2_sigma: f64,
    /// IG strength / scale for the loading-column shrinkage.
    pub n_tau: f64,
    pub s2_tau: f64,
    /// Dirichlet concentration for the initial distribution (length G).
    pub alpha_init: Vec<f64>,
    /// Dirichlet concentrations for the transition rows (G×G).
    pub alpha_trans: Mat,
}

impl PriorSpec {
    /// Default strengths with neutral unit-scale centers: zero prior means
    /// with identity covariances and identity inverse-Wishart scales. The
    /// strengths are the model's standard choices: weak τ² and σ² priors,
    /// shape-2 reference variances, and the smallest inverse-Wishart
    /// strength whose mean equals its scale matrix.
    pub fn reference(dims: &ModelDims) -> Self {
        let l = dims.n_factors;
        let g = dims.n_clusters;
        PriorSpec {
            mu_mean: Mat::zeros(g, l),
            mu_cov: (0..g).map(|_| SpdMatrix::diagonal(&vec![1.0; l])).collect(),
            n_omega_diag: vec![4.0; l],
            s2_omega_diag: vec![1.0; l],
            n_omega: l as f64 + 2.0,
            omega_scale: (0..g).map(|_| SpdMatrix::diagonal(&vec![1.0; l])).collect(),
            n_sigma: 2.2,
            s2_sigma: 0.1 / 2.2,
            n_tau: 1.0,
            s2_tau: 1.0,
            alpha_init: vec![2.0; g],
            alpha_trans: Mat::from_fn(g, g, |_, _| 2.0),
        }
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let (g, l) = (dims.n_clusters, dims.n_factors);
        if self.mu_mean.rows() != g || self.mu_mean.cols() != l || self.mu_cov.len() != g {
            return Err(Error::DimensionMismatch(
                "cluster-location prior has wrong dimensions".into(),
            ));
        }
        for cov in &self.mu_cov {
            if cov.dim() != l {
                return Err(Error::DimensionMismatch(
                    "cluster-location prior covariance has wrong dimensions".into(),
                ));
            }
        }
        if self.n_omega_diag.len() != l || self.s2_omega_diag.len() != l {
            return Err(Error::DimensionMismatch(
                "reference-cluster variance prior has wrong length".into(),
            ));
        }
        if self.omega_scale.len() != g || self.omega_scale.iter().any(|s| s.dim() != l) {
            return Err(Error::DimensionMismatch(
                "covariance prior scale has wrong dimensions".into(),
            ));
        }
        let positives = self
            .n_omega_diag
            .iter()
            .chain(&self.s2_omega_diag)
            .chain([
                &self.n_omega,
                &self.n_sigma,
                &self.s2_sigma,
                &self.n_tau,
                &self.s2_tau,
            ])
            .all(|v| v.is_finite() && *v > 0.0);
        if !positives {
            return Err(Error::InvalidParameter(
                "prior strengths and scales must be positive and finite".into(),
            ));
        }
        if self.n_omega <= l as f64 - 1.0 {
            return Err(Error::InvalidParameter(format!(
                "inverse-Wishart strength must exceed L - 1 = {}, got {}",
                l as f64 - 1.0,
                self.n_omega
            )));
        }
        if self.alpha_init.len() != g
            || self.alpha_trans.rows() != g
            || self.alpha_trans.cols() != g
        {
            return Err(Error::DimensionMismatch(
                "Dirichlet concentration has wrong dimensions".into(),
            ));
        }
        if self.alpha_init.iter().any(|a| !(a.is_finite() && *a > 0.0))
            || self
                .alpha_trans
                .data()
                .iter()
                .any(|a| !(a.is_finite() && *a > 0.0))
        {
            return Err(Error::InvalidParameter(
                "Dirichlet concentrations must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Chain storage
// ---------------------------------------------------------------------------

/// Where stored draws live while the sampler runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainStorage {
    /// Keep all stored draws in memory; files are written on demand.
    Memory,
    /// Spool stored draws to CSV files in this directory as the sampler
    /// runs, flushing every `SPOOL_FLUSH_ROWS` rows. Peak memory stays
    /// bounded regardless of chain length.
    Disk(PathBuf),
}

const SPOOL_FLUSH_ROWS: usize = 1000;

/// One parameter block of the chain: a named CSV-shaped table filled one row
/// per stored draw.
#[derive(Debug)]
pub struct ChainBlock {
    file_stem: &'static str,
    columns: Vec<String>,
    rows: Vec<f64>,
    n_rows: usize,
    spool: Option<SpoolFile>,
}

#[derive(Debug)]
struct SpoolFile {
    path: PathBuf,
    file: fs::File,
}

fn format_row(row: &[f64]) -> String {
    let mut line = String::new();
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        // Shortest representation that round-trips through f64.
        line.push_str(&format!("{v}"));
    }
    line.push('\n');
    line
}

impl ChainBlock {
    fn new(file_stem: &'static str, columns: Vec<String>, storage: &ChainStorage) -> Result<Self> {
        let spool = match storage {
            ChainStorage::Memory => None,
            ChainStorage::Disk(dir) => {
                let path = dir.join(format!("{file_stem}.csv"));
                let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                file.write_all(format!("{}\n", columns.join(",")).as_bytes())
                    .map_err(|e| Error::io(&path, e))?;
                Some(SpoolFile { path, file })
            }
        };
        Ok(ChainBlock {
            file_stem,
            columns,
            rows: Vec::new(),
            n_rows: 0,
            spool,
        })
    }

    pub fn file_stem(&self) -> &'static str {
        self.file_stem
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn push_row(&mut self, row: &[f64]) -> Result<()> {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.extend_from_slice(row);
        self.n_rows += 1;
        if self.spool.is_some() && self.n_rows % SPOOL_FLUSH_ROWS == 0 {
            self.flush_pending()?;
        }
        Ok(())
    }

    fn flush_pending(&mut self) -> Result<()> {
        let Some(spool) = &mut self.spool else {
            return Ok(());
        };
        let width = self.columns.len();
        let mut buf = String::new();
        for row in self.rows.chunks_exact(width) {
            buf.push_str(&format_row(row));
        }
        spool
            .file
            .write_all(buf.as_bytes())
            .map_err(|e| Error::io(&spool.path, e))?;
        self.rows.clear();
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if self.spool.is_some() {
            self.flush_pending()?;
            let spool = self.spool.as_mut().unwrap();
            spool.file.flush().map_err(|e| Error::io(&spool.path, e))?;
        }
        Ok(())
    }

    /// Write the block to `dir/<stem>.csv`. In disk mode the file already
    /// lives there; writing to a different directory copies it.
    fn write_to(&self, dir: &Path) -> Result<()> {
        let dest = dir.join(format!("{}.csv", self.file_stem));
        match &self.spool {
            Some(spool) => {
                if spool.path != dest {
                    fs::copy(&spool.path, &dest).map_err(|e| Error::io(&dest, e))?;
                }
            }
            None => {
                let mut buf = format!("{}\n", self.columns.join(","));
                for row in self.rows.chunks_exact(self.columns.len()) {
                    buf.push_str(&format_row(row));
                }
                fs::write(&dest, buf).map_err(|e| Error::io(&dest, e))?;
            }
        }
        Ok(())
    }

    /// All stored draws of one column, oldest first.
    pub fn load_column(&self, col: usize) -> Result<Vec<f64>> {
        assert!(col < self.columns.len());
        match &self.spool {
            None => {
                let width = self.columns.len();
                Ok(self.rows.chunks_exact(width).map(|r| r[col]).collect())
            }
            Some(spool) => {
                let text =
                    fs::read_to_string(&spool.path).map_err(|e| Error::io(&spool.path, e))?;
                let mut out = Vec::with_capacity(self.n_rows);
                for (lineno, line) in text.lines().enumerate().skip(1) {
                    let field = line.split(',').nth(col).ok_or_else(|| {
                        Error::NonFiniteValue(format!(
                            "{}: line {} has too few fields",
                            spool.path.display(),
                            lineno + 1
                        ))
                    })?;
                    let v: f64 = field.parse().map_err(|_| {
                        Error::NonFiniteValue(format!(
                            "{}: line {} column {}",
                            spool.path.display(),
                            lineno + 1,
                            col + 1
                        ))
                    })?;
                    out.push(v);
                }
                Ok(out)
            }
        }
    }
}

/// Identifiers of the seven parameter blocks stored in a chain.
pub const CHAIN_BLOCK_STEMS: [&str; 7] =
    ["loadings", "sigma2", "tau2", "mu", "omega", "p", "q"];

/// Stored posterior draws of every parameter block, plus cluster-assignment
/// frequencies. Latent factor scores are not stored — they are
/// high-dimensional nuisance draws — but label draws are folded into the
/// per-cell frequency tensor.
#[derive(Debug)]
pub struct ChainOutput {
    dims: ModelDims,
    blocks: Vec<ChainBlock>,
    /// Per-(cell, cluster) count of stored draws, length S·T·G.
    z_counts: Vec<u64>,
    n_stored: usize,
}

fn loading_columns(dims: &ModelDims) -> Vec<String> {
    let mut cols = Vec::new();
    for r in 0..dims.n_vars {
        for l in 0..r.min(dims.n_factors) {
            cols.push(format!("B[{},{}]", r + 1, l + 1));
        }
    }
    cols
}

fn omega_columns(dims: &ModelDims) -> Vec<String> {
    let l = dims.n_factors;
    let mut cols: Vec<String> = (0..l)
        .map(|k| format!("Omega[1,{},{}]", k + 1, k + 1))
        .collect();
    for g in 1..dims.n_clusters {
        for i in 0..l {
            for j in i..l {
                cols.push(format!("Omega[{},{},{}]", g + 1, i + 1, j + 1));
            }
        }
    }
    cols
}

impl ChainOutput {
    pub fn new(dims: ModelDims, storage: ChainStorage) -> Result<Self> {
        dims.validate()?;
        if let ChainStorage::Disk(dir) = &storage {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (g, l) = (dims.n_clusters, dims.n_factors);
        let mut mu_cols = Vec::new();
        let mut q_cols = Vec::new();
        for gi in 0..g {
            for li in 0..l {
                mu_cols.push(format!("mu[{},{}]", gi + 1, li + 1));
            }
            for gj in 0..g {
                q_cols.push(format!("Q[{},{}]", gi + 1, gj + 1));
            }
        }
        let blocks = vec![
            ChainBlock::new("loadings", loading_columns(&dims), &storage)?,
            ChainBlock::new(
                "sigma2",
                (1..=dims.n_vars).map(|r| format!("sigma2[{r}]")).collect(),
                &storage,
            )?,
            ChainBlock::new(
                "tau2",
                (1..=l).map(|k| format!("tau2[{k}]")).collect(),
                &storage,
            )?,
            ChainBlock::new("mu", mu_cols, &storage)?,
            ChainBlock::new("omega", omega_columns(&dims), &storage)?,
            ChainBlock::new(
                "p",
                (1..=g).map(|k| format!("p[{k}]")).collect(),
                &storage,
            )?,
            ChainBlock::new("q", q_cols, &storage)?,
        ];
        Ok(ChainOutput {
            dims,
            blocks,
            z_counts: vec![0; dims.n_cells() * g],
            n_stored: 0,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn n_stored(&self) -> usize {
        self.n_stored
    }

    pub fn block(&self, stem: &str) -> &ChainBlock {
        self.blocks
            .iter()
            .find(|b| b.file_stem == stem)
            .unwrap_or_else(|| panic!("unknown chain block {stem}"))
    }

    pub fn blocks(&self) -> &[ChainBlock] {
        &self.blocks
    }

    /// Fold one sampler state into the chain.
    pub fn push_state(&mut self, state: &ModelState) -> Result<()> {
        let dims = self.dims;
        let g = dims.n_clusters;
        let l = dims.n_factors;

        let loadings: Vec<f64> = state.loadings.free_entries().map(|(_, _, v)| v).collect();
        self.blocks[0].push_row(&loadings)?;
        self.blocks[1].push_row(state.uniquenesses.values())?;
        self.blocks[2].push_row(&state.tau2)?;
        self.blocks[3].push_row(state.clusters.mu.data())?;

        let mut omega_row = Vec::with_capacity(self.blocks[4].columns().len());
        let first = state.clusters.omega[0].as_mat();
        for k in 0..l {
            omega_row.push(first[(k, k)]);
        }
        for gi in 1..g {
            let om = state.clusters.omega[gi].as_mat();
            for i in 0..l {
                for j in i..l {
                    omega_row.push(om[(i, j)]);
                }
            }
        }
        self.blocks[4].push_row(&omega_row)?;

        self.blocks[5].push_row(&state.markov.init_probs)?;
        self.blocks[6].push_row(state.markov.trans.data())?;

        for (cell, &z) in state.latent.labels.iter().enumerate() {
            self.z_counts[cell * g + z] += 1;
        }
        self.n_stored += 1;
        Ok(())
    }

    /// Flush any spooled rows; call once after the final stored draw.
    pub fn finish(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            b.finish()?;
        }
        Ok(())
    }

    /// Write all block CSVs into `dir`.
    pub fn write_block_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for b in &self.blocks {
            b.write_to(dir)?;
        }
        Ok(())
    }

    /// Reload a finished chain from the block CSVs a previous run wrote
    /// into `dir`, with the per-cell assignment counts supplied by the
    /// caller (they live outside the block files). Every block must be
    /// present with the exact header its dimensions imply, all blocks must
    /// hold the same number of rows, and each cell's counts must sum to
    /// that row count.
    pub fn reopen(dir: &Path, dims: ModelDims, z_counts: Vec<u64>) -> Result<ChainOutput> {
        let mut out = ChainOutput::new(dims, ChainStorage::Memory)?;
        if z_counts.len() != dims.n_cells() * dims.n_clusters {
            return Err(Error::DimensionMismatch(format!(
                "expected {} assignment counts, got {}",
                dims.n_cells() * dims.n_clusters,
                z_counts.len()
            )));
        }
        let mut n_rows: Option<usize> = None;
        for block in &mut out.blocks {
            let path = dir.join(format!("{}.csv", block.file_stem));
            if !path.exists() {
                return Err(Error::MissingChains(dir.to_path_buf()));
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut lines = text.lines();
            if lines.next() != Some(block.columns.join(",").as_str()) {
                return Err(Error::Config(format!(
                    "{}: header does not match the expected {} columns",
                    path.display(),
                    block.columns.len()
                )));
            }
            for (lineno, line) in lines.enumerate() {
                let mut width = 0;
                for field in line.split(',') {
                    let v: f64 = field.parse().map_err(|_| {
                        Error::NonFiniteValue(format!(
                            "{}: line {}",
                            path.display(),
                            lineno + 2
                        ))
                    })?;
                    block.rows.push(v);
                    width += 1;
                }
                if width != block.columns.len() {
                    return Err(Error::Config(format!(
                        "{}: line {} has {} fields, expected {}",
                        path.display(),
                        lineno + 2,
                        width,
                        block.columns.len()
                    )));
                }
                block.n_rows += 1;
            }
            match n_rows {
                None => n_rows = Some(block.n_rows),
                Some(n) if n != block.n_rows => {
                    return Err(Error::Config(format!(
                        "{}: {} rows, but earlier blocks hold {}",
                        path.display(),
                        block.n_rows,
                        n
                    )));
                }
                Some(_) => {}
            }
        }
        let n_stored = n_rows.unwrap_or(0);
        for (cell, counts) in z_counts.chunks_exact(dims.n_clusters).enumerate() {
            if counts.iter().sum::<u64>() != n_stored as u64 {
                return Err(Error::Config(format!(
                    "assignment counts for cell {cell} do not sum to the {n_stored} stored draws"
                )));
            }
        }
        out.z_counts = z_counts;
        out.n_stored = n_stored;
        Ok(out)
    }

    /// Fraction of stored draws assigning each cell to each cluster,
    /// indexed `[cell * G + g]`.
    pub fn assignment_frequencies(&self) -> Result<Vec<f64>> {
        if self.n_stored == 0 {
            return Err(Error::InsufficientDraws(0));
        }
        let n = self.n_stored as f64;
        Ok(self.z_counts.iter().map(|&c| c as f64 / n).collect())
    }

    /// Most frequent cluster per cell; ties go to the smallest label.
    pub fn modal_labels(&self) -> Result<Vec<usize>> {
        if self.n_stored == 0 {
            return Err(Error::InsufficientDraws(0));
        }
        let g = self.dims.n_clusters;
        Ok(self
            .z_counts
            .chunks_exact(g)
            .map(|counts| {
                let mut best = 0usize;
                for (k, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}
