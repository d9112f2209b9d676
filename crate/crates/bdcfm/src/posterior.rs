//! Posterior summaries, calibration against a known truth, and clustering
//! diagnostics over a stored chain.
//!
//! [`summarize`] turns every stored parameter column into a mean, standard
//! deviation, and equal-tailed 95% credible interval, and pairs the result
//! with the per-cell assignment table. When the data came from
//! [`simulate_dataset`](crate::simgen::simulate_dataset), [`coverage_report`]
//! and [`misclassification`] score the run against the generating values;
//! both align estimated cluster labels to the truth with an exact
//! assignment-problem matching first, so a relabeled chain scores the same
//! as the original.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ChainOutput, ModelDims};
use crate::numkit::Mat;
use crate::simgen::SimTruth;

/// Lower-tail probability of the equal-tailed 95% interval.
const CI_TAIL: f64 = 0.025;

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Location and spread of one scalar parameter's stored draws.
#[derive(Debug, Clone, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% quantile.
    pub lower: f64,
    pub median: f64,
    /// 97.5% quantile.
    pub upper: f64,
}

/// Per-cell assignment probabilities and the modal path.
#[derive(Debug, Clone)]
pub struct AssignmentTable {
    pub dims: ModelDims,
    /// Fraction of stored draws putting each cell in each cluster; one row
    /// per (subject, time) cell, one column per cluster. Rows sum to 1.
    pub probabilities: Mat,
    /// Most frequent cluster per cell, ties to the smallest label.
    pub mode_path: Vec<usize>,
}

/// Whether one true value landed inside its estimated interval.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageFlag {
    pub name: String,
    pub truth: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

/// Interval calibration over the five reported parameter families:
/// free loadings, cluster means, transition rows, initial probabilities,
/// and uniquenesses.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    /// Fraction of true values inside their 95% interval.
    pub fraction: f64,
    pub flags: Vec<CoverageFlag>,
}

impl CoverageReport {
    pub fn n_missed(&self) -> usize {
        self.flags.iter().filter(|f| !f.covered).count()
    }
}

/// Scores of a run against the generating truth.
#[derive(Debug, Clone, Serialize)]
pub struct TruthComparison {
    pub coverage: CoverageReport,
    /// Fraction of cells whose modal cluster disagrees with the truth after
    /// label alignment.
    pub misclassification: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct SummaryReport {
    pub parameters: Vec<ParameterSummary>,
    pub assignments: AssignmentTable,
    pub truth: Option<TruthComparison>,
}

impl SummaryReport {
    pub fn parameter(&self, name: &str) -> &ParameterSummary {
        self.parameters
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

fn require_draws(chain: &ChainOutput) -> Result<()> {
    if chain.n_stored() < 2 {
        return Err(Error::InsufficientDraws(chain.n_stored()));
    }
    Ok(())
}

fn summarize_column(name: &str, draws: &[f64]) -> ParameterSummary {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let ss: f64 = draws.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("chain values are finite"));
    ParameterSummary {
        name: name.to_string(),
        mean,
        sd,
        lower: quantile(&sorted, CI_TAIL),
        median: quantile(&sorted, 0.5),
        upper: quantile(&sorted, 1.0 - CI_TAIL),
    }
}

/// Summarize every stored parameter column: posterior mean, standard
/// deviation, and equal-tailed 95% credible interval, plus the assignment
/// table. Deterministic in the chain contents; needs at least two stored
/// draws.
pub fn summarize(chain: &ChainOutput) -> Result<SummaryReport> {
    require_draws(chain)?;
    let mut parameters = Vec::new();
    for block in chain.blocks() {
        for (col, name) in block.columns().iter().enumerate() {
            let draws = block.load_column(col)?;
            parameters.push(summarize_column(name, &draws));
        }
    }
    Ok(SummaryReport {
        parameters,
        assignments: assignment_probabilities(chain)?,
        truth: None,
    })
}

/// Per-cell cluster-assignment frequencies and the modal path. Available
/// from the first stored draw.
pub fn assignment_probabilities(chain: &ChainOutput) -> Result<AssignmentTable> {
    let dims = *chain.dims();
    let freqs = chain.assignment_frequencies()?;
    let probabilities = Mat::from_fn(dims.n_cells(), dims.n_clusters, |cell, g| {
        freqs[cell * dims.n_clusters + g]
    });
    Ok(AssignmentTable {
        dims,
        probabilities,
        mode_path: chain.modal_labels()?,
    })
}

/// Minimum-cost perfect matching on a square cost matrix, returning the
/// column assigned to each row (the assignment problem, solved exactly by
/// shortest augmenting paths).
fn min_cost_assignment(cost: &Mat) -> Vec<usize> {
    assert!(cost.is_square());
    let n = cost.rows();
    // Row/column potentials with a 0 sentinel column; p[j] is the row
    // matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let slack = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back to the sentinel.
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Map each estimated label to the true label that maximizes total
/// agreement over cells: `perm[estimated] = truth`.
fn align_labels(modes: &[usize], truth: &[usize], n_clusters: usize) -> Vec<usize> {
    let mut agree = Mat::zeros(n_clusters, n_clusters);
    for (&m, &t) in modes.iter().zip(truth) {
        agree[(m, t)] += 1.0;
    }
    let cost = Mat::from_fn(n_clusters, n_clusters, |i, j| -agree[(i, j)]);
    min_cost_assignment(&cost)
}

fn check_truth_dims(chain: &ChainOutput, truth: &SimTruth) -> Result<()> {
    if truth.dims != *chain.dims() {
        return Err(Error::DimensionMismatch(format!(
            "truth describes a {:?} panel but the chain was fit to {:?}",
            truth.dims,
            chain.dims()
        )));
    }
    Ok(())
}

/// Fraction of (subject, time) cells whose modal cluster disagrees with the
/// generating truth, minimized over one-to-one relabelings of the estimated
/// clusters.
pub fn misclassification(chain: &ChainOutput, truth: &SimTruth) -> Result<f64> {
    check_truth_dims(chain, truth)?;
    let modes = chain.modal_labels()?;
    let perm = align_labels(&modes, &truth.labels, chain.dims().n_clusters);
    let wrong = modes
        .iter()
        .zip(&truth.labels)
        .filter(|&(&m, &t)| perm[m] != t)
        .count();
    Ok(wrong as f64 / modes.len() as f64)
}

/// True values for one block's columns, in column order, after relabeling
/// the truth to the estimated labels via `perm[estimated] = truth`.
fn block_truth(stem: &str, truth: &SimTruth, perm: &[usize]) -> Vec<f64> {
    match stem {
        "loadings" => truth.loadings.free_entries().map(|(_, _, v)| v).collect(),
        "sigma2" => truth.uniquenesses.clone(),
        "mu" => {
            let l = truth.dims.n_factors;
            let mut vals = Vec::with_capacity(truth.dims.n_clusters * l);
            for e in 0..truth.dims.n_clusters {
                for k in 0..l {
                    vals.push(truth.mu[(perm[e], k)]);
                }
            }
            vals
        }
        "p" => perm.iter().map(|&t| truth.init_probs[t]).collect(),
        "q" => {
            let g = truth.dims.n_clusters;
            let mut vals = Vec::with_capacity(g * g);
            for e1 in 0..g {
                for e2 in 0..g {
                    vals.push(truth.trans[(perm[e1], perm[e2])]);
                }
            }
            vals
        }
        other => panic!("block {other} has no truth comparison"),
    }
}

/// Which parameter families enter the coverage fraction.
const COVERED_BLOCKS: [&str; 5] = ["loadings", "mu", "q", "p", "sigma2"];

/// Check every true value in the five reported families against its
/// estimated 95% interval. Estimated labels are aligned to the truth first,
/// so the label-indexed families (means, transitions, initial
/// probabilities) are compared cluster-for-cluster.
pub fn coverage_report(chain: &ChainOutput, truth: &SimTruth) -> Result<CoverageReport> {
    check_truth_dims(chain, truth)?;
    require_draws(chain)?;
    let modes = chain.modal_labels()?;
    let perm = align_labels(&modes, &truth.labels, chain.dims().n_clusters);
    let mut flags = Vec::new();
    for stem in COVERED_BLOCKS {
        let block = chain.block(stem);
        let truths = block_truth(stem, truth, &perm);
        debug_assert_eq!(truths.len(), block.columns().len());
        for (col, (name, value)) in block.columns().iter().zip(truths).enumerate() {
            let draws = block.load_column(col)?;
            let s = summarize_column(name, &draws);
            flags.push(CoverageFlag {
                name: name.clone(),
                truth: value,
                lower: s.lower,
                upper: s.upper,
                covered: s.lower <= value && value <= s.upper,
            });
        }
    }
    let covered = flags.iter().filter(|f| f.covered).count();
    Ok(CoverageReport {
        fraction: covered as f64 / flags.len() as f64,
        flags,
    })
}

/// Bundle the truth-comparison metrics for a report.
pub fn compare_with_truth(chain: &ChainOutput, truth: &SimTruth) -> Result<TruthComparison> {
    Ok(TruthComparison {
        coverage: coverage_report(chain, truth)?,
        misclassification: misclassification(chain, truth)?,
    })
}
