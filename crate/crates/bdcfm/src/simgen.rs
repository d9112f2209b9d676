//! Synthetic-panel generation from fully specified model parameters.
//!
//! The generative recipe mirrors the model: each subject's first label is
//! categorical in the initial distribution, later labels follow the
//! transition matrix, factor vectors are Gaussian within the current
//! cluster, and observations add diagonal Gaussian noise to the loaded
//! factors. Every subject draws from its own keyed random stream, so the
//! output is deterministic in the seed and independent of evaluation order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_state, ClusterParams, Dataset, FactorLoadings, LatentState, MarkovParams, ModelDims,
    ModelState, Uniquenesses,
};
use crate::numkit::{sample_categorical, sample_mvn, Cholesky, Mat, RngStream, SpdMatrix};

/// Stream ids under the simulation seed: one for realizing the loadings,
/// then one per subject for its labels, factors, and noise.
const LOADINGS_STREAM: u64 = 1;
const SUBJECT_STREAM_BASE: u64 = 1 << 20;

/// Where the true loading matrix comes from.
#[derive(Debug, Clone)]
pub enum LoadingsSource {
    Explicit(FactorLoadings),
    /// Draw the free entries i.i.d. N(0,1) from the simulation seed.
    SeededRandom,
}

/// Where the true uniquenesses come from.
#[derive(Debug, Clone)]
pub enum UniquenessSource {
    Explicit(Vec<f64>),
    Constant(f64),
}

/// Complete description of a synthetic panel.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dims: ModelDims,
    pub init_probs: Vec<f64>,
    pub trans: Mat,
    pub mu: Mat,
    pub omega: Vec<SpdMatrix>,
    pub loadings: LoadingsSource,
    pub uniquenesses: UniquenessSource,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let markov = MarkovParams {
            init_probs: self.init_probs.clone(),
            trans: self.trans.clone(),
        };
        markov.validate(&self.dims)?;
        let clusters = ClusterParams {
            mu: self.mu.clone(),
            omega: self.omega.clone(),
        };
        clusters.validate(&self.dims)?;
        match &self.loadings {
            LoadingsSource::Explicit(b) => {
                if b.n_vars() != self.dims.n_vars || b.n_factors() != self.dims.n_factors {
                    return Err(Error::DimensionMismatch(format!(
                        "explicit loadings must be {}x{}, got {}x{}",
                        self.dims.n_vars,
                        self.dims.n_factors,
                        b.n_vars(),
                        b.n_factors()
                    )));
                }
            }
            LoadingsSource::SeededRandom => {}
        }
        match &self.uniquenesses {
            UniquenessSource::Explicit(v) => {
                if v.len() != self.dims.n_vars {
                    return Err(Error::DimensionMismatch(format!(
                        "explicit uniquenesses must have length {}, got {}",
                        self.dims.n_vars,
                        v.len()
                    )));
                }
                Uniquenesses::new(v.clone())?;
            }
            UniquenessSource::Constant(c) => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "constant uniqueness must be positive and finite, got {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The four-cluster benchmark scenario: 200 subjects, 20 variables,
    /// 5 time points, 3 factors, well-separated cluster means, and a sticky
    /// transition matrix. Loadings are seeded-random and uniquenesses are 1.
    pub fn four_cluster_benchmark(seed: u64) -> SimConfig {
        let dims = ModelDims {
            n_subjects: 200,
            n_times: 5,
            n_vars: 20,
            n_factors: 3,
            n_clusters: 4,
        };
        let equicorrelated = |diag: f64, off: f64| {
            SpdMatrix::new(Mat::from_fn(3, 3, |i, j| if i == j { diag } else { off })).unwrap()
        };
        SimConfig {
            dims,
            init_probs: vec![0.45, 0.26, 0.16, 0.13],
            trans: Mat::from_rows(&[
                vec![0.75, 0.15, 0.10, 0.00],
                vec![0.20, 0.55, 0.15, 0.10],
                vec![0.25, 0.15, 0.50, 0.10],
                vec![0.10, 0.15, 0.20, 0.55],
            ]),
            mu: Mat::from_rows(&[
                vec![7.0, 4.0, 5.0],
                vec![-7.0, 3.0, -3.0],
                vec![6.0, -3.0, -2.0],
                vec![-6.0, -4.0, 3.0],
            ]),
            omega: vec![
                SpdMatrix::diagonal(&[1.9, 1.1, 1.3]),
                equicorrelated(2.0, 0.4),
                equicorrelated(3.0, 0.6),
                equicorrelated(4.0, 1.0),
            ],
            loadings: LoadingsSource::SeededRandom,
            uniquenesses: UniquenessSource::Constant(1.0),
            seed,
        }
    }
}

/// Ground truth behind a synthetic panel: every parameter as realized, plus
/// the latent labels and factor scores.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub dims: ModelDims,
    pub loadings: FactorLoadings,
    pub uniquenesses: Vec<f64>,
    pub mu: Mat,
    pub omega: Vec<SpdMatrix>,
    pub init_probs: Vec<f64>,
    pub trans: Mat,
    /// Zero-based labels, one per (subject, time) cell.
    pub labels: Vec<usize>,
    /// True factor scores, row per cell.
    pub factors: Mat,
}

impl SimTruth {
    /// View the truth as a sampler state (column shrinkage scales, which the
    /// generative recipe does not use, are set to 1).
    pub fn as_model_state(&self) -> ModelState {
        ModelState {
            loadings: self.loadings.clone(),
            uniquenesses: Uniquenesses::new(self.uniquenesses.clone())
                .expect("truth uniquenesses are positive"),
            tau2: vec![1.0; self.dims.n_factors],
            clusters: ClusterParams {
                mu: self.mu.clone(),
                omega: self.omega.clone(),
            },
            markov: MarkovParams {
                init_probs: self.init_probs.clone(),
                trans: self.trans.clone(),
            },
            latent: LatentState {
                factors: self.factors.clone(),
                labels: self.labels.clone(),
            },
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let dims = &self.dims;
        let file = TruthFile {
            b: (0..dims.n_vars)
                .map(|r| self.loadings.as_mat().row(r).to_vec())
                .collect(),
            v: self.uniquenesses.clone(),
            mu: (0..dims.n_clusters).map(|g| self.mu.row(g).to_vec()).collect(),
            omega: self
                .omega
                .iter()
                .map(|om| {
                    (0..dims.n_factors)
                        .map(|i| om.as_mat().row(i).to_vec())
                        .collect()
                })
                .collect(),
            p: self.init_probs.clone(),
            q: (0..dims.n_clusters)
                .map(|j| self.trans.row(j).to_vec())
                .collect(),
            z: (0..dims.n_subjects)
                .map(|i| {
                    (0..dims.n_times)
                        .map(|t| self.labels[dims.cell(i, t)] as u32 + 1)
                        .collect()
                })
                .collect(),
            x: (0..dims.n_subjects)
                .map(|i| {
                    (0..dims.n_times)
                        .map(|t| self.factors.row(dims.cell(i, t)).to_vec())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Config(format!("truth serialization: {e}")))
    }

    pub fn from_json_str(text: &str) -> Result<SimTruth> {
        let file: TruthFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("truth file: {e}")))?;
        let s = file.z.len();
        let t = file.z.first().map_or(0, |row| row.len());
        let r = file.b.len();
        let l = file.b.first().map_or(0, |row| row.len());
        let g = file.p.len();
        let dims = ModelDims {
            n_subjects: s,
            n_times: t,
            n_vars: r,
            n_factors: l,
            n_clusters: g,
        };
        dims.validate()?;
        let check = |cond: bool, what: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::DimensionMismatch(format!(
                    "truth file: inconsistent {what}"
                )))
            }
        };
        check(file.b.iter().all(|row| row.len() == l), "B rows")?;
        check(file.v.len() == r, "V length")?;
        check(
            file.mu.len() == g && file.mu.iter().all(|row| row.len() == l),
            "mu block",
        )?;
        check(
            file.omega.len() == g
                && file
                    .omega
                    .iter()
                    .all(|m| m.len() == l && m.iter().all(|row| row.len() == l)),
            "Omega block",
        )?;
        check(
            file.q.len() == g && file.q.iter().all(|row| row.len() == g),
            "Q block",
        )?;
        check(file.z.iter().all(|row| row.len() == t), "Z rows")?;
        check(
            file.x.len() == s
                && file
                    .x
                    .iter()
                    .all(|subj| subj.len() == t && subj.iter().all(|xt| xt.len() == l)),
            "X block",
        )?;

        let loadings = FactorLoadings::new(Mat::from_rows(&file.b))?;
        let omega = file
            .omega
            .iter()
            .map(|m| SpdMatrix::new(Mat::from_rows(m)))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = vec![0usize; dims.n_cells()];
        for (i, row) in file.z.iter().enumerate() {
            for (time, &zv) in row.iter().enumerate() {
                if zv == 0 || zv as usize > g {
                    return Err(Error::InvalidParameter(format!(
                        "truth label {} out of range 1..={} (subject {}, time {})",
                        zv,
                        g,
                        i + 1,
                        time + 1
                    )));
                }
                labels[dims.cell(i, time)] = zv as usize - 1;
            }
        }
        let mut factors = Mat::zeros(dims.n_cells(), l);
        for (i, subj) in file.x.iter().enumerate() {
            for (time, xt) in subj.iter().enumerate() {
                let row = factors.row_mut(dims.cell(i, time));
                row.copy_from_slice(xt);
            }
        }
        let truth = SimTruth {
            dims,
            loadings,
            uniquenesses: file.v,
            mu: Mat::from_rows(&file.mu),
            omega,
            init_probs: file.p,
            trans: Mat::from_rows(&file.q),
            labels,
            factors,
        };
        validate_state(&truth.as_model_state(), &truth.dims)?;
        Ok(truth)
    }
}

/// JSON wire format of a truth file. Labels are one-based on disk.
#[derive(Serialize, Deserialize)]
struct TruthFile {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<f64>,
    mu: Vec<Vec<f64>>,
    #[serde(rename = "Omega")]
    omega: Vec<Vec<Vec<f64>>>,
    p: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "Z")]
    z: Vec<Vec<u32>>,
    #[serde(rename = "X")]
    x: Vec<Vec<Vec<f64>>>,
}

fn realize_loadings(config: &SimConfig) -> Result<FactorLoadings> {
    match &config.loadings {
        LoadingsSource::Explicit(b) => Ok(b.clone()),
        LoadingsSource::SeededRandom => {
            let dims = &config.dims;
            let mut rng = RngStream::new(config.seed, LOADINGS_STREAM);
            let mut b = FactorLoadings::unit(dims.n_vars, dims.n_factors)?;
            for r in 0..dims.n_vars {
                for l in 0..r.min(dims.n_factors) {
                    b.set_free(r, l, rng.sample(StandardNormal));
                }
            }
            Ok(b)
        }
    }
}

/// Generate a complete panel and its ground truth.
pub fn simulate_dataset(config: &SimConfig) -> Result<(Dataset, SimTruth)> {
    config.validate()?;
    let dims = config.dims;
    let loadings = realize_loadings(config)?;
    let uniquenesses = match &config.uniquenesses {
        UniquenessSource::Explicit(v) => v.clone(),
        UniquenessSource::Constant(c) => vec![*c; dims.n_vars],
    };
    let noise_sd: Vec<f64> = uniquenesses.iter().map(|v| v.sqrt()).collect();
    let omega_chol: Vec<Cholesky> = config
        .omega
        .iter()
        .map(|om| om.cholesky())
        .collect::<Result<Vec<_>>>()?;

    let mut labels = vec![0usize; dims.n_cells()];
    let mut factors = Mat::zeros(dims.n_cells(), dims.n_factors);
    let mut values = vec![0.0; dims.n_cells() * dims.n_vars];

    for i in 0..dims.n_subjects {
        let mut rng = RngStream::new(config.seed, SUBJECT_STREAM_BASE + i as u64);
        let mut z = sample_categorical(&mut rng, &config.init_probs);
        for t in 0..dims.n_times {
            if t > 0 {
                z = sample_categorical(&mut rng, config.trans.row(z));
            }
            let cell = dims.cell(i, t);
            labels[cell] = z;
            let x = sample_mvn(&mut rng, config.mu.row(z), &omega_chol[z]);
            factors.row_mut(cell).copy_from_slice(&x);
            let mut y = loadings.as_mat().matvec(&x);
            for (yr, sd) in y.iter_mut().zip(&noise_sd) {
                let eps: f64 = rng.sample(StandardNormal);
                *yr += sd * eps;
            }
            values[cell * dims.n_vars..(cell + 1) * dims.n_vars].copy_from_slice(&y);
        }
    }

    let dataset =
        Dataset::with_numbered_subjects(dims.n_subjects, dims.n_times, dims.n_vars, values)?;
    let truth = SimTruth {
        dims,
        loadings,
        uniquenesses,
        mu: config.mu.clone(),
        omega: config.omega.clone(),
        init_probs: config.init_probs.clone(),
        trans: config.trans.clone(),
        labels,
        factors,
    };
    debug_assert!(validate_state(&truth.as_model_state(), &dims).is_ok());
    Ok((dataset, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compute_sweep_stats;

    #[test]
    fn benchmark_scenario_validates_and_is_deterministic() {
        let config = SimConfig::four_cluster_benchmark(7);
        config.validate().unwrap();
        let (ds_a, truth_a) = simulate_dataset(&config).unwrap();
        let (ds_b, truth_b) = simulate_dataset(&config).unwrap();
        assert_eq!(ds_a.obs(13, 2), ds_b.obs(13, 2));
        assert_eq!(truth_a.labels, truth_b.labels);
        assert_eq!(
            truth_a.loadings.as_mat().data(),
            truth_b.loadings.as_mat().data()
        );

        let other = SimConfig::four_cluster_benchmark(8);
        let (ds_c, _) = simulate_dataset(&other).unwrap();
        assert_ne!(ds_a.obs(0, 0), ds_c.obs(0, 0));
    }

    #[test]
    fn truth_passes_state_validation() {
        let config = SimConfig::four_cluster_benchmark(11);
        let (_, truth) = simulate_dataset(&config).unwrap();
        validate_state(&truth.as_model_state(), &truth.dims).unwrap();
    }

    #[test]
    fn initial_cluster_counts_match_probabilities() {
        let config = SimConfig::four_cluster_benchmark(42);
        let (_, truth) = simulate_dataset(&config).unwrap();
        let dims = truth.dims;
        let stats = compute_sweep_stats(&truth.labels, &dims);
        let expected = [90.0, 52.0, 32.0, 26.0];
        for g in 0..4 {
            let p = config.init_probs[g];
            let sd = (200.0 * p * (1.0 - p)).sqrt();
            assert!(
                (stats.n_first[g] - expected[g]).abs() <= 3.0 * sd,
                "cluster {} count {} vs expected {}",
                g + 1,
                stats.n_first[g],
                expected[g]
            );
        }
    }

    #[test]
    fn noiseless_limit_recovers_loaded_factors() {
        let mut config = SimConfig::four_cluster_benchmark(3);
        config.uniquenesses = UniquenessSource::Constant(1e-10);
        let (ds, truth) = simulate_dataset(&config).unwrap();
        let dims = truth.dims;
        for i in (0..dims.n_subjects).step_by(17) {
            for t in 0..dims.n_times {
                let x = truth.factors.row(dims.cell(i, t));
                let bx = truth.loadings.as_mat().matvec(x);
                for (obs, exp) in ds.obs(i, t).iter().zip(&bx) {
                    assert!((obs - exp).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn long_run_transition_frequencies_match_matrix() {
        let mut config = SimConfig::four_cluster_benchmark(19);
        config.dims.n_subjects = 10_000;
        config.dims.n_times = 50;
        // Noise level does not matter for label paths; keep variables cheap.
        let (_, truth) = simulate_dataset(&config).unwrap();
        let stats = compute_sweep_stats(&truth.labels, &truth.dims);
        for j in 0..4 {
            let row_total: f64 = stats.transitions.row(j).iter().sum();
            for g in 0..4 {
                let freq = stats.transitions[(j, g)] / row_total;
                assert!(
                    (freq - config.trans[(j, g)]).abs() < 0.01,
                    "transition ({},{}) frequency {} vs {}",
                    j + 1,
                    g + 1,
                    freq,
                    config.trans[(j, g)]
                );
            }
        }
    }

    #[test]
    fn within_cluster_factor_means_match_targets() {
        let config = SimConfig::four_cluster_benchmark(23);
        let (_, truth) = simulate_dataset(&config).unwrap();
        let dims = truth.dims;
        for g in 0..dims.n_clusters {
            let members: Vec<usize> = (0..dims.n_cells())
                .filter(|&cell| truth.labels[cell] == g)
                .collect();
            let n = members.len() as f64;
            assert!(n > 30.0, "cluster {} unexpectedly small", g + 1);
            for l in 0..dims.n_factors {
                let mean: f64 =
                    members.iter().map(|&c| truth.factors[(c, l)]).sum::<f64>() / n;
                let se = (truth.omega[g].as_mat()[(l, l)] / n).sqrt();
                assert!(
                    (mean - truth.mu[(g, l)]).abs() < 4.0 * se,
                    "cluster {} factor {} mean {} vs {}",
                    g + 1,
                    l + 1,
                    mean,
                    truth.mu[(g, l)]
                );
            }
        }
    }

    #[test]
    fn truth_json_round_trip() {
        let mut config = SimConfig::four_cluster_benchmark(5);
        config.dims.n_subjects = 8; // keep the file small
        let (_, truth) = simulate_dataset(&config).unwrap();
        let text = truth.to_json_string().unwrap();
        let back = SimTruth::from_json_str(&text).unwrap();
        assert_eq!(back.labels, truth.labels);
        assert_eq!(back.uniquenesses, truth.uniquenesses);
        assert_eq!(
            back.loadings.as_mat().data(),
            truth.loadings.as_mat().data()
        );
        assert_eq!(back.factors.data(), truth.factors.data());
        assert_eq!(back.init_probs, truth.init_probs);
        // One-based labels on disk.
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let z00 = parsed["Z"][0][0].as_u64().unwrap();
        assert_eq!(z00 as usize, truth.labels[0] + 1);
    }

    #[test]
    fn config_validation_catches_mistakes() {
        let mut config = SimConfig::four_cluster_benchmark(1);
        config.init_probs[0] = 0.9;
        assert!(config.validate().is_err());

        let mut config = SimConfig::four_cluster_benchmark(1);
        config.uniquenesses = UniquenessSource::Constant(-1.0);
        assert!(config.validate().is_err());

        let mut config = SimConfig::four_cluster_benchmark(1);
        // Non-diagonal first cluster covariance violates identification.
        config.omega[0] =
            SpdMatrix::new(Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.3 })).unwrap();
        assert!(config.validate().is_err());
    }
}
