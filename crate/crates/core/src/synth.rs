//! Synthetic cohorts with a planted structure-function signal, and simple
//! baseline predictors to measure the model against.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::connectome::{write_cohort, ConnectivityMatrix, Modality, SubjectRecord, Target};
use crate::error::{Error, Result};
use crate::objectives::{evaluate, Metrics};

pub const GENERATION_MANIFEST: &str = "generation.json";

/// Spread of the independent functional noise before mixing.
const FNC_NOISE_STD: f64 = 0.5;
const DEFAULT_SIGNAL_EDGES: usize = 5;
/// Spread of the per-subject factor carried by each target's signal edges.
const LATENT_STD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub subjects: usize,
    pub nodes: usize,
    /// Mixing weight of the structural signal in each FNC matrix.
    pub coupling: f64,
    /// Pairs whose functional weights drive `target`. Drawn from the seed when empty.
    pub signal_edges: Vec<(usize, usize)>,
    pub noise_std: f64,
    pub target: Target,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 300,
            nodes: 16,
            coupling: 0.7,
            signal_edges: Vec::new(),
            noise_std: 2.0,
            target: Target::Total,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 10 {
            return Err(Error::Config(format!("need at least 10 subjects, got {}", self.subjects)));
        }
        if self.nodes < 6 {
            return Err(Error::Config(format!("need at least 6 nodes, got {}", self.nodes)));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling {} must lie in [0, 1]", self.coupling)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        for &(i, j) in &self.signal_edges {
            if i == j || i >= self.nodes || j >= self.nodes {
                return Err(Error::Config(format!("signal edge ({i}, {j}) out of range")));
            }
        }
        Ok(())
    }
}

/// A generated cohort plus the signal edges used for each target.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub signal_edges: BTreeMap<Target, Vec<(usize, usize)>>,
    pub records: Vec<SubjectRecord>,
}

#[derive(Serialize)]
struct GenerationManifest<'a> {
    config: &'a SynthConfig,
    signal_edges: &'a BTreeMap<Target, Vec<(usize, usize)>>,
}

impl SynthCohort {
    /// Writes the cohort directory and the generation manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_cohort(dir, &self.records)?;
        let path = dir.join(GENERATION_MANIFEST);
        let text = serde_json::to_string_pretty(&GenerationManifest {
            config: &self.config,
            signal_edges: &self.signal_edges,
        })
        .expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<(usize, usize)> {
    let total = n * (n - 1) / 2;
    let mut picks: Vec<usize> = sample(rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    let mut pairs = Vec::with_capacity(picks.len());
    for p in picks {
        // unrank p into the strict upper triangle, row-major
        let mut i = 0;
        let mut rem = p;
        while rem >= n - 1 - i {
            rem -= n - 1 - i;
            i += 1;
        }
        pairs.push((i, i + 1 + rem));
    }
    pairs
}

fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Generates `config.subjects` subjects. Every FNC matrix mixes the subject's
/// SBM outer product (scaled to unit max) with an independent component and is
/// clipped to `[-1, 1]`. The independent component is symmetric noise plus,
/// on the signal edges of `config.target`, a per-subject factor shared by
/// those edges. The other targets are sums over their own signal edges but
/// carry no planted factor. Each target is the sum of the functional weights on
/// its signal edges, standardised across the cohort to mean 100 and std 10,
/// plus Gaussian noise.
pub fn generate_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let n = config.nodes;

    let mut edge_rng = subject_rng(config.seed, u64::MAX - 1);
    let mut signal_edges = BTreeMap::new();
    for t in Target::ALL {
        let edges = if t == config.target && !config.signal_edges.is_empty() {
            config.signal_edges.clone()
        } else {
            random_pairs(&mut edge_rng, n, DEFAULT_SIGNAL_EDGES)
        };
        signal_edges.insert(t, edges);
    }

    let planted: BTreeSet<(usize, usize)> = signal_edges[&config.target]
        .iter()
        .map(|&(i, j)| (i.min(j), i.max(j)))
        .collect();
    let noise = Normal::new(0.0, FNC_NOISE_STD).expect("valid normal");
    let mut subjects = Vec::with_capacity(config.subjects);
    let mut raw: BTreeMap<Target, Vec<f64>> = BTreeMap::new();
    let mut rngs = Vec::with_capacity(config.subjects);
    for s in 0..config.subjects {
        let mut rng = subject_rng(config.seed, s as u64);
        let loadings: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                scale = scale.max((loadings[i] * loadings[j]).abs());
            }
        }
        let c = config.coupling;
        let latent = rng.sample::<f64, _>(StandardNormal) * LATENT_STD;
        let fnc = ConnectivityMatrix::from_upper(n, Modality::Functional, |i, j| {
            let structural = if scale > 0.0 { loadings[i] * loadings[j] / scale } else { 0.0 };
            let mut independent: f64 = noise.sample(&mut rng);
            if planted.contains(&(i, j)) {
                independent += latent;
            }
            (c * structural + (1.0 - c) * independent).clamp(-1.0, 1.0)
        })?;
        for (t, edges) in &signal_edges {
            raw.entry(*t)
                .or_default()
                .push(edges.iter().map(|&(i, j)| fnc.get(i, j)).sum());
        }
        subjects.push((format!("sub-{s:04}"), loadings, fnc));
        rngs.push(rng);
    }

    let mut stats = BTreeMap::new();
    for (t, values) in &raw {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let sd = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::Validation(format!("planted {t} signal has zero variance")));
        }
        stats.insert(*t, (m, sd));
    }

    let target_noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut records = Vec::with_capacity(config.subjects);
    for (s, ((id, loadings, fnc), mut rng)) in subjects.into_iter().zip(rngs).enumerate() {
        let mut targets = BTreeMap::new();
        for t in Target::ALL {
            let (m, sd) = stats[&t];
            let eps = if config.noise_std > 0.0 { target_noise.sample(&mut rng) } else { 0.0 };
            targets.insert(t, 100.0 + 10.0 * (raw[&t][s] - m) / sd + eps);
        }
        records.push(SubjectRecord::new(id, loadings, fnc, targets)?);
    }
    Ok(SynthCohort {
        config: config.clone(),
        signal_edges,
        records,
    })
}

// ---------------------------------------------------------------------------
// Baselines

pub const RIDGE_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub constant: Metrics,
    pub ridge: Metrics,
}

fn upper_triangle(m: &ConnectivityMatrix) -> Vec<f64> {
    let n = m.size();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m.get(i, j));
        }
    }
    out
}

/// Ridge regression with an unpenalised intercept. Returns `(weights, intercept)`.
pub fn ridge_fit(features: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let n = features.len();
    if n == 0 || n != targets.len() {
        return Err(Error::Validation("ridge needs matching nonempty features and targets".into()));
    }
    let p = features[0].len();
    let mean_x: Vec<f64> = (0..p)
        .map(|c| features.iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let mean_y = targets.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, p, |r, c| features[r][c] - mean_x[c]);
    let y = DVector::from_iterator(n, targets.iter().map(|t| t - mean_y));

    let w = if p <= n {
        let a = x.transpose() * &x + DMatrix::identity(p, p) * lambda;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numeric("ridge normal equations are not positive definite".into()))?;
        chol.solve(&(x.transpose() * &y))
    } else {
        let a = &x * x.transpose() + DMatrix::identity(n, n) * lambda;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numeric("ridge kernel system is not positive definite".into()))?;
        x.transpose() * chol.solve(&y)
    };
    let intercept = mean_y - w.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>();
    Ok((w.iter().copied().collect(), intercept))
}

/// Constant-mean and ridge (λ = 1, upper-triangle FNC features) baselines.
pub fn baseline_predictors(
    records: &[SubjectRecord],
    train: &[usize],
    test: &[usize],
    target: Target,
) -> Result<BaselineMetrics> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("baseline split needs nonempty train and test sets".into()));
    }
    let y_train: Vec<f64> = train.iter().map(|&i| records[i].target(target)).collect();
    let y_test: Vec<f64> = test.iter().map(|&i| records[i].target(target)).collect();
    let mean = y_train.iter().sum::<f64>() / y_train.len() as f64;
    let constant = evaluate(&vec![mean; y_test.len()], &y_test)?;

    let x_train: Vec<Vec<f64>> = train.iter().map(|&i| upper_triangle(&records[i].fnc)).collect();
    let (w, b) = ridge_fit(&x_train, &y_train, RIDGE_LAMBDA)?;
    let preds: Vec<f64> = test
        .iter()
        .map(|&i| upper_triangle(&records[i].fnc).iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b)
        .collect();
    let ridge = evaluate(&preds, &y_test)?;
    Ok(BaselineMetrics { constant, ridge })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::knn_sparsify;
    use crate::connectome::sbm_subject_matrix;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            subjects: 40,
            nodes: 8,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_cohort(&small(3)).unwrap();
        let b = generate_cohort(&small(3)).unwrap();
        assert_eq!(a.records, b.records);
        let c = generate_cohort(&small(4)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn fnc_entries_are_clipped() {
        let c = generate_cohort(&small(1)).unwrap();
        for r in &c.records {
            assert!(r.fnc.as_slice().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn full_coupling_aligns_knn_sets() {
        let cfg = SynthConfig {
            coupling: 1.0,
            ..small(11)
        };
        let c = generate_cohort(&cfg).unwrap();
        for r in &c.records {
            let ws = sbm_subject_matrix(&r.sbm).unwrap();
            let a: Vec<(usize, usize)> = knn_sparsify(&ws, 3).unwrap().edges.iter().map(|e| (e.i, e.j)).collect();
            let b: Vec<(usize, usize)> = knn_sparsify(&r.fnc, 3).unwrap().edges.iter().map(|e| (e.i, e.j)).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn random_pairs_are_distinct_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = random_pairs(&mut rng, 6, 15);
        assert_eq!(pairs.len(), 15);
        assert!(pairs.iter().all(|&(i, j)| i < j && j < 6));
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { subjects: 5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { nodes: 5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { coupling: 1.5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { signal_edges: vec![(2, 2)], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn constant_baseline_mse_is_test_variance() {
        let c = generate_cohort(&small(2)).unwrap();
        let train: Vec<usize> = (0..30).collect();
        let test: Vec<usize> = (30..40).collect();
        let b = baseline_predictors(&c.records, &train, &test, Target::Total).unwrap();
        let y: Vec<f64> = test.iter().map(|&i| c.records[i].target(Target::Total)).collect();
        let mean_train = train.iter().map(|&i| c.records[i].target(Target::Total)).sum::<f64>() / 30.0;
        let expect = y.iter().map(|v| (v - mean_train).powi(2)).sum::<f64>() / 10.0;
        assert!((b.constant.mse - expect).abs() < 1e-9);
        assert!(b.constant.correlation.is_none());
    }

    #[test]
    fn single_subject_test_split() {
        let c = generate_cohort(&small(2)).unwrap();
        let train: Vec<usize> = (0..39).collect();
        let b = baseline_predictors(&c.records, &train, &[39], Target::Total).unwrap();
        assert!(b.ridge.correlation.is_none());
        assert!(baseline_predictors(&c.records, &train, &[], Target::Total).is_err());
    }
}
