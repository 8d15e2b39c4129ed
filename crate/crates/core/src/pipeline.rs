//! Cross-validated training, evaluation, checkpoints and attention-based
//! explanations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connectome::{SubjectRecord, Target};
use crate::diffcore::{adam_step, AdamConfig, AdamState, ParamStore, Tensor2};
use crate::error::{Error, Result};
use crate::hybrid_graph::{assemble_hybrid_graph, EdgeKind, GraphAblation, GraphParams, HybridGraph};
use crate::model::{
    accumulate_joint_gradient, extract_attention_importance, forward, init_params, top_count,
    ConnectionImportance, LossParts, MagnetConfig, Mode,
};
use crate::objectives::{aggregate, evaluate, LossWeights, Metrics, MetricsReport};
use crate::synth::{baseline_predictors, BaselineMetrics};

/// Fraction of subjects that may be dropped as degenerate before training fails.
const MAX_SKIPPED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_mdc: bool,
    pub use_cmc: bool,
    pub use_sf_loss: bool,
    pub use_sbm: bool,
    pub use_fnc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_mdc: true,
            use_cmc: true,
            use_sf_loss: true,
            use_sbm: true,
            use_fnc: true,
        }
    }
}

impl Ablation {
    pub fn graph(&self) -> GraphAblation {
        GraphAblation {
            use_cmc: self.use_cmc,
            use_mdc: self.use_mdc,
            use_sbm: self.use_sbm,
        }
    }

    /// Functional edges only.
    pub fn fnc_only() -> Self {
        Self {
            use_mdc: false,
            use_cmc: false,
            use_sbm: false,
            ..Self::default()
        }
    }

    /// Structural and functional edges, no cross-modal or detour families.
    pub fn sbm_fnc_only() -> Self {
        Self {
            use_mdc: false,
            use_cmc: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub graph: GraphParams,
    pub model: MagnetConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub target: Target,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            graph: GraphParams::default(),
            model: MagnetConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            batch_size: 16,
            epochs: 50,
            folds: 5,
            target: Target::Total,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.ablation.use_fnc {
            return Err(Error::Config("the functional modality cannot be ablated".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.graph.k == 0 || self.graph.gamma == 0 {
            return Err(Error::Config("k and gamma must be positive".into()));
        }
        Ok(())
    }

    /// Loss weights with the consistency term switched off under `use_sf_loss = false`.
    pub fn effective_loss(&self) -> LossWeights {
        LossWeights {
            sf: if self.ablation.use_sf_loss { self.loss.sf } else { 0.0 },
            task: self.loss.task,
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        short_hash(text.as_bytes())
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Content hash of a cohort (ids, values and targets, bit-exact).
pub fn cohort_hash(records: &[SubjectRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.subject_id.as_bytes());
        h.update([0]);
        for v in r.sbm.values.iter().chain(r.fnc.as_slice()) {
            h.update(v.to_bits().to_le_bytes());
        }
        for (t, v) in &r.targets {
            h.update(t.name().as_bytes());
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

// ---------------------------------------------------------------------------
// Folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then contiguous test blocks; the first `P mod folds` blocks
/// get one extra subject.
pub fn kfold_split(subjects: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if subjects < folds {
        return Err(Error::Config(format!("{subjects} subjects cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = subjects / folds;
    let extra = subjects % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let test = order[start..start + len].to_vec();
        let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
        out.push(Fold { train, test });
        start += len;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Graphs

/// Per-subject graph, or the reason it could not be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub subject_id: String,
    pub graph: Option<HybridGraph>,
    pub error: Option<String>,
}

/// Builds every subject's graph; degenerate subjects become entries with an
/// error instead of failing the whole cohort.
pub fn build_graphs(records: &[SubjectRecord], params: &GraphParams, ablation: GraphAblation) -> Result<Vec<GraphEntry>> {
    records
        .iter()
        .map(|r| match assemble_hybrid_graph(r, params, ablation) {
            Ok(g) => Ok(GraphEntry {
                subject_id: r.subject_id.clone(),
                graph: Some(g),
                error: None,
            }),
            Err(Error::Validation(msg)) => {
                warn!("skipping subject {}: {msg}", r.subject_id);
                Ok(GraphEntry {
                    subject_id: r.subject_id.clone(),
                    graph: None,
                    error: Some(msg),
                })
            }
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphIndex {
    key: String,
    cohort_hash: String,
    params: GraphParams,
    ablation: GraphAblation,
    subjects: Vec<GraphIndexEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphIndexEntry {
    id: String,
    file: Option<String>,
    error: Option<String>,
}

pub const GRAPH_INDEX_FILE: &str = "index.json";

pub fn graph_cache_key(records: &[SubjectRecord], params: &GraphParams, ablation: GraphAblation) -> String {
    let text = serde_json::to_string(&(cohort_hash(records), params, ablation)).expect("serializes");
    short_hash(text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Writes one graph JSON per subject plus an index keyed by cohort and params.
pub fn write_graphs(
    dir: &Path,
    records: &[SubjectRecord],
    params: &GraphParams,
    ablation: GraphAblation,
    entries: &[GraphEntry],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(entries.len());
    for e in entries {
        let file = match &e.graph {
            Some(g) => {
                let name = format!("{}.json", e.subject_id);
                write_json(&dir.join(&name), g)?;
                Some(name)
            }
            None => None,
        };
        subjects.push(GraphIndexEntry {
            id: e.subject_id.clone(),
            file,
            error: e.error.clone(),
        });
    }
    let index = GraphIndex {
        key: graph_cache_key(records, params, ablation),
        cohort_hash: cohort_hash(records),
        params: params.clone(),
        ablation,
        subjects,
    };
    write_json(&dir.join(GRAPH_INDEX_FILE), &index)
}

/// Loads graphs from `dir` if its index matches this cohort and params.
pub fn read_cached_graphs(
    dir: &Path,
    records: &[SubjectRecord],
    params: &GraphParams,
    ablation: GraphAblation,
) -> Result<Option<Vec<GraphEntry>>> {
    let index_path = dir.join(GRAPH_INDEX_FILE);
    if !index_path.exists() {
        return Ok(None);
    }
    let index: GraphIndex = read_json(&index_path)?;
    if index.key != graph_cache_key(records, params, ablation) || index.subjects.len() != records.len() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(records.len());
    for (entry, r) in index.subjects.iter().zip(records) {
        if entry.id != r.subject_id {
            return Ok(None);
        }
        let graph = match &entry.file {
            Some(f) => {
                let g: HybridGraph = read_json(&dir.join(f))?;
                g.validate()?;
                Some(g)
            }
            None => None,
        };
        out.push(GraphEntry {
            subject_id: entry.id.clone(),
            graph,
            error: entry.error.clone(),
        });
    }
    Ok(Some(out))
}

/// Cached graphs when available, otherwise builds and stores them.
pub fn load_or_build_graphs(
    dir: &Path,
    records: &[SubjectRecord],
    params: &GraphParams,
    ablation: GraphAblation,
) -> Result<Vec<GraphEntry>> {
    if let Some(cached) = read_cached_graphs(dir, records, params, ablation)? {
        return Ok(cached);
    }
    let entries = build_graphs(records, params, ablation)?;
    write_graphs(dir, records, params, ablation, &entries)?;
    Ok(entries)
}

/// Edge inventory over every graph used in a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphAudit {
    pub graphs: usize,
    pub skipped: Vec<String>,
    pub edge_counts: BTreeMap<EdgeKind, usize>,
    pub sf_loss_active: bool,
}

impl GraphAudit {
    pub fn from_entries(entries: &[GraphEntry], sf_loss_active: bool) -> Self {
        let mut audit = GraphAudit {
            sf_loss_active,
            ..Default::default()
        };
        for kind in EdgeKind::ALL {
            audit.edge_counts.insert(kind, 0);
        }
        for e in entries {
            match &e.graph {
                Some(g) => {
                    audit.graphs += 1;
                    for (k, c) in g.kind_counts() {
                        *audit.edge_counts.get_mut(&k).expect("all kinds present") += c;
                    }
                }
                None => audit.skipped.push(e.subject_id.clone()),
            }
        }
        audit
    }

    /// Confirms that every family switched off by `ablation` is absent.
    pub fn check(&self, ablation: &Ablation) -> Result<()> {
        let mut forbidden = Vec::new();
        if !ablation.use_sbm {
            forbidden.extend([EdgeKind::Structural, EdgeKind::CrossModal]);
            forbidden.extend(EdgeKind::ALL.iter().filter(|k| k.is_detour()));
        }
        if !ablation.use_cmc {
            forbidden.push(EdgeKind::CrossModal);
        }
        if !ablation.use_mdc {
            forbidden.extend(EdgeKind::ALL.iter().filter(|k| k.is_detour()));
        }
        for k in forbidden {
            let c = self.edge_counts.get(&k).copied().unwrap_or(0);
            if c > 0 {
                return Err(Error::Validation(format!("ablated edge family {k} has {c} edges")));
            }
        }
        if self.sf_loss_active && !ablation.use_sf_loss {
            return Err(Error::Validation("consistency loss active despite ablation".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training

/// Affine map between raw scores and the unit-scale values the network fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unscale(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub joint: f64,
    pub task: f64,
    pub sf: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub scaler: TargetScaler,
    pub curve: Vec<EpochLoss>,
}

fn fold_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains one model on the subjects in `train` (indices into `records` and
/// `graphs`). Fully deterministic for a given `stream`.
pub fn train_fold(
    records: &[SubjectRecord],
    graphs: &[GraphEntry],
    train: &[usize],
    config: &TrainConfig,
    stream: u64,
) -> Result<TrainedModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let usable: Vec<usize> = train.iter().copied().filter(|&i| graphs[i].graph.is_some()).collect();
    let skipped = train.len() - usable.len();
    if skipped as f64 > MAX_SKIPPED_FRACTION * train.len() as f64 {
        return Err(Error::Validation(format!(
            "{skipped} of {} training subjects have degenerate graphs",
            train.len()
        )));
    }
    if usable.is_empty() {
        return Err(Error::Validation("no usable training subjects".into()));
    }

    let target = config.target;
    let scaler = TargetScaler::fit(&usable.iter().map(|&i| records[i].target(target)).collect::<Vec<_>>());
    let weights = config.effective_loss();

    let mut rng = fold_rng(config.seed, stream);
    let mut params = init_params(&config.model, &mut rng)?;
    let mut optimizer = AdamState::new(&params, config.optimizer);
    let mut order = usable.clone();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for batch in order.chunks(config.batch_size) {
            params.zero_grads();
            let mut batch_loss = LossParts::default();
            for &i in batch {
                let graph = graphs[i].graph.as_ref().expect("filtered above");
                let parts = accumulate_joint_gradient(
                    graph,
                    &records[i].fnc,
                    scaler.scale(records[i].target(target)),
                    &mut params,
                    &config.model,
                    weights,
                    batch.len(),
                    Mode::Train,
                    &mut rng,
                )?;
                batch_loss.joint += parts.joint;
                batch_loss.task += parts.task;
                batch_loss.sf += parts.sf;
            }
            adam_step(&mut params, &mut optimizer)?;
            let b = batch.len() as f64;
            sums.joint += batch_loss.joint * b;
            sums.task += batch_loss.task * b;
            sums.sf += batch_loss.sf * b;
        }
        let n = order.len() as f64;
        let e = EpochLoss {
            epoch: epoch + 1,
            joint: sums.joint / n,
            task: sums.task / n,
            sf: sums.sf / n,
        };
        if !(e.joint.is_finite() && e.task.is_finite() && e.sf.is_finite()) {
            return Err(Error::Numeric(format!("loss diverged at epoch {}", e.epoch)));
        }
        curve.push(e);
    }
    params.clear_grads();
    Ok(TrainedModel {
        params,
        optimizer,
        scaler,
        curve,
    })
}

/// Predictions in raw target units; subjects without a graph are skipped.
pub fn predict(
    model_params: &ParamStore,
    model_config: &MagnetConfig,
    scaler: &TargetScaler,
    graphs: &[GraphEntry],
    subjects: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut rng = fold_rng(0, 0);
    let mut out = Vec::with_capacity(subjects.len());
    for &i in subjects {
        let Some(g) = &graphs[i].graph else {
            warn!("no graph for subject {}, not evaluated", graphs[i].subject_id);
            continue;
        };
        let t = forward(g, model_params, model_config, Mode::Eval, &mut rng)?;
        out.push((i, scaler.unscale(t.prediction)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
    pub baselines: BaselineMetrics,
    pub loss_curve: Vec<EpochLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub config_hash: String,
    pub cohort_hash: String,
    pub folds: Vec<FoldReport>,
    pub metrics: MetricsReport,
    pub constant_baseline: MetricsReport,
    pub ridge_baseline: MetricsReport,
    pub audit: GraphAudit,
}

fn metrics_report(label: &str, config: &TrainConfig, folds: Vec<Metrics>) -> Result<MetricsReport> {
    Ok(MetricsReport {
        label: label.to_string(),
        target: config.target.name().to_string(),
        seed: config.seed,
        config_hash: config.hash(),
        aggregate: aggregate(&folds)?,
        folds,
    })
}

/// K-fold cross validation over pre-built graphs.
pub fn run_cv_with_graphs(records: &[SubjectRecord], graphs: &[GraphEntry], config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    if graphs.len() != records.len() {
        return Err(Error::Validation("graph count does not match cohort".into()));
    }
    let audit = GraphAudit::from_entries(graphs, config.effective_loss().sf > 0.0);
    audit.check(&config.ablation)?;

    let splits = kfold_split(records.len(), config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    for (f, split) in splits.iter().enumerate() {
        let model = train_fold(records, graphs, &split.train, config, f as u64 + 1)?;
        let preds = predict(&model.params, &config.model, &model.scaler, graphs, &split.test)?;
        if preds.is_empty() {
            return Err(Error::Validation(format!("fold {f} has no evaluable test subjects")));
        }
        let y: Vec<f64> = preds.iter().map(|&(i, _)| records[i].target(config.target)).collect();
        let p: Vec<f64> = preds.iter().map(|&(_, v)| v).collect();
        let evaluated: Vec<usize> = preds.iter().map(|&(i, _)| i).collect();
        folds.push(FoldReport {
            fold: f,
            train_size: split.train.len(),
            test_size: evaluated.len(),
            metrics: evaluate(&p, &y)?,
            baselines: baseline_predictors(records, &split.train, &evaluated, config.target)?,
            loss_curve: model.curve,
        });
    }
    Ok(RunReport {
        config: config.clone(),
        config_hash: config.hash(),
        cohort_hash: cohort_hash(records),
        metrics: metrics_report("magnet", config, folds.iter().map(|f| f.metrics).collect())?,
        constant_baseline: metrics_report("constant", config, folds.iter().map(|f| f.baselines.constant).collect())?,
        ridge_baseline: metrics_report("ridge", config, folds.iter().map(|f| f.baselines.ridge).collect())?,
        folds,
        audit,
    })
}

/// Builds graphs and runs cross validation.
pub fn run_cv(records: &[SubjectRecord], config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    let graphs = build_graphs(records, &config.graph, config.ablation.graph())?;
    run_cv_with_graphs(records, &graphs, config)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, ParamEntry>,
    pub second_moment: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: TrainConfig,
    pub scaler: TargetScaler,
    pub params: BTreeMap<String, ParamEntry>,
    pub optimizer: OptimizerCheckpoint,
}

fn to_entries<'a>(it: impl Iterator<Item = (&'a str, &'a Tensor2)>) -> BTreeMap<String, ParamEntry> {
    it.map(|(k, t)| {
        (
            k.to_string(),
            ParamEntry {
                shape: [t.rows, t.cols],
                values: t.values.clone(),
            },
        )
    })
    .collect()
}

fn from_entries(entries: &BTreeMap<String, ParamEntry>) -> Result<BTreeMap<String, Tensor2>> {
    entries
        .iter()
        .map(|(k, e)| Ok((k.clone(), Tensor2::from_vec(e.shape[0], e.shape[1], e.values.clone())?)))
        .collect()
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, model: &TrainedModel) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            scaler: model.scaler,
            params: to_entries(model.params.iter()),
            optimizer: OptimizerCheckpoint {
                config: model.optimizer.config,
                step: model.optimizer.step,
                first_moment: to_entries(model.optimizer.first_moment.iter().map(|(k, v)| (k.as_str(), v))),
                second_moment: to_entries(model.optimizer.second_moment.iter().map(|(k, v)| (k.as_str(), v))),
            },
        }
    }

    /// Parameters, checked against the shapes a fresh model of this config has.
    pub fn param_store(&self) -> Result<ParamStore> {
        let reference = init_params(&self.config.model, &mut fold_rng(0, 0))?;
        let mut store = ParamStore::new();
        for (k, t) in from_entries(&self.params)? {
            store.insert(k, t);
        }
        for (name, t) in reference.iter() {
            match store.try_get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Validation(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Validation(format!("checkpoint is missing parameter {name}"))),
            }
        }
        if store.len() != reference.len() {
            return Err(Error::Validation("checkpoint has unexpected parameters".into()));
        }
        Ok(store)
    }

    pub fn optimizer_state(&self) -> Result<AdamState> {
        Ok(AdamState {
            config: self.optimizer.config,
            step: self.optimizer.step,
            first_moment: from_entries(&self.optimizer.first_moment)?,
            second_moment: from_entries(&self.optimizer.second_moment)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.config.hash() != c.config_hash {
            return Err(Error::Validation(format!(
                "checkpoint config hash {} does not match its config",
                c.config_hash
            )));
        }
        Ok(c)
    }
}

/// Trains on every usable subject (the model shipped alongside a CV report).
pub fn train_full(records: &[SubjectRecord], graphs: &[GraphEntry], config: &TrainConfig) -> Result<Checkpoint> {
    let all: Vec<usize> = (0..records.len()).collect();
    let model = train_fold(records, graphs, &all, config, 0)?;
    Ok(Checkpoint::new(config, &model))
}

// ---------------------------------------------------------------------------
// Evaluation and explanation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub target: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub target: Target,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate_checkpoint(checkpoint: &Checkpoint, records: &[SubjectRecord]) -> Result<EvalReport> {
    let config = &checkpoint.config;
    let params = checkpoint.param_store()?;
    let graphs = build_graphs(records, &config.graph, config.ablation.graph())?;
    let all: Vec<usize> = (0..records.len()).collect();
    let preds = predict(&params, &config.model, &checkpoint.scaler, &graphs, &all)?;
    if preds.is_empty() {
        return Err(Error::Validation("no subjects could be evaluated".into()));
    }
    let predictions: Vec<Prediction> = preds
        .iter()
        .map(|&(i, p)| Prediction {
            subject_id: records[i].subject_id.clone(),
            target: records[i].target(config.target),
            prediction: p,
        })
        .collect();
    let p: Vec<f64> = predictions.iter().map(|x| x.prediction).collect();
    let y: Vec<f64> = predictions.iter().map(|x| x.target).collect();
    Ok(EvalReport {
        config_hash: checkpoint.config_hash.clone(),
        target: config.target,
        metrics: evaluate(&p, &y)?,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub fraction: f64,
    pub total_connections: usize,
    pub subjects: usize,
    pub connections: Vec<ConnectionImportance>,
}

/// Ranks connections by mean local attention over `records` and keeps the
/// top `⌈fraction · N⌉`.
pub fn explain(checkpoint: &Checkpoint, records: &[SubjectRecord], fraction: f64) -> Result<Explanation> {
    top_count(fraction, 1)?;
    if records.is_empty() {
        return Err(Error::Validation("no subjects to explain".into()));
    }
    let config = &checkpoint.config;
    let params = checkpoint.param_store()?;
    let entries = build_graphs(records, &config.graph, config.ablation.graph())?;
    let graphs: Vec<&HybridGraph> = entries.iter().filter_map(|e| e.graph.as_ref()).collect();
    if graphs.is_empty() {
        return Err(Error::Validation("no subject produced a usable graph".into()));
    }
    let mut rng = fold_rng(0, 0);
    let traces = graphs
        .iter()
        .map(|g| forward(g, &params, &config.model, Mode::Eval, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut ranked = extract_attention_importance(&traces, &graphs)?;
    let total = ranked.len();
    ranked.truncate(top_count(fraction, total)?);
    Ok(Explanation {
        fraction,
        total_connections: total,
        subjects: graphs.len(),
        connections: ranked,
    })
}

// ---------------------------------------------------------------------------
// Output files

pub fn write_report_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn loss_curves_csv(report: &RunReport) -> String {
    let mut s = String::from("fold,epoch,joint,task,sf\n");
    for f in &report.folds {
        for e in &f.loss_curve {
            s.push_str(&format!("{},{},{},{},{}\n", f.fold, e.epoch, e.joint, e.task, e.sf));
        }
    }
    s
}

pub fn metrics_csv(report: &RunReport) -> String {
    let corr = |c: Option<f64>| c.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("fold,model,mse,mae,correlation\n");
    for f in &report.folds {
        for (name, m) in [
            ("magnet", &f.metrics),
            ("constant", &f.baselines.constant),
            ("ridge", &f.baselines.ridge),
        ] {
            s.push_str(&format!("{},{},{},{},{}\n", f.fold, name, m.mse, m.mae, corr(m.correlation)));
        }
    }
    s
}
