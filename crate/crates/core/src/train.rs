//! End-to-end runs: preprocessing into hop files, the epoch loop with
//! validation-based model selection, evaluation of saved checkpoints and
//! replicate summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{Lease, MemoryAccountant};
use crate::config::{Config, Featureless, ModelSection};
use crate::error::{NarsError, Result};
use crate::featurize::{featurize_transe, featurize_zero, fill_neighbor_avg, load_table};
use crate::hetgraph::{load_features, load_graph, load_labels, FeatureMatrix, HeteroGraph, LabelSet, NodeTypeId, Split, Task};
use crate::matrix::Matrix;
use crate::metagraph::{choose_subsets, extract_subgraph, valid_subsets, RelationSubset, DEFAULT_ENUMERATION_CAP};
use crate::metrics::{self, MetricRow};
use crate::model::{aggregate, aggregate_backward, Adam, AggCoefficients, ModelConfig, NarsModel, Targets};
use crate::propagate::{
    assemble_block_input, assemble_input, gen_neighbor_features_rows, save_hops, HopFeatureTensor, HopManifest,
    DiskHops, HopSource, InMemoryHops, InputLayout, MANIFEST_FILE,
};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use crate::synthetic::{self, SbmConfig};
use crate::staged::{fold_coefficients, StageConfig, StageSnapshot, StageState};

/// Graph, assembled input features and labels, ready for propagation.
pub struct PreparedData {
    pub graph: HeteroGraph,
    pub target: NodeTypeId,
    pub input: Matrix<f32>,
    /// Set when types of different widths were placed in column blocks.
    pub layout: Option<InputLayout>,
    pub labels: LabelSet,
}

/// Loads the dataset named by `cfg.data`, drops the configured relations and
/// featurizes featureless node types.
pub fn prepare(cfg: &Config) -> Result<PreparedData> {
    let d = &cfg.data;
    let graph = load_graph(&d.dir)?.without_relations(&d.drop_relations)?;
    let target = graph.node_type_by_name(&d.target)?;
    let mut feats = BTreeMap::new();
    for (name, path) in &d.features {
        let t = graph.node_type_by_name(name)?;
        feats.insert(t, load_features(&graph, t, &d.dir.join(path))?);
    }
    featurize_missing(&graph, &mut feats, d.featureless, d.transe.as_deref())?;
    let widths: Vec<usize> = feats.values().map(FeatureMatrix::dim).collect();
    let (input, layout) = if widths.windows(2).all(|w| w[0] == w[1]) {
        (assemble_input(&graph, &feats)?, None)
    } else if cfg.model.projection.is_some() {
        let (m, l) = assemble_block_input(&graph, &feats)?;
        (m, Some(l))
    } else {
        return Err(NarsError::Dimension(format!(
            "node types have feature widths {widths:?}; set model.projection to combine them"
        )));
    };
    let labels = load_labels(&graph, target, &cfg.labels_path(), d.task)?;
    Ok(PreparedData { graph, target, input, layout, labels })
}

/// Fills every node type without features according to `strategy`.
pub fn featurize_missing(
    g: &HeteroGraph,
    feats: &mut BTreeMap<NodeTypeId, FeatureMatrix>,
    strategy: Featureless,
    transe_dir: Option<&Path>,
) -> Result<()> {
    let missing: Vec<NodeTypeId> = g.node_types().iter().map(|t| t.id).filter(|t| !feats.contains_key(t)).collect();
    if missing.is_empty() {
        return Ok(());
    }
    match strategy {
        Featureless::Zero => {
            let dim = feats.values().next().map(FeatureMatrix::dim).ok_or_else(|| {
                NarsError::Invalid("zero padding needs at least one featured type to take the width from".into())
            })?;
            for t in missing {
                feats.insert(t, featurize_zero(g, t, dim)?);
            }
        }
        Featureless::NeighborAvg => fill_neighbor_avg(g, feats)?,
        Featureless::Transe => {
            let dir = transe_dir.ok_or_else(|| NarsError::Invalid("data.transe must name a trained embedding table".into()))?;
            let table = load_table(dir)?;
            for t in missing {
                feats.insert(t, featurize_transe(g, &table, t, None)?);
            }
        }
    }
    Ok(())
}

/// The configured subsets, or `k` subsets sampled from the valid ones.
pub fn config_subsets(cfg: &Config, g: &HeteroGraph, target: NodeTypeId, seed: u64) -> Result<Vec<RelationSubset>> {
    match &cfg.sample.subsets {
        Some(list) => list.iter().map(|names| RelationSubset::from_names(g, names)).collect(),
        None => choose_subsets(g, target, cfg.sample.k, seed, cfg.sample.cap),
    }
}

/// Hop tensors of every subset, kept in memory and restricted to the rows of
/// `target`.
pub fn in_memory_hops<T: Scalar>(
    g: &HeteroGraph,
    input: &Matrix<f32>,
    subsets: &[RelationSubset],
    hops: usize,
    symmetrize: bool,
    target: NodeTypeId,
) -> Result<InMemoryHops<T>> {
    let h0: Matrix<T> = input.cast();
    let start = g.offset(target);
    let rows = start..start + g.node_type(target).count;
    let tensors = subsets
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sub = extract_subgraph(g, *s, symmetrize);
            gen_neighbor_features_rows(i, &sub, &h0, hops, rows.clone(), None)
        })
        .collect::<Result<Vec<_>>>()?;
    InMemoryHops::new(tensors)
}

/// Samples subsets, computes their hop features for the target rows and
/// writes them with a manifest, `subsets.txt` and the effective config to
/// `out`.
pub fn preprocess(cfg: &Config, out: &Path) -> Result<HopManifest> {
    let data = prepare(cfg)?;
    let subsets = config_subsets(cfg, &data.graph, data.target, cfg.train.seed)?;
    fs::create_dir_all(out).map_err(|e| NarsError::io(out, e))?;
    let start = data.graph.offset(data.target);
    let rows = start..start + data.graph.node_type(data.target).count;
    let files = subsets
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sub = extract_subgraph(&data.graph, *s, cfg.sample.symmetrize);
            let t = gen_neighbor_features_rows(i, &sub, &data.input, cfg.model.hops, rows.clone(), None)?;
            save_hops(out, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<Vec<String>> = subsets.iter().map(|s| s.names(&data.graph)).collect();
    let manifest = HopManifest {
        num_subgraphs: subsets.len(),
        num_hops: cfg.model.hops + 1,
        rows: rows.len(),
        cols: data.input.cols(),
        row_offset: start,
        target: cfg.data.target.clone(),
        subsets: names.clone(),
        files: files.into_iter().flatten().collect(),
    };
    manifest.write(out)?;
    let listing: String = names.iter().map(|n| format!("{}\n", n.join(","))).collect();
    let p = out.join("subsets.txt");
    fs::write(&p, listing).map_err(|e| NarsError::io(&p, e))?;
    let p = out.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(|e| NarsError::io(&p, e))?;
    if let Some(layout) = &data.layout {
        let mut text = String::new();
        for (name, start, width) in &layout.blocks {
            writeln!(text, "{name}\t{start}\t{width}").unwrap();
        }
        let p = out.join("layout.tsv");
        fs::write(&p, text).map_err(|e| NarsError::io(&p, e))?;
    }
    log::info!("wrote {} subgraphs x {} hops to {}/{MANIFEST_FILE}", manifest.num_subgraphs, manifest.num_hops, out.display());
    Ok(manifest)
}

/// Labels of the configured target, read against the graph after relation
/// dropping.
pub fn load_config_labels(cfg: &Config) -> Result<LabelSet> {
    let g = load_graph(&cfg.data.dir)?.without_relations(&cfg.data.drop_relations)?;
    let t = g.node_type_by_name(&cfg.data.target)?;
    load_labels(&g, t, &cfg.labels_path(), cfg.data.task)
}

/// Trains on the hop files that [`preprocess`] wrote to `hops`.
pub fn fit_from_dir<T: Scalar>(cfg: &Config, hops: &Path, seed: u64) -> Result<FitReport<T>> {
    let src = DiskHops::open(hops)?;
    let m = src.manifest();
    if m.target != cfg.data.target {
        return Err(NarsError::Invalid(format!("hop files are for `{}`, config targets `{}`", m.target, cfg.data.target)));
    }
    if m.num_hops != cfg.model.hops + 1 {
        return Err(NarsError::Invalid(format!(
            "hop files hold {} hops, config asks for L={}",
            m.num_hops - 1,
            cfg.model.hops
        )));
    }
    let labels = load_config_labels(cfg)?;
    let opts = FitOptions::from_config(cfg, seed);
    Trainer::new(Arc::new(src), labels, &cfg.model, opts, MemoryAccountant::new())?.fit()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub select_metric: Option<String>,
    pub ndcg_cutoff: Option<usize>,
    /// Staged training when set.
    pub stage: Option<StageConfig>,
}

impl FitOptions {
    pub fn from_config(cfg: &Config, seed: u64) -> Self {
        FitOptions {
            epochs: cfg.train.epochs,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            seed,
            select_metric: cfg.train.select_metric.clone(),
            ndcg_cutoff: cfg.train.ndcg_cutoff,
            stage: cfg.stage.enabled.then(|| cfg.stage.stage.clone()),
        }
    }

    fn metric_name(&self, task: Task) -> String {
        self.select_metric.clone().unwrap_or_else(|| match task {
            Task::SingleLabel => "accuracy".into(),
            Task::MultiLabel => "micro_f1".into(),
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NARSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Model, coefficients, optimizer and RNG state after some number of epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub model: NarsModel<T>,
    pub a: AggCoefficients<T>,
    pub adam: Adam<T>,
    /// Optimizer for `a`; absent in staged runs, where `a` changes only by
    /// folding.
    pub adam_a: Option<Adam<T>>,
    pub stage: Option<StageSnapshot<T>>,
    pub rng: ChaCha8Rng,
    /// Best validation metric so far and the epoch it was reached.
    pub best: Option<(f64, usize)>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Coefficients for inference over all `K` subgraphs; in staged runs the
    /// current stage is folded in.
    pub fn inference_coefficients(&self) -> Result<AggCoefficients<T>> {
        match &self.stage {
            Some(s) => fold_coefficients(&self.a, &s.b, s.alpha, &s.members),
            None => Ok(self.a.clone()),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        bincode::serialize_into(&mut out, self).map_err(|e| NarsError::Serde(e.to_string()))?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(NarsError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NarsError::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        if bytes[12] as usize != T::BYTES {
            return Err(NarsError::Format(format!("checkpoint holds {}-byte floats, expected {}", bytes[12], T::BYTES)));
        }
        bincode::deserialize(&bytes[13..]).map_err(|e| NarsError::Format(format!("corrupt checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| NarsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| NarsError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| NarsError::Format(format!("{}: {e}", path.display())))
    }
}

/// Byte width of the floats in a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| NarsError::io(path, e))?;
    if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NarsError::Format(format!("{}: not a checkpoint file", path.display())));
    }
    Ok(bytes[12] as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Audit {
    EvalValid(usize),
    Select(usize),
    EvalTest(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub stage: Option<usize>,
    pub valid: BTreeMap<String, f64>,
    pub test: BTreeMap<String, f64>,
}

pub struct FitReport<T> {
    pub epochs: Vec<EpochRecord>,
    pub audit: Vec<Audit>,
    pub best_epoch: Option<usize>,
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    /// Epoch at which training stopped on a non-finite loss; `last` then
    /// holds the state before that epoch.
    pub diverged: Option<usize>,
    pub peak_resident_bytes: usize,
    pub metric: String,
}

impl<T: Scalar> FitReport<T> {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for r in &self.epochs {
            rows.push(MetricRow::new(r.epoch, "train", "loss", r.train_loss));
            for (split, m) in [("valid", &r.valid), ("test", &r.test)] {
                for (k, v) in m {
                    rows.push(MetricRow::new(r.epoch, split, k, *v));
                }
            }
        }
        rows
    }

    /// `metrics.csv`, `audit.log`, `best.ckpt` and `last.ckpt` under `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| NarsError::io(out, e))?;
        metrics::write_metrics_csv(&out.join("metrics.csv"), &self.metric_rows())?;
        let log: String = self.audit.iter().map(|a| format!("{a:?}\n")).collect();
        let p = out.join("audit.log");
        fs::write(&p, log).map_err(|e| NarsError::io(&p, e))?;
        self.best.save(&out.join("best.ckpt"))?;
        self.last.save(&out.join("last.ckpt"))
    }
}

enum Coefficients<T: Scalar> {
    Full { a: AggCoefficients<T>, adam: Adam<T>, resident: Vec<HopFeatureTensor<T>>, _leases: Vec<Lease> },
    Staged { a: AggCoefficients<T>, state: StageState<T> },
}

pub struct Trainer<T: Scalar> {
    opts: FitOptions,
    model: NarsModel<T>,
    adam: Adam<T>,
    coef: Coefficients<T>,
    rng: ChaCha8Rng,
    labels: LabelSet,
    source: Arc<dyn HopSource<T>>,
    acct: MemoryAccountant,
    epoch: usize,
    best: Option<(f64, usize)>,
}

fn load_all<T: Scalar>(source: &dyn HopSource<T>, acct: &MemoryAccountant) -> Result<(Vec<HopFeatureTensor<T>>, Vec<Lease>)> {
    let mut tensors = Vec::new();
    let mut leases = Vec::new();
    for i in 0..source.num_subgraphs() {
        let t = source.load(i)?;
        leases.push(acct.lease(t.bytes()));
        tensors.push(t);
    }
    Ok((tensors, leases))
}

/// Per subgraph, per hop: the selected rows.
type Gathered<T> = Vec<Vec<Matrix<T>>>;

fn gather<T: Scalar>(tensors: &[HopFeatureTensor<T>], rows: &[usize]) -> Gathered<T> {
    tensors.iter().map(|t| t.hops.iter().map(|h| h.gather_rows(rows)).collect()).collect()
}

fn model_config<T: Scalar>(source: &dyn HopSource<T>, labels: &LabelSet, m: &ModelSection) -> ModelConfig {
    ModelConfig {
        in_dim: source.dim(),
        proj_dim: m.projection,
        hidden: m.hidden,
        levels: source.num_hops(),
        classes: labels.num_classes,
        dropout: m.dropout,
        activation: m.activation,
        task: labels.task,
    }
}

fn check_source<T: Scalar>(source: &dyn HopSource<T>, labels: &LabelSet) -> Result<()> {
    if source.rows() != labels.len() {
        return Err(NarsError::Dimension(format!(
            "hop tensors have {} rows, labels cover {} nodes",
            source.rows(),
            labels.len()
        )));
    }
    Ok(())
}

fn check_shapes<T: Scalar>(model: &NarsModel<T>, a: &AggCoefficients<T>, source: &dyn HopSource<T>, labels: &LabelSet) -> Result<()> {
    check_source(source, labels)?;
    let c = &model.config;
    if a.k() != source.num_subgraphs() || a.levels() != source.num_hops() || a.dim() != source.dim() {
        return Err(NarsError::Dimension(format!(
            "checkpoint coefficients are {}x{}x{}, hop tensors are {}x{}x{}",
            a.k(),
            a.levels(),
            a.dim(),
            source.num_subgraphs(),
            source.num_hops(),
            source.dim()
        )));
    }
    if c.in_dim != source.dim() || c.levels != source.num_hops() || c.classes != labels.num_classes || c.task != labels.task {
        return Err(NarsError::Dimension("checkpoint model does not match the data".into()));
    }
    Ok(())
}

fn targets<T: Scalar>(labels: &LabelSet, rows: &[usize]) -> Targets<T> {
    match labels.task {
        Task::SingleLabel => Targets::Classes(rows.iter().map(|&v| labels.class_of(v).unwrap_or(0)).collect()),
        Task::MultiLabel => {
            let mut m = Matrix::zeros(rows.len(), labels.num_classes);
            for (r, &v) in rows.iter().enumerate() {
                for &c in labels.labels_of(v) {
                    m.set(r, c as usize, T::one());
                }
            }
            Targets::MultiHot(m)
        }
    }
}

/// Accuracy and micro-F1 (single-label), or micro-F1 at a 0.5 probability
/// threshold plus NDCG and MRR over raw scores (multi-label).
pub fn split_metrics<T: Scalar>(
    logits: &Matrix<T>,
    labels: &LabelSet,
    rows: &[usize],
    ndcg_cutoff: Option<usize>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let truth: Vec<Vec<u32>> = rows.iter().map(|&v| labels.labels_of(v).to_vec()).collect();
    match labels.task {
        Task::SingleLabel => {
            let pred: Vec<u32> = (0..logits.rows())
                .map(|r| {
                    let row = logits.row(r);
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    best as u32
                })
                .collect();
            let t: Vec<u32> = truth.iter().map(|l| l[0]).collect();
            out.insert("accuracy".into(), metrics::accuracy(&pred, &t)?);
            let ps: Vec<[u32; 1]> = pred.iter().map(|&p| [p]).collect();
            out.insert("micro_f1".into(), metrics::micro_f1(&ps, &truth)?);
        }
        Task::MultiLabel => {
            let pred: Vec<Vec<u32>> = (0..logits.rows())
                .map(|r| (0..logits.cols()).filter(|&c| logits.get(r, c) >= T::zero()).map(|c| c as u32).collect())
                .collect();
            out.insert("micro_f1".into(), metrics::micro_f1(&pred, &truth)?);
            let scores: Vec<Vec<f64>> = (0..logits.rows()).map(|r| logits.row(r).iter().map(|v| v.widen()).collect()).collect();
            let rank = metrics::ranking_metrics(&scores, &truth, ndcg_cutoff)?;
            out.insert("ndcg".into(), rank.ndcg);
            out.insert("mrr".into(), rank.mrr);
        }
    }
    Ok(out)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        source: Arc<dyn HopSource<T>>,
        labels: LabelSet,
        model: &ModelSection,
        opts: FitOptions,
        acct: MemoryAccountant,
    ) -> Result<Self> {
        check_source(source.as_ref(), &labels)?;
        if opts.batch_size == 0 {
            return Err(NarsError::Invalid("batch size must be positive".into()));
        }
        let mut rng = rng_for(opts.seed, Stream::Training);
        let model = NarsModel::new(model_config(source.as_ref(), &labels, model), &mut rng)?;
        let a = AggCoefficients::random(source.num_subgraphs(), source.num_hops(), source.dim(), &mut rng);
        let adam = Adam::new(opts.lr, model.blocks());
        let coef = match &opts.stage {
            Some(sc) => {
                let state = StageState::new(Arc::clone(&source), &a, sc.clone(), opts.lr, opts.seed, acct.clone())?;
                Coefficients::Staged { a, state }
            }
            None => {
                let (resident, leases) = load_all(source.as_ref(), &acct)?;
                Coefficients::Full { adam: Adam::new(opts.lr, [&a.data]), a, resident, _leases: leases }
            }
        };
        Ok(Trainer { opts, model, adam, coef, rng, labels, source, acct, epoch: 0, best: None })
    }

    /// Continues from `ckpt`; `opts` must describe the same kind of run.
    pub fn resume(
        source: Arc<dyn HopSource<T>>,
        labels: LabelSet,
        ckpt: Checkpoint<T>,
        opts: FitOptions,
        acct: MemoryAccountant,
    ) -> Result<Self> {
        check_shapes(&ckpt.model, &ckpt.a, source.as_ref(), &labels)?;
        let coef = match (&opts.stage, ckpt.stage, ckpt.adam_a) {
            (Some(sc), Some(snap), _) => {
                let state = StageState::restore(Arc::clone(&source), snap, sc.clone(), acct.clone())?;
                Coefficients::Staged { a: ckpt.a, state }
            }
            (None, None, Some(adam)) => {
                let (resident, leases) = load_all(source.as_ref(), &acct)?;
                Coefficients::Full { a: ckpt.a, adam, resident, _leases: leases }
            }
            _ => return Err(NarsError::Invalid("checkpoint and options disagree on staged training".into())),
        };
        Ok(Trainer {
            opts,
            model: ckpt.model,
            adam: ckpt.adam,
            coef,
            rng: ckpt.rng,
            labels,
            source,
            acct,
            epoch: ckpt.epoch,
            best: ckpt.best,
        })
    }

    pub fn model(&self) -> &NarsModel<T> {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn source(&self) -> &Arc<dyn HopSource<T>> {
        &self.source
    }

    pub fn accountant(&self) -> &MemoryAccountant {
        &self.acct
    }

    pub fn coefficients(&self) -> &AggCoefficients<T> {
        match &self.coef {
            Coefficients::Full { a, .. } | Coefficients::Staged { a, .. } => a,
        }
    }

    pub fn stage_state(&self) -> Option<&StageState<T>> {
        match &self.coef {
            Coefficients::Staged { state, .. } => Some(state),
            Coefficients::Full { .. } => None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let (a, adam_a, stage) = match &self.coef {
            Coefficients::Full { a, adam, .. } => (a.clone(), Some(adam.clone()), None),
            Coefficients::Staged { a, state } => (a.clone(), None, Some(state.snapshot())),
        };
        Checkpoint {
            epoch: self.epoch,
            model: self.model.clone(),
            a,
            adam: self.adam.clone(),
            adam_a,
            stage,
            rng: self.rng.clone(),
            best: self.best,
        }
    }

    fn inputs(&self, rows: &[usize]) -> Result<(Vec<Matrix<T>>, Option<Gathered<T>>)> {
        match &self.coef {
            Coefficients::Full { a, resident, .. } => {
                let g = gather(resident, rows);
                Ok((aggregate(&g, a)?, Some(g)))
            }
            Coefficients::Staged { state, .. } => Ok((state.inputs(rows)?, None)),
        }
    }

    fn train_batch(&mut self, rows: &[usize]) -> Result<f64> {
        let (x, gathered) = self.inputs(rows)?;
        let y = targets(&self.labels, rows);
        let g = self.model.loss_and_grads(&x, &y, Some(&mut self.rng as &mut dyn RngCore))?;
        match &mut self.coef {
            Coefficients::Full { a, adam, .. } => {
                let da = aggregate_backward(gathered.as_deref().unwrap(), &g.inputs, a)?;
                adam.update([&mut a.data], &[da.data]);
            }
            Coefficients::Staged { state, .. } => {
                let (db, dalpha) = state.backward(rows, &g.inputs);
                state.step(&db, dalpha);
            }
        }
        self.adam.update(self.model.blocks_mut(), &g.params);
        Ok(g.loss.widen())
    }

    /// One pass over the shuffled training nodes; returns the mean loss.
    /// In staged runs a stage boundary is crossed first when due.
    pub fn run_epoch(&mut self) -> Result<f64> {
        if let Coefficients::Staged { a, state } = &mut self.coef {
            if self.epoch > 0 && self.epoch.is_multiple_of(state.config().epochs_per_stage) {
                state.advance(a)?;
            }
        }
        let mut ids = self.labels.split(Split::Train).to_vec();
        if ids.is_empty() {
            return Err(NarsError::Invalid("training split is empty".into()));
        }
        ids.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in ids.chunks(self.opts.batch_size) {
            total += self.train_batch(chunk)? * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(total / ids.len() as f64)
    }

    /// Eval-mode logits for `rows`, in batches.
    pub fn predict(&self, rows: &[usize]) -> Result<Matrix<T>> {
        let mut parts = Vec::new();
        for chunk in rows.chunks(self.opts.batch_size) {
            let (x, _) = self.inputs(chunk)?;
            parts.push(self.model.forward(&x, None)?.logits);
        }
        Ok(stack(&parts, self.labels.num_classes))
    }

    pub fn evaluate(&self, split: Split) -> Result<BTreeMap<String, f64>> {
        let rows = self.labels.split(split);
        if rows.is_empty() {
            return Err(NarsError::Invalid(format!("{} split is empty", split.name())));
        }
        split_metrics(&self.predict(rows)?, &self.labels, rows, self.opts.ndcg_cutoff)
    }

    /// Trains up to `opts.epochs`, evaluating on validation then test after
    /// every epoch. The best epoch is chosen on validation alone.
    pub fn fit(mut self) -> Result<FitReport<T>> {
        let metric = self.opts.metric_name(self.labels.task);
        let mut report_epochs = Vec::new();
        let mut audit = Vec::new();
        let mut best_ckpt = self.checkpoint();
        let mut diverged = None;
        let mut last_good = None;
        while self.epoch < self.opts.epochs {
            let before = self.checkpoint();
            let epoch = self.epoch;
            let loss = match self.run_epoch() {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(NarsError::NonFinite(_)) => {
                    log::warn!("training diverged in epoch {epoch}");
                    diverged = Some(epoch);
                    last_good = Some(before);
                    break;
                }
                Err(e) => return Err(e),
            };
            let valid = self.evaluate(Split::Valid)?;
            audit.push(Audit::EvalValid(epoch));
            let score = *valid
                .get(&metric)
                .ok_or_else(|| NarsError::Unknown { kind: "metric", name: metric.clone() })?;
            if self.best.is_none_or(|(b, _)| score > b) {
                self.best = Some((score, epoch));
                best_ckpt = self.checkpoint();
                audit.push(Audit::Select(epoch));
            }
            let test = if self.labels.split(Split::Test).is_empty() {
                BTreeMap::new()
            } else {
                let t = self.evaluate(Split::Test)?;
                audit.push(Audit::EvalTest(epoch));
                t
            };
            log::info!("epoch {epoch}: loss {loss:.6} valid {metric} {score:.4}");
            let stage = self.stage_state().map(StageState::stage);
            report_epochs.push(EpochRecord { epoch, train_loss: loss, stage, valid, test });
        }
        Ok(FitReport {
            epochs: report_epochs,
            audit,
            best_epoch: self.best.map(|(_, e)| e),
            best: best_ckpt,
            last: last_good.unwrap_or_else(|| self.checkpoint()),
            diverged,
            peak_resident_bytes: self.acct.peak(),
            metric,
        })
    }
}

fn stack<T: Scalar>(parts: &[Matrix<T>], cols: usize) -> Matrix<T> {
    let rows = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, cols, data).expect("stacked logits")
}

/// Eval-mode metrics of a checkpoint on one split, streaming one subgraph
/// tensor at a time.
pub fn evaluate_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    source: &dyn HopSource<T>,
    labels: &LabelSet,
    split: Split,
    ndcg_cutoff: Option<usize>,
) -> Result<BTreeMap<String, f64>> {
    let a = ckpt.inference_coefficients()?;
    check_shapes(&ckpt.model, &a, source, labels)?;
    let rows = labels.split(split);
    if rows.is_empty() {
        return Err(NarsError::Invalid(format!("{} split is empty", split.name())));
    }
    let mut gathered = Vec::with_capacity(a.k());
    for i in 0..a.k() {
        let t = source.load(i)?;
        gathered.push(t.hops.iter().map(|h| h.gather_rows(rows)).collect::<Vec<_>>());
    }
    let x = aggregate(&gathered, &a)?;
    let logits = ckpt.model.forward(&x, None)?.logits;
    split_metrics(&logits, labels, rows, ndcg_cutoff)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl ReplicateSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        ReplicateSummary { values, mean, std }
    }
}

impl std::fmt::Display for ReplicateSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.std, self.values.len())
    }
}

/// Test value of the selection metric at the best validation epoch.
pub fn best_test_metric<T: Scalar>(report: &FitReport<T>) -> Result<f64> {
    report
        .best_record()
        .and_then(|r| r.test.get(&report.metric).copied())
        .ok_or_else(|| NarsError::Invalid("no epoch completed with a test evaluation".into()))
}

/// Runs `f` once per seed and summarizes the returned values.
pub fn replicates(seeds: &[u64], mut f: impl FnMut(u64) -> Result<f64>) -> Result<ReplicateSummary> {
    if seeds.is_empty() {
        return Err(NarsError::Invalid("no replicate seeds".into()));
    }
    let values = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok(ReplicateSummary::new(values))
}

/// Test accuracy of NARS over every valid subset and of the merged
/// single-subgraph ablation, on typed block-model graphs, one per seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SbmComparison {
    pub nars: ReplicateSummary,
    pub merged: ReplicateSummary,
    pub subsets: Vec<Vec<String>>,
}

pub fn compare_on_sbm(
    sbm: &SbmConfig,
    model: &ModelSection,
    opts: &FitOptions,
    seeds: &[u64],
) -> Result<SbmComparison> {
    let mut subsets = Vec::new();
    let mut nars = Vec::new();
    let mut merged = Vec::new();
    for &seed in seeds {
        let ds = synthetic::generate(sbm, seed)?;
        let mut feats = ds.features.clone();
        fill_neighbor_avg(&ds.graph, &mut feats)?;
        let input = assemble_input(&ds.graph, &feats)?;
        let all = valid_subsets(&ds.graph, ds.target, DEFAULT_ENUMERATION_CAP)?;
        subsets = all.iter().map(|s| s.names(&ds.graph)).collect();
        let everything = RelationSubset::from_mask((1u64 << ds.graph.relations().len()) - 1)?;
        for (list, out) in [(all, &mut nars), (vec![everything], &mut merged)] {
            let src = in_memory_hops::<f32>(&ds.graph, &input, &list, model.hops, true, ds.target)?;
            let o = FitOptions { seed, ..opts.clone() };
            let report = Trainer::new(Arc::new(src), ds.labels.clone(), model, o, MemoryAccountant::new())?.fit()?;
            out.push(best_test_metric(&report)?);
        }
    }
    Ok(SbmComparison { nars: ReplicateSummary::new(nars), merged: ReplicateSummary::new(merged), subsets })
}
