//! A typed stochastic block model with one informative relation.
//!
//! Papers (the target type) carry one of `C` classes. Authors belong to a
//! community and mostly write papers of that class, so `writes` is
//! informative. `has_topic` links papers to fields at random and `cites`
//! links random paper pairs; both only dilute a merged neighborhood. Paper
//! features are a class mean buried in Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::featfile;
use crate::hetgraph::{save_graph, save_labels, FeatureMatrix, HeteroGraph, LabelSet, NodeTypeId, RelationSpec, Splits, Task};
use crate::matrix::Matrix;
use crate::rng::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbmConfig {
    pub papers: usize,
    pub authors: usize,
    pub fields: usize,
    pub classes: usize,
    pub dim: usize,
    pub authors_per_paper: usize,
    pub topics_per_paper: usize,
    pub cites_per_paper: usize,
    /// Probability that an authorship stays inside the paper's community.
    pub p_in: f64,
    /// Norm of each class mean.
    pub signal: f64,
    /// Per-coordinate standard deviation of the feature noise.
    pub noise: f64,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            papers: 1200,
            authors: 600,
            fields: 200,
            classes: 4,
            dim: 16,
            authors_per_paper: 3,
            topics_per_paper: 2,
            cites_per_paper: 4,
            p_in: 0.95,
            signal: 1.5,
            noise: 1.0,
            train_frac: 0.6,
            valid_frac: 0.2,
        }
    }
}

pub struct SyntheticDataset {
    pub graph: HeteroGraph,
    pub target: NodeTypeId,
    /// Features of the target type only; the other types are featureless.
    pub features: BTreeMap<NodeTypeId, FeatureMatrix>,
    pub labels: LabelSet,
}

pub const INFORMATIVE_RELATION: &str = "writes";

pub fn generate(cfg: &SbmConfig, seed: u64) -> Result<SyntheticDataset> {
    if cfg.classes < 2 || cfg.papers < cfg.classes || cfg.authors < cfg.classes || cfg.fields == 0 || cfg.dim == 0 {
        return Err(NarsError::Invalid(format!("degenerate block model {cfg:?}")));
    }
    if cfg.train_frac <= 0.0 || cfg.valid_frac <= 0.0 || cfg.train_frac + cfg.valid_frac >= 1.0 {
        return Err(NarsError::Invalid("split fractions must leave room for a test split".into()));
    }
    let mut rng = rng_for(seed, Stream::Synthetic);
    let c = cfg.classes;
    let class: Vec<u32> = (0..cfg.papers).map(|v| (v % c) as u32).collect();
    let community: Vec<usize> = (0..cfg.authors).map(|a| a % c).collect();
    let by_community: Vec<Vec<u32>> =
        (0..c).map(|k| (0..cfg.authors).filter(|&a| community[a] == k).map(|a| a as u32).collect()).collect();

    let mut writes = Vec::new();
    let mut topics = Vec::new();
    let mut cites = Vec::new();
    for p in 0..cfg.papers {
        for _ in 0..cfg.authors_per_paper {
            let a = if rng.gen_bool(cfg.p_in) {
                *by_community[class[p] as usize].choose(&mut rng).unwrap()
            } else {
                rng.gen_range(0..cfg.authors) as u32
            };
            writes.push((a, p as u32));
        }
        for _ in 0..cfg.topics_per_paper {
            topics.push((p as u32, rng.gen_range(0..cfg.fields) as u32));
        }
        for _ in 0..cfg.cites_per_paper {
            cites.push((p as u32, rng.gen_range(0..cfg.papers) as u32));
        }
    }
    let graph = HeteroGraph::new(
        &[("paper", cfg.papers), ("author", cfg.authors), ("field", cfg.fields)],
        vec![
            RelationSpec::new(INFORMATIVE_RELATION, "author", "paper", writes),
            RelationSpec::new("has_topic", "paper", "field", topics),
            RelationSpec::new("cites", "paper", "paper", cites),
        ],
    )?;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n * cfg.signal).collect()
        })
        .collect();
    let feats = Matrix::from_fn(cfg.papers, cfg.dim, |p, d| {
        (means[class[p] as usize][d] + cfg.noise * normal.sample(&mut rng)) as f32
    });
    let target = NodeTypeId(0);
    let mut features = BTreeMap::new();
    features.insert(target, FeatureMatrix::new(&graph, target, feats)?);

    let mut order: Vec<usize> = (0..cfg.papers).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.papers as f64 * cfg.train_frac).round() as usize;
    let n_valid = (cfg.papers as f64 * cfg.valid_frac).round() as usize;
    let split = |r: std::ops::Range<usize>| {
        let mut v = order[r].to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: split(0..n_train),
        valid: split(n_train..n_train + n_valid),
        test: split(n_train + n_valid..cfg.papers),
    };
    let labels = LabelSet::new(target, Task::SingleLabel, c, class.iter().map(|&k| vec![k]).collect(), splits)?;
    Ok(SyntheticDataset { graph, target, features, labels })
}

/// Writes the dataset in the on-disk layout read by `load_graph`,
/// `load_features` and `load_labels`.
pub fn save(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    save_graph(&ds.graph, dir)?;
    for (t, f) in &ds.features {
        let name = &ds.graph.node_type(*t).name;
        featfile::write(&dir.join(format!("{name}.feat")), &f.data)?;
    }
    save_labels(&ds.labels, &dir.join("labels.txt"))
}
