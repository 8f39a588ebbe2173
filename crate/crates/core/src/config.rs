//! Run configuration, read from a TOML file with `[data]`, `[sample]`,
//! `[model]`, `[stage]`, `[train]` and `[transe]` sections.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::featurize::TranseConfig;
use crate::hetgraph::Task;
use crate::metagraph::DEFAULT_ENUMERATION_CAP;
use crate::model::Activation;
use crate::staged::StageConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Featureless {
    Zero,
    NeighborAvg,
    Transe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub target: String,
    /// Label file, relative to `dir`. Split files sit next to it.
    pub labels: PathBuf,
    pub task: Option<Task>,
    pub drop_relations: Vec<String>,
    /// Feature file per node type, relative to `dir`.
    pub features: BTreeMap<String, PathBuf>,
    pub featureless: Featureless,
    /// Directory of a trained embedding table, for `featureless = "transe"`.
    pub transe: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("."),
            target: String::new(),
            labels: PathBuf::from("labels.txt"),
            task: None,
            drop_relations: Vec::new(),
            features: BTreeMap::new(),
            featureless: Featureless::Zero,
            transe: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub k: usize,
    pub symmetrize: bool,
    pub cap: usize,
    /// Explicit relation subsets; sampling is skipped when given.
    pub subsets: Option<Vec<Vec<String>>>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { k: 8, symmetrize: true, cap: DEFAULT_ENUMERATION_CAP, subsets: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// `L`; features of hops `0..=L` are used.
    pub hops: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Width of a shared input projection. Required when featured types
    /// differ in width.
    pub projection: Option<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hops: 2, hidden: 64, dropout: 0.5, projection: None, activation: Activation::Prelu }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct StageSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub stage: StageConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Validation metric used to pick the best epoch; defaults to accuracy
    /// for single-label and micro-F1 for multi-label tasks.
    pub select_metric: Option<String>,
    /// NDCG cutoff; the full ranking when unset.
    pub ndcg_cutoff: Option<usize>,
    pub replicates: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 4096,
            lr: 1e-3,
            precision: Precision::F32,
            seed: 0,
            select_metric: None,
            ndcg_cutoff: None,
            replicates: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub sample: SampleConfig,
    pub model: ModelSection,
    pub stage: StageSection,
    pub train: TrainSection,
    pub transe: TranseConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| NarsError::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative `data.dir` is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NarsError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| NarsError::Serde(format!("{}: {e}", path.display())))?;
        if cfg.data.dir.is_relative() {
            if let Some(base) = path.parent() {
                cfg.data.dir = base.join(&cfg.data.dir);
            }
        }
        if let Some(t) = &cfg.data.transe {
            if t.is_relative() {
                cfg.data.transe = Some(cfg.data.dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NarsError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NarsError::Invalid(m));
        if self.sample.k == 0 && self.sample.subsets.is_none() {
            return bad("sample.k must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("train.lr {} must be positive", self.train.lr));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", self.model.dropout));
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if self.stage.enabled && (self.stage.stage.p == 0 || self.stage.stage.epochs_per_stage == 0) {
            return bad("stage.p and stage.epochs_per_stage must be positive".into());
        }
        if self.train.replicates == 0 {
            return bad("train.replicates must be positive".into());
        }
        Ok(())
    }

    pub fn labels_path(&self) -> PathBuf {
        self.data.dir.join(&self.data.labels)
    }
}
