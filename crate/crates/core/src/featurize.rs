//! Input features for node types that come without any: zero padding,
//! averages of already-featured neighbors, or TransE graph embeddings.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::featfile;
use crate::hetgraph::{FeatureMatrix, HeteroGraph, NodeTypeId, RelationId};
use crate::matrix::Matrix;
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;

pub fn featurize_zero(g: &HeteroGraph, t: NodeTypeId, dim: usize) -> Result<FeatureMatrix> {
    if dim == 0 {
        return Err(NarsError::Invalid("feature width must be positive".into()));
    }
    FeatureMatrix::new(g, t, Matrix::zeros(g.node_type(t).count, dim))
}

/// Breadth-first distance of every node type from the featured ones over the
/// type-level graph. `None` marks unreachable types.
fn type_levels(g: &HeteroGraph, featured: &BTreeSet<NodeTypeId>) -> Vec<Option<usize>> {
    let n = g.node_types().len();
    let mut level = vec![None; n];
    let mut queue = VecDeque::new();
    for t in featured {
        level[t.0] = Some(0);
        queue.push_back(t.0);
    }
    while let Some(t) = queue.pop_front() {
        for r in g.relations() {
            for (a, b) in [(r.src.0, r.dst.0), (r.dst.0, r.src.0)] {
                if a == t && level[b].is_none() {
                    level[b] = Some(level[t].unwrap() + 1);
                    queue.push_back(b);
                }
            }
        }
    }
    level
}

/// Mean of the features of `t`'s neighbors whose type is in `feats`, across
/// every relation touching `t`. Nodes with no such neighbor get zeros.
fn average_from_featured(g: &HeteroGraph, t: NodeTypeId, feats: &BTreeMap<NodeTypeId, FeatureMatrix>) -> Result<FeatureMatrix> {
    let dim = feats
        .values()
        .next()
        .map(FeatureMatrix::dim)
        .ok_or_else(|| NarsError::Invalid("no featured node types".into()))?;
    let count = g.node_type(t).count;
    let mut sums = vec![0f64; count * dim];
    let mut hits = vec![0usize; count];
    for r in g.relations() {
        let sides = [(r.src, r.dst, g.forward(r.id)), (r.dst, r.src, g.reverse(r.id))];
        for (own, other, csr) in sides {
            if own != t || other == t {
                continue;
            }
            let Some(src) = feats.get(&other) else { continue };
            for v in 0..count {
                for &u in csr.row(v) {
                    hits[v] += 1;
                    for (s, x) in sums[v * dim..(v + 1) * dim].iter_mut().zip(src.data.row(u as usize)) {
                        *s += *x as f64;
                    }
                }
            }
        }
    }
    let data = Matrix::from_fn(count, dim, |v, d| match hits[v] {
        0 => 0.0,
        h => (sums[v * dim + d] / h as f64) as f32,
    });
    FeatureMatrix::new(g, t, data)
}

/// Fills every featureless type in breadth-first order from the featured
/// ones, so types two relations away (e.g. institutions via authors) are
/// averaged from the already-filled intermediate type.
pub fn fill_neighbor_avg(g: &HeteroGraph, feats: &mut BTreeMap<NodeTypeId, FeatureMatrix>) -> Result<()> {
    let dims: BTreeSet<usize> = feats.values().map(FeatureMatrix::dim).collect();
    if dims.len() > 1 {
        return Err(NarsError::Dimension(format!("featured types have differing widths {dims:?}")));
    }
    let featured: BTreeSet<NodeTypeId> = feats.keys().copied().collect();
    if featured.is_empty() {
        return Err(NarsError::Invalid("no featured node type to average from".into()));
    }
    let level = type_levels(g, &featured);
    let max = level.iter().flatten().copied().max().unwrap_or(0);
    for k in 1..=max {
        let batch: Vec<NodeTypeId> =
            (0..level.len()).filter(|&t| level[t] == Some(k)).map(NodeTypeId).collect();
        let mut filled = Vec::new();
        for t in batch {
            filled.push((t, average_from_featured(g, t, feats)?));
        }
        feats.extend(filled);
    }
    Ok(())
}

/// Neighbor-averaged features for one featureless type.
pub fn featurize_neighbor_avg(
    g: &HeteroGraph,
    t: NodeTypeId,
    source: &BTreeMap<NodeTypeId, FeatureMatrix>,
) -> Result<FeatureMatrix> {
    if let Some(f) = source.get(&t) {
        return Ok(f.clone());
    }
    let featured: BTreeSet<NodeTypeId> = source.keys().copied().collect();
    if type_levels(g, &featured)[t.0].is_none() {
        return Err(NarsError::Invalid(format!(
            "no featured node type is reachable from `{}`",
            g.node_type(t).name
        )));
    }
    let mut all = source.clone();
    fill_neighbor_avg(g, &mut all)?;
    Ok(all.remove(&t).unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranseConfig {
    pub dim: usize,
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub negatives: usize,
}

impl Default for TranseConfig {
    fn default() -> Self {
        TranseConfig { dim: 128, epochs: 20, margin: 1.0, lr: 0.01, negatives: 1 }
    }
}

/// Entity embeddings (one row per global node id) and relation embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub entity: Matrix<T>,
    pub relation: Matrix<T>,
    pub epochs_trained: usize,
    /// Mean hinge loss per epoch.
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    pub fn is_trained(&self) -> bool {
        self.epochs_trained > 0
    }
}

#[inline]
fn dist<T: Scalar>(h: &[T], r: &[T], t: &[T], diff: &mut [T]) -> T {
    let mut s = T::zero();
    for i in 0..h.len() {
        diff[i] = h[i] + r[i] - t[i];
        s += diff[i] * diff[i];
    }
    s.sqrt()
}

/// Gradients of one margin term with respect to its five operand rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads<T> {
    pub head: Vec<T>,
    pub rel: Vec<T>,
    pub tail: Vec<T>,
    pub neg_head: Vec<T>,
    pub neg_tail: Vec<T>,
}

/// `max(0, margin + ‖h+r−t‖ − ‖h'+r−t'‖)` and its gradient. The gradient is
/// zero on the flat side of the hinge and at zero distance.
pub fn pair_loss_grad<T: Scalar>(
    h: &[T],
    r: &[T],
    t: &[T],
    nh: &[T],
    nt: &[T],
    margin: T,
) -> (T, PairGrads<T>) {
    let k = h.len();
    let mut up = vec![T::zero(); k];
    let mut un = vec![T::zero(); k];
    let dp = dist(h, r, t, &mut up);
    let dn = dist(nh, r, nt, &mut un);
    let loss = margin + dp - dn;
    let zero = vec![T::zero(); k];
    if loss <= T::zero() {
        return (
            T::zero(),
            PairGrads { head: zero.clone(), rel: zero.clone(), tail: zero.clone(), neg_head: zero.clone(), neg_tail: zero },
        );
    }
    let unit = |u: &[T], d: T| -> Vec<T> {
        if d > T::zero() {
            u.iter().map(|&x| x / d).collect()
        } else {
            vec![T::zero(); k]
        }
    };
    let gp = unit(&up, dp);
    let gn = unit(&un, dn);
    let grads = PairGrads {
        head: gp.clone(),
        rel: gp.iter().zip(&gn).map(|(a, b)| *a - *b).collect(),
        tail: gp.iter().map(|&x| -x).collect(),
        neg_head: gn.iter().map(|&x| -x).collect(),
        neg_tail: gn,
    };
    (loss, grads)
}

fn normalize_row<T: Scalar>(row: &mut [T]) {
    let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

struct Triple {
    head: usize,
    rel: usize,
    tail: usize,
    head_type: NodeTypeId,
    tail_type: NodeTypeId,
}

fn corrupt(g: &HeteroGraph, ty: NodeTypeId, original: usize, rng: &mut ChaCha8Rng) -> usize {
    let off = g.offset(ty);
    let count = g.node_type(ty).count;
    if count == 1 {
        return original;
    }
    let mut v = off + rng.gen_range(0..count - 1);
    if v >= original {
        v += 1;
    }
    v
}

/// Trains TransE by plain SGD on the margin ranking loss. Each positive edge
/// is paired with `negatives` corruptions that replace the head or the tail
/// (probability ½ each) by another node of the same type. Entity rows are
/// renormalized to unit length after every update.
pub fn train_transe<T: Scalar>(g: &HeteroGraph, cfg: &TranseConfig, seed: u64) -> Result<EmbeddingTable<T>> {
    if cfg.dim == 0 {
        return Err(NarsError::Invalid("embedding dimension must be positive".into()));
    }
    if cfg.margin <= 0.0 {
        return Err(NarsError::Invalid("margin must be positive".into()));
    }
    let mut triples = Vec::with_capacity(g.total_edges());
    for r in g.relations() {
        let (so, dof) = (g.offset(r.src), g.offset(r.dst));
        for (s, d) in g.edges(r.id) {
            triples.push(Triple {
                head: so + s as usize,
                rel: r.id.0,
                tail: dof + d as usize,
                head_type: r.src,
                tail_type: r.dst,
            });
        }
    }
    if triples.is_empty() {
        return Err(NarsError::Invalid("TransE needs at least one edge".into()));
    }
    let mut rng = rng_for(seed, Stream::Featurize);
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let mut entity = Matrix::from_fn(g.num_nodes(), cfg.dim, |_, _| T::of(rng.gen_range(-bound..bound)));
    let mut relation = Matrix::from_fn(g.relations().len(), cfg.dim, |_, _| T::of(rng.gen_range(-bound..bound)));
    for v in 0..entity.rows() {
        normalize_row(entity.row_mut(v));
    }
    for r in 0..relation.rows() {
        normalize_row(relation.row_mut(r));
    }

    let lr = T::of(cfg.lr);
    let margin = T::of(cfg.margin);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        let mut pairs = 0usize;
        for &i in &order {
            let tr = &triples[i];
            for _ in 0..cfg.negatives.max(1) {
                let (nh, nt) = if rng.gen_bool(0.5) {
                    (corrupt(g, tr.head_type, tr.head, &mut rng), tr.tail)
                } else {
                    (tr.head, corrupt(g, tr.tail_type, tr.tail, &mut rng))
                };
                let (loss, grads) = pair_loss_grad(
                    entity.row(tr.head),
                    relation.row(tr.rel),
                    entity.row(tr.tail),
                    entity.row(nh),
                    entity.row(nt),
                    margin,
                );
                total += loss.widen();
                pairs += 1;
                if loss == T::zero() {
                    continue;
                }
                for (row, grad) in [(tr.head, &grads.head), (tr.tail, &grads.tail), (nh, &grads.neg_head), (nt, &grads.neg_tail)] {
                    for (x, g) in entity.row_mut(row).iter_mut().zip(grad) {
                        *x -= lr * *g;
                    }
                }
                for (x, g) in relation.row_mut(tr.rel).iter_mut().zip(&grads.rel) {
                    *x -= lr * *g;
                }
                for row in [tr.head, tr.tail, nh, nt] {
                    normalize_row(entity.row_mut(row));
                }
            }
        }
        loss_history.push(total / pairs as f64);
    }
    Ok(EmbeddingTable { entity, relation, epochs_trained: cfg.epochs, loss_history })
}

/// Rows of `table` belonging to node type `t`. When `expected_dim` is given,
/// the embedding width must equal it.
pub fn featurize_transe<T: Scalar>(
    g: &HeteroGraph,
    table: &EmbeddingTable<T>,
    t: NodeTypeId,
    expected_dim: Option<usize>,
) -> Result<FeatureMatrix> {
    if !table.is_trained() {
        return Err(NarsError::Invalid("embedding table has not been trained".into()));
    }
    if table.entity.rows() != g.num_nodes() {
        return Err(NarsError::Dimension(format!(
            "table has {} entities, graph has {} nodes",
            table.entity.rows(),
            g.num_nodes()
        )));
    }
    if let Some(d) = expected_dim {
        if d != table.dim() {
            return Err(NarsError::Dimension(format!("embedding width {} differs from feature width {d}", table.dim())));
        }
    }
    let off = g.offset(t);
    let rows = table.entity.slice_rows(off, off + g.node_type(t).count);
    FeatureMatrix::new(g, t, rows.cast())
}

/// Writes `entity.feat`, the `relation.feat` sidecar, `relations.txt` and a
/// small `transe.meta`.
pub fn save_table(g: &HeteroGraph, table: &EmbeddingTable<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NarsError::io(dir, e))?;
    featfile::write(&dir.join("entity.feat"), &table.entity)?;
    featfile::write(&dir.join("relation.feat"), &table.relation)?;
    let names: String = g.relations().iter().map(|r| format!("{}\n", r.name)).collect();
    let p = dir.join("relations.txt");
    fs::write(&p, names).map_err(|e| NarsError::io(&p, e))?;
    let losses: Vec<String> = table.loss_history.iter().map(|l| l.to_string()).collect();
    let meta = format!("dim {}\nepochs {}\nloss {}\n", table.dim(), table.epochs_trained, losses.join(","));
    let p = dir.join("transe.meta");
    fs::write(&p, meta).map_err(|e| NarsError::io(&p, e))
}

pub fn load_table(dir: &Path) -> Result<EmbeddingTable<f32>> {
    let entity = featfile::read(&dir.join("entity.feat"))?;
    let relation = featfile::read(&dir.join("relation.feat"))?;
    let p = dir.join("transe.meta");
    let meta = fs::read_to_string(&p).map_err(|e| NarsError::io(&p, e))?;
    let mut epochs_trained = 0;
    let mut loss_history = Vec::new();
    for (i, line) in meta.lines().enumerate() {
        match line.split_once(' ') {
            Some(("epochs", n)) => {
                epochs_trained = n.trim().parse().map_err(|_| NarsError::parse(&p, i + 1, "bad epoch count"))?
            }
            Some(("loss", ls)) => {
                loss_history = ls
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| NarsError::parse(&p, i + 1, "bad loss")))
                    .collect::<Result<_>>()?
            }
            _ => {}
        }
    }
    if entity.cols() != relation.cols() {
        return Err(NarsError::Dimension("entity and relation widths differ".into()));
    }
    Ok(EmbeddingTable { entity, relation, epochs_trained, loss_history })
}

/// Relation ids in a saved table, by name.
pub fn table_relation(g: &HeteroGraph, name: &str) -> Option<RelationId> {
    g.relation_by_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::RelationSpec;

    fn papers_authors() -> (HeteroGraph, BTreeMap<NodeTypeId, FeatureMatrix>) {
        // papers 0,1; authors 0 (wrote both), 1 (wrote none); institute 0 <- author 0
        let g = HeteroGraph::new(
            &[("paper", 2), ("author", 2), ("inst", 1)],
            vec![
                RelationSpec::new("writes", "author", "paper", vec![(0, 0), (0, 1)]),
                RelationSpec::new("affil", "author", "inst", vec![(0, 0)]),
            ],
        )
        .unwrap();
        let p = NodeTypeId(0);
        let mut feats = BTreeMap::new();
        feats.insert(p, FeatureMatrix::new(&g, p, Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap());
        (g, feats)
    }

    #[test]
    fn zero_features() {
        let (g, _) = papers_authors();
        let z = featurize_zero(&g, NodeTypeId(1), 4).unwrap();
        assert_eq!(z.data.shape(), (2, 4));
        assert!(z.data.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(z, featurize_zero(&g, NodeTypeId(1), 4).unwrap());
        assert!(featurize_zero(&g, NodeTypeId(1), 0).is_err());
    }

    #[test]
    fn neighbor_average_two_levels() {
        let (g, feats) = papers_authors();
        let a = featurize_neighbor_avg(&g, NodeTypeId(1), &feats).unwrap();
        assert_eq!(a.data.row(0), &[0.5, 0.5]);
        assert_eq!(a.data.row(1), &[0.0, 0.0]);
        let i = featurize_neighbor_avg(&g, NodeTypeId(2), &feats).unwrap();
        assert_eq!(i.data.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn unreachable_type_is_an_error() {
        let g = HeteroGraph::new(
            &[("paper", 1), ("lonely", 1)],
            vec![RelationSpec::new("cites", "paper", "paper", vec![(0, 0)])],
        )
        .unwrap();
        let mut feats = BTreeMap::new();
        feats.insert(NodeTypeId(0), FeatureMatrix::new(&g, NodeTypeId(0), Matrix::filled(1, 2, 1.0)).unwrap());
        assert!(featurize_neighbor_avg(&g, NodeTypeId(1), &feats).is_err());
    }

    #[test]
    fn hinge_is_zero_for_a_perfect_embedding() {
        let h = [1.0, 0.0];
        let r = [0.0, 1.0];
        let t = [1.0, 1.0];
        let (loss, grads) = pair_loss_grad(&h, &r, &t, &[-3.0, 0.0], &[3.0, 0.0], 1.0f64);
        assert_eq!(loss, 0.0);
        assert!(grads.head.iter().all(|&g| g == 0.0));
    }

    fn two_node_kg() -> HeteroGraph {
        HeteroGraph::new(&[("x", 2)], vec![RelationSpec::new("r", "x", "x", vec![(0, 1)])]).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_normalized() {
        let g = HeteroGraph::new(
            &[("a", 3), ("b", 4)],
            vec![
                RelationSpec::new("r1", "a", "b", vec![(0, 0), (1, 1), (2, 3), (0, 2)]),
                RelationSpec::new("r2", "b", "b", vec![(0, 1), (2, 3)]),
            ],
        )
        .unwrap();
        let cfg = TranseConfig { dim: 4, epochs: 5, ..Default::default() };
        let a = train_transe::<f32>(&g, &cfg, 3).unwrap();
        let b = train_transe::<f32>(&g, &cfg, 3).unwrap();
        assert_eq!(a, b);
        for v in 0..a.entity.rows() {
            let n: f32 = a.entity.row(v).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
        let f = featurize_transe(&g, &a, NodeTypeId(0), None).unwrap();
        assert_eq!(f.data.shape(), (3, 4));
        assert!(featurize_transe(&g, &a, NodeTypeId(0), Some(8)).is_err());
        let untrained = EmbeddingTable { epochs_trained: 0, ..a.clone() };
        assert!(featurize_transe(&g, &untrained, NodeTypeId(0), None).is_err());
    }

    #[test]
    fn two_node_loss_does_not_increase() {
        let g = two_node_kg();
        let cfg = TranseConfig { dim: 8, epochs: 60, lr: 0.05, ..Default::default() };
        let t = train_transe::<f64>(&g, &cfg, 11).unwrap();
        let h = &t.loss_history;
        // averaged over windows of 10 epochs
        let means: Vec<f64> = h.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{means:?}");
        }
    }

    #[test]
    fn empty_graph_cannot_be_embedded() {
        let g = HeteroGraph::new(&[("x", 2)], vec![RelationSpec::new("r", "x", "x", vec![])]).unwrap();
        assert!(train_transe::<f32>(&g, &TranseConfig::default(), 0).is_err());
    }

    #[test]
    fn table_roundtrip() {
        let g = two_node_kg();
        let t = train_transe::<f32>(&g, &TranseConfig { dim: 3, epochs: 2, ..Default::default() }, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_table(&g, &t, dir.path()).unwrap();
        assert_eq!(load_table(dir.path()).unwrap(), t);
    }
}
