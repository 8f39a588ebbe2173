//! Heterogeneous graph model: typed node sets, per-relation CSR adjacency in
//! both directions, and one global node-id space made of the node types laid
//! end to end in declaration order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::featfile;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeTypeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeType {
    pub id: NodeTypeId,
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationType {
    pub id: RelationId,
    pub name: String,
    pub src: NodeTypeId,
    pub dst: NodeTypeId,
    /// File name used when the graph is saved.
    pub edge_file: String,
}

/// Compressed sparse rows with sorted, duplicate-free column indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Csr {
    indptr: Vec<usize>,
    indices: Vec<u32>,
}

impl Csr {
    /// Builds from `(row, col)` pairs; pairs are sorted and deduplicated.
    pub fn from_pairs(rows: usize, mut pairs: Vec<(u32, u32)>) -> Csr {
        pairs.sort_unstable();
        pairs.dedup();
        let mut indptr = vec![0usize; rows + 1];
        for &(r, _) in &pairs {
            indptr[r as usize + 1] += 1;
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        let indices = pairs.into_iter().map(|(_, c)| c).collect();
        Csr { indptr, indices }
    }

    pub fn num_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.indptr[r]..self.indptr[r + 1]]
    }

    #[inline]
    pub fn degree(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_rows()).flat_map(move |r| self.row(r).iter().map(move |&c| (r as u32, c)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeteroGraph {
    node_types: Vec<NodeType>,
    relations: Vec<RelationType>,
    /// Per relation, rows are source-local ids.
    forward: Vec<Csr>,
    /// Per relation, rows are destination-local ids.
    reverse: Vec<Csr>,
    offsets: Vec<usize>,
}

/// Edge list for one relation, used to build a [`HeteroGraph`].
#[derive(Clone, Debug)]
pub struct RelationSpec {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub edges: Vec<(u32, u32)>,
}

impl RelationSpec {
    pub fn new(name: &str, src: &str, dst: &str, edges: Vec<(u32, u32)>) -> Self {
        RelationSpec { name: name.into(), src: src.into(), dst: dst.into(), edges }
    }
}

impl HeteroGraph {
    pub fn new(node_types: &[(&str, usize)], relations: Vec<RelationSpec>) -> Result<Self> {
        let types: Vec<(String, usize)> =
            node_types.iter().map(|(n, c)| (n.to_string(), *c)).collect();
        Self::build(types, relations, None)
    }

    fn build(
        node_types: Vec<(String, usize)>,
        relations: Vec<RelationSpec>,
        edge_files: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut seen = HashMap::new();
        let mut types = Vec::with_capacity(node_types.len());
        let mut offsets = Vec::with_capacity(node_types.len() + 1);
        let mut total = 0usize;
        for (i, (name, count)) in node_types.into_iter().enumerate() {
            if count == 0 {
                return Err(NarsError::Invalid(format!("node type `{name}` has zero nodes")));
            }
            if seen.insert(name.clone(), i).is_some() {
                return Err(NarsError::Invalid(format!("duplicate node type `{name}`")));
            }
            offsets.push(total);
            total += count;
            types.push(NodeType { id: NodeTypeId(i), name, count });
        }
        offsets.push(total);
        if total > u32::MAX as usize {
            return Err(NarsError::Invalid(format!("{total} nodes exceed u32 ids")));
        }

        let mut rels = Vec::with_capacity(relations.len());
        let mut forward = Vec::with_capacity(relations.len());
        let mut reverse = Vec::with_capacity(relations.len());
        let mut rel_names = BTreeSet::new();
        for (i, spec) in relations.into_iter().enumerate() {
            if !rel_names.insert(spec.name.clone()) {
                return Err(NarsError::Invalid(format!("duplicate relation `{}`", spec.name)));
            }
            let lookup = |n: &str| {
                seen.get(n)
                    .map(|&i| NodeTypeId(i))
                    .ok_or_else(|| NarsError::Unknown { kind: "node type", name: n.to_string() })
            };
            let src = lookup(&spec.src)?;
            let dst = lookup(&spec.dst)?;
            let (ns, nd) = (types[src.0].count, types[dst.0].count);
            for &(s, d) in &spec.edges {
                if s as usize >= ns {
                    return Err(NarsError::OutOfRange {
                        what: format!("relation `{}` source ({})", spec.name, spec.src),
                        id: s as usize,
                        count: ns,
                    });
                }
                if d as usize >= nd {
                    return Err(NarsError::OutOfRange {
                        what: format!("relation `{}` destination ({})", spec.name, spec.dst),
                        id: d as usize,
                        count: nd,
                    });
                }
            }
            let rev_pairs = spec.edges.iter().map(|&(s, d)| (d, s)).collect();
            forward.push(Csr::from_pairs(ns, spec.edges));
            reverse.push(Csr::from_pairs(nd, rev_pairs));
            let edge_file = edge_files
                .as_ref()
                .map(|f| f[i].clone())
                .unwrap_or_else(|| format!("{}.tsv", spec.name));
            rels.push(RelationType { id: RelationId(i), name: spec.name, src, dst, edge_file });
        }
        Ok(HeteroGraph { node_types: types, relations: rels, forward, reverse, offsets })
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn node_type(&self, id: NodeTypeId) -> &NodeType {
        &self.node_types[id.0]
    }

    pub fn relation(&self, id: RelationId) -> &RelationType {
        &self.relations[id.0]
    }

    pub fn node_type_by_name(&self, name: &str) -> Result<NodeTypeId> {
        self.node_types
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.id)
            .ok_or_else(|| NarsError::Unknown { kind: "node type", name: name.into() })
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        self.relations.iter().find(|r| r.name == name).map(|r| r.id)
    }

    /// First global id of a node type.
    pub fn offset(&self, t: NodeTypeId) -> usize {
        self.offsets[t.0]
    }

    pub fn global_id(&self, t: NodeTypeId, local: usize) -> Result<usize> {
        let ty = self
            .node_types
            .get(t.0)
            .ok_or_else(|| NarsError::Unknown { kind: "node type", name: format!("#{}", t.0) })?;
        if local >= ty.count {
            return Err(NarsError::OutOfRange {
                what: format!("node of type `{}`", ty.name),
                id: local,
                count: ty.count,
            });
        }
        Ok(self.offsets[t.0] + local)
    }

    /// Inverse of [`global_id`](Self::global_id).
    pub fn local_id(&self, global: usize) -> Result<(NodeTypeId, usize)> {
        if global >= self.num_nodes() {
            return Err(NarsError::OutOfRange {
                what: "global node".into(),
                id: global,
                count: self.num_nodes(),
            });
        }
        let t = self.offsets.partition_point(|&o| o <= global) - 1;
        Ok((NodeTypeId(t), global - self.offsets[t]))
    }

    pub fn forward(&self, r: RelationId) -> &Csr {
        &self.forward[r.0]
    }

    pub fn reverse(&self, r: RelationId) -> &Csr {
        &self.reverse[r.0]
    }

    pub fn edge_count(&self, r: RelationId) -> usize {
        self.forward[r.0].nnz()
    }

    pub fn total_edges(&self) -> usize {
        self.forward.iter().map(Csr::nnz).sum()
    }

    /// Edges of a relation as `(src_local, dst_local)`, sorted.
    pub fn edges(&self, r: RelationId) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.forward[r.0].pairs()
    }

    /// A copy without the named relations; remaining relations are renumbered
    /// in their original order.
    pub fn without_relations(&self, names: &[String]) -> Result<HeteroGraph> {
        for n in names {
            if self.relation_by_name(n).is_none() {
                return Err(NarsError::Unknown { kind: "relation", name: n.clone() });
            }
        }
        let types = self.node_types.iter().map(|t| (t.name.clone(), t.count)).collect();
        let mut specs = Vec::new();
        let mut files = Vec::new();
        for r in &self.relations {
            if names.contains(&r.name) {
                continue;
            }
            specs.push(RelationSpec {
                name: r.name.clone(),
                src: self.node_types[r.src.0].name.clone(),
                dst: self.node_types[r.dst.0].name.clone(),
                edges: self.edges(r.id).collect(),
            });
            files.push(r.edge_file.clone());
        }
        Self::build(types, specs, Some(files))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NarsError::io(path, e))
}

/// Loads `graph.meta` and its edge files from `dir`.
pub fn load_graph(dir: &Path) -> Result<HeteroGraph> {
    let meta_path = dir.join("graph.meta");
    let meta = read_text(&meta_path)?;
    let mut types = Vec::new();
    let mut rels: Vec<(String, String, String, String, usize)> = Vec::new();
    for (i, line) in meta.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["node", name, count] => {
                let count: usize = count.parse().map_err(|_| {
                    NarsError::parse(&meta_path, i + 1, format!("bad node count `{count}`"))
                })?;
                types.push((name.to_string(), count));
            }
            ["relation", name, src, dst, file] => {
                rels.push((name.to_string(), src.to_string(), dst.to_string(), file.to_string(), i + 1))
            }
            _ => return Err(NarsError::parse(&meta_path, i + 1, format!("unrecognized line `{line}`"))),
        }
    }
    let counts: HashMap<&str, usize> = types.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let mut specs = Vec::with_capacity(rels.len());
    let mut files = Vec::with_capacity(rels.len());
    for (name, src, dst, file, line) in rels {
        for t in [&src, &dst] {
            if !counts.contains_key(t.as_str()) {
                return Err(NarsError::parse(&meta_path, line, format!("unknown node type `{t}`")));
            }
        }
        let path = dir.join(&file);
        let edges = read_edges(&path, counts[src.as_str()], counts[dst.as_str()])?;
        specs.push(RelationSpec { name, src, dst, edges });
        files.push(file);
    }
    HeteroGraph::build(types, specs, Some(files))
}

fn read_edges(path: &Path, n_src: usize, n_dst: usize) -> Result<Vec<(u32, u32)>> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split('\t').flat_map(|s| s.split_whitespace());
        let parse = |tok: Option<&str>| -> Result<usize> {
            let tok = tok.ok_or_else(|| NarsError::parse(path, i + 1, "expected two columns"))?;
            tok.parse().map_err(|_| NarsError::parse(path, i + 1, format!("bad node id `{tok}`")))
        };
        let s = parse(it.next())?;
        let d = parse(it.next())?;
        if it.next().is_some() {
            return Err(NarsError::parse(path, i + 1, "expected two columns"));
        }
        if s >= n_src || d >= n_dst {
            let (id, count) = if s >= n_src { (s, n_src) } else { (d, n_dst) };
            return Err(NarsError::parse(
                path,
                i + 1,
                format!("endpoint out of range: id {id} >= count {count}"),
            ));
        }
        edges.push((s as u32, d as u32));
    }
    Ok(edges)
}

/// Writes `graph.meta` and one canonical (sorted, deduplicated) edge file per
/// relation.
pub fn save_graph(g: &HeteroGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NarsError::io(dir, e))?;
    let mut meta = String::new();
    for t in &g.node_types {
        writeln!(meta, "node {} {}", t.name, t.count).unwrap();
    }
    for r in &g.relations {
        writeln!(
            meta,
            "relation {} {} {} {}",
            r.name, g.node_types[r.src.0].name, g.node_types[r.dst.0].name, r.edge_file
        )
        .unwrap();
        let mut body = String::new();
        for (s, d) in g.edges(r.id) {
            writeln!(body, "{s}\t{d}").unwrap();
        }
        let path = dir.join(&r.edge_file);
        fs::write(&path, body).map_err(|e| NarsError::io(&path, e))?;
    }
    let path = dir.join("graph.meta");
    fs::write(&path, meta).map_err(|e| NarsError::io(&path, e))
}

/// Dense input features for one node type.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub node_type: NodeTypeId,
    pub data: Matrix<f32>,
}

impl FeatureMatrix {
    pub fn new(g: &HeteroGraph, node_type: NodeTypeId, data: Matrix<f32>) -> Result<Self> {
        let ty = g.node_type(node_type);
        if data.rows() != ty.count {
            return Err(NarsError::Dimension(format!(
                "features for `{}` have {} rows, type has {} nodes",
                ty.name,
                data.rows(),
                ty.count
            )));
        }
        if !data.is_finite() {
            return Err(NarsError::NonFinite(format!("input features of `{}`", ty.name)));
        }
        Ok(FeatureMatrix { node_type, data })
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Loads a `NARSFEAT` file, or whitespace-separated text when the file does
/// not start with the binary magic.
pub fn load_features(g: &HeteroGraph, node_type: NodeTypeId, path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| NarsError::io(path, e))?;
    let data = if bytes.starts_with(featfile::MAGIC) {
        featfile::decode(&bytes).map_err(|e| NarsError::Format(format!("{}: {e}", path.display())))?
    } else {
        featfile::read_tsv(path)?
    };
    FeatureMatrix::new(g, node_type, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = NarsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(NarsError::Unknown { kind: "split", name: s.into() }),
        }
    }
}

/// Labels over the local ids of one node type. An empty label list means
/// "unlabeled".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub node_type: NodeTypeId,
    pub task: Task,
    pub num_classes: usize,
    labels: Vec<Vec<u32>>,
    pub splits: Splits,
}

impl LabelSet {
    pub fn new(
        node_type: NodeTypeId,
        task: Task,
        num_classes: usize,
        labels: Vec<Vec<u32>>,
        splits: Splits,
    ) -> Result<Self> {
        for (v, ls) in labels.iter().enumerate() {
            if task == Task::SingleLabel && ls.len() > 1 {
                return Err(NarsError::Invalid(format!("node {v} has {} labels in a single-label task", ls.len())));
            }
            if let Some(&c) = ls.iter().find(|&&c| c as usize >= num_classes) {
                return Err(NarsError::OutOfRange { what: "label".into(), id: c as usize, count: num_classes });
            }
        }
        let mut seen = vec![None::<Split>; labels.len()];
        for (split, ids) in [(Split::Train, &splits.train), (Split::Valid, &splits.valid), (Split::Test, &splits.test)] {
            for &v in ids {
                if v >= labels.len() {
                    return Err(NarsError::OutOfRange { what: format!("{} split node", split.name()), id: v, count: labels.len() });
                }
                if let Some(prev) = seen[v] {
                    return Err(NarsError::Invalid(format!(
                        "node {v} appears in both {} and {} splits",
                        prev.name(),
                        split.name()
                    )));
                }
                seen[v] = Some(split);
                if labels[v].is_empty() {
                    return Err(NarsError::Invalid(format!("{} split node {v} has no label", split.name())));
                }
            }
        }
        Ok(LabelSet { node_type, task, num_classes, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_of(&self, v: usize) -> &[u32] {
        &self.labels[v]
    }

    pub fn class_of(&self, v: usize) -> Option<u32> {
        self.labels[v].first().copied()
    }

    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.splits.train,
            Split::Valid => &self.splits.valid,
            Split::Test => &self.splits.test,
        }
    }
}

/// Loads `node_id<TAB>label` (or `node_id<TAB>l1,l2,...`) rows plus the
/// `train.txt`/`valid.txt`/`test.txt` split files found next to `path`.
///
/// `node_id` may also be followed by a colon (`0: 1,3`). The task is
/// multi-label when `task` says so, or when it is `None` and any row lists
/// more than one label. A `#classes N` comment fixes the class count;
/// otherwise it is one more than the largest label.
pub fn load_labels(g: &HeteroGraph, node_type: NodeTypeId, path: &Path, task: Option<Task>) -> Result<LabelSet> {
    let count = g.node_type(node_type).count;
    let text = read_text(path)?;
    let mut labels = vec![Vec::new(); count];
    let mut declared_classes = None;
    let mut any_multi = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(n) = rest.trim().strip_prefix("classes") {
                declared_classes = Some(
                    n.trim()
                        .parse::<usize>()
                        .map_err(|_| NarsError::parse(path, i + 1, "bad #classes value"))?,
                );
            }
            continue;
        }
        let cut = line
            .find(['\t', ':', ' '])
            .ok_or_else(|| NarsError::parse(path, i + 1, "expected `node_id<TAB>labels`"))?;
        let (id, rest) = line.split_at(cut);
        let rest = rest.trim_start_matches(['\t', ':', ' ']);
        let v: usize = id
            .trim()
            .parse()
            .map_err(|_| NarsError::parse(path, i + 1, format!("bad node id `{id}`")))?;
        if v >= count {
            return Err(NarsError::parse(path, i + 1, format!("unknown node id {v} (type has {count} nodes)")));
        }
        let mut set = BTreeSet::new();
        for tok in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let c: u32 = tok
                .parse()
                .map_err(|_| NarsError::parse(path, i + 1, format!("bad label `{tok}`")))?;
            set.insert(c);
        }
        any_multi |= set.len() > 1 || rest.contains(',');
        labels[v] = set.into_iter().collect();
    }
    let task = task.unwrap_or(if any_multi { Task::MultiLabel } else { Task::SingleLabel });
    let max = labels.iter().flatten().copied().max().map_or(0, |m| m as usize + 1);
    let num_classes = declared_classes.unwrap_or(max);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let splits = Splits {
        train: read_split(&dir.join("train.txt"), count)?,
        valid: read_split(&dir.join("valid.txt"), count)?,
        test: read_split(&dir.join("test.txt"), count)?,
    };
    LabelSet::new(node_type, task, num_classes, labels, splits)
}

fn read_split(path: &Path, count: usize) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: usize = line
            .parse()
            .map_err(|_| NarsError::parse(path, i + 1, format!("bad node id `{line}`")))?;
        if v >= count {
            return Err(NarsError::parse(path, i + 1, format!("unknown node id {v} (type has {count} nodes)")));
        }
        ids.push(v);
    }
    Ok(ids)
}

/// Writes labels and split files in the format read by [`load_labels`].
pub fn save_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    let mut body = format!("#classes {}\n", labels.num_classes);
    for v in 0..labels.len() {
        let ls = labels.labels_of(v);
        if ls.is_empty() {
            continue;
        }
        let joined: Vec<String> = ls.iter().map(u32::to_string).collect();
        let sep = if labels.task == Task::MultiLabel && ls.len() == 1 { "," } else { "" };
        writeln!(body, "{v}\t{}{sep}", joined.join(",")).unwrap();
    }
    fs::write(path, body).map_err(|e| NarsError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for s in [Split::Train, Split::Valid, Split::Test] {
        let p = dir.join(format!("{}.txt", s.name()));
        let body: String = labels.split(s).iter().map(|v| format!("{v}\n")).collect();
        fs::write(&p, body).map_err(|e| NarsError::io(&p, e))?;
    }
    Ok(())
}
