//! Multi-hop neighbor averaging over relation subgraphs.
//!
//! Hop `l` of subgraph `i` is `W_i^l · H_0`, where `W_i` is the subgraph's
//! adjacency with each row divided by the node's degree. Rows of isolated
//! nodes are zero. Each output row is reduced in CSR order with `f64` partial
//! sums, so results are independent of the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::accountant::MemoryAccountant;
use crate::error::{NarsError, Result};
use crate::featfile;
use crate::hetgraph::{FeatureMatrix, HeteroGraph, NodeTypeId};
use crate::matrix::Matrix;
use crate::metagraph::{extract_subgraph, RelationSubgraph, RelationSubset};
use crate::scalar::Scalar;

/// Stacks per-type features (common width `D`) into one `N × D` matrix in
/// global-id order.
pub fn assemble_input(g: &HeteroGraph, feats: &BTreeMap<NodeTypeId, FeatureMatrix>) -> Result<Matrix<f32>> {
    let mut dim = None;
    for t in g.node_types() {
        let f = feats
            .get(&t.id)
            .ok_or_else(|| NarsError::Invalid(format!("node type `{}` has no features", t.name)))?;
        match dim {
            None => dim = Some(f.dim()),
            Some(d) if d != f.dim() => {
                return Err(NarsError::Dimension(format!(
                    "node type `{}` has feature width {}, expected {d}",
                    t.name,
                    f.dim()
                )))
            }
            _ => {}
        }
    }
    let dim = dim.unwrap_or(0);
    let mut out = Matrix::zeros(g.num_nodes(), dim);
    for t in g.node_types() {
        let f = &feats[&t.id];
        let off = g.offset(t.id);
        for r in 0..t.count {
            out.row_mut(off + r).copy_from_slice(f.data.row(r));
        }
    }
    Ok(out)
}

/// Column block occupied by each node type in a block-diagonal input.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InputLayout {
    /// `(node type name, first column, width)` in node-type order.
    pub blocks: Vec<(String, usize, usize)>,
    pub width: usize,
}

/// Places each type's features in its own column block, so types of different
/// widths can share one propagation. Averaging is linear, so a per-type
/// projection applied after propagation equals one applied before it.
pub fn assemble_block_input(
    g: &HeteroGraph,
    feats: &BTreeMap<NodeTypeId, FeatureMatrix>,
) -> Result<(Matrix<f32>, InputLayout)> {
    let mut blocks = Vec::new();
    let mut width = 0;
    for t in g.node_types() {
        let f = feats
            .get(&t.id)
            .ok_or_else(|| NarsError::Invalid(format!("node type `{}` has no features", t.name)))?;
        blocks.push((t.name.clone(), width, f.dim()));
        width += f.dim();
    }
    let mut out = Matrix::zeros(g.num_nodes(), width);
    for (t, (_, start, w)) in g.node_types().iter().zip(&blocks) {
        let f = &feats[&t.id];
        let off = g.offset(t.id);
        for r in 0..t.count {
            out.row_mut(off + r)[*start..start + w].copy_from_slice(f.data.row(r));
        }
    }
    Ok((out, InputLayout { blocks, width }))
}

/// Row-normalized view of a subgraph: every edge `(v, u)` weighs `1/deg(v)`.
pub struct NormalizedAdjacency<'a> {
    sub: &'a RelationSubgraph,
    inv_degree: Vec<f64>,
}

pub fn row_normalize(sub: &RelationSubgraph) -> NormalizedAdjacency<'_> {
    let inv_degree = (0..sub.num_nodes())
        .map(|v| match sub.degree(v) {
            0 => 0.0,
            d => 1.0 / d as f64,
        })
        .collect();
    NormalizedAdjacency { sub, inv_degree }
}

impl NormalizedAdjacency<'_> {
    /// Neighbors of `v` and the weight shared by all of them; isolated nodes
    /// return an empty row.
    pub fn row(&self, v: usize) -> (&[u32], f64) {
        (self.sub.neighbors(v), self.inv_degree[v])
    }

    pub fn num_nodes(&self) -> usize {
        self.inv_degree.len()
    }

    /// One hop: `W · x`.
    pub fn apply<T: Scalar>(&self, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.rows(), self.num_nodes(), "propagation input rows");
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        if d == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .for_each_init(
                || vec![0f64; d],
                |acc, (v, row)| {
                    let (nbrs, w) = self.row(v);
                    if nbrs.is_empty() {
                        return;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for &u in nbrs {
                        for (a, x) in acc.iter_mut().zip(x.row(u as usize)) {
                            *a += x.widen();
                        }
                    }
                    for (o, a) in row.iter_mut().zip(acc.iter()) {
                        *o = T::of(*a * w);
                    }
                },
            );
        out
    }
}

/// `hops[l] = W^l · H_0` for `l = 0..=L`, for one subgraph.
#[derive(Clone, Debug, PartialEq)]
pub struct HopFeatureTensor<T> {
    pub subgraph_id: usize,
    pub hops: Vec<Matrix<T>>,
}

impl<T: Scalar> HopFeatureTensor<T> {
    pub fn num_hops(&self) -> usize {
        self.hops.len()
    }

    pub fn rows(&self) -> usize {
        self.hops.first().map_or(0, Matrix::rows)
    }

    pub fn dim(&self) -> usize {
        self.hops.first().map_or(0, Matrix::cols)
    }

    pub fn bytes(&self) -> usize {
        self.hops.iter().map(Matrix::bytes).sum()
    }

    pub fn cast<U: Scalar>(&self) -> HopFeatureTensor<U> {
        HopFeatureTensor { subgraph_id: self.subgraph_id, hops: self.hops.iter().map(Matrix::cast).collect() }
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> HopFeatureTensor<T> {
        HopFeatureTensor {
            subgraph_id: self.subgraph_id,
            hops: self.hops.iter().map(|h| h.slice_rows(rows.start, rows.end)).collect(),
        }
    }
}

/// Neighbor-averaged features for hops `0..=hops` on one subgraph.
pub fn gen_neighbor_features<T: Scalar>(
    subgraph_id: usize,
    sub: &RelationSubgraph,
    h0: &Matrix<T>,
    hops: usize,
) -> Result<HopFeatureTensor<T>> {
    gen_neighbor_features_rows(subgraph_id, sub, h0, hops, 0..h0.rows(), None)
}

/// Like [`gen_neighbor_features`] but keeps only `rows` of every hop. Only
/// two full `N × D` buffers live at a time; their bytes are leased from
/// `scratch` when given.
pub fn gen_neighbor_features_rows<T: Scalar>(
    subgraph_id: usize,
    sub: &RelationSubgraph,
    h0: &Matrix<T>,
    hops: usize,
    rows: Range<usize>,
    scratch: Option<&MemoryAccountant>,
) -> Result<HopFeatureTensor<T>> {
    if hops == 0 {
        return Err(NarsError::Invalid("hop count L must be at least 1".into()));
    }
    if h0.rows() != sub.num_nodes() {
        return Err(NarsError::Dimension(format!(
            "input has {} rows, subgraph has {} nodes",
            h0.rows(),
            sub.num_nodes()
        )));
    }
    if !h0.is_finite() {
        return Err(NarsError::NonFinite("propagation input (hop 0)".into()));
    }
    let w = row_normalize(sub);
    let full = rows.start == 0 && rows.end == h0.rows();
    let mut out = Vec::with_capacity(hops + 1);
    out.push(if full { h0.clone() } else { h0.slice_rows(rows.start, rows.end) });
    let mut prev: Option<Matrix<T>> = None;
    let _lease_prev = scratch.map(|a| a.lease(h0.bytes()));
    for l in 1..=hops {
        let _lease_next = scratch.map(|a| a.lease(h0.bytes()));
        let next = w.apply(prev.as_ref().unwrap_or(h0));
        if !next.is_finite() {
            return Err(NarsError::NonFinite(format!("propagated features at hop {l}")));
        }
        out.push(if full { next.clone() } else { next.slice_rows(rows.start, rows.end) });
        prev = Some(next);
    }
    Ok(HopFeatureTensor { subgraph_id, hops: out })
}

/// Supplies per-subgraph hop tensors on demand.
pub trait HopSource<T: Scalar>: Send + Sync {
    fn num_subgraphs(&self) -> usize;
    /// `L + 1`
    fn num_hops(&self) -> usize;
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn load(&self, subgraph_id: usize) -> Result<HopFeatureTensor<T>>;
}

/// All tensors held in memory; `load` hands out copies.
pub struct InMemoryHops<T> {
    tensors: Vec<HopFeatureTensor<T>>,
}

impl<T: Scalar> InMemoryHops<T> {
    pub fn new(tensors: Vec<HopFeatureTensor<T>>) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| NarsError::Invalid("no hop tensors".into()))?;
        let (h, r, d) = (first.num_hops(), first.rows(), first.dim());
        for t in &tensors {
            if t.num_hops() != h || t.rows() != r || t.dim() != d || t.hops.iter().any(|m| m.shape() != (r, d)) {
                return Err(NarsError::Dimension(format!(
                    "subgraph {} tensor does not match {h} hops of {r}x{d}",
                    t.subgraph_id
                )));
            }
        }
        Ok(InMemoryHops { tensors })
    }

    pub fn tensors(&self) -> &[HopFeatureTensor<T>] {
        &self.tensors
    }
}

impl<T: Scalar> HopSource<T> for InMemoryHops<T> {
    fn num_subgraphs(&self) -> usize {
        self.tensors.len()
    }

    fn num_hops(&self) -> usize {
        self.tensors[0].num_hops()
    }

    fn rows(&self) -> usize {
        self.tensors[0].rows()
    }

    fn dim(&self) -> usize {
        self.tensors[0].dim()
    }

    fn load(&self, id: usize) -> Result<HopFeatureTensor<T>> {
        let mut t = self
            .tensors
            .get(id)
            .cloned()
            .ok_or_else(|| NarsError::OutOfRange { what: "subgraph".into(), id, count: self.tensors.len() })?;
        t.subgraph_id = id;
        Ok(t)
    }
}

/// Recomputes a subgraph's hops from the graph each time it is loaded, keeping
/// only the rows of one node type.
pub struct RegeneratingHops {
    graph: Arc<HeteroGraph>,
    subsets: Vec<RelationSubset>,
    input: Arc<Matrix<f32>>,
    hops: usize,
    symmetrize: bool,
    rows: Range<usize>,
    scratch: MemoryAccountant,
}

impl RegeneratingHops {
    pub fn new(
        graph: Arc<HeteroGraph>,
        subsets: Vec<RelationSubset>,
        input: Arc<Matrix<f32>>,
        hops: usize,
        symmetrize: bool,
        target: NodeTypeId,
    ) -> Result<Self> {
        if input.rows() != graph.num_nodes() {
            return Err(NarsError::Dimension("input rows differ from graph node count".into()));
        }
        if subsets.is_empty() {
            return Err(NarsError::Invalid("no subsets".into()));
        }
        let start = graph.offset(target);
        let rows = start..start + graph.node_type(target).count;
        Ok(RegeneratingHops { graph, subsets, input, hops, symmetrize, rows, scratch: MemoryAccountant::new() })
    }

    /// Accountant for the transient full-graph buffers used while generating.
    pub fn scratch(&self) -> &MemoryAccountant {
        &self.scratch
    }
}

impl<T: Scalar> HopSource<T> for RegeneratingHops {
    fn num_subgraphs(&self) -> usize {
        self.subsets.len()
    }

    fn num_hops(&self) -> usize {
        self.hops + 1
    }

    fn rows(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.input.cols()
    }

    fn load(&self, id: usize) -> Result<HopFeatureTensor<T>> {
        let subset = *self
            .subsets
            .get(id)
            .ok_or_else(|| NarsError::OutOfRange { what: "subgraph".into(), id, count: self.subsets.len() })?;
        let sub = extract_subgraph(&self.graph, subset, self.symmetrize);
        let t = gen_neighbor_features_rows(id, &sub, &*self.input, self.hops, self.rows.clone(), Some(&self.scratch))?;
        Ok(t.cast())
    }
}

/// One hop file entry in `hops.meta`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopFile {
    pub subgraph: usize,
    pub hop: usize,
    pub path: String,
    pub sha256: String,
}

/// Contents of `hops.meta`: which hop files make up each subgraph tensor.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct HopManifest {
    pub num_subgraphs: usize,
    pub num_hops: usize,
    pub rows: usize,
    pub cols: usize,
    /// Global id of the first stored row.
    pub row_offset: usize,
    pub target: String,
    pub subsets: Vec<Vec<String>>,
    pub files: Vec<HopFile>,
}

pub const MANIFEST_FILE: &str = "hops.meta";

impl HopManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = String::from("# hop feature manifest\n");
        writeln!(s, "subgraphs {}", self.num_subgraphs).unwrap();
        writeln!(s, "hops {}", self.num_hops).unwrap();
        writeln!(s, "rows {}", self.rows).unwrap();
        writeln!(s, "cols {}", self.cols).unwrap();
        writeln!(s, "row_offset {}", self.row_offset).unwrap();
        writeln!(s, "target {}", self.target).unwrap();
        for (i, names) in self.subsets.iter().enumerate() {
            writeln!(s, "subset {i} {}", names.join(",")).unwrap();
        }
        for f in &self.files {
            writeln!(s, "hop {} {} {} {}", f.subgraph, f.hop, f.path, f.sha256).unwrap();
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, s).map_err(|e| NarsError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| NarsError::io(&path, e))?;
        let mut m = HopManifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| NarsError::parse(&path, i + 1, format!("bad number `{s}`")))
            };
            match toks.as_slice() {
                ["subgraphs", n] => m.num_subgraphs = num(n)?,
                ["hops", n] => m.num_hops = num(n)?,
                ["rows", n] => m.rows = num(n)?,
                ["cols", n] => m.cols = num(n)?,
                ["row_offset", n] => m.row_offset = num(n)?,
                ["target", t] => m.target = t.to_string(),
                ["subset", _, names] => m.subsets.push(names.split(',').map(String::from).collect()),
                ["hop", s, h, p, sum] => m.files.push(HopFile {
                    subgraph: num(s)?,
                    hop: num(h)?,
                    path: p.to_string(),
                    sha256: sum.to_string(),
                }),
                _ => return Err(NarsError::parse(&path, i + 1, format!("unrecognized line `{line}`"))),
            }
        }
        Ok(m)
    }
}

/// Writes one `NARSFEAT` file per hop under `dir/hops/` and returns their
/// manifest entries.
pub fn save_hops(dir: &Path, tensor: &HopFeatureTensor<f32>) -> Result<Vec<HopFile>> {
    let sub = dir.join("hops");
    fs::create_dir_all(&sub).map_err(|e| NarsError::io(&sub, e))?;
    tensor
        .hops
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let rel = format!("hops/sub{}_hop{}.bin", tensor.subgraph_id, l);
            let sha256 = featfile::write(&dir.join(&rel), m)?;
            Ok(HopFile { subgraph: tensor.subgraph_id, hop: l, path: rel, sha256 })
        })
        .collect()
}

/// Loads one subgraph's hops listed in `manifest`, verifying checksums,
/// shapes and the hop count.
pub fn load_hops(dir: &Path, manifest: &HopManifest, subgraph: usize) -> Result<HopFeatureTensor<f32>> {
    if subgraph >= manifest.num_subgraphs {
        return Err(NarsError::OutOfRange { what: "subgraph".into(), id: subgraph, count: manifest.num_subgraphs });
    }
    let mut files: Vec<&HopFile> = manifest.files.iter().filter(|f| f.subgraph == subgraph).collect();
    files.sort_by_key(|f| f.hop);
    if files.len() != manifest.num_hops || files.iter().enumerate().any(|(l, f)| f.hop != l) {
        return Err(NarsError::Format(format!(
            "subgraph {subgraph}: manifest declares {} hops but lists {} hop files",
            manifest.num_hops,
            files.len()
        )));
    }
    let hops = files
        .into_iter()
        .map(|f| {
            let path: PathBuf = dir.join(&f.path);
            let m = featfile::read_checked(&path, &f.sha256)?;
            if m.shape() != (manifest.rows, manifest.cols) {
                return Err(NarsError::Format(format!(
                    "{}: header {}x{} differs from manifest {}x{}",
                    path.display(),
                    m.rows(),
                    m.cols(),
                    manifest.rows,
                    manifest.cols
                )));
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(HopFeatureTensor { subgraph_id: subgraph, hops })
}

/// Tensors read from a preprocessed artifact directory.
pub struct DiskHops {
    dir: PathBuf,
    manifest: HopManifest,
}

impl DiskHops {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = HopManifest::read(dir)?;
        Ok(DiskHops { dir: dir.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &HopManifest {
        &self.manifest
    }
}

impl<T: Scalar> HopSource<T> for DiskHops {
    fn num_subgraphs(&self) -> usize {
        self.manifest.num_subgraphs
    }

    fn num_hops(&self) -> usize {
        self.manifest.num_hops
    }

    fn rows(&self) -> usize {
        self.manifest.rows
    }

    fn dim(&self) -> usize {
        self.manifest.cols
    }

    fn load(&self, id: usize) -> Result<HopFeatureTensor<T>> {
        Ok(load_hops(&self.dir, &self.manifest, id)?.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::RelationSpec;
    use proptest::prelude::*;

    fn path_graph() -> RelationSubgraph {
        let g = HeteroGraph::new(&[("n", 3)], vec![RelationSpec::new("e", "n", "n", vec![(0, 1), (1, 2)])]).unwrap();
        extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true)
    }

    #[test]
    fn path_graph_first_hop() {
        let sub = path_graph();
        let h0 = Matrix::from_vec(3, 2, vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let t = gen_neighbor_features(0, &sub, &h0, 1).unwrap();
        assert_eq!(t.hops[0], h0);
        assert_eq!(t.hops[1].as_slice(), &[0.0, 1.0, 1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn weights_are_inverse_degree() {
        let sub = path_graph();
        let w = row_normalize(&sub);
        assert_eq!(w.row(1), (&[0u32, 2][..], 0.5));
        assert_eq!(w.row(0).1, 1.0);
        let g = HeteroGraph::new(&[("n", 2)], vec![RelationSpec::new("e", "n", "n", vec![])]).unwrap();
        let empty = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true);
        assert!(row_normalize(&empty).row(0).0.is_empty());
    }

    #[test]
    fn constants_survive_except_on_isolated_nodes() {
        let g = HeteroGraph::new(&[("n", 4)], vec![RelationSpec::new("e", "n", "n", vec![(0, 1), (1, 2)])]).unwrap();
        let sub = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true);
        let t = gen_neighbor_features(0, &sub, &Matrix::filled(4, 3, 1.0f32), 3).unwrap();
        for h in &t.hops[1..] {
            assert!(h.row(0).iter().chain(h.row(2)).all(|&v| v == 1.0));
            assert!(h.row(3).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn edgeless_subgraph_gives_zero_hops() {
        let g = HeteroGraph::new(&[("n", 3)], vec![RelationSpec::new("e", "n", "n", vec![])]).unwrap();
        let sub = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true);
        let t = gen_neighbor_features(0, &sub, &Matrix::filled(3, 2, 2.0f32), 1).unwrap();
        assert!(t.hops[1].as_slice().iter().all(|&v| v == 0.0));
        assert!(gen_neighbor_features(0, &sub, &Matrix::filled(3, 2, 2.0f32), 0).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let sub = path_graph();
        let mut h0 = Matrix::filled(3, 1, 1.0f32);
        h0.set(1, 0, f32::INFINITY);
        assert!(matches!(gen_neighbor_features(0, &sub, &h0, 1), Err(NarsError::NonFinite(_))));
    }

    #[test]
    fn assemble_checks_types_and_widths() {
        let g = HeteroGraph::new(&[("P", 3), ("A", 2)], vec![RelationSpec::new("w", "A", "P", vec![(0, 0)])]).unwrap();
        let (p, a) = (NodeTypeId(0), NodeTypeId(1));
        let mut feats = BTreeMap::new();
        feats.insert(p, FeatureMatrix::new(&g, p, Matrix::filled(3, 2, 1.0)).unwrap());
        let err = assemble_input(&g, &feats).unwrap_err().to_string();
        assert!(err.contains("`A`"), "{err}");
        feats.insert(a, FeatureMatrix::new(&g, a, Matrix::filled(2, 3, 2.0)).unwrap());
        assert!(matches!(assemble_input(&g, &feats), Err(NarsError::Dimension(_))));
        let (block, layout) = assemble_block_input(&g, &feats).unwrap();
        assert_eq!(layout.width, 5);
        assert_eq!(block.row(0), &[1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(block.row(4), &[0.0, 0.0, 2.0, 2.0, 2.0]);
        feats.insert(a, FeatureMatrix::new(&g, a, Matrix::filled(2, 2, 2.0)).unwrap());
        let x = assemble_input(&g, &feats).unwrap();
        assert_eq!(x.shape(), (5, 2));
        assert_eq!(x.row(3), &[2.0, 2.0]);
    }

    #[test]
    fn hop_files_roundtrip_and_validate() {
        let sub = path_graph();
        let h0 = Matrix::from_fn(3, 2, |r, c| (r as f32 + 1.0) / (c as f32 + 3.0));
        let t = gen_neighbor_features(0, &sub, &h0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_hops(dir.path(), &t).unwrap();
        let mut manifest = HopManifest {
            num_subgraphs: 1,
            num_hops: 3,
            rows: 3,
            cols: 2,
            row_offset: 0,
            target: "n".into(),
            subsets: vec![vec!["e".into()]],
            files,
        };
        manifest.write(dir.path()).unwrap();
        let read = HopManifest::read(dir.path()).unwrap();
        assert_eq!(read, manifest);
        let back = load_hops(dir.path(), &read, 0).unwrap();
        for (a, b) in t.hops.iter().zip(&back.hops) {
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }

        manifest.num_hops = 4;
        assert!(load_hops(dir.path(), &manifest, 0).is_err());
        manifest.num_hops = 3;

        let f = dir.path().join(&manifest.files[1].path);
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_hops(dir.path(), &manifest, 0).is_err());
    }

    #[test]
    fn row_restricted_generation_matches_full() {
        let g = HeteroGraph::new(
            &[("P", 4), ("A", 3)],
            vec![RelationSpec::new("w", "A", "P", vec![(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)])],
        )
        .unwrap();
        let sub = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true);
        let h0 = Matrix::from_fn(7, 3, |r, c| (r * 3 + c) as f32 * 0.1);
        let full = gen_neighbor_features(0, &sub, &h0, 3).unwrap();
        let acc = MemoryAccountant::new();
        let part = gen_neighbor_features_rows(0, &sub, &h0, 3, 0..4, Some(&acc)).unwrap();
        assert_eq!(part, full.slice_rows(0..4));
        assert_eq!(acc.current(), 0);
        assert_eq!(acc.peak(), 2 * h0.bytes());
    }

    proptest! {
        #[test]
        fn thread_count_does_not_change_bits(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 40u32;
            let edges: Vec<(u32, u32)> = (0..120).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
            let g = HeteroGraph::new(&[("n", n as usize)], vec![RelationSpec::new("e", "n", "n", edges)]).unwrap();
            let sub = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true);
            let h0 = Matrix::from_fn(n as usize, 5, |_, _| rng.gen_range(-1.0f32..1.0));
            let a = gen_neighbor_features(0, &sub, &h0, 3).unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            let b = pool.install(|| gen_neighbor_features(0, &sub, &h0, 3).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
