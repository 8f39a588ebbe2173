//! Relation subsets and the homogeneous subgraphs they induce.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::hetgraph::{Csr, HeteroGraph, NodeTypeId, RelationId};
use crate::rng::{rng_for, Stream};

/// Default cap on the relation count for full power-set enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 20;

/// A non-empty subset of relation types, as a bitmask over relation ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationSubset(u64);

impl RelationSubset {
    pub fn from_mask(mask: u64) -> Result<Self> {
        if mask == 0 {
            return Err(NarsError::Invalid("relation subset must be non-empty".into()));
        }
        Ok(RelationSubset(mask))
    }

    pub fn from_ids(ids: &[RelationId]) -> Result<Self> {
        let mut mask = 0u64;
        for r in ids {
            if r.0 >= 64 {
                return Err(NarsError::Invalid(format!("relation id {} exceeds 64-bit mask", r.0)));
            }
            mask |= 1 << r.0;
        }
        Self::from_mask(mask)
    }

    pub fn from_names<S: AsRef<str>>(g: &HeteroGraph, names: &[S]) -> Result<Self> {
        let ids = names
            .iter()
            .map(|n| {
                g.relation_by_name(n.as_ref())
                    .ok_or_else(|| NarsError::Unknown { kind: "relation", name: n.as_ref().into() })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_ids(&ids)
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn contains(self, r: RelationId) -> bool {
        r.0 < 64 && self.0 & (1 << r.0) != 0
    }

    /// Member relation ids in ascending order.
    pub fn relations(self) -> Vec<RelationId> {
        (0..64).filter(|i| self.0 & (1u64 << i) != 0).map(RelationId).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: RelationSubset) -> RelationSubset {
        RelationSubset(self.0 | other.0)
    }

    pub fn names(self, g: &HeteroGraph) -> Vec<String> {
        self.relations().into_iter().map(|r| g.relation(r).name.clone()).collect()
    }
}

impl fmt::Display for RelationSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, r) in self.relations().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", r.0)?;
        }
        write!(f, "}}")
    }
}

/// All `2^n - 1` non-empty subsets of `n` relations, in bitmask order.
pub fn enumerate_subsets(num_relations: usize, cap: usize) -> Result<Vec<RelationSubset>> {
    if num_relations == 0 {
        return Err(NarsError::Invalid("graph has no relation types".into()));
    }
    if num_relations > cap.min(63) {
        return Err(NarsError::TooManyRelations { relations: num_relations, cap: cap.min(63) });
    }
    Ok((1..(1u64 << num_relations)).map(RelationSubset).collect())
}

/// A subset is valid for `target` when at least one of its relations touches
/// the target type and the type-level graph formed by its relations is
/// connected. Subsets that miss the target, or that carry relations not
/// reachable from it, are rejected.
pub fn is_valid_subset(g: &HeteroGraph, s: RelationSubset, target: NodeTypeId) -> bool {
    let n = g.node_types().len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut touched = BTreeSet::new();
    for r in s.relations() {
        if r.0 >= g.relations().len() {
            return false;
        }
        let rel = g.relation(r);
        touched.insert(rel.src.0);
        touched.insert(rel.dst.0);
        let (a, b) = (find(&mut parent, rel.src.0), find(&mut parent, rel.dst.0));
        parent[a] = b;
    }
    if !touched.contains(&target.0) {
        return false;
    }
    let root = find(&mut parent, target.0);
    touched.into_iter().all(|t| find(&mut parent, t) == root)
}

pub fn valid_subsets(g: &HeteroGraph, target: NodeTypeId, cap: usize) -> Result<Vec<RelationSubset>> {
    Ok(enumerate_subsets(g.relations().len(), cap)?
        .into_iter()
        .filter(|&s| is_valid_subset(g, s, target))
        .collect())
}

/// `k` distinct subsets drawn uniformly without replacement.
pub fn sample_subsets(valid: &[RelationSubset], k: usize, seed: u64) -> Result<Vec<RelationSubset>> {
    if k > valid.len() {
        return Err(NarsError::NotEnoughSubsets { requested: k, available: valid.len() });
    }
    let mut rng = rng_for(seed, Stream::SubsetSampling);
    Ok(index::sample(&mut rng, valid.len(), k).into_iter().map(|i| valid[i]).collect())
}

/// Rejection sampling of random bitmasks for graphs with too many relation
/// types to enumerate. Each relation is included with probability ½; invalid
/// and duplicate draws are discarded.
pub fn sample_subsets_by_rejection(
    g: &HeteroGraph,
    target: NodeTypeId,
    k: usize,
    seed: u64,
    max_draws: usize,
) -> Result<Vec<RelationSubset>> {
    let n = g.relations().len();
    if n == 0 || n > 64 {
        return Err(NarsError::Invalid(format!("{n} relation types cannot be sampled as a 64-bit mask")));
    }
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut rng = rng_for(seed, Stream::SubsetSampling);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    for _ in 0..max_draws {
        if out.len() == k {
            break;
        }
        let mask = rng.gen::<u64>() & full;
        if mask == 0 {
            continue;
        }
        let s = RelationSubset(mask);
        if is_valid_subset(g, s, target) && seen.insert(mask) {
            out.push(s);
        }
    }
    if out.len() < k {
        return Err(NarsError::NotEnoughSubsets { requested: k, available: out.len() });
    }
    Ok(out)
}

/// Enumerates and samples when the relation count is within `cap`, falls back
/// to rejection sampling otherwise.
pub fn choose_subsets(g: &HeteroGraph, target: NodeTypeId, k: usize, seed: u64, cap: usize) -> Result<Vec<RelationSubset>> {
    match valid_subsets(g, target, cap) {
        Ok(valid) => sample_subsets(&valid, k, seed),
        Err(NarsError::TooManyRelations { .. }) => sample_subsets_by_rejection(g, target, k, seed, 10_000 * k.max(1)),
        Err(e) => Err(e),
    }
}

/// Homogeneous view of the edges whose relation is in `subset`, over all
/// global node ids. Row `v` lists the neighbors `v` averages over.
#[derive(Clone, Debug)]
pub struct RelationSubgraph {
    pub subset: RelationSubset,
    pub csr: Csr,
    pub symmetric: bool,
}

impl RelationSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.csr.num_rows()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.csr.degree(v)
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        self.csr.row(v)
    }

    pub fn num_edges(&self) -> usize {
        self.csr.nnz()
    }
}

/// Builds the subgraph for `subset`. With `symmetrize`, every edge is present
/// in both directions; otherwise row `dst` lists its in-neighbors `src`.
/// Parallel edges coming from different relations collapse to one.
pub fn extract_subgraph(g: &HeteroGraph, subset: RelationSubset, symmetrize: bool) -> RelationSubgraph {
    let mut pairs = Vec::new();
    for r in subset.relations() {
        if r.0 >= g.relations().len() {
            continue;
        }
        let rel = g.relation(r);
        let (so, dof) = (g.offset(rel.src) as u32, g.offset(rel.dst) as u32);
        for (s, d) in g.edges(r) {
            let (u, v) = (s + so, d + dof);
            pairs.push((v, u));
            if symmetrize {
                pairs.push((u, v));
            }
        }
    }
    RelationSubgraph { subset, csr: Csr::from_pairs(g.num_nodes(), pairs), symmetric: symmetrize }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::RelationSpec;
    use proptest::prelude::*;

    /// Node types P, A, F, I with OGB-MAG's four relations.
    fn mag_like() -> HeteroGraph {
        HeteroGraph::new(
            &[("paper", 4), ("author", 3), ("field", 2), ("institution", 2)],
            vec![
                RelationSpec::new("writes", "author", "paper", vec![(0, 0), (1, 1), (2, 3)]),
                RelationSpec::new("has_topic", "paper", "field", vec![(0, 0), (2, 1)]),
                RelationSpec::new("cites", "paper", "paper", vec![(0, 1), (1, 2)]),
                RelationSpec::new("affiliated_with", "author", "institution", vec![(0, 0), (2, 1)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_subsets(4, 20).unwrap().len(), 15);
        assert_eq!(enumerate_subsets(1, 20).unwrap().len(), 1);
        let three: Vec<u64> = enumerate_subsets(3, 20).unwrap().iter().map(|s| s.mask()).collect();
        assert_eq!(three, vec![1, 2, 3, 4, 5, 6, 7]);
        assert!(matches!(enumerate_subsets(21, 20), Err(NarsError::TooManyRelations { .. })));
    }

    #[test]
    fn mag_validity() {
        let g = mag_like();
        let paper = NodeTypeId(0);
        let valid = valid_subsets(&g, paper, 20).unwrap();
        assert_eq!(valid.len(), 11);
        let ai = RelationSubset::from_names(&g, &["affiliated_with"]).unwrap();
        assert!(!is_valid_subset(&g, ai, paper));
        let pp = RelationSubset::from_names(&g, &["cites"]).unwrap();
        assert!(is_valid_subset(&g, pp, paper));
    }

    #[test]
    fn sampling_rules() {
        let g = mag_like();
        let valid = valid_subsets(&g, NodeTypeId(0), 20).unwrap();
        let all = sample_subsets(&valid, valid.len(), 3).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, valid);
        assert_eq!(sample_subsets(&valid, 1, 9).unwrap(), sample_subsets(&valid, 1, 9).unwrap());
        let eight = sample_subsets(&valid, 8, 0).unwrap();
        assert_eq!(eight.iter().collect::<BTreeSet<_>>().len(), 8);
        let err = sample_subsets(&valid, 12, 0).unwrap_err().to_string();
        assert!(err.contains("12") && err.contains("11"), "{err}");
    }

    #[test]
    fn rejection_sampling_finds_distinct_valid_subsets() {
        let g = mag_like();
        let got = sample_subsets_by_rejection(&g, NodeTypeId(0), 11, 5, 100_000).unwrap();
        assert_eq!(got.iter().collect::<BTreeSet<_>>().len(), 11);
        assert!(got.iter().all(|&s| is_valid_subset(&g, s, NodeTypeId(0))));
        assert!(sample_subsets_by_rejection(&g, NodeTypeId(0), 12, 5, 10_000).is_err());
    }

    #[test]
    fn toy_subgraph() {
        let g = HeteroGraph::new(&[("P", 3), ("A", 2)], vec![RelationSpec::new("writes", "A", "P", vec![(0, 0)])])
            .unwrap();
        let s = RelationSubset::from_names(&g, &["writes"]).unwrap();
        let sub = extract_subgraph(&g, s, true);
        let degrees: Vec<usize> = (0..5).map(|v| sub.degree(v)).collect();
        assert_eq!(degrees, vec![1, 0, 0, 1, 0]);
        assert_eq!(sub.neighbors(0), &[3]);
        assert_eq!(sub.neighbors(3), &[0]);
    }

    #[test]
    fn directed_subgraph_lists_in_neighbors() {
        let g = HeteroGraph::new(&[("P", 3), ("A", 2)], vec![RelationSpec::new("writes", "A", "P", vec![(0, 0)])])
            .unwrap();
        let sub = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), false);
        assert_eq!(sub.neighbors(0), &[3]);
        assert_eq!(sub.degree(3), 0);
    }

    #[test]
    fn empty_relation_gives_isolated_nodes() {
        let g = HeteroGraph::new(&[("P", 3)], vec![RelationSpec::new("cites", "P", "P", vec![])]).unwrap();
        let sub = extract_subgraph(&g, RelationSubset::from_mask(1).unwrap(), true);
        assert_eq!(sub.num_edges(), 0);
        assert!((0..3).all(|v| sub.degree(v) == 0));
    }

    fn arb_graph() -> impl Strategy<Value = HeteroGraph> {
        prop::collection::vec((0u32..5, 0u32..5, 0usize..4), 0..30).prop_map(|raw| {
            let mut rels = vec![
                RelationSpec::new("writes", "author", "paper", vec![]),
                RelationSpec::new("has_topic", "paper", "field", vec![]),
                RelationSpec::new("cites", "paper", "paper", vec![]),
                RelationSpec::new("affiliated_with", "author", "institution", vec![]),
            ];
            for (s, d, r) in raw {
                let bound = |x: u32, n: u32| x % n;
                let (s, d) = match r {
                    0 => (bound(s, 4), bound(d, 5)),
                    1 => (bound(s, 5), bound(d, 3)),
                    2 => (bound(s, 5), bound(d, 5)),
                    _ => (bound(s, 4), bound(d, 2)),
                };
                rels[r].edges.push((s, d));
            }
            HeteroGraph::new(&[("paper", 5), ("author", 4), ("field", 3), ("institution", 2)], rels).unwrap()
        })
    }

    proptest! {
        #[test]
        fn symmetric_neighborhoods(g in arb_graph(), mask in 1u64..16) {
            let sub = extract_subgraph(&g, RelationSubset(mask), true);
            for u in 0..sub.num_nodes() {
                for &v in sub.neighbors(u) {
                    prop_assert!(sub.neighbors(v as usize).contains(&(u as u32)));
                }
            }
        }

        #[test]
        fn union_of_subsets_unions_edges(g in arb_graph(), m1 in 1u64..16, m2 in 1u64..16) {
            let (s1, s2) = (RelationSubset(m1), RelationSubset(m2));
            let e = |s| extract_subgraph(&g, s, true).csr.pairs().collect::<BTreeSet<_>>();
            let both: BTreeSet<_> = e(s1).union(&e(s2)).copied().collect();
            prop_assert_eq!(e(s1.union(s2)), both);
        }

        #[test]
        fn adding_a_connected_relation_keeps_validity(mask in 1u64..16, extra in 0usize..4) {
            let g = mag_like();
            let s = RelationSubset(mask);
            let paper = NodeTypeId(0);
            let rel = g.relation(RelationId(extra));
            let touched: BTreeSet<usize> = s.relations().iter()
                .flat_map(|&r| [g.relation(r).src.0, g.relation(r).dst.0]).collect();
            if is_valid_subset(&g, s, paper) && (touched.contains(&rel.src.0) || touched.contains(&rel.dst.0)) {
                prop_assert!(is_valid_subset(&g, RelationSubset(mask | 1 << extra), paper));
            }
        }
    }
}
