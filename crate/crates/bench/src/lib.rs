//! Inputs shared by the benchmarks.

use nars::hetgraph::RelationSpec;
use nars::{HeteroGraph, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random graph with paper/author/field types and three relations,
/// about `n` nodes and `5n` edges.
pub fn academic_graph(n: usize, seed: u64) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let papers = n * 2 / 5;
    let authors = n / 2;
    let fields = n - papers - authors;
    let mut edges = |m: usize, s: usize, d: usize| -> Vec<(u32, u32)> {
        (0..m).map(|_| (rng.gen_range(0..s) as u32, rng.gen_range(0..d) as u32)).collect()
    };
    let writes = edges(3 * papers, authors, papers);
    let cites = edges(5 * papers, papers, papers);
    let topics = edges(4 * papers, papers, fields);
    HeteroGraph::new(
        &[("paper", papers), ("author", authors), ("field", fields)],
        vec![
            RelationSpec::new("writes", "author", "paper", writes),
            RelationSpec::new("cites", "paper", "paper", cites),
            RelationSpec::new("has_topic", "paper", "field", topics),
        ],
    )
    .expect("benchmark graph")
}

pub fn random_matrix<T: nars::Scalar>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-1.0..1.0)))
}
