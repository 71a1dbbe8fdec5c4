//! Multi-relational graph storage, node tables, neighbor partitioning,
//! bundle ingestion, synthetic generation and label statistics.

mod bundle;
mod partition;
mod stats;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub use bundle::{load_bundle, write_bundle, BundleMeta};
pub use partition::{Bucket, PartitionIndex, RelationPartition};
pub use stats::{homophily_score, neighborhood_label_ratio, RatioBin, RatioHistogram, RelationSel};
pub use synth::{generate_ba_graph, generate_features, make_splits, plant_fraud_links};

pub const BENIGN: u8 = 0;
pub const FRAUD: u8 = 1;

/// Compressed row adjacency for one relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Csr {
    /// Builds rows from per-node lists; each list is sorted and deduplicated.
    pub(crate) fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend_from_slice(&l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Immutable undirected multi-relation graph without self-loops or
/// duplicate edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalGraph {
    num_nodes: usize,
    relations: Vec<Csr>,
}

impl RelationalGraph {
    /// Builds the graph from undirected edge lists, one list per relation.
    /// Edges are symmetrized, deduplicated, and self-loops are dropped.
    pub fn from_edges(num_nodes: usize, relations: &[Vec<(usize, usize)>]) -> Result<Self> {
        let relations = relations
            .iter()
            .enumerate()
            .map(|(r, edges)| {
                let mut lists = vec![Vec::new(); num_nodes];
                for &(u, v) in edges {
                    if u >= num_nodes || v >= num_nodes {
                        return Err(Error::invalid(format!(
                            "relation {r}: edge ({u},{v}) out of range for {num_nodes} nodes"
                        )));
                    }
                    if u != v {
                        lists[u].push(v);
                        lists[v].push(u);
                    }
                }
                Ok(Csr::from_lists(lists))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_nodes,
            relations,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation(&self, r: usize) -> Result<&Csr> {
        self.relations.get(r).ok_or_else(|| {
            Error::invalid(format!(
                "relation {r} out of range ({} relations)",
                self.relations.len()
            ))
        })
    }

    pub fn neighbors(&self, r: usize, i: usize) -> &[usize] {
        self.relations[r].row(i)
    }

    pub fn degree(&self, r: usize, i: usize) -> usize {
        self.neighbors(r, i).len()
    }

    pub fn degrees(&self, r: usize) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.degree(r, i)).collect()
    }

    /// Number of undirected edges in relation `r`.
    pub fn num_edges(&self, r: usize) -> usize {
        self.relations[r].nnz() / 2
    }

    /// Total directed adjacency entries across relations.
    pub fn total_entries(&self) -> usize {
        self.relations.iter().map(Csr::nnz).sum()
    }

    /// Undirected edge list of relation `r`, each edge once with `u < v`.
    pub fn edge_list(&self, r: usize) -> Vec<(usize, usize)> {
        let csr = &self.relations[r];
        (0..self.num_nodes)
            .flat_map(|u| {
                csr.row(u)
                    .iter()
                    .filter(move |&&v| u < v)
                    .map(move |&v| (u, v))
            })
            .collect()
    }

    /// Single-relation graph whose edge set is the union of all relations.
    pub fn union(&self) -> RelationalGraph {
        let lists = (0..self.num_nodes)
            .map(|i| {
                self.relations
                    .iter()
                    .flat_map(|c| c.row(i).iter().copied())
                    .collect()
            })
            .collect();
        RelationalGraph {
            num_nodes: self.num_nodes,
            relations: vec![Csr::from_lists(lists)],
        }
    }

    /// Copy of the graph with only relation `r`.
    pub fn single_relation(&self, r: usize) -> Result<RelationalGraph> {
        Ok(RelationalGraph {
            num_nodes: self.num_nodes,
            relations: vec![self.relation(r)?.clone()],
        })
    }

    /// Neighbors of `i` across all relations, sorted and deduplicated.
    pub fn union_neighbors(&self, i: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .relations
            .iter()
            .flat_map(|c| c.row(i).iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Node features, binary labels and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    features: Tensor,
    labels: Vec<u8>,
    splits: Vec<Split>,
}

impl NodeTable {
    /// Checks row counts, finiteness and label range. Use
    /// [`NodeTable::check_trainable`] for the train-split class requirement.
    pub fn new(features: Tensor, labels: Vec<u8>, splits: Vec<Split>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid("features must be a matrix"));
        }
        let n = features.rows();
        if labels.len() != n || splits.len() != n {
            return Err(Error::invalid(format!(
                "row-count mismatch: {n} feature rows, {} labels, {} splits",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !features.row(i).iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("non-finite feature in row {i}")));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::invalid(format!(
                "label {} of node {i} outside {{0,1}}",
                labels[i]
            )));
        }
        Ok(Self {
            features,
            labels,
            splits,
        })
    }

    /// Fails unless both classes appear among train nodes.
    pub fn check_trainable(&self) -> Result<()> {
        let mut seen = [false; 2];
        for (l, s) in self.labels.iter().zip(&self.splits) {
            if *s == Split::Train {
                seen[*l as usize] = true;
            }
        }
        if seen == [true, true] {
            Ok(())
        } else {
            Err(Error::invalid("train split must contain both classes"))
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Label of `i` if `i` is a train node, `None` otherwise. This is the only
    /// label accessor used to build neighbor partitions.
    pub fn train_label(&self, i: usize) -> Option<u8> {
        (self.splits[i] == Split::Train).then(|| self.labels[i])
    }

    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn train_mask(&self) -> Vec<bool> {
        self.splits.iter().map(|&s| s == Split::Train).collect()
    }
}
