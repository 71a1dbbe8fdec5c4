use super::{Csr, NodeTable, RelationalGraph, FRAUD};

/// Neighbor class bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Fraud,
    Benign,
    Unlabeled,
}

/// Neighbor lists of one relation split by the train label of each neighbor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationPartition {
    pub fraud: Csr,
    pub benign: Csr,
    pub unlabeled: Csr,
}

impl RelationPartition {
    pub fn bucket(&self, bucket: Bucket) -> &Csr {
        match bucket {
            Bucket::Fraud => &self.fraud,
            Bucket::Benign => &self.benign,
            Bucket::Unlabeled => &self.unlabeled,
        }
    }
}

/// Per-relation fraud / benign / unlabeled neighbor lists, built from train
/// labels only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionIndex {
    relations: Vec<RelationPartition>,
}

impl PartitionIndex {
    pub fn build(graph: &RelationalGraph, table: &NodeTable) -> Self {
        let n = graph.num_nodes();
        let class: Vec<Bucket> = (0..n)
            .map(|j| match table.train_label(j) {
                Some(FRAUD) => Bucket::Fraud,
                Some(_) => Bucket::Benign,
                None => Bucket::Unlabeled,
            })
            .collect();
        let relations = (0..graph.num_relations())
            .map(|r| {
                let mut fr = vec![Vec::new(); n];
                let mut be = vec![Vec::new(); n];
                let mut un = vec![Vec::new(); n];
                for i in 0..n {
                    for &j in graph.neighbors(r, i) {
                        match class[j] {
                            Bucket::Fraud => fr[i].push(j),
                            Bucket::Benign => be[i].push(j),
                            Bucket::Unlabeled => un[i].push(j),
                        }
                    }
                }
                RelationPartition {
                    fraud: Csr::from_lists(fr),
                    benign: Csr::from_lists(be),
                    unlabeled: Csr::from_lists(un),
                }
            })
            .collect();
        Self { relations }
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation(&self, r: usize) -> &RelationPartition {
        &self.relations[r]
    }

    pub fn neighbors(&self, r: usize, i: usize, bucket: Bucket) -> &[usize] {
        self.relations[r].bucket(bucket).row(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;
    use crate::ndiff::Tensor;

    fn table(labels: Vec<u8>, splits: Vec<Split>) -> NodeTable {
        let n = labels.len();
        NodeTable::new(Tensor::zeros(&[n, 1]), labels, splits).unwrap()
    }

    #[test]
    fn star_partition() {
        let g = RelationalGraph::from_edges(4, &[vec![(0, 1), (0, 2), (0, 3)]]).unwrap();
        let t = table(
            vec![0, 1, 0, 1],
            vec![Split::Test, Split::Train, Split::Train, Split::Test],
        );
        let p = PartitionIndex::build(&g, &t);
        assert_eq!(p.neighbors(0, 0, Bucket::Fraud), &[1]);
        assert_eq!(p.neighbors(0, 0, Bucket::Benign), &[2]);
        assert_eq!(p.neighbors(0, 0, Bucket::Unlabeled), &[3]);
    }

    #[test]
    fn all_unlabeled() {
        let g = RelationalGraph::from_edges(3, &[vec![(0, 1), (0, 2)]]).unwrap();
        let t = table(vec![1, 0, 1], vec![Split::Val, Split::Test, Split::Val]);
        let p = PartitionIndex::build(&g, &t);
        assert!(p.neighbors(0, 0, Bucket::Fraud).is_empty());
        assert!(p.neighbors(0, 0, Bucket::Benign).is_empty());
        assert_eq!(p.neighbors(0, 0, Bucket::Unlabeled), &[1, 2]);
    }

    #[test]
    fn held_out_labels_are_not_consulted() {
        let g = RelationalGraph::from_edges(3, &[vec![(0, 1), (0, 2)]]).unwrap();
        let splits = vec![Split::Train, Split::Val, Split::Test];
        let a = PartitionIndex::build(&g, &table(vec![1, 0, 0], splits.clone()));
        let b = PartitionIndex::build(&g, &table(vec![1, 1, 1], splits));
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn buckets_split_each_neighborhood(
            n in 2usize..15,
            raw in proptest::collection::vec((0usize..15, 0usize..15), 0..40),
            labels in proptest::collection::vec(0u8..2, 15),
            splits in proptest::collection::vec(0usize..3, 15),
        ) {
            let edges: Vec<_> = raw.into_iter().map(|(u, v)| (u % n, v % n)).filter(|(u, v)| u != v).collect();
            let g = RelationalGraph::from_edges(n, &[edges]).unwrap();
            let splits: Vec<Split> = splits[..n].iter().map(|&s| [Split::Train, Split::Val, Split::Test][s]).collect();
            let t = table(labels[..n].to_vec(), splits.clone());
            let p = PartitionIndex::build(&g, &t);
            for i in 0..n {
                let mut all: Vec<usize> = [Bucket::Fraud, Bucket::Benign, Bucket::Unlabeled]
                    .iter()
                    .flat_map(|&b| p.neighbors(0, i, b).iter().copied())
                    .collect();
                all.sort_unstable();
                proptest::prop_assert_eq!(&all[..], g.neighbors(0, i));
                for &j in p.neighbors(0, i, Bucket::Fraud) {
                    proptest::prop_assert!(splits[j] == Split::Train && labels[j] == 1);
                }
                for &j in p.neighbors(0, i, Bucket::Benign) {
                    proptest::prop_assert!(splits[j] == Split::Train && labels[j] == 0);
                }
                for &j in p.neighbors(0, i, Bucket::Unlabeled) {
                    proptest::prop_assert!(splits[j] != Split::Train);
                }
            }
        }
    }
}
