use serde::Serialize;

use super::{Bucket, NodeTable, PartitionIndex, RelationalGraph, Split, BENIGN, FRAUD};
use crate::error::{Error, Result};

/// Which edge set a statistic is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationSel {
    Relation(usize),
    Union,
}

fn select(graph: &RelationalGraph, sel: RelationSel) -> Result<RelationalGraph> {
    match sel {
        RelationSel::Relation(r) => graph.single_relation(r),
        RelationSel::Union => Ok(graph.union()),
    }
}

/// Class-imbalance-corrected homophily over two classes.
///
/// For class k, `eta_k` is the fraction of neighbor slots of class-k nodes
/// that hold class-k nodes. The score is `sum_k max(eta_k - |C_k|/N, 0)`.
/// A class whose nodes have no neighbors contributes zero.
pub fn homophily_score(graph: &RelationalGraph, sel: RelationSel, labels: &[u8]) -> Result<f64> {
    if labels.len() != graph.num_nodes() {
        return Err(Error::invalid(format!(
            "{} labels for {} nodes",
            labels.len(),
            graph.num_nodes()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::invalid(format!("label of node {i} outside {{0,1}}")));
    }
    let g = select(graph, sel)?;
    let n = g.num_nodes();
    if n == 0 {
        return Ok(0.0);
    }
    let mut same = [0usize; 2];
    let mut total = [0usize; 2];
    let mut class_size = [0usize; 2];
    for i in 0..n {
        let k = labels[i] as usize;
        class_size[k] += 1;
        let nbrs = g.neighbors(0, i);
        total[k] += nbrs.len();
        same[k] += nbrs.iter().filter(|&&j| labels[j] as usize == k).count();
    }
    // Each term is (same·n − |C_k|·total) / (total·n); summing the two as one
    // integer fraction rounds once, so a fully homophilic graph gives exactly 1.
    let term = |k: usize| -> (u128, u128) {
        if total[k] == 0 {
            return (0, 1);
        }
        let pos =
            (same[k] as u128 * n as u128).saturating_sub(class_size[k] as u128 * total[k] as u128);
        (pos, total[k] as u128 * n as u128)
    };
    let ((a, b), (c, d)) = (term(BENIGN as usize), term(FRAUD as usize));
    let score = (a * d + c * b) as f64 / (b * d) as f64;
    // C - 1 = 1 for binary labels.
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioBin {
    pub lower: f64,
    /// `f64::INFINITY` for the overflow bin.
    pub upper: f64,
    pub count: usize,
}

/// Histogram of `|N_fr| / |N_be|` over train centers, using train-labeled
/// neighbors only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioHistogram {
    pub bins: Vec<RatioBin>,
    /// Centers with fraud neighbors but no benign neighbors.
    pub infinite: usize,
    /// Centers with no labeled neighbors at all.
    pub excluded: usize,
    /// `(node, ratio)` for every center that landed in a finite bin.
    pub ratios: Vec<(usize, f64)>,
}

impl RatioHistogram {
    pub fn counted(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Fraction of finite-ratio centers with ratio strictly below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        self.ratios.iter().filter(|(_, r)| *r < x).count() as f64 / self.ratios.len() as f64
    }
}

/// `num_bins` bins of width `bin_width` starting at 0; the last bin is open-ended.
pub fn neighborhood_label_ratio(
    graph: &RelationalGraph,
    table: &NodeTable,
    sel: RelationSel,
    bin_width: f64,
    num_bins: usize,
) -> Result<RatioHistogram> {
    if !(bin_width > 0.0) || num_bins == 0 {
        return Err(Error::invalid("bin_width must be > 0 and num_bins >= 1"));
    }
    let g = select(graph, sel)?;
    let partition = PartitionIndex::build(&g, table);
    let mut bins: Vec<RatioBin> = (0..num_bins)
        .map(|k| RatioBin {
            lower: k as f64 * bin_width,
            upper: if k + 1 == num_bins {
                f64::INFINITY
            } else {
                (k + 1) as f64 * bin_width
            },
            count: 0,
        })
        .collect();
    let mut infinite = 0;
    let mut excluded = 0;
    let mut ratios = Vec::new();
    for i in 0..g.num_nodes() {
        if table.splits()[i] != Split::Train {
            continue;
        }
        let fr = partition.neighbors(0, i, Bucket::Fraud).len();
        let be = partition.neighbors(0, i, Bucket::Benign).len();
        match (fr, be) {
            (0, 0) => excluded += 1,
            (_, 0) => infinite += 1,
            _ => {
                let ratio = fr as f64 / be as f64;
                let k = ((ratio / bin_width).floor() as usize).min(num_bins - 1);
                bins[k].count += 1;
                ratios.push((i, ratio));
            }
        }
    }
    Ok(RatioHistogram {
        bins,
        infinite,
        excluded,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tensor;

    fn clique(nodes: &[usize]) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for (a, &u) in nodes.iter().enumerate() {
            for &v in &nodes[a + 1..] {
                e.push((u, v));
            }
        }
        e
    }

    #[test]
    fn disjoint_same_label_cliques_score_one() {
        let mut edges = clique(&[0, 1, 2, 3]);
        edges.extend(clique(&[4, 5, 6]));
        let g = RelationalGraph::from_edges(7, &[edges]).unwrap();
        let labels = vec![0, 0, 0, 0, 1, 1, 1];
        assert_eq!(
            homophily_score(&g, RelationSel::Union, &labels).unwrap(),
            1.0
        );
        assert_eq!(
            homophily_score(&g, RelationSel::Relation(0), &labels).unwrap(),
            1.0
        );
    }

    #[test]
    fn path_fraud_benign_benign_fraud() {
        // Hand evaluation: eta_benign = 2/4, eta_fraud = 0/2, both class shares 1/2,
        // so both terms clip to 0.
        let g = RelationalGraph::from_edges(4, &[vec![(0, 1), (1, 2), (2, 3)]]).unwrap();
        let s = homophily_score(&g, RelationSel::Relation(0), &[1, 0, 0, 1]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn star_with_fraud_leaves() {
        // center benign, leaves: 2 benign, 1 fraud, plus a benign-benign edge.
        // benign nodes {0,1,2}: slots 0:{1,2,3} 1:{0,2} 2:{0,1} => same 6 of 7.
        // fraud {3}: slots {0} => 0/1. N=4: 6/7 - 3/4 = 3/28.
        let g = RelationalGraph::from_edges(4, &[vec![(0, 1), (0, 2), (0, 3), (1, 2)]]).unwrap();
        let s = homophily_score(&g, RelationSel::Union, &[0, 0, 0, 1]).unwrap();
        assert!((s - 3.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn homophily_errors() {
        let g = RelationalGraph::from_edges(2, &[vec![(0, 1)]]).unwrap();
        assert!(homophily_score(&g, RelationSel::Relation(1), &[0, 1]).is_err());
        assert!(homophily_score(&g, RelationSel::Relation(0), &[0]).is_err());
    }

    #[test]
    fn ratio_two_fraud_four_benign() {
        let g =
            RelationalGraph::from_edges(8, &[vec![(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6)]])
                .unwrap();
        let labels = vec![0, 1, 1, 0, 0, 0, 0, 0];
        let mut splits = vec![Split::Train; 8];
        splits[7] = Split::Train;
        let t = NodeTable::new(Tensor::zeros(&[8, 1]), labels, splits).unwrap();
        let h = neighborhood_label_ratio(&g, &t, RelationSel::Relation(0), 0.1, 20).unwrap();
        let center = h.ratios.iter().find(|(i, _)| *i == 0).unwrap();
        assert_eq!(center.1, 0.5);
        // node 7 is isolated and excluded; leaves 1,2 have only benign center 0
        assert_eq!(h.excluded, 1);
        assert_eq!(h.infinite, 0);
        assert_eq!(h.counted(), 7);
    }

    proptest::proptest! {
        #[test]
        fn homophily_is_a_fraction_and_relabel_invariant(
            n in 2usize..20,
            raw in proptest::collection::vec((0usize..20, 0usize..20), 1..60),
            labels in proptest::collection::vec(0u8..2, 20),
        ) {
            let edges: Vec<_> = raw.into_iter().map(|(u, v)| (u % n, v % n)).filter(|(u, v)| u != v).collect();
            proptest::prop_assume!(!edges.is_empty());
            let g = RelationalGraph::from_edges(n, &[edges]).unwrap();
            let labels = &labels[..n];
            let h = homophily_score(&g, RelationSel::Union, labels).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&h), "{}", h);
            // swapping class names only permutes the summands
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            proptest::prop_assert_eq!(h, homophily_score(&g, RelationSel::Union, &flipped).unwrap());
        }
    }
}
