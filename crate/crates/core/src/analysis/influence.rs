//! Gradient-based influence of neighbors on a center's fraud probability.
//!
//! `∂Z_i/∂X_j` is a feature-sized vector; it is reduced to a scalar by summing
//! its entries. Neighbor classes use ground-truth labels.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{NodeTable, PartitionIndex, RelationalGraph, Split, FRAUD};
use crate::model::{gather, ForwardMode, PmpModel};
use crate::ndiff::{Tape, Tensor};

/// How the per-neighbor gradient vector is reduced; recorded in reports.
pub const REDUCTION: &str = "sum of entries of dZ_i/dX_j";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeInfluence {
    pub node: usize,
    pub i_f: f64,
    pub i_b: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfluenceReport {
    pub reduction: &'static str,
    pub nodes: Vec<NodeInfluence>,
    pub bins: Vec<HistBin>,
}

impl InfluenceReport {
    pub fn mean_diff(&self) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        Some(self.nodes.iter().map(|n| n.diff).sum::<f64>() / self.nodes.len() as f64)
    }
}

/// Summed input gradient of `Z_center` for every node reached by the model,
/// accumulated across relations.
fn input_gradients(
    model: &PmpModel,
    graph: &RelationalGraph,
    partition: &PartitionIndex,
    features: &Tensor,
    center: usize,
) -> Result<HashMap<usize, f64>> {
    let plan = model.plan(graph, partition, &[center])?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let inputs: Vec<_> = plan
        .relations
        .iter()
        .map(|rel| tape.leaf(gather(features, &rel.input_nodes)))
        .collect();
    let z = model.forward_plan(&mut tape, &vars, &plan, &inputs, ForwardMode::eval())?;
    let grads = tape.backward(z)?;
    let mut out: HashMap<usize, f64> = HashMap::new();
    for (rel, &x) in plan.relations.iter().zip(&inputs) {
        let g = grads.get_or_zeros(x, tape.value(x).shape());
        for (row, &node) in rel.input_nodes.iter().enumerate() {
            *out.entry(node).or_insert(0.0) += g.row(row).iter().sum::<f64>();
        }
    }
    Ok(out)
}

fn split_influence(
    grads: &HashMap<usize, f64>,
    graph: &RelationalGraph,
    table: &NodeTable,
    center: usize,
) -> NodeInfluence {
    let (mut i_f, mut i_b) = (0.0, 0.0);
    for j in graph.union_neighbors(center) {
        let g = grads.get(&j).copied().unwrap_or(0.0);
        if table.labels()[j] == FRAUD {
            i_f += g;
        } else {
            i_b += g;
        }
    }
    NodeInfluence {
        node: center,
        i_f,
        i_b,
        diff: i_f - i_b,
    }
}

/// `(I_f, I_b)` for a fraud `center`: summed influence of its fraud and
/// benign neighbors (union over relations).
pub fn influence(
    model: &PmpModel,
    graph: &RelationalGraph,
    table: &NodeTable,
    center: usize,
) -> Result<(f64, f64)> {
    if center >= graph.num_nodes() {
        return Err(Error::invalid(format!("node {center} out of range")));
    }
    if table.labels()[center] != FRAUD {
        return Err(Error::invalid(format!("node {center} is not a fraud node")));
    }
    if graph.union_neighbors(center).is_empty() {
        return Err(Error::invalid(format!("node {center} has no neighbors")));
    }
    let partition = PartitionIndex::build(graph, table);
    let grads = input_gradients(model, graph, &partition, table.features(), center)?;
    let r = split_influence(&grads, graph, table, center);
    Ok((r.i_f, r.i_b))
}

/// Influence of every fraud node in `split` (all nodes if `None`), with
/// `num_bins` equal-width bins over the observed `I_f − I_b` range.
/// Isolated fraud nodes are reported with zero influence.
pub fn influence_histogram(
    model: &PmpModel,
    graph: &RelationalGraph,
    table: &NodeTable,
    split: Option<Split>,
    num_bins: usize,
) -> Result<InfluenceReport> {
    if num_bins == 0 {
        return Err(Error::invalid("num_bins must be >= 1"));
    }
    let partition = PartitionIndex::build(graph, table);
    let mut nodes = Vec::new();
    for i in 0..graph.num_nodes() {
        if table.labels()[i] != FRAUD || split.is_some_and(|s| table.splits()[i] != s) {
            continue;
        }
        let grads = if graph.union_neighbors(i).is_empty() {
            HashMap::new()
        } else {
            input_gradients(model, graph, &partition, table.features(), i)?
        };
        nodes.push(split_influence(&grads, graph, table, i));
    }
    let bins = histogram(nodes.iter().map(|n| n.diff), num_bins);
    Ok(InfluenceReport {
        reduction: REDUCTION,
        nodes,
        bins,
    })
}

fn histogram(values: impl Iterator<Item = f64> + Clone, num_bins: usize) -> Vec<HistBin> {
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return Vec::new();
    }
    let width = if hi > lo {
        (hi - lo) / num_bins as f64
    } else {
        1.0
    };
    let mut bins: Vec<HistBin> = (0..num_bins)
        .map(|k| HistBin {
            lower: lo + k as f64 * width,
            upper: lo + (k + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        let k = (((v - lo) / width).floor() as usize).min(num_bins - 1);
        bins[k].count += 1;
    }
    bins
}

/// `node,I_f,I_b,diff` rows.
pub fn influence_csv(report: &InfluenceReport, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("node,I_f,I_b,diff\n");
    for n in &report.nodes {
        out.push_str(&format!("{},{},{},{}\n", n.node, n.i_f, n.i_b, n.diff));
    }
    out
}

/// For the linear propagation `H = Â^k X W`, the largest deviation of the
/// engine's Jacobian block `∂H_i/∂X_j` from `(Â^k)_ij · W`.
pub fn influence_linear_check(
    a_hat: &DMatrix<f64>,
    w: &DMatrix<f64>,
    k: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    let n = a_hat.nrows();
    if !a_hat.is_square() || i >= n || j >= n {
        return Err(Error::shape(
            "influence_linear_check",
            "bad adjacency or node index",
        ));
    }
    let (d_in, d_out) = w.shape();
    let to_tensor = |m: &DMatrix<f64>| {
        let data = (0..m.nrows())
            .flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>())
            .collect();
        Tensor::matrix(m.nrows(), m.ncols(), data).expect("shape")
    };
    let mut tape = Tape::new();
    let a = tape.constant(to_tensor(a_hat));
    let x = tape.leaf(Tensor::filled(&[n, d_in], 1.0));
    let wv = tape.constant(to_tensor(w));
    let mut h = x;
    for _ in 0..k {
        h = tape.matmul(a, h)?;
    }
    let h = tape.matmul(h, wv)?;
    let power = a_hat.pow(k as u32);
    let mut residual: f64 = 0.0;
    for c in 0..d_out {
        let mut seed = Tensor::zeros(&[n, d_out]);
        seed.set(i, c, 1.0);
        let grads = tape.backward_with_seed(h, seed)?;
        let g = grads.get_or_zeros(x, &[n, d_in]);
        for p in 0..d_in {
            residual = residual.max((g.get(j, p) - power[(i, j)] * w[(p, c)]).abs());
        }
    }
    Ok(residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::spectral::{normalized_adjacency, DENSE_CAP};
    use crate::graph::RelationSel;
    use crate::layer::LayerVariant;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_nodes(labels: Vec<u8>, features: Vec<f64>) -> (RelationalGraph, NodeTable) {
        let g = RelationalGraph::from_edges(2, &[vec![(0, 1)]]).unwrap();
        let t = NodeTable::new(
            Tensor::matrix(2, 1, features).unwrap(),
            labels,
            vec![Split::Train; 2],
        )
        .unwrap();
        (g, t)
    }

    #[test]
    fn head_bias_only_gives_zero_influence() {
        let (g, t) = two_nodes(vec![1, 1], vec![0.3, -0.7]);
        let mut model = PmpModel::zeroed(ModelConfig::new(1, 2, 1, 1)).unwrap();
        model.head_b = Tensor::vector(vec![1.3]);
        assert_eq!(influence(&model, &g, &t, 0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn two_node_chain_rule() {
        // Center 0 (fraud), neighbor 1 (train fraud), d = d' = 1, no root
        // generators. Pre-activation hidden h = x0·s + x1·m with readout r,
        // head v: Z = σ(v·relu(r·h) + c); dZ/dx1 = Z(1-Z)·v·r·m when r·h > 0.
        let (g, t) = two_nodes(vec![1, 1], vec![0.5, 2.0]);
        let mut config = ModelConfig::new(1, 1, 1, 1);
        config.variant = LayerVariant::new(true, false, false).unwrap();
        let mut model = PmpModel::zeroed(config).unwrap();
        let (s, m, r, v, c) = (0.4, 1.5, 0.8, -1.2, 0.1);
        model.layers[0][0].w_self = Tensor::matrix(1, 1, vec![s]).unwrap();
        model.layers[0][0].m_fr = Tensor::matrix(1, 1, vec![m]).unwrap();
        model.readout_w = Tensor::matrix(1, 1, vec![r]).unwrap();
        model.head_w = Tensor::matrix(1, 1, vec![v]).unwrap();
        model.head_b = Tensor::vector(vec![c]);
        let h = 0.5 * s + 2.0 * m;
        let z = crate::ndiff::sigmoid(v * r * h + c);
        let expected = z * (1.0 - z) * v * r * m;
        let (i_f, i_b) = influence(&model, &g, &t, 0).unwrap();
        assert!((i_f - expected).abs() < 1e-14);
        assert_eq!(i_b, 0.0);
    }

    #[test]
    fn influence_errors() {
        let (g, t) = two_nodes(vec![0, 1], vec![0.0, 0.0]);
        let model = PmpModel::new(ModelConfig::new(1, 2, 1, 1), 0).unwrap();
        assert!(influence(&model, &g, &t, 0).is_err());
        let g3 = RelationalGraph::from_edges(3, &[vec![(0, 1)]]).unwrap();
        let t3 =
            NodeTable::new(Tensor::zeros(&[3, 1]), vec![0, 0, 1], vec![Split::Train; 3]).unwrap();
        assert!(influence(&model, &g3, &t3, 2).is_err());
    }

    #[test]
    fn histogram_covers_every_fraud_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let edges: Vec<(usize, usize)> = (0..80)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let g = RelationalGraph::from_edges(n, &[edges]).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 0)).collect();
        let feats = Tensor::matrix(
            n,
            2,
            (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let t = NodeTable::new(feats, labels, vec![Split::Train; n]).unwrap();
        let model = PmpModel::new(ModelConfig::new(2, 3, 1, 1), 1).unwrap();
        let r = influence_histogram(&model, &g, &t, None, 5).unwrap();
        assert_eq!(r.nodes.len(), 10);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 10);
        let csv = influence_csv(&r, None);
        assert_eq!(csv.lines().count(), 11);

        let none =
            NodeTable::new(Tensor::zeros(&[n, 2]), vec![0; n], vec![Split::Train; n]).unwrap();
        let r = influence_histogram(&model, &g, &none, None, 5).unwrap();
        assert!(r.nodes.is_empty() && r.bins.is_empty());
    }

    #[test]
    fn linear_jacobian_blocks() {
        let g = RelationalGraph::from_edges(2, &[vec![(0, 1)]]).unwrap();
        let a = normalized_adjacency(&g, RelationSel::Union, DENSE_CAP).unwrap();
        assert_eq!(a[(0, 1)], 1.0);
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        for k in 0..=4 {
            for (i, j) in [(0, 0), (0, 1), (1, 0)] {
                assert!(influence_linear_check(&a, &w, k, i, j).unwrap() < 1e-12);
            }
        }
    }
}
