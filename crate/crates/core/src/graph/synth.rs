use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{RelationalGraph, Split, FRAUD};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Barabási–Albert graph with exactly `round(n * fraud_fraction)` fraud labels.
///
/// Seeded with a clique on `m_attach + 1` nodes; every later node attaches to
/// `m_attach` distinct existing nodes with probability proportional to degree.
/// The edge count is `C(m+1, 2) + m * (n - m - 1)`.
pub fn generate_ba_graph(
    n: usize,
    m_attach: usize,
    fraud_fraction: f64,
    seed: u64,
) -> Result<(RelationalGraph, Vec<u8>)> {
    if m_attach < 1 || n <= m_attach {
        return Err(Error::invalid(format!(
            "need n > m_attach >= 1, got n={n}, m_attach={m_attach}"
        )));
    }
    if !(fraud_fraction > 0.0 && fraud_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "fraud_fraction {fraud_fraction} not in (0,1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(m_attach * n);
    // every edge endpoint, so a uniform draw is degree-proportional
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * m_attach * n);
    for u in 0..=m_attach {
        for v in u + 1..=m_attach {
            edges.push((u, v));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    let mut targets = Vec::with_capacity(m_attach);
    for v in m_attach + 1..n {
        targets.clear();
        while targets.len() < m_attach {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, v));
            endpoints.push(t);
            endpoints.push(v);
        }
    }
    let graph = RelationalGraph::from_edges(n, &[edges])?;

    let num_fraud = (n as f64 * fraud_fraction).round() as usize;
    let mut labels = vec![0u8; n];
    for i in index::sample(&mut rng, n, num_fraud) {
        labels[i] = FRAUD;
    }
    Ok((graph, labels))
}

/// Adds `per_node` extra edges from every fraud node to uniformly chosen other
/// fraud nodes in relation `r`, producing fraud rings inside benign-majority
/// neighborhoods.
pub fn plant_fraud_links(
    graph: &RelationalGraph,
    labels: &[u8],
    r: usize,
    per_node: usize,
    seed: u64,
) -> Result<RelationalGraph> {
    let fraud: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == FRAUD).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut relations: Vec<Vec<(usize, usize)>> = (0..graph.num_relations())
        .map(|k| graph.edge_list(k))
        .collect();
    graph.relation(r)?;
    if fraud.len() >= 2 {
        for &u in &fraud {
            for _ in 0..per_node {
                let v = loop {
                    let v = *fraud.choose(&mut rng).expect("non-empty");
                    if v != u {
                        break v;
                    }
                };
                relations[r].push((u, v));
            }
        }
    }
    RelationalGraph::from_edges(graph.num_nodes(), &relations)
}

/// Class-conditional Gaussian features: every entry of a fraud row is drawn
/// from `N(mu_fraud, sigma^2)`, benign rows from `N(mu_benign, sigma^2)`.
pub fn generate_features(
    labels: &[u8],
    mu_benign: f64,
    mu_fraud: f64,
    sigma: f64,
    d: usize,
    seed: u64,
) -> Result<Tensor> {
    if d == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "need d >= 1 and sigma > 0, got d={d}, sigma={sigma}"
        )));
    }
    let benign = Normal::new(mu_benign, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let fraud = Normal::new(mu_fraud, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(labels.len() * d);
    for &l in labels {
        let dist = if l == FRAUD { &fraud } else { &benign };
        data.extend((0..d).map(|_| dist.sample(&mut rng)));
    }
    Tensor::matrix(labels.len(), d, data)
}

/// Largest-remainder apportionment of `total` by non-negative `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Random train/val/test assignment with split sizes apportioned from `ratios`.
///
/// With `stratify_labels`, each split's fraud count is the largest-remainder
/// rounding of its exact share, so per-split fraud counts are within one node
/// of exact stratification.
pub fn make_splits(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
    stratify_labels: Option<&[u8]>,
) -> Result<Vec<Split>> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let sizes = apportion(n, &r);
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; n];
    match stratify_labels {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut it = order.into_iter();
            for (s, &size) in splits.iter().zip(&sizes) {
                for i in it.by_ref().take(size) {
                    out[i] = *s;
                }
            }
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::invalid("stratify labels length differs from n"));
            }
            let mut fraud: Vec<usize> = (0..n).filter(|&i| labels[i] == FRAUD).collect();
            let mut benign: Vec<usize> = (0..n).filter(|&i| labels[i] != FRAUD).collect();
            if fraud.is_empty() || benign.is_empty() {
                return Err(Error::invalid("stratified split needs both classes"));
            }
            fraud.shuffle(&mut rng);
            benign.shuffle(&mut rng);
            let size_weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
            let fraud_counts = apportion(fraud.len(), &size_weights);
            let mut f_it = fraud.into_iter();
            let mut b_it = benign.into_iter();
            for ((s, &size), &nf) in splits.iter().zip(&sizes).zip(&fraud_counts) {
                for i in f_it.by_ref().take(nf) {
                    out[i] = *s;
                }
                for i in b_it.by_ref().take(size - nf) {
                    out[i] = *s;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count(splits: &[Split], s: Split) -> usize {
        splits.iter().filter(|&&x| x == s).count()
    }

    #[test]
    fn ba_500_has_50_fraud() {
        let (g, labels) = generate_ba_graph(500, 5, 0.1, 1).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == FRAUD).count(), 50);
        assert_eq!(g.num_nodes(), 500);
    }

    #[test]
    fn ba_m1_is_a_tree() {
        let (g, _) = generate_ba_graph(5, 1, 0.2, 3).unwrap();
        assert_eq!(g.num_edges(0), 4);
    }

    #[test]
    fn ba_edge_count_under_clique_seed() {
        // counted from the generator: C(6,2) + 5 * (500 - 6) = 15 + 2470
        let (g, _) = generate_ba_graph(500, 5, 0.1, 9).unwrap();
        assert_eq!(g.num_edges(0), 2485);
    }

    #[test]
    fn ba_is_connected() {
        let (g, _) = generate_ba_graph(300, 2, 0.1, 4).unwrap();
        let mut seen = vec![false; 300];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in g.neighbors(0, u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn ba_rejects_bad_params() {
        assert!(generate_ba_graph(5, 5, 0.1, 0).is_err());
        assert!(generate_ba_graph(5, 0, 0.1, 0).is_err());
        assert!(generate_ba_graph(5, 1, 1.0, 0).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate_ba_graph(200, 3, 0.1, 42).unwrap();
        let b = generate_ba_graph(200, 3, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let fa = generate_features(&a.1, 1.0, 5.0, 1.0, 8, 7).unwrap();
        let fb = generate_features(&b.1, 1.0, 5.0, 1.0, 8, 7).unwrap();
        assert_eq!(fa, fb);
        let one = generate_features(&[1], 1.0, 5.0, 1.0, 1, 11).unwrap();
        assert_eq!(one, generate_features(&[1], 1.0, 5.0, 1.0, 1, 11).unwrap());
    }

    #[test]
    fn feature_class_means() {
        let (_, labels) = generate_ba_graph(500, 5, 0.1, 5).unwrap();
        let d = 8;
        let x = generate_features(&labels, 1.0, 5.0, 1.0, d, 6).unwrap();
        for (class, mu) in [(0u8, 1.0), (1u8, 5.0)] {
            let rows: Vec<usize> = (0..500).filter(|&i| labels[i] == class).collect();
            let total: f64 = rows.iter().flat_map(|&i| x.row(i).iter()).sum();
            let count = (rows.len() * d) as f64;
            let mean = total / count;
            assert!(
                (mean - mu).abs() <= 3.0 / count.sqrt(),
                "class {class} mean {mean}"
            );
        }
    }

    #[test]
    fn feature_params_validated() {
        assert!(generate_features(&[0], 0.0, 1.0, 0.0, 1, 0).is_err());
        assert!(generate_features(&[0], 0.0, 1.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = make_splits(10, (0.4, 0.2, 0.4), 1, None).unwrap();
        assert_eq!(
            (
                count(&s, Split::Train),
                count(&s, Split::Val),
                count(&s, Split::Test)
            ),
            (4, 2, 4)
        );
        let s = make_splits(7, (1.0, 0.0, 0.0), 1, None).unwrap();
        assert_eq!(count(&s, Split::Train), 7);
        let labels: Vec<u8> = (0..1000).map(|i| u8::from(i % 10 == 0)).collect();
        let s = make_splits(1000, (0.01, 0.10, 0.89), 2, Some(&labels)).unwrap();
        assert_eq!(
            (
                count(&s, Split::Train),
                count(&s, Split::Val),
                count(&s, Split::Test)
            ),
            (10, 100, 890)
        );
    }

    #[test]
    fn split_ratios_validated() {
        assert!(make_splits(10, (0.5, 0.5, 0.5), 0, None).is_err());
        assert!(make_splits(10, (1.2, -0.2, 0.0), 0, None).is_err());
        assert!(make_splits(3, (0.4, 0.2, 0.4), 0, Some(&[0, 0, 0])).is_err());
    }

    #[test]
    fn planted_links_stay_inside_fraud() {
        let (g, labels) = generate_ba_graph(200, 3, 0.1, 8).unwrap();
        let h = plant_fraud_links(&g, &labels, 0, 2, 9).unwrap();
        let added = h.num_edges(0) - g.num_edges(0);
        assert!(added > 0 && added <= 2 * 20);
        for (u, v) in h.edge_list(0) {
            if !g.neighbors(0, u).contains(&v) {
                assert_eq!((labels[u], labels[v]), (FRAUD, FRAUD));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stratification_within_one_node(
            n in 20usize..400,
            fraud_pct in 2u32..50,
            seed in any::<u64>(),
            a in 1u32..8, b in 0u32..4,
        ) {
            let labels: Vec<u8> = (0..n).map(|i| u8::from((i as u32 * 100 / n as u32) < fraud_pct)).collect();
            prop_assume!(labels.contains(&1) && labels.contains(&0));
            let total = (a + b + 4) as f64;
            let ratios = (a as f64 / total, b as f64 / total, 4.0 / total);
            let splits = make_splits(n, ratios, seed, Some(&labels)).unwrap();
            let p_all = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
            for s in [Split::Train, Split::Val, Split::Test] {
                let members: Vec<usize> = (0..n).filter(|&i| splits[i] == s).collect();
                if members.is_empty() { continue; }
                let f = members.iter().filter(|&&i| labels[i] == 1).count() as f64;
                let size = members.len() as f64;
                prop_assert!((f / size - p_all).abs() <= 1.0 / size + 1e-12);
            }
        }
    }
}
