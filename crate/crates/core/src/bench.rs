//! Per-epoch wall time against edge count on synthetic preferential-attachment graphs.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{generate_ba_graph, generate_features, make_splits, NodeTable};
use crate::model::{ModelConfig, PmpModel};
use crate::training::{train, TrainConfig};

/// Attachment count of the benchmark graphs; `N ≈ |E| / BENCH_M`.
pub const BENCH_M: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub target_edges: usize,
    pub nodes: usize,
    pub edges: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub points: Vec<BenchPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope·x`; returns `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(
            "linear fit needs at least two paired points",
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("linear fit needs distinct x values"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok((slope, intercept, r2))
}

/// Times one training epoch (best of `repeats`) for each target edge count.
pub fn bench_epochs(
    edge_counts: &[usize],
    feature_dim: usize,
    hidden_dim: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if edge_counts.len() < 2 || repeats == 0 {
        return Err(Error::invalid("bench needs >= 2 sizes and >= 1 repeat"));
    }
    let mut points = Vec::with_capacity(edge_counts.len());
    for &target in edge_counts {
        let n = (target / BENCH_M).max(BENCH_M + 2);
        let (graph, labels) = generate_ba_graph(n, BENCH_M, 0.1, seed)?;
        let features = generate_features(&labels, 1.0, 5.0, 1.0, feature_dim, seed)?;
        let splits = make_splits(n, (0.4, 0.2, 0.4), seed, Some(&labels))?;
        let table = NodeTable::new(features, labels, splits)?;
        let model = PmpModel::new(ModelConfig::new(feature_dim, hidden_dim, 1, 1), seed)?;
        let config = TrainConfig {
            max_epochs: 1,
            batch_size: 512,
            seed,
            ..Default::default()
        };
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            train(&model, &graph, &table, &config)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        points.push(BenchPoint {
            target_edges: target,
            nodes: n,
            edges: graph.num_edges(0),
            seconds: best,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.edges as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    let (slope, intercept, r_squared) = linear_fit(&x, &y)?;
    Ok(BenchReport {
        feature_dim,
        hidden_dim,
        points,
        slope,
        intercept,
        r_squared,
    })
}
