//! On-disk bundle directory:
//!
//! - `meta.json`: `{"num_nodes":N,"num_relations":R,"feature_dim":d}`
//! - `edges_r<k>.csv`: header `src,dst`, one undirected edge per row
//! - `features.csv` (N rows of d reals, no header) or `features.f32`
//!   (row-major little-endian f32, exactly N*d values)
//! - `labels.csv`: header `node,label`
//! - `splits.csv`: header `node,split`, split in {train,val,test}
//!
//! Lines starting with `#` in CSV files are ignored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NodeTable, RelationalGraph, Split};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub num_nodes: usize,
    pub num_relations: usize,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(Error::bundle(path, "missing file"));
    }
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::bundle(path, e.to_string()))
}

fn check_header(rdr: &mut csv::Reader<fs::File>, path: &Path, expected: [&str; 2]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::bundle(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::bundle(
            path,
            format!("expected header '{}'", expected.join(",")),
        ));
    }
    Ok(())
}

fn parse_index(path: &Path, line: usize, field: &str, n: usize) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| Error::bundle(path, format!("line {line}: bad node index '{field}'")))?;
    if v >= n {
        return Err(Error::bundle(
            path,
            format!("line {line}: node index {v} out of range for {n} nodes"),
        ));
    }
    Ok(v)
}

fn read_pairs(path: &Path, expected: [&str; 2]) -> Result<Vec<(usize, String, String)>> {
    let mut rdr = reader(path, true)?;
    check_header(&mut rdr, path, expected)?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::bundle(path, e.to_string()))?;
        let line = k + 2;
        if rec.len() != 2 {
            return Err(Error::bundle(
                path,
                format!("line {line}: expected 2 fields"),
            ));
        }
        out.push((line, rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// Reads a per-node column file and returns one value per node.
fn read_node_column<T>(
    path: &Path,
    header: [&str; 2],
    n: usize,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let rows = read_pairs(path, header)?;
    if rows.len() != n {
        return Err(Error::bundle(
            path,
            format!("row-count mismatch: {} rows for {n} nodes", rows.len()),
        ));
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for (line, node, value) in rows {
        let i = parse_index(path, line, &node, n)?;
        let v = parse(&value).map_err(|m| Error::bundle(path, format!("line {line}: {m}")))?;
        if out[i].replace(v).is_some() {
            return Err(Error::bundle(
                path,
                format!("line {line}: duplicate node {i}"),
            ));
        }
    }
    Ok(out
        .into_iter()
        .map(|v| v.expect("all nodes present"))
        .collect())
}

fn read_features(dir: &Path, n: usize, d: usize) -> Result<Tensor> {
    let csv_path = dir.join("features.csv");
    let bin_path = dir.join("features.f32");
    let data = if csv_path.exists() {
        let mut rdr = reader(&csv_path, false)?;
        let mut data = Vec::with_capacity(n * d);
        let mut rows = 0;
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::bundle(&csv_path, e.to_string()))?;
            if rec.len() != d {
                return Err(Error::bundle(
                    &csv_path,
                    format!("line {}: {} values, expected {d}", k + 1, rec.len()),
                ));
            }
            for field in rec.iter() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::bundle(&csv_path, format!("line {}: bad real '{field}'", k + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::bundle(
                        &csv_path,
                        format!("line {}: non-finite feature", k + 1),
                    ));
                }
                data.push(v);
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::bundle(
                &csv_path,
                format!("row-count mismatch: {rows} feature rows for {n} nodes"),
            ));
        }
        data
    } else if bin_path.exists() {
        let raw = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if raw.len() != n * d * 4 {
            return Err(Error::bundle(
                &bin_path,
                format!(
                    "row-count mismatch: {} bytes, expected {}",
                    raw.len(),
                    n * d * 4
                ),
            ));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::bundle(
                &bin_path,
                format!("non-finite feature at row {}", k / d.max(1)),
            ));
        }
        data
    } else {
        return Err(Error::bundle(
            &csv_path,
            "missing file (no features.csv or features.f32)",
        ));
    };
    Tensor::matrix(n, d, data)
}

pub fn load_bundle(dir: &Path) -> Result<(RelationalGraph, NodeTable)> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(|_| Error::bundle(&meta_path, "missing file"))?;
    let meta: BundleMeta =
        serde_json::from_slice(&raw).map_err(|e| Error::bundle(&meta_path, e.to_string()))?;
    let n = meta.num_nodes;

    let mut relations = Vec::with_capacity(meta.num_relations);
    for r in 0..meta.num_relations {
        let path = dir.join(format!("edges_r{r}.csv"));
        let edges = read_pairs(&path, ["src", "dst"])?
            .into_iter()
            .map(|(line, s, d)| {
                Ok((
                    parse_index(&path, line, &s, n)?,
                    parse_index(&path, line, &d, n)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        relations.push(edges);
    }
    let graph = RelationalGraph::from_edges(n, &relations)?;

    let features = read_features(dir, n, meta.feature_dim)?;
    let labels = read_node_column(&dir.join("labels.csv"), ["node", "label"], n, |s| match s {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        other => Err(format!("label '{other}' outside {{0,1}}")),
    })?;
    let splits = read_node_column(&dir.join("splits.csv"), ["node", "split"], n, |s| {
        s.parse::<Split>().map_err(|e| e.to_string())
    })?;
    let table =
        NodeTable::new(features, labels, splits).map_err(|e| Error::bundle(dir, e.to_string()))?;
    table
        .check_trainable()
        .map_err(|e| Error::bundle(dir.join("splits.csv"), e.to_string()))?;
    Ok((graph, table))
}

struct Out {
    path: PathBuf,
    buf: Vec<u8>,
}

impl Out {
    fn new(dir: &Path, name: &str, comment: Option<&str>) -> Self {
        let mut buf = Vec::new();
        if let Some(c) = comment {
            let _ = writeln!(buf, "# {c}");
        }
        Self {
            path: dir.join(name),
            buf,
        }
    }

    fn finish(self) -> Result<()> {
        fs::write(&self.path, self.buf).map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes a bundle directory. `comment` (if any) is emitted as a leading `#`
/// line in every CSV file; `provenance` is stored in `meta.json`.
pub fn write_bundle(
    dir: &Path,
    graph: &RelationalGraph,
    table: &NodeTable,
    comment: Option<&str>,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta {
        num_nodes: graph.num_nodes(),
        num_relations: graph.num_relations(),
        feature_dim: table.feature_dim(),
        provenance,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;

    for r in 0..graph.num_relations() {
        let mut out = Out::new(dir, &format!("edges_r{r}.csv"), comment);
        out.buf.extend_from_slice(b"src,dst\n");
        for (u, v) in graph.edge_list(r) {
            let _ = writeln!(out.buf, "{u},{v}");
        }
        out.finish()?;
    }

    let mut out = Out::new(dir, "features.csv", comment);
    for i in 0..table.num_nodes() {
        let row: Vec<String> = table
            .features()
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(out.buf, "{}", row.join(","));
    }
    out.finish()?;

    let mut out = Out::new(dir, "labels.csv", comment);
    out.buf.extend_from_slice(b"node,label\n");
    for (i, l) in table.labels().iter().enumerate() {
        let _ = writeln!(out.buf, "{i},{l}");
    }
    out.finish()?;

    let mut out = Out::new(dir, "splits.csv", comment);
    out.buf.extend_from_slice(b"node,split\n");
    for (i, s) in table.splits().iter().enumerate() {
        let _ = writeln!(out.buf, "{i},{s}");
    }
    out.finish()
}
