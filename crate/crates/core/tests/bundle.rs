use std::fs;
use std::path::Path;

use pmp_core::graph::{load_bundle, write_bundle, NodeTable, RelationalGraph, Split};
use pmp_core::ndiff::Tensor;
use pmp_core::ErrorKind;
use proptest::prelude::*;

fn write_tiny(dir: &Path, feature_rows: usize) {
    fs::write(
        dir.join("meta.json"),
        r#"{"num_nodes":3,"num_relations":1,"feature_dim":2}"#,
    )
    .unwrap();
    fs::write(
        dir.join("edges_r0.csv"),
        "# written by hand\nsrc,dst\n0,1\n",
    )
    .unwrap();
    let rows: String = (0..feature_rows).map(|i| format!("{i}.0,0.5\n")).collect();
    fs::write(dir.join("features.csv"), rows).unwrap();
    fs::write(dir.join("labels.csv"), "node,label\n0,1\n1,0\n2,0\n").unwrap();
    fs::write(
        dir.join("splits.csv"),
        "node,split\n0,train\n1,train\n2,test\n",
    )
    .unwrap();
}

#[test]
fn tiny_bundle_degrees() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path(), 3);
    let (graph, table) = load_bundle(tmp.path()).unwrap();
    assert_eq!(graph.num_relations(), 1);
    assert_eq!(graph.degrees(0), vec![1, 1, 0]);
    assert_eq!(table.labels(), &[1, 0, 0]);
    assert_eq!(table.splits(), &[Split::Train, Split::Train, Split::Test]);
    assert_eq!(table.features().row(2), &[2.0, 0.5]);
}

#[test]
fn extra_feature_row_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path(), 4);
    let err = load_bundle(tmp.path()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Validation);
    let msg = err.to_string();
    assert!(msg.contains("row-count mismatch"), "{msg}");
    assert!(msg.contains("features.csv"), "{msg}");
}

#[test]
fn errors_name_the_offending_file() {
    let cases: [(&str, &str); 4] = [
        ("labels.csv", "node,label\n0,1\n1,7\n2,0\n"),
        ("splits.csv", "node,split\n0,train\n1,bogus\n2,test\n"),
        ("edges_r0.csv", "src,dst\n0,3\n"),
        ("meta.json", "{not json"),
    ];
    for (file, body) in cases {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny(tmp.path(), 3);
        fs::write(tmp.path().join(file), body).unwrap();
        let msg = load_bundle(tmp.path()).unwrap_err().to_string();
        assert!(msg.contains(file), "{file}: {msg}");
    }
}

#[test]
fn missing_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path(), 3);
    fs::remove_file(tmp.path().join("labels.csv")).unwrap();
    let msg = load_bundle(tmp.path()).unwrap_err().to_string();
    assert!(msg.contains("labels.csv"), "{msg}");
}

#[test]
fn binary_features_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path(), 3);
    fs::remove_file(tmp.path().join("features.csv")).unwrap();
    let values = [0.0f32, 0.5, 1.0, 0.5, 2.0, 0.5];
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(tmp.path().join("features.f32"), &bytes).unwrap();
    let (_, table) = load_bundle(tmp.path()).unwrap();
    assert_eq!(table.features().row(1), &[1.0, 0.5]);

    fs::write(tmp.path().join("features.f32"), &bytes[..20]).unwrap();
    let msg = load_bundle(tmp.path()).unwrap_err().to_string();
    assert!(
        msg.contains("row-count mismatch") && msg.contains("features.f32"),
        "{msg}"
    );
}

fn instance() -> impl Strategy<Value = (RelationalGraph, NodeTable)> {
    (2usize..12, 1usize..4, 1usize..4).prop_flat_map(|(n, r, d)| {
        let edges = prop::collection::vec(prop::collection::vec((0..n, 0..n), 0..20), r);
        let feats = prop::collection::vec(-1e3f64..1e3, n * d);
        let labels = prop::collection::vec(0u8..2, n);
        let splits = prop::collection::vec(0u8..3, n);
        (edges, feats, labels, splits).prop_map(move |(edges, feats, mut labels, mut splits)| {
            // loading insists on both classes in the train split
            labels[0] = 1;
            labels[1] = 0;
            splits[0] = 0;
            splits[1] = 0;
            let edges: Vec<Vec<(usize, usize)>> = edges
                .into_iter()
                .map(|es| es.into_iter().filter(|(u, v)| u != v).collect())
                .collect();
            let graph = RelationalGraph::from_edges(n, &edges).unwrap();
            let splits = splits
                .into_iter()
                .map(|s| [Split::Train, Split::Val, Split::Test][s as usize])
                .collect();
            let table =
                NodeTable::new(Tensor::matrix(n, d, feats).unwrap(), labels, splits).unwrap();
            (graph, table)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_load_roundtrips((graph, table) in instance(), comment in proptest::option::of("[a-z ]{0,12}")) {
        let tmp = tempfile::tempdir().unwrap();
        write_bundle(tmp.path(), &graph, &table, comment.as_deref(), None).unwrap();
        let (g2, t2) = load_bundle(tmp.path()).unwrap();
        prop_assert_eq!(g2, graph);
        prop_assert_eq!(t2, table);
    }
}
