//! `pmp` command-line front end.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print one JSON
//! line `{"error": kind, "message": ...}` on stderr and exit with 2
//! (validation), 3 (numeric) or 4 (resource cap).

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{self, spectral};
use crate::bench;
use crate::error::{Error, Result};
use crate::graph::{
    self, generate_ba_graph, generate_features, homophily_score, load_bundle, make_splits,
    neighborhood_label_ratio, plant_fraud_links, write_bundle, NodeTable, RelationSel,
    RelationalGraph, Split,
};
use crate::model::PmpModel;
use crate::training::{evaluate, history_csv, train};
pub use config::{Provenance, RunConfig, VERSION};

const CHECKPOINT_STEM: &str = "model";

#[derive(Debug, Parser)]
#[command(
    name = "pmp",
    version,
    about = "Partitioning message passing for graph fraud detection"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a bundle and report its shape, or the first problem found.
    Validate { bundle: PathBuf },
    /// Generate a synthetic preferential-attachment bundle.
    Synth(SynthArgs),
    /// Train a model on a bundle and write a run directory.
    Train(TrainArgs),
    /// Metrics of a trained run on one split.
    Eval {
        run: PathBuf,
        #[arg(default_value = "test")]
        split: Split,
        /// Use this bundle instead of the one recorded in the run.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Neighbor influence (I_f, I_b) for every fraud node of a trained run.
    Influence {
        run: PathBuf,
        /// Restrict to fraud nodes of one split.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Dense spectral checks of the partitioned aggregation.
    Spectral(SpectralArgs),
    /// Class-imbalance-corrected homophily per relation and on the union.
    Homophily {
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of fraud/benign labeled-neighbor ratios over train nodes.
    RatioHist(RatioArgs),
    /// Per-epoch wall time against edge count.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Not part of the hashed config: the same instance written elsewhere
    /// keeps its provenance.
    #[arg(long)]
    #[serde(default, skip_serializing)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub nodes: usize,
    /// Edges added per new node.
    #[arg(long, default_value_t = 5)]
    pub attach: usize,
    #[arg(long, default_value_t = 0.1)]
    pub fraud_fraction: f64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mu_benign: f64,
    #[arg(long, default_value_t = 5.0)]
    pub mu_fraud: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub relations: usize,
    #[arg(long, default_value_t = 0.4)]
    pub train: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val: f64,
    #[arg(long, default_value_t = 0.4)]
    pub test: f64,
    /// Extra fraud-fraud edges per fraud node in every relation.
    #[arg(long, default_value_t = 0)]
    pub plant_fraud_links: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    bundle: PathBuf,
    /// JSON run config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    fanout_cap: Option<usize>,
    #[arg(long)]
    pos_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shared-weight baseline (implies the two flags below).
    #[arg(long)]
    no_partition: bool,
    #[arg(long)]
    no_adaptive_combination: bool,
    #[arg(long)]
    no_root_specific: bool,
    /// Single-threaded, bit-reproducible numerics (always the case in this build).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SpectralArgs {
    /// Bundle to analyse; without it a synthetic graph is generated.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub attach: usize,
    #[arg(long, default_value_t = 0.1)]
    pub fraud_fraction: f64,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Output width of the random W_fr / W_be.
    #[arg(long, default_value_t = 4)]
    pub out_dim: usize,
    /// Relation index or `union`.
    #[arg(long, default_value = "0", value_parser = parse_relation)]
    #[serde(with = "relation_serde")]
    pub relation: RelationSel,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = spectral::DENSE_CAP)]
    pub cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RatioArgs {
    pub bundle: PathBuf,
    #[arg(long, default_value = "union", value_parser = parse_relation)]
    #[serde(with = "relation_serde")]
    pub relation: RelationSel,
    #[arg(long, default_value_t = 0.1)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Target edge counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10_000, 100_000, 1_000_000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_relation(s: &str) -> std::result::Result<RelationSel, String> {
    if s == "union" {
        return Ok(RelationSel::Union);
    }
    s.parse::<usize>()
        .map(RelationSel::Relation)
        .map_err(|_| format!("expected a relation index or 'union', got '{s}'"))
}

mod relation_serde {
    use super::RelationSel;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &RelationSel, s: S) -> Result<S::Ok, S::Error> {
        match v {
            RelationSel::Union => s.serialize_str("union"),
            RelationSel::Relation(r) => s.serialize_str(&r.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RelationSel, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_relation(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
                    2
                } else {
                    0
                };
            }
            let message = e.to_string();
            let text: Vec<&str> = message
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let text = text.join(" ");
            eprintln!(
                "{}",
                json!({ "error": "validation", "message": text.trim_start_matches("error: ") })
            );
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            // a closed stdout (e.g. piped into `head`) is not a failure
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(
                stdout,
                "{}",
                serde_json::to_string_pretty(&summary).expect("json")
            );
            0
        }
        Err(e) => {
            let kind = e.kind();
            eprintln!(
                "{}",
                json!({ "error": kind.as_str(), "message": e.to_string() })
            );
            kind.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<Value> {
    match command {
        Command::Validate { bundle } => validate(&bundle),
        Command::Synth(args) => synth(&args),
        Command::Train(args) => train_cmd(&args),
        Command::Eval { run, split, bundle } => eval_cmd(&run, split, bundle.as_deref()),
        Command::Influence {
            run,
            split,
            bins,
            bundle,
        } => influence_cmd(&run, split, bins, bundle.as_deref()),
        Command::Spectral(args) => spectral_cmd(&args),
        Command::Homophily { bundle, out } => homophily_cmd(&bundle, out.as_deref()),
        Command::RatioHist(args) => ratio_cmd(&args),
        Command::Bench(args) => bench_cmd(&args),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn bundle_summary(graph: &RelationalGraph, table: &NodeTable) -> Value {
    let count = |s: Split| table.splits().iter().filter(|&&x| x == s).count();
    json!({
        "num_nodes": graph.num_nodes(),
        "num_relations": graph.num_relations(),
        "edges": (0..graph.num_relations()).map(|r| graph.num_edges(r)).collect::<Vec<_>>(),
        "feature_dim": table.feature_dim(),
        "fraud": table.labels().iter().filter(|&&l| l == graph::FRAUD).count(),
        "splits": { "train": count(Split::Train), "val": count(Split::Val), "test": count(Split::Test) },
    })
}

fn validate(bundle: &Path) -> Result<Value> {
    let (graph, table) = load_bundle(bundle)?;
    let mut v = bundle_summary(&graph, &table);
    v["valid"] = json!(true);
    Ok(v)
}

/// Builds the synthetic graph and node table described by `args`.
pub fn synth_instance(args: &SynthArgs) -> Result<(RelationalGraph, NodeTable)> {
    if args.relations == 0 {
        return Err(Error::invalid("relations must be >= 1"));
    }
    let (first, labels) =
        generate_ba_graph(args.nodes, args.attach, args.fraud_fraction, args.seed)?;
    let mut relations = vec![first.edge_list(0)];
    for r in 1..args.relations {
        let (g, _) = generate_ba_graph(
            args.nodes,
            args.attach,
            args.fraud_fraction,
            args.seed + r as u64,
        )?;
        relations.push(g.edge_list(0));
    }
    let mut graph = RelationalGraph::from_edges(args.nodes, &relations)?;
    if args.plant_fraud_links > 0 {
        for r in 0..args.relations {
            graph = plant_fraud_links(
                &graph,
                &labels,
                r,
                args.plant_fraud_links,
                args.seed ^ (0x9e37 + r as u64),
            )?;
        }
    }
    let features = generate_features(
        &labels,
        args.mu_benign,
        args.mu_fraud,
        args.sigma,
        args.dim,
        args.seed,
    )?;
    let splits = make_splits(
        args.nodes,
        (args.train, args.val, args.test),
        args.seed,
        Some(&labels),
    )?;
    Ok((graph, NodeTable::new(features, labels, splits)?))
}

fn synth(args: &SynthArgs) -> Result<Value> {
    let prov = Provenance::new("synth", args, args.seed)?;
    let (graph, table) = synth_instance(args)?;
    write_bundle(
        &args.out,
        &graph,
        &table,
        Some(&prov.comment()),
        Some(prov.to_value()),
    )?;
    write_json(
        &args.out.join("config.json"),
        &config::stamp(serde_json::to_value(args)?, &prov),
    )?;
    let mut v = bundle_summary(&graph, &table);
    v["bundle"] = json!(args.out);
    Ok(config::stamp(v, &prov))
}

fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    c.bundle = Some(args.bundle.clone());
    let t = &mut c.train;
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.dropout {
        t.dropout_p = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.patience {
        t.patience = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if args.pos_weight.is_some() {
        t.pos_weight = args.pos_weight;
    }
    if let Some(v) = args.hidden_dim {
        c.hidden_dim = v;
    }
    if let Some(v) = args.layers {
        c.num_layers = v;
    }
    if args.fanout_cap.is_some() {
        c.fanout_cap = args.fanout_cap;
    }
    if args.no_partition {
        c.partition = false;
        c.adaptive_combination = false;
        c.root_specific = false;
    }
    if args.no_adaptive_combination {
        c.adaptive_combination = false;
    }
    if args.no_root_specific {
        c.root_specific = false;
    }
    c.deterministic |= args.deterministic;
    c.train.validate()?;
    c.variant()?;
    Ok(c)
}

fn metrics_json(report: &crate::metrics::MetricsReport, split: Split, seed: u64) -> Result<Value> {
    let mut v = serde_json::to_value(report)?;
    v["split"] = json!(split);
    v["seed"] = json!(seed);
    Ok(v)
}

fn train_cmd(args: &TrainArgs) -> Result<Value> {
    let config = resolve_run_config(args)?;
    let prov = Provenance::new("train", &config, config.train.seed)?;
    let (graph, table) = load_bundle(&args.bundle)?;
    let mc = config.model_config(table.feature_dim(), graph.num_relations())?;
    let model = PmpModel::new(mc, config.train.seed)?;
    let outcome = train(&model, &graph, &table, &config.train)?;

    create_dir(&args.out)?;
    write_json(
        &args.out.join("config.json"),
        &config::stamp(serde_json::to_value(&config)?, &prov),
    )?;
    write_file(
        &args.out.join("history.csv"),
        history_csv(&outcome.history, Some(&prov.comment())),
    )?;
    outcome.model.save(&args.out, CHECKPOINT_STEM)?;
    let test = evaluate(&outcome.model, &graph, &table, Split::Test)?;
    let metrics = config::stamp(metrics_json(&test, Split::Test, config.train.seed)?, &prov);
    write_json(&args.out.join("metrics.json"), &metrics)?;
    let summary = json!({
        "run": args.out,
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_auc": outcome.best_val_auc,
        "parameters": outcome.model.num_parameters(),
        "variant": outcome.model.config.variant.name(),
        "test": metrics,
    });
    write_json(
        &args.out.join("summary.json"),
        &config::stamp(summary.clone(), &prov),
    )?;
    Ok(summary)
}

/// Loads a run's config, its bundle (or `bundle_override`) and the best model.
fn load_run(
    run: &Path,
    bundle_override: Option<&Path>,
) -> Result<(RunConfig, RelationalGraph, NodeTable, PmpModel)> {
    let path = run.join("config.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut value: Value =
        serde_json::from_slice(&raw).map_err(|e| Error::bundle(&path, e.to_string()))?;
    if let Value::Object(map) = &mut value {
        map.remove("provenance");
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::bundle(&path, e.to_string()))?;
    let bundle = match bundle_override {
        Some(b) => b.to_path_buf(),
        None => config
            .bundle
            .clone()
            .ok_or_else(|| Error::bundle(&path, "run config records no bundle"))?,
    };
    let (graph, table) = load_bundle(&bundle)?;
    let model = PmpModel::load(run, CHECKPOINT_STEM)?;
    Ok((config, graph, table, model))
}

fn eval_cmd(run: &Path, split: Split, bundle: Option<&Path>) -> Result<Value> {
    let (config, graph, table, model) = load_run(run, bundle)?;
    let prov = Provenance::new(
        "eval",
        &json!({ "run": config, "split": split }),
        config.train.seed,
    )?;
    let report = evaluate(&model, &graph, &table, split)?;
    let v = config::stamp(metrics_json(&report, split, config.train.seed)?, &prov);
    write_json(&run.join(format!("metrics_{split}.json")), &v)?;
    Ok(v)
}

fn influence_cmd(
    run: &Path,
    split: Option<Split>,
    bins: usize,
    bundle: Option<&Path>,
) -> Result<Value> {
    let (config, graph, table, model) = load_run(run, bundle)?;
    let prov = Provenance::new(
        "influence",
        &json!({ "run": config, "split": split, "bins": bins }),
        config.train.seed,
    )?;
    let report = analysis::influence_histogram(&model, &graph, &table, split, bins)?;
    write_file(
        &run.join("influence.csv"),
        analysis::influence_csv(&report, Some(&prov.comment())),
    )?;
    let summary = json!({
        "reduction": report.reduction,
        "fraud_nodes": report.nodes.len(),
        "mean_diff": report.mean_diff(),
        "positive_fraction": if report.nodes.is_empty() { None } else {
            Some(report.nodes.iter().filter(|n| n.diff > 0.0).count() as f64 / report.nodes.len() as f64)
        },
        "bins": report.bins,
    });
    let v = config::stamp(summary, &prov);
    write_json(&run.join("influence.json"), &v)?;
    Ok(v)
}

fn to_dmatrix(t: &crate::ndiff::Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn spectral_cmd(args: &SpectralArgs) -> Result<Value> {
    let prov = Provenance::new("spectral", args, args.seed)?;
    let (graph, table) = match &args.bundle {
        Some(b) => load_bundle(b)?,
        None => {
            let (graph, labels) =
                generate_ba_graph(args.nodes, args.attach, args.fraud_fraction, args.seed)?;
            if graph.num_nodes() > args.cap {
                return Err(Error::CapExceeded {
                    size: graph.num_nodes(),
                    cap: args.cap,
                });
            }
            let features = generate_features(&labels, 1.0, 5.0, 1.0, args.dim, args.seed)?;
            let splits = make_splits(args.nodes, (0.4, 0.2, 0.4), args.seed, Some(&labels))?;
            (graph, NodeTable::new(features, labels, splits)?)
        }
    };
    let d = table.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut random = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let w_fr = random(d, args.out_dim);
    let w_be = random(d, args.out_dim);
    let report = spectral::spatial_spectral_check(
        &graph,
        args.relation,
        table.labels(),
        &table.train_mask(),
        &to_dmatrix(table.features()),
        &w_fr,
        &w_be,
        args.alpha,
        args.cap,
    )?;
    let eig = &report.eigenvalues;
    let summary = json!({
        "nodes": graph.num_nodes(),
        "alpha": report.alpha,
        "lambda_min": eig.first(),
        "lambda_max": eig.last(),
        "reconstruction_error": report.reconstruction_error,
        "orthonormality_error": report.orthonormality_error,
        "mask_identity_error": report.mask_identity_error,
        "mask_loop_error": report.mask_loop_error,
        "spatial_identity_error": report.spatial_identity_error,
    });
    let v = config::stamp(summary, &prov);
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(
            &out.join("config.json"),
            &config::stamp(serde_json::to_value(args)?, &prov),
        )?;
        write_file(
            &out.join("spectral.csv"),
            spectral::spectral_csv(&report, Some(&prov.comment())),
        )?;
        let mut full = v.clone();
        full["eigenvalues"] = json!(report.eigenvalues);
        write_json(&out.join("spectral.json"), &full)?;
    }
    Ok(v)
}

fn homophily_cmd(bundle: &Path, out: Option<&Path>) -> Result<Value> {
    let prov = Provenance::new("homophily", &json!({ "bundle": bundle }), 0)?;
    let (graph, table) = load_bundle(bundle)?;
    let per_relation = (0..graph.num_relations())
        .map(|r| homophily_score(&graph, RelationSel::Relation(r), table.labels()))
        .collect::<Result<Vec<_>>>()?;
    let union = homophily_score(&graph, RelationSel::Union, table.labels())?;
    let v = config::stamp(
        json!({ "per_relation": per_relation, "union": union }),
        &prov,
    );
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("homophily.json"), &v)?;
    }
    Ok(v)
}

fn ratio_cmd(args: &RatioArgs) -> Result<Value> {
    let prov = Provenance::new("ratio-hist", args, 0)?;
    let (graph, table) = load_bundle(&args.bundle)?;
    let h = neighborhood_label_ratio(&graph, &table, args.relation, args.bin_width, args.bins)?;
    let v = config::stamp(
        json!({
            "bins": h.bins,
            "infinite": h.infinite,
            "excluded": h.excluded,
            "counted": h.counted(),
            "fraction_below_one": h.fraction_below(1.0),
        }),
        &prov,
    );
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut csv = format!("# {}\nlower,upper,count\n", prov.comment());
        for b in &h.bins {
            csv.push_str(&format!("{},{},{}\n", b.lower, b.upper, b.count));
        }
        write_file(&out.join("ratio_hist.csv"), csv)?;
        write_json(&out.join("ratio_hist.json"), &v)?;
    }
    Ok(v)
}

fn bench_cmd(args: &BenchArgs) -> Result<Value> {
    let prov = Provenance::new("bench", args, args.seed)?;
    let report = bench::bench_epochs(
        &args.sizes,
        args.dim,
        args.hidden_dim,
        args.repeats,
        args.seed,
    )?;
    let v = config::stamp(serde_json::to_value(&report)?, &prov);
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("bench.json"), &v)?;
    }
    Ok(v)
}
