//! C ABI over `pmp-core`.
//!
//! Conventions:
//! - every fallible function returns an `int32_t` status (`PMP_OK` = 0);
//! - on failure `pmp_last_error_message()` describes the most recent call on
//!   the calling thread (it is cleared by successful calls);
//! - handles are opaque, created by `*_load` / `*_synth` / `*_train` and
//!   released with the matching `*_free` (which accepts NULL);
//! - panics never cross the boundary; they surface as `PMP_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pmp_core::cli::{synth_instance, RunConfig, SynthArgs};
use pmp_core::graph::{
    homophily_score, load_bundle, NodeTable, PartitionIndex, RelationSel, RelationalGraph, Split,
};
use pmp_core::model::PmpModel as CoreModel;
use pmp_core::{metrics, training, Error};

pub const PMP_OK: i32 = 0;
pub const PMP_ERR_NULL_ARGUMENT: i32 = 1;
pub const PMP_ERR_VALIDATION: i32 = 2;
pub const PMP_ERR_NUMERIC: i32 = 3;
pub const PMP_ERR_RESOURCE_CAP: i32 = 4;
pub const PMP_ERR_PANIC: i32 = 5;

pub const PMP_SPLIT_TRAIN: i32 = 0;
pub const PMP_SPLIT_VAL: i32 = 1;
pub const PMP_SPLIT_TEST: i32 = 2;

/// A loaded or generated graph with node features, labels and splits.
pub struct PmpBundle {
    graph: RelationalGraph,
    table: NodeTable,
}

/// A trained or loaded model.
pub struct PmpModel {
    inner: CoreModel,
}

/// Threshold metrics plus AUC for one split.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PmpMetrics {
    pub auc: f64,
    pub f1_macro: f64,
    pub g_mean: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.kind().exit_code(), e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(PMP_ERR_NULL_ARGUMENT, format!("'{name}' is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PMP_OK
        }
        Ok(Err(Failure(code, message))) => {
            set_last_error(&message);
            code
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {message}"));
            PMP_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PMP_ERR_VALIDATION, format!("'{name}' is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

fn split_of(code: i32) -> Result<Split, Failure> {
    match code {
        PMP_SPLIT_TRAIN => Ok(Split::Train),
        PMP_SPLIT_VAL => Ok(Split::Val),
        PMP_SPLIT_TEST => Ok(Split::Test),
        other => Err(Failure(
            PMP_ERR_VALIDATION,
            format!("unknown split code {other}"),
        )),
    }
}

/// Message for the most recent call on this thread; empty after success.
/// The pointer stays valid until the next pmp_* call on the same thread.
#[no_mangle]
pub extern "C" fn pmp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pmp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a bundle directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_bundle_load(dir: *const c_char, out: *mut *mut PmpBundle) -> i32 {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (graph, table) = load_bundle(&PathBuf::from(dir))?;
        *out = Box::into_raw(Box::new(PmpBundle { graph, table }));
        Ok(())
    })
}

/// Generates a synthetic bundle from a JSON object with the `pmp synth`
/// options (`nodes`, `attach`, `fraud_fraction`, `dim`, `mu_benign`,
/// `mu_fraud`, `sigma`, `relations`, `train`, `val`, `test`,
/// `plant_fraud_links`, `seed`); every field is required.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_bundle_synth(
    config_json: *const c_char,
    out: *mut *mut PmpBundle,
) -> i32 {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let args: SynthArgs = serde_json::from_str(text).map_err(Error::from)?;
        let (graph, table) = synth_instance(&args)?;
        *out = Box::into_raw(Box::new(PmpBundle { graph, table }));
        Ok(())
    })
}

/// Shape of a bundle. Any output pointer may be NULL.
///
/// # Safety
/// `bundle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmp_bundle_info(
    bundle: *const PmpBundle,
    num_nodes: *mut usize,
    num_relations: *mut usize,
    feature_dim: *mut usize,
) -> i32 {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        if let Some(p) = num_nodes.as_mut() {
            *p = b.graph.num_nodes();
        }
        if let Some(p) = num_relations.as_mut() {
            *p = b.graph.num_relations();
        }
        if let Some(p) = feature_dim.as_mut() {
            *p = b.table.feature_dim();
        }
        Ok(())
    })
}

/// Copies the 0/1 labels of all nodes into `out` (length `len` ≥ node count).
///
/// # Safety
/// `bundle` must be a live handle; `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pmp_bundle_labels(
    bundle: *const PmpBundle,
    out: *mut u8,
    len: usize,
) -> i32 {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let labels = b.table.labels();
        if len < labels.len() {
            return Err(Failure(
                PMP_ERR_VALIDATION,
                format!("buffer of {len} for {} labels", labels.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, labels.len()).copy_from_slice(labels);
        Ok(())
    })
}

/// Imbalance-corrected homophily of one relation (`relation < 0`: union).
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_bundle_homophily(
    bundle: *const PmpBundle,
    relation: i64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sel = if relation < 0 {
            RelationSel::Union
        } else {
            RelationSel::Relation(relation as usize)
        };
        *out = homophily_score(&b.graph, sel, b.table.labels())?;
        Ok(())
    })
}

/// # Safety
/// `bundle` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pmp_bundle_free(bundle: *mut PmpBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Trains a model on `bundle`. `config_json` is a run configuration object
/// as written by `pmp train` into `config.json` (NULL or "{}" for defaults).
///
/// # Safety
/// `bundle` must be a live handle; `config_json` NULL or NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_model_train(
    bundle: *const PmpBundle,
    config_json: *const c_char,
    out: *mut *mut PmpModel,
) -> i32 {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config: RunConfig = if config_json.is_null() {
            RunConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?
        };
        config.train.validate()?;
        let mc = config.model_config(b.table.feature_dim(), b.graph.num_relations())?;
        let model = CoreModel::new(mc, config.train.seed)?;
        let outcome = training::train(&model, &b.graph, &b.table, &config.train)?;
        *out = Box::into_raw(Box::new(PmpModel {
            inner: outcome.model,
        }));
        Ok(())
    })
}

/// Loads the `model` checkpoint of a run directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_model_load(dir: *const c_char, out: *mut *mut PmpModel) -> i32 {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = CoreModel::load(&PathBuf::from(dir), "model")?;
        *out = Box::into_raw(Box::new(PmpModel { inner }));
        Ok(())
    })
}

/// Writes the model as the `model` checkpoint into `dir` (created if needed).
///
/// # Safety
/// `model` must be a live handle; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pmp_model_save(model: *const PmpModel, dir: *const c_char) -> i32 {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        m.inner.save(&dir, "model")?;
        Ok(())
    })
}

/// Fraud probabilities for `count` node indices, written to `out`.
///
/// # Safety
/// Handles must be live; `nodes` and `out` must hold `count` elements.
#[no_mangle]
pub unsafe extern "C" fn pmp_model_predict(
    model: *const PmpModel,
    bundle: *const PmpBundle,
    nodes: *const usize,
    count: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let b = ref_arg(bundle, "bundle")?;
        if count == 0 {
            return Ok(());
        }
        if nodes.is_null() {
            return Err(null("nodes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let nodes = std::slice::from_raw_parts(nodes, count);
        let partition = PartitionIndex::build(&b.graph, &b.table);
        let scores = m
            .inner
            .predict(&b.graph, &partition, b.table.features(), nodes)?;
        std::slice::from_raw_parts_mut(out, count).copy_from_slice(&scores);
        Ok(())
    })
}

/// Metrics on one split (`PMP_SPLIT_*`).
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_model_evaluate(
    model: *const PmpModel,
    bundle: *const PmpBundle,
    split: i32,
    out: *mut PmpMetrics,
) -> i32 {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let b = ref_arg(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = training::evaluate(&m.inner, &b.graph, &b.table, split_of(split)?)?;
        *out = PmpMetrics {
            auc: r.auc,
            f1_macro: r.f1_macro,
            g_mean: r.g_mean,
            threshold: r.threshold,
            tp: r.confusion.tp,
            fp: r.confusion.fp,
            tn: r.confusion.tn,
            fn_: r.confusion.r#fn,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pmp_model_free(model: *mut PmpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// ROC AUC of `scores` against 0/1 `labels` (average ranks for ties).
///
/// # Safety
/// `scores` and `labels` must hold `count` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pmp_auc(
    scores: *const f64,
    labels: *const u8,
    count: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("scores/labels/out"));
        }
        let s = std::slice::from_raw_parts(scores, count);
        let l = std::slice::from_raw_parts(labels, count);
        *out = metrics::auc(s, l)?;
        Ok(())
    })
}
