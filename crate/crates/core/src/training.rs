//! Mini-batch training with validation-AUC model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeTable, PartitionIndex, RelationalGraph, Split};
use crate::metrics::{self, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{self, ForwardMode, PmpModel};
use crate::ndiff::{Tape, Tensor, PROB_CLAMP};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Auc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    /// Multiplier on fraud terms of the loss; `None` is the plain mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 0.0,
            dropout_p: 0.0,
            batch_size: 512,
            max_epochs: 200,
            patience: 30,
            seed: 0,
            selection_metric: SelectionMetric::Auc,
            pos_weight: None,
        }
    }
}

impl TrainConfig {
    /// `learning_rate == 0` is accepted as a frozen run.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p must be in [0,1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::invalid("pos_weight must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// One Adam step with decoupled weight decay:
/// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)`.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "optimizer_step",
            });
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            "optimizer state does not match parameters",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - learning_rate * weight_decay;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv * decay - learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation split lacks one of the classes.
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PmpModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
}

/// Mean loss of one training batch and the parameter gradients, in
/// `named_params` order.
pub fn batch_gradients(
    model: &PmpModel,
    graph: &RelationalGraph,
    partition: &PartitionIndex,
    table: &NodeTable,
    batch: &[usize],
    mode: ForwardMode,
    pos_weight: Option<f64>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward_logits(
        &mut tape,
        &vars,
        graph,
        partition,
        table.features(),
        batch,
        mode,
    )?;
    let labels: Vec<u8> = batch.iter().map(|&i| table.labels()[i]).collect();
    let loss = model::loss_from_logits(&mut tape, logits, &labels, pos_weight)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let out = tape
        .params()
        .iter()
        .map(|(_, v)| {
            let shape = tape.value(*v).shape().to_vec();
            grads.take(*v).unwrap_or_else(|| Tensor::zeros(&shape))
        })
        .collect();
    Ok((value, out))
}

/// Validation AUC and mean validation BCE, or `None` if a class is missing.
fn validation_scores(
    model: &PmpModel,
    graph: &RelationalGraph,
    partition: &PartitionIndex,
    table: &NodeTable,
    val: &[usize],
) -> Result<Option<(f64, f64)>> {
    let labels: Vec<u8> = val.iter().map(|&i| table.labels()[i]).collect();
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Ok(None);
    }
    let scores = model.predict(graph, partition, table.features(), val)?;
    let auc = metrics::auc(&scores, &labels)?;
    let loss = scores
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / labels.len() as f64;
    Ok(Some((auc, loss)))
}

/// Trains a copy of `model`; returns the parameters of the best epoch.
///
/// Selection uses validation AUC; equal AUCs are broken by lower
/// validation loss (remaining ties keep the earlier epoch). If the
/// validation split lacks a class, the epoch with the lowest training loss
/// is kept instead. Training stops after `patience` epochs without
/// improvement.
pub fn train(
    model: &PmpModel,
    graph: &RelationalGraph,
    table: &NodeTable,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    table.check_trainable()?;
    if table.feature_dim() != model.config.feature_dim {
        return Err(Error::invalid(format!(
            "bundle feature_dim {} does not match model {}",
            table.feature_dim(),
            model.config.feature_dim
        )));
    }
    // Built once from training labels; never rebuilt during the run.
    let partition = PartitionIndex::build(graph, table);
    let mut current = model.clone();
    current.config.dropout_p = config.dropout_p;
    let mut train_nodes = table.nodes_in(Split::Train);
    let val_nodes = table.nodes_in(Split::Val);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::default();

    let mut history = Vec::new();
    let mut best = current.clone();
    let mut best_epoch = 0;
    let mut best_score = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_val_auc = None;
    let mut stale = 0;

    for epoch in 0..config.max_epochs {
        train_nodes.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in train_nodes.chunks(config.batch_size).enumerate() {
            let mode = ForwardMode {
                training: true,
                seed: config.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                batch: b,
                loss,
            };
            let (loss, grads) = batch_gradients(
                &current,
                graph,
                &partition,
                table,
                batch,
                mode,
                config.pos_weight,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(f64::NAN),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let mut params: Vec<&mut Tensor> = current
                .named_params_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            optimizer_step(
                &mut params,
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(loss),
                other => other,
            })?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_nodes.len() as f64;
        let val = validation_scores(&current, graph, &partition, table, &val_nodes)?;
        let val_auc = val.map(|(auc, _)| auc);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        // lexicographic (AUC, −val loss); (−train loss, 0) without validation
        let score = val.map_or((-train_loss, 0.0), |(auc, loss)| (auc, -loss));
        if score.0 > best_score.0 || (score.0 == best_score.0 && score.1 > best_score.1) {
            best_score = score;
            best = current.clone();
            best_epoch = epoch;
            best_val_auc = val_auc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_auc,
    })
}

/// Metrics of `model` on one split (evaluation mode, no dropout).
pub fn evaluate(
    model: &PmpModel,
    graph: &RelationalGraph,
    table: &NodeTable,
    split: Split,
) -> Result<MetricsReport> {
    let nodes = table.nodes_in(split);
    if nodes.is_empty() {
        return Err(Error::invalid(format!("split '{split}' is empty")));
    }
    let partition = PartitionIndex::build(graph, table);
    let scores = model.predict(graph, &partition, table.features(), &nodes)?;
    let labels: Vec<u8> = nodes.iter().map(|&i| table.labels()[i]).collect();
    MetricsReport::compute(&scores, &labels, DEFAULT_THRESHOLD)
}

/// `epoch,train_loss,val_auc` rows; an absent AUC is left empty.
pub fn history_csv(history: &[EpochRecord], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("epoch,train_loss,val_auc\n");
    for r in history {
        let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, auc));
    }
    out
}
