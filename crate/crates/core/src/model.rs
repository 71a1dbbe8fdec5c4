//! Stacked PMP layers per relation, concatenation readout and probability head.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bucket, PartitionIndex, RelationalGraph};
use crate::layer::{
    self, glorot, BucketEdges, LayerBlock, LayerInput, LayerVariant, LayerVars, PmpLayerParams,
};
use crate::ndiff::{checkpoint, DropoutKey, Tape, Tensor, Var};

/// Shape and variant of a model; stored as the JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_relations: usize,
    pub variant: LayerVariant,
    pub dropout_p: f64,
    /// Uniformly subsample neighborhoods larger than this; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fanout_cap: Option<usize>,
}

impl ModelConfig {
    pub fn new(
        feature_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        num_relations: usize,
    ) -> Self {
        Self {
            feature_dim,
            hidden_dim,
            num_layers,
            num_relations,
            variant: LayerVariant::FULL,
            dropout_p: 0.0,
            fanout_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be >= 1"));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("feature_dim and hidden_dim must be >= 1"));
        }
        if self.num_relations == 0 {
            return Err(Error::invalid("num_relations must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!(
                "dropout_p {} not in [0,1)",
                self.dropout_p
            )));
        }
        if self.fanout_cap == Some(0) {
            return Err(Error::invalid("fanout_cap must be >= 1"));
        }
        Ok(())
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let d_in = if l == 0 {
            self.feature_dim
        } else {
            self.hidden_dim
        };
        (d_in, self.hidden_dim)
    }
}

/// Per-relation neighborhood blocks for one batch, first layer first.
#[derive(Debug, Clone)]
pub struct RelationPlan {
    pub blocks: Vec<LayerBlock>,
    /// Global ids of the first layer's source rows; the batch is a prefix.
    pub input_nodes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch: Vec<usize>,
    pub relations: Vec<RelationPlan>,
}

fn capped_neighbors(nbrs: &[usize], cap: Option<usize>, node: usize, layer: usize) -> Vec<usize> {
    match cap {
        Some(c) if nbrs.len() > c => {
            let mut rng = ChaCha8Rng::seed_from_u64(((node as u64) << 8) ^ layer as u64);
            let mut picked: Vec<usize> = index::sample(&mut rng, nbrs.len(), c)
                .into_iter()
                .map(|k| nbrs[k])
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => nbrs.to_vec(),
    }
}

impl BatchPlan {
    /// Full L-hop neighborhoods of `batch` in every relation.
    pub fn build(
        graph: &RelationalGraph,
        partition: &PartitionIndex,
        batch: &[usize],
        num_layers: usize,
        fanout_cap: Option<usize>,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= graph.num_nodes()) {
            return Err(Error::invalid(format!("batch node {i} out of range")));
        }
        if partition.num_relations() != graph.num_relations() {
            return Err(Error::invalid("partition and graph relation counts differ"));
        }
        let relations = (0..graph.num_relations())
            .map(|r| {
                let mut blocks = Vec::with_capacity(num_layers);
                let mut dst: Vec<usize> = batch.to_vec();
                for l in (0..num_layers).rev() {
                    let (block, src) = build_block(graph, partition, r, &dst, l, fanout_cap);
                    blocks.push(block);
                    dst = src;
                }
                blocks.reverse();
                RelationPlan {
                    blocks,
                    input_nodes: dst,
                }
            })
            .collect();
        Ok(Self {
            batch: batch.to_vec(),
            relations,
        })
    }
}

fn build_block(
    graph: &RelationalGraph,
    partition: &PartitionIndex,
    r: usize,
    dst: &[usize],
    layer: usize,
    cap: Option<usize>,
) -> (LayerBlock, Vec<usize>) {
    let mut src: Vec<usize> = dst.to_vec();
    let mut local: HashMap<usize, usize> = HashMap::with_capacity(dst.len() * 4);
    for (k, &i) in dst.iter().enumerate() {
        local.entry(i).or_insert(k);
    }
    let mut slot = |j: usize, src: &mut Vec<usize>| {
        *local.entry(j).or_insert_with(|| {
            src.push(j);
            src.len() - 1
        })
    };
    let part = partition.relation(r);
    let mut pairs: [Vec<(usize, usize)>; 4] = Default::default();
    for (p, &i) in dst.iter().enumerate() {
        let nbrs = capped_neighbors(graph.neighbors(r, i), cap, i, layer);
        for j in nbrs {
            let s = slot(j, &mut src);
            pairs[3].push((s, p));
            let bucket = [Bucket::Fraud, Bucket::Benign, Bucket::Unlabeled]
                .into_iter()
                .position(|b| part.bucket(b).row(i).binary_search(&j).is_ok())
                .expect("every neighbor lies in one bucket");
            pairs[bucket].push((s, p));
        }
    }
    let block = LayerBlock {
        num_src: src.len(),
        center: (0..dst.len()).collect(),
        fraud: BucketEdges::from_pairs(&pairs[0]),
        benign: BucketEdges::from_pairs(&pairs[1]),
        unlabeled: BucketEdges::from_pairs(&pairs[2]),
        all: BucketEdges::from_pairs(&pairs[3]),
    };
    (block, src)
}

/// Dropout settings for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardMode {
    pub training: bool,
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmpModel {
    pub config: ModelConfig,
    /// `layers[r][l]`.
    pub layers: Vec<Vec<PmpLayerParams>>,
    pub readout_w: Tensor,
    pub readout_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles of a bound model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub layers: Vec<Vec<LayerVars>>,
    pub readout_w: Var,
    pub readout_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl PmpModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..config.num_relations)
            .map(|_| {
                (0..config.num_layers)
                    .map(|l| {
                        let (d_in, d_out) = config.layer_dims(l);
                        PmpLayerParams::init(&mut rng, d_in, d_out, config.variant)
                    })
                    .collect()
            })
            .collect();
        let d = config.hidden_dim;
        let readout_w = glorot(&mut rng, config.num_relations * d, d);
        let head_w = glorot(&mut rng, d, 1);
        Ok(Self {
            layers,
            readout_w,
            readout_b: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[1]),
            config,
        })
    }

    /// Every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (_, t) in m.named_params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (r, rel) in self.layers.iter().enumerate() {
            for (l, p) in rel.iter().enumerate() {
                for (name, t) in p.named() {
                    out.push((format!("r{r}.l{l}.{name}"), t));
                }
            }
        }
        out.push(("readout.w".into(), &self.readout_w));
        out.push(("readout.b".into(), &self.readout_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (r, rel) in self.layers.iter_mut().enumerate() {
            for (l, p) in rel.iter_mut().enumerate() {
                for (name, t) in p.named_mut() {
                    out.push((format!("r{r}.l{l}.{name}"), t));
                }
            }
        }
        out.push(("readout.w".into(), &mut self.readout_w));
        out.push(("readout.b".into(), &mut self.readout_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers all parameters on `tape` in `named_params` order.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(name, t)| tape.param(name, t.clone()))
            .collect();
        self.assign(&vars).expect("one variable per parameter")
    }

    /// Handles from variables already on a tape, in `named_params` order.
    pub fn assign(&self, vars: &[Var]) -> Result<ModelVars> {
        let expected = self.named_params().len();
        if vars.len() != expected {
            return Err(Error::shape(
                "model_bind",
                format!("{} variables for {expected} parameters", vars.len()),
            ));
        }
        let mut it = vars.iter().copied();
        let layers = self
            .layers
            .iter()
            .map(|rel| rel.iter().map(|p| p.assign(&mut it)).collect())
            .collect();
        let mut next = || it.next().expect("counted above");
        Ok(ModelVars {
            layers,
            readout_w: next(),
            readout_b: next(),
            head_w: next(),
            head_b: next(),
        })
    }

    pub fn plan(
        &self,
        graph: &RelationalGraph,
        partition: &PartitionIndex,
        batch: &[usize],
    ) -> Result<BatchPlan> {
        if graph.num_relations() != self.config.num_relations {
            return Err(Error::invalid(format!(
                "model has {} relations, graph has {}",
                self.config.num_relations,
                graph.num_relations()
            )));
        }
        BatchPlan::build(
            graph,
            partition,
            batch,
            self.config.num_layers,
            self.config.fanout_cap,
        )
    }

    /// Final per-relation representations `[|batch| × d_L]`, given one input
    /// feature variable per relation (rows ordered as `input_nodes`).
    pub fn relation_outputs(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        plan: &BatchPlan,
        inputs: &[Var],
        mode: ForwardMode,
    ) -> Result<Vec<Var>> {
        if inputs.len() != plan.relations.len() || vars.layers.len() != plan.relations.len() {
            return Err(Error::shape("model_forward", "relation count mismatch"));
        }
        let last = self.config.num_layers - 1;
        let mut outs = Vec::with_capacity(inputs.len());
        for (r, (rel, &x)) in plan.relations.iter().zip(inputs).enumerate() {
            let mut input = LayerInput::same(x);
            for (l, block) in rel.blocks.iter().enumerate() {
                let h = layer::forward(
                    tape,
                    &vars.layers[r][l],
                    self.config.variant,
                    block,
                    input,
                    l == last,
                )?;
                let key = DropoutKey {
                    seed: mode.seed,
                    layer: ((r as u64) << 32) | l as u64,
                    epoch: mode.epoch,
                    batch: mode.batch,
                };
                let dropped = tape.dropout(h, self.config.dropout_p, mode.training, key)?;
                input = LayerInput {
                    h: dropped,
                    for_alpha: h,
                };
            }
            outs.push(input.h);
        }
        Ok(outs)
    }

    /// Logits `[|batch| × 1]` (pre-sigmoid head output) from explicit
    /// per-relation inputs.
    pub fn forward_plan_logits(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        plan: &BatchPlan,
        inputs: &[Var],
        mode: ForwardMode,
    ) -> Result<Var> {
        let reps = self.relation_outputs(tape, vars, plan, inputs, mode)?;
        let joined = tape.concat(&reps, 1)?;
        let hidden = tape.matmul(joined, vars.readout_w)?;
        let hidden = tape.add_row(hidden, vars.readout_b)?;
        let hidden = tape.relu(hidden)?;
        let logit = tape.matmul(hidden, vars.head_w)?;
        tape.add_row(logit, vars.head_b)
    }

    /// Probabilities `[|batch| × 1]` from explicit per-relation inputs.
    pub fn forward_plan(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        plan: &BatchPlan,
        inputs: &[Var],
        mode: ForwardMode,
    ) -> Result<Var> {
        let logit = self.forward_plan_logits(tape, vars, plan, inputs, mode)?;
        tape.sigmoid(logit)
    }

    /// Feature rows of `plan`'s input nodes as constants, one per relation.
    pub fn input_constants(
        &self,
        tape: &mut Tape,
        plan: &BatchPlan,
        features: &Tensor,
    ) -> Result<Vec<Var>> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "feature dim {} vs model {}",
                    features.cols(),
                    self.config.feature_dim
                ),
            ));
        }
        Ok(plan
            .relations
            .iter()
            .map(|rel| tape.constant(gather(features, &rel.input_nodes)))
            .collect())
    }

    /// Probabilities for `batch` as a `[|batch| × 1]` tape variable.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        graph: &RelationalGraph,
        partition: &PartitionIndex,
        features: &Tensor,
        batch: &[usize],
        mode: ForwardMode,
    ) -> Result<Var> {
        let logit = self.forward_logits(tape, vars, graph, partition, features, batch, mode)?;
        tape.sigmoid(logit)
    }

    /// Logits for `batch`; `forward` is their sigmoid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        graph: &RelationalGraph,
        partition: &PartitionIndex,
        features: &Tensor,
        batch: &[usize],
        mode: ForwardMode,
    ) -> Result<Var> {
        let plan = self.plan(graph, partition, batch)?;
        let inputs = self.input_constants(tape, &plan, features)?;
        self.forward_plan_logits(tape, vars, &plan, &inputs, mode)
    }

    /// Evaluation-mode probabilities for `nodes`, computed in chunks.
    pub fn predict(
        &self,
        graph: &RelationalGraph,
        partition: &PartitionIndex,
        features: &Tensor,
        nodes: &[usize],
    ) -> Result<Vec<f64>> {
        const CHUNK: usize = 1024;
        let mut out = Vec::with_capacity(nodes.len());
        for chunk in nodes.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let z = self.forward(
                &mut tape,
                &vars,
                graph,
                partition,
                features,
                chunk,
                ForwardMode::eval(),
            )?;
            out.extend_from_slice(tape.value(z).data());
        }
        Ok(out)
    }

    /// Writes `<stem>.json`/`<stem>.bin` tensors and the `<stem>.model.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        checkpoint::save(dir, stem, &self.named_params())?;
        let path = dir.join(format!("{stem}.model.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&self.config)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.model.json"));
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_slice(&raw)?;
        let mut model = Self::new(config, 0)?;
        let mut tensors: HashMap<String, Tensor> =
            checkpoint::load(dir, stem)?.into_iter().collect();
        for (name, slot) in model.named_params_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "'{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::invalid(format!(
                "checkpoint has unknown tensor '{extra}'"
            )));
        }
        Ok(model)
    }
}

pub(crate) fn gather(features: &Tensor, rows: &[usize]) -> Tensor {
    let d = features.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        data.extend_from_slice(features.row(i));
    }
    Tensor::matrix(rows.len(), d, data).expect("shape")
}

/// Mean negated binary cross-entropy of probabilities `z` against 0/1
/// `labels`. With `pos_weight`, fraud terms are multiplied by it.
pub fn loss(tape: &mut Tape, z: Var, labels: &[u8], pos_weight: Option<f64>) -> Result<Var> {
    let (targets, weights) = bce_targets(labels, pos_weight)?;
    let terms = tape.binary_cross_entropy(z, targets, weights)?;
    tape.mean(terms)
}

/// Same value as `loss(sigmoid(logits), ..)`, with the fused gradient that
/// keeps saturated predictions trainable. Used by the training loop.
pub fn loss_from_logits(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    pos_weight: Option<f64>,
) -> Result<Var> {
    let (targets, weights) = bce_targets(labels, pos_weight)?;
    let terms = tape.binary_cross_entropy_with_logits(logits, targets, weights)?;
    tape.mean(terms)
}

fn bce_targets(labels: &[u8], pos_weight: Option<f64>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let targets = labels.iter().map(|&l| f64::from(l)).collect();
    let weights = pos_weight.map(|w| {
        labels
            .iter()
            .map(|&l| if l == 1 { w } else { 1.0 })
            .collect()
    });
    Ok((targets, weights))
}
