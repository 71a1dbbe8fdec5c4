//! One partitioning message-passing layer.
//!
//! For a center `i` with fraud / benign / unlabeled neighbor sums `S_fr`,
//! `S_be`, `S_un` (rows of the previous representation), the aggregate is
//!
//! ```text
//! A_i = S_fr · W_fr(i) + S_be · W_be(i) + S_un · W_un(i)
//! W_fr(i) = diag(h_i) · M_fr + B_fr          (root-specific generator)
//! W_un(i) = α_i · W_fr(i) + (1 − α_i) · W_be(i),  α_i = σ(w_φ · h_i + b_φ)
//! ```
//!
//! and the layer output is `act(h_i · W_self + b_self + A_i)`.
//!
//! The production path never materializes a per-node `W_fr(i)`: it uses
//! `P · (diag(h) M + B) = (P ⊙ h) · M + P · B` on whole batches.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{sigmoid, Tape, Tensor, Var};

/// Ablation switches, cumulative in the order partition → adaptive
/// combination → root-specific weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerVariant {
    pub partition: bool,
    pub adaptive_combination: bool,
    pub root_specific: bool,
}

impl LayerVariant {
    /// Full model.
    pub const FULL: Self = Self {
        partition: true,
        adaptive_combination: true,
        root_specific: true,
    };

    /// Single shared neighbor matrix with sum aggregation.
    pub const SHARED: Self = Self {
        partition: false,
        adaptive_combination: false,
        root_specific: false,
    };

    pub fn new(partition: bool, adaptive_combination: bool, root_specific: bool) -> Result<Self> {
        let v = Self {
            partition,
            adaptive_combination,
            root_specific,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.partition && (self.adaptive_combination || self.root_specific) {
            return Err(Error::invalid(
                "adaptive combination and root-specific weights require partitioning",
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match (
            self.partition,
            self.adaptive_combination,
            self.root_specific,
        ) {
            (false, _, _) => "shared",
            (true, false, false) => "partition",
            (true, true, false) => "partition+adaptive",
            (true, false, true) => "partition+root",
            (true, true, true) => "full",
        }
    }
}

impl Default for LayerVariant {
    fn default() -> Self {
        Self::FULL
    }
}

/// Parameters of one layer. Optional blocks exist only for variants that use
/// them (`w_phi` is stored as a `[d_in × 1]` column): `m_be` with partitioning, `w_un` with partitioning but no adaptive
/// combination, `b_fr`/`b_be` with root-specific weights, and the alpha head
/// `w_phi`/`b_phi` with adaptive combination. Without partitioning `m_fr` is
/// the single shared neighbor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PmpLayerParams {
    pub d_in: usize,
    pub d_out: usize,
    pub w_self: Tensor,
    pub b_self: Tensor,
    pub m_fr: Tensor,
    pub m_be: Option<Tensor>,
    pub w_un: Option<Tensor>,
    pub b_fr: Option<Tensor>,
    pub b_be: Option<Tensor>,
    pub w_phi: Option<Tensor>,
    pub b_phi: Option<Tensor>,
}

/// Uniform on `±sqrt(6 / (d_in + d_out))`.
pub(crate) fn glorot<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Tensor {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::matrix(d_in, d_out, data).expect("shape")
}

impl PmpLayerParams {
    /// Glorot-uniform weight matrices; zero biases and alpha head (α starts at 0.5).
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, variant: LayerVariant) -> Self {
        let w_self = glorot(rng, d_in, d_out);
        let m_fr = glorot(rng, d_in, d_out);
        let m_be = variant.partition.then(|| glorot(rng, d_in, d_out));
        let w_un =
            (variant.partition && !variant.adaptive_combination).then(|| glorot(rng, d_in, d_out));
        let zeros_mat = || Tensor::zeros(&[d_in, d_out]);
        Self {
            d_in,
            d_out,
            w_self,
            b_self: Tensor::zeros(&[d_out]),
            m_fr,
            m_be,
            w_un,
            b_fr: variant.root_specific.then(zeros_mat),
            b_be: variant.root_specific.then(zeros_mat),
            w_phi: variant
                .adaptive_combination
                .then(|| Tensor::zeros(&[d_in, 1])),
            b_phi: variant.adaptive_combination.then(|| Tensor::zeros(&[1])),
        }
    }

    /// Every tensor zero, with the blocks `variant` needs.
    pub fn zeros(d_in: usize, d_out: usize, variant: LayerVariant) -> Self {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut p = Self::init(&mut rng, d_in, d_out, variant);
        for (_, t) in p.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_self", &self.w_self),
            ("b_self", &self.b_self),
            ("m_fr", &self.m_fr),
        ];
        let optional = [
            ("m_be", &self.m_be),
            ("w_un", &self.w_un),
            ("b_fr", &self.b_fr),
            ("b_be", &self.b_be),
            ("w_phi", &self.w_phi),
            ("b_phi", &self.b_phi),
        ];
        out.extend(
            optional
                .into_iter()
                .filter_map(|(n, t)| t.as_ref().map(|t| (n, t))),
        );
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("w_self", &mut self.w_self),
            ("b_self", &mut self.b_self),
            ("m_fr", &mut self.m_fr),
        ];
        let optional = [
            ("m_be", &mut self.m_be),
            ("w_un", &mut self.w_un),
            ("b_fr", &mut self.b_fr),
            ("b_be", &mut self.b_be),
            ("w_phi", &mut self.w_phi),
            ("b_phi", &mut self.b_phi),
        ];
        out.extend(
            optional
                .into_iter()
                .filter_map(|(n, t)| t.as_mut().map(|t| (n, t))),
        );
        out
    }

    /// Registers every tensor on `tape` as a parameter named `<prefix>.<block>`.
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> LayerVars {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(name, t)| tape.param(format!("{prefix}.{name}"), t.clone()))
            .collect();
        self.assign(&mut vars.into_iter())
    }

    /// Builds handles from variables already on a tape, consumed in `named` order.
    pub fn assign(&self, vars: &mut impl Iterator<Item = Var>) -> LayerVars {
        let mut out = LayerVars::default();
        for (name, _) in self.named() {
            let slot = match name {
                "w_self" => &mut out.w_self,
                "b_self" => &mut out.b_self,
                "m_fr" => &mut out.m_fr,
                "m_be" => &mut out.m_be,
                "w_un" => &mut out.w_un,
                "b_fr" => &mut out.b_fr,
                "b_be" => &mut out.b_be,
                "w_phi" => &mut out.w_phi,
                "b_phi" => &mut out.b_phi,
                _ => unreachable!(),
            };
            *slot = vars.next();
        }
        out
    }

    /// Unlabeled-neighbor tendency `σ(w_φ · h + b_φ)` for one center.
    pub fn alpha(&self, h: &[f64]) -> Result<f64> {
        let (Some(w), Some(b)) = (&self.w_phi, &self.b_phi) else {
            return Err(Error::invalid("layer has no alpha head"));
        };
        if h.len() != self.d_in {
            return Err(Error::shape(
                "alpha",
                format!("{} inputs for d_in {}", h.len(), self.d_in),
            ));
        }
        let dot: f64 = w.data().iter().zip(h).map(|(a, b)| a * b).sum();
        Ok(sigmoid(dot + b.item()))
    }

    /// Materialized root-specific weights `diag(h)·M + B` for fraud and benign.
    pub fn gen_weights(&self, h: &[f64]) -> Result<(Tensor, Tensor)> {
        let (Some(m_be), Some(b_fr), Some(b_be)) = (&self.m_be, &self.b_fr, &self.b_be) else {
            return Err(Error::invalid("layer has no root-specific generators"));
        };
        if h.len() != self.d_in {
            return Err(Error::shape(
                "gen_weights",
                format!("{} inputs for d_in {}", h.len(), self.d_in),
            ));
        }
        let gen = |m: &Tensor, b: &Tensor| {
            let mut w = b.clone();
            for (p, &hp) in h.iter().enumerate() {
                for q in 0..self.d_out {
                    let v = hp * m.get(p, q) + b.get(p, q);
                    w.set(p, q, v);
                }
            }
            w
        };
        Ok((gen(&self.m_fr, b_fr), gen(m_be, b_be)))
    }
}

/// `alpha · W_fr + (1 − alpha) · W_be`, entrywise.
pub fn unlabeled_weight(w_fr: &Tensor, w_be: &Tensor, alpha: f64) -> Result<Tensor> {
    if w_fr.shape() != w_be.shape() {
        return Err(Error::shape(
            "unlabeled_weight",
            format!("{:?} vs {:?}", w_fr.shape(), w_be.shape()),
        ));
    }
    let data = w_fr
        .data()
        .iter()
        .zip(w_be.data())
        .map(|(f, b)| alpha * f + (1.0 - alpha) * b)
        .collect();
    Tensor::new(w_fr.shape().to_vec(), data)
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Default)]
pub struct LayerVars {
    pub w_self: Option<Var>,
    pub b_self: Option<Var>,
    pub m_fr: Option<Var>,
    pub m_be: Option<Var>,
    pub w_un: Option<Var>,
    pub b_fr: Option<Var>,
    pub b_be: Option<Var>,
    pub w_phi: Option<Var>,
    pub b_phi: Option<Var>,
}

fn need(v: Option<Var>, what: &'static str) -> Result<Var> {
    v.ok_or_else(|| Error::invalid(format!("layer parameters lack '{what}' for this variant")))
}

/// `(source row, destination row)` pairs for one neighbor bucket.
#[derive(Debug, Clone, Default)]
pub struct BucketEdges {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl BucketEdges {
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Neighborhood of a set of destination (center) rows within a source row set.
#[derive(Debug, Clone)]
pub struct LayerBlock {
    pub num_src: usize,
    /// Source row of each destination center.
    pub center: Arc<[usize]>,
    pub fraud: BucketEdges,
    pub benign: BucketEdges,
    pub unlabeled: BucketEdges,
    /// All neighbors, for the unpartitioned variant.
    pub all: BucketEdges,
}

impl LayerBlock {
    pub fn num_dst(&self) -> usize {
        self.center.len()
    }

    fn check(&self) -> Result<()> {
        let n_dst = self.num_dst();
        for b in [&self.fraud, &self.benign, &self.unlabeled, &self.all] {
            if b.src.iter().any(|&s| s >= self.num_src) || b.dst.iter().any(|&d| d >= n_dst) {
                return Err(Error::invalid("batch index out of range"));
            }
        }
        if self.center.iter().any(|&c| c >= self.num_src) {
            return Err(Error::invalid("batch index out of range"));
        }
        Ok(())
    }
}

/// Previous-layer representations of the source rows. `for_alpha` is the
/// pre-dropout version used by the alpha head.
#[derive(Debug, Clone, Copy)]
pub struct LayerInput {
    pub h: Var,
    pub for_alpha: Var,
}

impl LayerInput {
    pub fn same(h: Var) -> Self {
        Self { h, for_alpha: h }
    }
}

fn bucket_sum(tape: &mut Tape, h: Var, edges: &BucketEdges, num_dst: usize) -> Result<Var> {
    let rows = tape.gather_rows(h, edges.src.clone())?;
    tape.segment_sum(rows, edges.dst.clone(), num_dst)
}

/// `P · W(i)` per center: `(P ⊙ H_center) · M + P · B` when root-specific,
/// `P · M` otherwise.
fn transform(tape: &mut Tape, p: Var, h_center: Var, m: Var, b: Option<Var>) -> Result<Var> {
    match b {
        Some(b) => {
            let scaled = tape.mul(p, h_center)?;
            let left = tape.matmul(scaled, m)?;
            let right = tape.matmul(p, b)?;
            tape.add(left, right)
        }
        None => tape.matmul(p, m),
    }
}

/// Neighbor aggregate `A` for every destination row of `block`.
pub fn aggregate(
    tape: &mut Tape,
    vars: &LayerVars,
    variant: LayerVariant,
    block: &LayerBlock,
    input: LayerInput,
) -> Result<Var> {
    variant.validate()?;
    block.check()?;
    let n = block.num_dst();
    let m_fr = need(vars.m_fr, "m_fr")?;
    if !variant.partition {
        let s_all = bucket_sum(tape, input.h, &block.all, n)?;
        return tape.matmul(s_all, m_fr);
    }
    let m_be = need(vars.m_be, "m_be")?;
    let (b_fr, b_be) = if variant.root_specific {
        (
            Some(need(vars.b_fr, "b_fr")?),
            Some(need(vars.b_be, "b_be")?),
        )
    } else {
        (None, None)
    };
    let h_center = tape.gather_rows(input.h, block.center.clone())?;
    let s_fr = bucket_sum(tape, input.h, &block.fraud, n)?;
    let s_be = bucket_sum(tape, input.h, &block.benign, n)?;
    let s_un = bucket_sum(tape, input.h, &block.unlabeled, n)?;

    if variant.adaptive_combination {
        let alpha = alpha_column(tape, vars, block, input)?;
        let one_minus = tape.affine(alpha, -1.0, 1.0)?;
        let un_fr = tape.row_scale(s_un, alpha)?;
        let un_be = tape.row_scale(s_un, one_minus)?;
        let p_fr = tape.add(s_fr, un_fr)?;
        let p_be = tape.add(s_be, un_be)?;
        let a_fr = transform(tape, p_fr, h_center, m_fr, b_fr)?;
        let a_be = transform(tape, p_be, h_center, m_be, b_be)?;
        tape.add(a_fr, a_be)
    } else {
        let w_un = need(vars.w_un, "w_un")?;
        let a_fr = transform(tape, s_fr, h_center, m_fr, b_fr)?;
        let a_be = transform(tape, s_be, h_center, m_be, b_be)?;
        let a_un = tape.matmul(s_un, w_un)?;
        let partial = tape.add(a_fr, a_be)?;
        tape.add(partial, a_un)
    }
}

/// `α` for every destination row as a `[num_dst × 1]` column.
pub fn alpha_column(
    tape: &mut Tape,
    vars: &LayerVars,
    block: &LayerBlock,
    input: LayerInput,
) -> Result<Var> {
    let w_phi = need(vars.w_phi, "w_phi")?;
    let b_phi = need(vars.b_phi, "b_phi")?;
    let h = tape.gather_rows(input.for_alpha, block.center.clone())?;
    let logits = tape.matmul(h, w_phi)?;
    let logits = tape.add_row(logits, b_phi)?;
    tape.sigmoid(logits)
}

/// Layer output `act(h_center · W_self + b_self + A)` before dropout.
/// ReLU unless `last`, identity for the last layer.
pub fn forward(
    tape: &mut Tape,
    vars: &LayerVars,
    variant: LayerVariant,
    block: &LayerBlock,
    input: LayerInput,
    last: bool,
) -> Result<Var> {
    let agg = aggregate(tape, vars, variant, block, input)?;
    let h_center = tape.gather_rows(input.h, block.center.clone())?;
    let self_term = tape.matmul(h_center, need(vars.w_self, "w_self")?)?;
    let self_term = tape.add_row(self_term, need(vars.b_self, "b_self")?)?;
    let combined = tape.add(self_term, agg)?;
    if last {
        Ok(combined)
    } else {
        tape.relu(combined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_constraints() {
        assert!(LayerVariant::new(false, true, false).is_err());
        assert!(LayerVariant::new(false, false, true).is_err());
        assert!(LayerVariant::new(true, false, true).is_ok());
        assert_eq!(LayerVariant::SHARED.name(), "shared");
    }

    #[test]
    fn neutral_alpha_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PmpLayerParams::init(&mut rng, 3, 2, LayerVariant::FULL);
        for h in [[0.0, 0.0, 0.0], [5.0, -3.0, 1e3]] {
            assert_eq!(p.alpha(&h).unwrap(), 0.5);
        }
    }

    #[test]
    fn alpha_monotone_in_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PmpLayerParams::init(&mut rng, 2, 2, LayerVariant::FULL);
        p.w_phi = Some(Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap());
        let mut prev = 0.0;
        for b in [-30.0, -3.0, 0.0, 2.0, 30.0] {
            p.b_phi = Some(Tensor::vector(vec![b]));
            let a = p.alpha(&[1.0, 2.0]).unwrap();
            assert!(a > prev && a < 1.0);
            prev = a;
        }
    }

    #[test]
    fn gen_weights_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PmpLayerParams::init(&mut rng, 3, 4, LayerVariant::FULL);
        let (w_fr, w_be) = p.gen_weights(&[1.0; 3]).unwrap();
        assert_eq!(&w_fr, &p.m_fr);
        assert_eq!(&w_be, p.m_be.as_ref().unwrap());
        let mut q = p.clone();
        q.b_fr = Some(Tensor::filled(&[3, 4], 0.25));
        let (w_fr, _) = q.gen_weights(&[0.0; 3]).unwrap();
        assert_eq!(&w_fr, q.b_fr.as_ref().unwrap());
        let shared = PmpLayerParams::init(&mut rng, 3, 4, LayerVariant::SHARED);
        assert!(shared.gen_weights(&[0.0; 3]).is_err());
    }

    #[test]
    fn unlabeled_weight_half_blend() {
        let w_fr = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let w_be = Tensor::zeros(&[2, 2]);
        let w = unlabeled_weight(&w_fr, &w_be, 0.5).unwrap();
        assert_eq!(w, Tensor::identity(2));
        assert!(unlabeled_weight(&w_fr, &Tensor::zeros(&[2, 3]), 0.5).is_err());
    }

    #[test]
    fn unlabeled_weight_interpolates_monotonically() {
        let w_fr = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let w_be = Tensor::matrix(1, 3, vec![-1.0, 3.0, 0.5]).unwrap();
        let alphas = [0.01, 0.2, 0.5, 0.8, 0.99];
        let ws: Vec<Tensor> = alphas
            .iter()
            .map(|&a| unlabeled_weight(&w_fr, &w_be, a).unwrap())
            .collect();
        for k in 0..3 {
            let dir = w_fr.data()[k] - w_be.data()[k];
            for pair in ws.windows(2) {
                let step = pair[1].data()[k] - pair[0].data()[k];
                assert!(step * dir >= 0.0);
            }
        }
    }

    fn scalar_block() -> LayerBlock {
        // src rows: 0 = center (h=1), 1 and 2 = benign neighbors (h=2, h=3)
        LayerBlock {
            num_src: 3,
            center: vec![0].into(),
            fraud: BucketEdges::default(),
            benign: BucketEdges::from_pairs(&[(1, 0), (2, 0)]),
            unlabeled: BucketEdges::default(),
            all: BucketEdges::from_pairs(&[(1, 0), (2, 0)]),
        }
    }

    fn scalar_params(variant: LayerVariant) -> PmpLayerParams {
        let mut p = PmpLayerParams::zeros(1, 1, variant);
        p.w_self = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        p.m_be = Some(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        p
    }

    #[test]
    fn scalar_benign_aggregate() {
        let variant = LayerVariant::new(true, false, false).unwrap();
        let p = scalar_params(variant);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, "l0");
        let h = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let block = scalar_block();
        let a = aggregate(&mut tape, &vars, variant, &block, LayerInput::same(h)).unwrap();
        assert_eq!(tape.value(a).data(), &[10.0]);
        let out = forward(&mut tape, &vars, variant, &block, LayerInput::same(h), true).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn isolated_center_has_zero_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PmpLayerParams::init(&mut rng, 2, 3, LayerVariant::FULL);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, "l0");
        let h = tape.constant(Tensor::matrix(1, 2, vec![0.4, -1.0]).unwrap());
        let block = LayerBlock {
            num_src: 1,
            center: vec![0].into(),
            fraud: BucketEdges::default(),
            benign: BucketEdges::default(),
            unlabeled: BucketEdges::default(),
            all: BucketEdges::default(),
        };
        let a = aggregate(
            &mut tape,
            &vars,
            LayerVariant::FULL,
            &block,
            LayerInput::same(h),
        )
        .unwrap();
        assert_eq!(tape.value(a).data(), &[0.0; 3]);
    }

    #[test]
    fn out_of_range_batch_index() {
        let variant = LayerVariant::new(true, false, false).unwrap();
        let p = scalar_params(variant);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, "l0");
        let h = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let mut block = scalar_block();
        block.center = vec![7].into();
        assert!(aggregate(&mut tape, &vars, variant, &block, LayerInput::same(h)).is_err());
    }
}
