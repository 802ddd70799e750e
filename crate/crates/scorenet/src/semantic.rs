//! From attention structure to a distribution over patches.
//!
//! The scorer encoder exports, for every layer and head, the attention
//! matrix before and after its row softmax. This module reads the query
//! row of a pooled summary token, restricted to the patch columns, blends
//! the per-head rows with a learnable softmax-weighted mixture, and turns
//! the blend into a probability vector over the patch grid. Everything is
//! differentiable, so a loss on the resulting distribution trains both
//! the mixing weights and the encoder underneath it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Probability vector over the patch grid, with its grid geometry.
#[derive(Debug, Clone)]
pub struct SemanticDistribution {
    pub probs: Vec<f32>,
    pub gh: usize,
    pub gw: usize,
}

impl SemanticDistribution {
    pub fn n(&self) -> usize {
        self.gh * self.gw
    }

    /// Checks the probability-vector contract: nonnegative entries that
    /// sum to one within 1e-6, one entry per grid cell.
    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.n() {
            return Err(Error::shape(format!(
                "distribution has {} entries for a {}x{} grid",
                self.probs.len(),
                self.gh,
                self.gw
            )));
        }
        let mut sum = 0.0f64;
        for &p in &self.probs {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::numeric(format!("invalid probability {p}")));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::numeric(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Learnable per-head mixing logits; softmax of these weights the heads.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub logits: Tensor,
}

impl HeadWeights {
    /// Zero logits, i.e. a uniform mixture over heads.
    pub fn zeros(num_heads: usize) -> Self {
        Self {
            logits: Tensor::zeros(&[num_heads]),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.logits.len()
    }

    pub fn validate(&self, num_heads: usize) -> Result<()> {
        if self.logits.shape() != [num_heads] {
            return Err(Error::shape(format!(
                "head weights have shape {:?}, expected [{num_heads}]",
                self.logits.shape()
            )));
        }
        Ok(())
    }

    pub fn insert_named(&self, name: &str, map: &mut BTreeMap<String, Tensor>) {
        map.insert(name.to_string(), self.logits.clone());
    }

    pub fn from_named(name: &str, map: &BTreeMap<String, Tensor>, num_heads: usize) -> Result<Self> {
        let logits = map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("checkpoint is missing tensor {name}")))?;
        let hw = Self { logits };
        hw.validate(num_heads)?;
        Ok(hw)
    }
}

/// Whether heads are blended on raw attention logits (then one softmax)
/// or on post-softmax attention rows (then an L1 renormalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    PreSoftmax,
    PostSoftmax,
}

/// Extracts the query row of one pooled summary token from a per-head
/// attention matrix, keeping only the `num_patches` patch columns.
/// `cls_index` is an absolute token row and must address a summary token,
/// i.e. lie at or beyond `num_patches`.
pub fn cls_attention_row(
    tape: &mut Tape,
    attn: NodeId,
    num_patches: usize,
    cls_index: usize,
) -> Result<NodeId> {
    let shape = tape.shape(attn).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!(
            "attention matrix must be square, got {shape:?}"
        )));
    }
    let t = shape[0];
    if num_patches > t {
        return Err(Error::shape(format!(
            "{num_patches} patch columns exceed token count {t}"
        )));
    }
    if cls_index >= t {
        return Err(Error::shape(format!(
            "cls_index {cls_index} out of range for {t} tokens"
        )));
    }
    if cls_index < num_patches {
        return Err(Error::contract(format!(
            "cls_index {cls_index} addresses a patch token; summary tokens start at {num_patches}"
        )));
    }
    let row = tape.slice_rows(attn, cls_index, cls_index + 1)?;
    let patch_cols = tape.slice_cols(row, 0, num_patches)?;
    tape.reshape(patch_cols, &[num_patches])
}

/// Convex combination of per-head rows, weighted by softmax(hw logits).
/// Differentiable with respect to both the rows and the logits.
pub fn aggregate_heads(tape: &mut Tape, rows: &[NodeId], hw: NodeId) -> Result<NodeId> {
    if rows.is_empty() {
        return Err(Error::shape("aggregate_heads needs at least one row".to_string()));
    }
    let hw_shape = tape.shape(hw).to_vec();
    if hw_shape != [rows.len()] {
        return Err(Error::shape(format!(
            "head weights have shape {hw_shape:?} for {} heads",
            rows.len()
        )));
    }
    let n = tape.shape(rows[0]).to_vec();
    if n.len() != 1 {
        return Err(Error::shape("aggregate_heads expects rank-1 rows".to_string()));
    }
    let stacked = tape.stack_rows(rows)?;
    let weights = tape.softmax(hw, 0)?;
    let weights_row = tape.reshape(weights, &[1, rows.len()])?;
    let mixed = tape.matmul(weights_row, stacked)?;
    tape.reshape(mixed, &[n[0]])
}

/// Softmax over patch logits, returned both as a tape node (for downstream
/// differentiable consumers) and as a validated plain snapshot.
pub fn patch_distribution(
    tape: &mut Tape,
    logits: NodeId,
    grid: (usize, usize),
) -> Result<(NodeId, SemanticDistribution)> {
    let shape = tape.shape(logits).to_vec();
    let n = grid.0 * grid.1;
    if shape != [n] {
        return Err(Error::shape(format!(
            "patch logits have shape {shape:?} for a {}x{} grid",
            grid.0, grid.1
        )));
    }
    if !tape.value(logits).all_finite() {
        return Err(Error::numeric("patch logits contain non-finite values".to_string()));
    }
    let probs = tape.softmax(logits, 0)?;
    let dist = SemanticDistribution {
        probs: tape.value(probs).data().to_vec(),
        gh: grid.0,
        gw: grid.1,
    };
    dist.validate()?;
    Ok((probs, dist))
}

/// Full path from exported attention to the patch distribution: pick the
/// summary-token row per head, blend heads, normalize. `attn_logits` and
/// `attn_post` are one layer's per-head matrices before and after the row
/// softmax; which of the two feeds the blend depends on `mode`.
#[allow(clippy::too_many_arguments)]
pub fn semantic_from_attention(
    tape: &mut Tape,
    attn_logits: &[NodeId],
    attn_post: &[NodeId],
    num_patches: usize,
    cls_index: usize,
    hw: NodeId,
    mode: AggregationMode,
    grid: (usize, usize),
) -> Result<(NodeId, SemanticDistribution)> {
    if attn_logits.len() != attn_post.len() || attn_logits.is_empty() {
        return Err(Error::shape(
            "per-head attention lists must be non-empty and equal length".to_string(),
        ));
    }
    let source = match mode {
        AggregationMode::PreSoftmax => attn_logits,
        AggregationMode::PostSoftmax => attn_post,
    };
    let rows = source
        .iter()
        .map(|&a| cls_attention_row(tape, a, num_patches, cls_index))
        .collect::<Result<Vec<_>>>()?;
    let mixed = aggregate_heads(tape, &rows, hw)?;
    match mode {
        AggregationMode::PreSoftmax => patch_distribution(tape, mixed, grid),
        AggregationMode::PostSoftmax => {
            let n = grid.0 * grid.1;
            let shape = tape.shape(mixed).to_vec();
            if shape != [n] {
                return Err(Error::shape(format!(
                    "mixed attention mass has shape {shape:?} for a {}x{} grid",
                    grid.0, grid.1
                )));
            }
            let probs = tape.normalize_l1(mixed)?;
            let dist = SemanticDistribution {
                probs: tape.value(probs).data().to_vec(),
                gh: grid.0,
                gw: grid.1,
            };
            dist.validate()?;
            Ok((probs, dist))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_token_matrix, EncoderBinding, EncoderConfig, EncoderParams};
    use crate::numerics::{grad_check, RngStream};

    fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn cls_row_drops_summary_columns() {
        let mut tape = Tape::new();
        let attn = tape.leaf(tensor(
            &[4, 4],
            vec![
                0.0, 1.0, 2.0, 3.0, //
                4.0, 5.0, 6.0, 7.0, //
                8.0, 9.0, 10.0, 11.0, //
                12.0, 13.0, 14.0, 15.0,
            ],
        ));
        let row = cls_attention_row(&mut tape, attn, 3, 3).unwrap();
        assert_eq!(tape.value(row).data(), &[12.0, 13.0, 14.0]);
    }

    #[test]
    fn cls_row_matches_index_oracle_on_random_maps() {
        let mut rng = RngStream::new(2, 0);
        for trial in 0..20 {
            let t = 3 + (trial % 4);
            let n = t - 1 - (trial % 2).min(t - 2);
            let data: Vec<f32> = (0..t * t).map(|_| rng.normal_f64() as f32).collect();
            let mut tape = Tape::new();
            let attn = tape.leaf(tensor(&[t, t], data.clone()));
            let cls = n + (t - n - 1).min(trial % 3);
            let row = cls_attention_row(&mut tape, attn, n, cls).unwrap();
            let expect: Vec<f32> = (0..n).map(|c| data[cls * t + c]).collect();
            assert_eq!(tape.value(row).data(), expect.as_slice());
        }
    }

    #[test]
    fn cls_row_rejects_patch_queries() {
        let mut tape = Tape::new();
        let attn = tape.leaf(Tensor::zeros(&[4, 4]));
        let err = cls_attention_row(&mut tape, attn, 3, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = cls_attention_row(&mut tape, attn, 3, 9).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn uniform_attention_gives_constant_row() {
        let mut tape = Tape::new();
        let attn = tape.leaf(Tensor::full(&[3, 3], 0.7));
        let row = cls_attention_row(&mut tape, attn, 2, 2).unwrap();
        assert_eq!(tape.value(row).data(), &[0.7, 0.7]);
    }

    #[test]
    fn identical_head_rows_survive_any_weighting() {
        let mut tape = Tape::new();
        let shared = vec![0.4f32, -1.2, 2.2];
        let a = tape.leaf(tensor(&[3], shared.clone()));
        let b = tape.leaf(tensor(&[3], shared.clone()));
        let hw = tape.leaf(tensor(&[2], vec![1.3, -0.4]));
        let mixed = aggregate_heads(&mut tape, &[a, b], hw).unwrap();
        for (m, s) in tape.value(mixed).data().iter().zip(&shared) {
            assert!((m - s).abs() < 1e-6);
        }
    }

    #[test]
    fn dominant_logit_selects_its_head() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[2], vec![5.0, -5.0]));
        let b = tape.leaf(tensor(&[2], vec![-3.0, 3.0]));
        let hw = tape.leaf(tensor(&[2], vec![0.0, 20.0]));
        let mixed = aggregate_heads(&mut tape, &[a, b], hw).unwrap();
        let got = tape.value(mixed).data();
        assert!((got[0] - -3.0).abs() < 1e-4);
        assert!((got[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn equal_weights_average_two_heads() {
        let mut rng = RngStream::new(6, 0);
        let ra: Vec<f32> = (0..5).map(|_| rng.normal_f64() as f32).collect();
        let rb: Vec<f32> = (0..5).map(|_| rng.normal_f64() as f32).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[5], ra.clone()));
        let b = tape.leaf(tensor(&[5], rb.clone()));
        let hw = tape.leaf(Tensor::zeros(&[2]));
        let mixed = aggregate_heads(&mut tape, &[a, b], hw).unwrap();
        for i in 0..5 {
            let want = 0.5 * (ra[i] + rb[i]);
            assert!((tape.value(mixed).data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn distribution_examples_pin_softmax_values() {
        let mut tape = Tape::new();
        let flat = tape.leaf(Tensor::full(&[4], 2.5));
        let (_, dist) = patch_distribution(&mut tape, flat, (2, 2)).unwrap();
        for &p in &dist.probs {
            assert!((p - 0.25).abs() < 1e-6);
        }

        let mut tape = Tape::new();
        let pair = tape.leaf(tensor(&[2], vec![1f32.ln(), 3f32.ln()]));
        let (_, dist) = patch_distribution(&mut tape, pair, (1, 2)).unwrap();
        assert!((dist.probs[0] - 0.25).abs() < 1e-6);
        assert!((dist.probs[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn distribution_matches_high_precision_oracle() {
        let mut rng = RngStream::new(12, 0);
        let logits: Vec<f32> = (0..16).map(|_| (rng.normal_f64() * 2.0) as f32).collect();
        let mut tape = Tape::new();
        let node = tape.leaf(tensor(&[16], logits.clone()));
        let (_, dist) = patch_distribution(&mut tape, node, (4, 4)).unwrap();
        let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&l| ((l as f64) - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (p, e) in dist.probs.iter().zip(&exps) {
            assert!((((*p as f64) - e / z) as f64).abs() < 1e-6);
        }
        dist.validate().unwrap();
    }

    #[test]
    fn distributions_sum_to_one_across_many_random_states() {
        let mut rng = RngStream::new(40, 0);
        for _ in 0..50 {
            let n = 2 + rng.range_usize(30);
            let logits: Vec<f32> = (0..n).map(|_| (rng.normal_f64() * 3.0) as f32).collect();
            let mut tape = Tape::new();
            let node = tape.leaf(tensor(&[n], logits));
            let (_, dist) = patch_distribution(&mut tape, node, (1, n)).unwrap();
            dist.validate().unwrap();
        }
    }

    #[test]
    fn raising_one_logit_strictly_raises_its_probability() {
        let base = vec![0.2f32, -0.5, 1.0, 0.3];
        let mut tape = Tape::new();
        let node = tape.leaf(tensor(&[4], base.clone()));
        let (_, before) = patch_distribution(&mut tape, node, (2, 2)).unwrap();
        let mut bumped = base.clone();
        bumped[1] += 0.3;
        let mut tape = Tape::new();
        let node = tape.leaf(tensor(&[4], bumped));
        let (_, after) = patch_distribution(&mut tape, node, (2, 2)).unwrap();
        assert!(after.probs[1] > before.probs[1]);
        for i in [0usize, 2, 3] {
            assert!(after.probs[i] < before.probs[i]);
        }
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        let mut tape = Tape::new();
        let node = tape.leaf(tensor(&[2], vec![f32::NAN, 0.0]));
        let err = patch_distribution(&mut tape, node, (1, 2)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    fn tiny_encoder() -> (EncoderConfig, EncoderParams) {
        let cfg = EncoderConfig {
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            num_pseudo_cls: 1,
        };
        let params = EncoderParams::init(&cfg, 8, &mut RngStream::new(77, 0)).unwrap();
        (cfg, params)
    }

    #[test]
    fn gradient_reaches_head_weights_and_encoder() {
        let (cfg, params) = tiny_encoder();
        let mut rng = RngStream::new(91, 0);
        let toks: Vec<f32> = (0..4 * 8).map(|_| rng.normal_f64() as f32 * 0.5).collect();
        let input = tensor(&[4, 8], toks);
        let target = tensor(&[4], vec![0.9, 0.1, -0.4, 0.2]);

        let run = |tape: &mut Tape, hw_node: NodeId, input: &Tensor, params: &EncoderParams| {
            let bind = EncoderBinding::bind(tape, params, false);
            let x = tape.constant(input.clone());
            let out = encode_token_matrix(tape, x, 4, (2, 2), &cfg, &bind)?;
            let last = out.attn_logits.last().unwrap().clone();
            let post = out.attn.last().unwrap().clone();
            let (probs, _) = semantic_from_attention(
                tape,
                &last,
                &post,
                4,
                4,
                hw_node,
                AggregationMode::PreSoftmax,
                (2, 2),
            )?;
            let t = tape.constant(target.clone());
            let prod = tape.mul(probs, t)?;
            Ok(tape.sum_all(prod))
        };

        let input_c = input.clone();
        let params_c = params.clone();
        let err = grad_check(
            move |tape, hw| run(tape, hw, &input_c, &params_c),
            &Tensor::new(&[2], vec![0.3, -0.2]).unwrap(),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "head-weight gradient mismatch {err}");

        let params_c = params.clone();
        let hw_t = Tensor::new(&[2], vec![0.3, -0.2]).unwrap();
        let target2 = tensor(&[4], vec![0.9, 0.1, -0.4, 0.2]);
        let cfg2 = cfg.clone();
        let err = grad_check(
            move |tape, x| {
                let bind = EncoderBinding::bind(tape, &params_c, false);
                let out = encode_token_matrix(tape, x, 4, (2, 2), &cfg2, &bind)?;
                let last = out.attn_logits.last().unwrap().clone();
                let post = out.attn.last().unwrap().clone();
                let hw_node = tape.constant(hw_t.clone());
                let (probs, _) = semantic_from_attention(
                    tape,
                    &last,
                    &post,
                    4,
                    4,
                    hw_node,
                    AggregationMode::PreSoftmax,
                    (2, 2),
                )?;
                let t = tape.constant(target2.clone());
                let prod = tape.mul(probs, t)?;
                Ok(tape.sum_all(prod))
            },
            &input,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "token gradient mismatch {err}");
    }

    #[test]
    fn post_softmax_mode_returns_a_valid_distribution() {
        let (cfg, params) = tiny_encoder();
        let mut rng = RngStream::new(93, 0);
        let toks: Vec<f32> = (0..4 * 8).map(|_| rng.normal_f64() as f32 * 0.5).collect();
        let mut tape = Tape::new();
        let bind = EncoderBinding::bind(&mut tape, &params, false);
        let x = tape.constant(tensor(&[4, 8], toks));
        let out = encode_token_matrix(&mut tape, x, 4, (2, 2), &cfg, &bind).unwrap();
        let hw = tape.leaf(Tensor::zeros(&[2]));
        let last = out.attn_logits.last().unwrap().clone();
        let post = out.attn.last().unwrap().clone();
        let (_, dist) = semantic_from_attention(
            &mut tape,
            &last,
            &post,
            4,
            4,
            hw,
            AggregationMode::PostSoftmax,
            (2, 2),
        )
        .unwrap();
        dist.validate().unwrap();
    }
}
