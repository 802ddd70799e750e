//! Hard and differentiable top-K selection.
//!
//! The hard selector encodes the K largest scores as one-hot indicator
//! columns (column k marks the rank-k index). The soft selector averages hard
//! selections over M Gaussian perturbations of the scores, which smooths the
//! selection into a differentiable function of the scores; its gradient is
//! estimated in score-function form, replaying the same noise draws as the
//! forward pass (common random numbers) with the in-batch mean as a control
//! variate.

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{BackwardFn, NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Selection indicators: `y` is [N, K] with one column per selected slot.
#[derive(Debug, Clone)]
pub struct TopKIndicators {
    /// [N, K] indicator matrix. Hard mode: exact one-hot columns. Soft mode:
    /// Monte Carlo averages, entries in [0, 1], columns summing to 1.
    pub y: Tensor,
    /// Noise scale used (0 for hard selection).
    pub sigma: f32,
    /// Monte Carlo sample count (1 for hard selection).
    pub num_samples: usize,
    /// K as requested by the caller, before any clamping.
    pub k_requested: usize,
    /// True when K exceeded N and was clamped; callers should surface this
    /// as a degraded-input notice.
    pub clamped: bool,
    /// True for Monte Carlo indicators, false for hard one-hot columns.
    pub soft: bool,
    /// (seed, stream_id, counter) of the rng at the start of the forward
    /// draws; the backward pass must replay from exactly this state.
    episode: Option<(u64, u64, u64)>,
}

impl TopKIndicators {
    /// Effective K (after clamping).
    pub fn k(&self) -> usize {
        self.y.shape()[1]
    }

    /// Index with the largest indicator weight per column; for hard
    /// indicators this is exactly the selection, ties toward lower index.
    pub fn column_argmax(&self) -> Vec<usize> {
        let (n, k) = (self.y.shape()[0], self.y.shape()[1]);
        let mut out = Vec::with_capacity(k);
        for col in 0..k {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for row in 0..n {
                let v = self.y.at2(row, col);
                if v > best_v {
                    best_v = v;
                    best = row;
                }
            }
            out.push(best);
        }
        out
    }
}

fn check_scores(p: &[f32]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::contract("top-K over an empty score vector".to_string()));
    }
    for (i, &v) in p.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(format!("top-K score [{i}] is non-finite ({v})")));
        }
    }
    Ok(())
}

/// Indices of the `k` largest entries, descending by value, ties broken
/// toward the lower index. `k` is clamped to `p.len()`; the bool reports
/// whether clamping happened.
fn ranked_indices(p: &[f32], k: usize) -> Result<(Vec<usize>, bool)> {
    check_scores(p)?;
    if k == 0 {
        return Err(Error::contract("top-K with K = 0".to_string()));
    }
    let clamped = k > p.len();
    let k_eff = k.min(p.len());
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        p[b].partial_cmp(&p[a]).expect("scores checked finite").then(a.cmp(&b))
    });
    idx.truncate(k_eff);
    Ok((idx, clamped))
}

fn one_hot_columns(n: usize, indices: &[usize]) -> Tensor {
    let k = indices.len();
    let mut y = Tensor::zeros(&[n, k]);
    for (col, &row) in indices.iter().enumerate() {
        y.data_mut()[row * k + col] = 1.0;
    }
    y
}

/// Hard top-K: one-hot indicator columns for the K largest scores.
pub fn hard_topk(p: &[f32], k: usize) -> Result<TopKIndicators> {
    let (indices, clamped) = ranked_indices(p, k)?;
    Ok(TopKIndicators {
        y: one_hot_columns(p.len(), &indices),
        sigma: 0.0,
        num_samples: 1,
        k_requested: k,
        clamped,
        soft: false,
        episode: None,
    })
}

/// Hard top-K indices (rank order), with the same clamping behavior.
pub fn hard_topk_indices(p: &[f32], k: usize) -> Result<Vec<usize>> {
    Ok(ranked_indices(p, k)?.0)
}

fn rng_state(rng: &RngStream) -> (u64, u64, u64) {
    (rng.seed(), rng.stream_id(), rng.counter())
}

/// Soft top-K: Y = (1/M) sum_j hard_topk(p + sigma * z_j), z_j ~ N(0, I).
///
/// Per-cell selection counts are accumulated as integers and divided once,
/// so the output is exact for the drawn noise set. The rng is advanced past
/// the episode's draws; the backward pass must start from the same state.
pub fn perturbed_topk_forward(
    p: &[f32],
    k: usize,
    sigma: f32,
    num_samples: usize,
    rng: &mut RngStream,
) -> Result<TopKIndicators> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("perturbed top-K needs sigma > 0, got {sigma}")));
    }
    if num_samples == 0 {
        return Err(Error::contract("perturbed top-K needs at least one sample".to_string()));
    }
    check_scores(p)?;
    if k == 0 {
        return Err(Error::contract("top-K with K = 0".to_string()));
    }
    let n = p.len();
    let k_eff = k.min(n);
    let clamped = k > n;
    let episode = rng_state(rng);

    let mut counts = vec![0u32; n * k_eff];
    let mut noisy = vec![0.0f32; n];
    for _ in 0..num_samples {
        for (out, &base) in noisy.iter_mut().zip(p) {
            *out = base + sigma * rng.normal();
        }
        let (indices, _) = ranked_indices(&noisy, k_eff)?;
        for (col, &row) in indices.iter().enumerate() {
            counts[row * k_eff + col] += 1;
        }
    }
    let inv = 1.0 / num_samples as f64;
    let y = Tensor::new(
        &[n, k_eff],
        counts.iter().map(|&c| (c as f64 * inv) as f32).collect(),
    )?;
    Ok(TopKIndicators {
        y,
        sigma,
        num_samples,
        k_requested: k,
        clamped,
        soft: true,
        episode: Some(episode),
    })
}

/// Score-function gradient of <upstream, Y_sigma> w.r.t. the scores, using
/// common random numbers with the paired forward.
///
/// Each replayed draw contributes (s_j - c) * z_j / sigma, where s_j is the
/// upstream contraction with that draw's hard selection and c = <upstream, Y>
/// is the in-batch mean; the sum is scaled by 1/(M-1) so the control variate
/// introduces no bias. For M = 1 the raw single-sample form s_0 * z_0 / sigma
/// is returned.
pub fn perturbed_topk_backward(
    p: &[f32],
    indicators: &TopKIndicators,
    rng: &mut RngStream,
    upstream: &[f32],
) -> Result<Tensor> {
    let n = p.len();
    let k_eff = indicators.k();
    if indicators.y.shape()[0] != n {
        return Err(Error::shape(format!(
            "backward: scores length {n} vs indicator rows {}",
            indicators.y.shape()[0]
        )));
    }
    if upstream.len() != n * k_eff {
        return Err(Error::shape(format!(
            "backward: upstream length {} vs {}x{}",
            upstream.len(),
            n,
            k_eff
        )));
    }
    let Some(episode) = indicators.episode else {
        return Err(Error::contract(
            "backward on hard indicators (no rng episode recorded)".to_string(),
        ));
    };
    if rng_state(rng) != episode {
        return Err(Error::contract(format!(
            "rng episode mismatch: forward started at {:?}, backward given {:?}",
            episode,
            rng_state(rng)
        )));
    }
    let sigma = indicators.sigma;
    let m = indicators.num_samples;

    // c = <upstream, Y> over the episode's own mean indicators.
    let mut c = 0.0f64;
    for (u, y) in upstream.iter().zip(indicators.y.data()) {
        c += *u as f64 * *y as f64;
    }

    let mut grad = vec![0.0f64; n];
    let mut z = vec![0.0f32; n];
    let mut noisy = vec![0.0f32; n];
    for _ in 0..m {
        for i in 0..n {
            z[i] = rng.normal();
            noisy[i] = p[i] + sigma * z[i];
        }
        let (indices, _) = ranked_indices(&noisy, k_eff)?;
        let mut s = 0.0f64;
        for (col, &row) in indices.iter().enumerate() {
            s += upstream[row * k_eff + col] as f64;
        }
        let w = if m == 1 { s } else { s - c };
        for i in 0..n {
            grad[i] += w * z[i] as f64;
        }
    }
    let denom = if m == 1 { sigma as f64 } else { sigma as f64 * (m - 1) as f64 };
    Tensor::new(&[n], grad.iter().map(|&g| (g / denom) as f32).collect())
}

/// Records perturbed top-K selection of a rank-1 score node on the tape.
///
/// The forward draws advance `rng`; the backward closure replays them from a
/// clone of the pre-forward state. Returns the [N, K] indicator node along
/// with the indicator metadata.
pub fn perturbed_topk_node(
    tape: &mut Tape,
    scores: NodeId,
    k: usize,
    sigma: f32,
    num_samples: usize,
    rng: &mut RngStream,
) -> Result<(NodeId, TopKIndicators)> {
    let p = tape.value(scores);
    if p.rank() != 1 {
        return Err(Error::shape(format!(
            "perturbed_topk_node: scores must be rank 1, got {:?}",
            p.shape()
        )));
    }
    let replay = rng.clone();
    let indicators = perturbed_topk_forward(p.data(), k, sigma, num_samples, rng)?;
    let tracked = tape.is_tracked(scores);
    let meta = indicators.clone();
    let back: BackwardFn = Box::new(move |v, up, g| {
        let p_now = v.value(scores).data();
        let mut r = replay.clone();
        let grad = perturbed_topk_backward(p_now, &meta, &mut r, up)
            .expect("replayed backward uses the forward's own shapes and rng state");
        g.add(scores, grad.data());
    });
    let node = tape.push_custom(indicators.y.clone(), tracked, Some(back));
    Ok((node, indicators))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_scores(rng: &mut RngStream, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn forced_ordering_and_tie_break() {
        let ind = hard_topk(&[0.1, 0.5, 0.4], 2).unwrap();
        assert_eq!(ind.column_argmax(), vec![1, 2]);
        let tie = hard_topk(&[0.5, 0.5], 1).unwrap();
        assert_eq!(tie.column_argmax(), vec![0], "ties break toward the lower index");
        let all_tied = hard_topk(&[0.5; 6], 3).unwrap();
        assert_eq!(all_tied.column_argmax(), vec![0, 1, 2]);
    }

    #[test]
    fn hard_matches_sort_oracle() {
        let mut rng = RngStream::new(41, 0);
        for trial in 0..50 {
            let p = random_scores(&mut rng, 32);
            let got = hard_topk_indices(&p, 8).unwrap();
            // Independent oracle: stable full sort of (value desc, index asc).
            let mut pairs: Vec<(usize, f32)> = p.iter().copied().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = pairs.iter().take(8).map(|(i, _)| *i).collect();
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn hard_columns_are_one_hot_and_distinct() {
        let ind = hard_topk(&[0.3, 0.9, 0.1, 0.5], 3).unwrap();
        let (n, k) = (4, 3);
        let mut seen_rows = Vec::new();
        for col in 0..k {
            let mut ones = 0;
            for row in 0..n {
                let v = ind.y.at2(row, col);
                assert!(v == 0.0 || v == 1.0);
                if v == 1.0 {
                    ones += 1;
                    seen_rows.push(row);
                }
            }
            assert_eq!(ones, 1, "column {col} must be one-hot");
        }
        seen_rows.sort_unstable();
        seen_rows.dedup();
        assert_eq!(seen_rows.len(), k, "selected indices must be distinct");
    }

    #[test]
    fn k_larger_than_n_clamps_with_notice() {
        let ind = hard_topk(&[0.2, 0.1], 5).unwrap();
        assert!(ind.clamped);
        assert_eq!(ind.k(), 2);
        assert_eq!(ind.k_requested, 5);
        let mut rng = RngStream::new(1, 1);
        let soft = perturbed_topk_forward(&[0.2, 0.1], 5, 0.1, 10, &mut rng).unwrap();
        assert!(soft.clamped);
        assert_eq!(soft.k(), 2);
    }

    #[test]
    fn invalid_inputs_are_rejected_by_category() {
        assert!(matches!(hard_topk(&[0.1, f32::NAN], 1), Err(Error::Numeric(_))));
        assert!(matches!(hard_topk(&[0.1, 0.2], 0), Err(Error::Contract(_))));
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            perturbed_topk_forward(&[0.1], 1, 0.0, 5, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            perturbed_topk_forward(&[0.1], 1, -1.0, 5, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            perturbed_topk_forward(&[0.1], 1, 0.1, 0, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn vanishing_noise_equals_hard_selection() {
        let mut rng = RngStream::new(42, 0);
        for trial in 0..100 {
            let sigma = 1e-6f32;
            // Enforce pairwise gaps > 10 sigma by spacing draws out.
            let mut p = random_scores(&mut rng, 8);
            loop {
                let mut sorted = p.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if sorted.windows(2).all(|w| w[1] - w[0] > 10.0 * sigma) {
                    break;
                }
                p = random_scores(&mut rng, 8);
            }
            let hard = hard_topk_indices(&p, 3).unwrap();
            let soft = perturbed_topk_forward(&p, 3, sigma, 1, &mut rng).unwrap();
            assert_eq!(soft.column_argmax(), hard, "trial {trial}");
        }
    }

    #[test]
    fn exhaustive_selection_gives_unit_row_sums() {
        let mut rng = RngStream::new(43, 0);
        let soft = perturbed_topk_forward(&[0.7, 0.2], 2, 0.3, 500, &mut rng).unwrap();
        for row in 0..2 {
            let sum: f32 = (0..2).map(|c| soft.y.at2(row, c)).sum();
            assert_eq!(sum, 1.0, "row {row} must sum to exactly 1 when K=N");
        }
    }

    #[test]
    fn soft_entries_bounded_and_columns_stochastic() {
        let mut rng = RngStream::new(44, 0);
        let p = random_scores(&mut rng, 16);
        let soft = perturbed_topk_forward(&p, 5, 0.05, 400, &mut rng).unwrap();
        for &v in soft.y.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        for col in 0..5 {
            let sum: f64 = (0..16).map(|r| soft.y.at2(r, col) as f64).sum();
            assert!((sum - 1.0).abs() < 1e-3, "column {col} sums to {sum}");
        }
    }

    #[test]
    fn two_seed_monte_carlo_estimates_agree() {
        // Scaled-down version of the million-sample agreement check.
        let p = [0.4f32, 0.3, 0.2, 0.1];
        let mut rng_a = RngStream::new(7, 100);
        let mut rng_b = RngStream::new(8, 200);
        let a = perturbed_topk_forward(&p, 2, 0.1, 50_000, &mut rng_a).unwrap();
        let b = perturbed_topk_forward(&p, 2, 0.1, 50_000, &mut rng_b).unwrap();
        for (x, y) in a.y.data().iter().zip(b.y.data()) {
            assert!((x - y).abs() < 2e-2, "independent estimates differ: {x} vs {y}");
        }
    }

    #[test]
    fn forward_is_deterministic_for_equal_rng_state() {
        let p = [0.9f32, 0.1, 0.5, 0.3, 0.2];
        let mut r1 = RngStream::new(5, 77);
        let mut r2 = RngStream::new(5, 77);
        let a = perturbed_topk_forward(&p, 2, 0.1, 300, &mut r1).unwrap();
        let b = perturbed_topk_forward(&p, 2, 0.1, 300, &mut r2).unwrap();
        assert_eq!(a.y.data(), b.y.data());
        assert_eq!(r1.counter(), r2.counter());
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradient() {
        let p = [0.4f32, 0.1, 0.3];
        let mut rng = RngStream::new(9, 3);
        let replay = rng.clone();
        let ind = perturbed_topk_forward(&p, 2, 0.1, 200, &mut rng).unwrap();
        let mut r = replay;
        let grad = perturbed_topk_backward(&p, &ind, &mut r, &vec![0.0; 6]).unwrap();
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_saturated_selection_with_symmetric_upstream_is_zero() {
        // K = N: every draw selects all indices, so an upstream that weighs
        // the K slots symmetrically sees a constant contraction.
        let p = [0.5f32, 0.1, 0.9, 0.3];
        let mut rng = RngStream::new(10, 4);
        let replay = rng.clone();
        let ind = perturbed_topk_forward(&p, 4, 0.2, 2_000, &mut rng).unwrap();
        let mut r = replay;
        let grad = perturbed_topk_backward(&p, &ind, &mut r, &vec![1.0; 16]).unwrap();
        for &g in grad.data() {
            assert!(g.abs() < 1e-3, "saturated selection gradient should vanish, got {g}");
        }
    }

    #[test]
    fn backward_requires_the_paired_rng_state() {
        let p = [0.4f32, 0.1, 0.3];
        let mut rng = RngStream::new(11, 5);
        let ind = perturbed_topk_forward(&p, 2, 0.1, 50, &mut rng).unwrap();
        // rng has advanced past the episode; reusing it is a contract error.
        let err = perturbed_topk_backward(&p, &ind, &mut rng, &vec![1.0; 6]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
        // Hard indicators carry no episode at all.
        let hard = hard_topk(&p, 2).unwrap();
        let mut fresh = RngStream::new(11, 5);
        let err = perturbed_topk_backward(&p, &hard, &mut fresh, &vec![1.0; 6]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn backward_replay_is_bitwise_reproducible() {
        let p = [0.44f32, 0.31, 0.27, 0.58];
        let mut rng = RngStream::new(12, 6);
        let replay = rng.clone();
        let ind = perturbed_topk_forward(&p, 2, 0.15, 500, &mut rng).unwrap();
        let upstream: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin()).collect();
        let g1 = perturbed_topk_backward(&p, &ind, &mut replay.clone(), &upstream).unwrap();
        let g2 = perturbed_topk_backward(&p, &ind, &mut replay.clone(), &upstream).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradient_variance_quarters_when_samples_quadruple() {
        // Sample variance of the estimator across independent episodes.
        let p = [0.50f32, 0.45, 0.40, 0.35, 0.30, 0.25];
        let upstream: Vec<f32> = (0..12).map(|i| ((i * 7 + 3) % 5) as f32 * 0.25).collect();
        let trials = 20;
        let var_at = |m: usize, base_stream: u64| -> f64 {
            let mut grads = Vec::new();
            for t in 0..trials {
                let mut rng = RngStream::new(99, base_stream + t as u64);
                let replay = rng.clone();
                let ind = perturbed_topk_forward(&p, 2, 0.1, m, &mut rng).unwrap();
                let g = perturbed_topk_backward(&p, &ind, &mut replay.clone(), &upstream).unwrap();
                grads.push(g.into_data());
            }
            // Mean per-component variance across trials.
            let n = p.len();
            let mut total = 0.0f64;
            for i in 0..n {
                let xs: Vec<f64> = grads.iter().map(|g| g[i] as f64).collect();
                let mean = xs.iter().sum::<f64>() / trials as f64;
                let var =
                    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (trials - 1) as f64;
                total += var;
            }
            total / n as f64
        };
        let v_small = var_at(150, 1000);
        let v_big = var_at(600, 5000);
        let ratio = v_small / v_big;
        assert!(
            (2.2..=7.5).contains(&ratio),
            "variance should scale ~1/M: var(150)/var(600) = {ratio}"
        );
    }

    #[test]
    fn tape_node_routes_gradient_to_scores() {
        let p = Tensor::new(&[5], vec![0.35, 0.30, 0.25, 0.20, 0.15]).unwrap();
        let mut rng = RngStream::new(13, 7);
        let replay = rng.clone();
        let mut tape = Tape::new();
        let scores = tape.leaf(p.clone());
        let (ynode, ind) = perturbed_topk_node(&mut tape, scores, 2, 0.1, 400, &mut rng).unwrap();
        // Loss = <W, Y> for a fixed weight matrix.
        let w: Vec<f32> = (0..10).map(|i| (i as f32 * 0.21).cos()).collect();
        let wnode = tape.constant(Tensor::new(&[5, 2], w.clone()).unwrap());
        let prod = tape.mul(ynode, wnode).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        let got = grads.get(scores).unwrap();

        let reference =
            perturbed_topk_backward(p.data(), &ind, &mut replay.clone(), &w).unwrap();
        for (a, b) in got.iter().zip(reference.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "tape gradient must equal the direct estimator");
        }
    }

    #[test]
    fn gradient_matches_paired_finite_differences() {
        // Small version of the definitive finite-difference comparison: the
        // oracle averages several CRN-paired central differences to tame its
        // own Monte Carlo noise.
        let p = [0.62f32, 0.55, 0.48, 0.41];
        let upstream: Vec<f32> = vec![0.9, -0.3, 0.4, 1.1, -0.7, 0.2, 0.5, -0.1];
        let (k, sigma, m) = (2usize, 0.2f32, 20_000usize);
        let mut rng = RngStream::new(14, 8);
        let replay = rng.clone();
        let ind = perturbed_topk_forward(&p, k, sigma, m, &mut rng).unwrap();
        let grad = perturbed_topk_backward(&p, &ind, &mut replay.clone(), &upstream).unwrap();

        let h = 0.02f32;
        let reps = 8;
        for i in 0..4 {
            let mut fd_sum = 0.0f64;
            for rep in 0..reps {
                let mut rp = RngStream::new(500, 900 + rep);
                let mut rm = rp.clone();
                let mut pp = p;
                pp[i] += h;
                let mut pm = p;
                pm[i] -= h;
                let yp = perturbed_topk_forward(&pp, k, sigma, m, &mut rp).unwrap();
                let ym = perturbed_topk_forward(&pm, k, sigma, m, &mut rm).unwrap();
                let mut diff = 0.0f64;
                for (j, u) in upstream.iter().enumerate() {
                    diff += *u as f64 * (yp.y.data()[j] as f64 - ym.y.data()[j] as f64);
                }
                fd_sum += diff / (2.0 * h as f64);
            }
            let fd = fd_sum / reps as f64;
            let rel = (grad.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 0.1, "component {i}: estimator {} vs fd {fd}, rel {rel}", grad.data()[i]);
        }
    }
}
