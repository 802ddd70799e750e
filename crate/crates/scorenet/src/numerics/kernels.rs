//! Flat-slice math kernels.
//!
//! Everything here works on plain `&[f32]` buffers so the same code backs the
//! autodiff tape's forward values and the tape-free inference path. Layout is
//! row-major throughout. Reductions that feed normalization (softmax
//! denominators, layer-norm moments, column means) accumulate in f64;
//! matrix-product accumulation stays in f32.
//!
//! `fast_exp` replaces `f32::exp` in every softmax in the crate: it is a
//! branch-free polynomial (relative error below 3e-7, deterministic across
//! platforms) that the compiler can vectorize inside row loops.

/// Branch-free exp for f32, accurate to ~3e-7 relative error.
///
/// Input is clamped to [-87, 88]; outside that range exp under/overflows f32
/// anyway. Exact at 0.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.987_569_2e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_3e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits((((n as i32) + 127) as u32) << 23)
}

fn check_matmul_dims(
    a: &[f32],
    b: &[f32],
    out: &[f32],
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs buffer length");
    assert_eq!(b.len(), k * n, "matmul: rhs buffer length");
    assert_eq!(out.len(), m * n, "matmul: out buffer length");
}

/// out = A·B where A is logically [m,k] and B is [k,n].
///
/// `trans_a` means A is stored as [k,m] (column access), `trans_b` means B is
/// stored as [n,k]. When `accumulate` is set the product is added onto `out`
/// instead of overwriting it.
pub fn matmul(
    out: &mut [f32],
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    check_matmul_dims(a, b, out, m, k, n);
    if !accumulate {
        out.fill(0.0);
    }
    match (trans_a, trans_b) {
        (false, false) => {
            // i-k-j order: streams B rows, vectorizes over j.
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            // Row-by-row dot products; both operands contiguous.
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0f32;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *o += acc;
                }
            }
        }
        (true, false) => {
            // Rank-1 updates: p outer, vectorizes over j.
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &api) in arow.iter().enumerate() {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f32;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

/// Adds `bias` (length n) to every row of the [m,n] buffer.
pub fn add_bias_rows(x: &mut [f32], bias: &[f32], m: usize, n: usize) {
    assert_eq!(x.len(), m * n);
    assert_eq!(bias.len(), n);
    for r in 0..m {
        let row = &mut x[r * n..(r + 1) * n];
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Numerically stable softmax over one contiguous lane, in place.
pub fn softmax_slice_inplace(x: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in x.iter() {
        if v > max {
            max = v;
        }
    }
    let mut denom = 0.0f64;
    for v in x.iter_mut() {
        let e = fast_exp(*v - max);
        *v = e;
        denom += e as f64;
    }
    let inv = (1.0 / denom) as f32;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the last axis of a [rows, cols] buffer, in place.
pub fn softmax_rows_inplace(x: &mut [f32], rows: usize, cols: usize) {
    assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        softmax_slice_inplace(&mut x[r * cols..(r + 1) * cols]);
    }
}

/// log(sum(exp(x))) with the usual max shift; f64 accumulation.
pub fn log_sum_exp(x: &[f32]) -> f32 {
    let mut max = f32::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut denom = 0.0f64;
    for &v in x {
        denom += fast_exp(v - max) as f64;
    }
    max + denom.ln() as f32
}

/// Per-row layer norm of a [rows, cols] buffer:
/// out = gamma * (x - mean) / sqrt(var + eps) + beta.
///
/// Moments use f64 accumulation; variance is the biased (1/n) form.
pub fn layer_norm_rows(
    out: &mut [f32],
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    rows: usize,
    cols: usize,
    eps: f32,
) {
    assert_eq!(x.len(), rows * cols);
    assert_eq!(out.len(), rows * cols);
    assert_eq!(gamma.len(), cols);
    assert_eq!(beta.len(), cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let (mean, var) = row_moments(row);
        let rstd = 1.0 / (var + eps as f64).sqrt();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let norm = ((row[c] as f64 - mean) * rstd) as f32;
            orow[c] = gamma[c] * norm + beta[c];
        }
    }
}

/// Mean and biased variance of one row, accumulated in f64.
pub fn row_moments(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut sum = 0.0f64;
    for &v in row {
        sum += v as f64;
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for &v in row {
        let d = v as f64 - mean;
        sq += d * d;
    }
    (mean, sq / n)
}

/// GELU with the tanh approximation.
#[inline(always)]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_56; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let t = C * (x + A * x * x * x);
    0.5 * x * (1.0 + t.tanh())
}

/// Derivative of [`gelu`].
#[inline(always)]
pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_56;
    const A: f32 = 0.044_715;
    let t = C * (x + A * x * x * x);
    let th = t.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

pub fn gelu_slice(out: &mut [f32], x: &[f32]) {
    assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu(v);
    }
}

/// Column means of a [rows, cols] buffer into `out` (length cols).
pub fn col_mean(out: &mut [f32], x: &[f32], rows: usize, cols: usize) {
    assert_eq!(x.len(), rows * cols);
    assert_eq!(out.len(), cols);
    assert!(rows > 0, "col_mean over zero rows");
    let mut acc = vec![0.0f64; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / rows as f64;
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a * inv) as f32;
    }
}

/// out = transpose of the [rows, cols] buffer `x`.
pub fn transpose(out: &mut [f32], x: &[f32], rows: usize, cols: usize) {
    assert_eq!(x.len(), rows * cols);
    assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// out += alpha * x
pub fn axpy(out: &mut [f32], alpha: f32, x: &[f32]) {
    assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Dot product with f64 accumulation.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    /// Independent triple-loop reference used to pin the blocked kernels.
    fn matmul_oracle(
        a: &[f32],
        b: &[f32],
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
    ) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    let bv = if trans_b { b[j * k + p] } else { b[p * n + j] };
                    acc += av * bv;
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn random_buf(rng: &mut RngStream, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.normal()).collect()
    }

    fn assert_close_slice(got: &[f32], want: &[f32], tol: f32, what: &str) {
        assert_eq!(got.len(), want.len(), "{what}: length");
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!(
                (g - w).abs() <= tol + tol * w.abs(),
                "{what}: index {i}: got {g}, want {w}"
            );
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_in_all_layouts() {
        let mut rng = RngStream::new(17, 0);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 2), (8, 8, 8), (7, 13, 4)] {
            for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
                let a = random_buf(&mut rng, m * k);
                let b = random_buf(&mut rng, k * n);
                let want = matmul_oracle(&a, &b, m, k, n, ta, tb);
                let mut got = vec![0.0f32; m * n];
                matmul(&mut got, &a, &b, m, k, n, ta, tb, false);
                assert_close_slice(&got, &want, 1e-5, &format!("matmul ta={ta} tb={tb}"));
            }
        }
    }

    #[test]
    fn matmul_accumulate_adds_onto_existing_values() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut out = [10.0f32];
        matmul(&mut out, &a, &b, 1, 2, 1, false, false, true);
        assert_eq!(out[0], 21.0);
    }

    #[test]
    fn softmax_matches_frozen_reference_values() {
        // exp(1)+exp(2)+exp(3) computed at high precision gives these probs.
        let mut x = [1.0f32, 2.0, 3.0];
        softmax_slice_inplace(&mut x);
        let want = [0.090_030_57f32, 0.244_728_47, 0.665_240_96];
        assert_close_slice(&x, &want, 1e-5, "softmax([1,2,3])");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = RngStream::new(3, 1);
        for _ in 0..50 {
            let mut row = random_buf(&mut rng, 40);
            let mut shifted: Vec<f32> = row.iter().map(|v| v + 123.0).collect();
            softmax_slice_inplace(&mut row);
            softmax_slice_inplace(&mut shifted);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "softmax sum {sum}");
            assert_close_slice(&shifted, &row, 1e-6, "shift invariance");
        }
    }

    #[test]
    fn fast_exp_tracks_std_exp() {
        let mut x = -87.0f32;
        while x <= 88.0 {
            let got = fast_exp(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            assert!(rel < 1e-6, "fast_exp({x}) = {got}, want {want}, rel {rel}");
            x += 0.0137;
        }
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(-1000.0), fast_exp(-87.0));
    }

    #[test]
    fn layer_norm_matches_two_pass_reference() {
        // Unit-variance two-point row maps to itself (up to the eps term).
        let x = [1.0f32, -1.0];
        let gamma = [1.0f32, 1.0];
        let beta = [0.0f32, 0.0];
        let mut out = [0.0f32; 2];
        layer_norm_rows(&mut out, &x, &gamma, &beta, 1, 2, 1e-5);
        assert_close_slice(&out, &[1.0, -1.0], 1e-4, "layer_norm([1,-1])");
    }

    #[test]
    fn layer_norm_constant_row_stays_finite() {
        let x = [4.2f32; 8];
        let gamma = [1.0f32; 8];
        let beta = [0.5f32; 8];
        let mut out = [0.0f32; 8];
        layer_norm_rows(&mut out, &x, &gamma, &beta, 1, 8, 1e-5);
        for &v in &out {
            assert!(v.is_finite());
            assert!((v - 0.5).abs() < 1e-5, "constant row should normalize to beta, got {v}");
        }
    }

    #[test]
    fn gelu_values_and_gradient() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(6.0) - 6.0).abs() < 1e-4, "gelu(x) -> x for large x");
        assert!(gelu(-6.0).abs() < 1e-4, "gelu(x) -> 0 for very negative x");
        // Central differences pin the analytic derivative.
        let h = 1e-3f64;
        for &x in &[-3.0f32, -1.0, -0.3, 0.0, 0.4, 1.7, 3.0] {
            let fd = (gelu((x as f64 + h) as f32) as f64 - gelu((x as f64 - h) as f32) as f64)
                / (2.0 * h);
            let an = gelu_grad(x) as f64;
            assert!(
                (fd - an).abs() < 1e-3,
                "gelu_grad({x}): analytic {an}, finite diff {fd}"
            );
        }
    }

    #[test]
    fn col_mean_matches_manual_average() {
        let x = [1.0f32, 2.0, 3.0, 5.0, 6.0, 7.0];
        let mut out = [0.0f32; 3];
        col_mean(&mut out, &x, 2, 3);
        assert_close_slice(&out, &[3.0, 4.0, 5.0], 1e-6, "col_mean");
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = RngStream::new(9, 9);
        let x = random_buf(&mut rng, 3 * 7);
        let mut t = vec![0.0f32; 21];
        let mut back = vec![0.0f32; 21];
        transpose(&mut t, &x, 3, 7);
        transpose(&mut back, &t, 7, 3);
        assert_eq!(back, x);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let x = [1000.0f32, 1000.0];
        let got = log_sum_exp(&x);
        let want = 1000.0 + (2.0f32).ln();
        assert!((got - want).abs() < 1e-3, "lse {got} want {want}");
    }
}
