//! Differentiable operations recorded on a [`Tape`].
//!
//! Each method computes its forward value through the shared kernels, then
//! (when any input is tracked) records a closure that adds the parents'
//! gradient contributions. Gradient buffers are written in place through
//! [`GradStore::slot`] to avoid temporaries.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tape::{BackwardFn, NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Iterates every 1-D lane of `shape` along `axis`, yielding the flat offset
/// of the lane's first element and the stride between its elements.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let lane_stride = strides[axis];
    let total: usize = shape.iter().product();
    let lane_len = shape[axis];
    let lanes = total / lane_len;
    for lane in 0..lanes {
        // Decompose the lane index over every non-axis dimension.
        let mut rem = lane;
        let mut offset = 0usize;
        for d in (0..shape.len()).rev() {
            if d == axis {
                continue;
            }
            let idx = rem % shape[d];
            rem /= shape[d];
            offset += idx * strides[d];
        }
        f(offset, lane_stride);
    }
}

impl Tape {
    fn check_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: mismatched shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Elementwise a + b.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let (ta, tb) = (self.is_tracked(a), self.is_tracked(b));
        let back: BackwardFn = Box::new(move |_v, up, g| {
            if ta {
                g.add(a, up);
            }
            if tb {
                g.add(b, up);
            }
        });
        Ok(self.push_custom(out, ta || tb, Some(back)))
    }

    /// Elementwise a - b.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let (ta, tb) = (self.is_tracked(a), self.is_tracked(b));
        let back: BackwardFn = Box::new(move |_v, up, g| {
            if ta {
                g.add(a, up);
            }
            if tb {
                let slot = g.slot(b, up.len());
                for (s, &u) in slot.iter_mut().zip(up) {
                    *s -= u;
                }
            }
        });
        Ok(self.push_custom(out, ta || tb, Some(back)))
    }

    /// Elementwise a * b.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let (ta, tb) = (self.is_tracked(a), self.is_tracked(b));
        let back: BackwardFn = Box::new(move |v, up, g| {
            if ta {
                let bv = v.value(b).data().to_vec();
                let slot = g.slot(a, up.len());
                for i in 0..up.len() {
                    slot[i] += up[i] * bv[i];
                }
            }
            if tb {
                let av = v.value(a).data().to_vec();
                let slot = g.slot(b, up.len());
                for i in 0..up.len() {
                    slot[i] += up[i] * av[i];
                }
            }
        });
        Ok(self.push_custom(out, ta || tb, Some(back)))
    }

    /// x * c for a compile-time-known scalar.
    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, up.len());
            for (s, &u) in slot.iter_mut().zip(up) {
                *s += c * u;
            }
        });
        self.push_custom(out, tx, Some(back))
    }

    /// Matrix product A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(out.data_mut(), self.value(a).data(), self.value(b).data(), m, k, n, false, false, false);
        let (ta, tb) = (self.is_tracked(a), self.is_tracked(b));
        let back: BackwardFn = Box::new(move |v, up, g| {
            if ta {
                let bv = v.value(b).data().to_vec();
                let slot = g.slot(a, m * k);
                kernels::matmul(slot, up, &bv, m, n, k, false, true, true);
            }
            if tb {
                let av = v.value(a).data().to_vec();
                let slot = g.slot(b, k * n);
                kernels::matmul(slot, &av, up, k, m, n, true, false, true);
            }
        });
        Ok(self.push_custom(out, ta || tb, Some(back)))
    }

    /// A[m,k] · B[n,k]^T -> [m,n].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt: inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(out.data_mut(), self.value(a).data(), self.value(b).data(), m, k, n, false, true, false);
        let (ta, tb) = (self.is_tracked(a), self.is_tracked(b));
        let back: BackwardFn = Box::new(move |v, up, g| {
            if ta {
                let bv = v.value(b).data().to_vec();
                let slot = g.slot(a, m * k);
                kernels::matmul(slot, up, &bv, m, n, k, false, false, true);
            }
            if tb {
                let av = v.value(a).data().to_vec();
                let slot = g.slot(b, n * k);
                kernels::matmul(slot, up, &av, n, m, k, true, false, true);
            }
        });
        Ok(self.push_custom(out, ta || tb, Some(back)))
    }

    /// A[k,m]^T · B[k,n] -> [m,n].
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (k, m) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_tn: inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(out.data_mut(), self.value(a).data(), self.value(b).data(), m, k, n, true, false, false);
        let (ta, tb) = (self.is_tracked(a), self.is_tracked(b));
        let back: BackwardFn = Box::new(move |v, up, g| {
            if ta {
                let bv = v.value(b).data().to_vec();
                let slot = g.slot(a, k * m);
                kernels::matmul(slot, &bv, up, k, n, m, false, true, true);
            }
            if tb {
                let av = v.value(a).data().to_vec();
                let slot = g.slot(b, k * n);
                kernels::matmul(slot, &av, up, k, m, n, false, false, true);
            }
        });
        Ok(self.push_custom(out, ta || tb, Some(back)))
    }

    /// x[t,i] · w[i,o] + bias[o] broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (t, i) = self.value(x).dims2()?;
        let (i2, o) = self.value(w).dims2()?;
        if i != i2 {
            return Err(Error::shape(format!("linear: input dim {i} vs weight dim {i2}")));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::shape(format!(
                "linear: bias shape {:?}, want [{o}]",
                self.value(bias).shape()
            )));
        }
        let mut out = Tensor::zeros(&[t, o]);
        kernels::matmul(out.data_mut(), self.value(x).data(), self.value(w).data(), t, i, o, false, false, false);
        kernels::add_bias_rows(out.data_mut(), self.value(bias).data(), t, o);
        let (tx, tw, tb) = (self.is_tracked(x), self.is_tracked(w), self.is_tracked(bias));
        let back: BackwardFn = Box::new(move |v, up, g| {
            if tx {
                let wv = v.value(w).data().to_vec();
                let slot = g.slot(x, t * i);
                kernels::matmul(slot, up, &wv, t, o, i, false, true, true);
            }
            if tw {
                let xv = v.value(x).data().to_vec();
                let slot = g.slot(w, i * o);
                kernels::matmul(slot, &xv, up, i, t, o, true, false, true);
            }
            if tb {
                let slot = g.slot(bias, o);
                for r in 0..t {
                    for (s, &u) in slot.iter_mut().zip(&up[r * o..(r + 1) * o]) {
                        *s += u;
                    }
                }
            }
        });
        Ok(self.push_custom(out, tx || tw || tb, Some(back)))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = self.value(x).clone();
        let lane_len = shape[axis];
        {
            let data = out.data_mut();
            let mut scratch = vec![0.0f32; lane_len];
            for_each_lane(&shape, axis, |offset, stride| {
                if stride == 1 {
                    kernels::softmax_slice_inplace(&mut data[offset..offset + lane_len]);
                } else {
                    for (s, i) in scratch.iter_mut().zip(0..lane_len) {
                        *s = data[offset + i * stride];
                    }
                    kernels::softmax_slice_inplace(&mut scratch);
                    for (s, i) in scratch.iter().zip(0..lane_len) {
                        data[offset + i * stride] = *s;
                    }
                }
            });
        }
        let tx = self.is_tracked(x);
        let out_id = self.next_id();
        let back: BackwardFn = Box::new(move |v, up, g| {
            let y = v.value(out_id).data().to_vec();
            let slot = g.slot(x, y.len());
            for_each_lane(&shape, axis, |offset, stride| {
                let mut s = 0.0f64;
                for i in 0..lane_len {
                    let idx = offset + i * stride;
                    s += up[idx] as f64 * y[idx] as f64;
                }
                for i in 0..lane_len {
                    let idx = offset + i * stride;
                    slot[idx] += y[idx] * (up[idx] - s as f32);
                }
            });
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Rearranges elements: out flat index i takes x flat element perm[i],
    /// with the result viewed under `shape`. Duplicate sources are allowed
    /// and their gradients accumulate.
    pub fn permute_elements(&mut self, x: NodeId, perm: &[usize], shape: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let out_len: usize = shape.iter().product();
        if perm.len() != out_len {
            return Err(Error::shape(format!(
                "permutation of {} entries cannot fill shape {shape:?}",
                perm.len()
            )));
        }
        let n = src.len();
        let mut data = Vec::with_capacity(out_len);
        for &p in perm {
            if p >= n {
                return Err(Error::shape(format!(
                    "permutation index {p} out of range for {n} elements"
                )));
            }
            data.push(src.data()[p]);
        }
        let out = Tensor::new(shape, data)?;
        let tx = self.is_tracked(x);
        let perm_owned = perm.to_vec();
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, n);
            for (i, &p) in perm_owned.iter().enumerate() {
                slot[p] += up[i];
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Divides a nonnegative tensor by the sum of its elements so the
    /// result is a probability vector. The sum must be positive.
    pub fn normalize_l1(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x);
        let mut s = 0.0f64;
        for &v in value.data() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::numeric(format!(
                    "normalize_l1 needs finite nonnegative entries, found {v}"
                )));
            }
            s += v as f64;
        }
        if s <= 0.0 {
            return Err(Error::numeric("normalize_l1 over an all-zero tensor".to_string()));
        }
        let inv = (1.0 / s) as f32;
        let data: Vec<f32> = value.data().iter().map(|&v| v * inv).collect();
        let out = Tensor::new(value.shape(), data)?;
        let tx = self.is_tracked(x);
        let out_id = self.next_id();
        let back: BackwardFn = Box::new(move |v, up, g| {
            let y = v.value(out_id).data();
            let mut dot = 0.0f64;
            for (u, yy) in up.iter().zip(y) {
                dot += *u as f64 * *yy as f64;
            }
            let slot = g.slot(x, y.len());
            for i in 0..y.len() {
                slot[i] += (up[i] - dot as f32) * inv;
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Per-row layer norm over the last axis of a [rows, cols] tensor.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?}, want [{cols}]",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        kernels::layer_norm_rows(
            out.data_mut(),
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            rows,
            cols,
            eps,
        );
        let (tx, tg, tb) = (self.is_tracked(x), self.is_tracked(gamma), self.is_tracked(beta));
        let back: BackwardFn = Box::new(move |v, up, g| {
            let xv = v.value(x).data().to_vec();
            let gv = v.value(gamma).data().to_vec();
            for r in 0..rows {
                let xrow = &xv[r * cols..(r + 1) * cols];
                let urow = &up[r * cols..(r + 1) * cols];
                let (mean, var) = kernels::row_moments(xrow);
                let rstd = 1.0 / (var + eps as f64).sqrt();
                // dxhat = gamma * upstream; two lane means feed the dx formula.
                let mut mean_dxhat = 0.0f64;
                let mut mean_dxhat_xhat = 0.0f64;
                let mut xhat = vec![0.0f32; cols];
                let mut dxhat = vec![0.0f32; cols];
                for c in 0..cols {
                    let xh = ((xrow[c] as f64 - mean) * rstd) as f32;
                    let dxh = gv[c] * urow[c];
                    xhat[c] = xh;
                    dxhat[c] = dxh;
                    mean_dxhat += dxh as f64;
                    mean_dxhat_xhat += dxh as f64 * xh as f64;
                }
                mean_dxhat /= cols as f64;
                mean_dxhat_xhat /= cols as f64;
                if tx {
                    let slot = g.slot(x, rows * cols);
                    for c in 0..cols {
                        let dx = rstd
                            * (dxhat[c] as f64 - mean_dxhat - xhat[c] as f64 * mean_dxhat_xhat);
                        slot[r * cols + c] += dx as f32;
                    }
                }
                if tg {
                    let slot = g.slot(gamma, cols);
                    for c in 0..cols {
                        slot[c] += urow[c] * xhat[c];
                    }
                }
                if tb {
                    let slot = g.slot(beta, cols);
                    for c in 0..cols {
                        slot[c] += urow[c];
                    }
                }
            }
        });
        Ok(self.push_custom(out, tx || tg || tb, Some(back)))
    }

    /// Elementwise GELU (tanh form).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = kernels::gelu(*o);
        }
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |v, up, g| {
            let xv = v.value(x).data().to_vec();
            let slot = g.slot(x, up.len());
            for i in 0..up.len() {
                slot[i] += up[i] * kernels::gelu_grad(xv[i]);
            }
        });
        self.push_custom(out, tx, Some(back))
    }

    /// Column-wise mean over the rows of a [rows, cols] tensor -> [cols].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if rows == 0 {
            return Err(Error::shape("mean_rows over zero rows".to_string()));
        }
        let mut out = Tensor::zeros(&[cols]);
        kernels::col_mean(out.data_mut(), self.value(x).data(), rows, cols);
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let inv = 1.0 / rows as f32;
            let slot = g.slot(x, rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    slot[r * cols + c] += up[c] * inv;
                }
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Vertical concatenation of [r_i, cols] tensors.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero tensors".to_string()));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut total_rows = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: column mismatch {c} vs {cols}")));
            }
            total_rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[total_rows, cols], data)?;
        let tracked = self.any_tracked(parts);
        let infos: Vec<(NodeId, usize, bool)> = parts
            .iter()
            .map(|&p| (p, self.value(p).len(), self.is_tracked(p)))
            .collect();
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let mut offset = 0usize;
            for &(p, len, tp) in &infos {
                if tp {
                    g.add(p, &up[offset..offset + len]);
                }
                offset += len;
            }
        });
        Ok(self.push_custom(out, tracked, Some(back)))
    }

    /// Rows [lo, hi) of a [rows, cols] tensor.
    pub fn slice_rows(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if lo >= hi || hi > rows {
            return Err(Error::shape(format!(
                "slice_rows: [{lo}, {hi}) out of range for {rows} rows"
            )));
        }
        let out = Tensor::new(&[hi - lo, cols], self.value(x).data()[lo * cols..hi * cols].to_vec())?;
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, rows * cols);
            for (s, &u) in slot[lo * cols..hi * cols].iter_mut().zip(up) {
                *s += u;
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Columns [lo, hi) of a [rows, cols] tensor.
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if lo >= hi || hi > cols {
            return Err(Error::shape(format!(
                "slice_cols: [{lo}, {hi}) out of range for {cols} cols"
            )));
        }
        let width = hi - lo;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).data()[r * cols + lo..r * cols + hi]);
        }
        let out = Tensor::new(&[rows, width], data)?;
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, rows * cols);
            for r in 0..rows {
                for c in 0..width {
                    slot[r * cols + lo + c] += up[r * width + c];
                }
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Horizontal concatenation of [rows, c_i] tensors.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero tensors".to_string()));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: row mismatch {r} vs {rows}")));
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0f32; rows * total];
        let mut offset = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(&[rows, total], data)?;
        let tracked = self.any_tracked(parts);
        let infos: Vec<(NodeId, usize, bool)> = parts
            .iter()
            .zip(&widths)
            .map(|(&p, &w)| (p, w, self.is_tracked(p)))
            .collect();
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let mut offset = 0usize;
            for &(p, w, tp) in &infos {
                if tp {
                    let slot = g.slot(p, rows * w);
                    for r in 0..rows {
                        for c in 0..w {
                            slot[r * w + c] += up[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        });
        Ok(self.push_custom(out, tracked, Some(back)))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            g.add(x, up);
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Flat concatenation of arbitrary tensors into a rank-1 result.
    pub fn concat_flat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_flat of zero tensors".to_string()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[data.len()], data)?;
        let tracked = self.any_tracked(parts);
        let infos: Vec<(NodeId, usize, bool)> = parts
            .iter()
            .map(|&p| (p, self.value(p).len(), self.is_tracked(p)))
            .collect();
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let mut offset = 0usize;
            for &(p, len, tp) in &infos {
                if tp {
                    g.add(p, &up[offset..offset + len]);
                }
                offset += len;
            }
        });
        Ok(self.push_custom(out, tracked, Some(back)))
    }

    /// Stacks rank-1 tensors of equal length into a [k, len] matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("stack_rows of zero tensors".to_string()));
        }
        let len = self.value(parts[0]).len();
        let mut data = Vec::with_capacity(parts.len() * len);
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 || v.len() != len {
                return Err(Error::shape(format!(
                    "stack_rows: want rank-1 length {len}, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[parts.len(), len], data)?;
        let tracked = self.any_tracked(parts);
        let infos: Vec<(NodeId, bool)> =
            parts.iter().map(|&p| (p, self.is_tracked(p))).collect();
        let back: BackwardFn = Box::new(move |_v, up, g| {
            for (i, &(p, tp)) in infos.iter().enumerate() {
                if tp {
                    g.add(p, &up[i * len..(i + 1) * len]);
                }
            }
        });
        Ok(self.push_custom(out, tracked, Some(back)))
    }

    /// Row `i` of a [rows, cols] tensor as a rank-1 vector.
    pub fn row_vec(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if i >= rows {
            return Err(Error::shape(format!("row_vec: row {i} out of {rows}")));
        }
        let out = Tensor::new(&[cols], self.value(x).row(i).to_vec())?;
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, rows * cols);
            for (s, &u) in slot[i * cols..(i + 1) * cols].iter_mut().zip(up) {
                *s += u;
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Copies the given rows of a [rows, cols] tensor; duplicate indices are
    /// allowed and accumulate in the backward scatter.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(format!("gather_rows: row {i} out of {rows}")));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let out = Tensor::new(&[indices.len(), cols], data)?;
        let tx = self.is_tracked(x);
        let idx = indices.to_vec();
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, rows * cols);
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    slot[i * cols + c] += up[k * cols + c];
                }
            }
        });
        Ok(self.push_custom(out, tx, Some(back)))
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.value(x).data() {
            acc += v as f64;
        }
        let len = self.value(x).len();
        let tx = self.is_tracked(x);
        let back: BackwardFn = Box::new(move |_v, up, g| {
            let slot = g.slot(x, len);
            for s in slot.iter_mut() {
                *s += up[0];
            }
        });
        self.push_custom(Tensor::scalar(acc as f32), tx, Some(back))
    }

    /// Cross entropy between a rank-1 logit vector and a fixed soft target
    /// distribution: logsumexp(logits) - <target, logits>.
    pub fn cross_entropy_soft(&mut self, logits: NodeId, target: &[f32]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 1 || lv.len() != target.len() {
            return Err(Error::shape(format!(
                "cross_entropy_soft: logits {:?} vs target length {}",
                lv.shape(),
                target.len()
            )));
        }
        let lse = kernels::log_sum_exp(lv.data());
        let mut dot = 0.0f64;
        for (&l, &t) in lv.data().iter().zip(target) {
            dot += l as f64 * t as f64;
        }
        let loss = lse - dot as f32;
        let tx = self.is_tracked(logits);
        let tgt = target.to_vec();
        let back: BackwardFn = Box::new(move |v, up, g| {
            let mut probs = v.value(logits).data().to_vec();
            kernels::softmax_slice_inplace(&mut probs);
            let slot = g.slot(logits, probs.len());
            for i in 0..probs.len() {
                slot[i] += up[0] * (probs[i] - tgt[i]);
            }
        });
        Ok(self.push_custom(Tensor::scalar(loss), tx, Some(back)))
    }
}
