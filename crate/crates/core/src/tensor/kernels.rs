//! Slice-level forward and backward kernels. Shapes are validated by the
//! tape before anything here runs.

use super::{numel, Element};
use crate::error::{Error, Result};

/// Row-major batched matrix product geometry with broadcast leading dims.
#[derive(Clone, Debug)]
pub(crate) struct MatmulGeom {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_b: bool,
    /// `(a_offset, b_offset, c_offset)` per output batch entry.
    pub batches: Vec<(usize, usize, usize)>,
    pub out_shape: Vec<usize>,
}

impl MatmulGeom {
    pub fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(op, a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != bk {
            return Err(Error::shape(op, a, b));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let rank = a_batch.len().max(b_batch.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a_batch), pad(b_batch));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(Error::shape(op, a, b));
            }
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0usize; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        let total = numel(&batch);
        let mut batches = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for c in 0..total {
            let ao: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let bo: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            batches.push((ao * m * k, bo * k * n, c * m * n));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let mut geom = MatmulGeom {
            m,
            k,
            n,
            trans_b,
            batches,
            out_shape,
        };
        // A shared right-hand matrix lets every batch collapse into one tall product.
        if b_batch.is_empty() && geom.batches.len() > 1 {
            geom.m *= geom.batches.len();
            geom.batches = vec![(0, 0, 0)];
        }
        Ok(geom)
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    pub fn forward<T: Element>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut c = vec![T::zero(); self.batches.len() * m * n];
        let (rsb, csb) = self.b_strides();
        for &(ao, bo, co) in &self.batches {
            // SAFETY: offsets were derived from the operand shapes.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.as_ptr().add(ao),
                    k as isize,
                    1,
                    b.as_ptr().add(bo),
                    rsb,
                    csb,
                    T::zero(),
                    c.as_mut_ptr().add(co),
                    n as isize,
                    1,
                );
            }
        }
        c
    }

    /// Accumulates `dA += dC·Bᵀ` and `dB += Aᵀ·dC` (or `dCᵀ·A` when B is transposed).
    pub fn backward<T: Element>(&self, a: &[T], b: &[T], dc: &[T], da: Option<&mut [T]>, db: Option<&mut [T]>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (rsb, csb) = self.b_strides();
        if let Some(da) = da {
            for &(ao, bo, co) in &self.batches {
                // dA[m,k] = dC[m,n] · Bᵀ[n,k]; Bᵀ strides are B's swapped.
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dc.as_ptr().add(co),
                        n as isize,
                        1,
                        b.as_ptr().add(bo),
                        csb,
                        rsb,
                        T::one(),
                        da.as_mut_ptr().add(ao),
                        k as isize,
                        1,
                    );
                }
            }
        }
        if let Some(db) = db {
            for &(ao, bo, co) in &self.batches {
                unsafe {
                    if self.trans_b {
                        // dB[n,k] = dCᵀ[n,m] · A[m,k]
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            dc.as_ptr().add(co),
                            1,
                            n as isize,
                            a.as_ptr().add(ao),
                            k as isize,
                            1,
                            T::one(),
                            db.as_mut_ptr().add(bo),
                            k as isize,
                            1,
                        );
                    } else {
                        // dB[k,n] = Aᵀ[k,m] · dC[m,n]
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            a.as_ptr().add(ao),
                            1,
                            k as isize,
                            dc.as_ptr().add(co),
                            n as isize,
                            1,
                            T::one(),
                            db.as_mut_ptr().add(bo),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
    }
}

/// Output shape and source-stride table for an axis permutation.
pub(crate) fn permute_strides(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    (out_shape, src)
}

/// Visits output positions in row-major order with their source offsets.
pub(crate) fn for_each_permuted(out_shape: &[usize], src: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let (inner, inner_stride) = (out_shape[last], src[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut o = 0usize;
    while o < total {
        for j in 0..inner {
            f(o + j, base + j * inner_stride);
        }
        o += inner;
        // advance the outer index
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn softmax_row<T: Element>(x: &[T], y: &mut [T]) {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v - mx).exp();
        s += *o;
    }
    let inv = T::one() / s;
    y.iter_mut().for_each(|o| *o *= inv);
}

pub(crate) fn softmax_forward<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        for (xr, yr) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
            softmax_row(xr, yr);
        }
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                y[at(j)] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], dy: &[T], dx: &mut [T], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for ((yr, gr), dr) in y
            .chunks_exact(len)
            .zip(dy.chunks_exact(len))
            .zip(dx.chunks_exact_mut(len))
        {
            let dot = dot(yr, gr);
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d += yv * (gv - dot);
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// Standard normal CDF `Φ(x)`.
pub(crate) fn normal_cdf<T: Element>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d/dx GELU(x)` given the precomputed `Φ(x)`.
pub(crate) fn gelu_grad_with_cdf<T: Element>(x: T, cdf: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Per-row statistics over the last axis: `(mean, 1/sqrt(var + eps))`.
pub(crate) fn layernorm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    dim: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_n = T::one() / T::of_usize(dim);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        let out = &mut y[r * dim..(r + 1) * dim];
        for j in 0..dim {
            out[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
    dim: usize,
) {
    let inv_n = T::one() / T::of_usize(dim);
    if let Some(dg) = dgamma {
        for ((xr, dyr), (&mean, &rstd)) in x
            .chunks_exact(dim)
            .zip(dy.chunks_exact(dim))
            .zip(means.iter().zip(rstds))
        {
            for ((g, &d), &xv) in dg.iter_mut().zip(dyr).zip(xr) {
                *g += d * (xv - mean) * rstd;
            }
        }
    }
    if let Some(db) = dbeta {
        for dyr in dy.chunks_exact(dim) {
            for (b, &d) in db.iter_mut().zip(dyr) {
                *b += d;
            }
        }
    }
    if let Some(dx) = dx {
        let rows_in = x
            .chunks_exact(dim)
            .zip(dy.chunks_exact(dim))
            .zip(means.iter().zip(rstds));
        for (dxr, ((xr, dyr), (&mean, &rstd))) in dx.chunks_exact_mut(dim).zip(rows_in) {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ((&xv, &d), &gm) in xr.iter().zip(dyr).zip(gamma) {
                let g = d * gm;
                s1 += g;
                s2 += g * (xv - mean) * rstd;
            }
            s1 *= inv_n;
            s2 *= inv_n;
            for (((o, &xv), &d), &gm) in dxr.iter_mut().zip(xr).zip(dyr).zip(gamma) {
                let xhat = (xv - mean) * rstd;
                *o += rstd * (d * gm - s1 - xhat * s2);
            }
        }
    }
}

/// Per-channel `(mean, biased variance)` of a `[B, C, HW]` buffer.
pub(crate) fn channel_stats<T: Element>(x: &[T], batch: usize, channels: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of_usize(batch * hw);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * hw;
            s += x[base..base + hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * hw;
            v += x[base..base + hw].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    /// Valid `(row, col)` output range for kernel tap `(u, v)`.
    fn tap_range(&self, u: usize, v: usize) -> (usize, usize, usize, usize) {
        let (du, dv) = (u as isize - self.pad(), v as isize - self.pad());
        let (h, w) = (self.h as isize, self.w as isize);
        let i0 = (-du).max(0) as usize;
        let i1 = (h - du).min(h).max(0) as usize;
        let j0 = (-dv).max(0) as usize;
        let j1 = (w - dv).min(w).max(0) as usize;
        (i0, i1, j0, j1)
    }

    fn offset(u: usize, pad: isize) -> isize {
        u as isize - pad
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Calls `f(dst_row, src_row)` for every output row touched by tap `(u, v)`,
/// with both rows already cut to the valid column range.
fn for_each_tap_row(
    g: &ConvGeom,
    u: usize,
    v: usize,
    mut f: impl FnMut(std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let pad = g.pad();
    let (i0, i1, j0, j1) = g.tap_range(u, v);
    if j0 >= j1 {
        return;
    }
    let (du, dv) = (ConvGeom::offset(u, pad), ConvGeom::offset(v, pad));
    for i in i0..i1 {
        let src = ((i as isize + du) as usize) * g.w;
        let dst = i * g.w;
        let s0 = (j0 as isize + dv) as usize;
        f(dst + j0..dst + j1, src + s0..src + s0 + (j1 - j0));
    }
}

pub(crate) fn dwconv_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (hw, kk) = (g.h * g.w, g.k * g.k);
    let mut y = vec![T::zero(); x.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * hw;
            let xin = &x[base..base + hw];
            let out = &mut y[base..base + hw];
            out.iter_mut().for_each(|o| *o = bias[c]);
            for u in 0..g.k {
                for v in 0..g.k {
                    let wt = w[c * kk + u * g.k + v];
                    for_each_tap_row(g, u, v, |d, s| {
                        for (o, &xv) in out[d].iter_mut().zip(&xin[s]) {
                            *o += wt * xv;
                        }
                    });
                }
            }
        }
    }
    y
}

pub(crate) fn dwconv_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (hw, kk) = (g.h * g.w, g.k * g.k);
    for b in 0..g.batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * hw;
            let gout = &dy[base..base + hw];
            let xin = &x[base..base + hw];
            if let Some(db) = db.as_deref_mut() {
                db[c] += gout.iter().copied().sum::<T>();
            }
            for u in 0..g.k {
                for v in 0..g.k {
                    let widx = c * kk + u * g.k + v;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = T::zero();
                        for_each_tap_row(g, u, v, |d, s| acc += dot(&gout[d], &xin[s]));
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wt = w[widx];
                        let din = &mut dx[base..base + hw];
                        for_each_tap_row(g, u, v, |d, s| {
                            for (o, &gv) in din[s].iter_mut().zip(&gout[d]) {
                                *o += wt * gv;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Source offset in `[B, C, H, W]` for element `(token, feature)` of image `b`
/// when cutting `p×p` patches in row-major grid order, features ordered `(c, py, px)`.
pub(crate) fn patch_source_index(
    b: usize,
    token: usize,
    feature: usize,
    (c_n, h, w): (usize, usize, usize),
    p: usize,
) -> usize {
    let gw = w / p;
    let (gy, gx) = (token / gw, token % gw);
    let c = feature / (p * p);
    let rem = feature % (p * p);
    let (py, px) = (rem / p, rem % p);
    debug_assert!(c < c_n);
    ((b * c_n + c) * h + gy * p + py) * w + gx * p + px
}

/// Row-wise log-sum-exp cross-entropy against smoothed one-hot targets.
/// Returns `(mean loss, softmax probabilities)`.
pub(crate) fn cross_entropy_forward<T: Element>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
    smoothing: T,
) -> (T, Vec<T>) {
    let rows = labels.len();
    let probs = softmax_forward(logits, rows, classes, 1);
    let off = smoothing / T::of_usize(classes);
    let on = T::one() - smoothing + off;
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        for (c, &v) in row.iter().enumerate() {
            let q = if c == label { on } else { off };
            if q != T::zero() {
                total += q * (lse - v);
            }
        }
    }
    (total / T::of_usize(rows), probs)
}
