//! Slice-level forward and backward kernels. Shapes are validated by the graph
//! layer before anything here runs.

use crate::scalar::{gemm, gemm_ld, MatRef, Scalar};

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies
/// inside `[0, w)`.
fn valid_span(g: &ConvGeom, kx: usize, out_len: usize) -> (usize, usize) {
    let (s, pad) = (g.stride as isize, g.pad() as isize);
    let first = (pad - kx as isize).max(0);
    let lo = (first + s - 1) / s;
    let last = g.w as isize - 1 + pad - kx as isize;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    (lo as usize, (hi as usize).max(lo as usize))
}

/// Writes image `img` into the `ld`-strided column matrix `cols`, starting at
/// column `off`.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T], ld: usize, off: usize) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad() as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_span(g, kx, ow);
                let dst = &mut cols[row * ld + off..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kx - g.pad();
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + i * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, img: &mut [T]) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad() as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_span(g, kx, ow);
                let src = &cols[row * ld + off..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let ix0 = lo * g.stride + kx - g.pad();
                    for (i, &v) in line[lo..hi].iter().enumerate() {
                        dst[ix0 + i * g.stride] += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Upper bound on column-matrix elements materialized at once.
const COL_BUDGET: usize = 1 << 16;

/// `[n, c, plane]` to `[c, n·plane]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * plane + i * plane..][..plane].copy_from_slice(&x[(i * c + ch) * plane..][..plane]);
        }
    }
    out
}

/// Adds `[c, n·plane]` into `[n, c, plane]`.
fn add_from_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, plane: usize, dst: &mut [T]) {
    for i in 0..n {
        for ch in 0..c {
            let s = &src[ch * n * plane + i * plane..][..plane];
            for (d, &v) in dst[(i * c + ch) * plane..][..plane].iter_mut().zip(s) {
                *d += v;
            }
        }
    }
}

fn conv_chunk(g: &ConvGeom) -> usize {
    (COL_BUDGET / (g.col_rows() * g.col_cols()).max(1)).clamp(1, g.n.max(1))
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    out: &mut [T],
) {
    let (cr, cc) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let chunk = conv_chunk(g);
    let mut start = 0;
    while start < g.n {
        let nb = chunk.min(g.n - start);
        let ld = nb * cc;
        let mut cols = vec![T::zero(); cr * ld];
        for i in 0..nb {
            im2col(g, &x[(start + i) * in_sz..][..in_sz], &mut cols, ld, i * cc);
        }
        let mut y = vec![T::zero(); g.cout * ld];
        gemm(MatRef::new(w, g.cout, cr), MatRef::new(&cols, cr, ld), T::zero(), &mut y);
        let o = &mut out[start * g.cout * cc..(start + nb) * g.cout * cc];
        add_from_channel_major(&y, nb, g.cout, cc, o);
        if let Some(b) = b {
            for (i, row) in o.chunks_mut(cc).enumerate() {
                let bv = b[i % g.cout];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        start += nb;
    }
}

/// Accumulates into `dx`, `dw` and `db`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (cr, cc) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * cc;
    if let Some(db) = db {
        for (i, row) in dout.chunks(cc).enumerate() {
            db[i % g.cout] += row.iter().copied().sum::<T>();
        }
    }
    // accumulated transposed, `[cr, cout]`, so both operands stream rows
    let mut dwt = dw.as_ref().map(|_| vec![T::zero(); cr * g.cout]);
    let chunk = conv_chunk(g);
    let mut start = 0;
    while start < g.n {
        let nb = chunk.min(g.n - start);
        let ld = nb * cc;
        let d = to_channel_major(&dout[start * out_sz..(start + nb) * out_sz], nb, g.cout, cc);
        let mut cols = vec![T::zero(); cr * ld];
        if let Some(dwt) = dwt.as_deref_mut() {
            for i in 0..nb {
                im2col(g, &x[(start + i) * in_sz..][..in_sz], &mut cols, ld, i * cc);
            }
            gemm(MatRef::new(&cols, cr, ld), MatRef::new(&d, g.cout, ld).t(), T::one(), dwt);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(MatRef::new(w, g.cout, cr).t(), MatRef::new(&d, g.cout, ld), T::zero(), &mut cols);
            for i in 0..nb {
                col2im(g, &cols, ld, i * cc, &mut dx[(start + i) * in_sz..][..in_sz]);
            }
        }
        start += nb;
    }
    if let (Some(dw), Some(dwt)) = (dw, dwt) {
        for r in 0..cr {
            for co in 0..g.cout {
                dw[co * cr + r] += dwt[r * g.cout + co];
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct TemporalGeom {
    /// Number of clips; each clip holds `frames` consecutive images.
    pub clips: usize,
    pub frames: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// Pixels per channel plane.
    pub plane: usize,
}

impl TemporalGeom {
    fn n(&self) -> usize {
        self.clips * self.frames
    }

    /// For tap `j`: the output frame range `[lo, hi)` within a clip that has
    /// a source frame, and the source offset.
    fn tap_range(&self, j: usize) -> Option<(usize, usize, isize)> {
        let o = j as isize - (self.k / 2) as isize;
        let lo = (-o).max(0) as usize;
        let hi = (self.frames as isize - o.max(0)).max(0) as usize;
        (lo < hi).then_some((lo, hi, o))
    }
}

/// Weight `[cout, cin, k]` split into `k` contiguous `[cout, cin]` tap matrices.
fn split_taps<T: Scalar>(g: &TemporalGeom, w: &[T]) -> Vec<Vec<T>> {
    (0..g.k)
        .map(|j| {
            (0..g.cout * g.cin)
                .map(|oi| w[oi * g.k + j])
                .collect()
        })
        .collect()
}

pub(crate) fn temporal_conv_forward<T: Scalar>(
    g: &TemporalGeom,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    out: &mut [T],
) {
    let taps = split_taps(g, w);
    let (n, p) = (g.n(), g.plane);
    let xc = to_channel_major(x, n, g.cin, p);
    let mut y = vec![T::zero(); g.cout * n * p];
    for clip in 0..g.clips {
        for (j, tap) in taps.iter().enumerate() {
            let Some((lo, hi, o)) = g.tap_range(j) else { continue };
            let first = clip * g.frames + lo;
            let src = (first as isize + o) as usize * p;
            let cols = (hi - lo) * p;
            gemm_ld(
                MatRef::new(tap, g.cout, g.cin),
                MatRef::strided(&xc[src..], g.cin, cols, n * p),
                T::one(),
                &mut y[first * p..],
                n * p,
            );
        }
    }
    out.iter_mut().for_each(|v| *v = T::zero());
    add_from_channel_major(&y, n, g.cout, p, out);
    if let Some(b) = b {
        for (i, row) in out.chunks_mut(p).enumerate() {
            let bv = b[i % g.cout];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

pub(crate) fn temporal_conv_backward<T: Scalar>(
    g: &TemporalGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let taps = split_taps(g, w);
    let (n, p) = (g.n(), g.plane);
    let dc = to_channel_major(dout, n, g.cout, p);
    if let Some(dw) = dw {
        let xc = to_channel_major(x, n, g.cin, p);
        let mut dtap = vec![T::zero(); g.cout * g.cin];
        for j in 0..g.k {
            dtap.iter_mut().for_each(|v| *v = T::zero());
            for clip in 0..g.clips {
                let Some((lo, hi, o)) = g.tap_range(j) else { continue };
                let first = clip * g.frames + lo;
                let src = (first as isize + o) as usize * p;
                let cols = (hi - lo) * p;
                gemm(
                    MatRef::strided(&dc[first * p..], g.cout, cols, n * p),
                    MatRef::strided(&xc[src..], g.cin, cols, n * p).t(),
                    T::one(),
                    &mut dtap,
                );
            }
            for (oi, &v) in dtap.iter().enumerate() {
                dw[oi * g.k + j] += v;
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxc = vec![T::zero(); g.cin * n * p];
        for clip in 0..g.clips {
            for (j, tap) in taps.iter().enumerate() {
                let Some((lo, hi, o)) = g.tap_range(j) else { continue };
                let first = clip * g.frames + lo;
                let src = (first as isize + o) as usize * p;
                let cols = (hi - lo) * p;
                gemm_ld(
                    MatRef::new(tap, g.cout, g.cin).t(),
                    MatRef::strided(&dc[first * p..], g.cout, cols, n * p),
                    T::one(),
                    &mut dxc[src..],
                    n * p,
                );
            }
        }
        add_from_channel_major(&dxc, n, g.cin, p, dx);
    }
    if let Some(db) = db {
        for (i, row) in dout.chunks(p).enumerate() {
            db[i % g.cout] += row.iter().copied().sum::<T>();
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormGeom {
    pub n: usize,
    pub c: usize,
    pub groups: usize,
    /// Elements per channel.
    pub spatial: usize,
}

impl NormGeom {
    fn group_len(&self) -> usize {
        self.c / self.groups * self.spatial
    }
}

/// Returns per-(sample, group) `(mean, rstd)` with 64-bit statistics.
pub(crate) fn group_norm_forward<T: Scalar>(
    g: &NormGeom,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    out: &mut [T],
) -> Vec<(f64, f64)> {
    let cg = g.c / g.groups;
    let len = g.group_len();
    let mut stats = Vec::with_capacity(g.n * g.groups);
    for (chunk_idx, chunk) in x.chunks(len).enumerate() {
        let mean = chunk.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / len as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.to_f64_lossy() - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        stats.push((mean, rstd));
        let grp = chunk_idx % g.groups;
        let o = &mut out[chunk_idx * len..(chunk_idx + 1) * len];
        for (ci, (xs, os)) in chunk.chunks(g.spatial).zip(o.chunks_mut(g.spatial)).enumerate() {
            let c = grp * cg + ci;
            let (ga, be) = (gamma[c].to_f64_lossy(), beta[c].to_f64_lossy());
            for (ov, &xv) in os.iter_mut().zip(xs) {
                let xhat = (xv.to_f64_lossy() - mean) * rstd;
                *ov = T::from_f64_lossy(xhat * ga + be);
            }
        }
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    g: &NormGeom,
    x: &[T],
    gamma: &[T],
    stats: &[(f64, f64)],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let cg = g.c / g.groups;
    let len = g.group_len();
    let m = len as f64;
    for (chunk_idx, (xs, ds)) in x.chunks(len).zip(dout.chunks(len)).enumerate() {
        let (mean, rstd) = stats[chunk_idx];
        let grp = chunk_idx % g.groups;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for (ci, (xc, dc)) in xs.chunks(g.spatial).zip(ds.chunks(g.spatial)).enumerate() {
            let c = grp * cg + ci;
            let ga = gamma[c].to_f64_lossy();
            let mut dga = 0.0;
            let mut dbe = 0.0;
            for (&xv, &dv) in xc.iter().zip(dc) {
                let xhat = (xv.to_f64_lossy() - mean) * rstd;
                let d = dv.to_f64_lossy();
                dga += d * xhat;
                dbe += d;
                sum_dxhat += d * ga;
                sum_dxhat_xhat += d * ga * xhat;
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[c] += T::from_f64_lossy(dga);
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[c] += T::from_f64_lossy(dbe);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[chunk_idx * len..(chunk_idx + 1) * len];
            for (ci, ((xc, dc), oc)) in xs
                .chunks(g.spatial)
                .zip(ds.chunks(g.spatial))
                .zip(dxs.chunks_mut(g.spatial))
                .enumerate()
            {
                let ga = gamma[grp * cg + ci].to_f64_lossy();
                for ((&xv, &dv), o) in xc.iter().zip(dc).zip(oc.iter_mut()) {
                    let xhat = (xv.to_f64_lossy() - mean) * rstd;
                    let dxhat = dv.to_f64_lossy() * ga;
                    let v = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    *o += T::from_f64_lossy(v);
                }
            }
        }
    }
}

/// Softmax over the middle axis of an `[outer, axis, inner]` view.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], outer: usize, axis: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..axis {
                max = max.max(x[idx(a)]);
            }
            let mut sum = 0.0f64;
            for a in 0..axis {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                sum += e.to_f64_lossy();
            }
            let inv = T::from_f64_lossy(1.0 / sum);
            for a in 0..axis {
                out[idx(a)] *= inv;
            }
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dout: &[T],
    outer: usize,
    axis: usize,
    inner: usize,
    dx: &mut [T],
) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let dot: f64 = (0..axis)
                .map(|a| (dout[idx(a)] * y[idx(a)]).to_f64_lossy())
                .sum();
            let dot = T::from_f64_lossy(dot);
            for a in 0..axis {
                dx[idx(a)] += y[idx(a)] * (dout[idx(a)] - dot);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
}

/// Returns the attention probabilities `[batch, lq, lk]` for reuse in backward.
pub(crate) fn attention_forward<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    out: &mut [T],
) -> Vec<T> {
    let scale = T::from_f64_lossy(1.0 / (g.d as f64).sqrt());
    let mut probs = vec![T::zero(); g.batch * g.lq * g.lk];
    let mut scores = vec![T::zero(); g.lq * g.lk];
    for b in 0..g.batch {
        let qb = &q[b * g.lq * g.d..][..g.lq * g.d];
        let kb = &k[b * g.lk * g.d..][..g.lk * g.d];
        let vb = &v[b * g.lk * g.dv..][..g.lk * g.dv];
        gemm(MatRef::new(qb, g.lq, g.d), MatRef::new(kb, g.lk, g.d).t(), T::zero(), &mut scores);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let pb = &mut probs[b * g.lq * g.lk..][..g.lq * g.lk];
        softmax_forward(&scores, g.lq, g.lk, 1, pb);
        gemm(
            MatRef::new(pb, g.lq, g.lk),
            MatRef::new(vb, g.lk, g.dv),
            T::zero(),
            &mut out[b * g.lq * g.dv..][..g.lq * g.dv],
        );
    }
    probs
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let scale = T::from_f64_lossy(1.0 / (g.d as f64).sqrt());
    let mut dp = vec![T::zero(); g.lq * g.lk];
    let mut ds = vec![T::zero(); g.lq * g.lk];
    for b in 0..g.batch {
        let qb = &q[b * g.lq * g.d..][..g.lq * g.d];
        let kb = &k[b * g.lk * g.d..][..g.lk * g.d];
        let vb = &v[b * g.lk * g.dv..][..g.lk * g.dv];
        let pb = &probs[b * g.lq * g.lk..][..g.lq * g.lk];
        let db = &dout[b * g.lq * g.dv..][..g.lq * g.dv];
        if let Some(dv) = dv.as_deref_mut() {
            gemm(
                MatRef::new(pb, g.lq, g.lk).t(),
                MatRef::new(db, g.lq, g.dv),
                T::one(),
                &mut dv[b * g.lk * g.dv..][..g.lk * g.dv],
            );
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        gemm(MatRef::new(db, g.lq, g.dv), MatRef::new(vb, g.lk, g.dv).t(), T::zero(), &mut dp);
        ds.iter_mut().for_each(|v| *v = T::zero());
        softmax_backward(pb, &dp, g.lq, g.lk, 1, &mut ds);
        for s in ds.iter_mut() {
            *s *= scale;
        }
        if let Some(dq) = dq.as_deref_mut() {
            gemm(
                MatRef::new(&ds, g.lq, g.lk),
                MatRef::new(kb, g.lk, g.d),
                T::one(),
                &mut dq[b * g.lq * g.d..][..g.lq * g.d],
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(
                MatRef::new(&ds, g.lq, g.lk).t(),
                MatRef::new(qb, g.lq, g.d),
                T::one(),
                &mut dk[b * g.lk * g.d..][..g.lk * g.d],
            );
        }
    }
}

/// Output-to-input index map for an axis permutation.
pub(crate) fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn sinusoidal<T: Scalar>(position: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::from_f64_lossy((position * freq).sin());
        out[half + i] = T::from_f64_lossy((position * freq).cos());
    }
    out
}
