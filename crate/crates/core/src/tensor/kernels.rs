//! Slice kernels behind the graph ops. Every loop walks contiguous memory so
//! the compiler can vectorize; accumulation order is fixed, which keeps
//! results bitwise reproducible.

use crate::scalar::Scalar;

/// `out[i] += a * x[i]` over the common prefix.
#[inline]
pub(crate) fn axpy<S: Scalar>(out: &mut [S], a: S, x: &[S]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Independent accumulators in reductions; wide enough to fill the
/// vector units without changing the fixed summation order.
const LANES: usize = 16;

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let mut acc = [S::zero(); LANES];
    let (ca, cb) = (a[..n].chunks_exact(LANES), b[..n].chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce(acc) + tail
}

pub(crate) fn sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut tail = S::zero();
    for &v in rest {
        tail += v;
    }
    reduce(acc) + tail
}

#[inline]
fn reduce<S: Scalar>(mut acc: [S; LANES]) -> S {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0]
}

/// One term of [`fused_axpy`]: adds `weight * src[l]` to `out[dst + l]`.
#[derive(Clone, Copy)]
pub(crate) struct Tap<'a, S> {
    pub weight: S,
    pub src: &'a [S],
    pub dst: usize,
}

/// Output positions accumulated in registers per pass.
const BLOCK: usize = 64;

/// Applies every tap to `out`. Each element receives its terms in tap
/// order, exactly as a sequence of [`axpy`] calls would, but the output is
/// loaded and stored once per block instead of once per tap.
pub(crate) fn fused_axpy<S: Scalar>(out: &mut [S], taps: &[Tap<'_, S>]) {
    let full = out.len() / BLOCK * BLOCK;
    let (head, tail) = out.split_at_mut(full);
    for (b, chunk) in head.chunks_exact_mut(BLOCK).enumerate() {
        let p0 = b * BLOCK;
        let chunk: &mut [S; BLOCK] = chunk.try_into().expect("exact chunk");
        let mut acc = *chunk;
        for t in taps {
            let lo = p0.max(t.dst);
            let hi = (p0 + BLOCK).min(t.dst + t.src.len());
            if lo >= hi {
                continue;
            }
            if lo == p0 && hi == p0 + BLOCK {
                let s: &[S; BLOCK] = t.src[p0 - t.dst..p0 - t.dst + BLOCK].try_into().expect("full block");
                let w = t.weight;
                for (a, &x) in acc.iter_mut().zip(s) {
                    *a += w * x;
                }
            } else {
                // Partial overlap goes through memory; indexing `acc` with a
                // runtime offset would keep it out of vector registers.
                *chunk = acc;
                for p in lo..hi {
                    chunk[p - p0] += t.weight * t.src[p - t.dst];
                }
                acc = *chunk;
            }
        }
        *chunk = acc;
    }
    // The tail is shorter than a block; a plain per-tap pass keeps the order.
    for t in taps {
        let lo = full.max(t.dst);
        let hi = (full + tail.len()).min(t.dst + t.src.len());
        for p in lo..hi {
            tail[p - full] += t.weight * t.src[p - t.dst];
        }
    }
}

/// Geometry of a causal convolution over `[channels, steps, batch]` data.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub steps: usize,
    pub batch: usize,
}

impl ConvGeom {
    #[inline]
    fn plane(&self) -> usize {
        self.steps * self.batch
    }

    /// Element offset of tap `j` (tap `kernel - 1` reads the current step),
    /// or `None` when the tap only ever reads left padding.
    #[inline]
    fn tap_offset(&self, j: usize) -> Option<usize> {
        let shift = (self.kernel - 1 - j) * self.dilation;
        (shift < self.steps).then_some(shift * self.batch)
    }
}

pub(crate) fn conv_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    let plane = g.plane();
    let mut taps = Vec::with_capacity(g.c_in * g.kernel);
    for o in 0..g.c_out {
        taps.clear();
        for i in 0..g.c_in {
            let x_i = &x[i * plane..(i + 1) * plane];
            let w_oi = &w[(o * g.c_in + i) * g.kernel..(o * g.c_in + i + 1) * g.kernel];
            for (j, &weight) in w_oi.iter().enumerate() {
                if let Some(off) = g.tap_offset(j) {
                    taps.push(Tap {
                        weight,
                        src: &x_i[..plane - off],
                        dst: off,
                    });
                }
            }
        }
        let out_o = &mut out[o * plane..(o + 1) * plane];
        out_o.fill(b[o]);
        fused_axpy(out_o, &taps);
    }
}

pub(crate) fn conv_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    mut db: Option<&mut [S]>,
) {
    let plane = g.plane();
    for o in 0..g.c_out {
        let g_o = &grad_out[o * plane..(o + 1) * plane];
        if let Some(db) = db.as_deref_mut() {
            db[o] += sum(g_o);
        }
        if let Some(dw) = dw.as_deref_mut() {
            for i in 0..g.c_in {
                let base = (o * g.c_in + i) * g.kernel;
                let x_i = &x[i * plane..(i + 1) * plane];
                for j in 0..g.kernel {
                    if let Some(off) = g.tap_offset(j) {
                        dw[base + j] += dot(&g_o[off..], &x_i[..plane - off]);
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        let mut taps = Vec::with_capacity(g.c_out * g.kernel);
        for i in 0..g.c_in {
            taps.clear();
            for o in 0..g.c_out {
                let g_o = &grad_out[o * plane..(o + 1) * plane];
                for j in 0..g.kernel {
                    if let Some(off) = g.tap_offset(j) {
                        let weight = w[(o * g.c_in + i) * g.kernel + j];
                        taps.push(Tap {
                            weight,
                            src: &g_o[off..],
                            dst: 0,
                        });
                    }
                }
            }
            fused_axpy(&mut dx[i * plane..(i + 1) * plane], &taps);
        }
    }
}

/// Decomposition of a shape around one axis: `[outer, len, inner]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn of(shape: &[usize], axis: usize) -> Self {
        AxisSplit {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

/// `y[o, m, :] = b[m] + sum_j w[m, j] * x[o, j, :]`
pub(crate) fn linear_forward<S: Scalar>(ax: AxisSplit, out_len: usize, x: &[S], w: &[S], b: Option<&[S]>, y: &mut [S]) {
    let inner = ax.inner;
    let mut taps = Vec::with_capacity(ax.len);
    for o in 0..ax.outer {
        for m in 0..out_len {
            taps.clear();
            for j in 0..ax.len {
                let src = &x[(o * ax.len + j) * inner..(o * ax.len + j + 1) * inner];
                taps.push(Tap {
                    weight: w[m * ax.len + j],
                    src,
                    dst: 0,
                });
            }
            let row = &mut y[(o * out_len + m) * inner..(o * out_len + m + 1) * inner];
            row.fill(b.map_or(S::zero(), |b| b[m]));
            fused_axpy(row, &taps);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<S: Scalar>(
    ax: AxisSplit,
    out_len: usize,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    mut db: Option<&mut [S]>,
) {
    let inner = ax.inner;
    for o in 0..ax.outer {
        for m in 0..out_len {
            let g_row = &grad_out[(o * out_len + m) * inner..(o * out_len + m + 1) * inner];
            if let Some(db) = db.as_deref_mut() {
                db[m] += sum(g_row);
            }
            if let Some(dw) = dw.as_deref_mut() {
                for j in 0..ax.len {
                    let x_row = &x[(o * ax.len + j) * inner..(o * ax.len + j + 1) * inner];
                    dw[m * ax.len + j] += dot(g_row, x_row);
                }
            }
        }
    }
    if let Some(dx) = dx {
        let mut taps = Vec::with_capacity(out_len);
        for o in 0..ax.outer {
            for j in 0..ax.len {
                taps.clear();
                for m in 0..out_len {
                    let src = &grad_out[(o * out_len + m) * inner..(o * out_len + m + 1) * inner];
                    taps.push(Tap {
                        weight: w[m * ax.len + j],
                        src,
                        dst: 0,
                    });
                }
                fused_axpy(&mut dx[(o * ax.len + j) * inner..(o * ax.len + j + 1) * inner], &taps);
            }
        }
    }
}

/// Softmax along the middle axis of `[outer, len, inner]`, with the running
/// maximum subtracted before exponentiation.
pub(crate) fn softmax_forward<S: Scalar>(ax: AxisSplit, x: &[S], y: &mut [S]) {
    let inner = ax.inner;
    let mut peak = vec![S::zero(); inner];
    let mut total = vec![S::zero(); inner];
    for o in 0..ax.outer {
        let base = o * ax.len * inner;
        peak.copy_from_slice(&x[base..base + inner]);
        for j in 1..ax.len {
            let row = &x[base + j * inner..base + (j + 1) * inner];
            for (p, &v) in peak.iter_mut().zip(row) {
                if v > *p {
                    *p = v;
                }
            }
        }
        total.fill(S::zero());
        for j in 0..ax.len {
            let r = base + j * inner..base + (j + 1) * inner;
            for (((yv, &xv), &p), t) in y[r.clone()].iter_mut().zip(&x[r]).zip(&peak).zip(total.iter_mut()) {
                *yv = (xv - p).exp();
                *t += *yv;
            }
        }
        for j in 0..ax.len {
            let r = base + j * inner..base + (j + 1) * inner;
            for (yv, &t) in y[r].iter_mut().zip(&total) {
                *yv /= t;
            }
        }
    }
}

pub(crate) fn softmax_backward<S: Scalar>(ax: AxisSplit, y: &[S], grad_out: &[S], dx: &mut [S]) {
    let inner = ax.inner;
    let mut weighted = vec![S::zero(); inner];
    for o in 0..ax.outer {
        let base = o * ax.len * inner;
        weighted.fill(S::zero());
        for j in 0..ax.len {
            let r = base + j * inner..base + (j + 1) * inner;
            for ((acc, &yv), &gv) in weighted.iter_mut().zip(&y[r.clone()]).zip(&grad_out[r]) {
                *acc += yv * gv;
            }
        }
        for j in 0..ax.len {
            let r = base + j * inner..base + (j + 1) * inner;
            for (((d, &yv), &gv), &s) in dx[r.clone()]
                .iter_mut()
                .zip(&y[r.clone()])
                .zip(&grad_out[r])
                .zip(&weighted)
            {
                *d += yv * (gv - s);
            }
        }
    }
}
