//! Flat-buffer compute kernels behind the tensor ops.
//!
//! Everything operates on row-major `&[f32]`. Kernels that fan out across
//! threads assign each output element to exactly one closure, so results do
//! not depend on the thread count.

use rayon::prelude::*;

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softplus_scalar(x: f32) -> f32 {
    // Stable at both tails: softplus(x) = max(x, 0) + ln(1 + exp(-|x|)).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const PAR_EW_THRESHOLD: usize = 1 << 15;

/// Elementwise map over one slice, parallel above the threshold; each
/// output index is written by exactly one closure.
pub(crate) fn ew_map(a: &[f32], f: impl Fn(f32) -> f32 + Sync) -> Vec<f32> {
    if a.len() >= PAR_EW_THRESHOLD {
        let mut out = vec![0.0f32; a.len()];
        out.par_chunks_mut(4096)
            .zip(a.par_chunks(4096))
            .for_each(|(o, i)| {
                for (ov, iv) in o.iter_mut().zip(i) {
                    *ov = f(*iv);
                }
            });
        out
    } else {
        a.iter().map(|v| f(*v)).collect()
    }
}

pub(crate) fn ew_zip(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32 + Sync) -> Vec<f32> {
    if a.len() >= PAR_EW_THRESHOLD {
        let mut out = vec![0.0f32; a.len()];
        out.par_chunks_mut(4096)
            .zip(a.par_chunks(4096).zip(b.par_chunks(4096)))
            .for_each(|(o, (x, y))| {
                for ((ov, xv), yv) in o.iter_mut().zip(x).zip(y) {
                    *ov = f(*xv, *yv);
                }
            });
        out
    } else {
        a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
    }
}

pub(crate) fn ew_mul(a: &[f32], b: &[f32]) -> Vec<f32> {
    ew_zip(a, b, |x, y| x * y)
}

// ── Matmul ───────────────────────────────────────────────────────────

const PAR_ROW_THRESHOLD: usize = 256;

/// C[m,n] = A[m,k] · B[k,n].
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// dA = dC · Bᵀ, shape [m,k].
pub(crate) fn matmul_dlhs(dc: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let dc_row = &dc[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f32;
            for (dv, bv) in dc_row.iter().zip(b_row.iter()) {
                acc += dv * bv;
            }
            *o = acc;
        }
    };
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// dB = Aᵀ · dC, shape [k,n]. Parallel over the k output rows; each row
/// reduces over m in a fixed order.
pub(crate) fn matmul_drhs(a: &[f32], dc: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    let row = |(kk, out_row): (usize, &mut [f32])| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let dc_row = &dc[i * n..(i + 1) * n];
            for (o, &dv) in out_row.iter_mut().zip(dc_row.iter()) {
                *o += av * dv;
            }
        }
    };
    if k >= 8 && m * n >= 4096 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

// ── Conv2d ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub(crate) fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub(crate) fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Valid output range for one kernel tap: all ox with
/// 0 <= ox·stride + k − pad < limit.
fn tap_range(k: usize, pad: usize, stride: usize, limit: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_i = limit + pad - 1;
    let hi = if max_i < k {
        0
    } else {
        (((max_i - k) / stride) + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Direct convolution, zero padding. input [cin,h,w], weight
/// [cout,cin,kh,kw] → out [cout,oh,ow]. Inner loops run over contiguous
/// rows with bounds hoisted out.
pub(crate) fn conv2d(input: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; g.cout * oh * ow];
    let chan = |(co, out_chan): (usize, &mut [f32])| {
        for ci in 0..g.cin {
            let in_chan = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let w_base = ((co * g.cin) + ci) * g.kh * g.kw;
            for ky in 0..g.kh {
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = &in_chan[iy as usize * g.w..iy as usize * g.w + g.w];
                    let out_row = &mut out_chan[oy * ow..oy * ow + ow];
                    for kx in 0..g.kw {
                        let wv = weight[w_base + ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = tap_range(kx, g.pad, g.stride, g.w, ow);
                        if lo >= hi {
                            continue;
                        }
                        let base = (lo * g.stride + kx) as isize - g.pad as isize;
                        if g.stride == 1 {
                            let src = &in_row[base as usize..base as usize + (hi - lo)];
                            for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        } else {
                            let mut ix = base as usize;
                            for o in out_row[lo..hi].iter_mut() {
                                *o += wv * in_row[ix];
                                ix += g.stride;
                            }
                        }
                    }
                }
            }
        }
    };
    if g.cout >= 4 && oh * ow >= 64 {
        out.par_chunks_mut(oh * ow).enumerate().for_each(chan);
    } else {
        out.chunks_mut(oh * ow).enumerate().for_each(chan);
    }
    out
}

/// Gradient w.r.t. the conv input: scatter of weight × upstream grad.
/// Parallel over input channels (each writes a disjoint slice).
pub(crate) fn conv2d_dinput(weight: &[f32], dout: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dinput = vec![0.0f32; g.cin * g.h * g.w];
    let chan = |(ci, din_chan): (usize, &mut [f32])| {
        for co in 0..g.cout {
            let dout_chan = &dout[co * oh * ow..(co + 1) * oh * ow];
            let w_base = ((co * g.cin) + ci) * g.kh * g.kw;
            for ky in 0..g.kh {
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let din_row =
                        &mut din_chan[iy as usize * g.w..iy as usize * g.w + g.w];
                    let dout_row = &dout_chan[oy * ow..oy * ow + ow];
                    for kx in 0..g.kw {
                        let wv = weight[w_base + ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = tap_range(kx, g.pad, g.stride, g.w, ow);
                        if lo >= hi {
                            continue;
                        }
                        let base = (lo * g.stride + kx) - g.pad;
                        if g.stride == 1 {
                            let dst = &mut din_row[base..base + (hi - lo)];
                            for (d, gv) in dst.iter_mut().zip(&dout_row[lo..hi]) {
                                *d += wv * gv;
                            }
                        } else {
                            let mut ix = base;
                            for gv in &dout_row[lo..hi] {
                                din_row[ix] += wv * gv;
                                ix += g.stride;
                            }
                        }
                    }
                }
            }
        }
    };
    if g.cin >= 4 && g.h * g.w >= 64 {
        dinput.par_chunks_mut(g.h * g.w).enumerate().for_each(chan);
    } else {
        dinput.chunks_mut(g.h * g.w).enumerate().for_each(chan);
    }
    dinput
}

/// Gradient w.r.t. the conv weights: per-tap dot products over contiguous
/// rows. Parallel over output channels.
pub(crate) fn conv2d_dweight(input: &[f32], dout: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dweight = vec![0.0f32; g.cout * g.cin * g.kh * g.kw];
    let per_co = g.cin * g.kh * g.kw;
    let chan = |(co, dw_chan): (usize, &mut [f32])| {
        let dout_chan = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let in_chan = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = tap_range(kx, g.pad, g.stride, g.w, ow);
                    let mut acc = 0.0f32;
                    if lo < hi {
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let in_row = &in_chan[iy as usize * g.w..iy as usize * g.w + g.w];
                            let dout_row = &dout_chan[oy * ow..oy * ow + ow];
                            let base = (lo * g.stride + kx) - g.pad;
                            if g.stride == 1 {
                                let src = &in_row[base..base + (hi - lo)];
                                for (s, gv) in src.iter().zip(&dout_row[lo..hi]) {
                                    acc += s * gv;
                                }
                            } else {
                                let mut ix = base;
                                for gv in &dout_row[lo..hi] {
                                    acc += in_row[ix] * gv;
                                    ix += g.stride;
                                }
                            }
                        }
                    }
                    dw_chan[ci * g.kh * g.kw + ky * g.kw + kx] = acc;
                }
            }
        }
    };
    if g.cout >= 4 && oh * ow >= 64 {
        dweight.par_chunks_mut(per_co).enumerate().for_each(chan);
    } else {
        dweight.chunks_mut(per_co).enumerate().for_each(chan);
    }
    dweight
}

// ── Reductions and shape ops ─────────────────────────────────────────

/// Forward reduction with f64 accumulation. `axis: None` collapses
/// everything to a scalar.
pub(crate) fn reduce(data: &[f32], shape: &[usize], axis: Option<usize>, mean: bool) -> Vec<f32> {
    match axis {
        None => {
            let mut acc = 0.0f64;
            for v in data {
                acc += *v as f64;
            }
            if mean {
                acc /= data.len().max(1) as f64;
            }
            vec![acc as f32]
        }
        Some(ax) => {
            let outer: usize = shape[..ax].iter().product();
            let mid = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let mut acc = vec![0.0f64; outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let out_base = o * inner;
                    for i in 0..inner {
                        acc[out_base + i] += data[base + i] as f64;
                    }
                }
            }
            let scale = if mean { 1.0 / mid as f64 } else { 1.0 };
            acc.iter().map(|v| (v * scale) as f32).collect()
        }
    }
}

/// Backward of sum/mean: spread the upstream grad across the reduced axis.
pub(crate) fn spread_reduce(
    g: &[f32],
    in_shape: &[usize],
    axis: Option<usize>,
    mean: bool,
) -> Vec<f32> {
    let n: usize = in_shape.iter().product();
    match axis {
        None => {
            let v = if mean { g[0] / n.max(1) as f32 } else { g[0] };
            vec![v; n]
        }
        Some(ax) => {
            let outer: usize = in_shape[..ax].iter().product();
            let mid = in_shape[ax];
            let inner: usize = in_shape[ax + 1..].iter().product();
            let scale = if mean { 1.0 / mid as f32 } else { 1.0 };
            let mut out = vec![0.0f32; n];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let g_base = o * inner;
                    for i in 0..inner {
                        out[base + i] = g[g_base + i] * scale;
                    }
                }
            }
            out
        }
    }
}

/// In-shape aligned to the output rank with leading 1s.
fn aligned_shape(in_shape: &[usize], rank: usize) -> Vec<usize> {
    let mut a = vec![1usize; rank];
    a[rank - in_shape.len()..].copy_from_slice(in_shape);
    a
}

/// Split the aligned shape into the two fast-path classes:
/// `Repeat(k)` — dims [0..k) broadcast, the rest match (tile the source);
/// `Fill(k)` — dims [0..k) match, the rest broadcast (block-fill per
/// source element). Mixed patterns fall back to the odometer.
enum BroadcastClass {
    Repeat,
    Fill { inner: usize },
    General,
}

fn classify(aligned: &[usize], out_shape: &[usize]) -> BroadcastClass {
    let rank = out_shape.len();
    let mut lead = 0;
    while lead < rank && aligned[lead] == 1 && out_shape[lead] != 1 {
        lead += 1;
    }
    if aligned[lead..] == out_shape[lead..] {
        return BroadcastClass::Repeat;
    }
    let mut tail = rank;
    while tail > 0 && aligned[tail - 1] == 1 && out_shape[tail - 1] != 1 {
        tail -= 1;
    }
    if aligned[..tail] == out_shape[..tail] {
        return BroadcastClass::Fill {
            inner: out_shape[tail..].iter().product(),
        };
    }
    BroadcastClass::General
}

/// Numpy-style broadcast of `data` with `in_shape` to `out_shape` (shapes
/// aligned from the trailing axis; source dims must be 1 or equal).
pub(crate) fn broadcast(data: &[f32], in_shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    let out_n: usize = out_shape.iter().product();
    if data.len() == 1 {
        return vec![data[0]; out_n];
    }
    let rank = out_shape.len();
    let aligned = aligned_shape(in_shape, rank);
    match classify(&aligned, out_shape) {
        BroadcastClass::Repeat => {
            let mut out = Vec::with_capacity(out_n);
            out.extend_from_slice(data);
            while out.len() * 2 <= out_n {
                out.extend_from_within(..);
            }
            let rest = out_n - out.len();
            out.extend_from_within(..rest);
            out
        }
        BroadcastClass::Fill { inner } => {
            let mut out = Vec::with_capacity(out_n);
            for v in data {
                out.extend(std::iter::repeat(*v).take(inner));
            }
            out
        }
        BroadcastClass::General => {
            let mut strides = vec![0usize; rank];
            let mut acc = 1usize;
            for d in (0..rank).rev() {
                strides[d] = if aligned[d] == 1 { 0 } else { acc };
                acc *= aligned[d];
            }
            let mut out = vec![0.0f32; out_n];
            let mut idx = vec![0usize; rank];
            for slot in out.iter_mut() {
                let mut src = 0usize;
                for d in 0..rank {
                    src += idx[d] * strides[d];
                }
                *slot = data[src];
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            out
        }
    }
}

/// Backward of broadcast: sum the grad over the broadcast axes. f64
/// accumulation keeps large fan-ins stable.
pub(crate) fn reduce_broadcast(g: &[f32], out_shape: &[usize], in_shape: &[usize]) -> Vec<f32> {
    let in_n: usize = in_shape.iter().product();
    if in_n == 1 {
        let acc: f64 = g.iter().map(|v| *v as f64).sum();
        return vec![acc as f32];
    }
    let rank = out_shape.len();
    let aligned = aligned_shape(in_shape, rank);
    match classify(&aligned, out_shape) {
        BroadcastClass::Repeat => {
            let mut acc = vec![0.0f64; in_n];
            for chunk in g.chunks(in_n) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += *v as f64;
                }
            }
            acc.iter().map(|v| *v as f32).collect()
        }
        BroadcastClass::Fill { inner } => g
            .chunks(inner)
            .map(|block| block.iter().map(|v| *v as f64).sum::<f64>() as f32)
            .collect(),
        BroadcastClass::General => {
            let mut strides = vec![0usize; rank];
            let mut acc = 1usize;
            for d in (0..rank).rev() {
                strides[d] = if aligned[d] == 1 { 0 } else { acc };
                acc *= aligned[d];
            }
            let mut out = vec![0.0f32; in_n];
            let mut idx = vec![0usize; rank];
            for &gv in g.iter() {
                let mut src = 0usize;
                for d in 0..rank {
                    src += idx[d] * strides[d];
                }
                out[src] += gv;
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            out
        }
    }
}

pub(crate) fn concat(parts: &[&[f32]], shapes: &[Vec<usize>], axis: usize) -> Vec<f32> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total_mid: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut out = vec![0.0f32; outer * total_mid * inner];
    for o in 0..outer {
        let mut mid_off = 0usize;
        for (part, shape) in parts.iter().zip(shapes.iter()) {
            let mid = shape[axis];
            let src = &part[o * mid * inner..(o + 1) * mid * inner];
            let dst_base = (o * total_mid + mid_off) * inner;
            out[dst_base..dst_base + mid * inner].copy_from_slice(src);
            mid_off += mid;
        }
    }
    out
}

pub(crate) fn concat_backward(
    g: &[f32],
    out_shape: &[usize],
    axis: usize,
    in_shapes: &[Vec<usize>],
) -> Vec<Vec<f32>> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_mid = out_shape[axis];
    let mut parts: Vec<Vec<f32>> = in_shapes
        .iter()
        .map(|s| vec![0.0f32; s.iter().product()])
        .collect();
    for o in 0..outer {
        let mut mid_off = 0usize;
        for (part, shape) in parts.iter_mut().zip(in_shapes.iter()) {
            let mid = shape[axis];
            let src_base = (o * total_mid + mid_off) * inner;
            part[o * mid * inner..(o + 1) * mid * inner]
                .copy_from_slice(&g[src_base..src_base + mid * inner]);
            mid_off += mid;
        }
    }
    parts
}

pub(crate) fn slice(
    data: &[f32],
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f32> {
    let outer: usize = in_shape[..axis].iter().product();
    let mid = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        let src_base = (o * mid + start) * inner;
        let dst_base = o * len * inner;
        out[dst_base..dst_base + len * inner]
            .copy_from_slice(&data[src_base..src_base + len * inner]);
    }
    out
}

pub(crate) fn slice_backward(
    g: &[f32],
    out_shape: &[usize],
    in_shape: &[usize],
    axis: usize,
    start: usize,
) -> Vec<f32> {
    let outer: usize = in_shape[..axis].iter().product();
    let mid = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let len = out_shape[axis];
    let mut out = vec![0.0f32; in_shape.iter().product()];
    for o in 0..outer {
        let dst_base = (o * mid + start) * inner;
        let src_base = o * len * inner;
        out[dst_base..dst_base + len * inner]
            .copy_from_slice(&g[src_base..src_base + len * inner]);
    }
    out
}

// ── L2 normalize (last axis) ─────────────────────────────────────────

pub(crate) fn l2_normalize(data: &[f32], shape: &[usize], eps: f32) -> Vec<f32> {
    let inner = *shape.last().unwrap_or(&1);
    let mut out = vec![0.0f32; data.len()];
    for (row_in, row_out) in data.chunks(inner).zip(out.chunks_mut(inner)) {
        let norm = row_in.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
        for (o, v) in row_out.iter_mut().zip(row_in.iter()) {
            *o = v / norm;
        }
    }
    out
}

/// d/dx (x/‖x‖) = (I − y yᵀ)/‖x‖ applied per row.
pub(crate) fn l2_normalize_backward(
    g: &[f32],
    input: &[f32],
    shape: &[usize],
    eps: f32,
) -> Vec<f32> {
    let inner = *shape.last().unwrap_or(&1);
    let mut out = vec![0.0f32; input.len()];
    for ((row_in, row_g), row_out) in input
        .chunks(inner)
        .zip(g.chunks(inner))
        .zip(out.chunks_mut(inner))
    {
        let norm = row_in.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
        let inv = 1.0 / norm;
        let mut y_dot_g = 0.0f32;
        for (x, gv) in row_in.iter().zip(row_g.iter()) {
            y_dot_g += x * inv * gv;
        }
        for ((o, x), gv) in row_out.iter_mut().zip(row_in.iter()).zip(row_g.iter()) {
            *o = (gv - x * inv * y_dot_g) * inv;
        }
    }
    out
}

// ── Bilinear grid sampling ───────────────────────────────────────────

/// Map u ∈ [-1,1] to a texel coordinate with align_corners=true semantics,
/// clamped to the plane border.
fn texel_coord(u: f32, size: usize) -> (usize, usize, f32) {
    let max = (size - 1) as f32;
    let x = ((u + 1.0) * 0.5 * max).clamp(0.0, max);
    let x0 = x.floor().min(max - 1.0).max(0.0);
    let frac = x - x0;
    (x0 as usize, (x0 as usize + 1).min(size - 1), frac)
}

/// plane [c,h,w], uv [n,2] in [-1,1] → out [n,c].
pub(crate) fn grid_sample(plane: &[f32], uv: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let n = uv.len() / 2;
    let mut out = vec![0.0f32; n * c];
    let body = |(i, out_row): (usize, &mut [f32])| {
        let (x0, x1, fx) = texel_coord(uv[2 * i], w);
        let (y0, y1, fy) = texel_coord(uv[2 * i + 1], h);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for (ch, o) in out_row.iter_mut().enumerate() {
            let base = ch * h * w;
            *o = plane[base + y0 * w + x0] * w00
                + plane[base + y0 * w + x1] * w10
                + plane[base + y1 * w + x0] * w01
                + plane[base + y1 * w + x1] * w11;
        }
    };
    if n >= 1024 {
        out.par_chunks_mut(c).enumerate().for_each(body);
    } else {
        out.chunks_mut(c).enumerate().for_each(body);
    }
    out
}

/// Scatter the upstream grad back into the plane. Points collide on
/// texels, so the scatter runs sequentially per channel; channels write
/// disjoint slices and parallelize cleanly.
pub(crate) fn grid_sample_dplane(g: &[f32], uv: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let n = uv.len() / 2;
    let mut dplane = vec![0.0f32; c * h * w];
    let chan = |(ch, out): (usize, &mut [f32])| {
        for i in 0..n {
            let gv = g[i * c + ch];
            if gv == 0.0 {
                continue;
            }
            let (x0, x1, fx) = texel_coord(uv[2 * i], w);
            let (y0, y1, fy) = texel_coord(uv[2 * i + 1], h);
            out[y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
            out[y0 * w + x1] += gv * fx * (1.0 - fy);
            out[y1 * w + x0] += gv * (1.0 - fx) * fy;
            out[y1 * w + x1] += gv * fx * fy;
        }
    };
    if n >= 4096 && c >= 2 {
        dplane.par_chunks_mut(h * w).enumerate().for_each(chan);
    } else {
        dplane.chunks_mut(h * w).enumerate().for_each(chan);
    }
    dplane
}

// ── Exclusive cumulative sum (last axis) ─────────────────────────────

pub(crate) fn cumsum_exclusive(data: &[f32], shape: &[usize]) -> Vec<f32> {
    let inner = *shape.last().unwrap_or(&1);
    let mut out = vec![0.0f32; data.len()];
    for (row_in, row_out) in data.chunks(inner).zip(out.chunks_mut(inner)) {
        let mut acc = 0.0f32;
        for (o, v) in row_out.iter_mut().zip(row_in.iter()) {
            *o = acc;
            acc += v;
        }
    }
    out
}

/// Backward: d_in[j] = Σ_{k>j} g[k] (reverse exclusive suffix sum).
pub(crate) fn cumsum_exclusive_backward(g: &[f32], shape: &[usize]) -> Vec<f32> {
    let inner = *shape.last().unwrap_or(&1);
    let mut out = vec![0.0f32; g.len()];
    for (row_g, row_out) in g.chunks(inner).zip(out.chunks_mut(inner)) {
        let mut acc = 0.0f32;
        for (o, v) in row_out.iter_mut().zip(row_g.iter()).rev() {
            *o = acc;
            acc += v;
        }
    }
    out
}
