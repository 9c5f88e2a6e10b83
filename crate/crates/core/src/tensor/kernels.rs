//! Numeric kernels behind the tape operations: plain loops with 64-bit
//! accumulation inside every reduction.
//!
//! Batched kernels parallelize over the batch (or leading weight)
//! dimension with rayon; each output element is produced by exactly one
//! task with a fixed reduction order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

/// Minimum number of output elements before a kernel bothers spawning
/// parallel tasks; below this the loop runs serially.
const MIN_PAR_OUT: usize = 1 << 12;

/// y = a @ b with a: [m,k], b: [k,n].
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; m * n];
    let row = |yi: &mut [f32], i: usize| {
        let mut acc = vec![0.0f64; n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                let aik = aik as f64;
                for (j, &bkj) in brow.iter().enumerate() {
                    acc[j] += aik * bkj as f64;
                }
            }
        }
        for (j, &v) in acc.iter().enumerate() {
            yi[j] = v as f32;
        }
    };
    if m * n * k >= MIN_PAR_OUT {
        y.par_chunks_mut(n).enumerate().for_each(|(i, yi)| row(yi, i));
    } else {
        for (i, yi) in y.chunks_mut(n).enumerate() {
            row(yi, i);
        }
    }
    y
}

/// y = a @ b^T with a: [m,k], b: [n,k].
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; m * n];
    let row = |yi: &mut [f32], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, yij) in yi.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (x, w) in arow.iter().zip(brow.iter()) {
                acc += *x as f64 * *w as f64;
            }
            *yij = acc as f32;
        }
    };
    if m * n * k >= MIN_PAR_OUT {
        y.par_chunks_mut(n).enumerate().for_each(|(i, yi)| row(yi, i));
    } else {
        for (i, yi) in y.chunks_mut(n).enumerate() {
            row(yi, i);
        }
    }
    y
}

/// y = a^T @ b with a: [k,m], b: [k,n].
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; m * n];
    let row = |yi: &mut [f32], i: usize| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            let aki = a[kk * m + i];
            if aki != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                let aki = aki as f64;
                for (j, &bkj) in brow.iter().enumerate() {
                    acc[j] += aki * bkj as f64;
                }
            }
        }
        for (j, &v) in acc.iter().enumerate() {
            yi[j] = v as f32;
        }
    };
    if m * n * k >= MIN_PAR_OUT {
        y.par_chunks_mut(n).enumerate().for_each(|(i, yi)| row(yi, i));
    } else {
        for (i, yi) in y.chunks_mut(n).enumerate() {
            row(yi, i);
        }
    }
    y
}

/// Spatial dimensions of a convolution-family operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Output size for a standard convolution; `None` if the geometry
    /// does not fit.
    pub fn conv(
        batch: usize,
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let h_span = h_in + 2 * pad;
        let w_span = w_in + 2 * pad;
        if h_span < kh || w_span < kw {
            return None;
        }
        Some(ConvDims {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h_span - kh) / stride + 1,
            w_out: (w_span - kw) / stride + 1,
        })
    }

    /// Output size for a transposed convolution; `None` if the geometry
    /// does not fit.
    pub fn conv_transpose(
        batch: usize,
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let h_full = (h_in - 1) * stride + kh;
        let w_full = (w_in - 1) * stride + kw;
        if h_full < 2 * pad + 1 || w_full < 2 * pad + 1 {
            return None;
        }
        Some(ConvDims {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: h_full - 2 * pad,
            w_out: w_full - 2 * pad,
        })
    }
}

/// Forward convolution. x: [n,ci,h,w], w: [co,ci,kh,kw], b: [co].
pub fn conv2d_fwd(x: &[f32], w: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
    let out_plane = d.h_out * d.w_out;
    let per_image = d.c_out * out_plane;
    let in_plane = d.h_in * d.w_in;
    let mut y = vec![0.0f32; d.batch * per_image];
    let image = |yi: &mut [f32], n: usize| {
        let xn = &x[n * d.c_in * in_plane..(n + 1) * d.c_in * in_plane];
        for co in 0..d.c_out {
            let wc = &w[co * d.c_in * d.kh * d.kw..(co + 1) * d.c_in * d.kh * d.kw];
            let bias = b[co] as f64;
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut acc = bias;
                    for ci in 0..d.c_in {
                        let xc = &xn[ci * in_plane..(ci + 1) * in_plane];
                        let wk = &wc[ci * d.kh * d.kw..(ci + 1) * d.kh * d.kw];
                        for ky in 0..d.kh {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy - d.pad >= d.h_in {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for kx in 0..d.kw {
                                let ix = ox * d.stride + kx;
                                if ix < d.pad || ix - d.pad >= d.w_in {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                acc += xc[iy * d.w_in + ix] as f64
                                    * wk[ky * d.kw + kx] as f64;
                            }
                        }
                    }
                    yi[co * out_plane + oy * d.w_out + ox] = acc as f32;
                }
            }
        }
    };
    if d.batch * per_image >= MIN_PAR_OUT && d.batch > 1 {
        y.par_chunks_mut(per_image)
            .enumerate()
            .for_each(|(n, yi)| image(yi, n));
    } else {
        for (n, yi) in y.chunks_mut(per_image).enumerate() {
            image(yi, n);
        }
    }
    y
}

/// Gradient of `conv2d_fwd` with respect to its input.
pub fn conv2d_bwd_x(gy: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    let per_image = d.c_in * in_plane;
    let mut gx = vec![0.0f32; d.batch * per_image];
    let image = |gxi: &mut [f32], n: usize| {
        let gyn = &gy[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for ci in 0..d.c_in {
            for iy in 0..d.h_in {
                for ix in 0..d.w_in {
                    let mut acc = 0.0f64;
                    for co in 0..d.c_out {
                        let gyc = &gyn[co * out_plane..(co + 1) * out_plane];
                        let wk = &w[(co * d.c_in + ci) * d.kh * d.kw..];
                        for ky in 0..d.kh {
                            let oy_num = iy + d.pad;
                            if oy_num < ky || (oy_num - ky) % d.stride != 0 {
                                continue;
                            }
                            let oy = (oy_num - ky) / d.stride;
                            if oy >= d.h_out {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ox_num = ix + d.pad;
                                if ox_num < kx || (ox_num - kx) % d.stride != 0 {
                                    continue;
                                }
                                let ox = (ox_num - kx) / d.stride;
                                if ox >= d.w_out {
                                    continue;
                                }
                                acc += gyc[oy * d.w_out + ox] as f64
                                    * wk[ky * d.kw + kx] as f64;
                            }
                        }
                    }
                    gxi[ci * in_plane + iy * d.w_in + ix] = acc as f32;
                }
            }
        }
    };
    if d.batch * per_image >= MIN_PAR_OUT && d.batch > 1 {
        gx.par_chunks_mut(per_image)
            .enumerate()
            .for_each(|(n, gxi)| image(gxi, n));
    } else {
        for (n, gxi) in gx.chunks_mut(per_image).enumerate() {
            image(gxi, n);
        }
    }
    gx
}

/// Gradient of `conv2d_fwd` with respect to its weights.
pub fn conv2d_bwd_w(x: &[f32], gy: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    let per_filter = d.c_in * d.kh * d.kw;
    let mut gw = vec![0.0f32; d.c_out * per_filter];
    let filter = |gwc: &mut [f32], co: usize| {
        for ci in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0f64;
                    for n in 0..d.batch {
                        let xc = &x[(n * d.c_in + ci) * in_plane..];
                        let gyc = &gy[(n * d.c_out + co) * out_plane..];
                        for oy in 0..d.h_out {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy - d.pad >= d.h_in {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for ox in 0..d.w_out {
                                let ix = ox * d.stride + kx;
                                if ix < d.pad || ix - d.pad >= d.w_in {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                acc += xc[iy * d.w_in + ix] as f64
                                    * gyc[oy * d.w_out + ox] as f64;
                            }
                        }
                    }
                    gwc[(ci * d.kh + ky) * d.kw + kx] = acc as f32;
                }
            }
        }
    };
    if d.c_out * per_filter * d.batch >= MIN_PAR_OUT && d.c_out > 1 {
        gw.par_chunks_mut(per_filter)
            .enumerate()
            .for_each(|(co, gwc)| filter(gwc, co));
    } else {
        for (co, gwc) in gw.chunks_mut(per_filter).enumerate() {
            filter(gwc, co);
        }
    }
    gw
}

/// Gradient of a conv-family op with respect to its per-channel bias:
/// the sum of `gy` over batch and spatial positions.
pub fn conv_bwd_b(gy: &[f32], batch: usize, c_out: usize, out_plane: usize) -> Vec<f32> {
    let mut gb = vec![0.0f32; c_out];
    for (co, gbc) in gb.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for n in 0..batch {
            let gyc = &gy[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
            for &g in gyc {
                acc += g as f64;
            }
        }
        *gbc = acc as f32;
    }
    gb
}

/// Forward transposed convolution. x: [n,ci,h,w], w: [ci,co,kh,kw], b: [co].
pub fn convt2d_fwd(x: &[f32], w: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    let per_image = d.c_out * out_plane;
    let mut y = vec![0.0f32; d.batch * per_image];
    let image = |yi: &mut [f32], n: usize| {
        let xn = &x[n * d.c_in * in_plane..(n + 1) * d.c_in * in_plane];
        for co in 0..d.c_out {
            let bias = b[co] as f64;
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut acc = bias;
                    for ci in 0..d.c_in {
                        let xc = &xn[ci * in_plane..(ci + 1) * in_plane];
                        let wk = &w[(ci * d.c_out + co) * d.kh * d.kw..];
                        for ky in 0..d.kh {
                            let iy_num = oy + d.pad;
                            if iy_num < ky || (iy_num - ky) % d.stride != 0 {
                                continue;
                            }
                            let iy = (iy_num - ky) / d.stride;
                            if iy >= d.h_in {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix_num = ox + d.pad;
                                if ix_num < kx || (ix_num - kx) % d.stride != 0 {
                                    continue;
                                }
                                let ix = (ix_num - kx) / d.stride;
                                if ix >= d.w_in {
                                    continue;
                                }
                                acc += xc[iy * d.w_in + ix] as f64
                                    * wk[ky * d.kw + kx] as f64;
                            }
                        }
                    }
                    yi[co * out_plane + oy * d.w_out + ox] = acc as f32;
                }
            }
        }
    };
    if d.batch * per_image >= MIN_PAR_OUT && d.batch > 1 {
        y.par_chunks_mut(per_image)
            .enumerate()
            .for_each(|(n, yi)| image(yi, n));
    } else {
        for (n, yi) in y.chunks_mut(per_image).enumerate() {
            image(yi, n);
        }
    }
    y
}

/// Gradient of `convt2d_fwd` with respect to its input.
pub fn convt2d_bwd_x(gy: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    let per_image = d.c_in * in_plane;
    let mut gx = vec![0.0f32; d.batch * per_image];
    let image = |gxi: &mut [f32], n: usize| {
        let gyn = &gy[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for ci in 0..d.c_in {
            for iy in 0..d.h_in {
                for ix in 0..d.w_in {
                    let mut acc = 0.0f64;
                    for co in 0..d.c_out {
                        let gyc = &gyn[co * out_plane..(co + 1) * out_plane];
                        let wk = &w[(ci * d.c_out + co) * d.kh * d.kw..];
                        for ky in 0..d.kh {
                            let oy_num = iy * d.stride + ky;
                            if oy_num < d.pad || oy_num - d.pad >= d.h_out {
                                continue;
                            }
                            let oy = oy_num - d.pad;
                            for kx in 0..d.kw {
                                let ox_num = ix * d.stride + kx;
                                if ox_num < d.pad || ox_num - d.pad >= d.w_out {
                                    continue;
                                }
                                let ox = ox_num - d.pad;
                                acc += gyc[oy * d.w_out + ox] as f64
                                    * wk[ky * d.kw + kx] as f64;
                            }
                        }
                    }
                    gxi[ci * in_plane + iy * d.w_in + ix] = acc as f32;
                }
            }
        }
    };
    if d.batch * per_image >= MIN_PAR_OUT && d.batch > 1 {
        gx.par_chunks_mut(per_image)
            .enumerate()
            .for_each(|(n, gxi)| image(gxi, n));
    } else {
        for (n, gxi) in gx.chunks_mut(per_image).enumerate() {
            image(gxi, n);
        }
    }
    gx
}

/// Gradient of `convt2d_fwd` with respect to its weights.
pub fn convt2d_bwd_w(x: &[f32], gy: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h_in * d.w_in;
    let out_plane = d.h_out * d.w_out;
    let per_in_channel = d.c_out * d.kh * d.kw;
    let mut gw = vec![0.0f32; d.c_in * per_in_channel];
    let channel = |gwc: &mut [f32], ci: usize| {
        for co in 0..d.c_out {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0f64;
                    for n in 0..d.batch {
                        let xc = &x[(n * d.c_in + ci) * in_plane..];
                        let gyc = &gy[(n * d.c_out + co) * out_plane..];
                        for iy in 0..d.h_in {
                            let oy_num = iy * d.stride + ky;
                            if oy_num < d.pad || oy_num - d.pad >= d.h_out {
                                continue;
                            }
                            let oy = oy_num - d.pad;
                            for ix in 0..d.w_in {
                                let ox_num = ix * d.stride + kx;
                                if ox_num < d.pad || ox_num - d.pad >= d.w_out {
                                    continue;
                                }
                                let ox = ox_num - d.pad;
                                acc += xc[iy * d.w_in + ix] as f64
                                    * gyc[oy * d.w_out + ox] as f64;
                            }
                        }
                    }
                    gwc[(co * d.kh + ky) * d.kw + kx] = acc as f32;
                }
            }
        }
    };
    if d.c_in * per_in_channel * d.batch >= MIN_PAR_OUT && d.c_in > 1 {
        gw.par_chunks_mut(per_in_channel)
            .enumerate()
            .for_each(|(ci, gwc)| channel(gwc, ci));
    } else {
        for (ci, gwc) in gw.chunks_mut(per_in_channel).enumerate() {
            channel(gwc, ci);
        }
    }
    gw
}

/// Forward max pooling with a square window and matching stride.
/// Returns pooled values and the flat input index of each maximum
/// (first occurrence wins on ties).
pub fn maxpool2d_fwd(
    x: &[f32],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let ho = h / k;
    let wo = w / k;
    let in_plane = h * w;
    let out_plane = ho * wo;
    let per_image_out = channels * out_plane;
    let mut y = vec![0.0f32; batch * per_image_out];
    let mut arg = vec![0u32; batch * per_image_out];
    for n in 0..batch {
        for c in 0..channels {
            let base_in = (n * channels + c) * in_plane;
            let base_out = (n * channels + c) * out_plane;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let iy = oy * k + ky;
                        for kx in 0..k {
                            let ix = ox * k + kx;
                            let idx = base_in + iy * w + ix;
                            let v = x[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    y[base_out + oy * wo + ox] = best;
                    arg[base_out + oy * wo + ox] = best_idx as u32;
                }
            }
        }
    }
    (y, arg, ho, wo)
}

/// Backward max pooling: routes each output gradient to the input
/// position that produced the maximum.
pub fn maxpool2d_bwd(gy: &[f32], argmax: &[u32], x_len: usize) -> Vec<f32> {
    let mut gx = vec![0.0f32; x_len];
    for (g, &idx) in gy.iter().zip(argmax.iter()) {
        gx[idx as usize] += g;
    }
    gx
}
