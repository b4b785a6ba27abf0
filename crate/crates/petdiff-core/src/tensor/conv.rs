//! Direct cross-correlation kernels for 2 and 3 spatial dimensions, plus the
//! two adjoint data paths (gradient w.r.t. input, gradient w.r.t. kernel).
//!
//! The three maps form a closed trio under differentiation: the backward of
//! each one is expressed by the other two, which is what lets conv layers sit
//! on arbitrarily deep gradient-of-gradient paths. All paths lower to an
//! im2col column matrix and a register-blocked GEMM with fixed tile sizes and
//! loop order, so results are bit-deterministic across runs.

/// Output spatial extent of a single axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn spatial_product(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Range `lo..hi` of output positions whose input index `ox * stride + sh`
/// lands inside `0..w`.
fn valid_out_range(w: usize, ow: usize, stride: usize, sh: isize) -> (usize, usize) {
    let lo = if sh >= 0 {
        0
    } else {
        (((-sh) as usize) + stride - 1) / stride
    };
    let hi_num = w as isize - 1 - sh;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num as usize / stride + 1).min(ow)
    };
    (lo.min(ow), hi)
}

/// Builds the column matrix `col[c*K + tap][out_pos]` for one batch element,
/// where `K` is the kernel tap count and `out_pos` ranges over output spatial
/// positions. Out-of-bounds taps contribute zero.
fn im2col(
    x: &[f32],
    channels: usize,
    in_sp: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    out_sp: &[usize],
    col: &mut [f32],
) {
    let out_n = spatial_product(out_sp);
    match in_sp.len() {
        2 => {
            let (h, w) = (in_sp[0], in_sp[1]);
            let (oh, ow) = (out_sp[0], out_sp[1]);
            let mut row = 0;
            for c in 0..channels {
                let xc = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut col[row * out_n..(row + 1) * out_n];
                        row += 1;
                        let sh = kx as isize - pad as isize;
                        let (lo, hi) = valid_out_range(w, ow, stride, sh);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= h as isize || lo >= hi {
                                out_row.fill(0.0);
                                continue;
                            }
                            let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                            out_row[..lo].fill(0.0);
                            out_row[hi..].fill(0.0);
                            if stride == 1 {
                                let off = (lo as isize + sh) as usize;
                                out_row[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride) as isize + sh;
                                    out_row[ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (in_sp[0], in_sp[1], in_sp[2]);
            let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
            let mut row = 0;
            for c in 0..channels {
                let xc = &x[c * d * h * w..(c + 1) * d * h * w];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let dst = &mut col[row * out_n..(row + 1) * out_n];
                            row += 1;
                            let mut p = 0;
                            for oz in 0..od {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        dst[p] = if iz >= 0
                                            && iz < d as isize
                                            && iy >= 0
                                            && iy < h as isize
                                            && ix >= 0
                                            && ix < w as isize
                                        {
                                            xc[(iz as usize * h + iy as usize) * w + ix as usize]
                                        } else {
                                            0.0
                                        };
                                        p += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => unreachable!("unsupported spatial rank {r}"),
    }
}

/// Adjoint of [`im2col`]: scatter-adds column entries back to input positions.
fn col2im(
    col: &[f32],
    channels: usize,
    in_sp: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    out_sp: &[usize],
    x: &mut [f32],
) {
    if in_sp.len() == 2 {
        col2im_2d(
            col,
            channels,
            (in_sp[0], in_sp[1]),
            k,
            stride,
            pad,
            (out_sp[0], out_sp[1]),
            x,
        );
        return;
    }
    let out_n = spatial_product(out_sp);
    let taps = k.pow(in_sp.len() as u32);
    let mut tap_coord = vec![0usize; in_sp.len()];
    for c in 0..channels {
        tap_coord.fill(0);
        for tap in 0..taps {
            let src = &col[(c * taps + tap) * out_n..(c * taps + tap + 1) * out_n];
            let mut out_coord = vec![0usize; in_sp.len()];
            for &v in src.iter() {
                if v != 0.0 {
                    let mut in_lin = 0;
                    let mut ok = true;
                    for ax in 0..in_sp.len() {
                        let i = (out_coord[ax] * stride + tap_coord[ax]) as isize - pad as isize;
                        if i < 0 || i >= in_sp[ax] as isize {
                            ok = false;
                            break;
                        }
                        in_lin = in_lin * in_sp[ax] + i as usize;
                    }
                    if ok {
                        x[c * spatial_product(in_sp) + in_lin] += v;
                    }
                }
                for ax in (0..in_sp.len()).rev() {
                    out_coord[ax] += 1;
                    if out_coord[ax] < out_sp[ax] {
                        break;
                    }
                    out_coord[ax] = 0;
                }
            }
            // advance tap counter
            for ax in (0..in_sp.len()).rev() {
                tap_coord[ax] += 1;
                if tap_coord[ax] < k {
                    break;
                }
                tap_coord[ax] = 0;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d(
    col: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    x: &mut [f32],
) {
    let out_n = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * out_n..(row + 1) * out_n];
                row += 1;
                let sh = kx as isize - pad as isize;
                let (lo, hi) = valid_out_range(w, ow, stride, sh);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let off = (lo as isize + sh) as usize;
                        for (d, s) in xrow[off..off + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = (ox * stride) as isize + sh;
                            xrow[ix as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `c[m][n] += a[m][kk] * b[kk][n]` with fixed 4x16 register tiling. Every
/// output element accumulates over `kk` in ascending order regardless of tile
/// shape, so the result does not depend on how the matrix splits into tiles.
fn gemm_acc(cmat: &mut [f32], a: &[f32], b: &[f32], m: usize, kk: usize, n: usize) {
    let mut i0 = 0;
    while i0 < m {
        let mi = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nj = NR.min(n - j0);
            if mi == MR && nj == NR {
                let mut acc = [[0.0f32; NR]; MR];
                let a0 = &a[i0 * kk..(i0 + 1) * kk];
                let a1 = &a[(i0 + 1) * kk..(i0 + 2) * kk];
                let a2 = &a[(i0 + 2) * kk..(i0 + 3) * kk];
                let a3 = &a[(i0 + 3) * kk..(i0 + 4) * kk];
                for p in 0..kk {
                    let brow = &b[p * n + j0..p * n + j0 + NR];
                    let av = [a0[p], a1[p], a2[p], a3[p]];
                    for (accr, &avr) in acc.iter_mut().zip(&av) {
                        for (ac, &bv) in accr.iter_mut().zip(brow) {
                            *ac += avr * bv;
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    let crow = &mut cmat[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                    for (cv, &ac) in crow.iter_mut().zip(accr) {
                        *cv += ac;
                    }
                }
            } else {
                for r in 0..mi {
                    let arow = &a[(i0 + r) * kk..(i0 + r + 1) * kk];
                    let crow = &mut cmat[(i0 + r) * n + j0..(i0 + r) * n + j0 + nj];
                    for (p, &av) in arow.iter().enumerate() {
                        let brow = &b[p * n + j0..p * n + j0 + nj];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

const LANES: usize = 8;

/// Dot product with a fixed 8-lane partial-sum layout and a fixed-order final
/// reduction; deterministic for a given length.
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let ai = &a[i * LANES..(i + 1) * LANES];
        let bi = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ai[l] * bi[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = 0.0f32;
    for &v in &acc {
        s += v;
    }
    s + tail
}

/// Cross-correlation forward: `x[N,C,*sp] * w[F,C,*k] -> [N,F,*out_sp]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_fwd(
    x: &[f32],
    n: usize,
    channels: usize,
    in_sp: &[usize],
    w: &[f32],
    filters: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f32>) {
    let out_sp: Vec<usize> = in_sp
        .iter()
        .map(|&e| conv_out_extent(e, k, stride, pad))
        .collect();
    let out_n = spatial_product(&out_sp);
    let taps = k.pow(in_sp.len() as u32);
    let rows = channels * taps;
    let mut col = vec![0.0f32; rows * out_n];
    let in_n = spatial_product(in_sp);
    let mut out = vec![0.0f32; n * filters * out_n];
    for b in 0..n {
        im2col(
            &x[b * channels * in_n..(b + 1) * channels * in_n],
            channels,
            in_sp,
            k,
            stride,
            pad,
            &out_sp,
            &mut col,
        );
        let dst = &mut out[b * filters * out_n..(b + 1) * filters * out_n];
        gemm_acc(dst, w, &col, filters, rows, out_n);
    }
    (out_sp, out)
}

/// Gradient w.r.t. the convolution input: `gy[N,F,*out_sp], w[F,C,*k] -> [N,C,*in_sp]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_back_input(
    gy: &[f32],
    n: usize,
    filters: usize,
    out_sp: &[usize],
    w: &[f32],
    channels: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_sp: &[usize],
) -> Vec<f32> {
    let out_n = spatial_product(out_sp);
    let in_n = spatial_product(in_sp);
    let taps = k.pow(in_sp.len() as u32);
    let rows = channels * taps;
    let mut wt = vec![0.0f32; rows * filters];
    for f in 0..filters {
        for r in 0..rows {
            wt[r * filters + f] = w[f * rows + r];
        }
    }
    let mut col = vec![0.0f32; rows * out_n];
    let mut gx = vec![0.0f32; n * channels * in_n];
    for b in 0..n {
        col.fill(0.0);
        gemm_acc(
            &mut col,
            &wt,
            &gy[b * filters * out_n..(b + 1) * filters * out_n],
            rows,
            filters,
            out_n,
        );
        col2im(
            &col,
            channels,
            in_sp,
            k,
            stride,
            pad,
            out_sp,
            &mut gx[b * channels * in_n..(b + 1) * channels * in_n],
        );
    }
    gx
}

/// Gradient w.r.t. the convolution kernel: `gy[N,F,*out_sp], x[N,C,*in_sp] -> [F,C,*k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_back_kernel(
    gy: &[f32],
    n: usize,
    filters: usize,
    out_sp: &[usize],
    x: &[f32],
    channels: usize,
    in_sp: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let out_n = spatial_product(out_sp);
    let in_n = spatial_product(in_sp);
    let taps = k.pow(in_sp.len() as u32);
    let rows = channels * taps;
    let mut col = vec![0.0f32; rows * out_n];
    let mut gw = vec![0.0f64; filters * rows];
    for b in 0..n {
        im2col(
            &x[b * channels * in_n..(b + 1) * channels * in_n],
            channels,
            in_sp,
            k,
            stride,
            pad,
            out_sp,
            &mut col,
        );
        for f in 0..filters {
            let src = &gy[(b * filters + f) * out_n..(b * filters + f + 1) * out_n];
            for r in 0..rows {
                let c = &col[r * out_n..(r + 1) * out_n];
                gw[f * rows + r] += dot_lanes(src, c) as f64;
            }
        }
    }
    gw.into_iter().map(|v| v as f32).collect()
}
