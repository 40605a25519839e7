//! Convolution inner loops, kept free of tape plumbing.
//!
//! Two regimes. 1x1 kernels are plain channel mixes and keep a row-axpy
//! implementation with f64 accumulators — the measurement-simulation path
//! leans on that headroom. Larger kernels go through im2col plus a
//! register-tiled f32 GEMM, dispatched to an AVX2+FMA build when the CPU
//! offers it. Both regimes add into one sequential accumulator per output
//! element, in ascending (channel, tap) order; a zeroed channel block is
//! then bit-equivalent to slicing it away, which the droppath equivalence
//! guarantees rely on.

#[derive(Clone, Copy)]
pub struct ConvDims {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
}

/// Valid output row range for a tap offset `d`: rows y with 0 <= y+d < h.
fn tap_range(h: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi_signed = (h as isize).min(h as isize - d);
    (lo, hi_signed.max(0) as usize)
}

pub fn conv2d_forward(
    x: &[f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    wt: &[f32],
    o: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    if kh == 1 && kw == 1 {
        return forward_rows_f64(x, b, c, h, w, wt, o, kh, kw, bias);
    }
    let hw = h * w;
    let k = c * kh * kw;
    let mut out = vec![0.0f32; b * o * hw];
    let mut cols = vec![0.0f32; k * hw];
    for bi in 0..b {
        im2col(&x[bi * c * hw..][..c * hw], c, h, w, kh, kw, &mut cols);
        gemm(o, k, hw, wt, &cols, &mut out[bi * o * hw..][..o * hw], false);
    }
    if let Some(bv) = bias {
        for bi in 0..b {
            for oi in 0..o {
                let add = bv[oi];
                for v in &mut out[(bi * o + oi) * hw..][..hw] {
                    *v += add;
                }
            }
        }
    }
    out
}

/// d loss / d input: correlate the output gradient with the flipped kernel.
pub fn conv2d_grad_input(gout: &[f32], wt: &[f32], d: &ConvDims) -> Vec<f32> {
    if d.kh == 1 && d.kw == 1 {
        return grad_input_rows_f64(gout, wt, d);
    }
    let hw = d.h * d.w;
    let k = d.c * d.kh * d.kw;
    let mut wtr = vec![0.0f32; k * d.o];
    for oi in 0..d.o {
        for ki in 0..k {
            wtr[ki * d.o + oi] = wt[oi * k + ki];
        }
    }
    let mut gx = vec![0.0f32; d.b * d.c * hw];
    let mut gcols = vec![0.0f32; k * hw];
    for bi in 0..d.b {
        gemm(k, d.o, hw, &wtr, &gout[bi * d.o * hw..][..d.o * hw], &mut gcols, false);
        col2im_add(&gcols, d.c, d.h, d.w, d.kh, d.kw, &mut gx[bi * d.c * hw..][..d.c * hw]);
    }
    gx
}

/// d loss / d weight: one dot product per (out channel, patch row).
pub fn conv2d_grad_weight(gout: &[f32], x: &[f32], d: &ConvDims) -> Vec<f32> {
    if d.kh == 1 && d.kw == 1 {
        return grad_weight_rows_f64(gout, x, d);
    }
    let hw = d.h * d.w;
    let k = d.c * d.kh * d.kw;
    let mut gw = vec![0.0f32; d.o * k];
    let mut cols = vec![0.0f32; k * hw];
    for bi in 0..d.b {
        im2col(&x[bi * d.c * hw..][..d.c * hw], d.c, d.h, d.w, d.kh, d.kw, &mut cols);
        gemm_nt(d.o, hw, k, &gout[bi * d.o * hw..][..d.o * hw], &cols, &mut gw, true);
    }
    gw
}

pub fn conv2d_grad_bias(gout: &[f32], d: &ConvDims) -> Vec<f32> {
    let hw = d.h * d.w;
    let mut gb = vec![0.0f32; d.o];
    for oi in 0..d.o {
        let mut acc = 0f64;
        for bi in 0..d.b {
            for &g in &gout[(bi * d.o + oi) * hw..][..hw] {
                acc += g as f64;
            }
        }
        gb[oi] = acc as f32;
    }
    gb
}

// ---- im2col / col2im ----

/// Lay one image out as a (C*KH*KW, H*W) patch matrix: row (c, ky, kx) holds
/// the image shifted by that tap, zero-padded at the borders. Row order
/// matches the flattened weight layout.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [f32]) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut row = 0usize;
    for ci in 0..c {
        let xin = &x[ci * hw..][..hw];
        for ky in 0..kh {
            let dy = ky as isize - ph;
            let (y0, y1) = tap_range(h, dy);
            for kx in 0..kw {
                let dx = kx as isize - pw;
                let (x0, x1) = tap_range(w, dx);
                let dst = &mut cols[row * hw..][..hw];
                row += 1;
                dst[..y0.min(h) * w].fill(0.0);
                dst[y1 * w..].fill(0.0);
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let drow = &mut dst[y * w..][..w];
                    drow[..x0].fill(0.0);
                    drow[x1..].fill(0.0);
                    if x0 < x1 {
                        let src = yi * w + (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&xin[src..src + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add each patch row back into the image.
fn col2im_add(cols: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, img: &mut [f32]) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut row = 0usize;
    for ci in 0..c {
        let dst = &mut img[ci * hw..][..hw];
        for ky in 0..kh {
            let dy = ky as isize - ph;
            let (y0, y1) = tap_range(h, dy);
            for kx in 0..kw {
                let dx = kx as isize - pw;
                let (x0, x1) = tap_range(w, dx);
                let src = &cols[row * hw..][..hw];
                row += 1;
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let off = yi * w + (x0 as isize + dx) as usize;
                    let drow = &mut dst[off..off + (x1 - x0)];
                    let srow = &src[y * w + x0..y * w + x1];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// ---- f32 GEMM ----

#[inline(always)]
fn madd<const FMA: bool>(a: f32, b: f32, acc: f32) -> f32 {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[cfg(target_arch = "x86_64")]
fn fma_available() -> bool {
    use std::sync::OnceLock;
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

const MR: usize = 4;
const NR: usize = 16;

/// C (m x n) = A (m x k) * B (k x n), all row-major; `add` accumulates into C
/// instead of overwriting. Each output element is a single k-ascending chain.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], add: bool) {
    #[cfg(target_arch = "x86_64")]
    if fma_available() {
        unsafe { gemm_fma(m, k, n, a, b, c, add) };
        return;
    }
    gemm_body::<false>(m, k, n, a, b, c, add)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_fma(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], add: bool) {
    gemm_body::<true>(m, k, n, a, b, c, add)
}

#[inline(always)]
fn gemm_body<const FMA: bool>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    add: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut m0 = 0;
    while m0 < m {
        let mr = (m - m0).min(MR);
        let mut n0 = 0;
        while n0 < n {
            let nr = (n - n0).min(NR);
            if mr == MR && nr == NR {
                let rows = [
                    &a[m0 * k..][..k],
                    &a[(m0 + 1) * k..][..k],
                    &a[(m0 + 2) * k..][..k],
                    &a[(m0 + 3) * k..][..k],
                ];
                let mut acc = [[0.0f32; NR]; MR];
                for kk in 0..k {
                    let brow: &[f32; NR] = b[kk * n + n0..][..NR].try_into().unwrap();
                    for mi in 0..MR {
                        let av = rows[mi][kk];
                        for ni in 0..NR {
                            acc[mi][ni] = madd::<FMA>(av, brow[ni], acc[mi][ni]);
                        }
                    }
                }
                for mi in 0..MR {
                    let crow = &mut c[(m0 + mi) * n + n0..][..NR];
                    if add {
                        for ni in 0..NR {
                            crow[ni] += acc[mi][ni];
                        }
                    } else {
                        crow.copy_from_slice(&acc[mi]);
                    }
                }
            } else {
                // ragged edge: same per-element chain, scalar
                for mi in 0..mr {
                    let arow = &a[(m0 + mi) * k..][..k];
                    for ni in 0..nr {
                        let mut s = 0.0f32;
                        for (kk, &av) in arow.iter().enumerate() {
                            s = madd::<FMA>(av, b[kk * n + n0 + ni], s);
                        }
                        let dst = &mut c[(m0 + mi) * n + n0 + ni];
                        if add {
                            *dst += s;
                        } else {
                            *dst = s;
                        }
                    }
                }
            }
            n0 += NR;
        }
        m0 += MR;
    }
}

/// C (m x n) (+)= A (m x kk) * B^T where B is stored row-major (n x kk):
/// plain row-by-row dot products, lane partials reduced in a fixed order.
fn gemm_nt(m: usize, kk: usize, n: usize, a: &[f32], bt: &[f32], c: &mut [f32], add: bool) {
    #[cfg(target_arch = "x86_64")]
    if fma_available() {
        unsafe { gemm_nt_fma(m, kk, n, a, bt, c, add) };
        return;
    }
    gemm_nt_body::<false>(m, kk, n, a, bt, c, add)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_nt_fma(
    m: usize,
    kk: usize,
    n: usize,
    a: &[f32],
    bt: &[f32],
    c: &mut [f32],
    add: bool,
) {
    gemm_nt_body::<true>(m, kk, n, a, bt, c, add)
}

#[inline(always)]
fn gemm_nt_body<const FMA: bool>(
    m: usize,
    kk: usize,
    n: usize,
    a: &[f32],
    bt: &[f32],
    c: &mut [f32],
    add: bool,
) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(bt.len(), n * kk);
    debug_assert_eq!(c.len(), m * n);
    for mi in 0..m {
        let ar = &a[mi * kk..][..kk];
        for ni in 0..n {
            let br = &bt[ni * kk..][..kk];
            let mut lanes = [0.0f32; 8];
            let full = kk / 8 * 8;
            for (ac, bc) in ar[..full].chunks_exact(8).zip(br[..full].chunks_exact(8)) {
                for l in 0..8 {
                    lanes[l] = madd::<FMA>(ac[l], bc[l], lanes[l]);
                }
            }
            let mut s = 0.0f32;
            for &l in &lanes {
                s += l;
            }
            for i in full..kk {
                s = madd::<FMA>(ar[i], br[i], s);
            }
            let dst = &mut c[mi * n + ni];
            if add {
                *dst += s;
            } else {
                *dst = s;
            }
        }
    }
}

// ---- 1x1 row-axpy fallback with f64 accumulators ----

#[allow(clippy::too_many_arguments)]
fn forward_rows_f64(
    x: &[f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    wt: &[f32],
    o: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut out = vec![0.0f32; b * o * hw];
    let mut acc = vec![0f64; hw];
    for bi in 0..b {
        for oi in 0..o {
            let base = bias.map_or(0.0, |bv| bv[oi] as f64);
            acc.iter_mut().for_each(|v| *v = base);
            for ci in 0..c {
                let xin = &x[(bi * c + ci) * hw..][..hw];
                let wbase = (oi * c + ci) * kh * kw;
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let wv = wt[wbase + ky * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let yi = (y as isize + dy) as usize;
                            let dst = &mut acc[y * w + x0..y * w + x1];
                            let src_off = yi * w + (x0 as isize + dx) as usize;
                            let src = &xin[src_off..src_off + (x1 - x0)];
                            for (a, &v) in dst.iter_mut().zip(src) {
                                *a += wv * v as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(bi * o + oi) * hw..][..hw];
            for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                *d = a as f32;
            }
        }
    }
    out
}

fn grad_input_rows_f64(gout: &[f32], wt: &[f32], d: &ConvDims) -> Vec<f32> {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let hw = d.h * d.w;
    let mut gx = vec![0.0f32; d.b * d.c * hw];
    let mut acc = vec![0f64; hw];
    for bi in 0..d.b {
        for ci in 0..d.c {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for oi in 0..d.o {
                let gv = &gout[(bi * d.o + oi) * hw..][..hw];
                let wbase = (oi * d.c + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    // out[y] consumed in[y + dy]; flowing back, in[y] gets out[y - dy]
                    let dy = -(ky as isize - ph);
                    let (y0, y1) = tap_range(d.h, dy);
                    for kx in 0..d.kw {
                        let dx = -(kx as isize - pw);
                        let wv = wt[wbase + ky * d.kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(d.w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let ys = (y as isize + dy) as usize;
                            let dst = &mut acc[y * d.w + x0..y * d.w + x1];
                            let src_off = ys * d.w + (x0 as isize + dx) as usize;
                            let src = &gv[src_off..src_off + (x1 - x0)];
                            for (a, &v) in dst.iter_mut().zip(src) {
                                *a += wv * v as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut gx[(bi * d.c + ci) * hw..][..hw];
            for (t, &a) in dst.iter_mut().zip(acc.iter()) {
                *t = a as f32;
            }
        }
    }
    gx
}

fn grad_weight_rows_f64(gout: &[f32], x: &[f32], d: &ConvDims) -> Vec<f32> {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let hw = d.h * d.w;
    let mut gw = vec![0.0f32; d.o * d.c * d.kh * d.kw];
    for oi in 0..d.o {
        for ci in 0..d.c {
            let wbase = (oi * d.c + ci) * d.kh * d.kw;
            for ky in 0..d.kh {
                let dy = ky as isize - ph;
                let (y0, y1) = tap_range(d.h, dy);
                for kx in 0..d.kw {
                    let dx = kx as isize - pw;
                    let (x0, x1) = tap_range(d.w, dx);
                    if x0 >= x1 || y0 >= y1 {
                        continue;
                    }
                    let mut acc = 0f64;
                    for bi in 0..d.b {
                        let gv = &gout[(bi * d.o + oi) * hw..][..hw];
                        let xv = &x[(bi * d.c + ci) * hw..][..hw];
                        for y in y0..y1 {
                            let yi = (y as isize + dy) as usize;
                            let grow = &gv[y * d.w + x0..y * d.w + x1];
                            let src_off = yi * d.w + (x0 as isize + dx) as usize;
                            let xrow = &xv[src_off..src_off + (x1 - x0)];
                            for (&gg, &xx) in grow.iter().zip(xrow) {
                                acc += gg as f64 * xx as f64;
                            }
                        }
                    }
                    gw[wbase + ky * d.kw + kx] = acc as f32;
                }
            }
        }
    }
    gw
}
