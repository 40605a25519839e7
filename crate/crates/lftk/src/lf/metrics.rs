//! PSNR and SSIM for unit-range light fields, averaged per sub-aperture image.

use super::{Image2d, LightField4D};
use crate::error::{Error, Result};

/// PSNR of identical inputs is reported as this cap instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &LightField4D, b: &LightField4D) -> Result<()> {
    if a.m != b.m || a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::shape(format!(
            "light field shapes differ: {}x{}x{}x{} vs {}x{}x{}x{}",
            a.m, a.n, a.h, a.w, b.m, b.n, b.h, b.w
        )));
    }
    Ok(())
}

/// PSNR (peak 1.0) of a single image pair, capped at [`PSNR_CAP_DB`].
pub fn psnr_image(a: &Image2d, b: &Image2d) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::shape("image shapes differ".to_string()));
    }
    let mut se = 0f64;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / (a.h * a.w) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-view PSNR, in (u,v) row-major order.
pub fn psnr_per_view(a: &LightField4D, b: &LightField4D) -> Result<Vec<f64>> {
    check_same_shape(a, b)?;
    let mut out = Vec::with_capacity(a.views());
    for u in 0..a.m {
        for v in 0..a.n {
            out.push(psnr_image(&a.sai(u, v), &b.sai(u, v))?);
        }
    }
    Ok(out)
}

/// Mean over per-view PSNRs.
pub fn psnr(a: &LightField4D, b: &LightField4D) -> Result<f64> {
    let per = psnr_per_view(a, b)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn gaussian_window_1d() -> [f64; SSIM_WIN] {
    let mut w = [0f64; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= sum;
    }
    w
}

/// Horizontal then vertical pass of the separable Gaussian window; output
/// covers only fully valid window placements: (h-10) x (w-10).
fn windowed_means(field: &[f64], h: usize, w: usize, win: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut horiz = vec![0f64; h * ow];
    for x in 0..h {
        let row = &field[x * w..(x + 1) * w];
        for y in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * row[y + k];
            }
            horiz[x * ow + y] = s;
        }
    }
    let mut out = vec![0f64; oh * ow];
    for x in 0..oh {
        for y in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * horiz[(x + k) * ow + y];
            }
            out[x * ow + y] = s;
        }
    }
    out
}

/// SSIM of one image pair: 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1.0, averaged over all valid window placements.
pub fn ssim_image(a: &Image2d, b: &Image2d) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::shape("image shapes differ".to_string()));
    }
    if a.h < SSIM_WIN || a.w < SSIM_WIN {
        return Err(Error::shape(format!(
            "SSIM needs at least {0}x{0} pixels, got {1}x{2}",
            SSIM_WIN, a.h, a.w
        )));
    }
    let (h, w) = (a.h, a.w);
    let af: Vec<f64> = a.as_slice().iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.as_slice().iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();

    let win = gaussian_window_1d();
    let mu_a = windowed_means(&af, h, w, &win);
    let mu_b = windowed_means(&bf, h, w, &win);
    let s_aa = windowed_means(&aa, h, w, &win);
    let s_bb = windowed_means(&bb, h, w, &win);
    let s_ab = windowed_means(&ab, h, w, &win);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean over per-view SSIMs.
pub fn ssim(a: &LightField4D, b: &LightField4D) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut total = 0f64;
    for u in 0..a.m {
        for v in 0..a.n {
            total += ssim_image(&a.sai(u, v), &b.sai(u, v))?;
        }
    }
    Ok(total / a.views() as f64)
}
