//! 4-D light field containers and the reference operations everything else is
//! measured against.

pub mod io;
pub mod metrics;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Whether sample values are expected to live in [0,1] (`Unit`) or may fall
/// outside it (`Raw`: unnormalized measurement sums, noisy frames).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    Unit,
    Raw,
}

/// Grayscale 4-D light field L(u,v,x,y): an M x N grid of angular views, each
/// H x W pixels, stored row-major in (u,v,x,y) order.
#[derive(Clone, Debug)]
pub struct LightField4D {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub range: ValueRange,
    data: Vec<f32>,
}

/// A single 2-D grayscale image (SAI, EPI, measurement slice).
#[derive(Clone, Debug, PartialEq)]
pub struct Image2d {
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Image2d {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image2d { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(Image2d { h, w, data })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[x * self.w + y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[x * self.w + y] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

impl LightField4D {
    pub fn zeros(m: usize, n: usize, h: usize, w: usize) -> Self {
        LightField4D { m, n, h, w, range: ValueRange::Unit, data: vec![0.0; m * n * h * w] }
    }

    pub fn from_vec(
        m: usize,
        n: usize,
        h: usize,
        w: usize,
        range: ValueRange,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != m * n * h * w {
            return Err(Error::shape(format!(
                "light field data length {} does not match {}x{}x{}x{}",
                data.len(),
                m,
                n,
                h,
                w
            )));
        }
        Ok(LightField4D { m, n, h, w, range, data })
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize, x: usize, y: usize) -> usize {
        ((u * self.n + v) * self.h + x) * self.w + y
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize, x: usize, y: usize) -> f32 {
        self.data[self.idx(u, v, x, y)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: usize, y: usize, val: f32) {
        let i = self.idx(u, v, x, y);
        self.data[i] = val;
    }

    pub fn views(&self) -> usize {
        self.m * self.n
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Borrow one view's pixels as a contiguous slice.
    pub fn view_slice(&self, u: usize, v: usize) -> &[f32] {
        let start = self.idx(u, v, 0, 0);
        &self.data[start..start + self.h * self.w]
    }

    /// Extract the sub-aperture image at angular position (u,v).
    pub fn sai(&self, u: usize, v: usize) -> Image2d {
        Image2d { h: self.h, w: self.w, data: self.view_slice(u, v).to_vec() }
    }

    pub fn set_sai(&mut self, u: usize, v: usize, img: &Image2d) -> Result<()> {
        if img.h != self.h || img.w != self.w {
            return Err(Error::shape("SAI dimensions do not match light field".to_string()));
        }
        let start = self.idx(u, v, 0, 0);
        self.data[start..start + self.h * self.w].copy_from_slice(img.as_slice());
        Ok(())
    }

    /// Horizontal EPI: the slice L(u, ., x, .) as an N x W image (rows are v).
    pub fn epi_h(&self, u: usize, x: usize) -> Image2d {
        let mut img = Image2d::zeros(self.n, self.w);
        for v in 0..self.n {
            for y in 0..self.w {
                img.set(v, y, self.at(u, v, x, y));
            }
        }
        img
    }

    /// Vertical EPI: the slice L(., v, ., y) as an M x H image (rows are u).
    pub fn epi_v(&self, v: usize, y: usize) -> Image2d {
        let mut img = Image2d::zeros(self.m, self.h);
        for u in 0..self.m {
            for x in 0..self.h {
                img.set(u, x, self.at(u, v, x, y));
            }
        }
        img
    }

    /// Crop the same spatial window out of every view.
    pub fn crop_patch(&self, x0: usize, y0: usize, ph: usize, pw: usize) -> Result<LightField4D> {
        if x0 + ph > self.h || y0 + pw > self.w {
            return Err(Error::shape(format!(
                "crop {}x{} at ({},{}) exceeds {}x{}",
                ph, pw, x0, y0, self.h, self.w
            )));
        }
        let mut out = LightField4D::zeros(self.m, self.n, ph, pw);
        out.range = self.range;
        for u in 0..self.m {
            for v in 0..self.n {
                for x in 0..ph {
                    let src = self.idx(u, v, x0 + x, y0);
                    let dst = out.idx(u, v, x, 0);
                    out.data[dst..dst + pw].copy_from_slice(&self.data[src..src + pw]);
                }
            }
        }
        Ok(out)
    }

    /// Mean over all angular positions, per pixel.
    pub fn angular_average(&self) -> Image2d {
        let mut acc = vec![0f64; self.h * self.w];
        for u in 0..self.m {
            for v in 0..self.n {
                let view = self.view_slice(u, v);
                for (a, &p) in acc.iter_mut().zip(view) {
                    *a += p as f64;
                }
            }
        }
        let k = 1.0 / (self.m * self.n) as f64;
        Image2d {
            h: self.h,
            w: self.w,
            data: acc.into_iter().map(|a| (a * k) as f32).collect(),
        }
    }

    /// Copy into an autodiff tensor shaped (1, M, N, H, W) — a batch of one.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.m, self.n, self.h, self.w], self.data.clone())
    }

    /// Copy a (M, N, H, W) or (1, M, N, H, W) tensor back into a light field.
    pub fn from_tensor(t: &Tensor) -> Result<LightField4D> {
        let sh = t.shape();
        let [m, n, h, w] = match sh.len() {
            4 => [sh[0], sh[1], sh[2], sh[3]],
            5 if sh[0] == 1 => [sh[1], sh[2], sh[3], sh[4]],
            _ => {
                return Err(Error::shape(format!(
                    "expected an (M,N,H,W) tensor, got shape {:?}",
                    sh
                )))
            }
        };
        LightField4D::from_vec(m, n, h, w, ValueRange::Raw, t.to_vec())
    }

    /// Same, with every sample clamped into [0,1] the way 8-bit evaluation
    /// would see it.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<LightField4D> {
        let mut lf = Self::from_tensor(t)?;
        for v in lf.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        lf.range = ValueRange::Unit;
        Ok(lf)
    }

    /// Add i.i.d. Gaussian noise to every sample. `spec.sigma` is a standard
    /// deviation on the 0..255 scale; output is left unclipped.
    pub fn add_noise(&self, spec: &NoiseSpec) -> LightField4D {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f64, spec.sigma / 255.0).expect("sigma must be finite");
        let mut out = self.clone();
        out.range = ValueRange::Raw;
        for v in out.data.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
        out
    }
}

/// Synthetic Gaussian sensor noise: `sigma` on the 0..255 intensity scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Per-measurement aperture transmittance weights a_i(u,v), each in [0,1].
#[derive(Clone, Debug)]
pub struct ApertureCode {
    pub s: usize,
    pub m: usize,
    pub n: usize,
    weights: Vec<f32>,
}

impl ApertureCode {
    pub fn from_vec(s: usize, m: usize, n: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != s * m * n {
            return Err(Error::shape(format!(
                "code weight length {} does not match {}x{}x{}",
                weights.len(),
                s,
                m,
                n
            )));
        }
        Ok(ApertureCode { s, m, n, weights })
    }

    /// Random code, uniform on [0.2, 0.8] so the [0,1] clip starts inactive.
    pub fn random(s: usize, m: usize, n: usize, rng: &mut impl rand::Rng) -> Self {
        let weights = (0..s * m * n).map(|_| rng.random_range(0.2..0.8)).collect();
        ApertureCode { s, m, n, weights }
    }

    #[inline]
    pub fn at(&self, i: usize, u: usize, v: usize) -> f32 {
        self.weights[(i * self.m + u) * self.n + v]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn clip_unit(&mut self) {
        for w in self.weights.iter_mut() {
            *w = w.clamp(0.0, 1.0);
        }
    }

    pub fn validate_unit(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::data("aperture code weight outside [0,1]".to_string()));
        }
        Ok(())
    }
}

/// Stack of S coded 2-D measurements; values are raw (unnormalized) sums.
#[derive(Clone, Debug)]
pub struct CodedMeasurements {
    pub s: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl CodedMeasurements {
    pub fn zeros(s: usize, h: usize, w: usize) -> Self {
        CodedMeasurements { s, h, w, data: vec![0.0; s * h * w] }
    }

    pub fn from_vec(s: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != s * h * w {
            return Err(Error::shape(format!(
                "measurement data length {} does not match {}x{}x{}",
                data.len(),
                s,
                h,
                w
            )));
        }
        Ok(CodedMeasurements { s, h, w, data })
    }

    #[inline]
    pub fn at(&self, i: usize, x: usize, y: usize) -> f32 {
        self.data[(i * self.h + x) * self.w + y]
    }

    pub fn image(&self, i: usize) -> Image2d {
        let start = i * self.h * self.w;
        Image2d {
            h: self.h,
            w: self.w,
            data: self.data[start..start + self.h * self.w].to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Coded-aperture image formation: I_i(x,y) = sum_u sum_v a_i(u,v) L(u,v,x,y).
/// Sums run in f64 and are written back as f32.
pub fn project(lf: &LightField4D, code: &ApertureCode) -> Result<CodedMeasurements> {
    if code.m != lf.m || code.n != lf.n {
        return Err(Error::shape(format!(
            "code angular grid {}x{} does not match light field {}x{}",
            code.m, code.n, lf.m, lf.n
        )));
    }
    let hw = lf.h * lf.w;
    let mut out = CodedMeasurements::zeros(code.s, lf.h, lf.w);
    for i in 0..code.s {
        let mut acc = vec![0f64; hw];
        for u in 0..lf.m {
            for v in 0..lf.n {
                let a = code.at(i, u, v) as f64;
                let view = lf.view_slice(u, v);
                for (sum, &p) in acc.iter_mut().zip(view) {
                    *sum += a * p as f64;
                }
            }
        }
        let dst = &mut out.data[i * hw..(i + 1) * hw];
        for (d, sum) in dst.iter_mut().zip(acc) {
            *d = sum as f32;
        }
    }
    Ok(out)
}
