//! Procedural toy scenes: layered smooth textures shifted per view by integer
//! disparities, with nearest-layer occlusion. Deterministic from a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LightField4D, ValueRange};

#[derive(Clone, Copy, Debug)]
pub struct SynthParams {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// Largest per-view-step shift, in pixels.
    pub max_disparity: u32,
    /// Total layer count including the full-coverage background.
    pub layers: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { m: 3, n: 3, h: 64, w: 64, max_disparity: 2, layers: 3 }
    }
}

/// What a generated scene is made of; recorded in dataset manifests.
#[derive(Clone, Debug)]
pub struct SceneDesc {
    /// Per-layer disparity, background first.
    pub disparities: Vec<i32>,
}

impl SceneDesc {
    pub fn max_disparity(&self) -> i32 {
        self.disparities.iter().copied().max().unwrap_or(0)
    }
}

/// Random low-frequency field on [0,1]: a coarse uniform grid, bilinearly
/// upsampled with `cell`-pixel spacing.
fn smooth_field(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0f32; h * w];
    for x in 0..h {
        let gx = x as f64 / cell as f64;
        let ix = gx.floor() as usize;
        let fx = gx - ix as f64;
        for y in 0..w {
            let gy = y as f64 / cell as f64;
            let iy = gy.floor() as usize;
            let fy = gy - iy as f64;
            let g00 = grid[ix * gw + iy];
            let g01 = grid[ix * gw + iy + 1];
            let g10 = grid[(ix + 1) * gw + iy];
            let g11 = grid[(ix + 1) * gw + iy + 1];
            let v = (1.0 - fx) * ((1.0 - fy) * g00 + fy * g01)
                + fx * ((1.0 - fy) * g10 + fy * g11);
            out[x * w + y] = v as f32;
        }
    }
    out
}

/// Generate one toy light field. All views sample shared textured layers;
/// layer k is shifted by d_k * (u - m/2, v - n/2) pixels in view (u,v), and
/// closer (larger-disparity) layers occlude farther ones.
pub fn gen_synthetic(p: &SynthParams, seed: u64) -> (LightField4D, SceneDesc) {
    assert!(p.m > 0 && p.n > 0 && p.h > 0 && p.w > 0 && p.layers > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_d = p.max_disparity as i32;
    let pad_x = (max_d as usize) * (p.m / 2);
    let pad_y = (max_d as usize) * (p.n / 2);
    let ch = p.h + 2 * pad_x;
    let cw = p.w + 2 * pad_y;

    // Background first, then foreground layers at growing disparity so that
    // composition order equals depth order.
    let mut disparities = Vec::with_capacity(p.layers);
    if p.layers == 1 {
        disparities.push(max_d);
    } else {
        disparities.push(rng.random_range(0..=max_d.min(1)));
        for k in 1..p.layers {
            let d = (k as f64 * max_d as f64 / (p.layers - 1) as f64).round() as i32;
            disparities.push(d);
        }
    }

    struct Layer {
        texture: Vec<f32>,
        mask: Option<Vec<bool>>,
        d: i32,
    }
    let mut layers = Vec::with_capacity(p.layers);
    for (k, &d) in disparities.iter().enumerate() {
        let texture = smooth_field(ch, cw, 4, &mut rng);
        let mask = if k == 0 {
            None
        } else {
            let field = smooth_field(ch, cw, 8, &mut rng);
            Some(field.iter().map(|&v| v > 0.55).collect())
        };
        layers.push(Layer { texture, mask, d });
    }

    let mut lf = LightField4D::zeros(p.m, p.n, p.h, p.w);
    for u in 0..p.m {
        let off_u = u as i32 - (p.m / 2) as i32;
        for v in 0..p.n {
            let off_v = v as i32 - (p.n / 2) as i32;
            for x in 0..p.h {
                for y in 0..p.w {
                    let mut val = 0f32;
                    for layer in &layers {
                        let sx = (x + pad_x) as i32 + layer.d * off_u;
                        let sy = (y + pad_y) as i32 + layer.d * off_v;
                        let idx = sx as usize * cw + sy as usize;
                        match &layer.mask {
                            None => val = layer.texture[idx],
                            Some(mask) => {
                                if mask[idx] {
                                    val = layer.texture[idx];
                                }
                            }
                        }
                    }
                    lf.set(u, v, x, y, val);
                }
            }
        }
    }
    lf.range = ValueRange::Unit;
    (lf, SceneDesc { disparities })
}
