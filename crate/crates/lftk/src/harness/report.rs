//! Evaluation reports and the CSV emitters. Floats are written with Rust's
//! shortest round-trip formatting, so equal values always produce equal text
//! and CSV comparisons double as bit-exactness checks.

use crate::crnet::train::StepRow;

pub fn loss_csv(rows: &[StepRow]) -> String {
    let mut s = String::from("step,phase,lr,tau,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.phase.name(), r.lr, r.tau, r.loss));
    }
    s
}

/// Everything measured for one evaluated scene. Reconstruction rows fill
/// the per-stage vectors; denoising rows fill sigma and the per-view PSNRs.
#[derive(Clone, Debug)]
pub struct SceneMetrics {
    pub scene: String,
    pub sigma: Option<f32>,
    /// Final-output quality (the last stage).
    pub psnr: f64,
    pub ssim: f64,
    pub stage_psnr: Vec<f64>,
    pub stage_ssim: Vec<f64>,
    pub view_psnr: Vec<f64>,
}

pub struct MetricsReport {
    pub rows: Vec<SceneMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub wall_seconds: f64,
    /// Live parameters of the evaluated model (post-droppath when gates or
    /// masks are in play).
    pub param_count: usize,
}

impl MetricsReport {
    pub fn new(rows: Vec<SceneMetrics>, wall_seconds: f64, param_count: usize) -> MetricsReport {
        let k = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / k;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / k;
        MetricsReport { rows, mean_psnr, mean_ssim, wall_seconds, param_count }
    }

    /// Reconstruction CSV: one row per scene per stage.
    pub fn cr_csv(&self) -> String {
        let mut s = String::from("scene,psnr,ssim,stage\n");
        for r in &self.rows {
            for (t, (p, q)) in r.stage_psnr.iter().zip(&r.stage_ssim).enumerate() {
                s.push_str(&format!("{},{},{},{}\n", r.scene, p, q, t + 1));
            }
        }
        s
    }

    /// Denoising CSV: one row per scene with per-view PSNR columns laid out
    /// in (u, v) row-major order.
    pub fn dn_csv(&self, m: usize, n: usize) -> String {
        let mut s = String::from("scene,sigma,psnr,ssim");
        for u in 0..m {
            for v in 0..n {
                s.push_str(&format!(",view_{u}_{v}"));
            }
        }
        s.push('\n');
        for r in &self.rows {
            let sigma = r.sigma.unwrap_or(0.0);
            s.push_str(&format!("{},{},{},{}", r.scene, sigma, r.psnr, r.ssim));
            for p in &r.view_psnr {
                s.push_str(&format!(",{p}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "scenes={} mean_psnr={:.3} mean_ssim={:.4} live_params={} wall={:.1}s",
            self.rows.len(),
            self.mean_psnr,
            self.mean_ssim,
            self.param_count,
            self.wall_seconds
        )
    }
}
