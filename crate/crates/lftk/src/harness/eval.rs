//! Checkpoint-driven evaluation: load a model in whichever form the file
//! stores it, run it over a scene list, and measure against the ground truth.
//!
//! Full (unpruned) checkpoints are evaluated with hard gates — the same 0.5
//! decisions architecture derivation commits to — so a full checkpoint and
//! the pruned one derived from it report identical numbers.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{MetricsReport, SceneMetrics};
use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{no_grad, Tensor};
use crate::crnet::{self, CrNet, PrunedCrNet};
use crate::dnnet::{self, CaLayout, DnNet, PrunedDnNet};
use crate::lf::metrics::{psnr, psnr_per_view, ssim};
use crate::lf::{ApertureCode, LightField4D, NoiseSpec};
use crate::pfe::arch::summarize;
use crate::pfe::gates::GateCtx;
use crate::{Error, Result};

pub enum CrModel {
    Full(CrNet),
    Pruned(PrunedCrNet),
}

impl CrModel {
    /// (M, N, S)
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            CrModel::Full(net) => (net.m, net.n, net.s),
            CrModel::Pruned(net) => (net.m, net.n, net.s),
        }
    }

    /// Swap in a different aperture code (same S, M, N).
    pub fn set_code(&self, code: &ApertureCode) -> Result<()> {
        let (m, n, s) = self.dims();
        if (code.s, code.m, code.n) != (s, m, n) {
            return Err(Error::shape(format!(
                "code is {}x{}x{} but the model was trained for {}x{}x{}",
                code.s, code.m, code.n, s, m, n
            )));
        }
        match self {
            CrModel::Full(net) => net.set_code(code),
            CrModel::Pruned(net) => net.set_code(code),
        }
        Ok(())
    }

    pub fn aperture_code(&self) -> ApertureCode {
        let (m, n, s) = self.dims();
        let vals = match self {
            CrModel::Full(net) => net.code.to_vec(),
            CrModel::Pruned(net) => net.code.to_vec(),
        };
        ApertureCode::from_vec(s, m, n, vals).expect("stored code always matches its dims")
    }

    pub fn simulate(&self, lf: &Tensor) -> Tensor {
        match self {
            CrModel::Full(net) => net.simulate_cms(lf),
            CrModel::Pruned(net) => net.simulate_cms(lf),
        }
    }

    pub fn reconstruct_stages(&self, cms: &Tensor) -> Vec<Tensor> {
        let _guard = no_grad();
        match self {
            CrModel::Full(net) => net.reconstruct_stages(cms, &mut GateCtx::Hard),
            CrModel::Pruned(net) => net.reconstruct_stages(cms),
        }
    }

    pub fn live_param_count(&self) -> usize {
        match self {
            CrModel::Full(net) => PrunedCrNet::from_net(net, &net.masks()).param_count(),
            CrModel::Pruned(net) => net.param_count(),
        }
    }
}

pub enum DnModel {
    Full(DnNet),
    Pruned(PrunedDnNet),
}

impl DnModel {
    /// (M, N)
    pub fn dims(&self) -> (usize, usize) {
        match self {
            DnModel::Full(net) => (net.m, net.n),
            DnModel::Pruned(net) => (net.m, net.n),
        }
    }

    /// Noise level the model was trained for (0..255 scale).
    pub fn sigma(&self) -> f32 {
        match self {
            DnModel::Full(net) => net.sigma,
            DnModel::Pruned(net) => net.sigma,
        }
    }

    pub fn denoise_stages(&self, noisy: &Tensor) -> Vec<Tensor> {
        let _guard = no_grad();
        match self {
            DnModel::Full(net) => net.denoise_stages(noisy, &mut GateCtx::Hard),
            DnModel::Pruned(net) => net.denoise_stages(noisy),
        }
    }

    pub fn live_param_count(&self) -> usize {
        match self {
            DnModel::Full(net) => PrunedDnNet::from_net(net, &net.masks()).param_count(),
            DnModel::Pruned(net) => net.param_count(),
        }
    }
}

pub enum Model {
    Cr(CrModel),
    Dn(DnModel),
}

impl Model {
    pub fn live_param_count(&self) -> usize {
        match self {
            Model::Cr(m) => m.live_param_count(),
            Model::Dn(m) => m.live_param_count(),
        }
    }
}

pub fn load_model(ck: &Checkpoint) -> Result<Model> {
    let task = ck.scalar("meta.task")?;
    let pruned = ck.scalar("meta.pruned")? != 0.0;
    if task == crnet::TASK_CR {
        Ok(Model::Cr(if pruned {
            CrModel::Pruned(crnet::pruned_from_checkpoint(ck)?)
        } else {
            CrModel::Full(crnet::from_checkpoint(ck)?)
        }))
    } else if task == dnnet::TASK_DN {
        Ok(Model::Dn(if pruned {
            DnModel::Pruned(dnnet::pruned_from_checkpoint(ck)?)
        } else {
            DnModel::Full(dnnet::from_checkpoint(ck)?)
        }))
    } else {
        Err(Error::format(format!("unknown task code {task} in checkpoint")))
    }
}

fn check_angular(name: &str, lf: &LightField4D, m: usize, n: usize) -> Result<()> {
    if (lf.m, lf.n) != (m, n) {
        return Err(Error::data(format!(
            "scene {name} has {}x{} views but the model expects {m}x{n}",
            lf.m, lf.n
        )));
    }
    Ok(())
}

/// Simulate measurements from each ground-truth scene, reconstruct, and score
/// every stage's estimate.
pub fn eval_cr(model: &CrModel, scenes: &[(String, LightField4D)]) -> Result<MetricsReport> {
    let start = Instant::now();
    let (m, n, _) = model.dims();
    let mut rows = Vec::with_capacity(scenes.len());
    for (name, truth) in scenes {
        check_angular(name, truth, m, n)?;
        let stages = {
            let _guard = no_grad();
            let cms = model.simulate(&truth.to_tensor());
            model.reconstruct_stages(&cms)
        };
        rows.push(score_stages(name, None, &stages, truth)?);
    }
    Ok(MetricsReport::new(rows, start.elapsed().as_secs_f64(), model.live_param_count()))
}

/// Corrupt each scene with Gaussian noise and score the denoised estimates.
/// Per-scene noise seeds come from one stream over `seed`, so a fixed scene
/// order reproduces the exact noisy inputs.
pub fn eval_dn(
    model: &DnModel,
    scenes: &[(String, LightField4D)],
    sigma: f32,
    seed: u64,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let (m, n) = model.dims();
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(scenes.len());
    for (name, truth) in scenes {
        check_angular(name, truth, m, n)?;
        let spec = NoiseSpec { sigma: sigma as f64, seed: seeder.random() };
        let noisy = truth.add_noise(&spec);
        let stages = {
            let _guard = no_grad();
            model.denoise_stages(&noisy.to_tensor())
        };
        rows.push(score_stages(name, Some(sigma), &stages, truth)?);
    }
    Ok(MetricsReport::new(rows, start.elapsed().as_secs_f64(), model.live_param_count()))
}

fn score_stages(
    name: &str,
    sigma: Option<f32>,
    stages: &[Tensor],
    truth: &LightField4D,
) -> Result<SceneMetrics> {
    let mut stage_psnr = Vec::with_capacity(stages.len());
    let mut stage_ssim = Vec::with_capacity(stages.len());
    let mut view_psnr = Vec::new();
    for (t, est) in stages.iter().enumerate() {
        let pred = LightField4D::from_tensor_clamped(est)?;
        stage_psnr.push(psnr(&pred, truth)?);
        stage_ssim.push(ssim(&pred, truth)?);
        if t + 1 == stages.len() {
            view_psnr = psnr_per_view(&pred, truth)?;
        }
    }
    Ok(SceneMetrics {
        scene: name.to_string(),
        sigma,
        psnr: *stage_psnr.last().unwrap(),
        ssim: *stage_ssim.last().unwrap(),
        stage_psnr,
        stage_ssim,
        view_psnr,
    })
}

/// Live weights of the checkpointed model; `template` counts the dense
/// template the search started from instead. Files without model metadata
/// (bare tensor dumps) fall back to the total stored value count.
pub fn param_count_of(ck: &Checkpoint, template: bool) -> Result<usize> {
    if ck.get("meta.task").is_none() {
        if template {
            return Err(Error::config(
                "checkpoint carries no model metadata, so there is no template to count",
            ));
        }
        return Ok(ck.total_values());
    }
    if template {
        return template_count(ck);
    }
    Ok(load_model(ck)?.live_param_count())
}

/// Rebuild an untrained template with the checkpoint's recorded dimensions
/// and count its weights; exact by construction, pruning notwithstanding.
fn template_count(ck: &Checkpoint) -> Result<usize> {
    let task = ck.scalar("meta.task")?;
    let m = ck.scalar_usize("meta.m")?;
    let n = ck.scalar_usize("meta.n")?;
    let stages = ck.scalar_usize("meta.stages")?;
    let units = ck.scalar_usize("meta.units")?;
    let channels = ck.scalar_usize("meta.channels")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if task == crnet::TASK_CR {
        let s = ck.scalar_usize("meta.s")?;
        Ok(CrNet::new(m, n, s, stages, units, channels, &mut rng).param_count())
    } else if task == dnnet::TASK_DN {
        let layout = match ck.scalar("meta.ca_layout")? {
            v if v == 0.0 => CaLayout::PerView,
            v if v == 1.0 => CaLayout::Joint,
            v => return Err(Error::format(format!("unknown channel-attention layout code {v}"))),
        };
        let sigma = ck.scalar("meta.sigma")?;
        Ok(DnNet::new(m, n, stages, units, channels, sigma, layout, &mut rng).param_count())
    } else {
        Err(Error::format(format!("unknown task code {task} in checkpoint")))
    }
}

/// Architecture report for a full checkpoint: per stage, which units survive
/// the 0.5 gate threshold, what each keeps, and the resulting weight counts.
/// Rendered as JSON.
pub fn arch_report(ck: &Checkpoint) -> Result<String> {
    if ck.scalar("meta.pruned")? != 0.0 {
        return Err(Error::config(
            "architecture derivation starts from a full checkpoint; this one is already pruned",
        ));
    }
    let task = ck.scalar("meta.task")?;
    let (name, summaries) = if task == crnet::TASK_CR {
        let net = crnet::from_checkpoint(ck)?;
        let masks = net.masks();
        let s: Vec<_> = net.stages.iter().zip(&masks).map(|(st, mk)| summarize(st, mk)).collect();
        ("cr", s)
    } else if task == dnnet::TASK_DN {
        let net = dnnet::from_checkpoint(ck)?;
        let masks = net.masks();
        let s: Vec<_> = net.stages.iter().zip(&masks).map(|(st, mk)| summarize(st, mk)).collect();
        ("dn", s)
    } else {
        return Err(Error::format(format!("unknown task code {task} in checkpoint")));
    };

    let mut out = String::from("{\n");
    out.push_str(&format!("  \"task\": \"{name}\",\n"));
    out.push_str("  \"stages\": [\n");
    for (t, sm) in summaries.iter().enumerate() {
        out.push_str("    {\n");
        out.push_str(&format!("      \"stage\": {},\n", t + 1));
        out.push_str("      \"units\": [\n");
        for (k, u) in sm.units.iter().enumerate() {
            let inputs: Vec<String> = u
                .inputs
                .iter()
                .map(|&i| if i == 0 { "\"embed\"".to_string() } else { format!("\"unit{i}\"") })
                .collect();
            let patterns: Vec<String> = u.patterns.iter().map(|p| format!("\"{p}\"")).collect();
            out.push_str(&format!(
                "        {{\"unit\": {}, \"live\": {}, \"kept\": {}, \"inputs\": [{}], \"patterns\": [{}]}}{}\n",
                u.index + 1,
                u.live,
                u.needed,
                inputs.join(", "),
                patterns.join(", "),
                if k + 1 < sm.units.len() { "," } else { "" }
            ));
        }
        out.push_str("      ],\n");
        out.push_str(&format!("      \"retained_units\": {},\n", sm.retained_units));
        out.push_str(&format!("      \"template_params\": {},\n", sm.template_params));
        out.push_str(&format!("      \"pruned_params\": {}\n", sm.pruned_params));
        out.push_str(&format!("    }}{}\n", if t + 1 < summaries.len() { "," } else { "" }));
    }
    out.push_str("  ],\n");
    let template: usize = summaries.iter().map(|s| s.template_params).sum();
    let pruned: usize = summaries.iter().map(|s| s.pruned_params).sum();
    out.push_str(&format!("  \"template_params\": {template},\n"));
    out.push_str(&format!("  \"pruned_params\": {pruned}\n"));
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfe::gates::GateBank;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_scene(m: usize, n: usize, h: usize, w: usize, seed: u64) -> LightField4D {
        let mut r = rng(seed);
        let data = (0..m * n * h * w).map(|_| r.random_range(0.0..1.0)).collect();
        LightField4D::from_vec(m, n, h, w, crate::lf::ValueRange::Unit, data).unwrap()
    }

    fn gated_cr_net() -> CrNet {
        let mut r = rng(200);
        let mut net = CrNet::new(2, 2, 2, 2, 3, 4, &mut r);
        let probs_u = vec![vec![0.9], vec![0.2, 0.7], vec![0.6, 0.4, 0.8]];
        let probs_v = vec![
            vec![0.9, 0.1, 0.8, 0.7],
            vec![0.2, 0.9, 0.1, 0.6],
            vec![0.8, 0.3, 0.9, 0.2],
        ];
        for st in &mut net.stages {
            st.gates = GateBank::from_probs(probs_u.clone(), probs_v.clone());
        }
        net
    }

    #[test]
    fn full_and_derived_pruned_checkpoints_report_identical_csvs() {
        let net = gated_cr_net();
        let full_ck = crnet::to_checkpoint(&net);
        let pruned_ck = crnet::to_pruned_checkpoint(&net, &net.masks());
        let scenes = vec![
            ("a".to_string(), random_scene(2, 2, 12, 12, 1)),
            ("b".to_string(), random_scene(2, 2, 12, 12, 2)),
        ];
        let full = match load_model(&full_ck).unwrap() {
            Model::Cr(m) => m,
            _ => panic!("expected a reconstruction model"),
        };
        let pruned = match load_model(&pruned_ck).unwrap() {
            Model::Cr(m) => m,
            _ => panic!("expected a reconstruction model"),
        };
        let ra = eval_cr(&full, &scenes).unwrap();
        let rb = eval_cr(&pruned, &scenes).unwrap();
        assert_eq!(ra.cr_csv(), rb.cr_csv());
        assert_eq!(ra.param_count, rb.param_count);
        assert_eq!(ra.rows.len(), 2);
        assert_eq!(ra.rows[0].stage_psnr.len(), 2, "one row per stage");
    }

    #[test]
    fn denoising_eval_is_seed_deterministic() {
        let mut r = rng(201);
        let net = DnNet::new(2, 2, 1, 1, 4, 20.0, CaLayout::PerView, &mut r);
        let model = DnModel::Full(net);
        let scenes = vec![("s".to_string(), random_scene(2, 2, 12, 12, 3))];
        let a = eval_dn(&model, &scenes, 20.0, 7).unwrap();
        let b = eval_dn(&model, &scenes, 20.0, 7).unwrap();
        let c = eval_dn(&model, &scenes, 20.0, 8).unwrap();
        assert_eq!(a.dn_csv(2, 2), b.dn_csv(2, 2));
        assert_ne!(a.rows[0].psnr, c.rows[0].psnr, "different seed, different noise");
        assert_eq!(a.rows[0].view_psnr.len(), 4);
        assert_eq!(a.rows[0].sigma, Some(20.0));
    }

    #[test]
    fn bare_tensor_dumps_count_their_stored_values() {
        let mut ck = Checkpoint::new();
        ck.push("weights", &[3, 3, 1, 32], vec![0.5; 288]);
        assert_eq!(param_count_of(&ck, false).unwrap(), 288);
        assert!(matches!(param_count_of(&ck, true), Err(Error::Config(_))));
    }

    #[test]
    fn template_count_matches_a_freshly_built_net() {
        let net = gated_cr_net();
        let ck = crnet::to_checkpoint(&net);
        assert_eq!(param_count_of(&ck, true).unwrap(), net.param_count());
        // the pruned file must agree: same template dims in its meta block
        let pruned_ck = crnet::to_pruned_checkpoint(&net, &net.masks());
        assert_eq!(param_count_of(&pruned_ck, true).unwrap(), net.param_count());
        assert!(param_count_of(&pruned_ck, false).unwrap() <= net.param_count());
    }

    #[test]
    fn arch_report_names_units_and_balances_braces() {
        let net = gated_cr_net();
        let ck = crnet::to_checkpoint(&net);
        let report = arch_report(&ck).unwrap();
        assert!(report.contains("\"task\": \"cr\""));
        assert!(report.contains("\"stage\": 2"));
        assert!(report.contains("\"unit\": 1"));
        assert!(report.contains("\"embed\""));
        let opens = report.matches('{').count();
        let closes = report.matches('}').count();
        assert_eq!(opens, closes);
        let pruned_ck = crnet::to_pruned_checkpoint(&net, &net.masks());
        assert!(matches!(arch_report(&pruned_ck), Err(Error::Config(_))));
    }
}
