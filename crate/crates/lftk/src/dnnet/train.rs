//! Two-phase denoiser trainer. Same protocol as the reconstruction trainer
//! (template pre-training, then gated search under the annealed temperature,
//! one learning-rate cycle across both), but every batch pairs a clean crop
//! with a freshly drawn noisy copy — the model never sees the same noise
//! twice. The loss is the L1 distance between the final stage's output and
//! the clean patch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::optim::{Adam, OneCycle};
use crate::autodiff::Tensor;
use crate::crnet::train::{Phase, StepRow};
use crate::lf::LightField4D;
use crate::pfe::gates::{temperature_between, GateCtx};
use crate::{Error, Result};

use super::{CaLayout, DnNet};

#[derive(Clone, Debug)]
pub struct DnTrainConfig {
    /// Gaussian noise level on the 0..255 scale the model trains against.
    pub sigma: f32,
    pub stages: usize,
    pub units: usize,
    pub channels: usize,
    pub ca_layout: CaLayout,
    /// Spatial side length of training crops.
    pub patch: usize,
    pub batch: usize,
    /// Template epochs (gates forced open).
    pub pre_epochs: usize,
    /// Gated search epochs.
    pub epochs: usize,
    pub max_lr: f64,
    /// Gumbel temperature at the start of the search anneal and its floor.
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
}

impl Default for DnTrainConfig {
    fn default() -> Self {
        DnTrainConfig {
            sigma: 20.0,
            stages: 2,
            units: 4,
            channels: 16,
            ca_layout: CaLayout::PerView,
            patch: 12,
            batch: 5,
            pre_epochs: 100,
            epochs: 100,
            max_lr: 1e-3,
            tau_start: 1.0,
            tau_end: 0.05,
            seed: 0,
        }
    }
}

pub struct TrainedDn {
    pub net: DnNet,
    pub rows: Vec<StepRow>,
}

fn check_scenes(scenes: &[LightField4D], patch: usize) -> Result<(usize, usize)> {
    let first = scenes.first().ok_or_else(|| Error::data("no training scenes"))?;
    for (i, sc) in scenes.iter().enumerate() {
        if (sc.m, sc.n, sc.h, sc.w) != (first.m, first.n, first.h, first.w) {
            return Err(Error::data(format!(
                "scene {i} is {}x{}x{}x{} but scene 0 is {}x{}x{}x{}",
                sc.m, sc.n, sc.h, sc.w, first.m, first.n, first.h, first.w
            )));
        }
    }
    if patch == 0 || patch > first.h || patch > first.w {
        return Err(Error::config(format!(
            "patch size {} does not fit {}x{} views",
            patch, first.h, first.w
        )));
    }
    Ok((first.m, first.n))
}

/// Crop one random patch per scene in `chunk`, then lay down a clean batch
/// and a noisy twin with fresh Gaussian noise on the 0..255 scale.
fn sample_noisy_batch(
    scenes: &[LightField4D],
    chunk: &[usize],
    patch: usize,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let (m, n) = (scenes[chunk[0]].m, scenes[chunk[0]].n);
    let mut clean = Vec::with_capacity(chunk.len() * m * n * patch * patch);
    for &si in chunk {
        let sc = &scenes[si];
        let x0 = rng.random_range(0..=sc.h - patch);
        let y0 = rng.random_range(0..=sc.w - patch);
        let p = sc.crop_patch(x0, y0, patch, patch).expect("offsets stay in range");
        clean.extend_from_slice(p.as_slice());
    }
    let noisy: Vec<f32> =
        clean.iter().map(|&v| (v as f64 + noise.sample(rng)) as f32).collect();
    let shape = [chunk.len(), m, n, patch, patch];
    (Tensor::from_vec(&shape, clean), Tensor::from_vec(&shape, noisy))
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &DnNet,
    scenes: &[LightField4D],
    opt: &mut Adam,
    sched: &OneCycle,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    patch: usize,
    batch: usize,
    tau_sched: (f64, f64),
    phase: Phase,
    epochs: usize,
    step: &mut usize,
    rows: &mut Vec<StepRow>,
    on_step: &mut dyn FnMut(&StepRow),
) -> Result<()> {
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(rng);
        let tau = match phase {
            Phase::Search => {
                temperature_between(tau_sched.0, tau_sched.1, epoch as f64 / epochs as f64)
            }
            _ => 0.0,
        };
        for chunk in order.chunks(batch) {
            let (clean, noisy) = sample_noisy_batch(scenes, chunk, patch, noise, rng);
            let loss = {
                let mut ctx = match phase {
                    Phase::Pre => GateCtx::Template,
                    Phase::Search => GateCtx::Sampled { tau, rng: &mut *rng },
                    Phase::Finetune => GateCtx::Hard,
                };
                net.denoise(&noisy, &mut ctx).l1_loss(&clean)
            };
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::numeric(format!(
                    "loss became non-finite at step {} ({} phase)",
                    *step,
                    phase.name()
                )));
            }
            loss.backward();
            let lr = sched.lr_at(*step);
            opt.step(lr);
            net.clip_gates();
            let row = StepRow { step: *step, phase, lr, tau, loss: lv };
            on_step(&row);
            rows.push(row);
            *step += 1;
        }
    }
    Ok(())
}

pub fn train(
    scenes: &[LightField4D],
    cfg: &DnTrainConfig,
    on_step: &mut dyn FnMut(&StepRow),
) -> Result<TrainedDn> {
    if cfg.stages == 0 || cfg.units == 0 || cfg.channels == 0 || cfg.batch == 0 {
        return Err(Error::config("network and batch dimensions must all be at least 1"));
    }
    if cfg.pre_epochs + cfg.epochs == 0 {
        return Err(Error::config("nothing to do: zero epochs in both phases"));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(Error::config(format!("noise level {} must be non-negative", cfg.sigma)));
    }
    if !(cfg.tau_start >= cfg.tau_end && cfg.tau_end > 0.0) {
        return Err(Error::config(format!(
            "temperature schedule {} -> {} must descend and stay positive",
            cfg.tau_start, cfg.tau_end
        )));
    }
    let (m, n) = check_scenes(scenes, cfg.patch)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = DnNet::new(
        m,
        n,
        cfg.stages,
        cfg.units,
        cfg.channels,
        cfg.sigma,
        cfg.ca_layout,
        &mut rng,
    );
    let noise = Normal::new(0.0f64, cfg.sigma as f64 / 255.0).expect("sigma is finite");

    let mut params = net.conv_params();
    params.extend(net.gate_params());
    let mut opt = Adam::new(params);

    let steps_per_epoch = scenes.len().div_ceil(cfg.batch);
    let total = (cfg.pre_epochs + cfg.epochs) * steps_per_epoch;
    let sched = OneCycle::new(cfg.max_lr, total);

    let mut rows = Vec::with_capacity(total);
    let mut step = 0usize;
    let tau_sched = (cfg.tau_start, cfg.tau_end);
    run_phase(
        &net, scenes, &mut opt, &sched, &mut rng, &noise, cfg.patch, cfg.batch, tau_sched,
        Phase::Pre, cfg.pre_epochs, &mut step, &mut rows, on_step,
    )?;
    run_phase(
        &net, scenes, &mut opt, &sched, &mut rng, &noise, cfg.patch, cfg.batch, tau_sched,
        Phase::Search, cfg.epochs, &mut step, &mut rows, on_step,
    )?;
    Ok(TrainedDn { net, rows })
}

/// Extra hard-gate epochs over the conv weights, used before pruning. The
/// hard-masked template computes exactly what the pruned network will.
#[allow(clippy::too_many_arguments)]
pub fn finetune_hard(
    net: &DnNet,
    scenes: &[LightField4D],
    epochs: usize,
    max_lr: f64,
    patch: usize,
    batch: usize,
    seed: u64,
    on_step: &mut dyn FnMut(&StepRow),
) -> Result<Vec<StepRow>> {
    check_scenes(scenes, patch)?;
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(net.conv_params());
    let noise = Normal::new(0.0f64, net.sigma as f64 / 255.0).expect("sigma is finite");
    let steps_per_epoch = scenes.len().div_ceil(batch);
    let sched = OneCycle::new(max_lr, epochs * steps_per_epoch);
    let mut rows = Vec::new();
    let mut step = 0usize;
    // hard gates never sample, so the temperature endpoints are inert here
    run_phase(
        net, scenes, &mut opt, &sched, &mut rng, &noise, patch, batch, (1.0, 0.05),
        Phase::Finetune, epochs, &mut step, &mut rows, on_step,
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::metrics::psnr;
    use crate::lf::synth::{gen_synthetic, SynthParams};
    use crate::lf::NoiseSpec;

    fn toy_scenes(count: usize, h: usize, w: usize, base_seed: u64) -> Vec<LightField4D> {
        let p = SynthParams { m: 3, n: 3, h, w, max_disparity: 1, layers: 2 };
        (0..count).map(|i| gen_synthetic(&p, base_seed + i as u64).0).collect()
    }

    fn quiet() -> impl FnMut(&StepRow) {
        |_: &StepRow| {}
    }

    fn expect_err(r: Result<TrainedDn>) -> Error {
        match r {
            Ok(_) => panic!("expected the trainer to fail"),
            Err(e) => e,
        }
    }

    #[test]
    fn rejects_bad_datasets_and_configs() {
        let cfg = DnTrainConfig { patch: 8, ..DnTrainConfig::default() };
        let err = expect_err(train(&[], &cfg, &mut quiet()));
        assert!(matches!(err, Error::Data(_)), "{err}");

        let mut scenes = toy_scenes(2, 16, 16, 5);
        scenes.push(LightField4D::zeros(3, 3, 12, 16));
        let err = expect_err(train(&scenes, &cfg, &mut quiet()));
        assert!(matches!(err, Error::Data(_)), "{err}");

        let scenes = toy_scenes(1, 16, 16, 5);
        let cfg = DnTrainConfig { patch: 20, ..DnTrainConfig::default() };
        let err = expect_err(train(&scenes, &cfg, &mut quiet()));
        assert!(matches!(err, Error::Config(_)), "{err}");

        let cfg = DnTrainConfig { patch: 8, channels: 0, ..DnTrainConfig::default() };
        let err = expect_err(train(&scenes, &cfg, &mut quiet()));
        assert!(matches!(err, Error::Config(_)), "{err}");

        let cfg = DnTrainConfig { patch: 8, sigma: f32::NAN, ..DnTrainConfig::default() };
        let err = expect_err(train(&scenes, &cfg, &mut quiet()));
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn template_training_beats_the_noisy_input() {
        let scenes = toy_scenes(3, 16, 16, 20);
        let cfg = DnTrainConfig {
            sigma: 20.0,
            stages: 1,
            units: 1,
            channels: 6,
            patch: 12,
            batch: 3,
            pre_epochs: 600,
            epochs: 0,
            max_lr: 5e-3,
            seed: 7,
            ..DnTrainConfig::default()
        };
        let trained = train(&scenes, &cfg, &mut quiet()).unwrap();
        assert_eq!(trained.rows.len(), 600);
        let early: f64 = trained.rows[..25].iter().map(|r| r.loss).sum::<f64>() / 25.0;
        let late: f64 = trained.rows[575..].iter().map(|r| r.loss).sum::<f64>() / 25.0;
        assert!(late < early, "loss should fall: {early:.4} -> {late:.4}");

        let mut noisy_sum = 0.0;
        let mut denoised_sum = 0.0;
        for (i, sc) in scenes.iter().enumerate() {
            let noisy = sc.add_noise(&NoiseSpec { sigma: 20.0, seed: 700 + i as u64 });
            let guard = crate::autodiff::no_grad();
            let out = trained.net.denoise(&noisy.to_tensor(), &mut GateCtx::Template);
            drop(guard);
            let r = LightField4D::from_tensor_clamped(&out).unwrap();
            let noisy_clamped = LightField4D::from_tensor_clamped(&noisy.to_tensor()).unwrap();
            noisy_sum += psnr(&noisy_clamped, sc).unwrap();
            denoised_sum += psnr(&r, sc).unwrap();
        }
        let gain = (denoised_sum - noisy_sum) / scenes.len() as f64;
        assert!(gain > 2.0, "denoiser should beat the identity, got {gain:.2} dB");
    }

    #[test]
    fn search_phase_moves_gates_and_keeps_them_in_range() {
        let scenes = toy_scenes(2, 12, 12, 40);
        let cfg = DnTrainConfig {
            stages: 1,
            units: 2,
            channels: 4,
            patch: 8,
            batch: 2,
            pre_epochs: 0,
            epochs: 25,
            seed: 4,
            ..DnTrainConfig::default()
        };
        let trained = train(&scenes, &cfg, &mut quiet()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let reference =
            DnNet::new(3, 3, 1, 2, 4, cfg.sigma, cfg.ca_layout, &mut rng);
        let mut moved = false;
        for (a, b) in trained.net.stages.iter().zip(&reference.stages) {
            for j in 0..a.unit_count() {
                moved |= a.gates.u_probs(j) != b.gates.u_probs(j);
                moved |= a.gates.v_probs(j) != b.gates.v_probs(j);
            }
        }
        assert!(moved, "gated training must move some probability");
        for st in &trained.net.stages {
            for j in 0..st.unit_count() {
                for p in st.gates.u_probs(j).iter().chain(st.gates.v_probs(j).iter()) {
                    assert!((0.0..=1.0).contains(p), "clipped probability {p}");
                }
            }
        }
    }

    #[test]
    fn non_finite_scene_data_aborts_with_a_numeric_error() {
        let mut scenes = toy_scenes(1, 12, 12, 60);
        scenes[0].as_mut_slice()[10] = f32::NAN;
        let cfg = DnTrainConfig {
            stages: 1,
            units: 1,
            channels: 4,
            patch: 12,
            batch: 1,
            pre_epochs: 1,
            epochs: 0,
            ..DnTrainConfig::default()
        };
        let err = expect_err(train(&scenes, &cfg, &mut quiet()));
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn identical_seeds_reproduce_the_run_bit_for_bit() {
        let scenes = toy_scenes(2, 12, 12, 70);
        let cfg = DnTrainConfig {
            stages: 2,
            units: 2,
            channels: 4,
            patch: 8,
            batch: 2,
            pre_epochs: 3,
            epochs: 3,
            seed: 11,
            ..DnTrainConfig::default()
        };
        let a = train(&scenes, &cfg, &mut quiet()).unwrap();
        let b = train(&scenes, &cfg, &mut quiet()).unwrap();
        let la: Vec<f64> = a.rows.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.rows.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(
            a.net.suppressor.fuse.weight.to_vec(),
            b.net.suppressor.fuse.weight.to_vec()
        );
        assert_eq!(
            a.net.stages[0].embed.weight.to_vec(),
            b.net.stages[0].embed.weight.to_vec()
        );
    }

    #[test]
    fn finetune_runs_with_hard_gates_and_logs_its_phase() {
        let scenes = toy_scenes(2, 12, 12, 80);
        let cfg = DnTrainConfig {
            stages: 1,
            units: 2,
            channels: 4,
            patch: 8,
            batch: 2,
            pre_epochs: 2,
            epochs: 2,
            seed: 6,
            ..DnTrainConfig::default()
        };
        let trained = train(&scenes, &cfg, &mut quiet()).unwrap();
        let rows =
            finetune_hard(&trained.net, &scenes, 2, 1e-4, 8, 2, 9, &mut quiet()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.phase == Phase::Finetune));
    }
}
