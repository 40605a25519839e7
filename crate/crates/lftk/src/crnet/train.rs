//! Two-phase trainer: template pre-training with every gate forced open,
//! then gated architecture search with the annealed temperature. One learning
//! rate cycle spans both phases; the loss is the L1 distance between the
//! final stage's estimate and the ground-truth patch. The aperture code and
//! the gate probabilities are clipped back into [0,1] after every step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::optim::{Adam, OneCycle};
use crate::autodiff::Tensor;
use crate::lf::{ApertureCode, LightField4D};
use crate::pfe::gates::{temperature_between, GateCtx};
use crate::{Error, Result};

use super::CrNet;

#[derive(Clone, Debug)]
pub struct CrTrainConfig {
    pub s: usize,
    pub stages: usize,
    pub units: usize,
    pub channels: usize,
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
    pub normalize_cms: bool,
    /// Freeze the aperture code to a known mask set instead of learning it.
    pub fixed_code: Option<ApertureCode>,
}

impl Default for CrTrainConfig {
    fn default() -> Self {
        CrTrainConfig {
            s: 2,
            stages: 2,
            units: 4,
            channels: 16,
            patch: 12,
            batch: 5,
            pre_epochs: 100,
            epochs: 100,
            max_lr: 1e-3,
            tau_start: 1.0,
            tau_end: 0.05,
            seed: 0,
            normalize_cms: false,
            fixed_code: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Template training, all gates open.
    Pre,
    /// Gated architecture search under the temperature schedule.
    Search,
    /// Optional post-derivation pass with hard gates.
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Search => "search",
            Phase::Finetune => "finetune",
        }
    }
}

/// One optimizer step as logged to the loss CSV. `tau` is 0 outside the
/// search phase (no sampling happens there).
#[derive(Clone, Debug)]
pub struct StepRow {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
}

pub struct TrainedCr {
    pub net: CrNet,
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

/// Crop one random patch per scene in `chunk` and stack them into a
/// (B, M, N, patch, patch) batch.
fn sample_batch(
    scenes: &[LightField4D],
    chunk: &[usize],
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (m, n) = (scenes[chunk[0]].m, scenes[chunk[0]].n);
    let mut data = Vec::with_capacity(chunk.len() * m * n * patch * patch);
    for &si in chunk {
        let sc = &scenes[si];
        let x0 = rng.random_range(0..=sc.h - patch);
        let y0 = rng.random_range(0..=sc.w - patch);
        let p = sc.crop_patch(x0, y0, patch, patch).expect("offsets stay in range");
        data.extend_from_slice(p.as_slice());
    }
    Tensor::from_vec(&[chunk.len(), m, n, patch, patch], data)
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &CrNet,
    scenes: &[LightField4D],
    opt: &mut Adam,
    sched: &OneCycle,
    rng: &mut ChaCha8Rng,
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
            let x = sample_batch(scenes, chunk, patch, rng);
            let loss = {
                let mut ctx = match phase {
                    Phase::Pre => GateCtx::Template,
                    Phase::Search => GateCtx::Sampled { tau, rng: &mut *rng },
                    Phase::Finetune => GateCtx::Hard,
                };
                let (_, l) = net.forward(&x, &mut ctx);
                l.l1_loss(&x)
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
            net.clip_code();
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
    cfg: &CrTrainConfig,
    on_step: &mut dyn FnMut(&StepRow),
) -> Result<TrainedCr> {
    if cfg.s == 0 || cfg.stages == 0 || cfg.units == 0 || cfg.channels == 0 || cfg.batch == 0 {
        return Err(Error::config("network and batch dimensions must all be at least 1"));
    }
    if cfg.pre_epochs + cfg.epochs == 0 {
        return Err(Error::config("nothing to do: zero epochs in both phases"));
    }
    if !(cfg.tau_start >= cfg.tau_end && cfg.tau_end > 0.0) {
        return Err(Error::config(format!(
            "temperature schedule {} -> {} must descend and stay positive",
            cfg.tau_start, cfg.tau_end
        )));
    }
    let (m, n) = check_scenes(scenes, cfg.patch)?;
    if let Some(code) = &cfg.fixed_code {
        if (code.s, code.m, code.n) != (cfg.s, m, n) {
            return Err(Error::config(format!(
                "fixed code is {}x{}x{} but the run needs {}x{}x{}",
                code.s, code.m, code.n, cfg.s, m, n
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = CrNet::new(m, n, cfg.s, cfg.stages, cfg.units, cfg.channels, &mut rng);
    net.normalize_cms = cfg.normalize_cms;
    if let Some(code) = &cfg.fixed_code {
        // an untracked tensor never receives gradients
        net.code = Tensor::from_vec(&[cfg.s, m * n, 1, 1], code.as_slice().to_vec());
    }

    let mut params: Vec<Tensor> = if cfg.fixed_code.is_some() {
        net.stages.iter().flat_map(|s| s.conv_params()).collect()
    } else {
        net.params()
    };
    params.extend(net.gate_params());
    let mut opt = Adam::new(params);

    let steps_per_epoch = scenes.len().div_ceil(cfg.batch);
    let total = (cfg.pre_epochs + cfg.epochs) * steps_per_epoch;
    let sched = OneCycle::new(cfg.max_lr, total);

    let mut rows = Vec::with_capacity(total);
    let mut step = 0usize;
    let tau_sched = (cfg.tau_start, cfg.tau_end);
    run_phase(
        &net, scenes, &mut opt, &sched, &mut rng, cfg.patch, cfg.batch, tau_sched,
        Phase::Pre, cfg.pre_epochs, &mut step, &mut rows, on_step,
    )?;
    run_phase(
        &net, scenes, &mut opt, &sched, &mut rng, cfg.patch, cfg.batch, tau_sched,
        Phase::Search, cfg.epochs, &mut step, &mut rows, on_step,
    )?;
    Ok(TrainedCr { net, rows })
}

/// Extra hard-gate epochs over conv weights and code, used before pruning.
/// The hard-masked template computes exactly what the pruned network will.
pub fn finetune_hard(
    net: &CrNet,
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
    let mut opt = Adam::new(net.params());
    let steps_per_epoch = scenes.len().div_ceil(batch);
    let sched = OneCycle::new(max_lr, epochs * steps_per_epoch);
    let mut rows = Vec::new();
    let mut step = 0usize;
    // hard gates never sample, so the temperature endpoints are inert here
    run_phase(
        net, scenes, &mut opt, &sched, &mut rng, patch, batch, (1.0, 0.05),
        Phase::Finetune, epochs, &mut step, &mut rows, on_step,
    )?;
    Ok(rows)
}
