//! Cycle-consistent reconstruction from coded-aperture measurements.
//!
//! A learnable aperture code — one transmittance per (exposure, view) pair,
//! shared by every stage — renders S coded measurements from a light field
//! exactly like `lf::project`. The coarse stage maps the lifted measurement
//! stack to a first estimate of the light field; each refinement stage
//! re-projects the current estimate through the same code, feeds the
//! measurement residual to its own embedding module, and adds the predicted
//! correction on top.

pub mod train;

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::Tensor;
use crate::lf::{ApertureCode, CodedMeasurements, LightField4D};
use crate::pfe::arch::{
    prune, pruned_module_from_checkpoint, push_pruned_module, ArchMasks, PrunedPfe,
};
use crate::pfe::gates::GateCtx;
use crate::pfe::{module_from_checkpoint, push_module, PfeModule};
use crate::{Error, Result};

/// `meta.task` value marking reconstruction checkpoints.
pub const TASK_CR: f32 = 0.0;

pub struct CrNet {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    /// Scale measurements (and pseudo-measurements) by 1/(M*N).
    pub normalize_cms: bool,
    /// Aperture transmittances as a 1x1 conv weight over views-as-channels:
    /// shape (S, M*N, 1, 1), entry (i, u*N+v) = a_i(u,v).
    pub code: Tensor,
    /// Stage 0 estimates coarsely; stages 1.. refine residuals.
    pub stages: Vec<PfeModule>,
}

impl CrNet {
    pub fn new(
        m: usize,
        n: usize,
        s: usize,
        stages: usize,
        units: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> CrNet {
        assert!(stages >= 1, "need at least the coarse stage");
        assert!(m >= 1 && n >= 1 && s >= 1);
        let init = ApertureCode::random(s, m, n, rng);
        let code = Tensor::param(&[s, m * n, 1, 1], init.as_slice().to_vec());
        let stages = (0..stages)
            .map(|_| PfeModule::new(s, channels, units, rng))
            .collect();
        CrNet { m, n, s, normalize_cms: false, code, stages }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn aperture_code(&self) -> ApertureCode {
        ApertureCode::from_vec(self.s, self.m, self.n, self.code.to_vec())
            .expect("code tensor always matches its own dims")
    }

    /// Overwrite the shared code storage (e.g. freeze to a known mask set).
    pub fn set_code(&self, code: &ApertureCode) {
        let want = self.code.len();
        assert_eq!(code.as_slice().len(), want, "code dims must match");
        self.code.set_values(code.as_slice());
    }

    /// Render S coded measurements from a batched light field (B, M, N, H, W):
    /// a 1x1 convolution over views-as-channels, same semantics as
    /// `lf::project` but differentiable w.r.t. both inputs.
    pub fn simulate_cms(&self, lf: &Tensor) -> Tensor {
        let sh = lf.shape().to_vec();
        assert_eq!(sh.len(), 5, "expected (B, M, N, H, W)");
        assert_eq!((sh[1], sh[2]), (self.m, self.n), "angular dims must match the code");
        let folded = lf.reshape(&[sh[0], self.m * self.n, sh[3], sh[4]]);
        let cms = folded.conv2d(&self.code, None);
        if self.normalize_cms {
            cms.scalar_mul(1.0 / (self.m * self.n) as f32)
        } else {
            cms
        }
    }

    /// Tile measurements (B, S, H, W) identically to every angular position,
    /// giving the (B, M, N, S, H, W) input the embedding modules expect.
    pub fn lift(&self, cms: &Tensor) -> Tensor {
        let sh = cms.shape().to_vec();
        assert_eq!(sh.len(), 4, "expected (B, S, H, W)");
        assert_eq!(sh[1], self.s, "measurement count must match the code");
        cms.reshape(&[sh[0], 1, 1, self.s, sh[2], sh[3]])
            .broadcast_to(&[sh[0], self.m, self.n, self.s, sh[2], sh[3]])
    }

    /// First estimate straight from the measurements.
    pub fn coarse(&self, cms: &Tensor, ctx: &mut GateCtx) -> Tensor {
        self.stages[0].forward(&self.lift(cms), ctx)
    }

    /// One refinement: re-project the estimate, embed the measurement
    /// residual, add the correction.
    pub fn refine(&self, stage: usize, l: &Tensor, cms: &Tensor, ctx: &mut GateCtx) -> Tensor {
        assert!(stage >= 1 && stage < self.stages.len(), "refinement stages are 1..T-1");
        let pseudo = self.simulate_cms(l);
        let resid = cms.sub(&pseudo);
        self.stages[stage].forward(&self.lift(&resid), ctx).add(l)
    }

    /// Every stage's estimate, coarse first.
    pub fn reconstruct_stages(&self, cms: &Tensor, ctx: &mut GateCtx) -> Vec<Tensor> {
        let mut outs = vec![self.coarse(cms, ctx)];
        for t in 1..self.stages.len() {
            let next = self.refine(t, outs.last().unwrap(), cms, ctx);
            outs.push(next);
        }
        outs
    }

    pub fn reconstruct(&self, cms: &Tensor, ctx: &mut GateCtx) -> Tensor {
        self.reconstruct_stages(cms, ctx).pop().unwrap()
    }

    /// End-to-end pass for training: simulate measurements from the ground
    /// truth, then reconstruct. Returns (measurements, final estimate).
    pub fn forward(&self, lf: &Tensor, ctx: &mut GateCtx) -> (Tensor, Tensor) {
        let cms = self.simulate_cms(lf);
        let l = self.reconstruct(&cms, ctx);
        (cms, l)
    }

    /// Trainable weights in a stable order: the code, then each stage's convs.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = vec![self.code.clone()];
        for st in &self.stages {
            out.extend(st.conv_params());
        }
        out
    }

    pub fn gate_params(&self) -> Vec<Tensor> {
        self.stages.iter().flat_map(|s| s.gate_params()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.code.len() + self.stages.iter().map(|s| s.param_count()).sum::<usize>()
    }

    pub fn clip_code(&self) {
        self.code.clamp_values(0.0, 1.0);
    }

    pub fn clip_gates(&self) {
        for st in &self.stages {
            st.gates.clip();
        }
    }

    /// Hard 0/1 masks from every stage's gate probabilities.
    pub fn masks(&self) -> Vec<ArchMasks> {
        self.stages.iter().map(|s| ArchMasks::from_bank(&s.gates)).collect()
    }
}

fn push_cr_meta(ck: &mut Checkpoint, net: &CrNet, units: usize, channels: usize, pruned: bool) {
    ck.push_scalar("meta.task", TASK_CR);
    ck.push_scalar("meta.m", net.m as f32);
    ck.push_scalar("meta.n", net.n as f32);
    ck.push_scalar("meta.s", net.s as f32);
    ck.push_scalar("meta.stages", net.stages.len() as f32);
    ck.push_scalar("meta.units", units as f32);
    ck.push_scalar("meta.channels", channels as f32);
    ck.push_scalar("meta.normalize_cms", if net.normalize_cms { 1.0 } else { 0.0 });
    ck.push_scalar("meta.pruned", if pruned { 1.0 } else { 0.0 });
    ck.push("code", &[net.s, net.m * net.n], net.code.to_vec());
}

pub fn to_checkpoint(net: &CrNet) -> Checkpoint {
    let mut ck = Checkpoint::new();
    let units = net.stages[0].unit_count();
    let channels = net.stages[0].channels;
    push_cr_meta(&mut ck, net, units, channels, false);
    for (t, st) in net.stages.iter().enumerate() {
        push_module(&mut ck, &format!("stage{t}"), st);
    }
    ck
}

pub fn save(net: &CrNet, path: &Path) -> Result<()> {
    to_checkpoint(net).save(path)
}

fn require_task(ck: &Checkpoint, want: f32, what: &str) -> Result<()> {
    let task = ck.scalar("meta.task")?;
    if task != want {
        return Err(Error::format(format!(
            "checkpoint holds task code {task}, not a {what} model"
        )));
    }
    Ok(())
}

fn read_cr_dims(ck: &Checkpoint) -> Result<(usize, usize, usize, usize, bool, bool)> {
    require_task(ck, TASK_CR, "reconstruction")?;
    let m = ck.scalar_usize("meta.m")?;
    let n = ck.scalar_usize("meta.n")?;
    let s = ck.scalar_usize("meta.s")?;
    let stages = ck.scalar_usize("meta.stages")?;
    let normalize = ck.scalar("meta.normalize_cms")? != 0.0;
    let pruned = ck.scalar("meta.pruned")? != 0.0;
    Ok((m, n, s, stages, normalize, pruned))
}

fn read_code(ck: &Checkpoint, s: usize, m: usize, n: usize) -> Result<Tensor> {
    let (csh, cdata) = ck.require("code")?;
    if csh != [s, m * n] {
        return Err(Error::format(format!(
            "code entry has shape {:?}, expected [{}, {}]",
            csh,
            s,
            m * n
        )));
    }
    Ok(Tensor::param(&[s, m * n, 1, 1], cdata.to_vec()))
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<CrNet> {
    let (m, n, s, stage_count, normalize_cms, pruned) = read_cr_dims(ck)?;
    if pruned {
        return Err(Error::format(
            "checkpoint stores a pruned model; load it with the pruned reader",
        ));
    }
    let code = read_code(ck, s, m, n)?;
    let mut stages = Vec::with_capacity(stage_count);
    for t in 0..stage_count {
        let st = module_from_checkpoint(ck, &format!("stage{t}"))?;
        if st.in_ch != s {
            return Err(Error::format(format!(
                "stage{t} expects {} input channels but the code renders {s}",
                st.in_ch
            )));
        }
        stages.push(st);
    }
    Ok(CrNet { m, n, s, normalize_cms, code, stages })
}

pub fn load(path: &Path) -> Result<CrNet> {
    from_checkpoint(&Checkpoint::load(path)?)
}

/// Inference-only network with every stage pruned down to its derived
/// architecture. Runs the masks' exact hard-gated computation.
pub struct PrunedCrNet {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub normalize_cms: bool,
    pub code: Tensor,
    pub stages: Vec<PrunedPfe>,
    pub masks: Vec<ArchMasks>,
}

impl PrunedCrNet {
    pub fn from_net(net: &CrNet, masks: &[ArchMasks]) -> PrunedCrNet {
        assert_eq!(masks.len(), net.stages.len());
        let stages = net
            .stages
            .iter()
            .zip(masks)
            .map(|(st, mk)| prune(st, mk))
            .collect();
        PrunedCrNet {
            m: net.m,
            n: net.n,
            s: net.s,
            normalize_cms: net.normalize_cms,
            code: Tensor::from_vec(&[net.s, net.m * net.n, 1, 1], net.code.to_vec()),
            stages,
            masks: masks.to_vec(),
        }
    }

    /// Overwrite the stored code, mirroring [`CrNet::set_code`].
    pub fn set_code(&self, code: &ApertureCode) {
        let want = self.code.len();
        assert_eq!(code.as_slice().len(), want, "code dims must match");
        self.code.set_values(code.as_slice());
    }

    pub fn simulate_cms(&self, lf: &Tensor) -> Tensor {
        let sh = lf.shape().to_vec();
        assert_eq!(sh.len(), 5, "expected (B, M, N, H, W)");
        let folded = lf.reshape(&[sh[0], self.m * self.n, sh[3], sh[4]]);
        let cms = folded.conv2d(&self.code, None);
        if self.normalize_cms {
            cms.scalar_mul(1.0 / (self.m * self.n) as f32)
        } else {
            cms
        }
    }

    fn lift(&self, cms: &Tensor) -> Tensor {
        let sh = cms.shape().to_vec();
        cms.reshape(&[sh[0], 1, 1, self.s, sh[2], sh[3]])
            .broadcast_to(&[sh[0], self.m, self.n, self.s, sh[2], sh[3]])
    }

    pub fn reconstruct_stages(&self, cms: &Tensor) -> Vec<Tensor> {
        let mut outs = vec![self.stages[0].forward(&self.lift(cms))];
        for t in 1..self.stages.len() {
            let l = outs.last().unwrap();
            let resid = cms.sub(&self.simulate_cms(l));
            outs.push(self.stages[t].forward(&self.lift(&resid)).add(l));
        }
        outs
    }

    pub fn reconstruct(&self, cms: &Tensor) -> Tensor {
        self.reconstruct_stages(cms).pop().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.code.len() + self.stages.iter().map(|s| s.param_count()).sum::<usize>()
    }
}

pub fn to_pruned_checkpoint(net: &CrNet, masks: &[ArchMasks]) -> Checkpoint {
    let pruned = PrunedCrNet::from_net(net, masks);
    let mut ck = Checkpoint::new();
    let units = net.stages[0].unit_count();
    let channels = net.stages[0].channels;
    push_cr_meta(&mut ck, net, units, channels, true);
    for (t, (st, mk)) in pruned.stages.iter().zip(&pruned.masks).enumerate() {
        push_pruned_module(&mut ck, &format!("stage{t}"), st, mk);
    }
    ck
}

pub fn pruned_from_checkpoint(ck: &Checkpoint) -> Result<PrunedCrNet> {
    let (m, n, s, stage_count, normalize_cms, pruned) = read_cr_dims(ck)?;
    if !pruned {
        return Err(Error::format(
            "checkpoint stores a full model; load it with the full reader",
        ));
    }
    let code = read_code(ck, s, m, n)?;
    let mut stages = Vec::with_capacity(stage_count);
    let mut masks = Vec::with_capacity(stage_count);
    for t in 0..stage_count {
        let prefix = format!("stage{t}");
        let st = pruned_module_from_checkpoint(ck, &prefix)?;
        if st.in_ch != s {
            return Err(Error::format(format!(
                "stage{t} expects {} input channels but the code renders {s}",
                st.in_ch
            )));
        }
        let mut u = Vec::new();
        while let Some((_, d)) = ck.get(&format!("{prefix}.mask.u{}", u.len() + 1)) {
            u.push(d.to_vec());
        }
        let mut v = Vec::new();
        while let Some((_, d)) = ck.get(&format!("{prefix}.mask.v{}", v.len() + 1)) {
            v.push(d.to_vec());
        }
        masks.push(ArchMasks::from_floats(&u, &v));
        stages.push(st);
    }
    Ok(PrunedCrNet { m, n, s, normalize_cms, code, stages, masks })
}

/// Code-free reference estimate: normalize each measurement by its code mass
/// (sum of transmittances), average the S results, and tile that single image
/// to every view.
pub fn tile_mean_baseline(cms: &CodedMeasurements, code: &ApertureCode) -> Result<LightField4D> {
    if cms.s != code.s {
        return Err(Error::shape(format!(
            "{} measurements vs {} code exposures",
            cms.s, code.s
        )));
    }
    let views = code.m * code.n;
    let mut mean = vec![0f64; cms.h * cms.w];
    for i in 0..cms.s {
        let mut mass = 0f64;
        for uv in 0..views {
            mass += code.as_slice()[i * views + uv] as f64;
        }
        let mass = mass.max(1e-12);
        let img = cms.image(i);
        for (acc, &p) in mean.iter_mut().zip(img.as_slice()) {
            *acc += p as f64 / mass;
        }
    }
    let k = 1.0 / cms.s as f64;
    let tile: Vec<f32> = mean.into_iter().map(|a| (a * k).clamp(0.0, 1.0) as f32).collect();
    let mut lf = LightField4D::zeros(code.m, code.n, cms.h, cms.w);
    for uv in 0..views {
        let start = uv * cms.h * cms.w;
        lf.as_mut_slice()[start..start + cms.h * cms.w].copy_from_slice(&tile);
    }
    Ok(lf)
}
