//! Iterative light-field denoising.
//!
//! Each stage runs the same pipeline: an angular noise suppressor distills
//! the views into an 8-channel guidance image (the plain angular mean plus
//! seven learned fusions), a spatially-attended guidance feature is combined
//! with per-view features under a squeeze-excitation channel attention, and
//! an embedding backbone maps the combined stack back to one value per ray.
//! Stage 0 predicts the denoised field outright; later stages consume the
//! previous estimate and add a residual correction.

pub mod train;

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::nn::Conv2d;
use crate::autodiff::Tensor;
use crate::pfe::arch::{prune, push_pruned_module, pruned_module_from_checkpoint, ArchMasks, PrunedPfe};
use crate::pfe::gates::GateCtx;
use crate::pfe::{conv_from, module_from_checkpoint, push_conv, push_module, PfeModule};
use crate::{Error, Result};

/// Task code stored in checkpoints to keep readers honest.
pub const TASK_DN: f32 = 1.0;

/// Learned angular fusions next to the fixed mean channel.
pub const ADAPTIVE_CHANNELS: usize = 7;
/// Fixed mean + adaptive fusions.
pub const GUIDANCE_CHANNELS: usize = 1 + ADAPTIVE_CHANNELS;

/// How the channel attention squeezes the per-view stacks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CaLayout {
    /// Guidance concatenated after each view's feature; one shared
    /// excitation evaluated per view.
    PerView,
    /// All view features and the guidance squeezed as one joint stack; the
    /// excitation emits per-view and guidance scales in one shot.
    Joint,
}

impl CaLayout {
    pub fn name(self) -> &'static str {
        match self {
            CaLayout::PerView => "per_view",
            CaLayout::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<CaLayout> {
        match s {
            "per_view" => Ok(CaLayout::PerView),
            "joint" => Ok(CaLayout::Joint),
            other => Err(Error::config(format!(
                "unknown channel-attention layout {other:?} (expected per_view or joint)"
            ))),
        }
    }
}

/// Angular noise suppression: channel 0 is the plain angular mean (the
/// maximum-likelihood estimate under i.i.d. Gaussian noise, fixed, never
/// trained), channels 1..8 are learned per-view fusions initialized to the
/// same mean so all eight start out identical.
pub struct NoiseSuppressor {
    pub m: usize,
    pub n: usize,
    /// (ADAPTIVE_CHANNELS, M*N, 1, 1) fusion weights, bias-free.
    pub fuse: Conv2d,
}

impl NoiseSuppressor {
    pub fn new(m: usize, n: usize) -> NoiseSuppressor {
        let mn = m * n;
        let init = 1.0 / mn as f32;
        let fuse = Conv2d {
            weight: Tensor::param(&[ADAPTIVE_CHANNELS, mn, 1, 1], vec![init; ADAPTIVE_CHANNELS * mn]),
            bias: None,
        };
        NoiseSuppressor { m, n, fuse }
    }

    fn from_weights(m: usize, n: usize, fuse: Conv2d) -> NoiseSuppressor {
        NoiseSuppressor { m, n, fuse }
    }

    /// (B, M, N, H, W) -> (B, 8, H, W). The mean channel reduces over the
    /// view axis with the same f64 accumulation as `LightField4D::
    /// angular_average`, so the two agree bit for bit.
    pub fn forward(&self, lf: &Tensor) -> Tensor {
        let s = lf.shape().to_vec();
        assert_eq!(s.len(), 5, "expected (B, M, N, H, W)");
        assert_eq!((s[1], s[2]), (self.m, self.n), "angular dims must match");
        let folded = lf.reshape(&[s[0], self.m * self.n, s[3], s[4]]);
        let fixed = folded.mean_axes(&[1]);
        let adaptive = self.fuse.forward(&folded);
        Tensor::concat(&[fixed, adaptive], 1)
    }
}

/// Gate a feature map by a per-pixel map pooled over channels: mean and max
/// maps, a 7x7 convolution down to one channel, and a sigmoid.
pub struct SpatialAttention {
    /// (1, 2, 7, 7), bias-free.
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(rng: &mut ChaCha8Rng) -> SpatialAttention {
        SpatialAttention { conv: Conv2d::new(2, 1, 7, 7, false, rng) }
    }

    pub fn forward(&self, feat: &Tensor) -> Tensor {
        assert_eq!(feat.shape().len(), 4, "expected (B, C, H, W)");
        let pooled = Tensor::concat(&[feat.mean_axes(&[1]), feat.max_axis(1)], 1);
        let gate = self.conv.forward(&pooled).sigmoid();
        feat.mul(&gate)
    }
}

/// Squeeze-excitation over each view's combined (feature, guidance) stack.
/// Reduction ratio 4 throughout; weights shared across views, which makes
/// the per-view layout equivariant to view permutations.
pub enum ChannelAttention3D {
    PerView {
        squeeze: Conv2d,
        excite: Conv2d,
    },
    Joint {
        squeeze: Conv2d,
        excite_views: Conv2d,
        excite_guide: Conv2d,
    },
}

impl ChannelAttention3D {
    pub fn new(layout: CaLayout, views: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        match layout {
            CaLayout::PerView => {
                let hid = (2 * c / 4).max(1);
                ChannelAttention3D::PerView {
                    squeeze: Conv2d::new(2 * c, hid, 1, 1, false, rng),
                    excite: Conv2d::new(hid, 2 * c, 1, 1, false, rng),
                }
            }
            CaLayout::Joint => {
                let hid = ((views + 1) * c / 4).max(1);
                ChannelAttention3D::Joint {
                    squeeze: Conv2d::new((views + 1) * c, hid, 1, 1, false, rng),
                    excite_views: Conv2d::new(hid, views * c, 1, 1, false, rng),
                    excite_guide: Conv2d::new(hid, c, 1, 1, false, rng),
                }
            }
        }
    }

    pub fn layout(&self) -> CaLayout {
        match self {
            ChannelAttention3D::PerView { .. } => CaLayout::PerView,
            ChannelAttention3D::Joint { .. } => CaLayout::Joint,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            ChannelAttention3D::PerView { squeeze, excite } => {
                vec![squeeze.weight.clone(), excite.weight.clone()]
            }
            ChannelAttention3D::Joint { squeeze, excite_views, excite_guide } => vec![
                squeeze.weight.clone(),
                excite_views.weight.clone(),
                excite_guide.weight.clone(),
            ],
        }
    }

    /// feats (B*V, C, H, W) + guidance (B, C, H, W) -> scaled combined
    /// stacks (B*V, 2C, H, W), guidance tiled behind each view's feature.
    pub fn forward(&self, feats: &Tensor, guidance: &Tensor) -> Tensor {
        let fs = feats.shape().to_vec();
        let gs = guidance.shape().to_vec();
        assert_eq!(fs.len(), 4);
        assert_eq!(gs.len(), 4);
        assert_eq!(fs[1], gs[1], "per-view and guidance channel counts differ");
        let (bv, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let b = gs[0];
        assert!(b >= 1 && bv % b == 0, "view stack {bv} not a multiple of batch {b}");
        let views = bv / b;
        let tiled = guidance
            .reshape(&[b, 1, c, h, w])
            .broadcast_to(&[b, views, c, h, w])
            .reshape(&[bv, c, h, w]);
        match self {
            ChannelAttention3D::PerView { squeeze, excite } => {
                let combined = Tensor::concat(&[feats.clone(), tiled], 1);
                let z = combined.mean_axes(&[2, 3]);
                let scale = excite.forward(&squeeze.forward(&z).relu()).sigmoid();
                combined.mul(&scale)
            }
            ChannelAttention3D::Joint { squeeze, excite_views, excite_guide } => {
                let zv = feats.mean_axes(&[2, 3]).reshape(&[b, views * c, 1, 1]);
                let zg = guidance.mean_axes(&[2, 3]);
                let hidden = squeeze.forward(&Tensor::concat(&[zv, zg], 1)).relu();
                let sv = excite_views.forward(&hidden).sigmoid().reshape(&[bv, c, 1, 1]);
                let sg = excite_guide
                    .forward(&hidden)
                    .sigmoid()
                    .reshape(&[b, 1, c, 1, 1])
                    .broadcast_to(&[b, views, c, 1, 1])
                    .reshape(&[bv, c, 1, 1]);
                Tensor::concat(&[feats.mul(&sv), tiled.mul(&sg)], 1)
            }
        }
    }
}

/// Run the shared front half of a stage: suppression, attended guidance,
/// per-view features, channel attention; returns the six-axis stack the
/// embedding backbone consumes.
fn stage_features(
    suppressor: &NoiseSuppressor,
    guide: &Conv2d,
    sa: &SpatialAttention,
    feat: &Conv2d,
    ca: &ChannelAttention3D,
    channels: usize,
    lf: &Tensor,
) -> Tensor {
    let s = lf.shape().to_vec();
    let (b, m, n, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let guidance = sa.forward(&guide.forward(&suppressor.forward(lf)));
    let per_view = feat.forward(&lf.reshape(&[b * m * n, 1, h, w]));
    let combined = ca.forward(&per_view, &guidance);
    combined.reshape(&[b, m, n, 2 * channels, h, w])
}

pub struct DnNet {
    pub m: usize,
    pub n: usize,
    pub channels: usize,
    /// Gaussian noise level on the 0..255 intensity scale this model was
    /// built (and trained) for.
    pub sigma: f32,
    pub suppressor: NoiseSuppressor,
    /// (C, 8, 3, 3) guidance feature lift.
    pub guide: Conv2d,
    pub sa: SpatialAttention,
    /// (C, 1, 3, 3) per-view feature lift, shared across views.
    pub feat: Conv2d,
    pub ca: ChannelAttention3D,
    /// One backbone per stage, each consuming 2C-channel view stacks.
    pub stages: Vec<PfeModule>,
}

impl DnNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m: usize,
        n: usize,
        stages: usize,
        units: usize,
        channels: usize,
        sigma: f32,
        layout: CaLayout,
        rng: &mut ChaCha8Rng,
    ) -> DnNet {
        assert!(stages >= 1, "need at least one stage");
        assert!(m >= 1 && n >= 1 && channels >= 1);
        let c = channels;
        let suppressor = NoiseSuppressor::new(m, n);
        let guide = Conv2d::new(GUIDANCE_CHANNELS, c, 3, 3, false, rng);
        let sa = SpatialAttention::new(rng);
        let feat = Conv2d::new(1, c, 3, 3, false, rng);
        let ca = ChannelAttention3D::new(layout, m * n, c, rng);
        let stages = (0..stages).map(|_| PfeModule::new(2 * c, c, units, rng)).collect();
        DnNet { m, n, channels: c, sigma, suppressor, guide, sa, feat, ca, stages }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// (B, M, N, H, W) -> the 8-channel guidance (B, 8, H, W).
    pub fn noise_suppress(&self, lf: &Tensor) -> Tensor {
        self.suppressor.forward(lf)
    }

    fn stage_forward(&self, lf: &Tensor, stage: &PfeModule, ctx: &mut GateCtx) -> Tensor {
        let x = stage_features(
            &self.suppressor,
            &self.guide,
            &self.sa,
            &self.feat,
            &self.ca,
            self.channels,
            lf,
        );
        stage.forward(&x, ctx)
    }

    /// Every stage's running estimate, in order; the last entry is the
    /// final denoised field.
    pub fn denoise_stages(&self, noisy: &Tensor, ctx: &mut GateCtx) -> Vec<Tensor> {
        let s = noisy.shape().to_vec();
        assert_eq!(s.len(), 5, "expected (B, M, N, H, W)");
        assert_eq!((s[1], s[2]), (self.m, self.n), "angular dims must match");
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for (t, stage) in self.stages.iter().enumerate() {
            match t {
                0 => outs.push(self.stage_forward(noisy, stage, ctx)),
                _ => {
                    let prev = outs.last().unwrap().clone();
                    let resid = self.stage_forward(&prev, stage, ctx);
                    outs.push(prev.add(&resid));
                }
            }
        }
        outs
    }

    pub fn denoise(&self, noisy: &Tensor, ctx: &mut GateCtx) -> Tensor {
        self.denoise_stages(noisy, ctx).pop().unwrap()
    }

    /// Trainable convolution weights (fusion weights included, mean channel
    /// has none), in a stable order.
    pub fn conv_params(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.suppressor.fuse.weight.clone(),
            self.guide.weight.clone(),
            self.sa.conv.weight.clone(),
            self.feat.weight.clone(),
        ];
        out.extend(self.ca.params());
        for st in &self.stages {
            out.extend(st.conv_params());
        }
        out
    }

    pub fn gate_params(&self) -> Vec<Tensor> {
        self.stages.iter().flat_map(|s| s.gate_params()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_params().iter().map(|t| t.len()).sum()
    }

    pub fn clip_gates(&self) {
        for p in self.gate_params() {
            p.clamp_values(0.0, 1.0);
        }
    }

    /// Hard keep/drop masks per stage at the 0.5 threshold.
    pub fn masks(&self) -> Vec<ArchMasks> {
        self.stages.iter().map(|s| ArchMasks::from_bank(&s.gates)).collect()
    }
}

// ---- checkpointing ----

fn untracked(conv: &Conv2d) -> Conv2d {
    let sh = conv.weight.shape();
    Conv2d::fixed(sh[0], sh[1], sh[2], sh[3], conv.weight.to_vec())
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

#[allow(clippy::too_many_arguments)]
fn push_dn_meta(ck: &mut Checkpoint, net: &DnNet, units: usize, pruned: bool) {
    ck.push_scalar("meta.task", TASK_DN);
    ck.push_scalar("meta.m", net.m as f32);
    ck.push_scalar("meta.n", net.n as f32);
    ck.push_scalar("meta.sigma", net.sigma);
    ck.push_scalar("meta.stages", net.stages.len() as f32);
    ck.push_scalar("meta.units", units as f32);
    ck.push_scalar("meta.channels", net.channels as f32);
    ck.push_scalar(
        "meta.ca_layout",
        match net.ca.layout() {
            CaLayout::PerView => 0.0,
            CaLayout::Joint => 1.0,
        },
    );
    ck.push_scalar("meta.pruned", if pruned { 1.0 } else { 0.0 });
    push_conv(ck, "suppress", &net.suppressor.fuse);
    push_conv(ck, "guide", &net.guide);
    push_conv(ck, "sa", &net.sa.conv);
    match &net.ca {
        ChannelAttention3D::PerView { squeeze, excite } => {
            push_conv(ck, "ca.squeeze", squeeze);
            push_conv(ck, "ca.excite", excite);
        }
        ChannelAttention3D::Joint { squeeze, excite_views, excite_guide } => {
            push_conv(ck, "ca.squeeze", squeeze);
            push_conv(ck, "ca.excite_views", excite_views);
            push_conv(ck, "ca.excite_guide", excite_guide);
        }
    }
    push_conv(ck, "feat", &net.feat);
}

pub fn to_checkpoint(net: &DnNet) -> Checkpoint {
    let mut ck = Checkpoint::new();
    push_dn_meta(&mut ck, net, net.stages[0].unit_count(), false);
    for (t, st) in net.stages.iter().enumerate() {
        push_module(&mut ck, &format!("stage{t}"), st);
    }
    ck
}

pub fn save(net: &DnNet, path: &Path) -> Result<()> {
    to_checkpoint(net).save(path)
}

struct DnMeta {
    m: usize,
    n: usize,
    sigma: f32,
    stages: usize,
    channels: usize,
    layout: CaLayout,
    pruned: bool,
}

fn read_dn_meta(ck: &Checkpoint) -> Result<DnMeta> {
    require_task(ck, TASK_DN, "denoising")?;
    let layout = match ck.scalar("meta.ca_layout")? {
        v if v == 0.0 => CaLayout::PerView,
        v if v == 1.0 => CaLayout::Joint,
        v => {
            return Err(Error::format(format!("unknown channel-attention layout code {v}")));
        }
    };
    Ok(DnMeta {
        m: ck.scalar_usize("meta.m")?,
        n: ck.scalar_usize("meta.n")?,
        sigma: ck.scalar("meta.sigma")?,
        stages: ck.scalar_usize("meta.stages")?,
        channels: ck.scalar_usize("meta.channels")?,
        layout,
        pruned: ck.scalar("meta.pruned")? != 0.0,
    })
}

struct FrontEnd {
    suppressor: NoiseSuppressor,
    guide: Conv2d,
    sa: SpatialAttention,
    feat: Conv2d,
    ca: ChannelAttention3D,
}

fn front_end_from(ck: &Checkpoint, meta: &DnMeta) -> Result<FrontEnd> {
    let (m, n, c) = (meta.m, meta.n, meta.channels);
    let mn = m * n;
    let suppressor = NoiseSuppressor::from_weights(
        m,
        n,
        conv_from(ck, "suppress", &[ADAPTIVE_CHANNELS, mn, 1, 1])?,
    );
    let guide = conv_from(ck, "guide", &[c, GUIDANCE_CHANNELS, 3, 3])?;
    let sa = SpatialAttention { conv: conv_from(ck, "sa", &[1, 2, 7, 7])? };
    let feat = conv_from(ck, "feat", &[c, 1, 3, 3])?;
    let ca = match meta.layout {
        CaLayout::PerView => {
            let hid = (2 * c / 4).max(1);
            ChannelAttention3D::PerView {
                squeeze: conv_from(ck, "ca.squeeze", &[hid, 2 * c, 1, 1])?,
                excite: conv_from(ck, "ca.excite", &[2 * c, hid, 1, 1])?,
            }
        }
        CaLayout::Joint => {
            let hid = ((mn + 1) * c / 4).max(1);
            ChannelAttention3D::Joint {
                squeeze: conv_from(ck, "ca.squeeze", &[hid, (mn + 1) * c, 1, 1])?,
                excite_views: conv_from(ck, "ca.excite_views", &[mn * c, hid, 1, 1])?,
                excite_guide: conv_from(ck, "ca.excite_guide", &[c, hid, 1, 1])?,
            }
        }
    };
    Ok(FrontEnd { suppressor, guide, sa, feat, ca })
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<DnNet> {
    let meta = read_dn_meta(ck)?;
    if meta.pruned {
        return Err(Error::format(
            "checkpoint stores a pruned model; load it with the pruned reader",
        ));
    }
    let fe = front_end_from(ck, &meta)?;
    let mut stages = Vec::with_capacity(meta.stages);
    for t in 0..meta.stages {
        let st = module_from_checkpoint(ck, &format!("stage{t}"))?;
        if st.in_ch != 2 * meta.channels {
            return Err(Error::format(format!(
                "stage{t} expects {} input channels but the attention emits {}",
                st.in_ch,
                2 * meta.channels
            )));
        }
        stages.push(st);
    }
    Ok(DnNet {
        m: meta.m,
        n: meta.n,
        channels: meta.channels,
        sigma: meta.sigma,
        suppressor: fe.suppressor,
        guide: fe.guide,
        sa: fe.sa,
        feat: fe.feat,
        ca: fe.ca,
        stages,
    })
}

pub fn load(path: &Path) -> Result<DnNet> {
    from_checkpoint(&Checkpoint::load(path)?)
}

/// Inference-only denoiser with every backbone pruned to its derived
/// architecture; runs the masks' exact hard-gated computation.
pub struct PrunedDnNet {
    pub m: usize,
    pub n: usize,
    pub channels: usize,
    pub sigma: f32,
    pub suppressor: NoiseSuppressor,
    pub guide: Conv2d,
    pub sa: SpatialAttention,
    pub feat: Conv2d,
    pub ca: ChannelAttention3D,
    pub stages: Vec<PrunedPfe>,
    pub masks: Vec<ArchMasks>,
}

impl PrunedDnNet {
    pub fn from_net(net: &DnNet, masks: &[ArchMasks]) -> PrunedDnNet {
        assert_eq!(masks.len(), net.stages.len());
        let stages = net.stages.iter().zip(masks).map(|(st, mk)| prune(st, mk)).collect();
        let ca = match &net.ca {
            ChannelAttention3D::PerView { squeeze, excite } => ChannelAttention3D::PerView {
                squeeze: untracked(squeeze),
                excite: untracked(excite),
            },
            ChannelAttention3D::Joint { squeeze, excite_views, excite_guide } => {
                ChannelAttention3D::Joint {
                    squeeze: untracked(squeeze),
                    excite_views: untracked(excite_views),
                    excite_guide: untracked(excite_guide),
                }
            }
        };
        PrunedDnNet {
            m: net.m,
            n: net.n,
            channels: net.channels,
            sigma: net.sigma,
            suppressor: NoiseSuppressor::from_weights(
                net.m,
                net.n,
                untracked(&net.suppressor.fuse),
            ),
            guide: untracked(&net.guide),
            sa: SpatialAttention { conv: untracked(&net.sa.conv) },
            feat: untracked(&net.feat),
            ca,
            stages,
            masks: masks.to_vec(),
        }
    }

    pub fn denoise_stages(&self, noisy: &Tensor) -> Vec<Tensor> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for (t, stage) in self.stages.iter().enumerate() {
            let input = if t == 0 { noisy.clone() } else { outs.last().unwrap().clone() };
            let x = stage_features(
                &self.suppressor,
                &self.guide,
                &self.sa,
                &self.feat,
                &self.ca,
                self.channels,
                &input,
            );
            let pred = stage.forward(&x);
            outs.push(if t == 0 { pred } else { input.add(&pred) });
        }
        outs
    }

    pub fn denoise(&self, noisy: &Tensor) -> Tensor {
        self.denoise_stages(noisy).pop().unwrap()
    }

    pub fn param_count(&self) -> usize {
        let front = self.suppressor.fuse.weight.len()
            + self.guide.weight.len()
            + self.sa.conv.weight.len()
            + self.feat.weight.len()
            + self.ca.params().iter().map(|t| t.len()).sum::<usize>();
        front + self.stages.iter().map(|s| s.param_count()).sum::<usize>()
    }
}

pub fn to_pruned_checkpoint(net: &DnNet, masks: &[ArchMasks]) -> Checkpoint {
    let pruned = PrunedDnNet::from_net(net, masks);
    let mut ck = Checkpoint::new();
    push_dn_meta(&mut ck, net, net.stages[0].unit_count(), true);
    for (t, (st, mk)) in pruned.stages.iter().zip(&pruned.masks).enumerate() {
        push_pruned_module(&mut ck, &format!("stage{t}"), st, mk);
    }
    ck
}

pub fn pruned_from_checkpoint(ck: &Checkpoint) -> Result<PrunedDnNet> {
    let meta = read_dn_meta(ck)?;
    if !meta.pruned {
        return Err(Error::format(
            "checkpoint stores a full model; load it with the full reader",
        ));
    }
    let fe = front_end_from(ck, &meta)?;
    let mut stages = Vec::with_capacity(meta.stages);
    let mut masks = Vec::with_capacity(meta.stages);
    for t in 0..meta.stages {
        let prefix = format!("stage{t}");
        let st = pruned_module_from_checkpoint(ck, &prefix)?;
        if st.in_ch != 2 * meta.channels {
            return Err(Error::format(format!(
                "stage{t} expects {} input channels but the attention emits {}",
                st.in_ch,
                2 * meta.channels
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
    Ok(PrunedDnNet {
        m: meta.m,
        n: meta.n,
        channels: meta.channels,
        sigma: meta.sigma,
        suppressor: fe.suppressor,
        guide: fe.guide,
        sa: fe.sa,
        feat: fe.feat,
        ca: fe.ca,
        stages,
        masks,
    })
}

pub fn load_pruned(path: &Path) -> Result<PrunedDnNet> {
    pruned_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check, FdOpts};
    use crate::lf::{LightField4D, NoiseSpec, ValueRange};
    use crate::pfe::gates::GateBank;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| r.random_range(0.0f32..1.0)).collect())
    }

    fn random_param(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::param(shape, (0..len).map(|_| r.random_range(0.0f32..1.0)).collect())
    }

    fn random_lf(m: usize, n: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> LightField4D {
        let data = (0..m * n * h * w).map(|_| r.random_range(0.0f32..1.0)).collect();
        LightField4D::from_vec(m, n, h, w, ValueRange::Unit, data).unwrap()
    }

    fn zeroed(conv: &Conv2d) -> Conv2d {
        let sh = conv.weight.shape().to_vec();
        Conv2d { weight: Tensor::param(&sh, vec![0.0; conv.weight.len()]), bias: None }
    }

    #[test]
    fn all_eight_guidance_channels_agree_at_initialization() {
        let mut r = rng(1);
        let sup = NoiseSuppressor::new(3, 3);
        let x = random_tensor(&[2, 3, 3, 5, 6], &mut r);
        let g = sup.forward(&x);
        assert_eq!(g.shape(), &[2, GUIDANCE_CHANNELS, 5, 6]);
        let v = g.to_vec();
        let hw = 5 * 6;
        for b in 0..2 {
            let base = b * GUIDANCE_CHANNELS * hw;
            for c in 1..GUIDANCE_CHANNELS {
                for i in 0..hw {
                    let fixed = v[base + i];
                    let adaptive = v[base + c * hw + i];
                    assert!(
                        (fixed - adaptive).abs() <= 1e-6,
                        "channel {c} drifts from the mean at init: {fixed} vs {adaptive}"
                    );
                }
            }
        }
    }

    #[test]
    fn fixed_channel_matches_angular_average_bit_for_bit() {
        let mut r = rng(2);
        let mut sup = NoiseSuppressor::new(2, 3);
        // randomize the learned fusions; the fixed channel must not care
        sup.fuse = Conv2d::new(6, ADAPTIVE_CHANNELS, 1, 1, false, &mut r);
        let lfa = random_lf(2, 3, 4, 7, &mut r);
        let lfb = random_lf(2, 3, 4, 7, &mut r);
        let x = Tensor::concat(&[lfa.to_tensor(), lfb.to_tensor()], 0);
        let g = sup.forward(&x).to_vec();
        let hw = 4 * 7;
        for (bi, lf) in [&lfa, &lfb].iter().enumerate() {
            let mean = lf.angular_average();
            let ch0 = &g[bi * GUIDANCE_CHANNELS * hw..][..hw];
            for (a, e) in ch0.iter().zip(mean.as_slice()) {
                assert_eq!(a.to_bits(), e.to_bits(), "fixed channel must be the angular mean");
            }
        }
    }

    #[test]
    fn mean_channel_shrinks_noise_by_the_view_count_root() {
        let mut lf = LightField4D::zeros(3, 3, 64, 64);
        for v in lf.as_mut_slice() {
            *v = 0.5;
        }
        let noisy = lf.add_noise(&NoiseSpec { sigma: 20.0, seed: 123 });
        let sup = NoiseSuppressor::new(3, 3);
        let g = sup.forward(&noisy.to_tensor()).to_vec();
        let hw = 64 * 64;
        let std_of = |vals: &[f32]| {
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                / (vals.len() - 1) as f64;
            var.sqrt()
        };
        let mean_std = std_of(&g[..hw]);
        let view_std = std_of(&noisy.as_slice()[..hw]);
        let expect = (20.0 / 255.0) / 3.0;
        assert!(
            (mean_std - expect).abs() / expect < 0.10,
            "mean-channel residual std {mean_std:.5} vs expected {expect:.5}"
        );
        let shrink = view_std / mean_std;
        assert!(
            (shrink - 3.0).abs() < 0.3,
            "nine views should shrink noise threefold, got {shrink:.2}"
        );
    }

    #[test]
    fn fusion_weight_gradients_accumulate_the_matching_view() {
        let mut r = rng(3);
        let sup = NoiseSuppressor::new(2, 2);
        let x = random_tensor(&[2, 2, 2, 3, 4], &mut r);
        let loss = sup.forward(&x).mean();
        loss.backward();
        let grads = sup.fuse.weight.grad().expect("the fusion weights are trained");
        let xs = x.to_vec();
        let (b, mn, hw) = (2usize, 4usize, 12usize);
        let denom = (b * GUIDANCE_CHANNELS * hw) as f64;
        for c in 0..ADAPTIVE_CHANNELS {
            for uv in 0..mn {
                let mut want = 0f64;
                for bi in 0..b {
                    for i in 0..hw {
                        want += xs[(bi * mn + uv) * hw + i] as f64;
                    }
                }
                let want = (want / denom) as f32;
                let got = grads[c * mn + uv];
                assert!(
                    (got - want).abs() <= 1e-7,
                    "grad[{c}][{uv}] = {got}, expected the view-sum {want}"
                );
            }
        }
        check(&[&sup.fuse.weight], &|| sup.forward(&x).mean(), &FdOpts::default()).unwrap();
    }

    #[test]
    fn spatial_attention_with_zero_weights_halves_the_feature() {
        let mut r = rng(4);
        let mut sa = SpatialAttention::new(&mut r);
        sa.conv = zeroed(&sa.conv);
        let feat = random_tensor(&[2, 5, 6, 7], &mut r);
        let out = sa.forward(&feat).to_vec();
        for (o, f) in out.iter().zip(feat.to_vec()) {
            assert_eq!(*o, 0.5 * f, "a zero gate logit must scale by exactly one half");
        }
    }

    #[test]
    fn attention_gates_only_attenuate() {
        let mut r = rng(5);
        let sa = SpatialAttention::new(&mut r);
        let data: Vec<f32> = (0..2 * 4 * 6 * 6).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let feat = Tensor::from_vec(&[2, 4, 6, 6], data.clone());
        let out = sa.forward(&feat).to_vec();
        let mut changed = false;
        for (o, f) in out.iter().zip(&data) {
            assert!(o.abs() <= f.abs(), "gate must stay below 1: |{o}| > |{f}|");
            changed |= o != f;
        }
        assert!(changed, "a random gate should actually attenuate something");
    }

    #[test]
    fn channel_attention_with_zero_excitation_scales_by_half() {
        let mut r = rng(6);
        let (b, views, c, h, w) = (2usize, 4usize, 3usize, 4usize, 5usize);
        let feats = random_tensor(&[b * views, c, h, w], &mut r);
        let guide = random_tensor(&[b, c, h, w], &mut r);
        let fv = feats.to_vec();
        let gv = guide.to_vec();
        let hw = h * w;
        let mut expect = Vec::with_capacity(b * views * 2 * c * hw);
        for bi in 0..b {
            for vi in 0..views {
                let f = &fv[(bi * views + vi) * c * hw..][..c * hw];
                expect.extend(f.iter().map(|&x| 0.5 * x));
                expect.extend(gv[bi * c * hw..][..c * hw].iter().map(|&x| 0.5 * x));
            }
        }

        let mut pv = ChannelAttention3D::new(CaLayout::PerView, views, c, &mut r);
        if let ChannelAttention3D::PerView { excite, .. } = &mut pv {
            *excite = zeroed(excite);
        }
        assert_eq!(pv.forward(&feats, &guide).to_vec(), expect);

        let mut jt = ChannelAttention3D::new(CaLayout::Joint, views, c, &mut r);
        if let ChannelAttention3D::Joint { excite_views, excite_guide, .. } = &mut jt {
            *excite_views = zeroed(excite_views);
            *excite_guide = zeroed(excite_guide);
        }
        assert_eq!(jt.forward(&feats, &guide).to_vec(), expect);
    }

    #[test]
    fn per_view_channel_attention_is_equivariant_to_view_permutation() {
        let mut r = rng(7);
        let (views, c, h, w) = (4usize, 2usize, 3usize, 3usize);
        let ca = ChannelAttention3D::new(CaLayout::PerView, views, c, &mut r);
        let feats = random_tensor(&[views, c, h, w], &mut r);
        let guide = random_tensor(&[1, c, h, w], &mut r);
        let out = ca.forward(&feats, &guide).to_vec();

        let perm = [2usize, 0, 3, 1];
        let fv = feats.to_vec();
        let block = c * h * w;
        let mut permuted = Vec::with_capacity(fv.len());
        for &p in &perm {
            permuted.extend_from_slice(&fv[p * block..][..block]);
        }
        let out2 = ca.forward(&Tensor::from_vec(&[views, c, h, w], permuted), &guide).to_vec();

        let oblock = 2 * c * h * w;
        for (v, &p) in perm.iter().enumerate() {
            let a = &out2[v * oblock..][..oblock];
            let e = &out[p * oblock..][..oblock];
            for (x, y) in a.iter().zip(e) {
                assert_eq!(x.to_bits(), y.to_bits(), "view blocks must move untouched");
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng(8);
        let sa = SpatialAttention::new(&mut r);
        // the channel max is not differentiable at ties, so space the values
        // far enough apart that no finite-difference step can cross one
        let mut vals: Vec<f32> = (0..75).map(|k| k as f32 * 0.013).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut r);
        let feat = Tensor::param(&[1, 3, 5, 5], vals);
        check(&[&feat, &sa.conv.weight], &|| sa.forward(&feat).mean(), &FdOpts::default())
            .unwrap();

        for layout in [CaLayout::PerView, CaLayout::Joint] {
            let ca = ChannelAttention3D::new(layout, 4, 2, &mut r);
            let feats = random_param(&[4, 2, 3, 3], &mut r);
            let guide = random_param(&[1, 2, 3, 3], &mut r);
            let mut inputs = vec![&feats, &guide];
            let params = ca.params();
            inputs.extend(params.iter());
            check(&inputs, &|| ca.forward(&feats, &guide).mean(), &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn later_stages_are_residual_corrections() {
        let mut r = rng(9);
        let mut net = DnNet::new(2, 2, 2, 2, 4, 20.0, CaLayout::PerView, &mut r);
        let x = random_tensor(&[1, 2, 2, 6, 6], &mut r);
        let outs = net.denoise_stages(&x, &mut GateCtx::Template);
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].shape(), x.shape());
        assert_eq!(outs[1].shape(), x.shape());
        for v in outs[1].to_vec() {
            assert!(v.is_finite());
        }
        let last = net.denoise(&x, &mut GateCtx::Template);
        assert_eq!(last.to_vec(), outs[1].to_vec());

        // a silenced second stage must pass the first estimate through
        net.stages[1].head = zeroed(&net.stages[1].head);
        let outs = net.denoise_stages(&x, &mut GateCtx::Template);
        assert_eq!(
            outs[0].to_vec(),
            outs[1].to_vec(),
            "a zero correction must leave the estimate untouched"
        );
    }

    /// Verifies the full backward graph end to end. The weights are moved
    /// into the positive orthant first: positive kernels on positive inputs
    /// keep every relu in its identity region, so the composition is smooth
    /// and central differences are a faithful reference. (With signed random
    /// weights the thousands of downstream relu kinks make per-element
    /// finite differences a measurement artifact rather than a check.)
    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut r = rng(10);
        let net = DnNet::new(2, 2, 2, 2, 4, 20.0, CaLayout::PerView, &mut r);
        for wt in net.conv_params() {
            let vals: Vec<f32> = wt.to_vec().iter().map(|v| v.abs() * 0.1 + 0.003).collect();
            wt.values_mut().copy_from_slice(&vals);
        }
        let x = random_param(&[1, 2, 2, 8, 8], &mut r);
        let f = || net.denoise(&x, &mut GateCtx::Template).mean();
        let opts = FdOpts { h: 1e-3, tol_rel: 1e-3, tol_abs: 5e-5 };
        let excite = match &net.ca {
            ChannelAttention3D::PerView { excite, .. } => excite.weight.clone(),
            ChannelAttention3D::Joint { excite_views, .. } => excite_views.weight.clone(),
        };
        check(
            &[
                &x,
                &net.suppressor.fuse.weight,
                &net.sa.conv.weight,
                &excite,
                &net.stages[0].embed.weight,
                &net.stages[1].head.weight,
            ],
            &f,
            &opts,
        )
        .unwrap();
    }

    #[test]
    fn checkpoint_round_trip_reproduces_the_denoiser_bit_for_bit() {
        let mut r = rng(11);
        for layout in [CaLayout::PerView, CaLayout::Joint] {
            let mut net = DnNet::new(2, 3, 2, 3, 4, 50.0, layout, &mut r);
            let probs_u = vec![vec![0.9], vec![0.2, 0.7], vec![0.6, 0.4, 0.8]];
            let probs_v = vec![
                vec![0.9, 0.1, 0.8, 0.7],
                vec![0.2, 0.9, 0.1, 0.6],
                vec![0.8, 0.3, 0.9, 0.2],
            ];
            for st in &mut net.stages {
                st.gates = GateBank::from_probs(probs_u.clone(), probs_v.clone());
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("dn.ckpt");
            save(&net, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!((back.m, back.n), (2, 3));
            assert_eq!(back.sigma, 50.0);
            assert_eq!(back.ca.layout(), layout);

            let x = random_tensor(&[1, 2, 3, 5, 6], &mut r);
            let a = net.denoise(&x, &mut GateCtx::Template);
            let b = back.denoise(&x, &mut GateCtx::Template);
            assert_eq!(a.to_vec(), b.to_vec());
            let a = net.denoise(&x, &mut GateCtx::Hard);
            let b = back.denoise(&x, &mut GateCtx::Hard);
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn readers_reject_checkpoints_for_the_other_task() {
        let mut r = rng(12);
        let dir = tempfile::tempdir().unwrap();

        let dn = DnNet::new(2, 2, 1, 2, 4, 20.0, CaLayout::PerView, &mut r);
        let dn_path = dir.path().join("dn.ckpt");
        save(&dn, &dn_path).unwrap();
        assert!(crate::crnet::load(&dn_path).is_err(), "a denoiser is not a reconstructor");

        let cr = crate::crnet::CrNet::new(2, 2, 2, 1, 2, 4, &mut r);
        let cr_path = dir.path().join("cr.ckpt");
        crate::crnet::save(&cr, &cr_path).unwrap();
        assert!(load(&cr_path).is_err(), "a reconstructor is not a denoiser");
    }

    #[test]
    fn pruned_checkpoint_round_trip_matches_hard_mode_bit_for_bit() {
        let mut r = rng(13);
        for layout in [CaLayout::PerView, CaLayout::Joint] {
            let mut net = DnNet::new(2, 2, 2, 3, 4, 10.0, layout, &mut r);
            let probs_u = vec![vec![0.9], vec![0.2, 0.7], vec![0.6, 0.4, 0.8]];
            let probs_v = vec![
                vec![0.9, 0.1, 0.8, 0.7],
                vec![0.2, 0.9, 0.1, 0.6],
                vec![0.8, 0.3, 0.9, 0.2],
            ];
            for st in &mut net.stages {
                st.gates = GateBank::from_probs(probs_u.clone(), probs_v.clone());
            }
            let masks = net.masks();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("pruned.ckpt");
            to_pruned_checkpoint(&net, &masks).save(&path).unwrap();
            let pruned = load_pruned(&path).unwrap();
            assert!(load(&path).is_err(), "the full reader must reject a pruned file");

            let x = random_tensor(&[2, 2, 2, 5, 6], &mut r);
            let want = net.denoise_stages(&x, &mut GateCtx::Hard);
            let direct = PrunedDnNet::from_net(&net, &masks).denoise_stages(&x);
            let got = pruned.denoise_stages(&x);
            assert!(pruned.param_count() <= net.param_count());
            for ((a, b), c) in want.iter().zip(&direct).zip(&got) {
                assert_eq!(a.to_vec(), b.to_vec());
                assert_eq!(a.to_vec(), c.to_vec());
            }
        }
    }

    #[test]
    fn all_open_masks_prune_nothing() {
        let mut r = rng(14);
        let net = DnNet::new(2, 2, 2, 3, 4, 20.0, CaLayout::PerView, &mut r);
        let masks: Vec<ArchMasks> =
            net.stages.iter().map(|s| ArchMasks::all_open(s.unit_count())).collect();
        let pruned = PrunedDnNet::from_net(&net, &masks);
        assert_eq!(pruned.param_count(), net.param_count());
        let x = random_tensor(&[1, 2, 2, 5, 5], &mut r);
        let want = net.denoise(&x, &mut GateCtx::Template);
        let got = pruned.denoise(&x);
        assert_eq!(want.to_vec(), got.to_vec());
    }
}
