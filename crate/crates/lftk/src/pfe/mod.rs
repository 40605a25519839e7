//! Probabilistic feature embedding over 4-D light fields.
//!
//! Features live on a six-axis canonical layout (batch, u, v, channel, y, x).
//! Every embedding unit aggregates gated earlier features, pushes them
//! through four 3x3 pattern branches that each convolve a different pair of
//! axes, fuses the gated branches, and emits the next feature block. Which
//! connections survive is decided by the gate bank.

pub mod arch;
pub mod gates;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::nn::Conv2d;
use crate::autodiff::Tensor;
use crate::{Error, Result};
use gates::{GateBank, GateCtx, ResolvedGates, PATTERNS_PER_UNIT};

/// Pattern branch axis pairs, in fuse order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Pattern {
    /// spatial: convolve (y, x) per view
    Spa,
    /// angular: convolve (u, v) per pixel
    Ang,
    /// horizontal epipolar: convolve (v, x)
    EpiH,
    /// vertical epipolar: convolve (u, y)
    EpiV,
}

pub const PATTERNS: [Pattern; PATTERNS_PER_UNIT] =
    [Pattern::Spa, Pattern::Ang, Pattern::EpiH, Pattern::EpiV];

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Spa => "spa",
            Pattern::Ang => "ang",
            Pattern::EpiH => "epih",
            Pattern::EpiV => "epiv",
        }
    }

    /// Permutation taking the canonical (B, U, V, C, Y, X) layout to
    /// (fold..., C, d1, d2) with this pattern's axes last.
    fn perm(self) -> Option<([usize; 6], [usize; 6])> {
        match self {
            Pattern::Spa => None, // canonical order already folds directly
            Pattern::Ang => Some(([0, 4, 5, 3, 1, 2], [0, 4, 5, 3, 1, 2])),
            Pattern::EpiH => Some(([0, 1, 4, 3, 2, 5], [0, 1, 4, 3, 2, 5])),
            Pattern::EpiV => Some(([0, 2, 5, 3, 1, 4], [0, 4, 1, 3, 5, 2])),
        }
    }
}

/// Convolve one pattern's axis pair: permute the canonical block so the pair
/// is trailing, fold the three leading axes into the batch, run the 2-D
/// convolution, and undo the fold.
pub fn pattern_conv(x: &Tensor, conv: &Conv2d, pattern: Pattern) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 6, "pattern_conv expects the 6-axis canonical layout");
    match pattern.perm() {
        None => {
            let folded = x.reshape(&[s[0] * s[1] * s[2], s[3], s[4], s[5]]);
            conv.forward(&folded).reshape(&s)
        }
        Some((fwd, inv)) => {
            let p = x.permute(&fwd);
            let ps = p.shape().to_vec();
            let folded = p.reshape(&[ps[0] * ps[1] * ps[2], ps[3], ps[4], ps[5]]);
            let y = conv.forward(&folded);
            y.reshape(&ps).permute(&inv)
        }
    }
}

pub struct EmbedUnit {
    pub aggregate: Conv2d,            // 1x1, j*C -> C
    pub patterns: Vec<Conv2d>,        // four 3x3, C -> C, in PATTERNS order
    pub fuse: Conv2d,                 // 1x1, 4C -> C
    pub post: Conv2d,                 // 3x3, C -> C
}

pub struct PfeModule {
    pub in_ch: usize,
    pub channels: usize,
    pub embed: Conv2d, // 3x3, in_ch -> C
    pub units: Vec<EmbedUnit>,
    pub head: Conv2d, // 1x1, C -> 1
    pub gates: GateBank,
}

impl PfeModule {
    pub fn new(in_ch: usize, channels: usize, units: usize, rng: &mut ChaCha8Rng) -> PfeModule {
        let c = channels;
        let embed = Conv2d::new(in_ch, c, 3, 3, false, rng);
        let mut us = Vec::with_capacity(units);
        for j in 1..=units {
            us.push(EmbedUnit {
                aggregate: Conv2d::new(j * c, c, 1, 1, false, rng),
                patterns: (0..PATTERNS_PER_UNIT)
                    .map(|_| Conv2d::new(c, c, 3, 3, false, rng))
                    .collect(),
                fuse: Conv2d::new(PATTERNS_PER_UNIT * c, c, 1, 1, false, rng),
                post: Conv2d::new(c, c, 3, 3, false, rng),
            });
        }
        let head = Conv2d::new(c, 1, 1, 1, false, rng);
        let gates = GateBank::new(units, rng);
        PfeModule { in_ch, channels: c, embed, units: us, head, gates }
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// Trainable convolution weights, in a stable order.
    pub fn conv_params(&self) -> Vec<Tensor> {
        let mut out = self.embed.params();
        for u in &self.units {
            out.extend(u.aggregate.params());
            for p in &u.patterns {
                out.extend(p.params());
            }
            out.extend(u.fuse.params());
            out.extend(u.post.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn gate_params(&self) -> Vec<Tensor> {
        self.gates.params()
    }

    pub fn param_count(&self) -> usize {
        self.conv_params().iter().map(|t| t.len()).sum()
    }

    /// Map a per-view stack (B, U, V, in_ch, Y, X) to one value per ray
    /// (B, U, V, Y, X).
    pub fn forward(&self, x: &Tensor, ctx: &mut GateCtx) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 6, "module input must be (B, U, V, C, Y, X)");
        assert_eq!(s[3], self.in_ch, "per-view channel count");
        let (b, m, n, h, w) = (s[0], s[1], s[2], s[4], s[5]);
        let c = self.channels;
        let resolved = ResolvedGates::resolve(&self.gates, ctx);

        let folded = x.reshape(&[b * m * n, self.in_ch, h, w]);
        // features stay folded as (B*U*V, C, Y, X); index 0 is the embedding
        let mut feats: Vec<Tensor> = vec![self.embed.forward(&folded)];
        for (ji, unit) in self.units.iter().enumerate() {
            let (ugs, vgs) = &resolved.units[ji];
            let gathered: Vec<Tensor> = feats
                .iter()
                .zip(ugs)
                .map(|(f, g)| match g {
                    None => f.clone(),
                    Some(gate) => f.scale_by(gate),
                })
                .collect();
            let cat = if gathered.len() == 1 {
                gathered[0].clone()
            } else {
                Tensor::concat(&gathered, 1)
            };
            let agg = unit.aggregate.forward(&cat).relu();
            let canon = agg.reshape(&[b, m, n, c, h, w]);
            let mut branches: Vec<Tensor> = Vec::with_capacity(PATTERNS_PER_UNIT);
            for (pi, pattern) in PATTERNS.iter().enumerate() {
                let y = pattern_conv(&canon, &unit.patterns[pi], *pattern)
                    .reshape(&[b * m * n, c, h, w]);
                branches.push(match &vgs[pi] {
                    None => y,
                    Some(gate) => y.scale_by(gate),
                });
            }
            let fused = unit.fuse.forward(&Tensor::concat(&branches, 1)).relu();
            feats.push(unit.post.forward(&fused));
        }
        let y = self.head.forward(feats.last().unwrap());
        y.reshape(&[b, m, n, h, w])
    }
}

pub(crate) fn push_conv(ck: &mut Checkpoint, name: &str, conv: &Conv2d) {
    ck.push(name, conv.weight.shape(), conv.weight.to_vec());
}

/// Read a bias-free conv entry back, insisting on the expected kernel shape.
pub(crate) fn conv_from(ck: &Checkpoint, name: &str, want: &[usize]) -> Result<Conv2d> {
    let (shape, data) = ck.require(name)?;
    if shape != want {
        return Err(Error::format(format!(
            "checkpoint entry {} has shape {:?}, expected {:?}",
            name, shape, want
        )));
    }
    Ok(Conv2d { weight: Tensor::param(want, data.to_vec()), bias: None })
}

/// Write every weight and gate probability of `module` under `prefix.`.
pub fn push_module(ck: &mut Checkpoint, prefix: &str, m: &PfeModule) {
    push_conv(ck, &format!("{prefix}.embed"), &m.embed);
    for (ji, unit) in m.units.iter().enumerate() {
        let j = ji + 1;
        push_conv(ck, &format!("{prefix}.unit{j}.aggregate"), &unit.aggregate);
        for (pi, p) in PATTERNS.iter().enumerate() {
            push_conv(ck, &format!("{prefix}.unit{j}.{}", p.name()), &unit.patterns[pi]);
        }
        push_conv(ck, &format!("{prefix}.unit{j}.fuse"), &unit.fuse);
        push_conv(ck, &format!("{prefix}.unit{j}.post"), &unit.post);
        ck.push(&format!("{prefix}.gate.u{j}"), &[j], m.gates.u_probs(ji));
        ck.push(&format!("{prefix}.gate.v{j}"), &[PATTERNS_PER_UNIT], m.gates.v_probs(ji));
    }
    push_conv(ck, &format!("{prefix}.head"), &m.head);
}

/// Rebuild a module written by [`push_module`]; channel and unit counts are
/// recovered from entry shapes.
pub fn module_from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<PfeModule> {
    let (esh, _) = ck.require(&format!("{prefix}.embed"))?;
    if esh.len() != 4 || esh[2] != 3 || esh[3] != 3 {
        return Err(Error::format(format!(
            "checkpoint entry {prefix}.embed has shape {:?}, expected a 3x3 kernel",
            esh
        )));
    }
    let (c, in_ch) = (esh[0], esh[1]);
    let embed = conv_from(ck, &format!("{prefix}.embed"), &[c, in_ch, 3, 3])?;
    let mut units = Vec::new();
    let mut u_probs = Vec::new();
    let mut v_probs = Vec::new();
    let mut j = 1usize;
    while ck.get(&format!("{prefix}.unit{j}.aggregate")).is_some() {
        let base = format!("{prefix}.unit{j}");
        let aggregate = conv_from(ck, &format!("{base}.aggregate"), &[c, j * c, 1, 1])?;
        let patterns = PATTERNS
            .iter()
            .map(|p| conv_from(ck, &format!("{base}.{}", p.name()), &[c, c, 3, 3]))
            .collect::<Result<Vec<_>>>()?;
        let fuse =
            conv_from(ck, &format!("{base}.fuse"), &[c, PATTERNS_PER_UNIT * c, 1, 1])?;
        let post = conv_from(ck, &format!("{base}.post"), &[c, c, 3, 3])?;
        let (ush, ud) = ck.require(&format!("{prefix}.gate.u{j}"))?;
        let (vsh, vd) = ck.require(&format!("{prefix}.gate.v{j}"))?;
        if ush != [j] || vsh != [PATTERNS_PER_UNIT] {
            return Err(Error::format(format!(
                "gate entries for {base} have shapes {:?}/{:?}",
                ush, vsh
            )));
        }
        u_probs.push(ud.to_vec());
        v_probs.push(vd.to_vec());
        units.push(EmbedUnit { aggregate, patterns, fuse, post });
        j += 1;
    }
    let head = conv_from(ck, &format!("{prefix}.head"), &[1, c, 1, 1])?;
    let gates = GateBank::from_probs(u_probs, v_probs);
    Ok(PfeModule { in_ch, channels: c, embed, units, head, gates })
}
