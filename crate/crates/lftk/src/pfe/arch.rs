//! Deriving a compact architecture from trained gate probabilities.
//!
//! Thresholding the gate bank gives hard connection masks. A unit whose
//! surviving inputs are all zero maps, or whose pattern branches are all
//! closed, emits an exact zero map itself, so deadness propagates forward in
//! one ascending sweep. Walking backwards from the output head then marks
//! which live units are actually consumed. The pruned module drops
//! everything else and slices the aggregate/fuse kernels down to the
//! surviving channel blocks, which reproduces the hard-masked forward pass
//! bit for bit: masked channels only ever contribute exact zeros to the f64
//! accumulators.

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::nn::Conv2d;
use crate::autodiff::Tensor;
use crate::{Error, Result};

use super::gates::{GateBank, PATTERNS_PER_UNIT};
use super::{conv_from, pattern_conv, push_conv, Pattern, PfeModule, PATTERNS};

/// Hard 0/1 connection masks for one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchMasks {
    /// per unit: one flag per input (embed output, then earlier units)
    pub u: Vec<Vec<bool>>,
    /// per unit: one flag per pattern branch, in `PATTERNS` order
    pub v: Vec<Vec<bool>>,
}

impl ArchMasks {
    /// Threshold probabilities at 0.5 (ties keep the connection).
    pub fn from_bank(bank: &GateBank) -> ArchMasks {
        let units = bank.unit_count();
        ArchMasks {
            u: (0..units)
                .map(|j| (0..=j).map(|i| bank.hard_u(j, i)).collect())
                .collect(),
            v: (0..units)
                .map(|j| (0..PATTERNS_PER_UNIT).map(|p| bank.hard_v(j, p)).collect())
                .collect(),
        }
    }

    /// All connections open (the template network's wiring).
    pub fn all_open(units: usize) -> ArchMasks {
        ArchMasks {
            u: (1..=units).map(|j| vec![true; j]).collect(),
            v: vec![vec![true; PATTERNS_PER_UNIT]; units],
        }
    }

    pub fn unit_count(&self) -> usize {
        self.u.len()
    }

    pub fn to_floats(&self) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let enc = |m: &Vec<Vec<bool>>|
            m.iter()
                .map(|row| row.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect();
        (enc(&self.u), enc(&self.v))
    }

    pub fn from_floats(u: &[Vec<f32>], v: &[Vec<f32>]) -> ArchMasks {
        let dec = |m: &[Vec<f32>]| {
            m.iter()
                .map(|row| row.iter().map(|&x| x >= 0.5).collect())
                .collect()
        };
        ArchMasks { u: dec(u), v: dec(v) }
    }
}

/// Liveness and use analysis over hard masks. Feature slots are numbered
/// 0 (the embedding) through `units` (each unit's output).
#[derive(Debug)]
pub struct DerivedArch {
    pub masks: ArchMasks,
    /// slot emits a non-trivial map (slot 0 always does)
    pub live: Vec<bool>,
    /// slot is consumed on the path to the head
    pub needed: Vec<bool>,
    /// per unit: surviving input slots (mask open and source live)
    pub kept_inputs: Vec<Vec<usize>>,
    /// per unit: surviving pattern branch indices
    pub kept_patterns: Vec<Vec<usize>>,
}

pub fn derive(masks: &ArchMasks) -> DerivedArch {
    let units = masks.unit_count();
    let mut live = vec![false; units + 1];
    live[0] = true;
    let mut kept_inputs: Vec<Vec<usize>> = Vec::with_capacity(units);
    let mut kept_patterns: Vec<Vec<usize>> = Vec::with_capacity(units);
    for j in 0..units {
        let inputs: Vec<usize> =
            (0..=j).filter(|&i| masks.u[j][i] && live[i]).collect();
        let patterns: Vec<usize> =
            (0..PATTERNS_PER_UNIT).filter(|&p| masks.v[j][p]).collect();
        live[j + 1] = !inputs.is_empty() && !patterns.is_empty();
        kept_inputs.push(inputs);
        kept_patterns.push(patterns);
    }
    let mut needed = vec![false; units + 1];
    if units > 0 {
        // the head reads only the last unit's slot
        needed[units] = true;
        for j in (0..units).rev() {
            if needed[j + 1] && live[j + 1] {
                for &i in &kept_inputs[j] {
                    needed[i] = true;
                }
            }
        }
    } else {
        needed[0] = true;
    }
    DerivedArch { masks: masks.clone(), live, needed, kept_inputs, kept_patterns }
}

impl DerivedArch {
    pub fn unit_count(&self) -> usize {
        self.masks.unit_count()
    }

    /// Units the pruned module actually computes, ascending.
    pub fn retained_units(&self) -> Vec<usize> {
        (0..self.unit_count())
            .filter(|&j| self.live[j + 1] && self.needed[j + 1])
            .collect()
    }
}

/// Slice the listed channel blocks (each `c` wide) out of a 1x1 kernel.
fn slice_blocks(weight: &Tensor, c: usize, blocks: &[usize]) -> Vec<f32> {
    let shape = weight.shape().to_vec();
    let (out_ch, in_ch) = (shape[0], shape[1]);
    assert_eq!(shape[2] * shape[3], 1, "block slicing expects 1x1 kernels");
    let wv = weight.values();
    let mut out = Vec::with_capacity(out_ch * blocks.len() * c);
    for o in 0..out_ch {
        for &b in blocks {
            let start = o * in_ch + b * c;
            out.extend_from_slice(&wv[start..start + c]);
        }
    }
    out
}

pub struct PrunedUnit {
    /// original unit index, 0-based
    pub index: usize,
    /// consumed feature slots, ascending
    pub inputs: Vec<usize>,
    pub aggregate: Conv2d,
    pub patterns: Vec<(Pattern, Conv2d)>,
    pub fuse: Conv2d,
    pub post: Conv2d,
}

/// Inference-only module with dead units and closed connections removed.
pub struct PrunedPfe {
    pub in_ch: usize,
    pub channels: usize,
    pub embed: Conv2d,
    pub units: Vec<PrunedUnit>,
    pub head: Conv2d,
    /// feature slot feeding the head; None when the last unit is dead and
    /// the module's output is the zero map
    pub out_slot: Option<usize>,
}

pub fn prune(module: &PfeModule, masks: &ArchMasks) -> PrunedPfe {
    assert_eq!(masks.unit_count(), module.unit_count());
    let arch = derive(masks);
    let c = module.channels;
    let fixed = |t: &Tensor| {
        let s = t.shape();
        Conv2d::fixed(s[0], s[1], s[2], s[3], t.to_vec())
    };
    let units: Vec<PrunedUnit> = arch
        .retained_units()
        .into_iter()
        .map(|j| {
            let unit = &module.units[j];
            let inputs = arch.kept_inputs[j].clone();
            let agg_w = slice_blocks(&unit.aggregate.weight, c, &inputs);
            let aggregate = Conv2d::fixed(c, inputs.len() * c, 1, 1, agg_w);
            let patterns: Vec<(Pattern, Conv2d)> = arch.kept_patterns[j]
                .iter()
                .map(|&p| (PATTERNS[p], fixed(&unit.patterns[p].weight)))
                .collect();
            let fuse_w = slice_blocks(&unit.fuse.weight, c, &arch.kept_patterns[j]);
            let fuse = Conv2d::fixed(c, patterns.len() * c, 1, 1, fuse_w);
            PrunedUnit {
                index: j,
                inputs,
                aggregate,
                patterns,
                fuse,
                post: fixed(&unit.post.weight),
            }
        })
        .collect();
    let last = module.unit_count();
    let out_slot = (arch.live[last]).then_some(last);
    PrunedPfe {
        in_ch: module.in_ch,
        channels: c,
        embed: fixed(&module.embed.weight),
        units,
        head: fixed(&module.head.weight),
        out_slot,
    }
}

impl PrunedPfe {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 6, "module input must be (B, U, V, C, Y, X)");
        assert_eq!(s[3], self.in_ch, "per-view channel count");
        let (b, m, n, h, w) = (s[0], s[1], s[2], s[4], s[5]);
        let c = self.channels;
        let out_shape = [b, m, n, h, w];
        let slot_needed = match self.out_slot {
            Some(slot) => slot,
            None => return Tensor::zeros(&out_shape),
        };
        let folded = x.reshape(&[b * m * n, self.in_ch, h, w]);
        let mut feats: Vec<Option<Tensor>> = vec![None; slot_needed + 1];
        feats[0] = Some(self.embed.forward(&folded));
        for unit in &self.units {
            let gathered: Vec<Tensor> = unit
                .inputs
                .iter()
                .map(|&i| feats[i].clone().expect("pruned units arrive in order"))
                .collect();
            let cat = if gathered.len() == 1 {
                gathered[0].clone()
            } else {
                Tensor::concat(&gathered, 1)
            };
            let agg = unit.aggregate.forward(&cat).relu();
            let canon = agg.reshape(&[b, m, n, c, h, w]);
            let branches: Vec<Tensor> = unit
                .patterns
                .iter()
                .map(|(p, conv)| {
                    pattern_conv(&canon, conv, *p).reshape(&[b * m * n, c, h, w])
                })
                .collect();
            let fused = unit.fuse.forward(&Tensor::concat(&branches, 1)).relu();
            feats[unit.index + 1] = Some(unit.post.forward(&fused));
        }
        let top = feats[slot_needed].clone().expect("output slot was computed");
        self.head.forward(&top).reshape(&out_shape)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.embed.param_count() + self.head.param_count();
        for u in &self.units {
            n += u.aggregate.param_count()
                + u.patterns.iter().map(|(_, c)| c.param_count()).sum::<usize>()
                + u.fuse.param_count()
                + u.post.param_count();
        }
        n
    }
}

/// Write a pruned module plus its masks under `prefix.`. Only retained
/// units' sliced kernels are stored; the masks carry enough structure to
/// rebuild the wiring.
pub fn push_pruned_module(ck: &mut Checkpoint, prefix: &str, m: &PrunedPfe, masks: &ArchMasks) {
    let (uf, vf) = masks.to_floats();
    for (ji, row) in uf.iter().enumerate() {
        ck.push(&format!("{prefix}.mask.u{}", ji + 1), &[row.len()], row.clone());
    }
    for (ji, row) in vf.iter().enumerate() {
        ck.push(&format!("{prefix}.mask.v{}", ji + 1), &[row.len()], row.clone());
    }
    push_conv(ck, &format!("{prefix}.embed"), &m.embed);
    for unit in &m.units {
        let base = format!("{prefix}.unit{}", unit.index + 1);
        push_conv(ck, &format!("{base}.aggregate"), &unit.aggregate);
        for (p, conv) in &unit.patterns {
            push_conv(ck, &format!("{base}.{}", p.name()), conv);
        }
        push_conv(ck, &format!("{base}.fuse"), &unit.fuse);
        push_conv(ck, &format!("{base}.post"), &unit.post);
    }
    push_conv(ck, &format!("{prefix}.head"), &m.head);
}

/// Rebuild a module written by [`push_pruned_module`]: masks first, then the
/// retained kernels the re-derived wiring says must exist.
pub fn pruned_module_from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<PrunedPfe> {
    let mut u = Vec::new();
    while let Some((sh, d)) = ck.get(&format!("{prefix}.mask.u{}", u.len() + 1)) {
        if sh != [u.len() + 1] {
            return Err(Error::format(format!(
                "mask entry {prefix}.mask.u{} has shape {:?}",
                u.len() + 1,
                sh
            )));
        }
        u.push(d.to_vec());
    }
    let mut v = Vec::new();
    while let Some((sh, d)) = ck.get(&format!("{prefix}.mask.v{}", v.len() + 1)) {
        if sh != [PATTERNS_PER_UNIT] {
            return Err(Error::format(format!(
                "mask entry {prefix}.mask.v{} has shape {:?}",
                v.len() + 1,
                sh
            )));
        }
        v.push(d.to_vec());
    }
    if u.len() != v.len() {
        return Err(Error::format(format!(
            "{prefix} stores {} path masks but {} pattern masks",
            u.len(),
            v.len()
        )));
    }
    let masks = ArchMasks::from_floats(&u, &v);
    let arch = derive(&masks);

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
    for j in arch.retained_units() {
        let base = format!("{prefix}.unit{}", j + 1);
        let inputs = arch.kept_inputs[j].clone();
        let aggregate =
            conv_from(ck, &format!("{base}.aggregate"), &[c, inputs.len() * c, 1, 1])?;
        let patterns = arch.kept_patterns[j]
            .iter()
            .map(|&p| {
                conv_from(ck, &format!("{base}.{}", PATTERNS[p].name()), &[c, c, 3, 3])
                    .map(|conv| (PATTERNS[p], conv))
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse =
            conv_from(ck, &format!("{base}.fuse"), &[c, patterns.len() * c, 1, 1])?;
        let post = conv_from(ck, &format!("{base}.post"), &[c, c, 3, 3])?;
        units.push(PrunedUnit { index: j, inputs, aggregate, patterns, fuse, post });
    }
    let head = conv_from(ck, &format!("{prefix}.head"), &[1, c, 1, 1])?;
    let last = masks.unit_count();
    let out_slot = (arch.live[last]).then_some(last);
    Ok(PrunedPfe { in_ch, channels: c, embed, units, head, out_slot })
}

/// Closed-form weight count of the dense template with `units` units.
pub fn template_param_count(in_ch: usize, c: usize, units: usize) -> usize {
    let embed = 9 * in_ch * c;
    let head = c;
    let mut total = embed + head;
    for j in 1..=units {
        total += j * c * c; // aggregate 1x1
        total += PATTERNS_PER_UNIT * 9 * c * c; // pattern 3x3s
        total += PATTERNS_PER_UNIT * c * c; // fuse 1x1
        total += 9 * c * c; // post 3x3
    }
    total
}

/// Human-readable derivation summary for one module.
pub struct UnitSummary {
    pub index: usize,
    pub live: bool,
    pub needed: bool,
    pub inputs: Vec<usize>,
    pub patterns: Vec<&'static str>,
}

pub struct ArchSummary {
    pub units: Vec<UnitSummary>,
    pub retained_units: usize,
    pub template_params: usize,
    pub pruned_params: usize,
}

pub fn summarize(module: &PfeModule, masks: &ArchMasks) -> ArchSummary {
    let arch = derive(masks);
    let pruned = prune(module, masks);
    let units = (0..module.unit_count())
        .map(|j| UnitSummary {
            index: j,
            live: arch.live[j + 1],
            needed: arch.needed[j + 1],
            inputs: arch.kept_inputs[j].clone(),
            patterns: arch.kept_patterns[j].iter().map(|&p| PATTERNS[p].name()).collect(),
        })
        .collect();
    ArchSummary {
        units,
        retained_units: pruned.units.len(),
        template_params: module.param_count(),
        pruned_params: pruned.param_count(),
    }
}
