//! Stochastic connection gates.
//!
//! Each candidate connection carries a probability parameter. During search
//! the forward pass multiplies the connection by a relaxed Bernoulli sample
//! (Gumbel-sigmoid); at derivation time probabilities are thresholded to
//! hard 0/1 masks. In template mode no gate ops are inserted at all.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// Probabilities are kept this far inside (0,1) when forming logits so the
/// relaxation never saturates to infinities.
pub const PROB_MARGIN: f64 = 1e-4;

/// One standard Gumbel variate, clamped away from the distribution's tails.
pub fn sample_gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let r: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-r.ln()).ln()
}

/// Relaxed Bernoulli gate: sigmoid((logit(p) + g1 - g2) / tau) for fixed
/// Gumbel noise. Differentiable in the probability parameter `p` (a scalar
/// tensor); outside the margin the clamp freezes the gradient at zero.
pub fn gumbel_gate(p: &Tensor, g1: f64, g2: f64, tau: f64) -> Tensor {
    assert_eq!(p.len(), 1, "gate probability must be a scalar tensor");
    assert!(tau > 0.0, "temperature must be positive");
    let pv = p.item() as f64;
    let pc = pv.clamp(PROB_MARGIN, 1.0 - PROB_MARGIN);
    let z = ((pc / (1.0 - pc)).ln() + g1 - g2) / tau;
    let y = 1.0 / (1.0 + (-z).exp());
    Tensor::from_op(vec![1], vec![y as f32], vec![p.clone()], move |node| {
        let g = node.grad().borrow().as_deref().unwrap()[0];
        let parent = &node.parents()[0];
        if !parent.is_param() {
            return;
        }
        let pv = parent.item() as f64;
        if !(PROB_MARGIN..=1.0 - PROB_MARGIN).contains(&pv) {
            return; // clamped: no gradient
        }
        let y = node.values_ref().borrow()[0] as f64;
        let dy_dp = y * (1.0 - y) / (tau * pv * (1.0 - pv));
        let mut pg = parent.grad_buf();
        pg[0] += (g as f64 * dy_dp) as f32;
    })
}

/// Search temperature under explicit endpoints: linear anneal from `start`
/// down to `end` across the first 40% of the run, constant afterwards.
pub fn temperature_between(start: f64, end: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    start - (start - end) * (p / 0.4).min(1.0)
}

/// Search temperature at training progress in [0, 1] under the default
/// 1.0 -> 0.05 schedule.
pub fn temperature(progress: f64) -> f64 {
    temperature_between(1.0, 0.05, progress)
}

/// How the forward pass treats connection gates.
pub enum GateCtx<'a> {
    /// No gate ops: the dense template network.
    Template,
    /// One fresh relaxed-Bernoulli sample per gate per forward.
    Sampled { tau: f64, rng: &'a mut ChaCha8Rng },
    /// Deterministic 0/1 masks: probability >= 0.5 keeps the connection.
    Hard,
}

/// Gate probabilities for one embedding module: unit `j` (1-based) has `j`
/// input gates (embed output plus every earlier unit) and one gate per
/// pattern branch.
pub struct GateBank {
    pub units: Vec<UnitGates>,
}

pub struct UnitGates {
    pub u: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub const PATTERNS_PER_UNIT: usize = 4;

impl GateBank {
    /// Fresh probabilities drawn uniformly from [0.3, 0.7].
    pub fn new(units: usize, rng: &mut ChaCha8Rng) -> GateBank {
        let mut out = Vec::with_capacity(units);
        for j in 1..=units {
            let u = (0..j)
                .map(|_| Tensor::param(&[1], vec![rng.random_range(0.3f32..0.7)]))
                .collect();
            let v = (0..PATTERNS_PER_UNIT)
                .map(|_| Tensor::param(&[1], vec![rng.random_range(0.3f32..0.7)]))
                .collect();
            out.push(UnitGates { u, v });
        }
        GateBank { units: out }
    }

    /// Bank with every probability fixed (used when loading checkpoints).
    pub fn from_probs(u: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> GateBank {
        assert_eq!(u.len(), v.len());
        let units = u
            .into_iter()
            .zip(v)
            .enumerate()
            .map(|(idx, (uj, vj))| {
                assert_eq!(uj.len(), idx + 1, "unit {} input gate count", idx + 1);
                assert_eq!(vj.len(), PATTERNS_PER_UNIT);
                UnitGates {
                    u: uj.into_iter().map(|p| Tensor::param(&[1], vec![p])).collect(),
                    v: vj.into_iter().map(|p| Tensor::param(&[1], vec![p])).collect(),
                }
            })
            .collect();
        GateBank { units }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for ug in &self.units {
            out.extend(ug.u.iter().cloned());
            out.extend(ug.v.iter().cloned());
        }
        out
    }

    /// Project probabilities back into [0, 1] after an optimizer step.
    pub fn clip(&self) {
        for p in self.params() {
            p.clamp_values(0.0, 1.0);
        }
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// Threshold at 0.5; exact ties keep the connection.
    pub fn hard_u(&self, unit: usize, input: usize) -> bool {
        self.units[unit].u[input].item() >= 0.5
    }

    pub fn hard_v(&self, unit: usize, pattern: usize) -> bool {
        self.units[unit].v[pattern].item() >= 0.5
    }

    pub fn u_probs(&self, unit: usize) -> Vec<f32> {
        self.units[unit].u.iter().map(|t| t.item()).collect()
    }

    pub fn v_probs(&self, unit: usize) -> Vec<f32> {
        self.units[unit].v.iter().map(|t| t.item()).collect()
    }
}

/// Gate multipliers resolved for one forward pass, sampled in a fixed order
/// (units ascending, input gates before pattern gates) so a seeded run is
/// reproducible no matter how the values are consumed later.
pub struct ResolvedGates {
    pub units: Vec<(Vec<Option<Tensor>>, Vec<Option<Tensor>>)>,
}

impl ResolvedGates {
    pub fn resolve(bank: &GateBank, ctx: &mut GateCtx) -> ResolvedGates {
        let mut units = Vec::with_capacity(bank.units.len());
        for ug in &bank.units {
            let mut u: Vec<Option<Tensor>> = Vec::with_capacity(ug.u.len());
            for p in &ug.u {
                u.push(resolve_one(p, ctx));
            }
            let mut v: Vec<Option<Tensor>> = Vec::with_capacity(ug.v.len());
            for p in &ug.v {
                v.push(resolve_one(p, ctx));
            }
            units.push((u, v));
        }
        ResolvedGates { units }
    }
}

fn resolve_one(p: &Tensor, ctx: &mut GateCtx) -> Option<Tensor> {
    match ctx {
        GateCtx::Template => None,
        GateCtx::Sampled { tau, rng } => {
            let g1 = sample_gumbel(rng);
            let g2 = sample_gumbel(rng);
            Some(gumbel_gate(p, g1, g2, *tau))
        }
        GateCtx::Hard => {
            let keep = p.item() >= 0.5;
            Some(Tensor::scalar(if keep { 1.0 } else { 0.0 }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check, FdOpts};
    use rand::SeedableRng;

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let opts = FdOpts { h: 1e-3, tol_rel: 1e-3, tol_abs: 5e-5 };
        for &pv in &[0.15f32, 0.35, 0.5, 0.65, 0.85] {
            let p = Tensor::param(&[1], vec![pv]);
            let g1 = sample_gumbel(&mut rng);
            let g2 = sample_gumbel(&mut rng);
            for &tau in &[0.5, 1.0, 3.0] {
                let f = || gumbel_gate(&p, g1, g2, tau).mean();
                check(&[&p], &f, &opts).unwrap();
            }
        }
    }

    #[test]
    fn clamped_probabilities_get_no_gradient() {
        for pv in [0.0f32, 1.0] {
            let p = Tensor::param(&[1], vec![pv]);
            let y = gumbel_gate(&p, 0.3, -0.2, 1.0);
            y.mean().backward();
            let g = p.grad();
            assert!(
                g.clone().is_none_or(|g| g == vec![0.0]),
                "saturated gate leaked gradient {:?}",
                g
            );
        }
    }

    #[test]
    fn cold_gates_behave_like_bernoulli_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for &pv in &[0.2f32, 0.5, 0.7] {
            let p = Tensor::param(&[1], vec![pv]);
            let n = 20_000;
            let mut keep = 0usize;
            for _ in 0..n {
                let g1 = sample_gumbel(&mut rng);
                let g2 = sample_gumbel(&mut rng);
                if gumbel_gate(&p, g1, g2, 0.05).item() > 0.5 {
                    keep += 1;
                }
            }
            let mean = keep as f64 / n as f64;
            assert!(
                (mean - pv as f64).abs() < 0.02,
                "p={} hard-thresholded mean {}",
                pv,
                mean
            );
        }
    }

    #[test]
    fn temperature_controls_sample_sharpness() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let p = Tensor::param(&[1], vec![0.5]);
        let frac_soft = |tau: f64, rng: &mut ChaCha8Rng| {
            let n = 5_000;
            let mut soft = 0usize;
            for _ in 0..n {
                let g1 = sample_gumbel(rng);
                let g2 = sample_gumbel(rng);
                let y = gumbel_gate(&p, g1, g2, tau).item();
                if 0.2 < y && y < 0.8 {
                    soft += 1;
                }
            }
            soft as f64 / n as f64
        };
        assert!(frac_soft(0.05, &mut rng) < 0.05, "cold samples must saturate");
        assert!(frac_soft(5.0, &mut rng) > 0.5, "hot samples must stay soft");
    }

    #[test]
    fn temperature_schedule_hits_pinned_values() {
        assert!((temperature(0.0) - 1.0).abs() < 1e-12);
        assert!((temperature(0.2) - 0.525).abs() < 1e-12);
        assert!((temperature(0.4) - 0.05).abs() < 1e-12);
        assert!((temperature(0.7) - 0.05).abs() < 1e-12);
        assert!((temperature(1.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn hard_mode_thresholds_at_half_and_keeps_ties() {
        let bank = GateBank::from_probs(
            vec![vec![0.49], vec![0.5, 0.51]],
            vec![vec![0.1, 0.5, 0.9, 0.499]; 2],
        );
        assert!(!bank.hard_u(0, 0));
        assert!(bank.hard_u(1, 0), "exact 0.5 keeps the connection");
        assert!(bank.hard_u(1, 1));
        assert!(!bank.hard_v(0, 0));
        assert!(bank.hard_v(0, 1));
        assert!(bank.hard_v(0, 2));
        assert!(!bank.hard_v(0, 3));
    }

    #[test]
    fn sampled_resolution_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(53);
        let bank = GateBank::new(3, &mut r1);
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = GateCtx::Sampled { tau: 0.7, rng: &mut rng };
            let rg = ResolvedGates::resolve(&bank, &mut ctx);
            rg.units
                .iter()
                .flat_map(|(u, v)| u.iter().chain(v).map(|t| t.as_ref().unwrap().item()))
                .collect::<Vec<f32>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn gate_probabilities_initialize_inside_the_search_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let bank = GateBank::new(6, &mut rng);
        assert_eq!(bank.units[5].u.len(), 6);
        for p in bank.params() {
            let v = p.item();
            assert!((0.3..=0.7).contains(&v), "init {} outside [0.3, 0.7]", v);
        }
    }
}
