//! Efficient allocations and KL-regularized generation distributions.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instance::{simplex_lattice, Instance, OutcomeSpace, Point};

/// Relative tolerance under which two objective values count as tied.
const TIE_TOL: f64 = 1e-12;

/// Scenario-registered closed-form efficient allocation.
pub trait ClosedForm: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Maximizer of `Σ_{i∈agents} v_i(x, θ_i, ·)` under the given posterior.
    fn allocate(&self, instance: &Instance, agents: &[usize], types: &[&[f64]], posterior: &[f64])
        -> Point;
}

/// Reference generation distribution `x_0(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceRule {
    /// The same reference for every signal profile.
    Constant(Point),
}

impl ReferenceRule {
    pub fn at(&self, _agents: &[usize], _signals: &[usize]) -> &[f64] {
        match self {
            ReferenceRule::Constant(p) => p,
        }
    }
}

/// `Σ v_i(x) − α·KL(x ‖ x_0(s))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlObjective {
    pub alpha: f64,
    pub reference: ReferenceRule,
}

#[derive(Debug, Clone)]
pub enum AllocationMode {
    /// Exhaustive search over the outcome candidates.
    GridArgmax,
    /// The instance's registered closed form.
    ClosedForm,
    /// Softmax-tilted reference distribution.
    KlClosedForm(KlObjective),
}

/// How an instance picks `x*(θ, s)`. Ties go to the lowest candidate index.
#[derive(Debug, Clone)]
pub struct AllocationRule {
    pub mode: AllocationMode,
}

impl AllocationRule {
    pub fn grid_argmax() -> Self {
        AllocationRule { mode: AllocationMode::GridArgmax }
    }

    pub fn closed_form() -> Self {
        AllocationRule { mode: AllocationMode::ClosedForm }
    }

    pub fn kl(objective: KlObjective) -> Self {
        AllocationRule { mode: AllocationMode::KlClosedForm(objective) }
    }

    pub fn kl_objective(&self) -> Option<&KlObjective> {
        match &self.mode {
            AllocationMode::KlClosedForm(obj) => Some(obj),
            _ => None,
        }
    }
}

/// `x*(θ, s)` for the full agent set.
pub fn efficient_allocation(instance: &Instance, types: &[usize], signals: &[usize]) -> Result<Point> {
    let agents: Vec<usize> = (0..instance.n()).collect();
    efficient_allocation_for(instance, &agents, types, signals)
}

/// `x*(θ_A, s_A)` for the sub-instance of agents `A`, with the same outcome
/// space and the posterior conditioned on the signals of `A` only.
pub fn efficient_allocation_for(
    instance: &Instance,
    agents: &[usize],
    types: &[usize],
    signals: &[usize],
) -> Result<Point> {
    let post = if agents.len() == instance.n() {
        instance.posterior_full(signals)?.to_vec()
    } else {
        instance.posterior_given(agents, signals)?
    };
    let values = instance.type_values(types);
    allocate(instance, agents, &values, &post, signals)
}

/// Allocation under an explicit posterior.
pub fn allocate(
    instance: &Instance,
    agents: &[usize],
    types: &[&[f64]],
    posterior: &[f64],
    signals: &[usize],
) -> Result<Point> {
    match &instance.allocation.mode {
        AllocationMode::GridArgmax => {
            let candidates = instance.outcomes.candidates();
            let welfare: Vec<f64> = candidates
                .iter()
                .map(|x| social_value(instance, agents, x, types, posterior))
                .collect();
            let k = argmax_lowest(&welfare).ok_or(Error::EmptyOutcomeSpace)?;
            Ok(candidates[k].clone())
        }
        AllocationMode::ClosedForm => {
            let cf = instance
                .closed_form
                .as_ref()
                .ok_or_else(|| Error::NoClosedForm(instance.name.clone()))?;
            Ok(cf.allocate(instance, agents, types, posterior))
        }
        AllocationMode::KlClosedForm(obj) => {
            let rewards = token_rewards(instance, agents, types, posterior)?;
            let (x, _) = kl_regularized_distribution(&rewards, obj.reference.at(agents, signals), obj.alpha)?;
            Ok(x)
        }
    }
}

/// `Σ_{i∈agents} v_i(x, θ_i, ·)` under `posterior`.
pub fn social_value(
    instance: &Instance,
    agents: &[usize],
    x: &[f64],
    types: &[&[f64]],
    posterior: &[f64],
) -> f64 {
    agents
        .iter()
        .map(|&i| instance.expected_payoff(i, x, types, posterior))
        .sum()
}

/// Aggregate expected reward per token, `R(t) = Σ_i v_i(e_t, θ_i, ·)`. Valid
/// because token payoffs are linear in the generation distribution.
pub fn token_rewards(
    instance: &Instance,
    agents: &[usize],
    types: &[&[f64]],
    posterior: &[f64],
) -> Result<Vec<f64>> {
    let OutcomeSpace::Simplex { tokens, .. } = instance.outcomes else {
        return Err(Error::UnsupportedScenario(instance.name.clone()));
    };
    Ok((0..tokens)
        .map(|t| {
            let mut e = vec![0.0; tokens];
            e[t] = 1.0;
            social_value(instance, agents, &e, types, posterior)
        })
        .collect())
}

/// First index attaining the maximum (within a relative tie tolerance).
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    let tol = TIE_TOL * (1.0 + best.abs());
    values.iter().position(|&v| v >= best - tol)
}

/// `Σv(grid argmax) − Σv(closed form)`, never positive when the closed form is
/// a true maximizer. Bounds the welfare lost to the outcome grid.
pub fn grid_vs_closed_form_gap(instance: &Instance, types: &[usize], signals: &[usize]) -> Result<f64> {
    let cf = instance
        .closed_form
        .as_ref()
        .ok_or_else(|| Error::NoClosedForm(instance.name.clone()))?;
    let agents: Vec<usize> = (0..instance.n()).collect();
    let post = instance.posterior_full(signals)?;
    let values = instance.type_values(types);
    let welfare: Vec<f64> = instance
        .outcomes
        .candidates()
        .iter()
        .map(|x| social_value(instance, &agents, x, &values, post))
        .collect();
    let k = argmax_lowest(&welfare).ok_or(Error::EmptyOutcomeSpace)?;
    let exact = cf.allocate(instance, &agents, &values, post);
    Ok(welfare[k] - social_value(instance, &agents, &exact, &values, post))
}

/// `x*(t) ∝ x_0(t)·exp(R(t)/α)`, returned with `log Z` where
/// `Z = Σ_t x_0(t)·exp(R(t)/α)`. Computed in log-sum-exp form.
pub fn kl_regularized_distribution(rewards: &[f64], reference: &[f64], alpha: f64) -> Result<(Point, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    if rewards.len() != reference.len() || rewards.is_empty() {
        return Err(Error::InvalidInstance("rewards and reference differ in length".into()));
    }
    if let Some(t) = reference.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::ZeroReferenceMass(t));
    }
    let logits: Vec<f64> = rewards
        .iter()
        .zip(reference)
        .map(|(r, p)| p.ln() + r / alpha)
        .collect();
    let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
    let total: f64 = weights.iter().sum();
    let x = weights.iter().map(|w| w / total).collect();
    Ok((x, shift + total.ln()))
}

/// `KL(x ‖ x_0)`.
pub fn kl_divergence(x: &[f64], reference: &[f64]) -> Result<f64> {
    let mut d = 0.0;
    for (t, (&p, &q)) in x.iter().zip(reference).enumerate() {
        if p > 0.0 {
            if !(q > 0.0) {
                return Err(Error::DivergenceUndefined(t));
            }
            d += p * (p / q).ln();
        }
    }
    Ok(d)
}

/// `Σ_t R(t)x(t) − α·KL(x ‖ x_0)`.
pub fn regularized_objective_value(rewards: &[f64], x: &[f64], reference: &[f64], alpha: f64) -> Result<f64> {
    let linear: f64 = rewards.iter().zip(x).map(|(r, p)| r * p).sum();
    Ok(linear - alpha * kl_divergence(x, reference)?)
}

/// Brute-force maximizer of the regularized objective over the simplex
/// lattice with spacing `1/resolution`. Desk-scale verification only.
pub fn brute_force_regularized(
    rewards: &[f64],
    reference: &[f64],
    alpha: f64,
    resolution: usize,
) -> Result<(Point, f64)> {
    let mut best: Option<(Point, f64)> = None;
    for x in simplex_lattice(rewards.len(), resolution) {
        let v = regularized_objective_value(rewards, &x, reference, alpha)?;
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((x, v));
        }
    }
    best.ok_or(Error::EmptyOutcomeSpace)
}

/// Shared handle type for closed forms.
pub type ClosedFormRef = Arc<dyn ClosedForm>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn constant_rewards_return_reference() {
        let x0 = [0.2, 0.5, 0.3];
        let (x, log_z) = kl_regularized_distribution(&[4.0, 4.0, 4.0], &x0, 0.7).unwrap();
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((log_z - 4.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn two_token_worked_example() {
        let (x, log_z) = kl_regularized_distribution(&[1.0, 0.0], &[0.5, 0.5], 1.0).unwrap();
        assert!((x[0] - E / (E + 1.0)).abs() < 1e-15);
        assert!((x[0] - 0.731_06).abs() < 1e-5);
        assert!((log_z.exp() - 1.859_14).abs() < 1e-5);
        assert!((log_z - 0.620_11).abs() < 1e-5);

        // brute force at spacing 1e-4 agrees within 1e-3
        let (bf, _) = brute_force_regularized(&[1.0, 0.0], &[0.5, 0.5], 1.0, 10_000).unwrap();
        assert!((bf[0] - x[0]).abs() < 1e-3);
    }

    #[test]
    fn large_alpha_stays_at_reference() {
        let x0 = [0.1, 0.6, 0.3];
        let (x, _) = kl_regularized_distribution(&[1.0, -2.0, 0.5], &x0, 1e6).unwrap();
        let l1: f64 = x.iter().zip(&x0).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 1e-5, "l1 = {l1}");
    }

    #[test]
    fn maximized_value_is_alpha_log_z() {
        let rewards = [1.0, 0.0];
        let (x, log_z) = kl_regularized_distribution(&rewards, &[0.5, 0.5], 1.0).unwrap();
        let v = regularized_objective_value(&rewards, &x, &[0.5, 0.5], 1.0).unwrap();
        assert!((v - log_z).abs() < 1e-9);
        let at_ref = regularized_objective_value(&rewards, &[0.5, 0.5], &[0.5, 0.5], 1.0).unwrap();
        assert!((at_ref - 0.5).abs() < 1e-15);
    }

    #[test]
    fn error_paths() {
        assert_eq!(
            kl_regularized_distribution(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap_err(),
            Error::ZeroReferenceMass(1)
        );
        assert_eq!(
            kl_regularized_distribution(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap_err(),
            Error::NonPositiveAlpha(0.0)
        );
        assert_eq!(
            regularized_objective_value(&[1.0, 0.0], &[0.5, 0.5], &[1.0, 0.0], 1.0).unwrap_err(),
            Error::DivergenceUndefined(1)
        );
    }

    #[test]
    fn small_alpha_does_not_overflow() {
        let (x, log_z) = kl_regularized_distribution(&[1000.0, 999.0], &[0.5, 0.5], 1e-3).unwrap();
        assert!(x.iter().all(|p| p.is_finite()));
        assert!(log_z.is_finite());
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_beats_random_simplex_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rewards: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let x0: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let alpha = rng.gen_range(0.1..3.0);
            let (x, _) = kl_regularized_distribution(&rewards, &x0, alpha).unwrap();
            let best = regularized_objective_value(&rewards, &x, &x0, alpha).unwrap();
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..4).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
                let s: f64 = raw.iter().sum();
                let y: Vec<f64> = raw.iter().map(|v| v / s).collect();
                assert!(regularized_objective_value(&rewards, &y, &x0, alpha).unwrap() <= best + 1e-12);
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_lowest(&[2.0, 2.0 - 1e-15]), Some(0));
        assert_eq!(argmax_lowest(&[]), None);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(r in proptest::collection::vec(-5.0f64..5.0, 3), c in -50.0f64..50.0, alpha in 0.1f64..4.0) {
            let x0 = [0.2, 0.3, 0.5];
            let (a, _) = kl_regularized_distribution(&r, &x0, alpha).unwrap();
            let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
            let (b, _) = kl_regularized_distribution(&shifted, &x0, alpha).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn raising_a_reward_raises_its_mass(r in proptest::collection::vec(-3.0f64..3.0, 3), bump in 0.01f64..2.0, t in 0usize..3) {
            let x0 = [0.3, 0.3, 0.4];
            let (a, _) = kl_regularized_distribution(&r, &x0, 1.0).unwrap();
            let mut r2 = r.clone();
            r2[t] += bump;
            let (b, _) = kl_regularized_distribution(&r2, &x0, 1.0).unwrap();
            prop_assert!(b[t] > a[t]);
        }
    }
}
