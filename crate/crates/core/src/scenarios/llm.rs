//! Token auction over a KL-regularized generation distribution.
//!
//! Agent `i` earns `r_i(t, ω, θ_i) = θ_i·pref[i][t] + ω·rel[i][t]` per token,
//! so `u_i(x, ω, θ_i) = Σ_t x(t)·r_i(t, ω, θ_i)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{accuracy_kernel, as_param_error, check, uniform, Scenario};
use crate::allocation::{AllocationRule, KlObjective, ReferenceRule};
use crate::error::Result;
use crate::estimators::EstimatorSpec;
use crate::instance::{AgentGrids, Grid, Instance, InstanceParts, JointPrior, OutcomeSpace, SignalKernel, Utility};
use crate::transfers::{HPolicy, TransferKind, TransferRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmParams {
    /// `pref[i][t]`, one row per agent.
    pub pref: Vec<Vec<f64>>,
    /// `rel[i][t]`, the state-sensitive part of the reward.
    pub rel: Vec<Vec<f64>>,
    /// Per-agent type grids.
    pub theta: Vec<Vec<f64>>,
    /// State grid; each agent's signal grid equals it.
    pub states: Vec<f64>,
    /// Probability that a signal equals the state.
    pub accuracy: f64,
    pub alpha: f64,
    /// Reference distribution; uniform when absent.
    pub reference: Option<Vec<f64>>,
    /// Lattice resolution for brute-force search over the simplex.
    pub resolution: usize,
}

impl Default for LlmParams {
    fn default() -> Self {
        LlmParams {
            pref: vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5]],
            rel: vec![vec![0.5, -0.5, 1.0], vec![-0.5, 0.5, 1.0]],
            theta: vec![vec![0.0, 0.5, 1.0], vec![0.0, 0.5, 1.0]],
            states: vec![0.0, 0.5, 1.0],
            accuracy: 0.7,
            alpha: 1.0,
            reference: None,
            resolution: 100,
        }
    }
}

impl LlmParams {
    /// Two tokens, `R = (1, 0)` from agent 1, agent 2 indifferent, `x_0`
    /// uniform and `α = 1`.
    pub fn two_token() -> Self {
        LlmParams {
            pref: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            rel: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            theta: vec![vec![1.0], vec![1.0]],
            states: vec![0.0, 1.0],
            accuracy: 0.8,
            alpha: 1.0,
            reference: None,
            resolution: 100,
        }
    }

    pub fn tokens(&self) -> usize {
        self.pref.first().map_or(0, Vec::len)
    }
}

#[derive(Debug)]
pub struct TokenRewards {
    pref: Vec<Vec<f64>>,
    rel: Vec<Vec<f64>>,
}

impl TokenRewards {
    pub fn reward(&self, agent: usize, token: usize, state: f64, theta: f64) -> f64 {
        theta * self.pref[agent][token] + state * self.rel[agent][token]
    }
}

impl Utility for TokenRewards {
    fn payoff(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(t, p)| p * self.reward(agent, t, state[0], types[agent][0]))
            .sum()
    }

    fn state_lipschitz(&self, agent: usize) -> Option<f64> {
        Some(self.rel[agent].iter().fold(0.0_f64, |a, r| a.max(r.abs())))
    }

    fn name(&self) -> &str {
        "token_rewards"
    }
}

pub fn build(p: &LlmParams) -> Result<Scenario> {
    let n = p.pref.len();
    let tokens = p.tokens();
    check(n >= 1, "llm_kl needs at least one agent")?;
    check((1..=8).contains(&tokens), "token count must lie in 1..=8")?;
    check((1..=8).contains(&p.states.len()), "state grid must have 1..=8 points")?;
    check(p.pref.iter().all(|r| r.len() == tokens), "pref rows differ in length")?;
    check(p.rel.len() == n && p.rel.iter().all(|r| r.len() == tokens), "rel must match pref")?;
    check(p.theta.len() == n, "one theta grid per agent required")?;
    check((0.0..=1.0).contains(&p.accuracy), "accuracy must lie in [0, 1]")?;
    check(p.alpha > 0.0, "alpha must be positive")?;
    let reference = p.reference.clone().unwrap_or_else(|| uniform(tokens));
    check(reference.len() == tokens, "reference has the wrong length")?;
    check(reference.iter().all(|&r| r > 0.0), "reference must have full support")?;
    check(((reference.iter().sum::<f64>()) - 1.0).abs() <= 1e-12, "reference must sum to 1")?;

    let kernel = accuracy_kernel(p.states.len(), p.accuracy);
    let agents = p
        .theta
        .iter()
        .map(|t| Ok(AgentGrids { types: Grid::scalar(t)?, signals: Grid::scalar(&p.states)? }))
        .collect::<Result<Vec<_>>>()
        .map_err(as_param_error)?;
    let full = p.accuracy > 0.0 && (p.accuracy < 1.0 || p.states.len() == 1);
    let instance = Instance::new(InstanceParts {
        name: "llm_kl".into(),
        states: Grid::scalar(&p.states).map_err(as_param_error)?,
        agents,
        prior: JointPrior {
            state: uniform(p.states.len()),
            types: p.theta.iter().map(|t| uniform(t.len())).collect(),
            signals: SignalKernel::Independent(vec![kernel; n]),
        },
        utility: Arc::new(TokenRewards { pref: p.pref.clone(), rel: p.rel.clone() }),
        outcomes: OutcomeSpace::Simplex { tokens, resolution: p.resolution },
        allocation: AllocationRule::kl(KlObjective { alpha: p.alpha, reference: ReferenceRule::Constant(reference) }),
        closed_form: None,
        full_support: full,
    })
    .map_err(as_param_error)?;
    Ok(Scenario {
        instance,
        rule: TransferRule::new(TransferKind::RegularizedDataDrivenVcg, HPolicy::Pivot),
        estimator: EstimatorSpec::ExPost,
    })
}
