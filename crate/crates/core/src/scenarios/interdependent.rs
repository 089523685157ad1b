//! Interdependent preferences: `u_1 = θ_1·x_1·ω`, `u_2 = (θ_2 − θ_1)·x_2·ω`.
//! Agent 1's type enters agent 2's payoff, so data-driven VCG transfers pay
//! agent 1 for understating it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{accuracy_kernel, as_param_error, check, uniform, vertices, Scenario};
use crate::allocation::{argmax_lowest, AllocationRule, ClosedForm};
use crate::audit::{posterior_regret, AuditConfig};
use crate::error::{Error, Result};
use crate::estimators::EstimatorSpec;
use crate::instance::{AgentGrids, Grid, Instance, InstanceParts, JointPrior, OutcomeSpace, Point, Profile, SignalKernel, Utility};
use crate::transfers::{HPolicy, TransferKind, TransferRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterdependentParams {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    /// Nonnegative state grid; signal grids equal it.
    pub states: Vec<f64>,
    pub accuracy: f64,
}

impl Default for InterdependentParams {
    fn default() -> Self {
        InterdependentParams {
            theta1: vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.7],
            theta2: vec![0.4, 0.8],
            states: vec![0.0, 1.0],
            accuracy: 0.8,
        }
    }
}

#[derive(Debug)]
pub struct InterdependentUtility {
    theta_max: f64,
}

impl Utility for InterdependentUtility {
    fn payoff(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> f64 {
        match agent {
            0 => types[0][0] * x[0] * state[0],
            _ => (types[1][0] - types[0][0]) * x[1] * state[0],
        }
    }

    fn state_lipschitz(&self, _agent: usize) -> Option<f64> {
        Some(2.0 * self.theta_max)
    }

    fn reads_other_types(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "interdependent_linear"
    }
}

/// Agent 1 wins iff `θ_1 ≥ θ_2 − θ_1` (when `E[ω|s] > 0`).
#[derive(Debug)]
pub struct InterdependentClosedForm;

impl ClosedForm for InterdependentClosedForm {
    fn name(&self) -> &str {
        "interdependent_winner"
    }

    fn allocate(&self, instance: &Instance, agents: &[usize], types: &[&[f64]], posterior: &[f64]) -> Point {
        let scores: Vec<f64> = agents
            .iter()
            .map(|&i| {
                let mut e = vec![0.0; 2];
                e[i] = 1.0;
                instance.expected_payoff(i, &e, types, posterior)
            })
            .collect();
        let mut x = vec![0.0; 2];
        x[argmax_lowest(&scores).map_or(0, |k| agents[k])] = 1.0;
        x
    }
}

pub fn build(p: &InterdependentParams) -> Result<Scenario> {
    check(!p.theta1.is_empty() && !p.theta2.is_empty(), "theta grids must be nonempty")?;
    check(!p.states.is_empty() && p.states.iter().all(|&w| w >= 0.0), "states must be nonnegative")?;
    check((0.0..=1.0).contains(&p.accuracy), "accuracy must lie in [0, 1]")?;
    let theta_max = p.theta1.iter().chain(&p.theta2).fold(0.0_f64, |a, t| a.max(t.abs()));
    let kernel = accuracy_kernel(p.states.len(), p.accuracy);
    let grid = |t: &[f64]| -> Result<AgentGrids> {
        Ok(AgentGrids { types: Grid::scalar(t)?, signals: Grid::scalar(&p.states)? })
    };
    let instance = Instance::new(InstanceParts {
        name: "interdependent_counterexample".into(),
        states: Grid::scalar(&p.states).map_err(as_param_error)?,
        agents: vec![grid(&p.theta1).map_err(as_param_error)?, grid(&p.theta2).map_err(as_param_error)?],
        prior: JointPrior {
            state: uniform(p.states.len()),
            types: vec![uniform(p.theta1.len()), uniform(p.theta2.len())],
            signals: SignalKernel::Independent(vec![kernel.clone(), kernel]),
        },
        utility: Arc::new(InterdependentUtility { theta_max }),
        outcomes: OutcomeSpace::Finite(vertices(2)),
        allocation: AllocationRule::closed_form(),
        closed_form: Some(Arc::new(InterdependentClosedForm)),
        full_support: p.accuracy > 0.0 && p.accuracy < 1.0,
    })
    .map_err(as_param_error)?;
    Ok(Scenario {
        instance,
        rule: TransferRule::new(TransferKind::DataDrivenVcg, HPolicy::Zero),
        estimator: EstimatorSpec::ExPost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleRecord {
    pub theta: [f64; 2],
    pub signals: [usize; 2],
    pub posterior_mean: f64,
    pub truthful_payoff: f64,
    /// Payoff of reporting `θ_1′ = 0`: `θ_2·E[ω|s]` (with `h_1 ≡ 0`).
    pub zero_report_payoff: f64,
    /// `θ_1·E` when `2θ_1 < θ_2`, else `(θ_2 − θ_1)·E`.
    pub predicted_gain: f64,
    pub audited_gain: f64,
    pub audited_best_theta: f64,
    pub certified: bool,
}

/// Audits agent 1 at true types `theta` and signal indices `signals` on an
/// instance built from `base` with `0`, `θ_1` and `θ_2` added to the grids.
pub fn interdependent_counterexample_demo(
    theta: [f64; 2],
    signals: [usize; 2],
    base: &InterdependentParams,
) -> Result<CounterexampleRecord> {
    if !(theta[0] < theta[1]) || theta[0] < 0.0 {
        return Err(Error::PreconditionFails(format!("needs 0 ≤ θ1 < θ2, got {theta:?}")));
    }
    let add = |g: &[f64], v: &[f64]| {
        let mut g = g.to_vec();
        for &x in v {
            if !g.iter().any(|y| (y - x).abs() < 1e-12) {
                g.push(x);
            }
        }
        g.sort_by(f64::total_cmp);
        g
    };
    let params = InterdependentParams {
        theta1: add(&base.theta1, &[0.0, theta[0]]),
        theta2: add(&base.theta2, &[theta[1]]),
        ..base.clone()
    };
    let scenario = build(&params)?;
    let inst = &scenario.instance;
    let t1 = inst.agents[0].types.find(&[theta[0]], 1e-12).expect("added");
    let t2 = inst.agents[1].types.find(&[theta[1]], 1e-12).expect("added");
    if signals[0] >= params.states.len() || signals[1] >= params.states.len() {
        return Err(Error::PreconditionFails("signal index off-grid".into()));
    }
    let truth = Profile::new(vec![t1, t2], signals.to_vec());
    let post = inst.posterior_full(&truth.signals)?;
    let e = inst.posterior_mean(post)[0];
    if e < 0.0 {
        return Err(Error::PreconditionFails("posterior mean must be nonnegative".into()));
    }
    let report = posterior_regret(inst, &scenario.rule, &scenario.estimator, &AuditConfig::default())?;
    let row = report
        .row(0, &truth)
        .ok_or_else(|| Error::Numerical("profile missing from audit".into()))?;
    let wins = 2.0 * theta[0] >= theta[1];
    let truthful_payoff = if wins { theta[0] * e } else { (theta[1] - theta[0]) * e };
    let zero_report_payoff = theta[1] * e;
    let predicted_gain = zero_report_payoff - truthful_payoff;
    Ok(CounterexampleRecord {
        theta,
        signals,
        posterior_mean: e,
        truthful_payoff,
        zero_report_payoff,
        predicted_gain,
        audited_gain: row.gain,
        audited_best_theta: inst.agents[0].types.point(row.best_dev_theta)[0],
        certified: row.gain > 0.0,
    })
}
