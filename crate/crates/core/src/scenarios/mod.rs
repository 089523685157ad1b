//! Registered instance families.

pub mod ctr;
pub mod interdependent;
pub mod llm;
pub mod quadratic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorSpec;
use crate::instance::{Instance, Point};
use crate::transfers::TransferRule;

pub use ctr::{ctr_click_process, individual_ctr_manipulation_demo, ClickOutcome, CtrCommonParams, CtrIndividualParams, ManipulationRecord};
pub use interdependent::{interdependent_counterexample_demo, CounterexampleRecord, InterdependentParams};
pub use llm::LlmParams;
pub use quadratic::QuadraticParams;

/// A built scenario with its default mechanism.
#[derive(Debug)]
pub struct Scenario {
    pub instance: Instance,
    pub rule: TransferRule,
    pub estimator: EstimatorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ScenarioSpec {
    QuadraticLoss(QuadraticParams),
    CtrCommon(CtrCommonParams),
    CtrIndividual(CtrIndividualParams),
    LlmKl(LlmParams),
    InterdependentCounterexample(InterdependentParams),
}

impl ScenarioSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioSpec::QuadraticLoss(_) => "quadratic_loss",
            ScenarioSpec::CtrCommon(_) => "ctr_common",
            ScenarioSpec::CtrIndividual(_) => "ctr_individual",
            ScenarioSpec::LlmKl(_) => "llm_kl",
            ScenarioSpec::InterdependentCounterexample(_) => "interdependent_counterexample",
        }
    }

    /// Default parameters for a registered name.
    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "quadratic_loss" => ScenarioSpec::QuadraticLoss(QuadraticParams::default()),
            "ctr_common" => ScenarioSpec::CtrCommon(CtrCommonParams::default()),
            "ctr_individual" => ScenarioSpec::CtrIndividual(CtrIndividualParams::default()),
            "llm_kl" => ScenarioSpec::LlmKl(LlmParams::default()),
            "interdependent_counterexample" => {
                ScenarioSpec::InterdependentCounterexample(InterdependentParams::default())
            }
            other => return Err(Error::InvalidScenarioParameters(format!("unknown scenario `{other}`"))),
        })
    }

    pub fn build(&self) -> Result<Scenario> {
        match self {
            ScenarioSpec::QuadraticLoss(p) => quadratic::build(p),
            ScenarioSpec::CtrCommon(p) => ctr::build_common(p),
            ScenarioSpec::CtrIndividual(p) => ctr::build_individual(p),
            ScenarioSpec::LlmKl(p) => llm::build(p),
            ScenarioSpec::InterdependentCounterexample(p) => interdependent::build(p),
        }
    }
}

/// Registered names with one-line descriptions.
pub fn list() -> Vec<(&'static str, &'static str)> {
    vec![
        ("quadratic_loss", "two agents, u_i = -(x - θ_i - ω)², truncated Gaussian state and signals"),
        ("ctr_common", "single-slot ad auction, one click probability shared by all ads"),
        ("ctr_individual", "single-slot ad auction, each agent knows its own click probability"),
        ("llm_kl", "token auction over a KL-regularized generation distribution"),
        ("interdependent_counterexample", "agent 2's payoff depends on agent 1's type"),
    ]
}

/// `P(s | ω) ∝ φ((s − ω)/σ)`, normalized over the signal grid for each ω.
pub(crate) fn gaussian_kernel(states: &[f64], signals: &[f64], sigma: f64) -> Vec<Vec<f64>> {
    states
        .iter()
        .map(|&w| {
            let row: Vec<f64> = signals.iter().map(|&s| (-0.5 * ((s - w) / sigma).powi(2)).exp()).collect();
            let total: f64 = row.iter().sum();
            row.into_iter().map(|v| v / total).collect()
        })
        .collect()
}

/// Signal grid equal to the state grid; the signal matches the state with
/// probability `accuracy` and is otherwise uniform over the other values.
pub(crate) fn accuracy_kernel(states: usize, accuracy: f64) -> Vec<Vec<f64>> {
    (0..states)
        .map(|w| {
            (0..states)
                .map(|s| {
                    if states == 1 {
                        1.0
                    } else if s == w {
                        accuracy
                    } else {
                        (1.0 - accuracy) / (states - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

pub(crate) fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Degenerate lotteries `e_1, …, e_n`.
pub(crate) fn vertices(n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect()
}

pub(crate) fn check(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidScenarioParameters(msg.into()))
    }
}

/// Maps instance errors raised while building to scenario parameter errors.
pub(crate) fn as_param_error(e: Error) -> Error {
    match e {
        Error::InvalidInstance(m) => Error::InvalidScenarioParameters(m),
        other => other,
    }
}
