//! Quadratic loss `u_i(x, ω, θ_i) = −(x − θ_i − ω)²` on a truncated,
//! discretized Gaussian information structure.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{as_param_error, check, gaussian_kernel, uniform, Scenario};
use crate::allocation::{AllocationRule, ClosedForm};
use crate::error::Result;
use crate::estimators::EstimatorSpec;
use crate::instance::{AgentGrids, Grid, Instance, InstanceParts, JointPrior, OutcomeSpace, Point, SignalKernel, Utility};
use crate::transfers::{HPolicy, TransferKind, TransferRule, QUADRATIC_LOSS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationChoice {
    #[default]
    ClosedForm,
    GridArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticParams {
    pub agents: usize,
    /// Prior mean and standard deviation of the state.
    pub mu: f64,
    pub sigma: f64,
    /// State grid spans `mu ± truncation·sigma`.
    pub truncation: f64,
    pub state_points: usize,
    /// Per-agent signal noise standard deviations.
    pub signal_sigma: Vec<f64>,
    pub signal_points: usize,
    /// Signal grid spans `mu ± signal_range`; defaults to the state range.
    pub signal_range: Option<f64>,
    pub theta: Vec<f64>,
    pub allocation: AllocationChoice,
    /// Spacing of the outcome grid.
    pub x_step: f64,
}

impl Default for QuadraticParams {
    fn default() -> Self {
        QuadraticParams {
            agents: 2,
            mu: 0.0,
            sigma: 1.0,
            truncation: 3.0,
            state_points: 41,
            signal_sigma: vec![1.0, 1.0],
            signal_points: 9,
            signal_range: None,
            theta: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            allocation: AllocationChoice::ClosedForm,
            x_step: 0.05,
        }
    }
}

#[derive(Debug)]
pub struct QuadraticUtility {
    lipschitz: f64,
    sup: f64,
}

impl QuadraticUtility {
    /// Constants over `|x| ≤ x_max`, `|θ| ≤ theta_max`, `|ω| ≤ state_max`.
    pub fn new(x_max: f64, theta_max: f64, state_max: f64) -> Self {
        let reach = x_max + theta_max + state_max;
        QuadraticUtility { lipschitz: 2.0 * reach, sup: reach * reach }
    }
}

impl Utility for QuadraticUtility {
    fn payoff(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> f64 {
        -(x[0] - types[agent][0] - state[0]).powi(2)
    }

    fn state_lipschitz(&self, _agent: usize) -> Option<f64> {
        Some(self.lipschitz)
    }

    fn sup_bound(&self, _agent: usize) -> Option<f64> {
        Some(self.sup)
    }

    fn name(&self) -> &str {
        "quadratic_loss"
    }
}

/// `x* = mean_i θ_i + E[ω | s]`.
#[derive(Debug)]
pub struct QuadraticClosedForm;

impl ClosedForm for QuadraticClosedForm {
    fn name(&self) -> &str {
        "quadratic_mean"
    }

    fn allocate(&self, instance: &Instance, agents: &[usize], types: &[&[f64]], posterior: &[f64]) -> Point {
        let mean = instance.posterior_mean(posterior)[0];
        if agents.is_empty() {
            return vec![mean];
        }
        let bias = agents.iter().map(|&i| types[i][0]).sum::<f64>() / agents.len() as f64;
        vec![bias + mean]
    }
}

fn outcome_grid(lo: f64, hi: f64, step: f64) -> Vec<Point> {
    let lo = (lo / step).floor() * step;
    let hi = (hi / step).ceil() * step;
    let n = ((hi - lo) / step).round() as usize + 1;
    (0..n).map(|k| vec![lo + k as f64 * step]).collect()
}

fn abs_max(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

/// Assembles a quadratic-loss instance on an arbitrary information structure.
pub fn assemble(
    states: Vec<f64>,
    state_prior: Vec<f64>,
    signals: Vec<Vec<f64>>,
    kernel: SignalKernel,
    theta: &[f64],
    allocation: AllocationChoice,
    x_step: f64,
    full_support: bool,
) -> Result<Instance> {
    check(x_step > 0.0, "x_step must be positive")?;
    let (tmin, tmax) = theta.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let (wmin, wmax) = states.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
    let outcomes = outcome_grid(tmin + wmin, tmax + wmax, x_step);
    let x_max = outcomes.iter().fold(0.0_f64, |a, x| a.max(x[0].abs()));
    let utility = QuadraticUtility::new(x_max, abs_max(theta), abs_max(&states));
    let n = signals.len();
    let agents = signals
        .iter()
        .map(|s| {
            Ok(AgentGrids { types: Grid::scalar(theta)?, signals: Grid::scalar(s)? })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(as_param_error)?;
    Instance::new(InstanceParts {
        name: QUADRATIC_LOSS.into(),
        states: Grid::scalar(&states).map_err(as_param_error)?,
        agents,
        prior: JointPrior { state: state_prior, types: vec![uniform(theta.len()); n], signals: kernel },
        utility: Arc::new(utility),
        outcomes: OutcomeSpace::Finite(outcomes),
        allocation: match allocation {
            AllocationChoice::ClosedForm => AllocationRule::closed_form(),
            AllocationChoice::GridArgmax => AllocationRule::grid_argmax(),
        },
        closed_form: Some(Arc::new(QuadraticClosedForm)),
        full_support,
    })
    .map_err(as_param_error)
}

/// Discretized Gaussian model behind the default instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub states: Vec<f64>,
    pub prior: Vec<f64>,
    pub signals: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    /// Per-agent, per-state normalizer of the signal kernel over its grid.
    norm: Vec<Vec<f64>>,
}

impl QuadraticParams {
    pub fn validate(&self) -> Result<()> {
        check(self.agents >= 1, "quadratic_loss needs at least one agent")?;
        check(self.sigma > 0.0 && self.truncation > 0.0, "sigma and truncation must be positive")?;
        check(self.state_points >= 2 && self.signal_points >= 2, "grids need at least two points")?;
        check(
            self.signal_sigma.len() == self.agents,
            format!("signal_sigma has {} entries for {} agents", self.signal_sigma.len(), self.agents),
        )?;
        check(self.signal_sigma.iter().all(|&s| s > 0.0), "signal noise must be positive")?;
        check(!self.theta.is_empty(), "theta grid is empty")?;
        Ok(())
    }

    pub fn model(&self) -> Result<GaussianModel> {
        self.validate()?;
        let half = self.truncation * self.sigma;
        let states = linspace(self.mu - half, self.mu + half, self.state_points);
        let raw: Vec<f64> = states
            .iter()
            .map(|w| (-0.5 * ((w - self.mu) / self.sigma).powi(2)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let prior = raw.into_iter().map(|p| p / total).collect();
        let range = self.signal_range.unwrap_or(half);
        check(range > 0.0, "signal_range must be positive")?;
        let grid = linspace(self.mu - range, self.mu + range, self.signal_points);
        let signals = vec![grid; self.agents];
        let norm = signals
            .iter()
            .zip(&self.signal_sigma)
            .map(|(g, &sd)| {
                states
                    .iter()
                    .map(|&w| 1.0 / g.iter().map(|&s| (-0.5 * ((s - w) / sd).powi(2)).exp()).sum::<f64>())
                    .collect()
            })
            .collect();
        Ok(GaussianModel { states, prior, signals, sigmas: self.signal_sigma.clone(), norm })
    }
}

impl GaussianModel {
    /// Posterior weights when agent 0 observes the off-grid value `v` and the
    /// other agents observe grid signals `rest[j]` (index ignored for agent 0).
    fn weights(&self, v: f64, rest: &[usize]) -> Vec<f64> {
        let sd = self.sigmas[0];
        let w: Vec<f64> = self
            .states
            .iter()
            .enumerate()
            .map(|(k, &om)| {
                let mut l = self.prior[k] * self.norm[0][k] * (-0.5 * ((v - om) / sd).powi(2)).exp();
                for (j, &s) in rest.iter().enumerate().skip(1) {
                    let sdj = self.sigmas[j];
                    l *= self.norm[j][k] * (-0.5 * ((self.signals[j][s] - om) / sdj).powi(2)).exp();
                }
                l
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|p| p / total).collect()
    }

    /// `(E[ω | v, s_{−0}], Var[ω | v, s_{−0}])` with a continuous first signal.
    /// At grid values of `v` it reproduces the instance's table posterior.
    pub fn continuous_moments(&self, v: f64, signals: &[usize]) -> (f64, f64) {
        let w = self.weights(v, signals);
        let mean: f64 = w.iter().zip(&self.states).map(|(p, s)| p * s).sum();
        let var: f64 = w.iter().zip(&self.states).map(|(p, s)| p * (s - mean).powi(2)).sum();
        (mean, var)
    }

    /// `∂E[ω | v, s_{−0}]/∂v = Var[ω | v, s_{−0}] / σ_0²`; the per-state kernel
    /// normalizer does not depend on `v`.
    pub fn mean_derivative(&self, v: f64, signals: &[usize]) -> f64 {
        self.continuous_moments(v, signals).1 / self.sigmas[0].powi(2)
    }

    /// Generalized-VCG transfer of agent 0 in integral form,
    /// `−(θ_0 − θ_1) ∫_0^{s_0} ∂E[ω | v, s_1]/∂v dv`, by composite Simpson.
    pub fn generalized_vcg_integral(&self, theta_diff: f64, s0: f64, signals: &[usize], intervals: usize) -> f64 {
        let n = intervals.max(2) & !1;
        let h = s0 / n as f64;
        let f = |v: f64| self.mean_derivative(v, signals);
        let mut acc = f(0.0) + f(s0);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        -theta_diff * acc * h / 3.0
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

pub fn build(p: &QuadraticParams) -> Result<Scenario> {
    let model = p.model()?;
    let kernel = SignalKernel::Independent(
        model
            .signals
            .iter()
            .zip(&model.sigmas)
            .map(|(g, &sd)| gaussian_kernel(&model.states, g, sd))
            .collect(),
    );
    let instance = assemble(
        model.states.clone(),
        model.prior.clone(),
        model.signals.clone(),
        kernel,
        &p.theta,
        p.allocation,
        p.x_step,
        true,
    )?;
    Ok(Scenario {
        instance,
        rule: TransferRule::new(TransferKind::DataDrivenVcg, HPolicy::Pivot),
        estimator: EstimatorSpec::ExPost,
    })
}

/// Ω = {0, 1} uniform, two agents with binary signals of the given accuracy.
pub fn binary(accuracy: f64, theta: &[f64]) -> Result<Instance> {
    check((0.5..=1.0).contains(&accuracy), "accuracy must lie in [0.5, 1]")?;
    let rows = vec![vec![accuracy, 1.0 - accuracy], vec![1.0 - accuracy, accuracy]];
    assemble(
        vec![0.0, 1.0],
        vec![0.5, 0.5],
        vec![vec![0.0, 1.0]; 2],
        SignalKernel::Independent(vec![rows.clone(), rows]),
        theta,
        AllocationChoice::ClosedForm,
        0.05,
        accuracy < 1.0,
    )
}

/// Wallet information: independent uniform signals and `ω = s_1 + s_2`.
pub fn wallet(signal_values: &[f64], theta: &[f64]) -> Result<Instance> {
    let k = signal_values.len();
    let mut states: Vec<f64> = Vec::new();
    for a in signal_values {
        for b in signal_values {
            let w = a + b;
            if !states.iter().any(|s| (s - w).abs() < 1e-12) {
                states.push(w);
            }
        }
    }
    states.sort_by(f64::total_cmp);
    let find = |w: f64| states.iter().position(|s| (s - w).abs() < 1e-12).expect("state present");
    let cell = 1.0 / (k * k) as f64;
    let mut prior = vec![0.0; states.len()];
    for a in signal_values {
        for b in signal_values {
            prior[find(a + b)] += cell;
        }
    }
    // joint kernel over profiles, agent 0 most significant
    let kernel: Vec<Vec<f64>> = states
        .iter()
        .enumerate()
        .map(|(w, _)| {
            let mut row = vec![0.0; k * k];
            for (ia, a) in signal_values.iter().enumerate() {
                for (ib, b) in signal_values.iter().enumerate() {
                    if find(a + b) == w {
                        row[ia * k + ib] = cell / prior[w];
                    }
                }
            }
            row
        })
        .collect();
    assemble(
        states,
        prior,
        vec![signal_values.to_vec(); 2],
        SignalKernel::Joint(kernel),
        theta,
        AllocationChoice::ClosedForm,
        0.05,
        false,
    )
}
