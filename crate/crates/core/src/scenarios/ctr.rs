//! Single-slot click-through auctions. An agent's type is its value per click;
//! the state holds click probabilities.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::{as_param_error, check, gaussian_kernel, uniform, vertices, Scenario};
use crate::allocation::{argmax_lowest, AllocationRule, ClosedForm};
use crate::audit::{posterior_regret, AuditConfig};
use crate::error::{Error, Result};
use crate::estimators::EstimatorSpec;
use crate::instance::{AgentGrids, Grid, Instance, InstanceParts, JointPrior, OutcomeSpace, Point, Profile, SignalKernel, Utility};
use crate::transfers::{ctr_coordinate, per_click_price, HPolicy, TransferKind, TransferRule};

/// `u_i = θ_i · x_i · ω_{c(i)}` with `c(i)` the agent's CTR coordinate.
#[derive(Debug)]
pub struct CtrUtility {
    theta_max: f64,
}

impl CtrUtility {
    pub fn new(theta_max: f64) -> Self {
        CtrUtility { theta_max }
    }
}

impl Utility for CtrUtility {
    fn payoff(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> f64 {
        let c = if state.len() == 1 { 0 } else { agent };
        types[agent][0] * x[agent] * state[c]
    }

    fn state_lipschitz(&self, _agent: usize) -> Option<f64> {
        Some(self.theta_max)
    }

    fn sup_bound(&self, _agent: usize) -> Option<f64> {
        Some(self.theta_max)
    }

    fn name(&self) -> &str {
        "ctr_linear"
    }
}

/// Highest expected value per impression wins; ties to the lowest index.
#[derive(Debug)]
pub struct HighestBidWins;

impl ClosedForm for HighestBidWins {
    fn name(&self) -> &str {
        "highest_expected_value"
    }

    fn allocate(&self, instance: &Instance, agents: &[usize], types: &[&[f64]], posterior: &[f64]) -> Point {
        let mean = instance.posterior_mean(posterior);
        let mut x = vec![0.0; instance.n()];
        let scores: Vec<f64> = agents
            .iter()
            .map(|&i| types[i][0] * mean[ctr_coordinate(instance, i)])
            .collect();
        if let Some(k) = argmax_lowest(&scores) {
            x[agents[k]] = 1.0;
        } else {
            x[0] = 1.0;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrCommonParams {
    pub agents: usize,
    pub theta: Vec<f64>,
    /// Click probabilities on the state grid.
    pub ctr: Vec<f64>,
    pub signals: Vec<f64>,
    /// Standard deviation of the discretized Gaussian signal kernel.
    pub signal_sigma: f64,
}

impl Default for CtrCommonParams {
    fn default() -> Self {
        CtrCommonParams {
            agents: 2,
            theta: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            ctr: vec![0.2, 0.5, 0.8],
            signals: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            signal_sigma: 0.3,
        }
    }
}

fn ctr_instance(
    name: &str,
    states: Vec<Point>,
    state_prior: Vec<f64>,
    agents: Vec<AgentGrids>,
    type_prior: Vec<Vec<f64>>,
    kernel: SignalKernel,
    full_support: bool,
) -> Result<Instance> {
    let n = agents.len();
    let theta_max = agents
        .iter()
        .flat_map(|a| a.types.points().iter().map(|t| t[0].abs()))
        .fold(0.0_f64, f64::max);
    Instance::new(InstanceParts {
        name: name.into(),
        states: Grid::new(states)?,
        agents,
        prior: JointPrior { state: state_prior, types: type_prior, signals: kernel },
        utility: Arc::new(CtrUtility { theta_max }),
        outcomes: OutcomeSpace::Finite(vertices(n)),
        allocation: AllocationRule::closed_form(),
        closed_form: Some(Arc::new(HighestBidWins)),
        full_support,
    })
    .map_err(as_param_error)
}

fn check_probabilities(values: &[f64], what: &str) -> Result<()> {
    check(!values.is_empty(), format!("{what} grid is empty"))?;
    check(
        values.iter().all(|v| (0.0..=1.0).contains(v)),
        format!("{what} values must lie in [0, 1]"),
    )
}

pub fn build_common(p: &CtrCommonParams) -> Result<Scenario> {
    check(p.agents >= 1, "ctr_common needs at least one agent")?;
    check_probabilities(&p.ctr, "ctr")?;
    check(!p.theta.is_empty() && !p.signals.is_empty(), "theta and signal grids must be nonempty")?;
    check(p.signal_sigma > 0.0, "signal_sigma must be positive")?;
    let agent = AgentGrids {
        types: Grid::scalar(&p.theta).map_err(as_param_error)?,
        signals: Grid::scalar(&p.signals).map_err(as_param_error)?,
    };
    let kernel = gaussian_kernel(&p.ctr, &p.signals, p.signal_sigma);
    let instance = ctr_instance(
        "ctr_common",
        p.ctr.iter().map(|&c| vec![c]).collect(),
        uniform(p.ctr.len()),
        vec![agent; p.agents],
        vec![uniform(p.theta.len()); p.agents],
        SignalKernel::Independent(vec![kernel; p.agents]),
        true,
    )?;
    Ok(Scenario {
        instance,
        rule: TransferRule::new(TransferKind::PerClickPivot, HPolicy::Pivot),
        estimator: EstimatorSpec::BernoulliCtr { m: 16 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrIndividualParams {
    pub agents: usize,
    pub theta: Vec<f64>,
    /// Per-coordinate click-probability grid; the state grid is its product
    /// and agent `i` observes coordinate `i` exactly.
    pub ctr: Vec<f64>,
}

impl Default for CtrIndividualParams {
    fn default() -> Self {
        CtrIndividualParams {
            agents: 2,
            theta: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            ctr: vec![0.1, 0.3, 0.6, 1.0],
        }
    }
}

pub fn build_individual(p: &CtrIndividualParams) -> Result<Scenario> {
    check(p.agents >= 1, "ctr_individual needs at least one agent")?;
    check_probabilities(&p.ctr, "ctr")?;
    check(!p.theta.is_empty(), "theta grid is empty")?;
    let k = p.ctr.len();
    let total = k.checked_pow(p.agents as u32).filter(|&t| t <= 100_000);
    let total = total.ok_or_else(|| Error::InvalidScenarioParameters("state grid too large".into()))?;
    let states: Vec<Point> = (0..total)
        .map(|idx| {
            let mut rem = idx;
            let mut pt = vec![0.0; p.agents];
            for d in (0..p.agents).rev() {
                pt[d] = p.ctr[rem % k];
                rem /= k;
            }
            pt
        })
        .collect();
    // agent i's signal is coordinate i of the state
    let kernel: Vec<Vec<Vec<f64>>> = (0..p.agents)
        .map(|i| {
            states
                .iter()
                .map(|w| p.ctr.iter().map(|&c| if c == w[i] { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let agent = AgentGrids {
        types: Grid::scalar(&p.theta).map_err(as_param_error)?,
        signals: Grid::scalar(&p.ctr).map_err(as_param_error)?,
    };
    let instance = ctr_instance(
        "ctr_individual",
        states,
        uniform(total),
        vec![agent; p.agents],
        vec![uniform(p.theta.len()); p.agents],
        SignalKernel::Independent(kernel),
        false,
    )?;
    Ok(Scenario {
        instance,
        rule: TransferRule::new(TransferKind::PerClickPivot, HPolicy::Pivot),
        estimator: EstimatorSpec::ExPost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClickOutcome {
    pub clicks: u64,
    pub impressions: u64,
    pub price: f64,
    pub payment: f64,
    pub sample_ctr: f64,
}

/// Displays the winner's ad `m` times with click probability
/// `ω_{c(winner)}` and charges the per-click pivot price per click.
pub fn ctr_click_process(
    inst: &Instance,
    reports: &Profile,
    winner: usize,
    state: &[f64],
    m: u64,
    seed: u64,
) -> Result<ClickOutcome> {
    check(winner < inst.n(), "winner out of range")?;
    check(m >= 1, "at least one impression is required")?;
    let p = state[ctr_coordinate(inst, winner)];
    check((0.0..=1.0).contains(&p), "click probability must lie in [0, 1]")?;
    let price = per_click_price(inst, winner, reports)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clicks = Binomial::new(m, p).map_err(|e| Error::Numerical(e.to_string()))?.sample(&mut rng);
    Ok(ClickOutcome {
        clicks,
        impressions: m,
        price,
        payment: clicks as f64 * price,
        sample_ctr: clicks as f64 / m as f64,
    })
}

/// Audited manipulation of the per-click pivot under individual CTRs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManipulationRecord {
    pub theta: [f64; 2],
    pub ctr: [f64; 2],
    /// `(θ_1 − θ_2)·s_1`, the gain predicted in closed form.
    pub predicted_gain: f64,
    pub audited_gain: f64,
    /// Lowest-index maximizing report of agent 1.
    pub best_dev_theta: f64,
    pub best_dev_s: f64,
    /// Gain of the `(θ_1′, s_1′) = (1, 1)` corner report.
    pub corner_gain: f64,
    /// Agent 1's audited gain under the data-driven pivot with an external
    /// unbiased estimate of the click probabilities.
    pub data_driven_gain: f64,
    pub data_driven_epsilon: f64,
}

fn with_value(grid: &[f64], v: f64) -> Vec<f64> {
    let mut g = grid.to_vec();
    if !g.iter().any(|x| (x - v).abs() < 1e-12) {
        g.push(v);
    }
    g.sort_by(f64::total_cmp);
    g
}

fn index_of(grid: &Grid, v: f64) -> usize {
    grid.find(&[v], 1e-12).expect("value placed on grid")
}

/// Agent 1 knows its own CTR `s_1` but loses truthfully (`θ_1 s_1 < θ_2 s_2`);
/// under the per-click pivot it gains `(θ_1 − θ_2)·s_1` by claiming the top
/// corner `(θ_1′, s_1′) = (1, 1)`.
pub fn individual_ctr_manipulation_demo(
    theta: [f64; 2],
    ctr: [f64; 2],
    base: &CtrIndividualParams,
    noise_h: f64,
) -> Result<ManipulationRecord> {
    if !(theta[0] * ctr[0] < theta[1] * ctr[1] && theta[0] >= theta[1]) {
        return Err(Error::PreconditionFails(format!(
            "needs θ1·s1 < θ2·s2 and θ1 ≥ θ2, got θ={theta:?}, s={ctr:?}"
        )));
    }
    let params = CtrIndividualParams {
        agents: 2,
        theta: with_value(&with_value(&with_value(&base.theta, theta[0]), theta[1]), 1.0),
        ctr: with_value(&with_value(&with_value(&base.ctr, ctr[0]), ctr[1]), 1.0),
    };
    let inst = build_individual(&params)?.instance;
    let types = &inst.agents[0].types;
    let signals = &inst.agents[0].signals;
    let truth = Profile::new(
        vec![index_of(types, theta[0]), index_of(types, theta[1])],
        vec![index_of(signals, ctr[0]), index_of(signals, ctr[1])],
    );
    let cfg = AuditConfig::default();
    let per_click = TransferRule::new(TransferKind::PerClickPivot, HPolicy::Pivot);
    let report = posterior_regret(&inst, &per_click, &EstimatorSpec::ExPost, &cfg)?;
    let row = report.row(0, &truth).ok_or_else(|| Error::Numerical("profile missing from audit".into()))?;

    let corner = truth.with_report(0, index_of(types, 1.0), index_of(signals, 1.0));
    let corner_gain = deviation_gain(&inst, &per_click, &EstimatorSpec::ExPost, &truth, &corner, 0)?;

    let data_driven = TransferRule::new(TransferKind::DataDrivenVcg, HPolicy::Pivot);
    let external = EstimatorSpec::UnbiasedNoise { h: noise_h };
    let dd = posterior_regret(&inst, &data_driven, &external, &cfg)?;
    let dd_row = dd.row(0, &truth).ok_or_else(|| Error::Numerical("profile missing from audit".into()))?;

    Ok(ManipulationRecord {
        theta,
        ctr,
        predicted_gain: (theta[0] - theta[1]) * ctr[0],
        audited_gain: row.gain,
        best_dev_theta: types.point(row.best_dev_theta)[0],
        best_dev_s: signals.point(row.best_dev_s)[0],
        corner_gain,
        data_driven_gain: dd_row.gain,
        data_driven_epsilon: dd.epsilon,
    })
}

/// Gain of agent `i` from reporting `dev` when the truth is `truth`, with the
/// expectation taken exactly over the estimator law.
pub fn deviation_gain(
    inst: &Instance,
    rule: &TransferRule,
    estimator: &EstimatorSpec,
    truth: &Profile,
    dev: &Profile,
    i: usize,
) -> Result<f64> {
    use crate::transfers::{expected_transfer, ProfileTransfers, Sampling};
    let post = inst.posterior_full(&truth.signals)?;
    let types = inst.type_values(&truth.types);
    let value = |p: &Profile| -> Result<f64> {
        let x = ProfileTransfers::new(inst, rule, p)?.allocation().to_vec();
        let t = expected_transfer(inst, rule, i, p, &truth.signals, estimator, Sampling::default())?;
        Ok(inst.expected_payoff(i, &x, &types, post) + t.mean)
    };
    Ok(value(dev)? - value(truth)?)
}
