//! Experiment configuration files (JSON).
//!
//! A config names a registered scenario or describes a custom instance, and
//! optionally overrides the scenario's default transfer rule and estimator.

use std::path::PathBuf;
use std::sync::Arc;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, HashMapContext, Node, Value};
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationRule, KlObjective, ReferenceRule};
use crate::audit::AuditConfig;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorSpec, NoiseLaw};
use crate::instance::{AgentGrids, Grid, Instance, InstanceParts, JointPrior, OutcomeSpace, Point, SignalKernel, Utility};
use crate::scenarios::ctr::CtrUtility;
use crate::scenarios::quadratic::QuadraticUtility;
use crate::scenarios::{Scenario, ScenarioSpec};
use crate::transfers::{HPolicy, LooAggregate, Sampling, TransferKind, TransferRule};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_MC_SAMPLES: usize = 1000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: Option<ScenarioSpec>,
    instance: Option<CustomInstance>,
    transfer: Option<RawTransfer>,
    estimator: Option<RawEstimator>,
    sweep: Option<RawSweep>,
    certificate: Option<CertificateSpec>,
    budget: Option<u64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransfer {
    kind: Option<TransferKind>,
    h_policy: Option<HPolicy>,
    offset: Option<f64>,
    aggregate: Option<LooAggregate>,
    mc_samples: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    kind: String,
    m: Option<u64>,
    noise_h: Option<f64>,
    noise: Option<String>,
    tau: Option<f64>,
    clamp: Option<bool>,
    rate_kappa: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    m: Vec<u64>,
}

/// Signal and type values for the impossibility certificate; each must lie on
/// the instance grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub s1: f64,
    pub s1_alt: f64,
    pub s2: f64,
    pub theta_a: f64,
    pub theta_b: f64,
    pub theta2: f64,
}

impl CertificateSpec {
    /// Grid indices `[s1, s1_alt, s2, theta_a, theta_b, theta2]`.
    pub fn indices(&self, inst: &Instance) -> Result<[usize; 6]> {
        if inst.n() != 2 {
            return Err(Error::Config("certificate needs a two-agent instance".into()));
        }
        let find = |g: &Grid, v: f64, what: &str| {
            g.find(&[v], 1e-9)
                .ok_or_else(|| Error::Config(format!("certificate {what} = {v} is not on the grid")))
        };
        let (a1, a2) = (&inst.agents[0], &inst.agents[1]);
        Ok([
            find(&a1.signals, self.s1, "s1")?,
            find(&a1.signals, self.s1_alt, "s1_alt")?,
            find(&a2.signals, self.s2, "s2")?,
            find(&a1.types, self.theta_a, "theta_a")?,
            find(&a1.types, self.theta_b, "theta_b")?,
            find(&a2.types, self.theta2, "theta2")?,
        ])
    }
}

#[derive(Debug, Clone)]
pub enum InstanceSource {
    Registered(ScenarioSpec),
    Custom(CustomInstance),
}

/// A validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub source: InstanceSource,
    /// Overrides of the scenario's default rule; `None` keeps the default.
    pub transfer_kind: Option<TransferKind>,
    pub h_policy: Option<HPolicy>,
    pub offset: f64,
    pub aggregate: LooAggregate,
    pub estimator: Option<EstimatorSpec>,
    pub kappa: f64,
    pub mc_samples: usize,
    /// Seed of the Monte Carlo streams; defaults to `seed`.
    pub mc_seed: u64,
    pub seed: u64,
    pub sweep_m: Option<Vec<u64>>,
    pub certificate: Option<CertificateSpec>,
    pub budget: u64,
    pub out: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| bad(format!("malformed config: {e}")))?;
        let source = match (raw.scenario, raw.instance) {
            (Some(s), None) => InstanceSource::Registered(s),
            (None, Some(c)) => InstanceSource::Custom(c),
            (Some(_), Some(_)) => return Err(bad("give either `scenario` or `instance`, not both")),
            (None, None) => return Err(bad("config needs a `scenario` or an `instance` section")),
        };
        let seed = raw.seed.unwrap_or(0);
        let t = raw.transfer.unwrap_or_default();
        let mc_samples = t.mc_samples.unwrap_or(DEFAULT_MC_SAMPLES);
        if mc_samples == 0 {
            return Err(bad("transfer.mc_samples must be positive"));
        }
        let offset = t.offset.unwrap_or(0.0);
        if !offset.is_finite() {
            return Err(bad("transfer.offset must be finite"));
        }
        let (estimator, kappa) = match raw.estimator {
            Some(e) => {
                let kappa = e.rate_kappa.unwrap_or(DEFAULT_KAPPA);
                (Some(parse_estimator(&e)?), kappa)
            }
            None => (None, DEFAULT_KAPPA),
        };
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(bad(format!("estimator.rate_kappa must lie in (0, 1], got {kappa}")));
        }
        let sweep_m = match raw.sweep {
            Some(s) => {
                check_sweep(&s.m)?;
                Some(s.m)
            }
            None => None,
        };
        let budget = raw.budget.unwrap_or(AuditConfig::default().budget);
        if budget == 0 {
            return Err(bad("budget must be positive"));
        }
        let cfg = ExperimentConfig {
            source,
            transfer_kind: t.kind,
            h_policy: t.h_policy,
            offset,
            aggregate: t.aggregate.unwrap_or_default(),
            estimator,
            kappa,
            mc_samples,
            mc_seed: t.seed.unwrap_or(seed),
            seed,
            sweep_m,
            certificate: raw.certificate,
            budget,
            out: raw.out,
        };
        if let InstanceSource::Custom(c) = &cfg.source {
            c.check()?;
        }
        Ok(cfg)
    }

    /// Replaces the master seed and the Monte Carlo seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.mc_seed = seed;
    }

    pub fn scenario_name(&self) -> &str {
        match &self.source {
            InstanceSource::Registered(s) => s.name(),
            InstanceSource::Custom(c) => &c.name,
        }
    }

    pub fn audit_config(&self) -> AuditConfig {
        AuditConfig {
            sampling: Sampling { samples: self.mc_samples, seed: self.mc_seed, force: false },
            budget: self.budget,
        }
    }

    /// Builds the instance and applies the rule and estimator overrides.
    pub fn build(&self) -> Result<Scenario> {
        let mut scenario = match &self.source {
            InstanceSource::Registered(s) => s.build()?,
            InstanceSource::Custom(c) => Scenario {
                instance: c.build()?,
                rule: TransferRule::pivot(TransferKind::DataDrivenVcg),
                estimator: EstimatorSpec::ExPost,
            },
        };
        if let Some(kind) = self.transfer_kind {
            scenario.rule.kind = kind;
        }
        if let Some(h) = self.h_policy {
            scenario.rule.h_policy = h;
        }
        scenario.rule.offset = self.offset;
        scenario.rule.aggregate = self.aggregate;
        if let Some(e) = &self.estimator {
            scenario.estimator = e.clone();
        }
        Ok(scenario)
    }
}

/// Sweep sizes must be positive and strictly increasing.
pub fn check_sweep(ms: &[u64]) -> Result<()> {
    if ms.is_empty() {
        return Err(bad("sweep.m must be nonempty"));
    }
    if ms[0] == 0 {
        return Err(bad("sweep.m entries must be positive"));
    }
    if ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("sweep.m must be strictly increasing"));
    }
    Ok(())
}

fn parse_estimator(e: &RawEstimator) -> Result<EstimatorSpec> {
    let need_m = || e.m.ok_or_else(|| bad(format!("estimator `{}` needs `m`", e.kind)));
    let spec = match e.kind.as_str() {
        "ex_post" => EstimatorSpec::ExPost,
        "leave_one_out" => EstimatorSpec::LeaveOneOut,
        "unbiased_noise" => EstimatorSpec::UnbiasedNoise {
            h: e.noise_h.ok_or_else(|| bad("estimator `unbiased_noise` needs `noise_h`"))?,
        },
        "sample_mean" => {
            let tau = e.tau.unwrap_or(1.0);
            let noise = match e.noise.as_deref().unwrap_or("gaussian") {
                "gaussian" => NoiseLaw::Gaussian { tau },
                "rademacher" => NoiseLaw::Rademacher { tau },
                other => return Err(bad(format!("unknown noise law `{other}`"))),
            };
            EstimatorSpec::SampleMean { m: need_m()?, noise, clamp: e.clamp.unwrap_or(true) }
        }
        "bernoulli_ctr" => EstimatorSpec::BernoulliCtr { m: need_m()? },
        other => return Err(bad(format!("unknown estimator kind `{other}`"))),
    };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    Ok(spec)
}

/// A grid point written as a number or an array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PointSpec {
    fn to_point(&self) -> Point {
        match self {
            PointSpec::Scalar(v) => vec![*v],
            PointSpec::Vector(v) => v.clone(),
        }
    }
}

fn points(p: &[PointSpec]) -> Vec<Point> {
    p.iter().map(PointSpec::to_point).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub points: Vec<PointSpec>,
    /// Uniform when absent.
    pub prior: Option<Vec<f64>>,
}

impl GridSpec {
    fn prior(&self) -> Vec<f64> {
        self.prior
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.points.len().max(1) as f64; self.points.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentKernel {
    pub signals: Vec<PointSpec>,
    /// `kernel[ω][s]`.
    pub kernel: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Independent { agents: Vec<AgentKernel> },
    /// `kernel[ω][profile]`, profiles in mixed-radix order with agent 0 most
    /// significant.
    Joint { signals: Vec<Vec<PointSpec>>, kernel: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySpec {
    /// `quadratic_loss` or `ctr_linear`.
    Builtin { name: String },
    /// Payoff expression over `x0…`, `w0…`, `theta0…` (own type), `type{j}_{d}`
    /// (any agent's type) and `i` (agent index).
    Expression { expr: OneOrMany, lipschitz: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeSpec {
    Finite { points: Vec<PointSpec> },
    Simplex { tokens: usize, resolution: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AllocationSpec {
    #[default]
    GridArgmax,
    Kl { alpha: f64, reference: Option<Vec<f64>> },
}

/// Instance described directly in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomInstance {
    #[serde(default = "custom_name")]
    pub name: String,
    pub agents: usize,
    pub state_grid: GridSpec,
    pub type_grids: Vec<GridSpec>,
    pub signal_kernels: KernelSpec,
    pub utility: UtilitySpec,
    pub outcome_space: OutcomeSpec,
    #[serde(default)]
    pub allocation: AllocationSpec,
    #[serde(default)]
    pub full_support: bool,
}

fn custom_name() -> String {
    "custom".into()
}

impl CustomInstance {
    /// Structural checks that need no instance build.
    fn check(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(bad("instance.agents must be positive"));
        }
        if self.type_grids.len() != self.agents {
            return Err(bad("instance.type_grids needs one grid per agent"));
        }
        let signal_grids = match &self.signal_kernels {
            KernelSpec::Independent { agents } => agents.len(),
            KernelSpec::Joint { signals, .. } => signals.len(),
        };
        if signal_grids != self.agents {
            return Err(bad("instance.signal_kernels needs one signal grid per agent"));
        }
        if let UtilitySpec::Expression { expr: OneOrMany::Many(v), .. } = &self.utility {
            if v.len() != self.agents {
                return Err(bad("utility expression list needs one entry per agent"));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Instance> {
        self.check()?;
        let as_cfg = |e: Error| match e {
            Error::InvalidInstance(m) | Error::InvalidScenarioParameters(m) => bad(m),
            other => other,
        };
        let states = Grid::new(points(&self.state_grid.points)).map_err(as_cfg)?;
        let (signal_grids, kernel) = match &self.signal_kernels {
            KernelSpec::Independent { agents } => (
                agents.iter().map(|a| points(&a.signals)).collect::<Vec<_>>(),
                SignalKernel::Independent(agents.iter().map(|a| a.kernel.clone()).collect()),
            ),
            KernelSpec::Joint { signals, kernel } => {
                (signals.iter().map(|s| points(s)).collect(), SignalKernel::Joint(kernel.clone()))
            }
        };
        let agents = self
            .type_grids
            .iter()
            .zip(signal_grids)
            .map(|(t, s)| Ok(AgentGrids { types: Grid::new(points(&t.points))?, signals: Grid::new(s)? }))
            .collect::<Result<Vec<_>>>()
            .map_err(as_cfg)?;
        let outcomes = match &self.outcome_space {
            OutcomeSpec::Finite { points: p } => OutcomeSpace::Finite(points(p)),
            OutcomeSpec::Simplex { tokens, resolution } => {
                OutcomeSpace::Simplex { tokens: *tokens, resolution: *resolution }
            }
        };
        let allocation = match &self.allocation {
            AllocationSpec::GridArgmax => AllocationRule::grid_argmax(),
            AllocationSpec::Kl { alpha, reference } => {
                let OutcomeSpace::Simplex { tokens, .. } = outcomes else {
                    return Err(bad("kl allocation needs a simplex outcome space"));
                };
                let reference = reference.clone().unwrap_or_else(|| vec![1.0 / tokens as f64; tokens]);
                if reference.len() != tokens {
                    return Err(bad("kl reference has the wrong length"));
                }
                AllocationRule::kl(KlObjective { alpha: *alpha, reference: ReferenceRule::Constant(reference) })
            }
        };
        let utility = self.utility(&states, &agents, &outcomes)?;
        Instance::new(InstanceParts {
            name: self.name.clone(),
            states,
            agents,
            prior: JointPrior {
                state: self.state_grid.prior(),
                types: self.type_grids.iter().map(GridSpec::prior).collect(),
                signals: kernel,
            },
            utility,
            outcomes,
            allocation,
            closed_form: None,
            full_support: self.full_support,
        })
        .map_err(as_cfg)
    }

    fn utility(&self, states: &Grid, agents: &[AgentGrids], outcomes: &OutcomeSpace) -> Result<Arc<dyn Utility>> {
        let abs_max = |pts: &[Point]| pts.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
        let theta_max = agents.iter().map(|a| abs_max(a.types.points())).fold(0.0, f64::max);
        match &self.utility {
            UtilitySpec::Builtin { name } => match name.as_str() {
                "quadratic_loss" => {
                    let x_max = abs_max(&outcomes.candidates());
                    Ok(Arc::new(QuadraticUtility::new(x_max, theta_max, abs_max(states.points()))))
                }
                "ctr_linear" => Ok(Arc::new(CtrUtility::new(theta_max))),
                other => Err(bad(format!("unknown builtin utility `{other}`"))),
            },
            UtilitySpec::Expression { expr, lipschitz } => {
                let sources = match expr {
                    OneOrMany::One(e) => vec![e.clone(); self.agents],
                    OneOrMany::Many(v) => v.clone(),
                };
                let u = ExpressionUtility::new(&sources, *lipschitz)?;
                u.probe(states, agents, outcomes)?;
                Ok(Arc::new(u))
            }
        }
    }
}

/// Utility given by one arithmetic expression per agent.
#[derive(Debug)]
pub struct ExpressionUtility {
    nodes: Vec<Node>,
    lipschitz: Option<f64>,
    reads_others: bool,
}

impl ExpressionUtility {
    pub fn new(sources: &[String], lipschitz: Option<f64>) -> Result<Self> {
        let nodes = sources
            .iter()
            .map(|s| build_operator_tree(s).map_err(|e| bad(format!("utility expression `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let reads_others = nodes.iter().any(|n| n.iter_variable_identifiers().any(|v| v.starts_with("type")));
        Ok(ExpressionUtility { nodes, lipschitz, reads_others })
    }

    fn eval(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> std::result::Result<f64, String> {
        let mut ctx = HashMapContext::new();
        let mut set = |k: String, v: Value| ctx.set_value(k, v).map_err(|e| e.to_string());
        set("i".into(), Value::Int(agent as i64))?;
        for (d, v) in x.iter().enumerate() {
            set(format!("x{d}"), Value::Float(*v))?;
        }
        for (d, v) in state.iter().enumerate() {
            set(format!("w{d}"), Value::Float(*v))?;
        }
        for (d, v) in types[agent].iter().enumerate() {
            set(format!("theta{d}"), Value::Float(*v))?;
        }
        if self.reads_others {
            for (j, t) in types.iter().enumerate() {
                for (d, v) in t.iter().enumerate() {
                    set(format!("type{j}_{d}"), Value::Float(*v))?;
                }
            }
        }
        self.nodes[agent].eval_number_with_context(&ctx).map_err(|e| e.to_string())
    }

    /// Evaluates every agent once at the first grid points so that unknown
    /// identifiers surface as config errors.
    fn probe(&self, states: &Grid, agents: &[AgentGrids], outcomes: &OutcomeSpace) -> Result<()> {
        let x = outcomes.candidates().first().cloned().ok_or(Error::EmptyOutcomeSpace)?;
        let types: Vec<&[f64]> = agents.iter().map(|a| a.types.point(0)).collect();
        for i in 0..self.nodes.len() {
            let v = self.eval(i, &x, states.point(0), &types).map_err(|e| bad(format!("utility of agent {i}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("utility of agent {i} is not finite")));
            }
        }
        Ok(())
    }
}

impl Utility for ExpressionUtility {
    fn payoff(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> f64 {
        self.eval(agent, x, state, types).unwrap_or(f64::NAN)
    }

    fn state_lipschitz(&self, _agent: usize) -> Option<f64> {
        self.lipschitz
    }

    fn reads_other_types(&self) -> bool {
        self.reads_others
    }

    fn name(&self) -> &str {
        "expression"
    }
}
