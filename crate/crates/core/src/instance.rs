//! Instances on finite grids: states, preference types, signals, the joint
//! prior, and per-agent payoff plugins.
//!
//! The prior is stored in product form `P(ω)·Π_i P(θ_i)·P(s | ω)`, which makes
//! every signal sufficient for the state with respect to the agent's own
//! preference type. [`Instance::check_sufficiency`] still verifies this on the
//! materialized table.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use crate::allocation::{AllocationRule, ClosedForm};
use crate::error::{Error, Result};

/// A point in a Euclidean grid.
pub type Point = Vec<f64>;

/// Probability tolerance for exact-table arithmetic.
pub const PROB_TOL: f64 = 1e-12;

/// Ordered, nonempty list of distinct points of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<Point>,
}

impl Grid {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidInstance("grid is empty".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidInstance("grid points have dimension 0".into()));
        }
        for (k, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::InvalidInstance(format!(
                    "grid point {k} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInstance(format!("grid point {k} is not finite")));
            }
            if points[..k].iter().any(|q| q == p) {
                return Err(Error::InvalidInstance(format!("grid point {k} is duplicated")));
            }
        }
        Ok(Grid { points })
    }

    /// One-dimensional grid from scalar values.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Grid::new(values.iter().map(|&v| vec![v]).collect())
    }

    /// `n` evenly spaced scalar points on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInstance("linspace with zero points".into()));
        }
        if n == 1 {
            return Grid::scalar(&[lo]);
        }
        let step = (hi - lo) / (n - 1) as f64;
        Grid::scalar(&(0..n).map(|k| lo + step * k as f64).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Index of the point equal to `p` within `tol` in every coordinate.
    pub fn find(&self, p: &[f64], tol: f64) -> Option<usize> {
        self.points
            .iter()
            .position(|q| q.len() == p.len() && q.iter().zip(p).all(|(a, b)| (a - b).abs() <= tol))
    }

    /// Coordinate-wise bounding box.
    pub fn bounds(&self) -> (Point, Point) {
        let dim = self.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in &self.points {
            for d in 0..dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }
}

/// Mixed-radix enumeration of per-agent index profiles. Agent 0 is the most
/// significant digit, so profile indices follow lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedRadix {
    sizes: Vec<usize>,
}

impl MixedRadix {
    pub fn new(sizes: Vec<usize>) -> Self {
        MixedRadix { sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn index(&self, digits: &[usize]) -> usize {
        debug_assert_eq!(digits.len(), self.sizes.len());
        digits
            .iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&d, &size)| acc * size + d)
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut digits = vec![0; self.sizes.len()];
        for (slot, &size) in digits.iter_mut().zip(&self.sizes).rev() {
            *slot = index % size;
            index /= size;
        }
        digits
    }
}

/// Preference-type and signal grids for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrids {
    pub types: Grid,
    pub signals: Grid,
}

/// Conditional law of signals given the state.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalKernel {
    /// `kernel[i][ω][s_i] = P(s_i | ω)`, signals conditionally independent.
    Independent(Vec<Vec<Vec<f64>>>),
    /// `kernel[ω][s] = P(s | ω)` over whole signal profiles, allowing arbitrary
    /// correlation. Profiles are indexed by [`MixedRadix`] over signal grids.
    Joint(Vec<Vec<f64>>),
}

/// Product-form joint prior over (state, type profile, signal profile).
#[derive(Debug, Clone, PartialEq)]
pub struct JointPrior {
    pub state: Vec<f64>,
    /// Independent per-agent type marginals.
    pub types: Vec<Vec<f64>>,
    pub signals: SignalKernel,
}

/// Payoff plugin `u_i(x, ω, θ)`.
///
/// `types` holds every agent's reported or true type vector; built-in payoffs
/// read only `types[agent]`, but interdependent-preference scenarios read
/// others' entries too.
pub trait Utility: Send + Sync + fmt::Debug {
    fn payoff(&self, agent: usize, x: &[f64], state: &[f64], types: &[&[f64]]) -> f64;

    /// Declared Lipschitz constant of `ω ↦ u_i(x, ω, θ)`, uniform in `x, θ`.
    fn state_lipschitz(&self, _agent: usize) -> Option<f64> {
        None
    }

    /// Declared `‖u_i‖_∞` over the grids.
    fn sup_bound(&self, _agent: usize) -> Option<f64> {
        None
    }

    /// True when `u_i` depends on other agents' types.
    fn reads_other_types(&self) -> bool {
        false
    }

    fn name(&self) -> &str;
}

/// Feasible outcomes: a finite list of points or the simplex over tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeSpace {
    Finite(Vec<Point>),
    /// `Δ(T)` with `|T| = tokens`; `resolution` cells per coordinate for
    /// brute-force search.
    Simplex { tokens: usize, resolution: usize },
}

impl OutcomeSpace {
    pub fn validate(&self) -> Result<()> {
        match self {
            OutcomeSpace::Finite(points) => {
                if points.is_empty() {
                    return Err(Error::EmptyOutcomeSpace);
                }
                Grid::new(points.clone()).map(|_| ())
            }
            OutcomeSpace::Simplex { tokens, resolution } => {
                if *tokens == 0 {
                    return Err(Error::EmptyOutcomeSpace);
                }
                if *resolution < 2 {
                    return Err(Error::InvalidInstance(
                        "simplex resolution must be at least 2".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Enumerates candidate points: the finite list, or every simplex point
    /// whose coordinates are multiples of `1 / resolution`.
    pub fn candidates(&self) -> Cow<'_, [Point]> {
        match self {
            OutcomeSpace::Finite(points) => Cow::Borrowed(points),
            OutcomeSpace::Simplex { tokens, resolution } => {
                Cow::Owned(simplex_lattice(*tokens, *resolution))
            }
        }
    }
}

/// All points of the `tokens`-simplex on the lattice with spacing `1/resolution`.
pub fn simplex_lattice(tokens: usize, resolution: usize) -> Vec<Point> {
    fn rec(left: usize, slots: usize, res: usize, cur: &mut Vec<usize>, out: &mut Vec<Point>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / res as f64).collect());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, slots - 1, res, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if tokens > 0 {
        rec(resolution, tokens, resolution, &mut Vec::new(), &mut out);
    }
    out
}

/// A joint report (or true type) profile as per-agent grid indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Profile {
    pub types: Vec<usize>,
    pub signals: Vec<usize>,
}

impl Profile {
    pub fn new(types: Vec<usize>, signals: Vec<usize>) -> Self {
        Profile { types, signals }
    }

    /// The profile with agent `i`'s report replaced by `(theta, signal)`.
    pub fn with_report(&self, i: usize, theta: usize, signal: usize) -> Profile {
        let mut p = self.clone();
        p.types[i] = theta;
        p.signals[i] = signal;
        p
    }

    pub fn agents(&self) -> usize {
        self.types.len()
    }
}

/// Everything needed to assemble an [`Instance`].
#[derive(Debug, Clone)]
pub struct InstanceParts {
    pub name: String,
    pub states: Grid,
    pub agents: Vec<AgentGrids>,
    pub prior: JointPrior,
    pub utility: Arc<dyn Utility>,
    pub outcomes: OutcomeSpace,
    pub allocation: AllocationRule,
    pub closed_form: Option<Arc<dyn ClosedForm>>,
    pub full_support: bool,
}

/// Immutable instance with cached full-profile posteriors.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub states: Grid,
    pub agents: Vec<AgentGrids>,
    pub prior: JointPrior,
    pub utility: Arc<dyn Utility>,
    pub outcomes: OutcomeSpace,
    pub allocation: AllocationRule,
    pub closed_form: Option<Arc<dyn ClosedForm>>,
    pub full_support: bool,
    type_space: MixedRadix,
    signal_space: MixedRadix,
    /// `P(ω | s)` per full signal profile; `None` for zero-mass profiles.
    posteriors: Vec<Option<Vec<f64>>>,
}

impl Instance {
    pub fn new(parts: InstanceParts) -> Result<Self> {
        let InstanceParts {
            name,
            states,
            agents,
            prior,
            utility,
            outcomes,
            allocation,
            closed_form,
            full_support,
        } = parts;
        if agents.is_empty() {
            return Err(Error::InvalidInstance("instance has no agents".into()));
        }
        outcomes.validate()?;
        let type_space = MixedRadix::new(agents.iter().map(|a| a.types.len()).collect());
        let signal_space = MixedRadix::new(agents.iter().map(|a| a.signals.len()).collect());
        validate_prior(&prior, &states, &agents, &signal_space, full_support)?;

        let mut inst = Instance {
            name,
            states,
            agents,
            prior,
            utility,
            outcomes,
            allocation,
            closed_form,
            full_support,
            type_space,
            signal_space,
            posteriors: Vec::new(),
        };
        let all: Vec<usize> = (0..inst.n()).collect();
        inst.posteriors = (0..inst.signal_space.len())
            .map(|k| {
                let signals = inst.signal_space.decode(k);
                inst.posterior_given(&all, &signals).ok()
            })
            .collect();
        inst.validate_utility()?;
        Ok(inst)
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn type_space(&self) -> &MixedRadix {
        &self.type_space
    }

    pub fn signal_space(&self) -> &MixedRadix {
        &self.signal_space
    }

    /// Number of full (type, signal) profiles.
    pub fn profile_count(&self) -> usize {
        self.type_space.len() * self.signal_space.len()
    }

    /// Profile with joint index `k`; signals vary fastest.
    pub fn profile(&self, k: usize) -> Profile {
        let ns = self.signal_space.len();
        Profile {
            types: self.type_space.decode(k / ns),
            signals: self.signal_space.decode(k % ns),
        }
    }

    pub fn profile_index(&self, p: &Profile) -> usize {
        self.type_space.index(&p.types) * self.signal_space.len() + self.signal_space.index(&p.signals)
    }

    /// Type vectors for a profile of type indices.
    pub fn type_values(&self, types: &[usize]) -> Vec<&[f64]> {
        types
            .iter()
            .zip(&self.agents)
            .map(|(&t, a)| a.types.point(t))
            .collect()
    }

    /// Prior mass of the cell `(ω, θ, s)`.
    pub fn mass(&self, state: usize, types: &[usize], signals: &[usize]) -> f64 {
        let type_mass: f64 = types
            .iter()
            .enumerate()
            .map(|(i, &t)| self.prior.types[i][t])
            .product();
        self.prior.state[state] * type_mass * self.signal_likelihood(state, signals)
    }

    /// `P(s | ω)` for a full signal profile.
    pub fn signal_likelihood(&self, state: usize, signals: &[usize]) -> f64 {
        match &self.prior.signals {
            SignalKernel::Independent(k) => signals
                .iter()
                .enumerate()
                .map(|(i, &s)| k[i][state][s])
                .product(),
            SignalKernel::Joint(k) => k[state][self.signal_space.index(signals)],
        }
    }

    /// Bayes posterior over states given the signals of `agents` (values taken
    /// from the full-length `signals` slice; other entries are ignored).
    pub fn posterior_given(&self, agents: &[usize], signals: &[usize]) -> Result<Vec<f64>> {
        let weights: Vec<f64> = match &self.prior.signals {
            SignalKernel::Independent(k) => (0..self.states.len())
                .map(|w| {
                    agents
                        .iter()
                        .map(|&i| k[i][w][signals[i]])
                        .product::<f64>()
                        * self.prior.state[w]
                })
                .collect(),
            SignalKernel::Joint(k) => {
                let mut weights = vec![0.0; self.states.len()];
                for idx in 0..self.signal_space.len() {
                    let profile = self.signal_space.decode(idx);
                    if agents.iter().all(|&i| profile[i] == signals[i]) {
                        for (w, slot) in weights.iter_mut().enumerate() {
                            *slot += k[w][idx];
                        }
                    }
                }
                weights
                    .iter()
                    .zip(&self.prior.state)
                    .map(|(a, b)| a * b)
                    .collect()
            }
        };
        normalize(weights)
    }

    /// Posterior conditioned on a subset of `(agent, signal index)` pairs.
    pub fn posterior(&self, conditioning: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut signals = vec![0; self.n()];
        let mut agents = Vec::with_capacity(conditioning.len());
        for &(i, s) in conditioning {
            if i >= self.n() || s >= self.agents[i].signals.len() {
                return Err(Error::InvalidInstance(format!(
                    "conditioning on agent {i} signal {s} is off-grid"
                )));
            }
            signals[i] = s;
            agents.push(i);
        }
        self.posterior_given(&agents, &signals)
    }

    /// Cached posterior for a full signal profile.
    pub fn posterior_full(&self, signals: &[usize]) -> Result<&[f64]> {
        self.posteriors[self.signal_space.index(signals)]
            .as_deref()
            .ok_or(Error::ZeroMassEvent)
    }

    /// `v_i(x, θ_i, s) = Σ_ω P(ω | s) u_i(x, ω, θ)`.
    pub fn interim_payoff(
        &self,
        agent: usize,
        x: &[f64],
        types: &[&[f64]],
        signals: &[usize],
    ) -> Result<f64> {
        let post = self.posterior_full(signals)?;
        Ok(self.expected_payoff(agent, x, types, post))
    }

    /// Payoff of `agent` averaged over a given state distribution.
    pub fn expected_payoff(&self, agent: usize, x: &[f64], types: &[&[f64]], post: &[f64]) -> f64 {
        post.iter()
            .enumerate()
            .filter(|(_, &p)| p != 0.0)
            .map(|(w, &p)| p * self.utility.payoff(agent, x, self.states.point(w), types))
            .sum()
    }

    /// Posterior mean of each state coordinate.
    pub fn posterior_mean(&self, post: &[f64]) -> Point {
        let mut mean = vec![0.0; self.states.dim()];
        for (w, &p) in post.iter().enumerate() {
            for (m, v) in mean.iter_mut().zip(self.states.point(w)) {
                *m += p * v;
            }
        }
        mean
    }

    /// Posterior variance of the first state coordinate.
    pub fn posterior_variance(&self, post: &[f64]) -> f64 {
        let mean = self.posterior_mean(post)[0];
        post.iter()
            .enumerate()
            .map(|(w, &p)| p * (self.states.point(w)[0] - mean).powi(2))
            .sum()
    }

    /// Largest `‖P(·|s_i, θ_i) − P(·|s_i)‖₁` over agents and positive-mass
    /// `(θ_i, s_i)`, computed by summing the materialized prior table.
    pub fn check_sufficiency(&self) -> f64 {
        let nw = self.states.len();
        let mut worst: f64 = 0.0;
        for i in 0..self.n() {
            let nt = self.agents[i].types.len();
            let ns = self.agents[i].signals.len();
            // joint[w][t][s] = P(ω, θ_i, s_i)
            let mut joint = vec![vec![vec![0.0; ns]; nt]; nw];
            for tk in 0..self.type_space.len() {
                let types = self.type_space.decode(tk);
                for sk in 0..self.signal_space.len() {
                    let signals = self.signal_space.decode(sk);
                    for (w, plane) in joint.iter_mut().enumerate() {
                        plane[types[i]][signals[i]] += self.mass(w, &types, &signals);
                    }
                }
            }
            for s in 0..ns {
                let by_signal: Vec<f64> = (0..nw)
                    .map(|w| (0..nt).map(|t| joint[w][t][s]).sum())
                    .collect();
                let Ok(base) = normalize(by_signal) else { continue };
                for t in 0..nt {
                    let Ok(cond) = normalize((0..nw).map(|w| joint[w][t][s]).collect()) else {
                        continue;
                    };
                    let l1: f64 = cond.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
                    worst = worst.max(l1);
                }
            }
        }
        worst
    }

    /// Largest violation of `|u(x,ω) − u(x,ω′)| ≤ L‖ω − ω′‖` over candidate
    /// allocations, grid types and state pairs, for agents declaring `L`.
    pub fn check_state_lipschitz(&self) -> f64 {
        let candidates = self.outcomes.candidates();
        let mut worst: f64 = 0.0;
        for i in 0..self.n() {
            let Some(l) = self.utility.state_lipschitz(i) else { continue };
            for tk in 0..self.type_space.len() {
                let tidx = self.type_space.decode(tk);
                let types = self.type_values(&tidx);
                for x in candidates.iter() {
                    for a in 0..self.states.len() {
                        for b in (a + 1)..self.states.len() {
                            let (wa, wb) = (self.states.point(a), self.states.point(b));
                            let diff = (self.utility.payoff(i, x, wa, &types)
                                - self.utility.payoff(i, x, wb, &types))
                            .abs();
                            worst = worst.max(diff - l * euclid(wa, wb));
                        }
                    }
                }
            }
        }
        worst
    }

    fn validate_utility(&self) -> Result<()> {
        let candidates = self.outcomes.candidates();
        let probe = candidates.iter().take(64);
        for x in probe {
            for tk in 0..self.type_space.len().min(64) {
                let types = self.type_values(&self.type_space.decode(tk));
                for w in 0..self.states.len() {
                    for i in 0..self.n() {
                        let u = self.utility.payoff(i, x, self.states.point(w), &types);
                        if !u.is_finite() {
                            return Err(Error::InvalidInstance(format!(
                                "utility `{}` is not finite for agent {i}",
                                self.utility.name()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn validate_prior(
    prior: &JointPrior,
    states: &Grid,
    agents: &[AgentGrids],
    signal_space: &MixedRadix,
    full_support: bool,
) -> Result<()> {
    let check_dist = |what: &str, d: &[f64], len: usize| -> Result<()> {
        if d.len() != len {
            return Err(Error::InvalidInstance(format!(
                "{what} has {} entries, expected {len}",
                d.len()
            )));
        }
        if d.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInstance(format!("{what} has a negative mass")));
        }
        if full_support && d.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidInstance(format!("{what} lacks full support")));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidInstance(format!("{what} sums to {total}")));
        }
        Ok(())
    };
    check_dist("state prior", &prior.state, states.len())?;
    if prior.types.len() != agents.len() {
        return Err(Error::InvalidInstance("one type prior per agent required".into()));
    }
    for (i, (t, a)) in prior.types.iter().zip(agents).enumerate() {
        check_dist(&format!("type prior of agent {i}"), t, a.types.len())?;
    }
    match &prior.signals {
        SignalKernel::Independent(k) => {
            if k.len() != agents.len() {
                return Err(Error::InvalidInstance("one signal kernel per agent required".into()));
            }
            for (i, rows) in k.iter().enumerate() {
                if rows.len() != states.len() {
                    return Err(Error::InvalidInstance(format!(
                        "signal kernel of agent {i} needs one row per state"
                    )));
                }
                for (w, row) in rows.iter().enumerate() {
                    check_dist(
                        &format!("signal kernel of agent {i} at state {w}"),
                        row,
                        agents[i].signals.len(),
                    )?;
                }
            }
        }
        SignalKernel::Joint(k) => {
            if k.len() != states.len() {
                return Err(Error::InvalidInstance("joint kernel needs one row per state".into()));
            }
            for (w, row) in k.iter().enumerate() {
                check_dist(&format!("joint signal kernel at state {w}"), row, signal_space.len())?;
            }
        }
    }
    Ok(())
}

/// Normalizes nonnegative weights; zero total mass is a [`Error::ZeroMassEvent`].
pub fn normalize(weights: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMassEvent);
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
