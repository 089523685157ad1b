//! Exhaustive unilateral-deviation audit, regret bounds, rate sweeps and the
//! impossibility certificate.

use rayon::prelude::*;
use serde::Serialize;

use crate::allocation::{argmax_lowest, grid_vs_closed_form_gap, AllocationMode};
use crate::error::{Error, Result};
use crate::estimators::{rate, EstimatorSpec, Support};
use crate::instance::{euclid, Instance, Profile};
use crate::stats::loglog_slope;
use crate::transfers::{state_stream_seed, HPolicy, ProfileTransfers, Sampling, TransferKind, TransferRule};

/// Zero-regret tolerance under exact laws.
pub const EXACT_TOL: f64 = 1e-9;
/// Standard errors allowed under sampled laws.
pub const MC_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditConfig {
    pub sampling: Sampling,
    /// Upper limit on utility/transfer evaluations.
    pub budget: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { sampling: Sampling::default(), budget: 2_000_000_000 }
    }
}

/// Best unilateral deviation of one agent at one true profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRecord {
    pub agent: usize,
    pub theta_idx: Vec<usize>,
    pub s_idx: Vec<usize>,
    pub best_dev_theta: usize,
    pub best_dev_s: usize,
    pub gain: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretReport {
    pub rows: Vec<DeviationRecord>,
    pub epsilon: f64,
    /// Standard error of the row attaining `epsilon`.
    pub epsilon_se: f64,
    /// True when every estimator law was evaluated exactly.
    pub exact: bool,
    /// Largest welfare shortfall of the outcome grid against the closed form,
    /// when both exist.
    pub discretization: Option<f64>,
}

impl RegretReport {
    /// `1e-9` (plus the discretization bound) for exact laws, three standard
    /// errors otherwise.
    pub fn tolerance(&self) -> f64 {
        let base = if self.exact { EXACT_TOL } else { MC_SIGMAS * self.epsilon_se.max(0.0) + EXACT_TOL };
        base + self.discretization.unwrap_or(0.0).abs()
    }

    pub fn within_tolerance(&self) -> bool {
        self.epsilon <= self.tolerance()
    }

    pub fn row(&self, agent: usize, profile: &Profile) -> Option<&DeviationRecord> {
        self.rows
            .iter()
            .find(|r| r.agent == agent && r.theta_idx == profile.types && r.s_idx == profile.signals)
    }
}

/// Per-state estimator supports shared by every profile.
fn state_supports(inst: &Instance, estimator: &EstimatorSpec, sampling: Sampling) -> Result<Vec<Support>> {
    let bounds = inst.states.bounds();
    let m = estimator.m().unwrap_or(0);
    (0..inst.states.len())
        .map(|w| {
            let law = estimator.conditional_law(inst.states.point(w), &bounds)?;
            Ok(law.support_with(sampling.samples, state_stream_seed(sampling.seed, m, w), sampling.force))
        })
        .collect()
}

/// Allocation and `E_{ω̂|ω} t_i` per agent and state for one reported profile.
struct ProfileTable<'a> {
    ctx: ProfileTransfers<'a>,
    /// `mean[i][ω]`, `var[i][ω]` (variance of the mean; zero when exact).
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
}

fn profile_table<'a>(
    inst: &'a Instance,
    rule: &'a TransferRule,
    profile: &Profile,
    supports: Option<&[Support]>,
) -> Result<Option<ProfileTable<'a>>> {
    let ctx = match ProfileTransfers::new(inst, rule, profile) {
        Ok(c) => c,
        Err(Error::ZeroMassEvent) => return Ok(None),
        Err(e) => return Err(e),
    };
    let n = inst.n();
    let nw = inst.states.len();
    let mut mean = vec![vec![0.0; nw]; n];
    let mut var = vec![vec![0.0; nw]; n];
    for i in 0..n {
        match supports {
            None => {
                let t = ctx.transfer(i, None)?;
                mean[i].iter_mut().for_each(|v| *v = t);
            }
            Some(sup) => {
                for (w, s) in sup.iter().enumerate() {
                    let mut acc = 0.0;
                    let mut vals = Vec::with_capacity(if s.sampled { s.points.len() } else { 0 });
                    for (d, q) in s.points.iter().zip(&s.weights) {
                        let t = ctx.transfer(i, Some(d))?;
                        acc += q * t;
                        if s.sampled {
                            vals.push(t);
                        }
                    }
                    mean[i][w] = acc;
                    if vals.len() > 1 {
                        let k = vals.len() as f64;
                        var[i][w] = vals.iter().map(|v| (v - acc).powi(2)).sum::<f64>() / (k - 1.0) / k;
                    }
                }
            }
        }
    }
    Ok(Some(ProfileTable { ctx, mean, var }))
}

/// Evaluations the audit would perform; compared against the budget.
pub fn audit_cost(inst: &Instance, rule: &TransferRule, estimator: &EstimatorSpec, sampling: Sampling) -> u64 {
    let p = inst.profile_count() as u64;
    let n = inst.n() as u64;
    let nw = inst.states.len() as u64;
    let bounds = inst.states.bounds();
    let draws: u64 = if rule.kind.is_data_driven() {
        (0..inst.states.len())
            .map(|w| match estimator.conditional_law(inst.states.point(w), &bounds) {
                Ok(crate::estimators::ConditionalLaw::Exact(m)) if !sampling.force => m.len() as u64,
                _ => sampling.samples.max(1) as u64,
            })
            .sum()
    } else {
        1
    };
    let deviations: u64 = inst
        .agents
        .iter()
        .map(|a| (a.types.len() * a.signals.len()) as u64)
        .sum();
    p.saturating_mul(n).saturating_mul(draws).saturating_add(p.saturating_mul(deviations).saturating_mul(2 * nw))
}

/// Posterior-equilibrium regret of truthful reporting: for every agent and
/// true profile, the largest gain over all unilateral deviations `(θ_i′, s_i′)`.
pub fn posterior_regret(
    inst: &Instance,
    rule: &TransferRule,
    estimator: &EstimatorSpec,
    cfg: &AuditConfig,
) -> Result<RegretReport> {
    let needed = audit_cost(inst, rule, estimator, cfg.sampling);
    if needed > cfg.budget {
        return Err(Error::BudgetExceeded { needed, budget: cfg.budget });
    }
    let supports = if rule.kind.is_data_driven() {
        Some(state_supports(inst, estimator, cfg.sampling)?)
    } else {
        None
    };
    let exact = supports.as_ref().is_none_or(|s| s.iter().all(|s| !s.sampled));

    let tables: Vec<Option<ProfileTable>> = (0..inst.profile_count())
        .into_par_iter()
        .map(|k| profile_table(inst, rule, &inst.profile(k), supports.as_deref()))
        .collect::<Result<_>>()?;

    let rows: Vec<Vec<DeviationRecord>> = (0..inst.profile_count())
        .into_par_iter()
        .map(|k| audit_profile(inst, &tables, supports.as_deref(), k))
        .collect::<Result<_>>()?;
    let rows: Vec<DeviationRecord> = rows.into_iter().flatten().collect();

    let (epsilon, epsilon_se) = rows
        .iter()
        .fold((0.0_f64, 0.0_f64), |(e, s), r| if r.gain > e { (r.gain, r.se) } else { (e, s) });
    Ok(RegretReport { rows, epsilon, epsilon_se, exact, discretization: discretization_bound(inst)? })
}

fn audit_profile(
    inst: &Instance,
    tables: &[Option<ProfileTable>],
    supports: Option<&[Support]>,
    k: usize,
) -> Result<Vec<DeviationRecord>> {
    let profile = inst.profile(k);
    let Some(truth) = &tables[k] else { return Ok(Vec::new()) };
    let post = inst.posterior_full(&profile.signals)?;
    let types = inst.type_values(&profile.types);
    let mut out = Vec::with_capacity(inst.n());
    for i in 0..inst.n() {
        let value = |tab: &ProfileTable| -> (f64, f64) {
            let v = inst.expected_payoff(i, tab.ctx.allocation(), &types, post);
            let t: f64 = post.iter().zip(&tab.mean[i]).map(|(p, t)| p * t).sum();
            let var: f64 = post.iter().zip(&tab.var[i]).map(|(p, v)| p * p * v).sum();
            (v + t, var)
        };
        let (base, base_var) = value(truth);
        let nt = inst.agents[i].types.len();
        let ns = inst.agents[i].signals.len();
        let mut gains = Vec::with_capacity(nt * ns);
        let mut vars = Vec::with_capacity(nt * ns);
        for th in 0..nt {
            for s in 0..ns {
                let dev = profile.with_report(i, th, s);
                let dk = inst.profile_index(&dev);
                if dk == k {
                    gains.push(0.0);
                    vars.push(0.0);
                    continue;
                }
                match &tables[dk] {
                    Some(tab) => {
                        let (v, var) = value(tab);
                        gains.push(v - base);
                        vars.push(var + base_var);
                    }
                    None => {
                        gains.push(f64::NEG_INFINITY);
                        vars.push(0.0);
                    }
                }
            }
        }
        let best = argmax_lowest(&gains).ok_or_else(|| Error::Numerical("no admissible deviation".into()))?;
        let dev = profile.with_report(i, best / ns, best % ns);
        let se = match (supports, &tables[inst.profile_index(&dev)]) {
            (Some(sup), Some(tab)) if sup.iter().any(|s| s.sampled) && dev != profile => {
                paired_se(&truth.ctx, &tab.ctx, i, post, sup)?
            }
            _ => vars[best].sqrt(),
        };
        out.push(DeviationRecord {
            agent: i,
            theta_idx: profile.types.clone(),
            s_idx: profile.signals.clone(),
            best_dev_theta: best / ns,
            best_dev_s: best % ns,
            gain: gains[best],
            se,
        });
    }
    Ok(out)
}

/// Standard error of a deviation gain from paired per-draw differences; the
/// common random numbers cancel most of the noise shared by both reports.
fn paired_se(
    truth: &ProfileTransfers,
    dev: &ProfileTransfers,
    i: usize,
    post: &[f64],
    supports: &[Support],
) -> Result<f64> {
    let mut var = 0.0;
    for (p, s) in post.iter().zip(supports) {
        if *p == 0.0 || !s.sampled || s.points.len() < 2 {
            continue;
        }
        let d = s
            .points
            .iter()
            .map(|w| Ok(dev.transfer(i, Some(w))? - truth.transfer(i, Some(w))?))
            .collect::<Result<Vec<f64>>>()?;
        let k = d.len() as f64;
        let mean = d.iter().sum::<f64>() / k;
        var += p * p * d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k;
    }
    Ok(var.sqrt())
}

/// Largest `|grid argmax welfare − closed-form welfare|` over profiles when the
/// instance allocates on a grid and also registers a closed form.
pub fn discretization_bound(inst: &Instance) -> Result<Option<f64>> {
    if inst.closed_form.is_none() || !matches!(inst.allocation.mode, AllocationMode::GridArgmax) {
        return Ok(None);
    }
    let mut worst: f64 = 0.0;
    for k in 0..inst.profile_count() {
        let p = inst.profile(k);
        match grid_vs_closed_form_gap(inst, &p.types, &p.signals) {
            Ok(g) => worst = worst.max(-g),
            Err(Error::ZeroMassEvent) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Some(worst))
}

/// `2·max_s Σ_{j≠i} L_j·E[‖ω − ω̂‖ | s]` with its standard error.
pub fn regret_upper_bound(
    inst: &Instance,
    i: usize,
    estimator: &EstimatorSpec,
    sampling: Sampling,
) -> Result<(f64, f64)> {
    let mut lip = 0.0;
    for j in (0..inst.n()).filter(|&j| j != i) {
        lip += inst.utility.state_lipschitz(j).ok_or(Error::MissingLipschitzConstant(j))?;
    }
    let supports = state_supports(inst, estimator, sampling)?;
    let dev: Vec<(f64, f64)> = supports
        .iter()
        .enumerate()
        .map(|(w, s)| {
            let state = inst.states.point(w);
            let d: Vec<f64> = s.points.iter().map(|p| euclid(p, state)).collect();
            let mean: f64 = d.iter().zip(&s.weights).map(|(a, q)| a * q).sum();
            let var = if s.sampled && d.len() > 1 {
                let k = d.len() as f64;
                d.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0) / k
            } else {
                0.0
            };
            (mean, var)
        })
        .collect();
    let mut best = (0.0_f64, 0.0_f64);
    for k in 0..inst.signal_space().len() {
        let signals = inst.signal_space().decode(k);
        let Ok(post) = inst.posterior_full(&signals) else { continue };
        let e: f64 = post.iter().zip(&dev).map(|(p, d)| p * d.0).sum();
        let var: f64 = post.iter().zip(&dev).map(|(p, d)| p * p * d.1).sum();
        if e > best.0 {
            best = (e, var);
        }
    }
    Ok((2.0 * lip * best.0, 2.0 * lip * best.1.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: u64,
    pub epsilon: f64,
    pub se: f64,
    pub bound: f64,
    pub bound_se: f64,
    pub r_m: f64,
    pub r_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSweep {
    pub rows: Vec<SweepRow>,
    pub kappa: f64,
    /// OLS slope of `ln ε_m` on `ln m` over rows with `ε_m` above tolerance.
    pub slope: Option<f64>,
    pub exact: bool,
}

impl RateSweep {
    fn tol(&self, r: &SweepRow) -> f64 {
        if self.exact {
            EXACT_TOL
        } else {
            MC_SIGMAS * r.se + EXACT_TOL
        }
    }

    /// `ε_m` never rises between consecutive rows beyond combined error.
    pub fn epsilon_nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let slack = if self.exact { EXACT_TOL } else { MC_SIGMAS * w[0].se.hypot(w[1].se) + EXACT_TOL };
            w[1].epsilon <= w[0].epsilon + slack
        })
    }

    /// `r_m·ε_m` never rises between consecutive rows beyond combined error.
    pub fn scaled_nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let slack = if self.exact {
                EXACT_TOL * w[1].r_m
            } else {
                MC_SIGMAS * (w[0].r_m * w[0].se).hypot(w[1].r_m * w[1].se) + EXACT_TOL * w[1].r_m
            };
            w[1].r_eps <= w[0].r_eps + slack
        })
    }

    /// `ε_m ≤ bound_m + 3·SE` on every row.
    pub fn bounded(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.epsilon <= r.bound + MC_SIGMAS * r.se.hypot(r.bound_se) + EXACT_TOL)
    }

    /// Every `ε_m` within its zero tolerance.
    pub fn all_zero(&self) -> bool {
        self.rows.iter().all(|r| r.epsilon <= self.tol(r))
    }
}

/// `ε_m`, the regret bound and `r_m·ε_m` for each sample size.
pub fn convergence_sweep(
    inst: &Instance,
    rule: &TransferRule,
    family: &EstimatorSpec,
    ms: &[u64],
    kappa: f64,
    cfg: &AuditConfig,
) -> Result<RateSweep> {
    sweep_with_reports(inst, rule, family, ms, kappa, cfg).map(|(s, _)| s)
}

/// [`convergence_sweep`] that also returns the audit at each sample size.
pub fn sweep_with_reports(
    inst: &Instance,
    rule: &TransferRule,
    family: &EstimatorSpec,
    ms: &[u64],
    kappa: f64,
    cfg: &AuditConfig,
) -> Result<(RateSweep, Vec<RegretReport>)> {
    if ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("sweep sizes must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(ms.len());
    let mut reports = Vec::with_capacity(ms.len());
    let mut exact = true;
    for &m in ms {
        let est = family.with_m(m);
        let report = posterior_regret(inst, rule, &est, cfg)?;
        exact &= report.exact;
        let mut bound = (0.0_f64, 0.0_f64);
        for i in 0..inst.n() {
            let b = regret_upper_bound(inst, i, &est, cfg.sampling)?;
            if b.0 > bound.0 {
                bound = b;
            }
        }
        let r_m = rate(m, kappa);
        rows.push(SweepRow {
            m,
            epsilon: report.epsilon,
            se: report.epsilon_se,
            bound: bound.0,
            bound_se: bound.1,
            r_m,
            r_eps: r_m * report.epsilon,
        });
        reports.push(report);
    }
    let kept: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.epsilon > if exact { EXACT_TOL } else { MC_SIGMAS * r.se + EXACT_TOL })
        .collect();
    let xs: Vec<f64> = kept.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = kept.iter().map(|r| r.epsilon).collect();
    Ok((RateSweep { slope: loglog_slope(&xs, &ys, 0.0), rows, kappa, exact }, reports))
}

/// Witness that no message-driven transfer implements `x*` on a quadratic-loss
/// instance. Both identities are evaluated at `θ_1 ∈ {θ_a, θ_b}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpossibilityCertificate {
    pub s1: f64,
    pub s1_alt: f64,
    pub s2: f64,
    pub theta_a: f64,
    pub theta_b: f64,
    pub theta2: f64,
    pub mean: f64,
    pub mean_alt: f64,
    pub delta_e: f64,
    pub var: f64,
    pub var_alt: f64,
    /// Required `h_1(θ_2; s) − h_1(θ_2; s_1′, s_2)` at `θ_a` and `θ_b`.
    pub required_a: f64,
    pub required_b: f64,
    /// `|required_a − required_b|`, from the two transfer classes.
    pub gap: f64,
    /// `|θ_a − θ_b|·|ΔE|`, computed directly.
    pub product: f64,
    pub agreement: f64,
}

/// Evaluates `Var[ω|s] − Var[ω|s_1′,s_2] − (θ_1 − θ_2)ΔE` at two values of
/// `θ_1`; a left side free of `θ_1` cannot match a right side that moves.
pub fn impossibility_certificate(
    inst: &Instance,
    s1: usize,
    s1_alt: usize,
    s2: usize,
    theta_a: usize,
    theta_b: usize,
    theta2: usize,
) -> Result<ImpossibilityCertificate> {
    if inst.n() != 2 {
        return Err(Error::UnsupportedScenario(inst.name.clone()));
    }
    let post = inst.posterior_full(&[s1, s2])?;
    let post_alt = inst.posterior_full(&[s1_alt, s2])?;
    let mean = inst.posterior_mean(post)[0];
    let mean_alt = inst.posterior_mean(post_alt)[0];
    let delta_e = mean - mean_alt;
    if delta_e.abs() <= EXACT_TOL {
        return Err(Error::ConditionStarFails { gap: delta_e.abs() });
    }

    // h − k = gvcg(k = 0) − vcg(h = 0), differenced across the two signal reports
    let vcg = TransferRule::new(TransferKind::Vcg, HPolicy::Zero);
    let gvcg = TransferRule::new(TransferKind::GeneralizedVcg, HPolicy::Zero);
    let required = |th1: usize| -> Result<f64> {
        let diff = |s: usize| -> Result<f64> {
            let p = Profile::new(vec![th1, theta2], vec![s, s2]);
            Ok(ProfileTransfers::new(inst, &gvcg, &p)?.transfer(0, None)?
                - ProfileTransfers::new(inst, &vcg, &p)?.transfer(0, None)?)
        };
        Ok(diff(s1)? - diff(s1_alt)?)
    };
    let required_a = required(theta_a)?;
    let required_b = required(theta_b)?;
    let ta = inst.agents[0].types.point(theta_a)[0];
    let tb = inst.agents[0].types.point(theta_b)[0];
    let gap = (required_a - required_b).abs();
    let product = (ta - tb).abs() * delta_e.abs();
    Ok(ImpossibilityCertificate {
        s1: inst.agents[0].signals.point(s1)[0],
        s1_alt: inst.agents[0].signals.point(s1_alt)[0],
        s2: inst.agents[1].signals.point(s2)[0],
        theta_a: ta,
        theta_b: tb,
        theta2: inst.agents[1].types.point(theta2)[0],
        mean,
        mean_alt,
        delta_e,
        var: inst.posterior_variance(post),
        var_alt: inst.posterior_variance(post_alt),
        required_a,
        required_b,
        gap,
        product,
        agreement: (gap - product).abs(),
    })
}
