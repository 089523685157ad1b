//! Payment rules.
//!
//! A [`ProfileTransfers`] caches everything a rule needs for one reported
//! profile (the efficient allocation, its posterior and, under the pivot
//! policy, every agent's sub-allocation), so evaluating many estimator draws
//! against the same reports is cheap.

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, kl_divergence, token_rewards, kl_regularized_distribution};
use crate::error::{Error, Result};
use crate::estimators::{ConditionalLaw, EstimatorSpec};
use crate::instance::{Instance, Point, Profile};
use crate::stats::stream_seed;

/// Name under which the quadratic-loss scenario registers itself; the
/// generalized-VCG form is only defined there.
pub const QUADRATIC_LOSS: &str = "quadratic_loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Vcg,
    GeneralizedVcg,
    DataDrivenVcg,
    RegularizedDataDrivenVcg,
    PerClickPivot,
    PerImpression,
    LeaveOneOut,
}

impl TransferKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransferKind::Vcg => "vcg",
            TransferKind::GeneralizedVcg => "generalized_vcg",
            TransferKind::DataDrivenVcg => "data_driven_vcg",
            TransferKind::RegularizedDataDrivenVcg => "regularized_data_driven_vcg",
            TransferKind::PerClickPivot => "per_click_pivot",
            TransferKind::PerImpression => "per_impression",
            TransferKind::LeaveOneOut => "leave_one_out",
        }
    }

    /// Kinds whose payment depends on an estimate of the state.
    pub fn is_data_driven(&self) -> bool {
        matches!(
            self,
            TransferKind::DataDrivenVcg
                | TransferKind::RegularizedDataDrivenVcg
                | TransferKind::PerClickPivot
                | TransferKind::LeaveOneOut
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HPolicy {
    Zero,
    #[default]
    Pivot,
}

/// How a leave-one-out estimate is built from the others' second-stage reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooAggregate {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRule {
    pub kind: TransferKind,
    #[serde(default)]
    pub h_policy: HPolicy,
    /// Constant added to every `h_i`.
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub aggregate: LooAggregate,
}

impl TransferRule {
    pub fn new(kind: TransferKind, h_policy: HPolicy) -> Self {
        TransferRule { kind, h_policy, offset: 0.0, aggregate: LooAggregate::Mean }
    }

    pub fn pivot(kind: TransferKind) -> Self {
        Self::new(kind, HPolicy::Pivot)
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn label(&self) -> String {
        let h = match self.h_policy {
            HPolicy::Zero => "zero",
            HPolicy::Pivot => "pivot",
        };
        format!("{}/{h}", self.kind.name())
    }
}

#[derive(Debug, Clone)]
struct SubAllocation {
    x: Point,
    posterior: Vec<f64>,
    reference: Option<Point>,
}

/// Allocation and pivot data for one reported profile.
#[derive(Debug)]
pub struct ProfileTransfers<'a> {
    inst: &'a Instance,
    rule: &'a TransferRule,
    profile: Profile,
    x: Point,
    posterior: Vec<f64>,
    reference: Option<Point>,
    subs: Vec<Option<SubAllocation>>,
}

impl<'a> ProfileTransfers<'a> {
    pub fn new(inst: &'a Instance, rule: &'a TransferRule, profile: &Profile) -> Result<Self> {
        let n = inst.n();
        let all: Vec<usize> = (0..n).collect();
        let posterior = inst.posterior_full(&profile.signals)?.to_vec();
        let types = inst.type_values(&profile.types);
        let x = allocate(inst, &all, &types, &posterior, &profile.signals)?;
        let reference = inst
            .allocation
            .kl_objective()
            .map(|o| o.reference.at(&all, &profile.signals).to_vec());
        let needs_sub = rule.h_policy == HPolicy::Pivot
            && matches!(
                rule.kind,
                TransferKind::Vcg
                    | TransferKind::DataDrivenVcg
                    | TransferKind::RegularizedDataDrivenVcg
                    | TransferKind::LeaveOneOut
            );
        let mut subs = vec![None; n];
        if needs_sub && n > 1 {
            for (i, slot) in subs.iter_mut().enumerate() {
                let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let post = inst
                    .posterior_given(&others, &profile.signals)
                    .map_err(|_| Error::NoSubAllocation(i))?;
                let xs = allocate(inst, &others, &types, &post, &profile.signals)
                    .map_err(|_| Error::NoSubAllocation(i))?;
                let reference = inst
                    .allocation
                    .kl_objective()
                    .map(|o| o.reference.at(&others, &profile.signals).to_vec());
                *slot = Some(SubAllocation { x: xs, posterior: post, reference });
            }
        }
        Ok(ProfileTransfers { inst, rule, profile: profile.clone(), x, posterior, reference, subs })
    }

    pub fn allocation(&self) -> &[f64] {
        &self.x
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    /// Sub-allocation `x*(θ_{−i}, s_{−i})`, present under the pivot policy.
    pub fn sub_allocation(&self, i: usize) -> Option<&[f64]> {
        self.subs[i].as_ref().map(|s| s.x.as_slice())
    }

    /// `t_i` for these reports. Data-driven kinds need `draw = Some(ω̂)`;
    /// message-driven kinds reject a draw.
    pub fn transfer(&self, i: usize, draw: Option<&[f64]>) -> Result<f64> {
        let kind = self.rule.kind;
        match (kind.is_data_driven(), draw) {
            (true, None) => return Err(Error::MissingDraw(kind.name().into())),
            (false, Some(_)) => return Err(Error::UnexpectedDraw(kind.name().into())),
            _ => {}
        }
        let t = match kind {
            TransferKind::Vcg => self.vcg(i)?,
            TransferKind::GeneralizedVcg => self.generalized_vcg(i)?,
            TransferKind::DataDrivenVcg | TransferKind::LeaveOneOut => {
                self.data_driven(i, draw.expect("checked above"), false)?
            }
            TransferKind::RegularizedDataDrivenVcg => self.data_driven(i, draw.expect("checked above"), true)?,
            TransferKind::PerClickPivot => {
                let w = draw.expect("checked above");
                -per_click_price(self.inst, i, &self.profile)? * self.winner_share(i)? * w[ctr_coordinate(self.inst, i)]
            }
            TransferKind::PerImpression => {
                let mean = self.inst.posterior_mean(&self.posterior);
                -per_click_price(self.inst, i, &self.profile)? * self.winner_share(i)? * mean[ctr_coordinate(self.inst, i)]
            }
        };
        Ok(t + self.rule.offset)
    }

    fn winner_share(&self, i: usize) -> Result<f64> {
        if self.x.len() != self.inst.n() {
            return Err(Error::UnsupportedScenario(self.inst.name.clone()));
        }
        Ok(self.x[i])
    }

    fn sub(&self, i: usize) -> Result<Option<&SubAllocation>> {
        if self.rule.h_policy == HPolicy::Zero || self.inst.n() == 1 {
            return Ok(None);
        }
        self.subs[i].as_ref().map(Some).ok_or(Error::NoSubAllocation(i))
    }

    fn vcg(&self, i: usize) -> Result<f64> {
        let types = self.inst.type_values(&self.profile.types);
        let others = (0..self.inst.n()).filter(|&j| j != i);
        let mut t: f64 = others
            .clone()
            .map(|j| self.inst.expected_payoff(j, &self.x, &types, &self.posterior))
            .sum();
        if let Some(sub) = self.sub(i)? {
            t -= others
                .map(|j| self.inst.expected_payoff(j, &sub.x, &types, &sub.posterior))
                .sum::<f64>();
        }
        Ok(t)
    }

    fn generalized_vcg(&self, i: usize) -> Result<f64> {
        if self.inst.name != QUADRATIC_LOSS || self.inst.n() != 2 {
            return Err(Error::UnsupportedScenario(self.inst.name.clone()));
        }
        let types = self.inst.type_values(&self.profile.types);
        let j = 1 - i;
        let mean = self.inst.posterior_mean(&self.posterior)[0];
        Ok(-(types[i][0] - types[j][0]) * mean)
    }

    fn data_driven(&self, i: usize, w: &[f64], regularized: bool) -> Result<f64> {
        let types = self.inst.type_values(&self.profile.types);
        let u = self.inst.utility.as_ref();
        let others = (0..self.inst.n()).filter(|&j| j != i);
        let penalty = |x: &[f64], reference: &Option<Point>| -> Result<f64> {
            if !regularized {
                return Ok(0.0);
            }
            let obj = self
                .inst
                .allocation
                .kl_objective()
                .ok_or_else(|| Error::UnsupportedScenario(self.inst.name.clone()))?;
            Ok(obj.alpha * kl_divergence(x, reference.as_deref().expect("kl reference"))?)
        };
        let mut t: f64 = others.clone().map(|j| u.payoff(j, &self.x, w, &types)).sum::<f64>()
            - penalty(&self.x, &self.reference)?;
        if let Some(sub) = self.sub(i)? {
            t -= others.map(|j| u.payoff(j, &sub.x, w, &types)).sum::<f64>() - penalty(&sub.x, &sub.reference)?;
        }
        Ok(t)
    }

    /// The α-regularized pivot transfer assembled from partition functions:
    /// `α[log Z − log Z_{−i}] − v_i + Σ_{j≠i} (u_j − v_j)(x*) − (u_j − v_j)(x*_{−i})`.
    pub fn regularized_pivot_from_partition(&self, i: usize, w: &[f64]) -> Result<f64> {
        let obj = self
            .inst
            .allocation
            .kl_objective()
            .ok_or_else(|| Error::UnsupportedScenario(self.inst.name.clone()))?;
        let n = self.inst.n();
        let all: Vec<usize> = (0..n).collect();
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let types = self.inst.type_values(&self.profile.types);
        let u = self.inst.utility.as_ref();
        let rewards = token_rewards(self.inst, &all, &types, &self.posterior)?;
        let (_, log_z) = kl_regularized_distribution(&rewards, self.reference.as_deref().expect("kl reference"), obj.alpha)?;
        let (sub_x, sub_post, log_z_sub) = match self.sub(i)? {
            Some(sub) => {
                let r = token_rewards(self.inst, &others, &types, &sub.posterior)?;
                let (_, lz) = kl_regularized_distribution(&r, sub.reference.as_deref().expect("kl reference"), obj.alpha)?;
                (sub.x.clone(), sub.posterior.clone(), lz)
            }
            None => return Err(Error::NoSubAllocation(i)),
        };
        let v = |j: usize, x: &[f64], post: &[f64]| self.inst.expected_payoff(j, x, &types, post);
        let mut t = obj.alpha * (log_z - log_z_sub) - v(i, &self.x, &self.posterior);
        for &j in &others {
            t += (u.payoff(j, &self.x, w, &types) - v(j, &self.x, &self.posterior))
                - (u.payoff(j, &sub_x, w, &types) - v(j, &sub_x, &sub_post));
        }
        Ok(t + self.rule.offset)
    }
}

/// State coordinate that carries agent `i`'s click probability: the single
/// coordinate under a common CTR, coordinate `i` under individual CTRs.
pub fn ctr_coordinate(inst: &Instance, i: usize) -> usize {
    if inst.states.dim() == 1 {
        0
    } else {
        i
    }
}

/// `max_{j≠i} θ_j`, the per-click pivot price (zero for a lone bidder).
pub fn per_click_price(inst: &Instance, i: usize, profile: &Profile) -> Result<f64> {
    let types = inst.type_values(&profile.types);
    Ok((0..inst.n())
        .filter(|&j| j != i)
        .map(|j| types[j][0])
        .fold(0.0_f64, f64::max))
}

/// One-shot `t_i(θ, s, ω̂)`.
pub fn transfer(inst: &Instance, rule: &TransferRule, i: usize, reports: &Profile, draw: Option<&[f64]>) -> Result<f64> {
    ProfileTransfers::new(inst, rule, reports)?.transfer(i, draw)
}

/// Leave-one-out transfer: builds `ω̂_{−i}` from the others' second-stage
/// reports and evaluates the data-driven formula. Agent `i`'s own entry is
/// never read.
pub fn leave_one_out_transfer(
    inst: &Instance,
    rule: &TransferRule,
    i: usize,
    reports: &Profile,
    second_stage: &[Option<Point>],
) -> Result<f64> {
    let estimate = leave_one_out_estimate(i, second_stage, rule.aggregate)?;
    let dd = TransferRule { kind: TransferKind::LeaveOneOut, ..rule.clone() };
    ProfileTransfers::new(inst, &dd, reports)?.transfer(i, Some(&estimate))
}

pub fn leave_one_out_estimate(i: usize, second_stage: &[Option<Point>], aggregate: LooAggregate) -> Result<Point> {
    let mut others = Vec::with_capacity(second_stage.len());
    for (j, r) in second_stage.iter().enumerate() {
        if j == i {
            continue;
        }
        others.push(r.as_ref().ok_or(Error::MissingSecondStageReport(j))?);
    }
    let Some(first) = others.first() else {
        return Err(Error::MissingSecondStageReport(i));
    };
    let dim = first.len();
    Ok((0..dim)
        .map(|d| {
            let mut col: Vec<f64> = others.iter().map(|r| r[d]).collect();
            match aggregate {
                LooAggregate::Mean => col.iter().sum::<f64>() / col.len() as f64,
                LooAggregate::Median => {
                    col.sort_by(f64::total_cmp);
                    let k = col.len();
                    if k % 2 == 1 {
                        col[k / 2]
                    } else {
                        0.5 * (col[k / 2 - 1] + col[k / 2])
                    }
                }
            }
        })
        .collect())
}

/// Expected transfer with its Monte Carlo standard error (zero for exact laws).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub mean: f64,
    pub se: f64,
}

/// Draw settings for sampled estimator laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub samples: usize,
    pub seed: u64,
    /// Draw from exact laws too, instead of enumerating them.
    pub force: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { samples: 2000, seed: 0, force: false }
    }
}

/// Seed of the common-random-number stream used at state index `w` and
/// sample size `m`.
pub fn state_stream_seed(seed: u64, m: u64, w: usize) -> u64 {
    stream_seed(seed, m, w as u64)
}

/// `Σ_ω P(ω | s) · E_{ω̂|ω}[t_i(θ′, s′, ω̂)]` where `s` is the true signal
/// profile and `(θ′, s′)` the reports.
pub fn expected_transfer(
    inst: &Instance,
    rule: &TransferRule,
    i: usize,
    reports: &Profile,
    true_signals: &[usize],
    estimator: &EstimatorSpec,
    sampling: Sampling,
) -> Result<Expectation> {
    let ctx = ProfileTransfers::new(inst, rule, reports)?;
    if !rule.kind.is_data_driven() {
        return Ok(Expectation { mean: ctx.transfer(i, None)?, se: 0.0 });
    }
    let post = inst.posterior_full(true_signals)?;
    let bounds = inst.states.bounds();
    let m = estimator.m().unwrap_or(0);
    let (mut mean, mut var) = (0.0, 0.0);
    for (w, &p) in post.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let law = estimator.conditional_law(inst.states.point(w), &bounds)?;
        let support = law.support_with(sampling.samples, state_stream_seed(sampling.seed, m, w), sampling.force);
        let values = support
            .points
            .iter()
            .map(|d| ctx.transfer(i, Some(d)))
            .collect::<Result<Vec<f64>>>()?;
        let e: f64 = values.iter().zip(&support.weights).map(|(v, q)| v * q).sum();
        mean += p * e;
        if support.sampled && values.len() > 1 {
            let k = values.len() as f64;
            let s2 = values.iter().map(|v| (v - e).powi(2)).sum::<f64>() / (k - 1.0);
            var += p * p * s2 / k;
        }
    }
    Ok(Expectation { mean, se: var.sqrt() })
}

/// True when the estimator's law is finite at every grid state.
pub fn law_is_exact(inst: &Instance, estimator: &EstimatorSpec) -> Result<bool> {
    let bounds = inst.states.bounds();
    for w in 0..inst.states.len() {
        if let ConditionalLaw::Sampled(_) = estimator.conditional_law(inst.states.point(w), &bounds)? {
            return Ok(false);
        }
    }
    Ok(true)
}
