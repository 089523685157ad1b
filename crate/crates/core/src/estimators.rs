//! State estimators with commonly known conditional laws.
//!
//! Finite-support kinds expose exact mass functions. Kinds whose support is
//! too large are sampled from seeded streams; every `(m, replication)` pair
//! maps to its own seed through [`crate::stats::stream_seed`].

use rand::distributions::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{euclid, Point};
use crate::stats::{binomial_pmf, loglog_slope, mean_se, stream_seed};

/// Largest support enumerated exactly before falling back to sampling.
pub const EXACT_SUPPORT_LIMIT: usize = 20_000;

/// Law of one draw in the sample-mean estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum NoiseLaw {
    /// `y = ω + τ·Z`, `Z ~ N(0, 1)`. Sampled.
    Gaussian { tau: f64 },
    /// `y = ω ± τ` with probability ½ each. Exact binomial law for the mean.
    Rademacher { tau: f64 },
}

impl NoiseLaw {
    fn tau(&self) -> f64 {
        match *self {
            NoiseLaw::Gaussian { tau } | NoiseLaw::Rademacher { tau } => tau,
        }
    }
}

/// Designer's estimator of the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    /// `ω̂ = ω`.
    ExPost,
    /// `ω̂ = ω + ε`, each coordinate independently `±h` with probability ½.
    UnbiasedNoise { h: f64 },
    /// Mean of `m` i.i.d. draws around `ω`, optionally projected onto the
    /// state bounding box.
    SampleMean {
        m: u64,
        noise: NoiseLaw,
        #[serde(default = "default_true")]
        clamp: bool,
    },
    /// Per-coordinate sample CTR `clicks / m` with `clicks ~ Binomial(m, ω)`.
    BernoulliCtr { m: u64 },
    /// Mean of the other agents' second-stage reports when every agent
    /// observes the state; the law is a point mass at `ω`.
    LeaveOneOut,
}

fn default_true() -> bool {
    true
}

/// Sample size attached to a draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSize {
    Finite(u64),
    ExPost,
}

/// One realized estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateDraw {
    pub value: Point,
    pub sample_size: SampleSize,
}

impl EstimateDraw {
    pub fn ex_post(state: &[f64]) -> Self {
        EstimateDraw { value: state.to_vec(), sample_size: SampleSize::ExPost }
    }
}

/// Conditional law of `ω̂ | ω`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalLaw {
    Exact(Vec<(Point, f64)>),
    Sampled(Sampler),
}

/// Seeded sampler for a non-enumerable law.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    kind: SamplerKind,
    state: Point,
    m: u64,
    bounds: Option<(Point, Point)>,
}

#[derive(Debug, Clone, PartialEq)]
enum SamplerKind {
    GaussianMean { tau: f64 },
    Binomial,
}

impl Sampler {
    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Point {
        let mut v: Point = match self.kind {
            SamplerKind::GaussianMean { tau } => {
                // the mean of m i.i.d. N(ω, τ²) draws is N(ω, τ²/m) in law
                let sd = tau / (self.m as f64).sqrt();
                self.state
                    .iter()
                    .map(|w| {
                        let z: f64 = StandardNormal.sample(rng);
                        w + sd * z
                    })
                    .collect()
            }
            SamplerKind::Binomial => self
                .state
                .iter()
                .map(|&w| {
                    let b = Binomial::new(self.m, w.clamp(0.0, 1.0)).expect("valid binomial");
                    b.sample(rng) as f64 / self.m as f64
                })
                .collect(),
        };
        if let Some((lo, hi)) = &self.bounds {
            project(&mut v, lo, hi);
        }
        v
    }
}

/// Support points with weights: exact masses, or equally weighted draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub sampled: bool,
}

impl ConditionalLaw {
    pub fn is_exact(&self) -> bool {
        matches!(self, ConditionalLaw::Exact(_))
    }

    /// Exact support, or `samples` draws from the stream seeded by `seed`.
    pub fn support(&self, samples: usize, seed: u64) -> Support {
        match self {
            ConditionalLaw::Exact(masses) => Support {
                points: masses.iter().map(|(p, _)| p.clone()).collect(),
                weights: masses.iter().map(|(_, w)| *w).collect(),
                sampled: false,
            },
            ConditionalLaw::Sampled(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = samples.max(1);
                Support {
                    points: (0..n).map(|_| s.draw(&mut rng)).collect(),
                    weights: vec![1.0 / n as f64; n],
                    sampled: true,
                }
            }
        }
    }

    /// Like [`support`](Self::support), but draws from exact laws as well when
    /// `force` is set.
    pub fn support_with(&self, samples: usize, seed: u64, force: bool) -> Support {
        match self {
            ConditionalLaw::Exact(masses) if force => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pick = WeightedIndex::new(masses.iter().map(|(_, w)| *w)).expect("masses sum to one");
                let n = samples.max(1);
                Support {
                    points: (0..n).map(|_| masses[pick.sample(&mut rng)].0.clone()).collect(),
                    weights: vec![1.0 / n as f64; n],
                    sampled: true,
                }
            }
            _ => self.support(samples, seed),
        }
    }

    /// Exact mean, when the law is finite.
    pub fn mean(&self) -> Option<Point> {
        let ConditionalLaw::Exact(masses) = self else { return None };
        let dim = masses.first()?.0.len();
        let mut m = vec![0.0; dim];
        for (p, w) in masses {
            for (a, b) in m.iter_mut().zip(p) {
                *a += w * b;
            }
        }
        Some(m)
    }
}

impl EstimatorSpec {
    /// Sample size of the estimator, `None` for ex-post-like kinds.
    pub fn m(&self) -> Option<u64> {
        match *self {
            EstimatorSpec::SampleMean { m, .. } | EstimatorSpec::BernoulliCtr { m } => Some(m),
            _ => None,
        }
    }

    /// Same family at sample size `m`. Kinds without `m` are returned as-is.
    pub fn with_m(&self, m: u64) -> Self {
        match self.clone() {
            EstimatorSpec::SampleMean { noise, clamp, .. } => EstimatorSpec::SampleMean { m, noise, clamp },
            EstimatorSpec::BernoulliCtr { .. } => EstimatorSpec::BernoulliCtr { m },
            other => other,
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::ExPost => "ex_post".into(),
            EstimatorSpec::UnbiasedNoise { h } => format!("unbiased_noise(h={h})"),
            EstimatorSpec::SampleMean { m, noise, .. } => match noise {
                NoiseLaw::Gaussian { tau } => format!("sample_mean(m={m},gaussian,tau={tau})"),
                NoiseLaw::Rademacher { tau } => format!("sample_mean(m={m},rademacher,tau={tau})"),
            },
            EstimatorSpec::BernoulliCtr { m } => format!("bernoulli_ctr(m={m})"),
            EstimatorSpec::LeaveOneOut => "leave_one_out".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorSpec::UnbiasedNoise { h } if !(h >= 0.0 && h.is_finite()) => {
                Err(Error::EstimatorUnavailable(format!("noise half-width {h} is invalid")))
            }
            EstimatorSpec::SampleMean { m, noise, .. } if m == 0 || !(noise.tau() >= 0.0) => {
                Err(Error::EstimatorUnavailable("sample_mean needs m ≥ 1 and τ ≥ 0".into()))
            }
            EstimatorSpec::BernoulliCtr { m: 0 } => {
                Err(Error::EstimatorUnavailable("bernoulli_ctr needs m ≥ 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Law of `ω̂ | ω`. `bounds` is the state bounding box used by projecting
    /// kinds.
    pub fn conditional_law(&self, state: &[f64], bounds: &(Point, Point)) -> Result<ConditionalLaw> {
        self.validate()?;
        match *self {
            EstimatorSpec::ExPost | EstimatorSpec::LeaveOneOut => {
                Ok(ConditionalLaw::Exact(vec![(state.to_vec(), 1.0)]))
            }
            EstimatorSpec::UnbiasedNoise { h } => {
                let coords: Vec<Vec<(f64, f64)>> =
                    state.iter().map(|&w| vec![(w - h, 0.5), (w + h, 0.5)]).collect();
                Ok(ConditionalLaw::Exact(product_law(&coords)))
            }
            EstimatorSpec::SampleMean { m, noise, clamp } => {
                let bounds = clamp.then(|| bounds.clone());
                match noise {
                    NoiseLaw::Gaussian { tau } => Ok(ConditionalLaw::Sampled(Sampler {
                        kind: SamplerKind::GaussianMean { tau },
                        state: state.to_vec(),
                        m,
                        bounds,
                    })),
                    NoiseLaw::Rademacher { tau } => {
                        let support = (m as usize + 1).pow(state.len() as u32);
                        if support > EXACT_SUPPORT_LIMIT {
                            return Err(Error::EstimatorUnavailable(format!(
                                "rademacher sample mean support {support} too large"
                            )));
                        }
                        let pmf = binomial_pmf(m, 0.5);
                        let coords: Vec<Vec<(f64, f64)>> = state
                            .iter()
                            .enumerate()
                            .map(|(d, &w)| {
                                pmf.iter()
                                    .enumerate()
                                    .map(|(k, &p)| {
                                        let mut v = w + tau * (2.0 * k as f64 - m as f64) / m as f64;
                                        if let Some((lo, hi)) = &bounds {
                                            v = v.clamp(lo[d], hi[d]);
                                        }
                                        (v, p)
                                    })
                                    .collect()
                            })
                            .collect();
                        Ok(ConditionalLaw::Exact(merge(product_law(&coords))))
                    }
                }
            }
            EstimatorSpec::BernoulliCtr { m } => {
                if state.iter().any(|w| !(0.0..=1.0).contains(w)) {
                    return Err(Error::EstimatorUnavailable(
                        "bernoulli_ctr needs click probabilities in [0, 1]".into(),
                    ));
                }
                let support = (m as usize + 1).pow(state.len() as u32);
                if support > EXACT_SUPPORT_LIMIT {
                    return Ok(ConditionalLaw::Sampled(Sampler {
                        kind: SamplerKind::Binomial,
                        state: state.to_vec(),
                        m,
                        bounds: None,
                    }));
                }
                let coords: Vec<Vec<(f64, f64)>> = state
                    .iter()
                    .map(|&w| {
                        binomial_pmf(m, w)
                            .into_iter()
                            .enumerate()
                            .filter(|(_, p)| *p > 0.0)
                            .map(|(k, p)| (k as f64 / m as f64, p))
                            .collect()
                    })
                    .collect();
                Ok(ConditionalLaw::Exact(product_law(&coords)))
            }
        }
    }
}

/// `r_m = m^κ`.
pub fn rate(m: u64, kappa: f64) -> f64 {
    (m as f64).powf(kappa)
}

fn project(v: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((x, l), h) in v.iter_mut().zip(lo).zip(hi) {
        *x = x.clamp(*l, *h);
    }
}

/// Product of independent per-coordinate laws.
fn product_law(coords: &[Vec<(f64, f64)>]) -> Vec<(Point, f64)> {
    let mut out: Vec<(Point, f64)> = vec![(Vec::new(), 1.0)];
    for c in coords {
        let mut next = Vec::with_capacity(out.len() * c.len());
        for (p, w) in &out {
            for &(v, q) in c {
                let mut p2 = p.clone();
                p2.push(v);
                next.push((p2, w * q));
            }
        }
        out = next;
    }
    out
}

/// Merges equal support points (projection can collapse several).
fn merge(law: Vec<(Point, f64)>) -> Vec<(Point, f64)> {
    let mut out: Vec<(Point, f64)> = Vec::with_capacity(law.len());
    for (p, w) in law {
        match out.iter_mut().find(|(q, _)| *q == p) {
            Some(slot) => slot.1 += w,
            None => out.push((p, w)),
        }
    }
    out
}

/// One row of an empirical convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub m: u64,
    pub mean_abs_dev: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// OLS slope of `ln E‖ω̂_m − ω‖` on `ln m`, rows with zero deviation dropped.
    pub slope: Option<f64>,
    /// True when the deviation never increases from one row to the next
    /// (beyond three combined standard errors).
    pub nonincreasing: bool,
}

/// `E‖ω̂_m − ω‖` for each requested `m`, exact when the law is finite.
pub fn empirical_convergence(
    family: &EstimatorSpec,
    state: &[f64],
    bounds: &(Point, Point),
    ms: &[u64],
    mc_samples: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let law = family.with_m(m).conditional_law(state, bounds)?;
        let row = match &law {
            ConditionalLaw::Exact(masses) => ConvergenceRow {
                m,
                mean_abs_dev: masses.iter().map(|(p, w)| w * euclid(p, state)).sum(),
                se: 0.0,
            },
            ConditionalLaw::Sampled(_) => {
                let sup = law.support(mc_samples, stream_seed(seed, m, 0));
                let devs: Vec<f64> = sup.points.iter().map(|p| euclid(p, state)).collect();
                let (mean, se) = mean_se(&devs);
                ConvergenceRow { m, mean_abs_dev: mean, se }
            }
        };
        rows.push(row);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_abs_dev).collect();
    let nonincreasing = rows
        .windows(2)
        .all(|w| w[1].mean_abs_dev <= w[0].mean_abs_dev + 3.0 * (w[0].se.hypot(w[1].se)) + 1e-15);
    Ok(ConvergenceTable { slope: loglog_slope(&xs, &ys, 1e-15), rows, nonincreasing })
}

/// `sup_{ω, m} E‖r_m(ω̂_m − ω)‖` over the given states and sample sizes; the
/// uniform-integrability proxy for rate statements.
pub fn scaled_deviation_sup(
    family: &EstimatorSpec,
    states: &[Point],
    bounds: &(Point, Point),
    ms: &[u64],
    kappa: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for state in states {
        let table = empirical_convergence(family, state, bounds, ms, mc_samples, seed)?;
        for row in &table.rows {
            sup = sup.max(rate(row.m, kappa) * row.mean_abs_dev);
        }
    }
    Ok(sup)
}
