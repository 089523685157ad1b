use ddvcg::audit::{
    audit_cost, convergence_sweep, impossibility_certificate, posterior_regret, regret_upper_bound, AuditConfig,
};
use ddvcg::config::ExperimentConfig;
use ddvcg::estimators::{EstimatorSpec, NoiseLaw};
use ddvcg::instance::Profile;
use ddvcg::scenarios::quadratic::{wallet, AllocationChoice, QuadraticParams};
use ddvcg::scenarios::{CtrCommonParams, InterdependentParams, ScenarioSpec};
use ddvcg::transfers::{HPolicy, Sampling, TransferKind, TransferRule};
use ddvcg::Error;

fn small_quadratic() -> QuadraticParams {
    QuadraticParams { state_points: 21, signal_points: 5, theta: vec![-1.0, 0.0, 1.0], ..Default::default() }
}

fn sampled(samples: usize, seed: u64) -> AuditConfig {
    AuditConfig { sampling: Sampling { samples, seed, force: false }, ..AuditConfig::default() }
}

#[test]
fn gains_are_nonnegative_and_truth_is_a_candidate() {
    let s = ScenarioSpec::InterdependentCounterexample(InterdependentParams::default()).build().unwrap();
    let r = posterior_regret(&s.instance, &s.rule, &s.estimator, &AuditConfig::default()).unwrap();
    assert!(r.exact);
    assert!(r.rows.iter().all(|row| row.gain >= 0.0));
    assert_eq!(r.rows.len(), s.instance.profile_count() * s.instance.n());
    assert!(r.epsilon > 0.0);
}

#[test]
fn epsilon_ignores_constant_offsets() {
    let s = ScenarioSpec::InterdependentCounterexample(InterdependentParams::default()).build().unwrap();
    let cfg = AuditConfig::default();
    let base = posterior_regret(&s.instance, &s.rule, &s.estimator, &cfg).unwrap();
    for c in [-2.0, 0.5, 40.0] {
        let shifted = posterior_regret(&s.instance, &s.rule.clone().with_offset(c), &s.estimator, &cfg).unwrap();
        assert!((shifted.epsilon - base.epsilon).abs() < 1e-12);
        for (a, b) in base.rows.iter().zip(&shifted.rows) {
            assert!((a.gain - b.gain).abs() < 1e-12);
        }
    }
}

#[test]
fn budget_guard() {
    let s = ScenarioSpec::QuadraticLoss(small_quadratic()).build().unwrap();
    let cfg = AuditConfig { budget: 100, ..AuditConfig::default() };
    let needed = audit_cost(&s.instance, &s.rule, &s.estimator, cfg.sampling);
    assert!(needed > 100);
    assert_eq!(
        posterior_regret(&s.instance, &s.rule, &s.estimator, &cfg),
        Err(Error::BudgetExceeded { needed, budget: 100 })
    );
}

#[test]
fn upper_bound_trivial_cases() {
    let s = ScenarioSpec::QuadraticLoss(small_quadratic()).build().unwrap();
    assert_eq!(regret_upper_bound(&s.instance, 0, &EstimatorSpec::ExPost, Sampling::default()).unwrap(), (0.0, 0.0));

    let custom = |lipschitz: &str| {
        ExperimentConfig::parse(&format!(
            r#"{{"instance": {{
                "agents": 2,
                "state_grid": {{"points": [0.0, 1.0]}},
                "type_grids": [{{"points": [1.0]}}, {{"points": [1.0]}}],
                "signal_kernels": {{"kind": "independent", "agents": [
                    {{"signals": [0, 1], "kernel": [[0.9, 0.1], [0.1, 0.9]]}},
                    {{"signals": [0, 1], "kernel": [[0.9, 0.1], [0.1, 0.9]]}}]}},
                "utility": {{"kind": "expression", "expr": "theta0 * if(i == 0, x0, x1)" {lipschitz}}},
                "outcome_space": {{"kind": "finite", "points": [[1, 0], [0, 1]]}}
            }}}}"#
        ))
        .unwrap()
        .build()
        .unwrap()
        .instance
    };
    let flat = custom(r#", "lipschitz": 0.0"#);
    let noisy = EstimatorSpec::UnbiasedNoise { h: 0.3 };
    assert_eq!(regret_upper_bound(&flat, 1, &noisy, Sampling::default()).unwrap().0, 0.0);
    let undeclared = custom("");
    assert_eq!(
        regret_upper_bound(&undeclared, 1, &noisy, Sampling::default()),
        Err(Error::MissingLipschitzConstant(0))
    );
}

#[test]
fn certificate_on_wallet_information() {
    let inst = wallet(&[0.0, 1.0, 2.0], &[-1.0, 0.0, 1.0]).unwrap();
    let c = impossibility_certificate(&inst, 2, 0, 1, 0, 2, 1).unwrap();
    // ω = s_1 + s_2 is revealed, so ΔE is the signal difference and both variances vanish
    assert_eq!(c.delta_e, 2.0);
    assert_eq!((c.var, c.var_alt), (0.0, 0.0));
    assert!((c.gap - 4.0).abs() < 1e-12);
    assert!(c.agreement < 1e-9);
}

#[test]
fn certificate_matches_the_variance_identity() {
    let params = QuadraticParams { signal_points: 7, ..Default::default() };
    let inst = ScenarioSpec::QuadraticLoss(params).build().unwrap().instance;
    // s_1 = +1, s_1′ = −1, s_2 = 0 on the 7-point signal grid; θ_1 ∈ {−1, 1}, θ_2 = 0
    let c = impossibility_certificate(&inst, 4, 2, 3, 0, 4, 2).unwrap();
    assert!(c.delta_e > 1e-3);
    for (theta1, required) in [(c.theta_a, c.required_a), (c.theta_b, c.required_b)] {
        let identity = c.var - c.var_alt - (theta1 - c.theta2) * c.delta_e;
        assert!((identity - required).abs() < 1e-9);
    }
    assert!((c.gap - c.product).abs() < 1e-9);
    assert!(matches!(impossibility_certificate(&inst, 4, 4, 3, 0, 4, 2), Err(Error::ConditionStarFails { .. })));
}

#[test]
fn audit_is_identical_across_worker_counts() {
    let s = ScenarioSpec::QuadraticLoss(small_quadratic()).build().unwrap();
    let est = EstimatorSpec::SampleMean { m: 4, noise: NoiseLaw::Gaussian { tau: 1.0 }, clamp: true };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| posterior_regret(&s.instance, &s.rule, &est, &sampled(200, 9)).unwrap())
    };
    let one = run(1);
    assert!(!one.exact);
    assert_eq!(one, run(2));
    assert_eq!(one, run(7));
}

#[test]
fn more_samples_never_move_away_from_the_exact_answer() {
    let s = ScenarioSpec::QuadraticLoss(small_quadratic()).build().unwrap();
    let est = EstimatorSpec::SampleMean { m: 2, noise: NoiseLaw::Rademacher { tau: 1.0 }, clamp: true };
    let exact = posterior_regret(&s.instance, &s.rule, &est, &AuditConfig::default()).unwrap();
    assert!(exact.exact);
    // mean absolute deviation across independent seeds, one value per sample size
    let deviation = |k: usize| {
        let seeds = 0..16u64;
        let n = (seeds.end - seeds.start) as f64;
        seeds
            .map(|seed| {
                let cfg = AuditConfig { sampling: Sampling { samples: k, seed, force: true }, ..AuditConfig::default() };
                let r = posterior_regret(&s.instance, &s.rule, &est, &cfg).unwrap();
                assert!(!r.exact);
                (r.epsilon - exact.epsilon).abs()
            })
            .sum::<f64>()
            / n
    };
    let errs: Vec<f64> = [64, 256, 1024].into_iter().map(deviation).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
}

#[test]
fn grid_argmax_reports_its_discretization() {
    let params = QuadraticParams { allocation: AllocationChoice::GridArgmax, x_step: 0.1, ..small_quadratic() };
    let s = ScenarioSpec::QuadraticLoss(params).build().unwrap();
    let r = posterior_regret(&s.instance, &s.rule, &EstimatorSpec::ExPost, &AuditConfig::default()).unwrap();
    let d = r.discretization.unwrap();
    // two agents, spacing h: welfare shortfall at most (n/4)·h²
    assert!((0.0..=0.5 * 0.01 + 1e-12).contains(&d), "{d}");
    assert!(r.within_tolerance());
}

#[test]
fn sweeps() {
    let s = ScenarioSpec::QuadraticLoss(small_quadratic()).build().unwrap();
    let ex = convergence_sweep(&s.instance, &s.rule, &EstimatorSpec::ExPost, &[4, 16, 64], 0.4, &AuditConfig::default())
        .unwrap();
    assert!(ex.exact && ex.all_zero());
    assert_eq!(ex.slope, None);
    assert!(matches!(
        convergence_sweep(&s.instance, &s.rule, &EstimatorSpec::ExPost, &[16, 4], 0.4, &AuditConfig::default()),
        Err(Error::Config(_))
    ));

    let ctr = ScenarioSpec::CtrCommon(CtrCommonParams::default()).build().unwrap();
    let dd = TransferRule::new(TransferKind::DataDrivenVcg, HPolicy::Pivot);
    let sw = convergence_sweep(&ctr.instance, &dd, &EstimatorSpec::BernoulliCtr { m: 1 }, &[4, 16, 64], 0.5, &AuditConfig::default())
        .unwrap();
    assert!(sw.exact && sw.all_zero() && sw.bounded());
}

#[test]
fn profiles_with_zero_mass_are_skipped() {
    let s = ScenarioSpec::CtrIndividual(Default::default()).build().unwrap();
    let r = posterior_regret(&s.instance, &s.rule, &s.estimator, &AuditConfig::default()).unwrap();
    let p = Profile::new(vec![4, 3], vec![1, 2]);
    let row = r.row(0, &p).unwrap();
    assert!(row.gain >= 0.0 && row.gain.is_finite());
}
