use ddvcg::estimators::EstimatorSpec;
use ddvcg::instance::{Instance, Profile};
use ddvcg::scenarios::quadratic::{binary, QuadraticParams};
use ddvcg::scenarios::{CtrCommonParams, LlmParams, ScenarioSpec};
use ddvcg::transfers::{
    expected_transfer, leave_one_out_estimate, leave_one_out_transfer, per_click_price, transfer, HPolicy,
    LooAggregate, ProfileTransfers, Sampling, TransferKind, TransferRule,
};
use ddvcg::Error;

// Bayes table of the 0.8-accuracy binary instance, enumerated by hand:
// P(ω=1 | s=(1,1)) = 0.5·0.8² / (0.5·0.8² + 0.5·0.2²) and P(ω=1 | s_j=1) = 0.8.
const P11: f64 = 0.64 / 0.68;
const P1: f64 = 0.8;

fn binary_instance() -> Instance {
    // θ grid {0, 1}; index 1 is θ = 1
    binary(0.8, &[0.0, 1.0]).unwrap()
}

fn rule(kind: TransferKind, h: HPolicy) -> TransferRule {
    TransferRule::new(kind, h)
}

#[test]
fn generalized_vcg_on_binary_instance() {
    let inst = binary_instance();
    let p = Profile::new(vec![1, 0], vec![1, 1]);
    let t = transfer(&inst, &rule(TransferKind::GeneralizedVcg, HPolicy::Zero), 0, &p, None).unwrap();
    assert!((t + P11).abs() < 1e-12);
    assert!((t + 0.94118).abs() < 1e-5);

    let equal = Profile::new(vec![1, 1], vec![1, 1]);
    let t = transfer(&inst, &rule(TransferKind::GeneralizedVcg, HPolicy::Zero), 0, &equal, None).unwrap();
    assert_eq!(t, 0.0);
}

#[test]
fn vcg_with_zero_h_is_bias_plus_variance() {
    let inst = binary_instance();
    let var = P11 * (1.0 - P11);
    let vcg = rule(TransferKind::Vcg, HPolicy::Zero);
    let t = transfer(&inst, &vcg, 0, &Profile::new(vec![1, 0], vec![1, 1]), None).unwrap();
    assert!((t - (-0.25 - var)).abs() < 1e-12);
    let t = transfer(&inst, &vcg, 0, &Profile::new(vec![0, 0], vec![1, 1]), None).unwrap();
    assert!((t + var).abs() < 1e-12);
}

#[test]
fn lone_agent_pays_nothing_under_pivot() {
    let params = QuadraticParams { agents: 1, signal_sigma: vec![1.0], state_points: 11, ..Default::default() };
    let inst = ScenarioSpec::QuadraticLoss(params).build().unwrap().instance;
    let p = Profile::new(vec![2], vec![4]);
    assert_eq!(transfer(&inst, &rule(TransferKind::Vcg, HPolicy::Pivot), 0, &p, None).unwrap(), 0.0);
    let dd = rule(TransferKind::DataDrivenVcg, HPolicy::Pivot);
    assert_eq!(transfer(&inst, &dd, 0, &p, Some(&[0.3])).unwrap(), 0.0);
}

#[test]
fn expected_pivot_transfer_rewards_accuracy() {
    let inst = binary_instance();
    let dd = rule(TransferKind::DataDrivenVcg, HPolicy::Pivot);
    let s = Sampling::default();
    let aligned = Profile::new(vec![1, 1], vec![1, 1]);
    let e = expected_transfer(&inst, &dd, 0, &aligned, &[1, 1], &EstimatorSpec::ExPost, s).unwrap();
    assert!((e.mean - (P11 - P1).powi(2)).abs() < 1e-12);
    assert!((e.mean - 0.0199308).abs() < 1e-7);
    assert_eq!(e.se, 0.0);

    let biased = Profile::new(vec![1, 0], vec![1, 1]);
    let e = expected_transfer(&inst, &dd, 0, &biased, &[1, 1], &EstimatorSpec::ExPost, s).unwrap();
    assert!((e.mean - (-0.25 + (P11 - P1).powi(2))).abs() < 1e-12);
}

#[test]
fn symmetric_noise_shifts_zero_h_transfer_by_h_squared() {
    let inst = binary_instance();
    let h = 0.1;
    let noisy = EstimatorSpec::UnbiasedNoise { h };
    let s = Sampling::default();
    for profile in [Profile::new(vec![1, 0], vec![1, 1]), Profile::new(vec![0, 1], vec![0, 1])] {
        let zero = rule(TransferKind::DataDrivenVcg, HPolicy::Zero);
        let exact = expected_transfer(&inst, &zero, 0, &profile, &profile.signals, &EstimatorSpec::ExPost, s).unwrap();
        let shifted = expected_transfer(&inst, &zero, 0, &profile, &profile.signals, &noisy, s).unwrap();
        // n − 1 = 1 other agent, each losing h² in expectation
        assert!((shifted.mean - exact.mean + h * h).abs() < 1e-12);

        let pivot = rule(TransferKind::DataDrivenVcg, HPolicy::Pivot);
        let exact = expected_transfer(&inst, &pivot, 0, &profile, &profile.signals, &EstimatorSpec::ExPost, s).unwrap();
        let shifted = expected_transfer(&inst, &pivot, 0, &profile, &profile.signals, &noisy, s).unwrap();
        assert!((shifted.mean - exact.mean).abs() < 1e-12);
    }
}

#[test]
fn draw_contract_and_scenario_guards() {
    let inst = binary_instance();
    let p = Profile::new(vec![1, 0], vec![1, 1]);
    let vcg = rule(TransferKind::Vcg, HPolicy::Pivot);
    assert!(matches!(transfer(&inst, &vcg, 0, &p, Some(&[1.0])), Err(Error::UnexpectedDraw(_))));
    let dd = rule(TransferKind::DataDrivenVcg, HPolicy::Pivot);
    assert!(matches!(transfer(&inst, &dd, 0, &p, None), Err(Error::MissingDraw(_))));

    let ctr = ScenarioSpec::CtrCommon(CtrCommonParams::default()).build().unwrap().instance;
    let gvcg = rule(TransferKind::GeneralizedVcg, HPolicy::Zero);
    let q = Profile::new(vec![0, 1], vec![0, 0]);
    assert!(matches!(transfer(&ctr, &gvcg, 0, &q, None), Err(Error::UnsupportedScenario(_))));
}

#[test]
fn per_click_prices() {
    let two = ScenarioSpec::CtrCommon(CtrCommonParams { theta: vec![0.4, 0.45, 0.5], ..Default::default() })
        .build()
        .unwrap()
        .instance;
    assert_eq!(per_click_price(&two, 0, &Profile::new(vec![2, 0], vec![0, 0])).unwrap(), 0.4);
    let three = ScenarioSpec::CtrCommon(CtrCommonParams {
        agents: 3,
        theta: vec![0.4, 0.45, 0.5],
        ..Default::default()
    })
    .build()
    .unwrap()
    .instance;
    assert_eq!(per_click_price(&three, 0, &Profile::new(vec![2, 0, 1], vec![0, 0, 0])).unwrap(), 0.45);
}

#[test]
fn offset_shifts_every_transfer_exactly() {
    let inst = binary_instance();
    let p = Profile::new(vec![1, 0], vec![1, 0]);
    for kind in [TransferKind::Vcg, TransferKind::GeneralizedVcg, TransferKind::DataDrivenVcg] {
        let base = rule(kind, if kind == TransferKind::GeneralizedVcg { HPolicy::Zero } else { HPolicy::Pivot });
        let draw = kind.is_data_driven().then_some(&[0.7][..]);
        for c in [-3.5, 0.25, 1e3] {
            let shifted = base.clone().with_offset(c);
            for i in 0..2 {
                let a = transfer(&inst, &base, i, &p, draw).unwrap();
                let b = transfer(&inst, &shifted, i, &p, draw).unwrap();
                assert_eq!(b, a + c);
            }
        }
    }
}

#[test]
fn leave_one_out_reads_only_others() {
    let inst = binary_instance();
    let loo = rule(TransferKind::LeaveOneOut, HPolicy::Pivot);
    let p = Profile::new(vec![1, 0], vec![1, 1]);
    let base = leave_one_out_transfer(&inst, &loo, 0, &p, &[Some(vec![0.0]), Some(vec![1.0])]).unwrap();
    for own in [vec![0.5], vec![-7.0], vec![1e9]] {
        let t = leave_one_out_transfer(&inst, &loo, 0, &p, &[Some(own), Some(vec![1.0])]).unwrap();
        assert_eq!(t.to_bits(), base.to_bits());
    }
    let t = leave_one_out_transfer(&inst, &loo, 0, &p, &[None, Some(vec![1.0])]).unwrap();
    assert_eq!(t.to_bits(), base.to_bits());

    // n = 2: the estimate is the other agent's report verbatim
    assert_eq!(leave_one_out_estimate(0, &[None, Some(vec![0.37])], LooAggregate::Mean).unwrap(), vec![0.37]);

    // truthful state reports reproduce the ex-post data-driven transfer
    let dd = rule(TransferKind::DataDrivenVcg, HPolicy::Pivot);
    for w in [0.0, 1.0] {
        let expected = transfer(&inst, &dd, 0, &p, Some(&[w])).unwrap();
        let got = leave_one_out_transfer(&inst, &loo, 0, &p, &[Some(vec![w]), Some(vec![w])]).unwrap();
        assert_eq!(got, expected);
    }
    assert!(matches!(
        leave_one_out_transfer(&inst, &loo, 0, &p, &[Some(vec![1.0]), None]),
        Err(Error::MissingSecondStageReport(1))
    ));
}

#[test]
fn leave_one_out_median_aggregate() {
    let reports = [Some(vec![0.1, 5.0]), Some(vec![9.0, 9.0]), Some(vec![0.3, 1.0]), Some(vec![0.2, 2.0])];
    assert_eq!(leave_one_out_estimate(1, &reports, LooAggregate::Median).unwrap(), vec![0.2, 2.0]);
    let mean = leave_one_out_estimate(1, &reports, LooAggregate::Mean).unwrap();
    assert!((mean[0] - 0.2).abs() < 1e-15 && (mean[1] - 8.0 / 3.0).abs() < 1e-15);
}

#[test]
fn regularized_pivot_two_code_paths_agree() {
    let s = ScenarioSpec::LlmKl(LlmParams::two_token()).build().unwrap();
    let inst = &s.instance;
    let reg = rule(TransferKind::RegularizedDataDrivenVcg, HPolicy::Pivot);
    let e = std::f64::consts::E;
    for signals in [vec![0, 0], vec![1, 0], vec![1, 1]] {
        let p = Profile::new(vec![0, 0], signals);
        let ctx = ProfileTransfers::new(inst, &reg, &p).unwrap();
        for w in [[0.0], [1.0]] {
            for i in 0..2 {
                let direct = ctx.transfer(i, Some(&w)).unwrap();
                let closed = ctx.regularized_pivot_from_partition(i, &w).unwrap();
                assert!((direct - closed).abs() < 1e-9, "agent {i}: {direct} vs {closed}");
            }
            // agent 2 adds no reward, so Z = Z_{−2} and v_2 = 0
            assert!(ctx.transfer(1, Some(&w)).unwrap().abs() < 1e-12);
            // agent 1: α log Z − v_1 with Z = (e + 1)/2 and Z_{−1} = 1
            let z = (e + 1.0) / 2.0;
            let v1 = e / (e + 1.0);
            assert!((ctx.transfer(0, Some(&w)).unwrap() - (z.ln() - v1)).abs() < 1e-12);
        }
    }
}
