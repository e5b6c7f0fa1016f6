mod common;

use proptest::prelude::*;
use std::collections::BTreeSet;

use pdcguard::admm::{IterationRecord, Protocol, RoundOrder};
use pdcguard::detection::{
    detect_presence, group_estimates, identify_alg2, identify_alg4, identify_rr_random, mitigate, run_detection,
    threshold_gamma_a, DetectionConfig, DetectionReport, Evidence, Method, Status,
};
use pdcguard::harness::{prepare, ScenarioConfig};

use common::{norm, scenario};

fn detection_config(cfg: &ScenarioConfig) -> DetectionConfig {
    let d = &cfg.detection;
    DetectionConfig {
        method: d.method,
        window: d.window,
        presence_tol: d.presence_tol,
        dual_tol: d.dual_tol,
        rho_reduced: d.rho_reduced,
        order: Some(cfg.round_order()),
    }
}

/// Scalar round-robin trace starting at position 1, with PDC sources from `order`.
fn rr_trace(norms: &[f64], n: usize, order: &RoundOrder) -> Vec<IterationRecord> {
    norms
        .iter()
        .enumerate()
        .map(|(p, &v)| IterationRecord {
            k: p + 1,
            z: vec![v],
            a: vec![None; n],
            w: vec![None; n],
            protocol: Protocol::RoundRobin,
            excluded: vec![],
            rr_source: Some(order.selected(p + 1)),
            rr_position: Some(p + 1),
            rho: 1e-6,
        })
        .collect()
}

fn znorm_gamma(r: &DetectionReport) -> f64 {
    match &r.evidence[0] {
        Evidence::ZNorm { gamma, .. } => *gamma,
        e => panic!("unexpected evidence {e:?}"),
    }
}

#[test]
fn threshold_examples() {
    let g = threshold_gamma_a(&[4.1864, 17.7189, 9.5428, 4.3161, 4.2459]).unwrap();
    assert!((g - 0.2975).abs() < 5e-5);
    let g = threshold_gamma_a(&[0.7286, 6.4435, 6.839, 0.7313, 0.7189]).unwrap();
    assert!((g - 0.0485).abs() < 5e-5);
    assert_eq!(threshold_gamma_a(&[1.0, 1.0]).unwrap(), 0.0);
    assert!(threshold_gamma_a(&[]).is_err());
}

#[test]
fn grouping_examples() {
    let ids = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| (i + 1, x)).collect::<Vec<_>>();
    let g = group_estimates(&ids(&[4.1864, 17.7189, 9.5428, 4.3161, 4.2459]), 0.2975).unwrap();
    assert_eq!(g.groups, vec![vec![1, 4, 5], vec![3], vec![2]]);
    assert_eq!(g.unbiased_group, 0);
    assert!(group_estimates(&ids(&[1.0]), -1.0).is_err());
    assert!(group_estimates(&[], 1.0).is_err());
}

#[test]
fn znorm_five_pdc_example() {
    let order = RoundOrder::fixed(5, 1.0);
    let recs = rr_trace(&[0.2672, 0.8192, 1.4356, 0.2964, 0.3064, 0.3169], 5, &order);
    let r = identify_alg2(&recs, 5, &order, 1).unwrap();
    assert_eq!(r.status, Status::Confirmed);
    assert_eq!(r.identified_malicious, [2, 3].into());
    assert!((znorm_gamma(&r) - 0.0497).abs() < 5e-5);
}

#[test]
fn znorm_case4_trace() {
    let order = RoundOrder::fixed(5, 1.0);
    let recs = rr_trace(&[0.267, 0.91, 1.62, 0.31, 0.33, 0.4991], 5, &order);
    let r = identify_alg2(&recs, 5, &order, 1).unwrap();
    assert_eq!(r.identified_malicious, [2, 3].into());
    assert!((znorm_gamma(&r) - 0.2321).abs() < 1e-12);
    let Evidence::ZNorm { k_min, k_ref, .. } = &r.evidence[0] else { unreachable!() };
    assert_eq!((*k_min, *k_ref), (1, 6));
}

#[test]
fn znorm_case5_random_order_trace() {
    let order = RoundOrder {
        period_orders: vec![vec![1, 2, 4, 5, 3], vec![3, 2, 5, 4, 1], vec![2, 5, 4, 1, 3]],
        alpha: 0.9,
    };
    let norms = [0.767, 63.4122, 2.6447, 3.5022, 126.8068, 40.0, 70.0, 5.0, 6.0, 17.8725];
    let recs = rr_trace(&norms, 5, &order);
    let r = identify_rr_random(&recs, 5, 1).unwrap();
    assert_eq!(r.identified_malicious, [2, 3].into());
    assert!((znorm_gamma(&r) - 17.1055).abs() < 5e-5);
    let Evidence::ZNorm { k_ref, .. } = &r.evidence[0] else { unreachable!() };
    assert_eq!(*k_ref, 10);
}

#[test]
fn decreasing_norms_are_unconfirmed() {
    let order = RoundOrder::fixed(3, 1.0);
    let recs = rr_trace(&[3.0, 2.0, 1.0, 0.5, 0.4, 0.3], 3, &order);
    let r = identify_alg2(&recs, 3, &order, 1).unwrap();
    assert_eq!(r.status, Status::Unconfirmed);
    assert!(r.identified_malicious.is_empty());
    assert!(znorm_gamma(&r) < 0.0);
}

#[test]
fn short_trace_is_unconfirmed() {
    let order = RoundOrder::fixed(5, 1.0);
    let recs = rr_trace(&[0.2672, 0.8192, 1.4356, 0.2964, 0.3064], 5, &order);
    assert_eq!(identify_alg2(&recs, 5, &order, 1).unwrap().status, Status::Unconfirmed);
}

fn honest_round_robin(pre: usize) -> DetectionReport {
    let mut cfg = scenario("case4_alg2");
    cfg.attack = None;
    let mut p = prepare(&cfg).unwrap();
    p.lp.run(pre).unwrap();
    p.lp.switch_to_round_robin(cfg.round_order()).unwrap();
    p.lp.run(6 * 5).unwrap();
    identify_alg2(p.lp.records(), 5, &cfg.round_order(), cfg.detection.window).unwrap()
}

#[test]
fn converged_honest_round_robin_flags_nothing() {
    let r = honest_round_robin(3000);
    assert_eq!(r.status, Status::Unconfirmed);
    assert!(r.identified_malicious.is_empty());
    assert!(znorm_gamma(&r) < 0.0);
}

// Without a bias, z copies heterogeneous local estimates in turn while γ_z
// only tracks the slow drift of one PDC, so honest PDCs exceed the threshold.
// Presence gating keeps this path unreachable for honest runs.
#[test]
fn transient_honest_round_robin_is_not_trusted() {
    let r = honest_round_robin(2);
    assert!(znorm_gamma(&r) > 0.0);
    assert!(!r.identified_malicious.is_empty());
    let mut cfg = scenario("case4_alg2");
    cfg.attack = None;
    let mut p = prepare(&cfg).unwrap();
    let gated = run_detection(&mut p.lp, &detection_config(&cfg)).unwrap();
    assert_eq!(gated.status, Status::NotInvoked);
}

#[test]
fn presence_example() {
    let p = detect_presence(&[vec![-6e-8], vec![0.0], vec![0.0]], 1e-6, 1e-12).unwrap();
    assert!(p.flag);
    assert!((p.implied_bias[0] - 0.02).abs() < 1e-15);
    let p = detect_presence(&[vec![0.0, 0.0], vec![0.0, 0.0]], 1e-6, 1e-12).unwrap();
    assert!(!p.flag);
    assert!(detect_presence(&[vec![1.0], vec![1.0, 2.0]], 1.0, 0.0).is_err());
    assert!(detect_presence(&[], 1.0, 0.0).is_err());
}

fn case8_run(d2: f64, d3: f64, corrupt_dual: bool) -> (ScenarioConfig, pdcguard::admm::ConsensusLoop, DetectionReport) {
    let mut cfg = scenario("case8_alg4");
    let attack = cfg.attack.as_mut().unwrap();
    attack.corrupt_dual = corrupt_dual;
    for (g, v) in attack.generators.iter_mut().zip([d2, d3]) {
        g.generator = pdcguard::attacks::BiasGenerator::Constant { value: pdcguard::attacks::BiasValue::Scalar(v) };
    }
    let mut p = prepare(&cfg).unwrap();
    let report = run_detection(&mut p.lp, &detection_config(&cfg)).unwrap();
    (cfg, p.lp, report)
}

#[test]
fn dual_differences_of_honest_pdcs_are_zero() {
    let (cfg, _, r) = case8_run(1e-4, 2e-4, false);
    assert_eq!(r.status, Status::Confirmed);
    assert_eq!(r.identified_malicious, [2, 3].into());
    let rho = cfg.admm.rho;
    for e in &r.evidence {
        let Evidence::DualDifference { pdc, difference, flagged, .. } = e else { panic!("{e:?}") };
        match pdc {
            2 | 3 => {
                let bias = if *pdc == 2 { 1e-4 } else { 2e-4 };
                assert!(*flagged);
                for d in difference {
                    assert!((d + rho * bias).abs() <= 1e-12 * rho * bias, "{d}");
                }
            }
            _ => {
                assert!(!flagged);
                assert!(difference.iter().all(|&d| d == 0.0));
            }
        }
    }
}

#[test]
fn dual_differences_survive_constant_dual_corruption() {
    let (_, _, r) = case8_run(1e-4, 2e-4, true);
    assert_eq!(r.identified_malicious, [2, 3].into());
}

#[test]
fn alg4_rejects_small_n() {
    assert!(identify_alg4(&[], 1, 1e-12, 1).is_err());
}

#[test]
fn alg4_requires_unit_alpha() {
    let cfg = scenario("case8_alg4");
    let mut p = prepare(&cfg).unwrap();
    let mut det = detection_config(&cfg);
    det.order = Some(RoundOrder::fixed(5, 0.9));
    assert!(run_detection(&mut p.lp, &det).is_err());
}

#[test]
fn mitigation_averages_the_rest() {
    let cfg = scenario("case3_alg1");
    let mut p = prepare(&cfg).unwrap();
    p.lp.run(4).unwrap();
    let rho = p.lp.rho();
    mitigate(&mut p.lp, &[2, 3].into(), rho).unwrap();
    assert_eq!(p.lp.active(), [1, 4, 5].into());
    let rec = p.lp.step().unwrap().clone();
    assert!(rec.a[1].is_none() && rec.a[2].is_none());
    let kept: Vec<&Vec<f64>> = [0, 3, 4].iter().map(|&i| rec.a[i].as_ref().unwrap()).collect();
    for j in 0..rec.z.len() {
        let mean = kept.iter().map(|a| a[j]).sum::<f64>() / 3.0;
        assert!((rec.z[j] - mean).abs() <= 1e-14 * mean.abs().max(1e-300) + 1e-300);
    }
    assert!(mitigate(&mut p.lp, &[1, 4, 5].into(), rho).is_err());
}

#[test]
fn empty_mitigation_is_a_no_op() {
    let cfg = scenario("case3_alg1");
    let mut p = prepare(&cfg).unwrap();
    p.lp.run(3).unwrap();
    let z = p.lp.z().clone();
    mitigate(&mut p.lp, &BTreeSet::new(), 1.0).unwrap();
    assert_eq!(p.lp.z(), &z);
    assert_eq!(p.lp.rho(), cfg.admm.rho);
    assert_eq!(p.lp.active().len(), 5);
}

#[test]
fn zero_bias_is_not_invoked() {
    let mut cfg = scenario("case3_alg1");
    cfg.attack = None;
    let mut p = prepare(&cfg).unwrap();
    let r = run_detection(&mut p.lp, &detection_config(&cfg)).unwrap();
    assert!(!r.presence);
    assert_eq!(r.status, Status::NotInvoked);
    assert!(r.identified_malicious.is_empty());
    assert_eq!(p.lp.iteration(), 2);
}

#[test]
fn report_json_roundtrip() {
    let (_, _, r) = case8_run(1e-4, 2e-4, false);
    let text = serde_json::to_string(&r).unwrap();
    let back: DetectionReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
    assert_eq!(serde_json::to_value(Method::RrRandom).unwrap(), "rr-random");
}

fn norm_list() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..100.0, 2..12)
}

proptest! {
    #[test]
    fn threshold_matches_its_definition(v in norm_list()) {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let want = ((s[s.len() - 1] - s[0]) / n).min(n * (s[1] - s[0]));
        prop_assert_eq!(threshold_gamma_a(&v).unwrap().to_bits(), want.to_bits());
        prop_assert!(threshold_gamma_a(&v).unwrap() >= 0.0);
    }

    #[test]
    fn grouping_is_invariant_under_power_of_two_scaling(v in norm_list(), e in -20i32..20) {
        let c = 2f64.powi(e);
        let ids: Vec<(usize, f64)> = v.iter().enumerate().map(|(i, &x)| (i + 1, x)).collect();
        let scaled: Vec<(usize, f64)> = ids.iter().map(|&(i, x)| (i, x * c)).collect();
        let sv: Vec<f64> = scaled.iter().map(|p| p.1).collect();
        prop_assert_eq!(threshold_gamma_a(&sv).unwrap(), c * threshold_gamma_a(&v).unwrap());
        let g = group_estimates(&ids, threshold_gamma_a(&v).unwrap()).unwrap();
        let h = group_estimates(&scaled, threshold_gamma_a(&sv).unwrap()).unwrap();
        prop_assert_eq!(g.groups, h.groups);
    }

    #[test]
    fn grouping_is_invariant_under_general_scaling(v in norm_list(), c in 1e-3f64..1e3) {
        let ids: Vec<(usize, f64)> = v.iter().enumerate().map(|(i, &x)| (i + 1, x)).collect();
        let gamma = threshold_gamma_a(&v).unwrap();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        // Gaps within rounding of the threshold may legitimately flip.
        let margin = 1e-9 * s[s.len() - 1].max(1.0);
        prop_assume!(s.windows(2).all(|w| ((w[1] - w[0]) - gamma).abs() > margin));
        let scaled: Vec<(usize, f64)> = ids.iter().map(|&(i, x)| (i, x * c)).collect();
        let sv: Vec<f64> = scaled.iter().map(|p| p.1).collect();
        let g = group_estimates(&ids, gamma).unwrap();
        let h = group_estimates(&scaled, threshold_gamma_a(&sv).unwrap()).unwrap();
        prop_assert_eq!(g.groups, h.groups);
    }

    #[test]
    fn groups_partition_the_ids(v in norm_list(), gamma in 0.0f64..20.0) {
        let ids: Vec<(usize, f64)> = v.iter().enumerate().map(|(i, &x)| (i + 1, x)).collect();
        let g = group_estimates(&ids, gamma).unwrap();
        let mut all: Vec<usize> = g.groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (1..=v.len()).collect::<Vec<_>>());
        let of = |i: usize| v[i - 1];
        for (a, b) in g.groups.iter().zip(g.groups.iter().skip(1)) {
            let hi = a.iter().map(|&i| of(i)).fold(f64::MIN, f64::max);
            let lo = b.iter().map(|&i| of(i)).fold(f64::MAX, f64::min);
            prop_assert!(lo - hi > gamma);
        }
        prop_assert_eq!(g.representative_norms.len(), g.groups.len());
    }

    #[test]
    fn presence_flags_any_uncancelled_mean(d in prop::collection::vec(-1.0f64..1.0, 3), rho in 1e-9f64..1.0) {
        let duals = vec![d.iter().map(|x| x * rho).collect::<Vec<_>>(), vec![0.0; 3]];
        let p = detect_presence(&duals, rho, 1e-12).unwrap();
        let biggest = d.iter().fold(0.0f64, |m, x| m.max(x.abs())) * rho / 2.0;
        prop_assert_eq!(p.flag, biggest > 1e-12);
        let _ = norm(&p.mean_dual);
    }
}
