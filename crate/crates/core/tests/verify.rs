use std::collections::HashSet;

use lpflux::construction::{build_field, Field, FieldSpec};
use lpflux::qfield::rat;
use lpflux::verify::{
    check_bounds, check_near_field, check_sumset, check_windmill, enumerate_cross_triads, enumerate_cross_triads_naive,
    proposition_suite, Witness, DEFAULT_BUDGET,
};

fn field(den: i64, q_min: i32, q_max: i32) -> Field {
    let s = FieldSpec::new(rat(1, den), q_max).with_range(q_min, q_max).with_eps0(rat(1, 4));
    build_field(&s).unwrap()
}

fn triads(reps: &[Witness]) -> Vec<[i32; 3]> {
    reps.iter()
        .filter_map(|w| match w {
            Witness::Triad(t) => Some(t.gens()),
            _ => None,
        })
        .collect()
}

#[test]
fn windmill_examples() {
    let f = field(16, 4, 13);
    for q in 4..=8 {
        assert!(check_windmill(&f, q, q + 1, q + 2).pass, "({q}, {}, {})", q + 1, q + 2);
        assert!(check_windmill(&f, q, q + 1, q + 5).pass, "({q}, {}, {})", q + 1, q + 5);
    }
}

#[test]
fn consecutive_generations_share_no_triad() {
    let f = field(16, 6, 8);
    let found = enumerate_cross_triads(&f, &[6, 7, 8], DEFAULT_BUDGET).unwrap();
    assert!(found.is_empty(), "{:?}", found.first());
    // a single generation is not a cross set
    assert!(enumerate_cross_triads(&f, &[7], DEFAULT_BUDGET).unwrap().is_empty());
}

#[test]
fn long_range_triads_exist_and_have_the_right_shape() {
    // ε = 1/4 makes the far pair cheap to enumerate: l = 2, k = 7
    let f = field(4, 2, 7);
    let found = enumerate_cross_triads(&f, &[2, 7], DEFAULT_BUDGET).unwrap();
    assert!(!found.is_empty());
    for t in &found {
        assert!(t.closes());
        let c = t.canonical();
        assert_eq!(c.gens(), [2, 7, 7]);
        assert_eq!(c.slots[1].i, c.slots[2].i);
    }
}

#[test]
fn hashed_and_naive_enumeration_agree() {
    let f = field(4, 2, 5);
    for qset in [vec![2, 3], vec![2, 5], vec![3, 5], vec![2, 3, 4, 5]] {
        let canon = |v: Vec<_>| -> HashSet<_> { v.into_iter().map(|t: lpflux::verify::TriadWitness| t.canonical()).collect() };
        let fast = enumerate_cross_triads(&f, &qset, DEFAULT_BUDGET).unwrap();
        let slow = enumerate_cross_triads_naive(&f, &qset);
        assert_eq!(fast.len(), slow.len(), "{qset:?}");
        assert_eq!(canon(fast), canon(slow), "{qset:?}");
    }
}

#[test]
fn budget_is_enforced() {
    let f = field(4, 2, 5);
    assert!(enumerate_cross_triads(&f, &[2, 5], 10).is_err());
}

#[test]
fn near_field_at_small_eps() {
    let f = field(16, 4, 13);
    let r = check_near_field(&f, (4, 13));
    assert!(r.pass, "{:?}", triads(&r.witnesses).first());
    assert!(r.measured["closing_blocks"] > 0.0);
    assert!(r.measured["min_gap"] >= 3.0);
}

#[test]
fn near_field_at_eighth_has_short_gaps() {
    // at ε = 1/8 the gap-two pairs (l, l + 2) still close; none of the
    // witnesses has its two upper generations adjacent
    let f = field(8, 3, 11);
    let r = check_near_field(&f, (3, 11));
    assert!(!r.pass);
    for g in triads(&r.witnesses) {
        assert_eq!(g[1], g[2], "{g:?}");
        assert_eq!(g[2] - g[0], 2, "{g:?}");
    }
}

#[test]
fn sumset_holds_and_side_three_breaks_it() {
    let f = field(16, 4, 12);
    for q in 4..=12 {
        assert!(check_sumset(&f, q).pass, "q={q}");
    }
    let mut s = FieldSpec::new(rat(1, 16), 8).with_range(4, 8);
    s.hooks.side3 = Some(1);
    let bad = build_field(&s).unwrap();
    assert!((4..=8).any(|q| !check_sumset(&bad, q).pass));
}

#[test]
fn bounds_and_measured_constants() {
    let f = field(16, 4, 10);
    let r = check_bounds(&f);
    assert!(r.pass, "{:?}", r.witnesses.first());
    assert!(r.measured["anchoring_ratio_bound"] < 2.0);
    let proj: Vec<f64> = f.feasible_levels().iter().map(|q| r.measured[&format!("projection_constant_q{q}")]).collect();
    // within ±20% of the mean over the feasible levels
    let mean = proj.iter().sum::<f64>() / proj.len() as f64;
    assert!(proj.iter().all(|v| (v / mean - 1.0).abs() <= 0.2), "{proj:?}");
}

#[test]
fn checks_stay_true_when_eps_halves() {
    for den in [16, 32] {
        let f = field(den, 5, 10);
        for r in proposition_suite(&f, (5, 10)) {
            assert!(r.pass, "eps=1/{den}: {} {:?}", r.name, r.witnesses.first());
        }
    }
}
