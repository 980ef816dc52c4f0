use proptest::prelude::*;

use lpflux::construction::{build_field, CutoffKind, FieldSpec};
use lpflux::lpcalc::{check_sq_identity, check_sq_identity_with, phi, project_sq, psi, smoothstep, CutoffSpec, Weight};
use lpflux::qfield::rat;

fn cut(den: i64) -> CutoffSpec {
    CutoffSpec::new(&rat(1, den), CutoffKind::default())
}

/// `φ(t) + Σ_{q ≤ top} ψ(t/2^q)`.
fn partition(t: f64, top: i32, c: &CutoffSpec) -> f64 {
    phi(t, c) + (0..=top).map(|q| psi(t / 2f64.powi(q), c)).sum::<f64>()
}

#[test]
fn partition_example() {
    let c = cut(16);
    // telescoping oracle: the sum collapses to φ(7.3/32), and 7.3/32 lies on the plateau
    assert!(7.3 / 32.0 <= c.plateau_hi);
    let direct = partition(7.3, 4, &c);
    assert!((direct - phi(7.3 / 32.0, &c)).abs() < 1e-15);
    assert!((direct - 1.0).abs() < 1e-15);
}

#[test]
fn cutoff_endpoints() {
    let c = cut(16);
    let plateau = 5f64.sqrt() / 2.0 + 2.0 / 16.0;
    let edge = 2.0 - 4.0 / 16.0;
    assert_eq!(phi(plateau, &c), 1.0);
    assert_eq!(phi(edge, &c), 0.0);
    let mid = phi((plateau + edge) / 2.0, &c);
    assert!((mid - 0.5).abs() < 1e-12);
}

#[test]
fn sq_identity_holds_on_built_fields() {
    for (den, lo, hi) in [(16, 4, 10), (8, 3, 8)] {
        let s = FieldSpec::new(rat(1, den), hi).with_range(lo, hi).with_eps0(rat(1, 8));
        let f = build_field(&s).unwrap();
        for q in lo..=hi {
            let r = check_sq_identity(&f, q);
            assert!(r.pass, "eps=1/{den} q={q}: {:?}", &r.offending[..r.offending.len().min(3)]);
        }
    }
}

#[test]
fn sq_identity_catches_a_shifted_plateau() {
    let s = FieldSpec::new(rat(1, 16), 8).with_range(4, 8);
    let f = build_field(&s).unwrap();
    // pull the plateau below |F¹| = 1 so that u_q^(1) is no longer passed whole
    let bad = CutoffSpec::for_spec(&s).with_plateau(0.9);
    assert!(!check_sq_identity_with(&f, 6, &bad).pass);
}

#[test]
fn sq_weights_are_exact_zero_or_one() {
    let s = FieldSpec::new(rat(1, 16), 9).with_range(4, 9);
    let f = build_field(&s).unwrap();
    for q in 4..=9 {
        for rw in &project_sq(&f, q).regions {
            match &rw.weight {
                Weight::Uniform(w) => assert!(*w == 0.0 || *w == 1.0),
                Weight::PerMode(ws) => assert!(ws.iter().all(|&w| w == 0.0 || w == 1.0)),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partition_of_unity(t in 0.0f64..2f64.powi(14)) {
        let c = cut(16);
        prop_assert!((partition(t, 16, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psi_is_nonnegative_and_bounded(t in 0.0f64..64.0, den in 16i64..256) {
        let c = cut(den);
        let v = psi(t, &c);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn phi_is_monotone(a in 0.0f64..4.0, b in 0.0f64..4.0, order in 1u32..4) {
        let c = CutoffSpec::new(&rat(1, 16), CutoffKind::Smoothstep { order });
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(phi(lo, &c) >= phi(hi, &c));
    }

    #[test]
    fn smoothstep_is_symmetric(x in 0.0f64..1.0, order in 1u32..5) {
        prop_assert!((smoothstep(x, order) + smoothstep(1.0 - x, order) - 1.0).abs() < 1e-12);
    }
}
