use std::collections::HashSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use lpflux::construction::{build_field, Field, FieldSpec};
use lpflux::flux::{
    calibrate_amplitude, decomposition, decomposition_check, flux_local, flux_nonlocal, flux_pair, flux_pair_components,
    flux_pair_offdiagonal, flux_total, flux_total_complex, n_eps, skeleton_flux_oracle, FluxConfig, Gate,
};
use lpflux::qfield::rat;

fn field(den: i64, q_min: i32, q_max: i32) -> Field {
    let s = FieldSpec::new(rat(1, den), q_max).with_range(q_min, q_max).with_eps0(rat(1, 8));
    build_field(&s).unwrap()
}

fn small() -> &'static Field {
    static F: OnceLock<Field> = OnceLock::new();
    F.get_or_init(|| field(8, 3, 6))
}

fn top(t: i32) -> FluxConfig {
    FluxConfig { window_top: Some(t), ..FluxConfig::default() }
}

#[test]
fn isolated_generation_flux_is_local() {
    for q in [6, 7] {
        let f = field(16, q, q);
        let total = flux_total(&f, q, &top(q)).unwrap();
        let local = flux_local(&f, q);
        assert!((total - local).abs() <= 1e-12 * local.abs(), "q={q}: {total} vs {local}");
    }
}

#[test]
fn sumset_pairs_close_exactly_once() {
    // brute force over A¹ × A²: ξ1 + ξ2 lands in A³, and ξ1 − ξ2 lands nowhere
    let f = field(16, 4, 8);
    for q in [6, 7] {
        let g = f.gen(q).unwrap();
        let a3: HashSet<_> = g.regions[2].points().collect();
        let all: HashSet<_> = f.gens.iter().flat_map(|g| g.modes().map(|m| m.xi)).collect();
        for x in g.regions[0].points() {
            for y in g.regions[1].points() {
                let s = [x[0] + y[0], x[1] + y[1], x[2] + y[2]];
                assert!(a3.contains(&s), "q={q}: {x:?} + {y:?} misses A3");
                let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
                assert!(!all.contains(&d) && !all.contains(&d.map(|c| -c)));
            }
        }
    }
}

#[test]
fn adjacent_pairs_vanish_by_support() {
    // λ_l(1 − 2ε) > 4√3ελ_k holds for k = l + 1 at ε = 1/16
    let f = field(16, 4, 9);
    let e = 1.0 / 16.0;
    for l in 4..=8 {
        let k = l + 1;
        assert!(2f64.powi(l) * (1.0 - 2.0 * e) > 4.0 * 3f64.sqrt() * e * 2f64.powi(k));
        assert_eq!(flux_pair(&f, l, k), 0.0);
    }
}

#[test]
fn only_same_component_pairs_contribute() {
    let f = field(8, 3, 8);
    for (l, k) in [(3, 6), (4, 7), (5, 8), (3, 8)] {
        assert_eq!(flux_pair_offdiagonal(&f, l, k), 0.0, "(l, k) = ({l}, {k})");
    }
}

#[test]
fn printed_gate_constants() {
    let s8 = FieldSpec::new(rat(1, 8), 6).with_eps0(rat(1, 8));
    let s16 = FieldSpec::new(rat(1, 16), 6);
    assert_eq!(n_eps(&s8), 6);
    assert_eq!(n_eps(&s16), 7);
}

#[test]
fn printed_gate_is_empty_on_short_windows() {
    let f = field(16, 4, 9);
    let cfg = FluxConfig { gate: Gate::Printed, window_top: Some(9), ..FluxConfig::default() };
    // q_max − q_min = 5 < N_ε = 7
    assert_eq!(flux_nonlocal(&f, 4, &cfg).0, 0.0);
}

#[test]
fn decomposition_examples() {
    let f = field(8, 3, 12);
    let b = decomposition_check(&f, 5, &top(8)).unwrap();
    assert!(b.residual <= 1e-12 * b.pi_total.abs());
    let f = field(16, 4, 13);
    let b = decomposition_check(&f, 7, &top(9)).unwrap();
    assert!(b.residual <= 1e-12 * b.pi_total.abs());
}

#[test]
fn dropping_equal_level_pairs_leaves_their_sum() {
    let f = field(16, 4, 9);
    let q = 7;
    let b = decomposition(&f, q, &top(9)).unwrap();
    let kq: f64 = (f.spec.q_min..q).map(|l| flux_pair_components(&f, l, q, &[1, 2])).sum();
    assert!(kq.abs() > 1e-3);
    let mismatch = b.pi_total - b.pi_local - (b.pi_nonlocal - kq);
    assert!((mismatch - kq).abs() <= 1e-12 * b.pi_total.abs());
}

#[test]
fn skeleton_value_is_level_independent() {
    let v = skeleton_flux_oracle(0);
    assert_eq!(v, -0.25);
    for q in 1..9 {
        assert_eq!(skeleton_flux_oracle(q), v);
    }
}

#[test]
fn calibration_examples() {
    let s = FieldSpec::new(rat(1, 16), 9);
    let skel = skeleton_flux_oracle(0);
    assert!((calibrate_amplitude(&s, skel).unwrap() - 1.0).abs() < 1e-15);
    assert!((calibrate_amplitude(&s, 8.0 * skel).unwrap() - 2.0).abs() < 1e-15);
    assert!(calibrate_amplitude(&s, 0.0).is_err());
    assert!(calibrate_amplitude(&s, f64::NAN).is_err());
}

#[test]
fn calibrated_local_flux_approaches_target() {
    let f = field(16, 4, 9);
    let gamma = calibrate_amplitude(&f.spec, 1.0).unwrap();
    let g = f.rescaled(gamma);
    for q in [7, 8, 9] {
        let el = 2f64.powi(q) / 16.0;
        let got = flux_local(&g, q);
        // bracket (1 ± Cε)((ελ ± 1)/ελ)⁶ with C = 4, above the measured ≈ 3
        let (lo, hi) = ((1.0 - 4.0 / 16.0) * ((el - 1.0) / el).powi(6), (1.0 + 4.0 / 16.0) * ((el + 1.0) / el).powi(6));
        assert!(got > lo && got < hi, "q={q}: {got} outside ({lo}, {hi})");
    }
}

#[test]
fn fluxes_are_real() {
    let f = field(8, 3, 7);
    for q in 4..=7 {
        let (re, im) = flux_total_complex(&f, q, &FluxConfig::default(), true).unwrap();
        assert!(im.abs() <= 1e-10 * re.abs(), "q={q}: {re} + {im}i");
    }
}

#[test]
fn flux_is_thread_count_invariant() {
    let f = field(8, 3, 7);
    let run = |n: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        pool.install(|| (4..=7).map(|q| flux_total(&f, q, &FluxConfig::default()).unwrap().to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cubic_homogeneity(gamma in 0.05f64..20.0, q in 4i32..=6) {
        let f = small();
        let base = flux_total(f, q, &FluxConfig::default()).unwrap();
        let scaled = flux_total(&f.rescaled(gamma), q, &FluxConfig::default()).unwrap();
        let want = gamma.powi(3) * base;
        prop_assert!((scaled - want).abs() <= 1e-12 * want.abs());
    }
}
