//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line (plus detail
//! lines) and then asserts. Heavy tests share a lock so that their grids
//! and mode tables are never resident at the same time.

use std::io::Write;
use std::sync::Mutex;

use lpflux::analysis::{
    default_grid, divergence_residual_grid, l2_norm_exact, lp_norm_grid, physical_flux_oracle, GridSpec,
};
use lpflux::cli::{cmd_flux, execute, Command, FieldConfig, RunConfig};
use lpflux::construction::{build_field, build_field_unchecked, lambda, Field, FieldSpec};
use lpflux::flux::{decomposition, flux_local, flux_total, skeleton_flux_exact, skeleton_flux_oracle, FluxConfig};
use lpflux::qfield::rat;
use lpflux::verify::{check_solenoidal, proposition_suite, VerificationReport};

static HEAVY: Mutex<()> = Mutex::new(());

fn lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn field(den: i64, q_min: i32, q_max: i32) -> Field {
    let spec = FieldSpec::new(rat(1, den), q_max).with_range(q_min, q_max).with_eps0(rat(1, 8));
    build_field(&spec).unwrap()
}

fn verdict(id: &str, pass: bool, summary: &str) {
    // straight to the handle: the harness swallows print! output of passing tests
    let line = format!("{id} {}: {summary}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

fn window(top: i32) -> FluxConfig {
    FluxConfig { window_top: Some(top), ..FluxConfig::default() }
}

/// `Π_local(q)·(ελ_q)⁶/(|A¹||A²|)`.
fn local_constant(f: &Field, q: i32) -> f64 {
    let g = f.gen(q).unwrap();
    let el = f.spec.eps_f64() * lambda(q);
    flux_local(f, q) * el.powi(6) / (g.regions[0].len() as f64 * g.regions[1].len() as f64)
}

fn rel_spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (hi - lo) / mean.abs()
}

#[test]
fn c1_solenoidality() {
    let _g = lock();
    let f = field(16, 4, 10);
    let exact = check_solenoidal(&f);
    println!("  exact: {} modes, {} violations", exact.measured["modes_checked"], exact.measured["violations"]);

    let small = field(8, 3, 5);
    let n = 2 * lpflux::physoracle::max_component(&lpflux::analysis::field_modes(&small)) as usize + 2;
    let grid = GridSpec::Tensor { n: lpflux::analysis::smooth_size(n) };
    let div = divergence_residual_grid(&small, &grid).unwrap();
    println!("  grid {grid:?}: max|∇·U| = {:.3e}, max|∇U| = {:.3e}, relative {:.3e}", div.residual, div.grad_max, div.relative);

    let mut broken = small.spec.clone();
    broken.hooks.skip_leray = Some((3, 1));
    let bf = build_field_unchecked(&broken).unwrap();
    let control_exact = check_solenoidal(&bf);
    let control_grid = divergence_residual_grid(&bf, &grid).unwrap();
    println!(
        "  control skip_leray(3,1): {} exact violations, grid relative {:.3e}",
        control_exact.measured["violations"], control_grid.relative
    );

    let pass = exact.pass && div.relative < 1e-10 && !control_exact.pass && control_grid.relative > 1e-6;
    verdict("C1", pass, &format!("exact ξ·amp = 0 on every mode, grid divergence {:.2e} < 1e-10, control detected", div.relative));
    assert!(pass);
}

fn print_suite(label: &str, reports: &[VerificationReport]) -> bool {
    let mut ok = true;
    for r in reports {
        println!("  {label} {:<12} {} ({} witnesses)", r.name, if r.pass { "pass" } else { "fail" }, r.witnesses.len());
        ok &= r.pass;
    }
    ok
}

#[test]
fn c2_proposition_suite() {
    let _g = lock();
    let mut pass = true;
    for (den, lo, hi) in [(8, 3, 9), (16, 4, 10)] {
        let f = field(den, lo, hi);
        let reports = proposition_suite(&f, (lo, hi));
        pass &= print_suite(&format!("eps=1/{den} [{lo},{hi}]"), &reports);
    }

    // each hook must be caught by the check it targets
    let base = FieldSpec::new(rat(1, 16), 10).with_range(4, 10);
    let mut controls = Vec::new();
    for (hook, target) in [("side3", "sumset"), ("no_rotation", "windmill"), ("skip_leray", "solenoidal")] {
        let mut s = base.clone();
        lpflux::cli::apply_negative_control(&mut s, hook).unwrap();
        let f = build_field_unchecked(&s).unwrap();
        let mut reports = proposition_suite(&f, (4, 10));
        reports.push(check_solenoidal(&f));
        let hit = reports.iter().find(|r| r.name == target).map_or(0, |r| r.witnesses.len());
        let any: Vec<_> = reports.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
        println!("  control {hook}: {hit} {target} witnesses (failing checks: {any:?})");
        controls.push(hit > 0);
    }
    let controls_ok = controls.iter().all(|&c| c);
    verdict("C2", pass && controls_ok, "proposition suite at eps 1/8 and 1/16 plus negative controls");
    assert!(pass && controls_ok);
}

#[test]
fn c3_flux_decomposition() {
    let _g = lock();
    let f = field(16, 4, 13);
    let mut pass = true;
    for q in [6, 7] {
        let b = decomposition(&f, q, &window(9)).unwrap();
        let allowance = b.truncation_bound + 1e-9 * b.pi_total.abs();
        println!(
            "  q={q}: Π={:.12} loc={:.12} nonloc={:.12} residual={:.2e} allowance={:.2e}",
            b.pi_total, b.pi_local, b.pi_nonlocal, b.residual, allowance
        );
        pass &= b.residual <= allowance;
    }
    verdict("C3", pass, "|Π − Π_loc − Π_nonloc| ≤ truncation + 1e-9|Π| at eps 1/16, q 6 and 7, window top 9");
    assert!(pass);
}

#[test]
fn c4_local_flux_bracket() {
    let _g = lock();
    let skel = skeleton_flux_oracle(0);
    println!("  skeleton oracle {skel} (exact {})", skeleton_flux_exact(0));

    // band at eps = 1/16 over three consecutive feasible levels
    let f16 = field(16, 4, 9);
    let qs = f16.feasible_levels();
    let c16: Vec<f64> = qs.iter().map(|&q| local_constant(&f16, q)).collect();
    let band = rel_spread(&c16);
    println!("  eps=1/16 q={qs:?}: constants {c16:.5?}, band {:.1}%", 100.0 * band);
    let band_ok = qs.len() >= 3 && band <= 0.10;
    let positive = c16.iter().all(|&c| c > 0.0);
    let same_sign_as_skeleton = c16.iter().all(|&c| c * skel > 0.0);
    println!("  positive: {positive}; same sign as skeleton oracle: {same_sign_as_skeleton}");

    // approach to the skeleton value at fixed ελ
    let fields = [field(8, 3, 8), f16, field(32, 5, 10)];
    let mut monotone = true;
    for el in [8.0, 16.0, 32.0] {
        let dist: Vec<f64> = fields
            .iter()
            .map(|f| {
                let q = (el / f.spec.eps_f64()).log2().round() as i32;
                (local_constant(f, q) - skel).abs()
            })
            .collect();
        let ok = dist.windows(2).all(|w| w[1] < w[0]);
        println!("  ελ={el}: |const − skeleton| over eps 1/8,1/16,1/32 = {dist:.4?} monotone={ok}");
        monotone &= ok;
    }
    // the raw construction carries the skeleton's sign (negative in this
    // phase convention); calibration flips it, so sign agreement is the test
    let pass = band_ok && same_sign_as_skeleton && monotone;
    verdict(
        "C4",
        pass,
        &format!("band {:.1}% (≤ 10%), sign of skeleton {same_sign_as_skeleton}, monotone approach {monotone}", 100.0 * band),
    );
    assert!(pass);
}

#[test]
fn c5_nonlocal_smallness() {
    let _g = lock();
    let mut ratios = Vec::new();
    for (den, lo, hi) in [(8, 3, 8), (16, 4, 9)] {
        let f = field(den, lo, hi);
        let e = 1.0 / den as f64;
        let mut r_max = 0.0f64;
        for q in f.feasible_levels() {
            let b = decomposition(&f, q, &window(hi)).unwrap();
            let r = b.pi_nonlocal.abs() / b.pi_local.abs();
            println!("  eps=1/{den} q={q}: |Π_nonloc|/|Π_loc| = {r:.4}");
            r_max = r_max.max(r);
        }
        let k = r_max / (e * (1.0 / e).log2());
        println!("  eps=1/{den}: max ratio {r_max:.4}, implied K = {k:.3}");
        ratios.push(r_max);
    }
    let factor = ratios[0] / ratios[1];
    // with K fixed, the bound itself shrinks by 1.5 from eps 1/8 to 1/16
    let pass = (1.5..=3.0).contains(&factor);
    verdict("C5", pass, &format!("ratio decrease factor {factor:.3} (need [1.5, 3])"));
    assert!(pass);
}

#[test]
fn c6_theorem_plateau() {
    let _g = lock();
    let cfg = RunConfig {
        field: FieldConfig { eps: "1/16".into(), q_min: Some(4), q_max: 10, ..FieldConfig::default() },
        target_c: Some(1.0),
        delta: 0.3,
        ..RunConfig::default()
    };
    let spec = cfg.validate().unwrap();
    let f = build_field(&spec).unwrap();
    let res = cmd_flux(&f, &cfg).unwrap();
    for r in &res.rows {
        println!("  q={}: Π_q = {:.6} inside (0.7, 1.3): {:?}", r.breakdown.q, r.breakdown.pi_total, r.inside);
    }
    let plateau = !res.rows.is_empty() && res.rows.iter().all(|r| r.inside == Some(true));

    let cfg7 = window(9);
    let base = flux_total(&f, 7, &cfg7).unwrap();
    let mut homog = true;
    for gamma in [2.0, 1.0 / 3.0] {
        let scaled = flux_total(&f.rescaled(gamma), 7, &cfg7).unwrap();
        let rel = (scaled - gamma.powi(3) * base).abs() / (gamma.powi(3) * base).abs();
        println!("  γ={gamma:.4}: relative deviation from γ³ scaling {rel:.2e}");
        homog &= rel <= 1e-12;
    }
    let pass = plateau && homog;
    verdict("C6", pass, &format!("all feasible q inside (0.7, 1.3): {plateau}; cubic homogeneity to 1e-12: {homog}"));
    assert!(pass);
}

#[test]
fn c7_regularity_scaling() {
    let _g = lock();
    let scaled = |f: &Field, q: i32, p: f64| -> (f64, f64) {
        let norm = if p == 2.0 { l2_norm_exact(f, q) } else { lp_norm_grid(f, q, p, &default_grid(f, q)).unwrap() };
        (lambda(q).powf(3.0 / p - 2.0 / 3.0) * norm, norm)
    };
    let f16 = field(16, 4, 9);
    let qs = f16.feasible_levels();
    let mut pass = true;
    for p in [2.0, 3.0] {
        let v: Vec<f64> = qs.iter().map(|&q| scaled(&f16, q, p).0).collect();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let spread = (hi - lo) / lo;
        println!("  eps=1/16 p={p} q={qs:?}: λ^(3/p−2/3)‖u_q‖_p = {v:.5?}, spread {:.2}%", 100.0 * spread);
        pass &= spread < 0.10;
    }

    // one ε-halving at ελ = 16, the middle of the feasible range
    let f8 = field(8, 3, 8);
    for p in [2.0, 3.0] {
        let a = scaled(&f8, 7, p).0;
        let b = scaled(&f16, 8, p).0;
        let measured = (b / a).log2() * -1.0;
        let expected = 1.0 - 3.0 / p;
        // relative for a nonzero exponent, absolute 0.25 for p = 3
        let err = if expected != 0.0 { (measured - expected).abs() / expected.abs() } else { (measured - expected).abs() };
        println!("  p={p}: ε-exponent {measured:.4} vs {expected:.4} (error {err:.3})");
        pass &= err <= 0.25;
    }

    let mut worst = 0.0f64;
    for &q in &qs {
        let exact = l2_norm_exact(&f16, q);
        let grid = lp_norm_grid(&f16, q, 2.0, &default_grid(&f16, q)).unwrap();
        worst = worst.max((exact - grid).abs() / exact);
    }
    println!("  exact vs grid L²: worst relative {worst:.2e}");
    pass &= worst <= 1e-10;
    verdict("C7", pass, "norm spread < 10% (p = 2, 3), ε-exponent within 25%, exact vs grid L² ≤ 1e-10");
    assert!(pass);
}

#[test]
fn c8_oracle_equivalence() {
    let _g = lock();
    let f = field(8, 3, 7);
    let engine = flux_total(&f, 5, &FluxConfig::default()).unwrap();
    let physical = physical_flux_oracle(&f, 5, &GridSpec::Demodulated { max_n: 256 }).unwrap();
    let rel = (engine - physical).abs() / engine.abs();
    println!("  triad engine {engine:.15}, physical quadrature {physical:.15}");
    let pass = rel <= 1e-8;
    verdict("C8", pass, &format!("relative disagreement {rel:.2e} ≤ 1e-8"));
    assert!(pass);
}

#[test]
fn c9_determinism() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: usize| {
        let out = dir.path().join(format!("t{threads}"));
        let cfg = RunConfig {
            field: FieldConfig { eps: "1/8".into(), eps0: Some("1/8".into()), q_min: Some(3), q_max: 7, ..FieldConfig::default() },
            commands: vec![Command::Build, Command::Flux, Command::Norms, Command::Report],
            target_c: Some(1.0),
            output_dir: out.clone(),
            thread_count: Some(threads),
            ..RunConfig::default()
        };
        execute(&cfg).unwrap();
        out
    };
    let (a, b) = (run(1), run(3));
    let mut pass = true;
    for name in ["flux.csv", "flux.json", "norms.json", "report.json", "plot_flux_total.dat"] {
        let same = std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap();
        println!("  {name}: identical {same}");
        pass &= same;
    }
    verdict("C9", pass, "outputs bit-identical across 1 and 3 threads");
    assert!(pass);
}

