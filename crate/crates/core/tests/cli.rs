use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lpflux::cli::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_lpflux");

const BASE: &str = r#"
flux_q_list = [6, 7]
flux_window_top = 8
verify_windows = [[4, 8]]
norm_q_list = [5, 6, 7]
norm_p_list = [2, 3]

[field]
eps = "1/16"
q_min = 4
q_max = 8
"#;

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    let text = format!("output_dir = {:?}\ncache_dir = {:?}\n{extra}\n{BASE}", dir.join("out"), dir.join("cache"));
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("LPFLUX_OUT").env_remove("LPFLUX_CACHE").output().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn second_build_hits_the_cache() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let cfg = cfg.to_str().unwrap();
    let first = run(&["build", "--config", cfg]);
    assert_eq!(first.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&first.stdout).contains("cache: Miss"));
    let second = run(&["build", "--config", cfg]);
    assert!(String::from_utf8_lossy(&second.stdout).contains("cache: Hit"));
    assert_eq!(json(&d.path().join("out/build.json"))["levels"].as_array().unwrap().len(), 5);
}

#[test]
fn invalid_eps_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let out = run(&["build", "--config", cfg.to_str().unwrap(), "--eps", "1/2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn empty_verify_window_warns_and_passes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[[4, 8]]", "[[7, 5]]");
    fs::write(&cfg, text).unwrap();
    let out = run(&["verify", "--config", cfg.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning:"));
    let v = json(&d.path().join("out/verify.json"));
    assert_eq!(v["pass"], true);
    assert!(!v["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn full_run_writes_consistent_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "target_c = 1.0");
    let out = run(&["run", "--config", cfg.to_str().unwrap()]);
    // a non-zero code here would be a failed check, never an error
    assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let o = d.path().join("out");

    let norms = fs::read_to_string(o.join("norms.csv")).unwrap();
    assert_eq!(norms.lines().count(), 1 + 3 * 2);

    let report = json(&o.join("report.json"));
    let want = RunConfig::load(&cfg).unwrap().hash();
    assert_eq!(report["config_hash"], want.as_str());
    assert_eq!(report["schema"], "lpflux-report-1");

    for name in ["plot_flux_total.dat", "plot_flux_local.dat", "plot_norm_p2.dat", "plot_besov_p2.dat"] {
        let text = fs::read_to_string(o.join(name)).unwrap();
        assert!(!text.is_empty(), "{name}");
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(cols.len(), 2, "{name}: {line}");
            assert!(cols.iter().all(|c| c.parse::<f64>().is_ok()), "{name}: {line}");
        }
    }
}

#[test]
fn flux_scales_with_the_target() {
    let totals = |c: f64| -> Vec<f64> {
        let d = tempfile::tempdir().unwrap();
        let cfg = write_config(d.path(), &format!("target_c = {c:?}"));
        run(&["flux", "--config", cfg.to_str().unwrap()]);
        let csv = fs::read_to_string(d.path().join("out/flux.csv")).unwrap();
        csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
    };
    let (one, ten) = (totals(1.0), totals(10.0));
    assert_eq!(one.len(), 2);
    for (a, b) in one.iter().zip(&ten) {
        assert!((b - 10.0 * a).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
    }
}
