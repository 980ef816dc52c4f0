//! Declarative runs: a TOML config names the field and the commands to
//! execute; every command writes CSV/JSON into the output directory and the
//! `report` command folds those into one `report.json` plus plot files.
//!
//! Everything written to `report.json` and the per-command files is a pure
//! function of the config, so runs with different thread counts produce
//! identical bytes. Wall-clock times go to `timings.json` instead.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, NormTable};
use crate::construction::{
    build_field, lambda, ActiveRegion, ConstructionError, CutoffKind, Field, FieldSpec, Generation, Hooks, ScaledVec,
};
use crate::flux::{self, FluxBreakdown, FluxConfig, FluxError};
use crate::qfield::{parse_rat, rat, Rat};
use crate::verify::{self, VerificationReport};

/// Bumped whenever the cache layout or the meaning of cached data changes.
pub const CACHE_SCHEMA: &str = "lpflux-cache-1";
pub const REPORT_SCHEMA: &str = "lpflux-report-1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("estimated work {estimated:.3e} exceeds budget {budget:.3e}")]
    BudgetExceeded { estimated: f64, budget: f64 },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Build,
    Flux,
    Verify,
    Norms,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Build => "build",
            Command::Flux => "flux",
            Command::Verify => "verify",
            Command::Norms => "norms",
            Command::Report => "report",
        }
    }
}

/// Field section of the config file; unset keys take [`FieldSpec::new`]
/// defaults. `eps` and `eps0` are exact rationals written as strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub eps: String,
    pub eps0: Option<String>,
    pub q_min: Option<i32>,
    pub q_max: i32,
    pub amplitude_scale: f64,
    pub cutoff_order: u32,
    pub dense_limit: Option<u64>,
    pub hooks: Hooks,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            eps: "1/16".into(),
            eps0: None,
            q_min: Some(4),
            q_max: 10,
            amplitude_scale: 1.0,
            cutoff_order: 1,
            dense_limit: None,
            hooks: Hooks::default(),
        }
    }
}

impl FieldConfig {
    pub fn to_spec(&self) -> Result<FieldSpec, CliError> {
        let eps = parse_rational(&self.eps)?;
        let mut s = FieldSpec::new(eps, self.q_max);
        if let Some(q) = self.q_min {
            s.q_min = q;
        }
        if let Some(e0) = &self.eps0 {
            s.eps0 = parse_rational(e0)?;
        }
        if let Some(d) = self.dense_limit {
            s.dense_limit = d;
        }
        s.amplitude_scale = self.amplitude_scale;
        s.cutoff_kind = CutoffKind::Smoothstep { order: self.cutoff_order };
        s.hooks = self.hooks.clone();
        Ok(s)
    }
}

fn parse_rational(s: &str) -> Result<Rat, CliError> {
    parse_rat(s.trim()).ok_or_else(|| CliError::Config(format!("`{s}` is not a rational number")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub field: FieldConfig,
    pub commands: Vec<Command>,
    /// Levels for `flux`; empty means the field's feasible levels.
    pub flux_q_list: Vec<i32>,
    /// Highest generation entering flux sums; unset means the highest
    /// feasible level.
    pub flux_window_top: Option<i32>,
    /// Verification windows `[lo, hi]`; empty means the whole field.
    pub verify_windows: Vec<(i32, i32)>,
    /// Levels for `norms`; empty means the field's feasible levels.
    pub norm_q_list: Vec<i32>,
    pub norm_p_list: Vec<f64>,
    /// Pass threshold on the `(max − min)/min` spread of scaled norms.
    pub norm_spread_threshold: f64,
    pub target_c: Option<f64>,
    pub delta: f64,
    /// Cap on estimated flux work (multiply-adds).
    pub budget: f64,
    /// One of `no_rotation`, `side3`, `skip_leray`; see [`apply_negative_control`].
    pub negative_control: Option<String>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub thread_count: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            field: FieldConfig::default(),
            commands: vec![Command::Build, Command::Flux, Command::Verify, Command::Norms, Command::Report],
            flux_q_list: Vec::new(),
            flux_window_top: None,
            verify_windows: Vec::new(),
            norm_q_list: Vec::new(),
            norm_p_list: vec![2.0, 3.0],
            norm_spread_threshold: 0.1,
            target_c: None,
            delta: 0.3,
            budget: 2e11,
            negative_control: None,
            output_dir: PathBuf::from("lpflux-out"),
            cache_dir: None,
            thread_count: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        RunConfig::from_toml(&fs::read_to_string(path)?)
    }

    /// Field spec with the negative-control hook applied.
    pub fn spec(&self) -> Result<FieldSpec, CliError> {
        let mut s = self.field.to_spec()?;
        if let Some(name) = &self.negative_control {
            apply_negative_control(&mut s, name)?;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<FieldSpec, CliError> {
        let spec = self.spec()?;
        spec.validate()?;
        if self.target_c.is_some() && !(self.delta > 0.0) {
            return Err(CliError::Config(format!("delta = {} must be positive when target_c is set", self.delta)));
        }
        let range = spec.q_min..=spec.q_max;
        let check = |what: &str, q: i32| {
            if range.contains(&q) {
                Ok(())
            } else {
                Err(CliError::Config(format!("{what} level {q} outside field range [{}, {}]", spec.q_min, spec.q_max)))
            }
        };
        for &q in self.flux_q_list.iter().chain(&self.norm_q_list) {
            check("requested", q)?;
        }
        if let Some(t) = self.flux_window_top {
            check("flux window top", t)?;
        }
        for &(lo, hi) in &self.verify_windows {
            if lo <= hi {
                check("verify window", lo)?;
                check("verify window", hi)?;
            }
        }
        for &p in &self.norm_p_list {
            if !(p >= 1.0) {
                return Err(CliError::Config(format!("norm exponent p = {p} must be at least 1")));
            }
        }
        Ok(spec)
    }

    /// The config minus run-environment keys (paths, threads).
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            for k in ["output_dir", "cache_dir", "thread_count"] {
                m.remove(k);
            }
        }
        v
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo().to_string().as_bytes()))
    }
}

/// Test hooks that deliberately break one construction property.
pub fn apply_negative_control(spec: &mut FieldSpec, name: &str) -> Result<(), CliError> {
    match name {
        "no_rotation" => spec.hooks.no_rotation = true,
        "side3" => spec.hooks.side3 = Some(1),
        "skip_leray" => spec.hooks.skip_leray = Some((spec.q_min, 1)),
        other => return Err(CliError::Config(format!("unknown negative control `{other}`"))),
    }
    Ok(())
}

// ---------------------------------------------------------------- cache

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Disabled,
    Hit,
    Miss,
    /// A cache entry existed under another schema and was rebuilt.
    Stale,
}

#[derive(Serialize, Deserialize)]
struct GenRecord {
    q: i32,
    j: usize,
    regions: [ActiveRegion; 3],
    gen_scale: f64,
    v_scaled: [ScaledVec; 3],
    projected: [bool; 3],
    dense: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    spec: FieldSpec,
    gens: Vec<GenRecord>,
}

fn cache_entry(dir: &Path, spec: &FieldSpec) -> PathBuf {
    dir.join(spec.content_hash())
}

fn write_dirs(path: &Path, dirs: &[Vec<[f64; 3]>; 3]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for d in dirs {
        buf.extend_from_slice(&(d.len() as u64).to_le_bytes());
        for v in d {
            for c in v {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)
}

fn read_dirs(path: &Path) -> std::io::Result<[Vec<[f64; 3]>; 3]> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, format!("truncated {}", path.display()));
    let mut pos = 0usize;
    let take8 = |pos: &mut usize| -> std::io::Result<[u8; 8]> {
        let s = bytes.get(*pos..*pos + 8).ok_or_else(bad)?;
        *pos += 8;
        Ok(s.try_into().unwrap())
    };
    let mut out: [Vec<[f64; 3]>; 3] = Default::default();
    for d in &mut out {
        let n = u64::from_le_bytes(take8(&mut pos)?) as usize;
        d.reserve(n);
        for _ in 0..n {
            let mut v = [0.0; 3];
            for c in &mut v {
                *c = f64::from_le_bytes(take8(&mut pos)?);
            }
            d.push(v);
        }
    }
    Ok(out)
}

fn store(entry: &Path, field: &Field) -> Result<(), CliError> {
    fs::create_dir_all(entry)?;
    let gens = field
        .gens
        .iter()
        .map(|g| GenRecord {
            q: g.q,
            j: g.j,
            regions: g.regions,
            gen_scale: g.gen_scale,
            v_scaled: g.v_scaled,
            projected: g.projected,
            dense: g.is_dense(),
        })
        .collect();
    for g in &field.gens {
        if let Some(d) = &g.dirs {
            write_dirs(&entry.join(format!("gen_{}.bin", g.q)), d)?;
        }
    }
    // manifest last: its presence marks a complete entry
    let m = Manifest { schema: CACHE_SCHEMA.into(), spec: field.spec.clone(), gens };
    fs::write(entry.join("manifest.json"), serde_json::to_vec(&m)?)?;
    Ok(())
}

fn load(entry: &Path, spec: &FieldSpec) -> Result<Option<Field>, CliError> {
    let path = entry.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let m: Manifest = match serde_json::from_slice(&fs::read(&path)?) {
        Ok(m) => m,
        Err(_) => return Ok(None),
    };
    if m.schema != CACHE_SCHEMA || &m.spec != spec {
        return Ok(None);
    }
    let mut gens = Vec::with_capacity(m.gens.len());
    for r in m.gens {
        let dirs = if r.dense { Some(read_dirs(&entry.join(format!("gen_{}.bin", r.q)))?) } else { None };
        gens.push(Generation {
            q: r.q,
            j: r.j,
            regions: r.regions,
            gen_scale: r.gen_scale,
            v_scaled: r.v_scaled,
            projected: r.projected,
            dirs,
        });
    }
    let skeleton = crate::construction::make_skeleton_with(!spec.hooks.no_rotation);
    Ok(Some(Field { spec: spec.clone(), skeleton, gens }))
}

/// Field for `spec`, read from `cache_dir` when a matching entry exists and
/// built (then stored) otherwise.
pub fn load_or_build(spec: &FieldSpec, cache_dir: Option<&Path>) -> Result<(Field, CacheStatus), CliError> {
    let Some(dir) = cache_dir else {
        return Ok((build_field(spec)?, CacheStatus::Disabled));
    };
    let entry = cache_entry(dir, spec);
    let existed = entry.join("manifest.json").exists();
    if let Some(f) = load(&entry, spec)? {
        return Ok((f, CacheStatus::Hit));
    }
    let field = build_field(spec)?;
    if existed {
        eprintln!("notice: cache entry {} is stale, rebuilding", entry.display());
        fs::remove_dir_all(&entry)?;
    }
    store(&entry, &field)?;
    Ok((field, if existed { CacheStatus::Stale } else { CacheStatus::Miss }))
}

// ------------------------------------------------------------- commands

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildRow {
    pub q: i32,
    pub j: usize,
    pub eps_lambda: String,
    pub counts: [usize; 3],
    pub modes: usize,
    pub dense: bool,
    /// `(sελ − 1)³ ≤ |A^{(i)}| ≤ (sελ + 1)³` for all three regions.
    pub in_bracket: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildResult {
    pub spec_hash: String,
    pub cache: CacheStatus,
    pub levels: Vec<BuildRow>,
    pub pass: bool,
}

pub fn cmd_build(field: &Field, cache: CacheStatus) -> BuildResult {
    let spec = &field.spec;
    let levels: Vec<BuildRow> = field
        .gens
        .iter()
        .map(|g| {
            let el = spec.eps_lambda(g.q);
            let counts = [0, 1, 2].map(|i| g.regions[i].len());
            let in_bracket = (0..3).all(|i| {
                let side = &el * Rat::from_integer(BigInt::from(spec.side_multiple(i)));
                let n = Rat::from_integer(BigInt::from(counts[i]));
                let cube = |r: Rat| &r * &r * &r;
                let lo = &side - rat(1, 1);
                let lo = if lo < Rat::from_integer(0.into()) { Rat::from_integer(0.into()) } else { lo };
                cube(lo) <= n && n <= cube(&side + rat(1, 1))
            });
            BuildRow { q: g.q, j: g.j, eps_lambda: el.to_string(), counts, modes: g.mode_count(), dense: g.is_dense(), in_bracket }
        })
        .collect();
    let pass = levels.iter().all(|r| r.in_bracket);
    BuildResult { spec_hash: spec.content_hash(), cache, levels, pass }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxRow {
    pub breakdown: FluxBreakdown,
    /// Whether `Π_q ∈ (c − δ, c + δ)`, when a target is set.
    pub inside: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxResult {
    pub amplitude_scale: f64,
    pub target_c: Option<f64>,
    pub delta: f64,
    pub window_top: i32,
    pub estimated_work: f64,
    pub rows: Vec<FluxRow>,
    pub pass: bool,
}

/// Rough multiply-add count of the block sums behind `decomposition(q)`.
pub fn flux_work(field: &Field, q: i32, top: i32) -> f64 {
    let len = |l: i32, i: usize| field.gen(l).map_or(0.0, |g| g.regions[i].len() as f64);
    let mut w = 4.0 * len(q, 0) * len(q, 1).max(len(q, 2));
    for l in field.spec.q_min..=q {
        for k in q..=top {
            w += 3.0 * len(l, 0) * (0..3).map(|i| len(k, i)).sum::<f64>();
        }
    }
    // total flux runs the same sums a second time
    2.0 * w
}

pub fn flux_levels(field: &Field, cfg: &RunConfig) -> (Vec<i32>, i32) {
    let feasible = field.feasible_levels();
    let top = cfg.flux_window_top.or(feasible.last().copied()).unwrap_or(field.dense_top()).min(field.dense_top());
    let qs = if cfg.flux_q_list.is_empty() { feasible.into_iter().filter(|&q| q <= top).collect() } else { cfg.flux_q_list.clone() };
    (qs, top)
}

pub fn cmd_flux(field: &Field, cfg: &RunConfig) -> Result<FluxResult, CliError> {
    let (qs, top) = flux_levels(field, cfg);
    let estimated: f64 = qs.iter().map(|&q| flux_work(field, q, top)).sum();
    if estimated > cfg.budget {
        return Err(CliError::BudgetExceeded { estimated, budget: cfg.budget });
    }
    let (field, scale) = match cfg.target_c {
        Some(c) => {
            let s = flux::calibrate_amplitude(&field.spec, c)?;
            let gamma = s / field.spec.amplitude_scale;
            (field.rescaled(gamma), s)
        }
        None => (field.clone(), field.spec.amplitude_scale),
    };
    let fc = FluxConfig { window_top: Some(top), ..FluxConfig::default() };
    let mut rows = Vec::new();
    for &q in &qs {
        let b = flux::decomposition(&field, q, &fc)?;
        let inside = cfg.target_c.map(|c| b.pi_total > c - cfg.delta && b.pi_total < c + cfg.delta);
        rows.push(FluxRow { breakdown: b, inside });
    }
    let pass = rows.iter().all(|r| r.breakdown.pass && r.inside != Some(false));
    Ok(FluxResult { amplitude_scale: scale, target_c: cfg.target_c, delta: cfg.delta, window_top: top, estimated_work: estimated, rows, pass })
}

pub fn write_flux_csv<W: Write>(res: &FluxResult, w: W) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "q",
        "pi_total",
        "pi_local",
        "pi_nonlocal",
        "pi_nonlocal_printed_gate",
        "truncation_bound",
        "lower_bracket",
        "upper_bracket",
        "residual",
        "window_top",
        "pass",
        "inside",
    ])?;
    for r in &res.rows {
        let b = &r.breakdown;
        wr.write_record([
            b.q.to_string(),
            b.pi_total.to_string(),
            b.pi_local.to_string(),
            b.pi_nonlocal.to_string(),
            b.pi_nonlocal_printed_gate.to_string(),
            b.truncation_bound.to_string(),
            b.lower_bracket.to_string(),
            b.upper_bracket.to_string(),
            b.residual.to_string(),
            b.window_top.to_string(),
            b.pass.to_string(),
            r.inside.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub windows: Vec<(i32, i32)>,
    pub reports: Vec<VerificationReport>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

pub fn cmd_verify(field: &Field, cfg: &RunConfig) -> VerifyResult {
    let windows = if cfg.verify_windows.is_empty() {
        vec![(field.spec.q_min, field.spec.q_max)]
    } else {
        cfg.verify_windows.clone()
    };
    let mut reports = vec![verify::check_solenoidal(field)];
    let mut warnings = Vec::new();
    for &(lo, hi) in &windows {
        if lo > hi {
            let w = format!("window [{lo}, {hi}] is empty; nothing to verify");
            eprintln!("warning: {w}");
            warnings.push(w);
            continue;
        }
        reports.extend(verify::proposition_suite(field, (lo, hi)));
    }
    let pass = reports.iter().all(|r| r.pass);
    VerifyResult { windows, reports, warnings, pass }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactVsGrid {
    pub q: i32,
    pub exact: f64,
    pub grid: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadSummary {
    pub p: f64,
    pub spread: f64,
    pub below_threshold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BesovLevels {
    pub p: f64,
    pub s: f64,
    /// `(q, λ_q^s ‖Δ_q U‖_p)`.
    pub levels: Vec<(i32, f64)>,
    /// Levels whose `Δ_q` support reaches past the feasible range.
    pub skipped: Vec<i32>,
    pub sup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormsResult {
    pub table: NormTable,
    pub exact_vs_grid: Vec<ExactVsGrid>,
    pub spread: Vec<SpreadSummary>,
    pub besov: Vec<BesovLevels>,
    pub pass: bool,
}

/// Tolerance of the exact-vs-grid L² cross-check.
pub const L2_AGREEMENT: f64 = 1e-10;

pub fn cmd_norms(field: &Field, cfg: &RunConfig) -> Result<NormsResult, CliError> {
    let qs = if cfg.norm_q_list.is_empty() { field.feasible_levels() } else { cfg.norm_q_list.clone() };
    let table = analysis::norm_table(field, &qs, &cfg.norm_p_list)?;
    let mut exact_vs_grid = Vec::new();
    for &q in &qs {
        let exact = analysis::l2_norm_exact(field, q);
        let grid = analysis::lp_norm_grid(field, q, 2.0, &analysis::default_grid(field, q))?;
        exact_vs_grid.push(ExactVsGrid { q, exact, grid, relative: (exact - grid).abs() / exact });
    }
    let spread: Vec<SpreadSummary> = cfg
        .norm_p_list
        .iter()
        .map(|&p| {
            let s = if qs.len() < 2 { 0.0 } else { table.spread(p) };
            SpreadSummary { p, spread: s, below_threshold: s < cfg.norm_spread_threshold }
        })
        .collect();
    // Δ_q also sees generation q + 1; grid norms need it feasible too
    let grid_top = field.feasible_levels().last().copied().unwrap_or(field.spec.q_min - 1);
    let mut besov = Vec::new();
    for &p in &cfg.norm_p_list {
        let s = 3.0 / p - 2.0 / 3.0;
        let (mut levels, mut skipped) = (Vec::new(), Vec::new());
        for &q in &qs {
            if p == 2.0 {
                levels.push((q, lambda(q).powf(s) * analysis::deltaq_l2(field, q)));
            } else if q < grid_top || q >= field.spec.q_max {
                levels.push((q, lambda(q).powf(s) * analysis::deltaq_lp(field, q, p)?));
            } else {
                skipped.push(q);
            }
        }
        let sup = levels.iter().map(|l| l.1).fold(0.0, f64::max);
        besov.push(BesovLevels { p, s, levels, skipped, sup });
    }
    let pass = exact_vs_grid.iter().all(|e| e.relative <= L2_AGREEMENT) && spread.iter().all(|s| s.below_threshold);
    Ok(NormsResult { table, exact_vs_grid, spread, besov, pass })
}

// --------------------------------------------------------------- report

/// Consolidated output of a run (`report.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub config: Value,
    pub config_hash: String,
    pub spec_hash: String,
    /// Per-command results keyed by command name.
    pub results: BTreeMap<String, Value>,
    /// Per-command pass flags.
    pub passed: BTreeMap<String, bool>,
    pub pass: bool,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_series(path: &Path, pts: impl IntoIterator<Item = (f64, f64)>) -> Result<(), CliError> {
    let mut s = String::new();
    for (x, y) in pts {
        s.push_str(&format!("{x} {y}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

fn p_tag(p: f64) -> String {
    format!("{p}").replace('.', "_")
}

/// Fold the command outputs found in `out` into `report.json` and write the
/// plot series (`plot_*.dat`, two numeric columns each).
pub fn cmd_report(cfg: &RunConfig, spec: &FieldSpec, out: &Path) -> Result<RunReport, CliError> {
    let mut results = BTreeMap::new();
    let mut passed = BTreeMap::new();
    for c in [Command::Build, Command::Flux, Command::Verify, Command::Norms] {
        let path = out.join(format!("{}.json", c.name()));
        if path.exists() {
            let v: Value = serde_json::from_slice(&fs::read(&path)?)?;
            passed.insert(c.name().to_string(), v.get("pass").and_then(Value::as_bool).unwrap_or(false));
            results.insert(c.name().to_string(), v);
        }
    }
    if results.is_empty() {
        return Err(CliError::MissingInput(format!("no command outputs in {}", out.display())));
    }
    if let Some(v) = results.get("flux") {
        let f: FluxResult = serde_json::from_value(v.clone())?;
        let col = |g: fn(&FluxBreakdown) -> f64| f.rows.iter().map(move |r| (r.breakdown.q as f64, g(&r.breakdown))).collect::<Vec<_>>();
        write_series(&out.join("plot_flux_total.dat"), col(|b| b.pi_total))?;
        write_series(&out.join("plot_flux_local.dat"), col(|b| b.pi_local))?;
        write_series(&out.join("plot_flux_nonlocal.dat"), col(|b| b.pi_nonlocal))?;
        write_series(&out.join("plot_flux_lower_bracket.dat"), col(|b| b.lower_bracket))?;
        write_series(&out.join("plot_flux_upper_bracket.dat"), col(|b| b.upper_bracket))?;
    }
    if let Some(v) = results.get("norms") {
        let n: NormsResult = serde_json::from_value(v.clone())?;
        for b in &n.besov {
            write_series(&out.join(format!("plot_besov_p{}.dat", p_tag(b.p))), b.levels.iter().map(|&(q, y)| (q as f64, y)))?;
        }
        for &p in &cfg.norm_p_list {
            let pts = n.table.rows.iter().filter(|r| r.p == p).map(|r| (r.q as f64, r.scaled));
            write_series(&out.join(format!("plot_norm_p{}.dat", p_tag(p))), pts)?;
        }
    }
    let pass = passed.values().all(|&p| p);
    let report = RunReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.echo(),
        config_hash: cfg.hash(),
        spec_hash: spec.content_hash(),
        results,
        passed,
        pass,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Outcome of [`execute`]: pass flags per command plus timings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub passed: BTreeMap<String, bool>,
    pub seconds: BTreeMap<String, f64>,
    pub pass: bool,
}

/// Run every command of `cfg` in order inside a thread pool of the
/// configured size.
pub fn execute(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let spec = cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.thread_count {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| execute_in_pool(cfg, &spec))
}

fn execute_in_pool(cfg: &RunConfig, spec: &FieldSpec) -> Result<RunSummary, CliError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut summary = RunSummary::default();
    let mut field: Option<(Field, CacheStatus)> = None;
    let get_field = |field: &mut Option<(Field, CacheStatus)>| -> Result<(), CliError> {
        if field.is_none() {
            *field = Some(load_or_build(spec, cfg.cache_dir.as_deref())?);
        }
        Ok(())
    };
    for &c in &cfg.commands {
        let t = Instant::now();
        let pass = match c {
            Command::Build => {
                get_field(&mut field)?;
                let (f, status) = field.as_ref().unwrap();
                let r = cmd_build(f, *status);
                print_build(&r);
                write_json(&out.join("build.json"), &r)?;
                r.pass
            }
            Command::Flux => {
                get_field(&mut field)?;
                let r = cmd_flux(&field.as_ref().unwrap().0, cfg)?;
                write_flux_csv(&r, fs::File::create(out.join("flux.csv"))?)?;
                write_json(&out.join("flux.json"), &r)?;
                r.pass
            }
            Command::Verify => {
                get_field(&mut field)?;
                let r = cmd_verify(&field.as_ref().unwrap().0, cfg);
                for rep in &r.reports {
                    println!("{:<12} {} ({} witnesses)", rep.name, if rep.pass { "pass" } else { "FAIL" }, rep.witnesses.len());
                }
                write_json(&out.join("verify.json"), &r)?;
                r.pass
            }
            Command::Norms => {
                get_field(&mut field)?;
                let r = cmd_norms(&field.as_ref().unwrap().0, cfg)?;
                r.table.write_csv(fs::File::create(out.join("norms.csv"))?)?;
                write_json(&out.join("norms.json"), &r)?;
                r.pass
            }
            Command::Report => cmd_report(cfg, spec, out)?.pass,
        };
        summary.passed.insert(c.name().to_string(), pass);
        summary.seconds.insert(c.name().to_string(), t.elapsed().as_secs_f64());
    }
    summary.pass = summary.passed.values().all(|&p| p);
    write_json(&out.join("timings.json"), &summary.seconds)?;
    Ok(summary)
}

fn print_build(r: &BuildResult) {
    println!("spec {} (cache: {:?})", &r.spec_hash[..12], r.cache);
    println!("{:>3} {:>2} {:>6} {:>9} {:>9} {:>9} {:>10} {:>6}", "q", "j", "ελ", "|A1|", "|A2|", "|A3|", "modes", "dense");
    for l in &r.levels {
        println!(
            "{:>3} {:>2} {:>6} {:>9} {:>9} {:>9} {:>10} {:>6}{}",
            l.q,
            l.j,
            l.eps_lambda,
            l.counts[0],
            l.counts[1],
            l.counts[2],
            l.modes,
            l.dense,
            if l.in_bracket { "" } else { "  outside cardinality bracket" }
        );
    }
}
