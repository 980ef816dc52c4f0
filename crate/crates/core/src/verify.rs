//! Exhaustive checks of the geometric statements the flux analysis relies on,
//! run on the lattice data of a built field.
//!
//! Active regions are integer boxes, so the set of sums of points from three
//! regions is again a full integer box. A triad closes across three signed
//! regions exactly when that box contains the origin, which makes the
//! cross-generation checks exhaustive without touching individual modes.
//! Mode-level enumeration ([`enumerate_cross_triads`]) is kept for small
//! instances and as a cross-check.

use std::collections::{BTreeMap, HashSet};

use num_traits::ToPrimitive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construction::{in_blur_cube, pow2, sign_surd, ActiveRegion, Field, FreqVec, Generation};
use crate::flux::{flux_pair, n_eps};
use crate::lpcalc::norm2_range;
use crate::qfield::{qf_sign, rat, Rat, Vec3X, QF15};

pub const DEFAULT_BUDGET: u64 = 2_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("enumeration needs about {estimated} pair evaluations (budget {budget})")]
    BudgetExceeded { estimated: u64, budget: u64 },
}

/// Where one frequency of a triad lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub q: i32,
    /// One-based component index.
    pub i: usize,
    pub sign: i8,
    /// Plane index `q mod 3`.
    pub j: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriadWitness {
    pub xi: [FreqVec; 3],
    pub slots: [Slot; 3],
}

impl TriadWitness {
    pub fn closes(&self) -> bool {
        (0..3).all(|k| self.xi[0][k] + self.xi[1][k] + self.xi[2][k] == 0)
    }

    pub fn gens(&self) -> [i32; 3] {
        self.slots.map(|s| s.q)
    }

    /// The same triad with its three entries in sorted order.
    pub fn canonical(&self) -> TriadWitness {
        let mut e: Vec<(Slot, FreqVec)> = (0..3).map(|k| (self.slots[k], self.xi[k])).collect();
        e.sort();
        TriadWitness { xi: [e[0].1, e[1].1, e[2].1], slots: [e[0].0, e[1].0, e[2].0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Witness {
    Triad(TriadWitness),
    /// A mode or region violating a pointwise bound.
    Mode { q: i32, i: usize, xi: FreqVec, what: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub name: String,
    pub params: BTreeMap<String, String>,
    pub pass: bool,
    pub witnesses: Vec<Witness>,
    pub measured: BTreeMap<String, f64>,
}

impl VerificationReport {
    fn new(name: &str) -> Self {
        VerificationReport { name: name.into(), ..Default::default() }
    }

    fn param(mut self, k: &str, v: impl ToString) -> Self {
        self.params.insert(k.into(), v.to_string());
        self
    }

    fn finish(mut self) -> Self {
        self.pass = self.witnesses.is_empty();
        self
    }
}

/// A region with a sign, as a box of frequencies.
#[derive(Clone, Copy, Debug)]
struct SBox {
    slot: Slot,
    lo: [i64; 3],
    hi: [i64; 3],
}

fn signed_boxes(g: &Generation) -> Vec<SBox> {
    let mut out = Vec::new();
    for r in g.regions.iter().filter(|r| !r.is_empty()) {
        for sign in [1i8, -1] {
            let (lo, hi) = if sign > 0 { (r.lo, r.hi) } else { (r.hi.map(|c| -c), r.lo.map(|c| -c)) };
            out.push(SBox { slot: Slot { q: g.q, i: r.i + 1, sign, j: g.j }, lo, hi });
        }
    }
    out
}

/// An explicit closing triad in `a + b + c`, if the sum box contains 0.
fn close_boxes(a: &SBox, b: &SBox, c: &SBox) -> Option<TriadWitness> {
    let mut xi = [[0i64; 3]; 3];
    for k in 0..3 {
        if a.lo[k] + b.lo[k] + c.lo[k] > 0 || a.hi[k] + b.hi[k] + c.hi[k] < 0 {
            return None;
        }
        let x = (-(b.lo[k] + c.lo[k])).clamp(a.lo[k], a.hi[k]);
        let y = (-x - c.lo[k]).clamp(b.lo[k], b.hi[k]);
        xi[0][k] = x;
        xi[1][k] = y;
        xi[2][k] = -x - y;
    }
    Some(TriadWitness { xi, slots: [a.slot, b.slot, c.slot] })
}

/// Every block of three signed regions, one from each listed generation,
/// that closes; one witness per block.
fn closing_blocks(field: &Field, qs: [i32; 3]) -> Vec<TriadWitness> {
    let bx: Vec<Vec<SBox>> = qs.iter().map(|&q| field.gen(q).map(signed_boxes).unwrap_or_default()).collect();
    let mut out = Vec::new();
    for a in &bx[0] {
        for b in &bx[1] {
            for c in &bx[2] {
                if let Some(w) = close_boxes(a, b, c) {
                    out.push(w);
                }
            }
        }
    }
    out
}

/// All integer triads with modes from generations of `qset`, not all from
/// the same generation, found by a pair loop and a hash lookup of the third
/// frequency. Pairs of regions whose box sum cannot meet any third region are
/// skipped; `budget` caps the remaining pair evaluations.
pub fn enumerate_cross_triads(field: &Field, qset: &[i32], budget: u64) -> Result<Vec<TriadWitness>, VerifyError> {
    let mut qs: Vec<i32> = qset.iter().copied().filter(|&q| field.gen(q).is_some()).collect();
    qs.sort_unstable();
    qs.dedup();
    let mut combos = Vec::new();
    for (x, &q1) in qs.iter().enumerate() {
        for (y, &q2) in qs.iter().enumerate().skip(x) {
            for &q3 in qs.iter().skip(y) {
                if !(q1 == q2 && q2 == q3) {
                    combos.push([q1, q2, q3]);
                }
            }
        }
    }
    // region pairs that can close, with their cost
    let mut work = Vec::new();
    let mut estimated = 0u64;
    for c in &combos {
        let bx: Vec<Vec<SBox>> = c.iter().map(|&q| signed_boxes(field.gen(q).unwrap())).collect();
        for a in &bx[0] {
            for b in &bx[1] {
                if bx[2].iter().any(|r| close_boxes(a, b, r).is_some()) {
                    estimated += box_len(a) * box_len(b);
                    work.push((*c, *a, *b));
                }
            }
        }
    }
    if estimated > budget {
        return Err(VerifyError::BudgetExceeded { estimated, budget });
    }
    let supports: BTreeMap<i32, (HashSet<FreqVec>, Vec<SBox>)> = qs
        .iter()
        .map(|&q| {
            let bx = signed_boxes(field.gen(q).unwrap());
            let set = bx.iter().flat_map(box_points).collect();
            (q, (set, bx))
        })
        .collect();
    let found: Vec<Vec<TriadWitness>> = work
        .par_iter()
        .map(|(c, a, b)| {
            let (set, bx3) = &supports[&c[2]];
            let mut out = Vec::new();
            for x1 in box_points(a) {
                for x2 in box_points(b) {
                    if c[0] == c[1] && (a.slot, x1) > (b.slot, x2) {
                        continue;
                    }
                    let x3 = [0, 1, 2].map(|k| -x1[k] - x2[k]);
                    if !set.contains(&x3) {
                        continue;
                    }
                    let s3 = bx3.iter().find(|r| in_box(r, &x3)).unwrap().slot;
                    if c[1] == c[2] && (b.slot, x2) > (s3, x3) {
                        continue;
                    }
                    out.push(TriadWitness { xi: [x1, x2, x3], slots: [a.slot, b.slot, s3] });
                }
            }
            out
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

/// Reference enumeration with no hashing: every pair is formed explicitly and
/// the third frequency is tested against the exact cube definition.
pub fn enumerate_cross_triads_naive(field: &Field, qset: &[i32]) -> Vec<TriadWitness> {
    let mut qs: Vec<i32> = qset.iter().copied().filter(|&q| field.gen(q).is_some()).collect();
    qs.sort_unstable();
    qs.dedup();
    let modes: Vec<(Slot, FreqVec)> =
        qs.iter().flat_map(|&q| signed_boxes(field.gen(q).unwrap())).flat_map(|b| box_points(&b).map(move |x| (b.slot, x))).collect();
    let locate = |x: &FreqVec, q: i32| -> Option<Slot> {
        let g = field.gen(q)?;
        for i in 0..3 {
            for sign in [1i8, -1] {
                let pos = x.map(|c| c * sign as i64);
                if in_blur_cube(&field.skeleton, &field.spec, q, i, &pos) {
                    return Some(Slot { q, i: i + 1, sign, j: g.j });
                }
            }
        }
        None
    };
    let mut out = Vec::new();
    for (n1, (s1, x1)) in modes.iter().enumerate() {
        for (s2, x2) in modes.iter().skip(n1) {
            let x3 = [0, 1, 2].map(|k| -x1[k] - x2[k]);
            for &q3 in qs.iter().filter(|&&q| q >= s2.q) {
                if s1.q == s2.q && s2.q == q3 {
                    continue;
                }
                // cheap integer prefilter before the exact test
                let g = field.gen(q3).unwrap();
                if g.locate(&x3).is_none() {
                    continue;
                }
                if let Some(s3) = locate(&x3, q3) {
                    if s2.q == q3 && (*s2, *x2) > (s3, x3) {
                        continue;
                    }
                    out.push(TriadWitness { xi: [*x1, *x2, x3], slots: [*s1, *s2, s3] });
                }
            }
        }
    }
    out
}

fn box_len(b: &SBox) -> u64 {
    (0..3).map(|k| (b.hi[k] - b.lo[k] + 1).max(0) as u64).product()
}

fn box_points(b: &SBox) -> impl Iterator<Item = FreqVec> {
    let (lo, hi) = (b.lo, b.hi);
    (lo[0]..=hi[0]).flat_map(move |x| (lo[1]..=hi[1]).flat_map(move |y| (lo[2]..=hi[2]).map(move |z| [x, y, z])))
}

fn in_box(b: &SBox, x: &FreqVec) -> bool {
    (0..3).all(|k| b.lo[k] <= x[k] && x[k] <= b.hi[k])
}

/// No triad closes across three generations in distinct planes.
pub fn check_windmill(field: &Field, q1: i32, q2: i32, q3: i32) -> VerificationReport {
    let mut rep = VerificationReport::new("windmill").param("q", format!("{q1},{q2},{q3}"));
    rep.witnesses = closing_blocks(field, [q1, q2, q3]).into_iter().map(Witness::Triad).collect();
    let residues: HashSet<i32> = [q1, q2, q3].iter().map(|q| q.rem_euclid(3)).collect();
    rep.measured.insert("distinct_planes".into(), residues.len() as f64);
    rep.finish()
}

/// Cross-generation triads in `window` must have `q2 = q3` and
/// `q1 + 3 ≤ q3` (generations sorted). Also records the smallest gap
/// `q3 − q1` that occurs and the printed gate `N_ε` for comparison.
pub fn check_near_field(field: &Field, window: (i32, i32)) -> VerificationReport {
    let (lo, hi) = window;
    let mut rep = VerificationReport::new("near_field").param("window", format!("[{lo},{hi}]"));
    let mut min_gap = i32::MAX;
    let mut closing = 0usize;
    for q1 in lo..=hi {
        for q2 in q1..=hi {
            for q3 in q2..=hi {
                if q1 == q3 {
                    continue;
                }
                for w in closing_blocks(field, [q1, q2, q3]) {
                    closing += 1;
                    min_gap = min_gap.min(q3 - q1);
                    if !(q2 == q3 && q1 + 3 <= q3) {
                        rep.witnesses.push(Witness::Triad(w));
                    }
                }
            }
        }
    }
    rep.measured.insert("closing_blocks".into(), closing as f64);
    if closing > 0 {
        rep.measured.insert("min_gap".into(), min_gap as f64);
    }
    rep.measured.insert("printed_n_eps".into(), n_eps(&field.spec) as f64);
    rep.finish()
}

/// Nonzero pair fluxes `Π_{l,k}` with `k − l < N_ε` (the gate printed for the
/// non-local range). Each witness is a closing triad of the pair.
pub fn check_flux_gate(field: &Field, window: (i32, i32)) -> VerificationReport {
    let (lo, hi) = window;
    let n = n_eps(&field.spec);
    let mut rep = VerificationReport::new("flux_gate").param("window", format!("[{lo},{hi}]")).param("n_eps", n);
    let mut largest = 0.0f64;
    for l in lo..=hi {
        for k in (l + 1)..(l + n).min(hi + 1) {
            let blocks: Vec<TriadWitness> = closing_blocks(field, [l, k, k])
                .into_iter()
                .filter(|w| w.slots[0].i == 1 && w.slots[1].i == w.slots[2].i)
                .collect();
            if blocks.is_empty() {
                continue;
            }
            let v = if field.gen(k).is_some_and(|g| g.is_dense()) { flux_pair(field, l, k) } else { f64::NAN };
            largest = largest.max(v.abs());
            rep.witnesses.extend(blocks.into_iter().map(Witness::Triad));
        }
    }
    rep.measured.insert("largest_pair_flux".into(), largest);
    rep.finish()
}

/// `A_q^{(1)} + A_q^{(2)} ⊆ A_q^{(3)}`.
pub fn check_sumset(field: &Field, q: i32) -> VerificationReport {
    const ELEMENTWISE_MAX: usize = 4_000_000;
    let mut rep = VerificationReport::new("sumset").param("q", q);
    let g = match field.gen(q) {
        Some(g) => g,
        None => return rep.finish(),
    };
    let [a1, a2, a3] = &g.regions;
    let inside = |x: &FreqVec| in_blur_cube(&field.skeleton, &field.spec, q, 2, x);
    if a1.len() * a2.len() <= ELEMENTWISE_MAX {
        // distinct sums only; the exact test is the expensive part
        let sums: HashSet<FreqVec> =
            a1.points().flat_map(|x| a2.points().map(move |y| [0, 1, 2].map(|k| x[k] + y[k]))).collect();
        let mut sums: Vec<FreqVec> = sums.into_iter().collect();
        sums.sort_unstable();
        rep.measured.insert("sums_checked".into(), sums.len() as f64);
        for s in sums.into_iter().filter(|s| !a3.contains(s) || !inside(s)) {
            rep.witnesses.push(Witness::Mode { q, i: 3, xi: s, what: "sum outside A^(3)".into() });
        }
    } else {
        // The sums fill the integer box [lo1 + lo2, hi1 + hi2]; it lies in
        // A^(3) iff its two extreme corners do.
        let lo = [0, 1, 2].map(|k| a1.lo[k] + a2.lo[k]);
        let hi = [0, 1, 2].map(|k| a1.hi[k] + a2.hi[k]);
        rep.measured.insert("sums_checked".into(), 2.0);
        for s in [lo, hi] {
            if !a3.contains(&s) || !inside(&s) {
                rep.witnesses.push(Witness::Mode { q, i: 3, xi: s, what: "sum outside A^(3)".into() });
            }
        }
    }
    rep.finish()
}

fn corners(r: &ActiveRegion) -> impl Iterator<Item = FreqVec> + '_ {
    (0..8).map(move |m| [0, 1, 2].map(|k| if m >> k & 1 == 1 { r.hi[k] } else { r.lo[k] }))
}

fn rat_i(n: i128) -> Rat {
    Rat::from_integer(n.into())
}

/// Cardinality, shell, anchoring and projection bounds for every generation.
pub fn check_bounds(field: &Field) -> VerificationReport {
    let spec = &field.spec;
    let eps = spec.eps.clone();
    let e = spec.eps_f64();
    let mut rep = VerificationReport::new("bounds").param("eps", &eps).param("q", format!("[{},{}]", spec.q_min, spec.q_max));
    let mut anchor_max = 0.0f64;
    let mut proj_max = 0.0f64;
    let fnorm2 = [1i64, 4, 5];
    for g in &field.gens {
        let q = g.q;
        let lam = pow2(q);
        let lam2 = &lam * &lam;
        let el = &eps * &lam;
        let mut proj_q = 0.0f64;
        for (i, r) in g.regions.iter().enumerate() {
            let s = rat(spec.side_multiple(i) as i64, 1);
            // cardinality: ((sελ − 1)⁺)³ ≤ |A| ≤ (sελ + 1)³
            let side = &s * &el;
            let n = rat(r.len() as i64, 1);
            let low = (&side - rat(1, 1)).max(rat(0, 1));
            let up = &side + rat(1, 1);
            if n < &low * &low * &low || n > &up * &up * &up {
                rep.witnesses.push(Witness::Mode { q, i: i + 1, xi: r.lo, what: format!("cardinality {} outside bracket", r.len()) });
            }
            if r.is_empty() {
                continue;
            }
            // shells: λ(|F| − √3sε) ≤ |ξ| ≤ λ(|F| + √3sε), compared squared as
            // |ξ|² vs λ²(|F|² + 3s²ε²) ± 2λ²sε·√(3|F|²)
            let (n_lo, n_hi) = norm2_range(r);
            let f2 = rat(fnorm2[i], 1);
            let mid = &lam2 * (&f2 + rat(3, 1) * &s * &s * &eps * &eps);
            let b = rat(2, 1) * &lam2 * &s * &eps;
            let d = 3 * fnorm2[i];
            if sign_surd(&(&mid - rat_i(n_hi)), &b, d) < 0 {
                rep.witnesses.push(Witness::Mode { q, i: i + 1, xi: r.hi, what: "above outer shell".into() });
            }
            // the inner bound is only meaningful when |F| > √3sε
            let meaningful = f2 > rat(3, 1) * &s * &s * &eps * &eps;
            if meaningful && sign_surd(&(&mid - rat_i(n_lo)), &-b, d) > 0 {
                rep.witnesses.push(Witness::Mode { q, i: i + 1, xi: r.lo, what: "below inner shell".into() });
            }
            // anchoring: max over corners of (ξ·n)² ≤ 4ε² min |ξ|² (the left
            // side is convex in ξ, so the corners bound it)
            let normal = &field.skeleton.normals[g.j];
            let mut dmax = QF15::zero();
            for c in corners(r) {
                let t = Vec3X::from_ints(c).dot(normal);
                let t2 = &t * &t;
                if t2 > dmax {
                    dmax = t2;
                }
            }
            let allowed = QF15::from_rat(rat(4, 1) * &eps * &eps * rat_i(n_lo));
            let ratio = (dmax.to_f64() / n_lo as f64).sqrt() / e;
            anchor_max = anchor_max.max(ratio);
            if qf_sign(&(&allowed - &dmax)) < 0 {
                anchor_pointwise(field, g, r, &mut rep);
            }
            // projection: sup |π_ξV − V|/ε = sup |ξ·V|/(ε|ξ|), measured
            if g.is_dense() {
                let v = &g.v_scaled[i];
                for xi in r.points() {
                    let (a, bb) = v.dot_int(&xi);
                    let dot = (a as f64 + bb as f64 * crate::construction::SQRT15) / v.den as f64;
                    let nx = (xi.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt();
                    proj_q = proj_q.max(dot.abs() / nx / e);
                }
            }
        }
        if g.is_dense() {
            rep.measured.insert(format!("projection_constant_q{q}"), proj_q);
            proj_max = proj_max.max(proj_q);
        }
    }
    rep.measured.insert("anchoring_ratio_bound".into(), anchor_max);
    rep.measured.insert("projection_constant".into(), proj_max);
    rep.finish()
}

/// Exact `ξ·π_ξ(V) = 0` for every mode of every materialized generation.
pub fn check_solenoidal(field: &Field) -> VerificationReport {
    let mut rep = VerificationReport::new("solenoidal");
    let (mut checked, mut bad) = (0usize, 0usize);
    for g in field.gens.iter().filter(|g| g.is_dense()) {
        for (i, r) in g.regions.iter().enumerate() {
            for xi in r.points() {
                checked += 1;
                if g.exact_dir(i, &xi).dot_int(&xi) != (0, 0) {
                    bad += 1;
                    // the count is kept in full, the witness list is capped
                    if rep.witnesses.len() < 64 {
                        rep.witnesses.push(Witness::Mode { q: g.q, i: i + 1, xi, what: "ξ·amp ≠ 0".into() });
                    }
                }
            }
        }
    }
    rep.measured.insert("modes_checked".into(), checked as f64);
    rep.measured.insert("violations".into(), bad as f64);
    rep.finish()
}

/// Exact per-mode anchoring test, used when the corner bound is inconclusive.
fn anchor_pointwise(field: &Field, g: &Generation, r: &ActiveRegion, rep: &mut VerificationReport) {
    let eps2 = &field.spec.eps * &field.spec.eps;
    let normal = &field.skeleton.normals[g.j];
    for xi in r.points() {
        let t = Vec3X::from_ints(xi).dot(normal);
        let n2: i128 = xi.iter().map(|&c| (c as i128) * (c as i128)).sum();
        let allowed = QF15::from_rat(rat(4, 1) * &eps2 * rat_i(n2));
        if qf_sign(&(&allowed - &(&t * &t))) < 0 {
            let ratio = (t.to_f64().abs() / (n2 as f64).sqrt() / eps2.to_f64().unwrap().sqrt()).to_string();
            rep.witnesses.push(Witness::Mode { q: g.q, i: r.i + 1, xi, what: format!("anchoring ratio {ratio}") });
        }
    }
}

/// All five proposition checks over a window: windmill for every triple of
/// distinct residues, near field, sumset and `S_q` identity per level, and
/// the bounds.
pub fn proposition_suite(field: &Field, window: (i32, i32)) -> Vec<VerificationReport> {
    let (lo, hi) = window;
    let mut wind = VerificationReport::new("windmill").param("window", format!("[{lo},{hi}]"));
    let mut triples = 0;
    for q1 in lo..=hi {
        for q2 in (q1 + 1)..=hi {
            for q3 in (q2 + 1)..=hi {
                let res: HashSet<i32> = [q1, q2, q3].iter().map(|q| q.rem_euclid(3)).collect();
                if res.len() == 3 {
                    triples += 1;
                    wind.witnesses.extend(check_windmill(field, q1, q2, q3).witnesses);
                }
            }
        }
    }
    wind.measured.insert("triples".into(), triples as f64);
    let mut sum = VerificationReport::new("sumset").param("window", format!("[{lo},{hi}]"));
    let mut sq = VerificationReport::new("sq_identity").param("window", format!("[{lo},{hi}]"));
    for q in lo..=hi {
        sum.witnesses.extend(check_sumset(field, q).witnesses);
        let r = crate::lpcalc::check_sq_identity(field, q);
        sq.witnesses.extend(r.offending.into_iter().map(|(gq, i, xi, w)| Witness::Mode { q: gq, i, xi, what: format!("S_{q} weight {w}") }));
    }
    vec![wind.finish(), check_near_field(field, window), sum.finish(), sq.finish(), check_bounds(field)]
}
