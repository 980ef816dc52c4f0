//! Littlewood-Paley cutoffs `φ`, `ψ` and the projections `S_q`, `Δ_q` acting on
//! the region structure of a built field.

use num_traits::ToPrimitive;
use serde::Serialize;

use crate::construction::{lambda, ActiveRegion, CutoffKind, Field, FieldSpec, FreqVec};
use crate::qfield::Rat;

/// Relative distance from a transition endpoint below which a weight is
/// flagged as boundary-proximate.
pub const GUARD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffSpec {
    pub eps: Rat,
    pub plateau_hi: f64,
    pub cutoff_lo: f64,
    pub order: u32,
}

impl CutoffSpec {
    pub fn new(eps: &Rat, kind: CutoffKind) -> CutoffSpec {
        let e = eps.to_f64().unwrap();
        let CutoffKind::Smoothstep { order } = kind;
        CutoffSpec {
            eps: eps.clone(),
            plateau_hi: 5f64.sqrt() / 2.0 + 2.0 * e,
            cutoff_lo: 2.0 - 4.0 * e,
            order,
        }
    }

    pub fn for_spec(spec: &FieldSpec) -> CutoffSpec {
        CutoffSpec::new(&spec.eps, spec.cutoff_kind)
    }

    /// Same cutoff with the plateau edge moved (negative-control hook).
    pub fn with_plateau(mut self, plateau_hi: f64) -> CutoffSpec {
        self.plateau_hi = plateau_hi;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.plateau_hi < self.cutoff_lo && self.order >= 1
    }
}

fn binom(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Generalized smoothstep of the given order on `[0, 1]` (order 1 is `3x² − 2x³`).
pub fn smoothstep(x: f64, order: u32) -> f64 {
    let x = x.clamp(0.0, 1.0);
    let n = order as u64;
    let mut s = 0.0;
    for k in 0..=n {
        s += binom(n + k, k) * binom(2 * n + 1, n - k) * (-x).powi(k as i32);
    }
    s * x.powi(order as i32 + 1)
}

pub fn phi(t: f64, spec: &CutoffSpec) -> f64 {
    if t <= spec.plateau_hi {
        1.0
    } else if t >= spec.cutoff_lo {
        0.0
    } else {
        let x = (t - spec.plateau_hi) / (spec.cutoff_lo - spec.plateau_hi);
        1.0 - smoothstep(x, spec.order)
    }
}

/// `ψ(t) = φ(t/2) − φ(t)`.
pub fn psi(t: f64, spec: &CutoffSpec) -> f64 {
    phi(t / 2.0, spec) - phi(t, spec)
}

/// Weight of one region under a projection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Weight {
    /// Every mode of the region carries this weight.
    Uniform(f64),
    /// Per-mode weights in box order.
    PerMode(Vec<f64>),
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionWeight {
    pub region: ActiveRegion,
    pub weight: Weight,
}

impl RegionWeight {
    pub fn at(&self, xi_pos: &FreqVec) -> f64 {
        match &self.weight {
            Weight::Uniform(w) => *w,
            Weight::PerMode(v) => v[self.region.index_of(xi_pos)],
        }
    }
}

/// A field with a real weight attached to every mode (weights are even in ξ).
#[derive(Clone, Debug, Serialize)]
pub struct WeightedModeSet {
    pub q: i32,
    pub regions: Vec<RegionWeight>,
    /// Modes whose `|ξ|/λ_q` sits within the guard band of a transition endpoint.
    pub warnings: Vec<FreqVec>,
}

impl WeightedModeSet {
    pub fn weight_of(&self, gen_q: i32, i: usize) -> &RegionWeight {
        self.regions
            .iter()
            .find(|r| r.region.q == gen_q && r.region.i == i)
            .expect("region present in projection")
    }
}

/// Smallest and largest `|ξ|²` over an integer box.
pub fn norm2_range(r: &ActiveRegion) -> (i128, i128) {
    let mut lo = 0i128;
    let mut hi = 0i128;
    for k in 0..3 {
        let (a, b) = (r.lo[k] as i128, r.hi[k] as i128);
        let near = if a <= 0 && b >= 0 { 0 } else { a.abs().min(b.abs()) };
        let far = a.abs().max(b.abs());
        lo += near * near;
        hi += far * far;
    }
    (lo, hi)
}

fn near(t: f64, e: f64) -> bool {
    (t - e).abs() <= GUARD * e.max(1.0)
}

fn project(field: &Field, q: i32, f: impl Fn(f64) -> f64, edges: &[f64], flat: &[(f64, f64)]) -> WeightedModeSet {
    let lam = lambda(q);
    let mut regions = Vec::new();
    let mut warnings = Vec::new();
    for g in &field.gens {
        for r in &g.regions {
            let (n_lo, n_hi) = norm2_range(r);
            let (t_lo, t_hi) = ((n_lo as f64).sqrt() / lam, (n_hi as f64).sqrt() / lam);
            let clear = edges.iter().all(|&e| !(t_lo - GUARD * e <= e && e <= t_hi + GUARD * e));
            // Uniform when the whole |ξ| range lies inside one flat piece.
            let flat_piece = flat.iter().find(|&&(a, b)| a <= t_lo && t_hi <= b);
            let weight = match (clear, flat_piece) {
                (true, Some(_)) => Weight::Uniform(f((t_lo + t_hi) / 2.0)),
                _ => {
                    let mut w = Vec::with_capacity(r.len());
                    for xi in r.points() {
                        let t = (xi.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt() / lam;
                        if edges.iter().any(|&e| near(t, e)) {
                            warnings.push(xi);
                        }
                        w.push(f(t));
                    }
                    Weight::PerMode(w)
                }
            };
            regions.push(RegionWeight { region: *r, weight });
        }
    }
    WeightedModeSet { q, regions, warnings }
}

/// `S_q`: weights `φ(|ξ|/λ_q)`.
pub fn project_sq(field: &Field, q: i32) -> WeightedModeSet {
    project_sq_with(field, q, &CutoffSpec::for_spec(&field.spec))
}

pub fn project_sq_with(field: &Field, q: i32, c: &CutoffSpec) -> WeightedModeSet {
    let flat = [(0.0, c.plateau_hi), (c.cutoff_lo, f64::INFINITY)];
    project(field, q, |t| phi(t, c), &[c.plateau_hi, c.cutoff_lo], &flat)
}

/// `Δ_q`: weights `ψ(|ξ|/λ_q)`.
pub fn project_deltaq(field: &Field, q: i32) -> WeightedModeSet {
    let c = CutoffSpec::for_spec(&field.spec);
    let (p, k) = (c.plateau_hi, c.cutoff_lo);
    let edges = [p, k, 2.0 * p, 2.0 * k];
    let flat = [(0.0, p), (k, 2.0 * p), (2.0 * k, f64::INFINITY)];
    project(field, q, |t| psi(t, &c), &edges, &flat)
}

#[derive(Clone, Debug, Serialize)]
pub struct SqIdentityReport {
    pub q: i32,
    pub pass: bool,
    pub checked_regions: usize,
    /// `(generation, component, frequency, weight)` for offending modes
    /// (capped per region).
    pub offending: Vec<(i32, usize, FreqVec, f64)>,
}

/// Check `S_q U = U_{<q} + u_q^{(1)}` mode by mode.
pub fn check_sq_identity(field: &Field, q: i32) -> SqIdentityReport {
    check_sq_identity_with(field, q, &CutoffSpec::for_spec(&field.spec))
}

pub fn check_sq_identity_with(field: &Field, q: i32, c: &CutoffSpec) -> SqIdentityReport {
    const CAP: usize = 16;
    let proj = project_sq_with(field, q, c);
    let mut offending = Vec::new();
    for rw in &proj.regions {
        let r = &rw.region;
        let expect = if r.q < q || (r.q == q && r.i == 0) { 1.0 } else { 0.0 };
        match &rw.weight {
            Weight::Uniform(w) => {
                if *w != expect {
                    offending.extend(r.points().take(CAP).map(|xi| (r.q, r.i + 1, xi, *w)));
                }
            }
            Weight::PerMode(ws) => {
                let bad = r.points().zip(ws).filter(|(_, w)| **w != expect).take(CAP);
                offending.extend(bad.map(|(xi, w)| (r.q, r.i + 1, xi, *w)));
            }
        }
    }
    SqIdentityReport { q, pass: offending.is_empty(), checked_regions: proj.regions.len(), offending }
}
