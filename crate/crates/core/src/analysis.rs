//! Norms of the construction (exact `L²`, sampled `L^p`, Besov seminorms),
//! the grid divergence residual, and a physical-space flux oracle that does
//! not share code with the triad engine.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construction::{lambda, make_skeleton, rot_index, Field, FreqVec, Generation};
use crate::flux::Neumaier;
use crate::lpcalc::{phi, project_deltaq, CutoffSpec, Weight, WeightedModeSet};
use crate::physoracle::{fft3, max_component, synthesize_scalar, GridError, LatticeRule, SpectralMode, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("no lattice rule with {n_points} points is exact on the difference set")]
    NoExactRule { n_points: usize },
    #[error("grid kind not supported here: {0}")]
    UnsupportedGrid(&'static str),
}

/// Sampling scheme for grid quantities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridSpec {
    /// `n³` tensor grid.
    Tensor { n: usize },
    /// Rank-1 lattice rule with `n_points` nodes.
    Lattice { n_points: usize },
    /// Physical flux oracle only: every block of signed regions is shifted to
    /// the origin and integrated on its own small tensor grid of size at most
    /// `max_n`.
    Demodulated { max_n: usize },
}

/// Default oversampling relative to the largest active frequency component.
pub const OVERSAMPLING: usize = 4;

impl GridSpec {
    /// Tensor grid with `n = max(oversampling·M, 2M + 1)`, rounded up to a
    /// 5-smooth size.
    pub fn tensor_for(max_freq: i64, oversampling: usize) -> GridSpec {
        let m = max_freq.max(1) as usize;
        GridSpec::Tensor { n: smooth_size((oversampling * m).max(2 * m + 1)) }
    }

    /// Lattice rule with `oversampling` times as many nodes as the summed
    /// volume of the difference boxes, rounded to a power of two.
    pub fn lattice_for(boxes: &[([i64; 3], [i64; 3])], oversampling: usize) -> GridSpec {
        let vol: u64 = difference_boxes(boxes).iter().map(|(lo, hi)| box_volume(lo, hi)).sum();
        GridSpec::Lattice { n_points: ((oversampling as u64 * vol).max(64)).next_power_of_two() as usize }
    }
}

/// Smallest `2^a 3^b 5^c ≥ n`.
pub fn smooth_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&k| {
            let mut v = k;
            for p in [2, 3, 5] {
                while v % p == 0 {
                    v /= p;
                }
            }
            v == 1
        })
        .unwrap()
}

fn box_volume(lo: &[i64; 3], hi: &[i64; 3]) -> u64 {
    (0..3).map(|k| (hi[k] - lo[k] + 1).max(0) as u64).product()
}

/// Distinct boxes `B_a − B_b` over ordered pairs.
pub fn difference_boxes(boxes: &[([i64; 3], [i64; 3])]) -> Vec<([i64; 3], [i64; 3])> {
    let mut out: Vec<([i64; 3], [i64; 3])> = Vec::new();
    for (alo, ahi) in boxes {
        for (blo, bhi) in boxes {
            let d = ([0, 1, 2].map(|k| alo[k] - bhi[k]), [0, 1, 2].map(|k| ahi[k] - blo[k]));
            if !out.contains(&d) {
                out.push(d);
            }
        }
    }
    out
}

/// First candidate rule (in the fixed search order) with no dual-lattice point
/// in any difference box, so that `|u|²` is integrated exactly.
pub fn exact_rule(boxes: &[([i64; 3], [i64; 3])], n_points: usize) -> Option<LatticeRule> {
    const ATTEMPTS: u64 = 64;
    let diffs = difference_boxes(boxes);
    (0..ATTEMPTS)
        .map(|a| LatticeRule::candidate(n_points, a))
        .find(|r| diffs.iter().all(|(lo, hi)| r.box_is_clear(*lo, *hi)))
}

/// Signed region boxes of one generation.
pub fn generation_boxes(g: &Generation) -> Vec<([i64; 3], [i64; 3])> {
    g.regions
        .iter()
        .filter(|r| !r.is_empty())
        .flat_map(|r| [(r.lo, r.hi), (r.hi.map(|c| -c), r.lo.map(|c| -c))])
        .collect()
}

/// Complex amplitudes of every mode of a generation, from exact directions.
pub fn generation_modes(g: &Generation) -> Vec<SpectralMode> {
    g.modes()
        .map(|m| {
            let (re, im) = m.amp_f64();
            SpectralMode { xi: m.xi, amp: [0, 1, 2].map(|k| C64::new(re[k], im[k])) }
        })
        .collect()
}

pub fn field_modes(field: &Field) -> Vec<SpectralMode> {
    field.gens.iter().flat_map(generation_modes).collect()
}

/// The un-blurred skeleton at level `q` (requires `q ≡ 0 mod 3` so that the
/// frequencies are integral): `λ^{-1/3}(V¹ sin(λF¹·x) + V² cos(λF²·x) + V³ cos(λF³·x))`.
pub fn skeleton_modes(q: i32) -> Vec<SpectralMode> {
    assert_eq!(rot_index(q), 0, "skeleton frequencies are integral only for j = 0");
    let s = make_skeleton();
    let lam = lambda(q);
    let a = lam.powf(-1.0 / 3.0);
    let mut out = Vec::new();
    for i in 0..3 {
        let f = s.f_f64(0, i).map(|c| (c * lam).round() as i64);
        let v = s.v_f64(0, i);
        for sign in [1i64, -1] {
            let c = match (i, sign) {
                (0, 1) => C64::new(0.0, -0.5),
                (0, _) => C64::new(0.0, 0.5),
                _ => C64::new(0.5, 0.0),
            };
            out.push(SpectralMode { xi: f.map(|x| x * sign), amp: v.map(|x| c * a * x) });
        }
    }
    out
}

fn norm2(xi: &FreqVec) -> i128 {
    xi.iter().map(|&c| (c as i128) * (c as i128)).sum()
}

/// `|π_ξ(V)|²` for one frequency of region `i`, from exact integer data:
/// `|dir|² = (A + B√15)/den²` with `A`, `B` integers.
pub fn dir_norm2(g: &Generation, i: usize, xi: &FreqVec) -> f64 {
    let d = g.exact_dir(i, xi);
    let mut a = 0i128;
    let mut b = 0i128;
    for k in 0..3 {
        a += d.p[k] * d.p[k] + 15 * d.r[k] * d.r[k];
        b += 2 * d.p[k] * d.r[k];
    }
    let den2 = (d.den as f64) * (d.den as f64);
    (a as f64 + b as f64 * crate::construction::SQRT15) / den2
}

/// `Σ |û|²` over a generation with per-mode weights, compensated.
fn weighted_energy(g: &Generation, weights: Option<&WeightedModeSet>) -> f64 {
    let mut acc = Neumaier::default();
    for i in 0..3 {
        let r = &g.regions[i];
        if r.is_empty() {
            continue;
        }
        let rw = weights.map(|w| w.weight_of(g.q, i));
        if let Some(Weight::Uniform(w)) = rw.map(|rw| &rw.weight) {
            if *w == 0.0 {
                continue;
            }
        }
        for xi in r.points() {
            let w = rw.map(|rw| rw.at(&xi)).unwrap_or(1.0);
            if w == 0.0 {
                continue;
            }
            // both signs, each with |coeff|² = 1/4
            acc.add(0.5 * w * w * dir_norm2(g, i, &xi));
        }
    }
    acc.value() * g.gen_scale * g.gen_scale
}

/// `‖u_q‖₂` by Parseval with the normalized torus measure.
pub fn l2_norm_exact(field: &Field, q: i32) -> f64 {
    field.gen(q).map(|g| weighted_energy(g, None).sqrt()).unwrap_or(0.0)
}

/// `|u|²` at every sample point of the grid.
fn sample_sq(modes: &[SpectralMode], boxes: &[([i64; 3], [i64; 3])], grid: &GridSpec, p: f64) -> Result<Vec<f64>, AnalysisError> {
    let max_freq = max_component(modes);
    match *grid {
        GridSpec::Tensor { n } => {
            let need = if p == 2.0 { 2 * max_freq as usize + 1 } else { (OVERSAMPLING * max_freq as usize).max(2 * max_freq as usize + 1) };
            if n < need {
                return Err(GridError::GridTooCoarse { n, max_freq, need }.into());
            }
            let mut s = vec![0.0; n * n * n];
            for m in 0..3 {
                let coeffs: Vec<(FreqVec, C64)> = modes.iter().map(|md| (md.xi, md.amp[m])).collect();
                let vals = synthesize_scalar(&coeffs, n);
                s.iter_mut().zip(&vals).for_each(|(a, v)| *a += v.re * v.re);
            }
            Ok(s)
        }
        GridSpec::Lattice { n_points } => {
            let rule = match exact_rule(boxes, n_points) {
                Some(r) => r,
                None if p != 2.0 => LatticeRule::candidate(n_points, 0),
                None => return Err(AnalysisError::NoExactRule { n_points }),
            };
            let mut s = vec![0.0; n_points];
            for m in 0..3 {
                let vals = rule.eval_scalar(modes.iter().map(|md| (md.xi, md.amp[m])));
                s.iter_mut().zip(&vals).for_each(|(a, v)| *a += v.re * v.re);
            }
            Ok(s)
        }
        GridSpec::Demodulated { .. } => Err(AnalysisError::UnsupportedGrid("demodulated blocks sample no field")),
    }
}

fn lp_from_sq(s: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return s.iter().fold(0.0f64, |a, &v| a.max(v)).sqrt();
    }
    let mut acc = Neumaier::default();
    for &v in s {
        acc.add(v.powf(p / 2.0));
    }
    (acc.value() / s.len() as f64).powf(1.0 / p)
}

/// Discrete `L^p` norm (`p = ∞` gives the sample maximum) of a mode set.
pub fn lp_norm_modes(modes: &[SpectralMode], boxes: &[([i64; 3], [i64; 3])], p: f64, grid: &GridSpec) -> Result<f64, AnalysisError> {
    if modes.is_empty() {
        return Ok(0.0);
    }
    Ok(lp_from_sq(&sample_sq(modes, boxes, grid, p)?, p))
}

/// `‖u_q‖_p` by quadrature on the given grid.
pub fn lp_norm_grid(field: &Field, q: i32, p: f64, grid: &GridSpec) -> Result<f64, AnalysisError> {
    let g = match field.gen(q) {
        Some(g) => g,
        None => return Ok(0.0),
    };
    lp_norm_modes(&generation_modes(g), &generation_boxes(g), p, grid)
}

/// Default grid for `u_q`: a tensor grid when it stays below `2^21` points,
/// otherwise a lattice rule.
pub fn default_grid(field: &Field, q: i32) -> GridSpec {
    let g = field.gen(q).expect("generation in range");
    let m = g.regions.iter().flat_map(|r| r.lo.iter().chain(r.hi.iter()).map(|c| c.abs())).max().unwrap_or(1);
    match GridSpec::tensor_for(m, OVERSAMPLING) {
        GridSpec::Tensor { n } if n * n * n <= 1 << 21 => GridSpec::Tensor { n },
        _ => GridSpec::lattice_for(&generation_boxes(g), OVERSAMPLING),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormRow {
    pub q: i32,
    pub p: f64,
    pub norm: f64,
    /// `λ_q^{3/p − 2/3} ‖u_q‖_p`.
    pub scaled: f64,
    /// `scaled / ε^{1 − 3/p}`.
    pub implied_constant: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct NormTable {
    pub eps: f64,
    pub rows: Vec<NormRow>,
}

impl NormTable {
    pub fn push(&mut self, q: i32, p: f64, norm: f64) {
        let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
        let scaled = lambda(q).powf(3.0 * inv_p - 2.0 / 3.0) * norm;
        let implied_constant = scaled / self.eps.powf(1.0 - 3.0 * inv_p);
        self.rows.push(NormRow { q, p, norm, scaled, implied_constant });
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// `(max − min)/min` of the scaled column for one `p`.
    pub fn spread(&self, p: f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.p == p).map(|r| r.scaled).collect();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / lo
    }
}

/// Norm table over `qs`: exact Parseval for `p = 2`, default grids otherwise.
pub fn norm_table(field: &Field, qs: &[i32], ps: &[f64]) -> Result<NormTable, AnalysisError> {
    let mut t = NormTable { eps: field.spec.eps_f64(), rows: Vec::new() };
    for &q in qs {
        for &p in ps {
            let v = if p == 2.0 { l2_norm_exact(field, q) } else { lp_norm_grid(field, q, p, &default_grid(field, q))? };
            t.push(q, p, v);
        }
    }
    Ok(t)
}

/// Modes of `Δ_q U` (weights `ψ(|ξ|/λ_q)`) with their region boxes.
pub fn deltaq_modes(field: &Field, q: i32) -> (Vec<SpectralMode>, Vec<([i64; 3], [i64; 3])>) {
    let proj = project_deltaq(field, q);
    let mut modes = Vec::new();
    let mut boxes = Vec::new();
    for g in &field.gens {
        for (i, r) in g.regions.iter().enumerate() {
            let rw = proj.weight_of(g.q, i);
            if r.is_empty() || matches!(rw.weight, Weight::Uniform(w) if w == 0.0) {
                continue;
            }
            boxes.push((r.lo, r.hi));
            boxes.push((r.hi.map(|c| -c), r.lo.map(|c| -c)));
            for m in g.modes().filter(|m| m.region == i) {
                let pos = if r.contains(&m.xi) { m.xi } else { m.xi.map(|c| -c) };
                let w = rw.at(&pos);
                if w != 0.0 {
                    let (re, im) = m.amp_f64();
                    modes.push(SpectralMode { xi: m.xi, amp: [0, 1, 2].map(|k| C64::new(w * re[k], w * im[k])) });
                }
            }
        }
    }
    (modes, boxes)
}

/// `‖Δ_q U‖₂` by Parseval.
pub fn deltaq_l2(field: &Field, q: i32) -> f64 {
    let proj = project_deltaq(field, q);
    let mut acc = Neumaier::default();
    for g in &field.gens {
        acc.add(weighted_energy(g, Some(&proj)));
    }
    acc.value().sqrt()
}

pub fn deltaq_lp(field: &Field, q: i32, p: f64) -> Result<f64, AnalysisError> {
    if p == 2.0 {
        return Ok(deltaq_l2(field, q));
    }
    let (modes, boxes) = deltaq_modes(field, q);
    lp_norm_modes(&modes, &boxes, p, &GridSpec::lattice_for(&boxes, OVERSAMPLING))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BesovReport {
    pub p: f64,
    pub s: f64,
    pub value: f64,
    /// `(q, λ_q^s ‖Δ_q U‖_p)` for every level evaluated.
    pub levels: Vec<(i32, f64)>,
}

/// `sup_q λ_q^s ‖Δ_q U‖_p` over the built levels (for `p ≠ 2` only levels
/// with materialized generations are sampled).
pub fn besov_seminorm(field: &Field, p: f64, s: f64) -> Result<BesovReport, AnalysisError> {
    let top = if p == 2.0 { field.spec.q_max } else { field.dense_top() };
    let mut levels = Vec::new();
    for q in field.spec.q_min..=top {
        levels.push((q, lambda(q).powf(s) * deltaq_lp(field, q, p)?));
    }
    let value = levels.iter().map(|l| l.1).fold(0.0, f64::max);
    Ok(BesovReport { p, s, value, levels })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DivergenceReport {
    pub residual: f64,
    pub grad_max: f64,
    pub relative: f64,
}

/// `max |∇·U|` and `max |∂_n U_m|` over the grid, both computed spectrally.
pub fn divergence_residual_grid(field: &Field, grid: &GridSpec) -> Result<DivergenceReport, AnalysisError> {
    let modes = field_modes(field);
    let boxes: Vec<_> = field.gens.iter().flat_map(generation_boxes).collect();
    let max_freq = max_component(&modes);
    let eval = |coeffs: Vec<(FreqVec, C64)>| -> Result<Vec<f64>, AnalysisError> {
        match *grid {
            GridSpec::Tensor { n } => {
                if n < 2 * max_freq as usize + 1 {
                    return Err(GridError::GridTooCoarse { n, max_freq, need: 2 * max_freq as usize + 1 }.into());
                }
                Ok(synthesize_scalar(&coeffs, n).iter().map(|v| v.re).collect())
            }
            GridSpec::Lattice { n_points } => {
                let rule = exact_rule(&boxes, n_points).unwrap_or_else(|| LatticeRule::candidate(n_points, 0));
                Ok(rule.eval_scalar(coeffs.into_iter()).iter().map(|v| v.re).collect())
            }
            GridSpec::Demodulated { .. } => Err(AnalysisError::UnsupportedGrid("divergence needs samples")),
        }
    };
    let i = |x: i64| C64::new(0.0, x as f64);
    let div: Vec<(FreqVec, C64)> =
        modes.iter().map(|m| (m.xi, (0..3).map(|k| m.amp[k] * i(m.xi[k])).sum::<C64>())).collect();
    let residual = eval(div)?.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut grad_max = 0.0f64;
    for a in 0..3 {
        for b in 0..3 {
            let c: Vec<(FreqVec, C64)> = modes.iter().map(|m| (m.xi, m.amp[a] * i(m.xi[b]))).collect();
            grad_max = eval(c)?.iter().fold(grad_max, |acc, v| acc.max(v.abs()));
        }
    }
    let relative = if grad_max > 0.0 { residual / grad_max } else { 0.0 };
    Ok(DivergenceReport { residual, grad_max, relative })
}

/// Physical-space flux `∫ S_q(U⊗U) : ∇S_q U`.
pub fn physical_flux_oracle(field: &Field, q: i32, grid: &GridSpec) -> Result<f64, AnalysisError> {
    let cut = CutoffSpec::for_spec(&field.spec);
    match *grid {
        GridSpec::Tensor { n } => Ok(flux_full_grid(&field_modes(field), q, &cut, n)?.0),
        GridSpec::Demodulated { max_n } => Ok(flux_demodulated(field, q, &cut, max_n)?.value),
        GridSpec::Lattice { .. } => Err(AnalysisError::UnsupportedGrid("the product filter needs a tensor grid")),
    }
}

/// Spec-literal oracle on one tensor grid: synthesize `U` and `∇S_qU`,
/// form `U_m U_n` pointwise, filter it with `φ(|k|/λ_q)` after a forward
/// transform, and average the contraction over the grid. Returns the real
/// part and the largest imaginary residue seen in the filtered products.
pub fn flux_full_grid(modes: &[SpectralMode], q: i32, cut: &CutoffSpec, n: usize) -> Result<(f64, f64), GridError> {
    let lam = lambda(q);
    let max_freq = max_component(modes);
    let k_max = (cut.cutoff_lo * lam).ceil() as i64;
    // the product has components up to 2M; the filtered band must not alias
    let need = (2 * max_freq + k_max + 1) as usize;
    if n < need {
        return Err(GridError::GridTooCoarse { n, max_freq, need });
    }
    let w = |xi: &FreqVec| phi((norm2(xi) as f64).sqrt() / lam, cut);
    let real = |coeffs: Vec<(FreqVec, C64)>| -> Vec<f64> { synthesize_scalar(&coeffs, n).iter().map(|v| v.re).collect() };
    let u: Vec<Vec<f64>> = (0..3).map(|m| real(modes.iter().map(|md| (md.xi, md.amp[m])).collect())).collect();
    let mut grad = vec![vec![Vec::new(); 3]; 3];
    for (a, row) in grad.iter_mut().enumerate() {
        for (b, slot) in row.iter_mut().enumerate() {
            *slot = real(
                modes
                    .iter()
                    .filter(|md| w(&md.xi) != 0.0)
                    .map(|md| (md.xi, md.amp[a] * C64::new(0.0, md.xi[b] as f64) * w(&md.xi)))
                    .collect(),
            );
        }
    }
    let half = n as i64 / 2;
    let signed = |i: usize| if i as i64 > half { i as i64 - n as i64 } else { i as i64 };
    let filt: Vec<f64> = (0..n * n * n).map(|idx| w(&[signed(idx / (n * n)), signed((idx / n) % n), signed(idx % n)])).collect();
    let total = n * n * n;
    let mut acc = Neumaier::default();
    let mut max_imag = 0.0f64;
    for a in 0..3 {
        for b in a..3 {
            let mut prod: Vec<C64> = (0..total).map(|k| C64::new(u[a][k] * u[b][k], 0.0)).collect();
            fft3(&mut prod, n, false);
            prod.iter_mut().zip(&filt).for_each(|(v, f)| *v *= f / total as f64);
            fft3(&mut prod, n, true);
            max_imag = prod.iter().fold(max_imag, |m, v| m.max(v.im.abs()));
            let mut part = Neumaier::default();
            for k in 0..total {
                let g = if a == b { grad[a][b][k] } else { grad[a][b][k] + grad[b][a][k] };
                part.add(prod[k].re * g);
            }
            acc.add(part.value() / total as f64);
        }
    }
    Ok((acc.value(), max_imag))
}

/// One signed region's modes, shifted by its box corner.
struct Piece {
    lo: [i64; 3],
    span: [i64; 3],
    modes: Vec<(FreqVec, [C64; 3])>,
}

fn pieces(field: &Field) -> Vec<Piece> {
    let mut out = Vec::new();
    for g in &field.gens {
        for (i, r) in g.regions.iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            for sign in [1i64, -1] {
                let (lo, hi) = if sign > 0 { (r.lo, r.hi) } else { (r.hi.map(|c| -c), r.lo.map(|c| -c)) };
                let modes = g
                    .modes()
                    .filter(|m| m.region == i && (0..3).all(|k| lo[k] <= m.xi[k] && m.xi[k] <= hi[k]))
                    .map(|m| {
                        let (re, im) = m.amp_f64();
                        (m.xi, [0, 1, 2].map(|k| C64::new(re[k], im[k])))
                    })
                    .collect();
                out.push(Piece { lo, span: [0, 1, 2].map(|k| hi[k] - lo[k]), modes });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DemodulatedReport {
    pub value: f64,
    pub imag: f64,
    pub n: usize,
    pub blocks: usize,
}

/// Block-wise physical quadrature of the flux. For signed regions `a`, `b`
/// (unfiltered factors) and `c` (carrying `φ²·iξ`), the product of the three
/// demodulated polynomials has offsets in `[0, S]` with `S` the summed box
/// spans, so its mean against `e^{iL·x}` (`L` the summed box corners) is exact
/// on any grid with `n > S` provided `−L ∈ [0, S]`; otherwise the block cannot
/// close and is skipped, which is also what keeps the mean alias-free.
pub fn flux_demodulated(field: &Field, q: i32, cut: &CutoffSpec, max_n: usize) -> Result<DemodulatedReport, GridError> {
    let lam = lambda(q);
    let w = |xi: &FreqVec| phi((norm2(xi) as f64).sqrt() / lam, cut);
    let ps = pieces(field);
    let low: Vec<usize> = (0..ps.len()).filter(|&c| ps[c].modes.iter().any(|(xi, _)| w(xi) != 0.0)).collect();
    let closes = |a: &Piece, b: &Piece, c: &Piece| {
        (0..3).all(|k| {
            let l = a.lo[k] + b.lo[k] + c.lo[k];
            let s = a.span[k] + b.span[k] + c.span[k];
            -l >= 0 && -l <= s
        })
    };
    let mut blocks = Vec::new();
    let mut need = 1i64;
    for &c in &low {
        for a in 0..ps.len() {
            for b in 0..ps.len() {
                if closes(&ps[a], &ps[b], &ps[c]) {
                    blocks.push((c, a, b));
                    need = need.max((0..3).map(|k| ps[a].span[k] + ps[b].span[k] + ps[c].span[k] + 1).max().unwrap());
                }
            }
        }
    }
    let n = smooth_size(need as usize);
    if n > max_n {
        let max_freq = ps.iter().flat_map(|p| p.modes.iter().flat_map(|(xi, _)| xi.iter().map(|c| c.abs()))).max().unwrap_or(0);
        return Err(GridError::GridTooCoarse { n: max_n, max_freq, need: n });
    }
    let synth = |p: &Piece, f: &dyn Fn(&FreqVec, &[C64; 3]) -> C64| -> Vec<C64> {
        let coeffs: Vec<(FreqVec, C64)> =
            p.modes.iter().map(|(xi, amp)| ([0, 1, 2].map(|k| xi[k] - p.lo[k]), f(xi, amp))).collect();
        synthesize_scalar(&coeffs, n)
    };
    let mut cache: HashMap<usize, [Vec<C64>; 3]> = HashMap::new();
    for &(_, a, b) in &blocks {
        for r in [a, b] {
            cache.entry(r).or_insert_with(|| [0, 1, 2].map(|m| synth(&ps[r], &|_, amp| amp[m])));
        }
    }
    let root = |l: i64| -> Vec<C64> {
        (0..n).map(|x| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * ((l * x as i64).rem_euclid(n as i64)) as f64 / n as f64)).collect()
    };
    let total = (n * n * n) as f64;
    let mut re = Neumaier::default();
    let mut im = Neumaier::default();
    for &c in &low {
        let mine: Vec<(usize, usize)> = blocks.iter().filter(|t| t.0 == c).map(|t| (t.1, t.2)).collect();
        if mine.is_empty() {
            continue;
        }
        let gc: Vec<Vec<C64>> = (0..9)
            .map(|mn| {
                let (m, k) = (mn / 3, mn % 3);
                synth(&ps[c], &|xi, amp| {
                    let wv = w(xi);
                    amp[m] * C64::new(0.0, xi[k] as f64) * (wv * wv)
                })
            })
            .collect();
        let mut by_a: Vec<usize> = mine.iter().map(|t| t.0).collect();
        by_a.dedup();
        for a in by_a {
            let ua = &cache[&a];
            // H_k = Σ_m ũa_m G̃c_{mk}
            let h: Vec<Vec<C64>> = (0..3)
                .map(|k| (0..n * n * n).map(|x| ua[0][x] * gc[k][x] + ua[1][x] * gc[3 + k][x] + ua[2][x] * gc[6 + k][x]).collect())
                .collect();
            for &(_, b) in mine.iter().filter(|t| t.0 == a) {
                let ub = &cache[&b];
                let l = [0, 1, 2].map(|k| ps[a].lo[k] + ps[b].lo[k] + ps[c].lo[k]);
                let (t0, t1, t2) = (root(l[0]), root(l[1]), root(l[2]));
                let slabs: Vec<C64> = (0..n)
                    .into_par_iter()
                    .map(|x0| {
                        let mut s = C64::new(0.0, 0.0);
                        for x1 in 0..n {
                            let p01 = t0[x0] * t1[x1];
                            let base = (x0 * n + x1) * n;
                            for x2 in 0..n {
                                let x = base + x2;
                                let v = ub[0][x] * h[0][x] + ub[1][x] * h[1][x] + ub[2][x] * h[2][x];
                                s += v * p01 * t2[x2];
                            }
                        }
                        s
                    })
                    .collect();
                let s: C64 = slabs.into_iter().fold(C64::new(0.0, 0.0), |a, b| a + b);
                re.add(s.re / total);
                im.add(s.im / total);
            }
        }
    }
    Ok(DemodulatedReport { value: re.value(), imag: im.value(), n, blocks: blocks.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::{build_field, FieldSpec};
    use crate::qfield::rat;

    #[test]
    fn smooth_sizes() {
        assert_eq!(smooth_size(7), 8);
        assert_eq!(smooth_size(73), 75);
        assert_eq!(smooth_size(1), 1);
    }

    #[test]
    fn single_cosine_l2() {
        let v = [C64::new(0.5, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
        let modes = [SpectralMode { xi: [0, 3, 1], amp: v }, SpectralMode { xi: [0, -3, -1], amp: v }];
        let l2 = lp_norm_modes(&modes, &[], 2.0, &GridSpec::Tensor { n: 8 }).unwrap();
        assert!((l2 - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn parseval_tensor_vs_exact() {
        let spec = FieldSpec::new(rat(1, 8), 4).with_range(3, 4).with_eps0(rat(1, 8));
        let f = build_field(&spec).unwrap();
        for q in 3..=4 {
            let g = f.gen(q).unwrap();
            let m = max_component(&generation_modes(g));
            let grid = GridSpec::Tensor { n: smooth_size(2 * m as usize + 1) };
            let a = l2_norm_exact(&f, q);
            let b = lp_norm_grid(&f, q, 2.0, &grid).unwrap();
            assert!((a - b).abs() <= 1e-10 * a, "{a} {b}");
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let f = build_field(&FieldSpec::new(rat(1, 8), 3).with_range(3, 3).with_eps0(rat(1, 8))).unwrap();
        assert!(matches!(lp_norm_grid(&f, 3, 3.0, &GridSpec::Tensor { n: 16 }), Err(AnalysisError::Grid(_))));
    }

    #[test]
    fn skeleton_flux_from_grid() {
        let cut = CutoffSpec::new(&rat(1, 16), Default::default());
        let (v, _) = flux_full_grid(&skeleton_modes(3), 3, &cut, 64).unwrap();
        assert!((v - crate::flux::skeleton_flux_oracle(3)).abs() < 1e-10, "{v}");
    }
}
