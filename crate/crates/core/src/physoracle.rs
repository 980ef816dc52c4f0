//! Grid synthesis and analysis of trigonometric polynomials on T³, kept
//! independent of the triad engine.
//!
//! Two sampling schemes are provided: the tensor grid `n³` (3D FFT) and the
//! rank-1 lattice rule `x_k = 2π·frac(k·g/N)`, on which a trigonometric
//! polynomial is evaluated with one length-`N` FFT after binning the
//! coefficients by `ξ·g mod N`. Both integrate `e^{iξ·x}` exactly unless
//! `ξ` lies on the dual lattice.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::construction::FreqVec;

pub type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid of size {n} cannot resolve frequency component {max_freq} (need n ≥ {need})")]
    GridTooCoarse { n: usize, max_freq: i64, need: usize },
}

/// One Fourier coefficient of a vector field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralMode {
    pub xi: FreqVec,
    pub amp: [C64; 3],
}

/// Real samples of a vector field on an `n³` tensor grid, row-major with the
/// third coordinate fastest.
#[derive(Clone, Debug)]
pub struct GridField {
    pub n: usize,
    pub comps: [Vec<f64>; 3],
    pub max_freq: i64,
    pub alias_free: bool,
    /// Largest imaginary part discarded during synthesis.
    pub max_imag: f64,
}

impl GridField {
    pub fn zeros(n: usize) -> GridField {
        let z = vec![0.0; n * n * n];
        GridField { n, comps: [z.clone(), z.clone(), z], max_freq: 0, alias_free: true, max_imag: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Grid point coordinates `2π·(a, b, c)/n` of a flat index.
    pub fn point(&self, idx: usize) -> [f64; 3] {
        let n = self.n;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        [(idx / (n * n)) as f64 * h, ((idx / n) % n) as f64 * h, (idx % n) as f64 * h]
    }

    /// Raw dump: header line `n n n 3`, then one line per sample with the three
    /// components, row-major.
    pub fn write_raw<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {} {} 3", self.n, self.n, self.n)?;
        for k in 0..self.len() {
            writeln!(w, "{:e} {:e} {:e}", self.comps[0][k], self.comps[1][k], self.comps[2][k])?;
        }
        Ok(())
    }
}

pub fn max_component(modes: &[SpectralMode]) -> i64 {
    modes.iter().flat_map(|m| m.xi.iter().map(|c| c.abs())).max().unwrap_or(0)
}

#[inline]
fn wrap(c: i64, n: usize) -> usize {
    c.rem_euclid(n as i64) as usize
}

/// In-place 3D FFT of an `n³` array (`inverse`: `e^{+i}` kernel, unnormalized).
pub fn fft3(data: &mut [C64], n: usize, inverse: bool) {
    assert_eq!(data.len(), n * n * n);
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    // Third axis: contiguous lines.
    data.par_chunks_mut(n).for_each(|line| fft.process(line));
    // Second axis: within each x-slab.
    data.par_chunks_mut(n * n).for_each(|slab| {
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for z in 0..n {
            for y in 0..n {
                buf[y] = slab[y * n + z];
            }
            fft.process(&mut buf);
            for y in 0..n {
                slab[y * n + z] = buf[y];
            }
        }
    });
    // First axis: gather per (y, z) column into owned buffers.
    let cols: Vec<Vec<C64>> = (0..n * n)
        .into_par_iter()
        .map(|yz| {
            let mut buf: Vec<C64> = (0..n).map(|x| data[x * n * n + yz]).collect();
            fft.process(&mut buf);
            buf
        })
        .collect();
    for (yz, col) in cols.into_iter().enumerate() {
        for (x, v) in col.into_iter().enumerate() {
            data[x * n * n + yz] = v;
        }
    }
}

/// Scalar synthesis `Σ a_ξ e^{iξ·x}` on the `n³` grid.
pub fn synthesize_scalar(coeffs: &[(FreqVec, C64)], n: usize) -> Vec<C64> {
    let mut data = vec![C64::new(0.0, 0.0); n * n * n];
    for (xi, a) in coeffs {
        let idx = (wrap(xi[0], n) * n + wrap(xi[1], n)) * n + wrap(xi[2], n);
        data[idx] += a;
    }
    fft3(&mut data, n, true);
    data
}

/// Samples of `Σ amp e^{iξ·x}` over the given (conjugate-closed) mode list.
pub fn synthesize(modes: &[SpectralMode], n: usize) -> Result<GridField, GridError> {
    let max_freq = max_component(modes);
    let need = 2 * max_freq as usize + 1;
    if n < need {
        return Err(GridError::GridTooCoarse { n, max_freq, need });
    }
    let mut out = GridField::zeros(n);
    out.max_freq = max_freq;
    for m in 0..3 {
        let coeffs: Vec<(FreqVec, C64)> = modes.iter().map(|md| (md.xi, md.amp[m])).collect();
        let data = synthesize_scalar(&coeffs, n);
        out.max_imag = data.iter().fold(out.max_imag, |a, v| a.max(v.im.abs()));
        out.comps[m] = data.iter().map(|v| v.re).collect();
    }
    Ok(out)
}

/// Fourier coefficients of the samples, normalized to the `e^{iξ·x}`
/// convention; coefficients below `1e-14` of the largest are dropped.
pub fn analyze(g: &GridField) -> Vec<SpectralMode> {
    let n = g.n;
    let norm = 1.0 / g.len() as f64;
    let spectra: Vec<Vec<C64>> = (0..3)
        .map(|m| {
            let mut d: Vec<C64> = g.comps[m].iter().map(|&v| C64::new(v, 0.0)).collect();
            fft3(&mut d, n, false);
            d.iter().map(|v| v * norm).collect()
        })
        .collect();
    let peak = spectra.iter().flat_map(|s| s.iter().map(|v| v.norm())).fold(0.0, f64::max);
    let half = n as i64 / 2;
    let signed = |i: usize| if i as i64 > half { i as i64 - n as i64 } else { i as i64 };
    let mut out = Vec::new();
    for idx in 0..g.len() {
        let amp = [spectra[0][idx], spectra[1][idx], spectra[2][idx]];
        if amp.iter().any(|a| a.norm() > 1e-14 * peak) {
            let xi = [signed(idx / (n * n)), signed((idx / n) % n), signed(idx % n)];
            out.push(SpectralMode { xi, amp });
        }
    }
    out
}

/// Amplitudes of `∇u`: entry `[m][n] = amp_m · iξ_n` (so `(∇u)_{mn} = ∂_n u_m`).
pub fn spectral_gradient(modes: &[SpectralMode]) -> Vec<(FreqVec, [[C64; 3]; 3])> {
    modes
        .iter()
        .map(|m| {
            let mut t = [[C64::new(0.0, 0.0); 3]; 3];
            for (a, row) in t.iter_mut().enumerate() {
                for (b, v) in row.iter_mut().enumerate() {
                    *v = m.amp[a] * C64::new(0.0, m.xi[b] as f64);
                }
            }
            (m.xi, t)
        })
        .collect()
}

/// Rank-1 lattice rule with `n_points` nodes and generating vector `gen`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeRule {
    pub n_points: usize,
    pub gen: [u64; 3],
}

impl LatticeRule {
    /// `ξ·g mod N`.
    #[inline]
    pub fn bin(&self, xi: &FreqVec) -> usize {
        let n = self.n_points as i128;
        let s: i128 = (0..3).map(|k| xi[k] as i128 * self.gen[k] as i128).sum();
        s.rem_euclid(n) as usize
    }

    /// Whether the rule integrates `e^{ih·x}` as zero for every nonzero `h` in
    /// the integer box `[lo, hi]` (no dual-lattice point inside).
    pub fn box_is_clear(&self, lo: [i64; 3], hi: [i64; 3]) -> bool {
        let n = self.n_points as i128;
        let g = self.gen.map(|v| v as i128);
        (lo[0]..=hi[0]).into_par_iter().all(|x| {
            for y in lo[1]..=hi[1] {
                let base = (x as i128 * g[0] + y as i128 * g[1]).rem_euclid(n);
                // z·g3 ≡ −base (mod N): step through z only when g3 is small
                // relative to N would be faster; the direct scan is simple.
                let mut v = (base + lo[2] as i128 * g[2]).rem_euclid(n);
                for z in lo[2]..=hi[2] {
                    if v == 0 && !(x == 0 && y == 0 && z == 0) {
                        return false;
                    }
                    v += g[2];
                    if v >= n {
                        v -= n;
                    }
                }
            }
            true
        })
    }

    /// Deterministic candidate generators from a fixed linear congruential
    /// sequence; `attempt` selects the candidate.
    pub fn candidate(n_points: usize, attempt: u64) -> LatticeRule {
        let mut s = 0x9E37_79B9_7F4A_7C15u64.wrapping_add(attempt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        let mut next = || {
            s ^= s >> 30;
            s = s.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            s ^= s >> 27;
            s = s.wrapping_mul(0x94D0_49BB_1331_11EB);
            s ^= s >> 31;
            s
        };
        let n = n_points as u64;
        let mut pick = || loop {
            let v = next() % n;
            if v > 1 && gcd(v, n) == 1 {
                return v;
            }
        };
        LatticeRule { n_points, gen: [1, pick(), pick()] }
    }

    /// Values of each scalar coefficient list at the `N` nodes.
    pub fn eval_scalar(&self, coeffs: impl Iterator<Item = (FreqVec, C64)>) -> Vec<C64> {
        let mut data = vec![C64::new(0.0, 0.0); self.n_points];
        for (xi, a) in coeffs {
            data[self.bin(&xi)] += a;
        }
        let mut planner = FftPlanner::new();
        planner.plan_fft_inverse(self.n_points).process(&mut data);
        data
    }

    /// Node `k` as a point of `[0, 2π)³`.
    pub fn node(&self, k: usize) -> [f64; 3] {
        let n = self.n_points as u128;
        self.gen.map(|g| ((k as u128 * g as u128) % n) as f64 / n as f64 * 2.0 * std::f64::consts::PI)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn single_cosine() {
        let v = [c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        let modes = [SpectralMode { xi: [1, 2, 0], amp: v }, SpectralMode { xi: [-1, -2, 0], amp: v }];
        let g = synthesize(&modes, 8).unwrap();
        for k in 0..g.len() {
            let x = g.point(k);
            assert!((g.comps[0][k] - (x[0] + 2.0 * x[1]).cos()).abs() < 1e-12);
            assert!(g.comps[1][k].abs() < 1e-15);
        }
    }

    #[test]
    fn coarse_grid_rejected() {
        let modes = [SpectralMode { xi: [5, 0, 0], amp: [c(1.0, 0.0); 3] }];
        assert!(matches!(synthesize(&modes, 8), Err(GridError::GridTooCoarse { .. })));
    }

    #[test]
    fn zero_field_analyzes_to_nothing() {
        assert!(analyze(&GridField::zeros(4)).is_empty());
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = spectral_gradient(&[SpectralMode { xi: [0, 0, 0], amp: [c(1.0, 0.0); 3] }]);
        assert!(g[0].1.iter().flatten().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn lattice_integrates_constant_and_kills_clear_modes() {
        let rule = (0..64)
            .map(|a| LatticeRule::candidate(1009, a))
            .find(|r| r.box_is_clear([-3, -3, -3], [3, 3, 3]))
            .expect("a clear generator among the candidates");
        let vals = rule.eval_scalar([([0, 0, 0], c(2.0, 0.0)), ([1, -2, 3], c(1.0, 0.0))].into_iter());
        let mean: C64 = vals.iter().sum::<C64>() / vals.len() as f64;
        assert!((mean - c(2.0, 0.0)).norm() < 1e-12);
    }
}
