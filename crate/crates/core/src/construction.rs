//! The lattice field: skeleton vectors, rotations, active regions and
//! Leray-projected mode amplitudes, one generation per dyadic level.
//!
//! Every active region is an axis-aligned cube intersected with Z³, so it is
//! stored as an integer box whose bounds are computed exactly in Q(√15).
//! Mode amplitude directions `π_ξ(V)` are kept in an integer-scaled form
//! `(p + r·√15) / den`, which is exact and cheap enough to evaluate for
//! millions of modes.

use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::qfield::{rat, Mat3X, Rat, Vec3X, QF15};

pub const SQRT15: f64 = 3.872_983_346_207_417;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructionError {
    #[error("region A_{q}^({i}) contains no lattice point")]
    EmptyRegion { q: i32, i: usize },
    #[error("Leray projection at the zero frequency")]
    ZeroFrequency,
    #[error("invalid field spec: {0}")]
    InvalidSpec(String),
}

/// Lattice frequency.
pub type FreqVec = [i64; 3];

/// The rotation by π/3 about the line {x₁ + 2x₂ = 0 = x₃}.
pub fn rotation() -> Mat3X {
    let r = |n: i64| QF15::new(rat(n, 10), Rat::zero());
    let s = |n: i64| QF15::new(Rat::zero(), rat(n, 10));
    Mat3X([[r(9), r(-2), s(-1)], [r(-2), r(6), s(-2)], [s(1), s(2), r(5)]])
}

/// Skeleton frequency and amplitude directions for the three rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonData {
    /// `f[j][i]`, `i` zero-based (component `i + 1`).
    pub f: [[Vec3X; 3]; 3],
    pub v: [[Vec3X; 3]; 3],
    /// Unit normals `R^j e₃` of the anchoring planes.
    pub normals: [Vec3X; 3],
}

impl SkeletonData {
    pub fn f_f64(&self, j: usize, i: usize) -> [f64; 3] {
        self.f[j][i].to_f64()
    }

    pub fn v_f64(&self, j: usize, i: usize) -> [f64; 3] {
        self.v[j][i].to_f64()
    }
}

pub fn make_skeleton() -> SkeletonData {
    make_skeleton_with(true)
}

/// Skeleton with the rotation optionally replaced by the identity (a test hook
/// that puts every generation on the base plane).
pub fn make_skeleton_with(rotate: bool) -> SkeletonData {
    let f0 = [[0, 1, 0], [2, 0, 0], [2, 1, 0]].map(Vec3X::from_ints);
    let v0 = [[1, 0, 0], [0, 1, 0], [-1, 2, 0]].map(Vec3X::from_ints);
    let e3 = Vec3X::from_ints([0, 0, 1]);
    let r = if rotate { rotation() } else { Mat3X::identity() };
    let r2 = r.mul(&r);
    let mats = [Mat3X::identity(), r, r2];
    let f = [0, 1, 2].map(|j| [0, 1, 2].map(|i| mats[j].apply(&f0[i])));
    let v = [0, 1, 2].map(|j| [0, 1, 2].map(|i| mats[j].apply(&v0[i])));
    let normals = [0, 1, 2].map(|j| mats[j].apply(&e3));
    SkeletonData { f, v, normals }
}

/// A vector `(p + r·√15) / den` with integer `p`, `r` and positive `den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaledVec {
    pub p: [i128; 3],
    pub r: [i128; 3],
    pub den: i128,
}

impl ScaledVec {
    /// Exact conversion from a Q(√15) vector whose entries have denominators
    /// dividing `den`.
    pub fn from_vec3x(v: &Vec3X, den: i128) -> ScaledVec {
        let d = Rat::from_integer(BigInt::from(den));
        let conv = |x: &Rat| {
            let s = x * &d;
            assert!(s.is_integer(), "denominator does not divide {den}");
            s.to_integer().to_i128().expect("entry fits i128")
        };
        let c = v.comps();
        ScaledVec {
            p: [conv(&c[0].a), conv(&c[1].a), conv(&c[2].a)],
            r: [conv(&c[0].b), conv(&c[1].b), conv(&c[2].b)],
            den,
        }
    }

    pub fn to_vec3x(&self) -> Vec3X {
        let d = BigInt::from(self.den);
        let e = |k: usize| {
            QF15::new(
                Rat::new(BigInt::from(self.p[k]), d.clone()),
                Rat::new(BigInt::from(self.r[k]), d.clone()),
            )
        };
        Vec3X::new(e(0), e(1), e(2))
    }

    pub fn to_f64(&self) -> [f64; 3] {
        let d = self.den as f64;
        [0, 1, 2].map(|k| (self.p[k] as f64 + self.r[k] as f64 * SQRT15) / d)
    }

    /// `ξ · self` as `(a + b√15) / den`, returned as the pair `(a, b)`.
    pub fn dot_int(&self, xi: &FreqVec) -> (i128, i128) {
        let mut a = 0i128;
        let mut b = 0i128;
        for k in 0..3 {
            a += xi[k] as i128 * self.p[k];
            b += xi[k] as i128 * self.r[k];
        }
        (a, b)
    }
}

/// `π_ξ(v) = v − ξ (ξ·v)/|ξ|²`, exact.
pub fn leray_project(xi: &FreqVec, v: &Vec3X) -> Result<Vec3X, ConstructionError> {
    if xi.iter().all(|&c| c == 0) {
        return Err(ConstructionError::ZeroFrequency);
    }
    let xv = Vec3X::from_ints(*xi);
    let n2 = xi.iter().map(|c| c * c).sum::<i64>();
    let coef = v.dot(&xv).scale(&rat(1, n2));
    Ok(v.sub(&xv.scale(&coef)))
}

/// Integer-scaled Leray projection: with `v = (p + r√15)/D` the result is
/// `(|ξ|²p − ξ(ξ·p) + (|ξ|²r − ξ(ξ·r))√15) / (D|ξ|²)`.
pub fn leray_project_scaled(xi: &FreqVec, v: &ScaledVec) -> Result<ScaledVec, ConstructionError> {
    let n2: i128 = xi.iter().map(|&c| (c as i128) * (c as i128)).sum();
    if n2 == 0 {
        return Err(ConstructionError::ZeroFrequency);
    }
    let (a, b) = v.dot_int(xi);
    let mut out = ScaledVec { p: [0; 3], r: [0; 3], den: v.den * n2 };
    for k in 0..3 {
        out.p[k] = n2 * v.p[k] - xi[k] as i128 * a;
        out.r[k] = n2 * v.r[k] - xi[k] as i128 * b;
    }
    Ok(out)
}

/// Float direction `π_ξ(v)` straight from the integer form, without building
/// the intermediate `ScaledVec`.
#[inline]
pub fn leray_dir_f64(xi: &FreqVec, v: &ScaledVec) -> [f64; 3] {
    let n2: i128 = xi.iter().map(|&c| (c as i128) * (c as i128)).sum();
    let (a, b) = v.dot_int(xi);
    let d = (v.den * n2) as f64;
    [0, 1, 2].map(|k| {
        let p = n2 * v.p[k] - xi[k] as i128 * a;
        let r = n2 * v.r[k] - xi[k] as i128 * b;
        (p as f64 + r as f64 * SQRT15) / d
    })
}

/// Shape of the transition between the plateau and the cutoff of `φ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CutoffKind {
    /// Order 1 is the cubic `3t² − 2t³`, order 2 the quintic, and so on.
    Smoothstep { order: u32 },
}

impl Default for CutoffKind {
    fn default() -> Self {
        CutoffKind::Smoothstep { order: 1 }
    }
}

/// Test hooks that deliberately break the construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hooks {
    /// Put every generation on the base plane.
    #[serde(default)]
    pub no_rotation: bool,
    /// Side of the third region as a multiple of `ε` (default 2).
    #[serde(default)]
    pub side3: Option<u32>,
    /// Leave this `(q, i)` region unprojected.
    #[serde(default)]
    pub skip_leray: Option<(i32, usize)>,
}

impl Hooks {
    pub fn is_default(&self) -> bool {
        *self == Hooks::default()
    }
}

/// Construction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(with = "rat_string")]
    pub eps: Rat,
    pub q_min: i32,
    pub q_max: i32,
    pub amplitude_scale: f64,
    pub target_c: Option<f64>,
    pub cutoff_kind: CutoffKind,
    pub float_precision: u32,
    #[serde(with = "rat_string")]
    pub eps0: Rat,
    /// Largest `ελ_q` for which mode tables are materialized; above it only
    /// the (exact) region boxes are built.
    pub dense_limit: u64,
    #[serde(default)]
    pub hooks: Hooks,
}

pub mod rat_string {
    use super::Rat;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rat, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rat, D::Error> {
        let s = String::deserialize(d)?;
        crate::qfield::parse_rat(&s).ok_or_else(|| serde::de::Error::custom(format!("bad rational {s}")))
    }
}

impl FieldSpec {
    /// Spec with defaults: `q_min = ⌈log₂(1/ε)⌉`, unit amplitude, cubic cutoff.
    pub fn new(eps: Rat, q_max: i32) -> FieldSpec {
        let q_min = default_q_min(&eps);
        FieldSpec {
            eps,
            q_min,
            q_max,
            amplitude_scale: 1.0,
            target_c: None,
            cutoff_kind: CutoffKind::default(),
            float_precision: 53,
            eps0: rat(1, 16),
            dense_limit: 64,
            hooks: Hooks::default(),
        }
    }

    pub fn with_range(mut self, q_min: i32, q_max: i32) -> FieldSpec {
        self.q_min = q_min;
        self.q_max = q_max;
        self
    }

    pub fn with_eps0(mut self, eps0: Rat) -> FieldSpec {
        self.eps0 = eps0;
        self
    }

    pub fn with_scale(mut self, s: f64) -> FieldSpec {
        self.amplitude_scale = s;
        self
    }

    pub fn eps_f64(&self) -> f64 {
        self.eps.to_f64().unwrap()
    }

    /// `ελ_q` as an exact rational.
    pub fn eps_lambda(&self, q: i32) -> Rat {
        &self.eps * pow2(q)
    }

    pub fn validate(&self) -> Result<(), ConstructionError> {
        let bad = |m: String| Err(ConstructionError::InvalidSpec(m));
        if !self.eps.is_positive() {
            return bad(format!("eps = {} must be positive", self.eps));
        }
        if self.eps > self.eps0 {
            return bad(format!("eps = {} exceeds eps0 = {}", self.eps, self.eps0));
        }
        if self.q_min > self.q_max {
            return bad(format!("q_min = {} > q_max = {}", self.q_min, self.q_max));
        }
        if self.eps_lambda(self.q_min) < Rat::one() {
            return bad(format!("eps·λ at q_min = {} is below 1", self.q_min));
        }
        if !(self.amplitude_scale.is_finite()) {
            return bad("amplitude_scale must be finite".into());
        }
        if self.float_precision < 53 {
            return bad("float_precision must be at least 53".into());
        }
        Ok(())
    }

    /// Content hash over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn side_multiple(&self, i: usize) -> u32 {
        match i {
            0 | 1 => 1,
            _ => self.hooks.side3.unwrap_or(2),
        }
    }
}

/// `⌈log₂(1/ε)⌉`, the first level with `ελ_q ≥ 1`.
pub fn default_q_min(eps: &Rat) -> i32 {
    let mut q = 0;
    while &(eps * pow2(q)) < &Rat::one() {
        q += 1;
    }
    q
}

pub fn pow2(q: i32) -> Rat {
    if q >= 0 {
        Rat::from_integer(BigInt::one() << q as usize)
    } else {
        Rat::new(BigInt::one(), BigInt::one() << (-q) as usize)
    }
}

pub fn lambda(q: i32) -> f64 {
    2f64.powi(q)
}

/// The rotation index `q mod 3`.
pub fn rot_index(q: i32) -> usize {
    q.rem_euclid(3) as usize
}

/// `Z³ ∩ λ_q(F + [0, sε]³)` as an integer box; `lo > hi` in some coordinate
/// means the region is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveRegion {
    pub q: i32,
    pub j: usize,
    /// Zero-based component index.
    pub i: usize,
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl ActiveRegion {
    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.lo[k] > self.hi[k])
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| (self.hi[k] - self.lo[k] + 1).max(0) as usize)
    }

    pub fn len(&self) -> usize {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains(&self, xi: &FreqVec) -> bool {
        (0..3).all(|k| self.lo[k] <= xi[k] && xi[k] <= self.hi[k])
    }

    /// Box-order index (x slowest, z fastest).
    #[inline]
    pub fn index_of(&self, xi: &FreqVec) -> usize {
        let e = self.extent();
        (((xi[0] - self.lo[0]) as usize * e[1]) + (xi[1] - self.lo[1]) as usize) * e[2]
            + (xi[2] - self.lo[2]) as usize
    }

    pub fn points(&self) -> impl Iterator<Item = FreqVec> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo[0]..=hi[0]).flat_map(move |x| {
            (lo[1]..=hi[1]).flat_map(move |y| (lo[2]..=hi[2]).map(move |z| [x, y, z]))
        })
    }
}

/// Exact box test `λF ≤ ξ ≤ λF + sελ` in Q(√15), independent of the cached
/// integer bounds.
pub fn in_blur_cube(skel: &SkeletonData, spec: &FieldSpec, q: i32, i: usize, xi: &FreqVec) -> bool {
    let j = rot_index(q);
    let lam = pow2(q);
    let side = &spec.eps * &lam * Rat::from_integer(BigInt::from(spec.side_multiple(i)));
    skel.f[j][i].comps().iter().zip(xi.iter()).all(|(fc, &x)| {
        let lo = fc.scale(&lam);
        let hi = &lo + &QF15::from_rat(side.clone());
        let xq = QF15::from_int(x);
        lo <= xq && xq <= hi
    })
}

fn to_i64(b: &BigInt) -> i64 {
    b.to_i64().expect("lattice bound fits in i64")
}

/// Build the integer box of `A_q^{(i)}` (zero-based `i`).
pub fn enumerate_region(
    skel: &SkeletonData,
    spec: &FieldSpec,
    q: i32,
    i: usize,
) -> Result<ActiveRegion, ConstructionError> {
    let region = region_box(skel, spec, q, i);
    if region.is_empty() {
        Err(ConstructionError::EmptyRegion { q, i: i + 1 })
    } else {
        Ok(region)
    }
}

/// Like [`enumerate_region`] but returns the (possibly empty) box.
pub fn region_box(skel: &SkeletonData, spec: &FieldSpec, q: i32, i: usize) -> ActiveRegion {
    let j = rot_index(q);
    let lam = pow2(q);
    let side = QF15::from_rat(&spec.eps * &lam * Rat::from_integer(BigInt::from(spec.side_multiple(i))));
    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    for (k, fc) in skel.f[j][i].comps().iter().enumerate() {
        let l = fc.scale(&lam);
        let h = &l + &side;
        lo[k] = to_i64(&l.ceil());
        hi[k] = to_i64(&h.floor());
    }
    ActiveRegion { q, j, i, lo, hi }
}

/// How a mode's real direction enters its complex amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// `−(i/2)` (the `+ξ` half of a sine).
    SinPlus,
    /// `+(i/2)` (the `−ξ` half of a sine).
    SinMinus,
    /// `1/2` (either half of a cosine).
    Cos,
}

impl Phase {
    /// The coefficient as `(re, im)`.
    pub fn coeff(self) -> (f64, f64) {
        match self {
            Phase::SinPlus => (0.0, -0.5),
            Phase::SinMinus => (0.0, 0.5),
            Phase::Cos => (0.5, 0.0),
        }
    }
}

/// One Fourier mode: amplitude `coeff(phase) · gen_scale · dir` at `xi`, where
/// `dir = π_ξ(V)` is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub xi: FreqVec,
    pub dir: ScaledVec,
    pub phase: Phase,
    pub gen_scale: f64,
    pub region: usize,
}

impl Mode {
    /// Exact real part of the amplitude divided by `gen_scale`.
    pub fn re_amp(&self) -> Vec3X {
        let (re, _) = self.phase.coeff();
        self.dir.to_vec3x().scale_rat(&float_half(re))
    }

    /// Exact imaginary part of the amplitude divided by `gen_scale`.
    pub fn im_amp(&self) -> Vec3X {
        let (_, im) = self.phase.coeff();
        self.dir.to_vec3x().scale_rat(&float_half(im))
    }

    /// Complex amplitude `(re, im)` per component, floating point.
    pub fn amp_f64(&self) -> ([f64; 3], [f64; 3]) {
        let (cr, ci) = self.phase.coeff();
        let d = self.dir.to_f64();
        (d.map(|x| cr * self.gen_scale * x), d.map(|x| ci * self.gen_scale * x))
    }
}

fn float_half(x: f64) -> Rat {
    if x == 0.5 {
        rat(1, 2)
    } else if x == -0.5 {
        rat(-1, 2)
    } else {
        Rat::zero()
    }
}

/// All data of one dyadic level.
#[derive(Clone, Debug)]
pub struct Generation {
    pub q: i32,
    pub j: usize,
    pub regions: [ActiveRegion; 3],
    /// `ε^{-2} λ_q^{-7/3}` times the amplitude scale.
    pub gen_scale: f64,
    /// Integer-scaled amplitude vectors `V_j^{(i)}` (or unprojected hook data).
    pub v_scaled: [ScaledVec; 3],
    pub projected: [bool; 3],
    /// Float directions `π_ξ(V)` in box order, present when materialized.
    pub dirs: Option<[Vec<[f64; 3]>; 3]>,
}

impl Generation {
    pub fn mode_count(&self) -> usize {
        2 * self.regions.iter().map(|r| r.len()).sum::<usize>()
    }

    pub fn is_dense(&self) -> bool {
        self.dirs.is_some()
    }

    /// Exact direction for a frequency of region `i`.
    pub fn exact_dir(&self, i: usize, xi: &FreqVec) -> ScaledVec {
        if self.projected[i] {
            leray_project_scaled(xi, &self.v_scaled[i]).expect("active frequencies are nonzero")
        } else {
            self.v_scaled[i]
        }
    }

    /// Float direction of `xi ∈ A^{(i)}` (positive half).
    #[inline]
    pub fn dir(&self, i: usize, xi: &FreqVec) -> [f64; 3] {
        match &self.dirs {
            Some(d) => d[i][self.regions[i].index_of(xi)],
            None => self.dir_uncached(i, xi),
        }
    }

    fn dir_uncached(&self, i: usize, xi: &FreqVec) -> [f64; 3] {
        if self.projected[i] {
            leray_dir_f64(xi, &self.v_scaled[i])
        } else {
            self.v_scaled[i].to_f64()
        }
    }

    /// Phase of the mode at `sign·ξ`, `ξ ∈ A^{(i)}`.
    pub fn phase(i: usize, sign: i8) -> Phase {
        match (i, sign > 0) {
            (0, true) => Phase::SinPlus,
            (0, false) => Phase::SinMinus,
            _ => Phase::Cos,
        }
    }

    /// Iterate over every mode (both signs) with exact directions.
    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        (0..3).flat_map(move |i| {
            self.regions[i].points().flat_map(move |xi| {
                let dir = self.exact_dir(i, &xi);
                [1i8, -1].into_iter().map(move |s| Mode {
                    xi: xi.map(|c| c * s as i64),
                    dir,
                    phase: Generation::phase(i, s),
                    gen_scale: self.gen_scale,
                    region: i,
                })
            })
        })
    }

    /// Region containing `xi` (with sign), if any.
    pub fn locate(&self, xi: &FreqVec) -> Option<(usize, i8)> {
        for i in 0..3 {
            if self.regions[i].contains(xi) {
                return Some((i, 1));
            }
            if self.regions[i].contains(&xi.map(|c| -c)) {
                return Some((i, -1));
            }
        }
        None
    }
}

/// `amplitude_scale · ε^{-2} · λ_q^{-7/3}`.
pub fn generation_scale(spec: &FieldSpec, q: i32) -> f64 {
    let e = spec.eps_f64();
    spec.amplitude_scale * e.powi(-2) * lambda(q).powf(-7.0 / 3.0)
}

pub fn build_generation(
    skel: &SkeletonData,
    spec: &FieldSpec,
    q: i32,
) -> Result<Generation, ConstructionError> {
    let j = rot_index(q);
    let mut regions = [region_box(skel, spec, q, 0); 3];
    for i in 0..3 {
        regions[i] = enumerate_region(skel, spec, q, i)?;
    }
    let den = 10i128.pow(j as u32);
    let v_scaled = [0, 1, 2].map(|i| ScaledVec::from_vec3x(&skel.v[j][i], den));
    let projected = [0, 1, 2].map(|i| spec.hooks.skip_leray != Some((q, i + 1)));
    let el = spec.eps_lambda(q);
    let mut g = Generation {
        q,
        j,
        regions,
        gen_scale: generation_scale(spec, q),
        v_scaled,
        projected,
        dirs: None,
    };
    if el <= Rat::from_integer(BigInt::from(spec.dense_limit)) {
        let dirs = [0, 1, 2].map(|i| {
            let r = &g.regions[i];
            r.points().map(|xi| g.dir_uncached(i, &xi)).collect::<Vec<_>>()
        });
        g.dirs = Some(dirs);
    }
    Ok(g)
}

/// Range of `ελ_q` treated as quantitatively meaningful. Below 8 the ±1
/// rounding of the region boxes is a double-digit percentage effect; above
/// 32 full flux sums stop being cheap.
pub const FEASIBLE_EPS_LAMBDA: (u64, u64) = (8, 32);

/// A built field: one generation per level in `q_min..=q_max`.
#[derive(Clone, Debug)]
pub struct Field {
    pub spec: FieldSpec,
    pub skeleton: SkeletonData,
    pub gens: Vec<Generation>,
}

impl Field {
    pub fn gen(&self, q: i32) -> Option<&Generation> {
        if q < self.spec.q_min || q > self.spec.q_max {
            None
        } else {
            self.gens.get((q - self.spec.q_min) as usize)
        }
    }

    pub fn q_range(&self) -> std::ops::RangeInclusive<i32> {
        self.spec.q_min..=self.spec.q_max
    }

    /// Highest level whose mode tables are materialized.
    pub fn dense_top(&self) -> i32 {
        self.gens.iter().filter(|g| g.is_dense()).map(|g| g.q).max().unwrap_or(self.spec.q_min - 1)
    }

    /// Levels inside [`FEASIBLE_EPS_LAMBDA`] that are built and materialized.
    pub fn feasible_levels(&self) -> Vec<i32> {
        let (lo, hi) = FEASIBLE_EPS_LAMBDA;
        self.gens
            .iter()
            .filter(|g| g.is_dense())
            .filter(|g| {
                let el = self.spec.eps_lambda(g.q);
                el >= Rat::from_integer(BigInt::from(lo)) && el <= Rat::from_integer(BigInt::from(hi))
            })
            .map(|g| g.q)
            .collect()
    }

    /// Generation and region holding the frequency, if active.
    pub fn locate(&self, xi: &FreqVec) -> Option<(i32, usize, i8)> {
        self.gens.iter().find_map(|g| g.locate(xi).map(|(i, s)| (g.q, i, s)))
    }

    /// Same field with every amplitude multiplied by `gamma`.
    pub fn rescaled(&self, gamma: f64) -> Field {
        let mut f = self.clone();
        f.spec.amplitude_scale *= gamma;
        for g in &mut f.gens {
            g.gen_scale *= gamma;
        }
        f
    }
}

pub fn build_field(spec: &FieldSpec) -> Result<Field, ConstructionError> {
    spec.validate()?;
    build_field_unchecked(spec)
}

/// Build without the `eps0` / `q_min` guards (used for small-ε-free tests).
pub fn build_field_unchecked(spec: &FieldSpec) -> Result<Field, ConstructionError> {
    let skeleton = make_skeleton_with(!spec.hooks.no_rotation);
    let gens = (spec.q_min..=spec.q_max)
        .map(|q| build_generation(&skeleton, spec, q))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Field { spec: spec.clone(), skeleton, gens })
}

/// Field whose amplitude scale is fixed by a target flux: the scale is
/// `cbrt(target_c / calibration_flux)`.
pub fn build_field_calibrated(spec: &FieldSpec, calibration_flux: f64) -> Result<Field, ConstructionError> {
    let mut s = spec.clone();
    if let Some(c) = spec.target_c {
        s.amplitude_scale = (c / calibration_flux).cbrt();
    }
    build_field(&s)
}

/// Sign of `a + b·√d` for a positive non-square integer `d`.
pub fn sign_surd(a: &Rat, b: &Rat, d: i64) -> i32 {
    let sa = a.signum();
    let sb = b.signum();
    let sa = if sa.is_zero() { 0 } else if sa.is_positive() { 1 } else { -1 };
    let sb = if sb.is_zero() { 0 } else if sb.is_positive() { 1 } else { -1 };
    if sa == sb || sb == 0 {
        return sa;
    }
    if sa == 0 {
        return sb;
    }
    let lhs = a * a;
    let rhs = b * b * Rat::from_integer(BigInt::from(d));
    match lhs.cmp(&rhs) {
        std::cmp::Ordering::Greater => sa,
        std::cmp::Ordering::Less => sb,
        std::cmp::Ordering::Equal => 0,
    }
}

impl fmt::Display for ActiveRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "A_{}^({}) [{}..{}]x[{}..{}]x[{}..{}] ({} pts)",
            self.q,
            self.i + 1,
            self.lo[0],
            self.hi[0],
            self.lo[1],
            self.hi[1],
            self.lo[2],
            self.hi[2],
            self.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeleton_values() {
        let s = make_skeleton();
        assert_eq!(s.f[0][2], Vec3X::from_ints([2, 1, 0]));
        let v = &s.v[1][0];
        assert_eq!(v.x, QF15::new(rat(9, 10), Rat::zero()));
        assert_eq!(v.y, QF15::new(rat(-2, 10), Rat::zero()));
        assert_eq!(v.z, QF15::new(Rat::zero(), rat(1, 10)));
        for j in 0..3 {
            assert!(s.f[j][0].add(&s.f[j][1]).sub(&s.f[j][2]).is_zero());
            for i in 0..3 {
                assert!(s.f[j][i].dot(&s.v[j][i]).is_zero());
            }
            assert_eq!(s.f[j][0].norm2(), QF15::from_int(1));
            assert_eq!(s.f[j][1].norm2(), QF15::from_int(4));
            assert_eq!(s.f[j][2].norm2(), QF15::from_int(5));
        }
    }

    #[test]
    fn rotation_cubes_to_identity_on_axis() {
        let r = rotation();
        let r3 = r.mul(&r).mul(&r);
        // π-rotation about L fixes L and flips its orthogonal complement.
        let l = Vec3X::from_ints([-2, 1, 0]);
        assert_eq!(r3.apply(&l), l);
        let n = Vec3X::from_ints([0, 0, 1]);
        assert_eq!(r3.apply(&n), n.neg());
        assert_eq!(r.mul(&r.transpose()), Mat3X::identity());
    }

    #[test]
    fn small_region_count() {
        let s = make_skeleton();
        let spec = FieldSpec::new(rat(1, 4), 3).with_range(3, 3);
        let r = enumerate_region(&s, &spec, 3, 0).unwrap();
        assert_eq!(r.len(), 27);
        assert_eq!(r.lo, [0, 8, 0]);
    }

    #[test]
    fn leray_examples() {
        let v = Vec3X::from_ints([1, 0, 0]);
        assert_eq!(leray_project(&[0, 8, 0], &v).unwrap(), v);
        let p = leray_project(&[1, 1, 0], &v).unwrap();
        assert_eq!(p, Vec3X::new(QF15::from_rat(rat(1, 2)), QF15::from_rat(rat(-1, 2)), QF15::zero()));
        assert_eq!(leray_project(&[0, 0, 0], &v), Err(ConstructionError::ZeroFrequency));
    }

    #[test]
    fn scaled_leray_matches_exact() {
        let s = make_skeleton();
        for j in 0..3 {
            let den = 10i128.pow(j as u32);
            for i in 0..3 {
                let sv = ScaledVec::from_vec3x(&s.v[j][i], den);
                assert_eq!(sv.to_vec3x(), s.v[j][i]);
                for xi in [[3, -7, 11], [40, 2, 9], [-1, 0, 0]] {
                    let a = leray_project(&xi, &s.v[j][i]).unwrap();
                    let b = leray_project_scaled(&xi, &sv).unwrap().to_vec3x();
                    assert_eq!(a, b);
                    let f = leray_dir_f64(&xi, &sv);
                    let e = a.to_f64();
                    for k in 0..3 {
                        assert!((f[k] - e[k]).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn spec_guards() {
        assert!(FieldSpec::new(rat(1, 2), 4).validate().is_err());
        assert_eq!(default_q_min(&rat(1, 16)), 4);
        assert_eq!(default_q_min(&rat(1, 8)), 3);
        let s = FieldSpec::new(rat(1, 16), 8);
        assert!(s.validate().is_ok());
        let t: FieldSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, t);
        assert_eq!(s.content_hash(), t.content_hash());
    }

    #[test]
    fn sign_surd_cases() {
        assert_eq!(sign_surd(&rat(2, 1), &rat(-1, 1), 3), 1);
        assert_eq!(sign_surd(&rat(1, 1), &rat(-1, 1), 3), -1);
        assert_eq!(sign_surd(&rat(-3, 1), &rat(1, 1), 5), -1);
    }
}
