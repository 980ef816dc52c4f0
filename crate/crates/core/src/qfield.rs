//! Exact arithmetic in the real quadratic field Q(√15).
//!
//! Numbers are stored as `a + b·√15` with `a`, `b` reduced rationals. Sign and
//! floor are decided by integer case analysis only; floating point is used
//! solely when a caller explicitly asks for an approximation.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Reduced rational with arbitrary-precision numerator and positive denominator.
pub type Rat = BigRational;

/// Build a rational from small integers.
pub fn rat(num: i64, den: i64) -> Rat {
    Rat::new(BigInt::from(num), BigInt::from(den))
}

/// Parse `"p/q"`, `"p"` or a terminating decimal such as `"0.0625"` exactly.
pub fn parse_rat(s: &str) -> Option<Rat> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n.trim().parse().ok()?;
        let d: BigInt = d.trim().parse().ok()?;
        if d.is_zero() {
            return None;
        }
        return Some(Rat::new(n, d));
    }
    if let Some((ip, fp)) = s.split_once('.') {
        if fp.is_empty() || !fp.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let neg = ip.starts_with('-');
        let digits = format!("{}{}", ip.trim_start_matches(['-', '+']), fp);
        let n: BigInt = digits.parse().ok()?;
        let d = num_traits::pow(BigInt::from(10), fp.len());
        let r = Rat::new(n, d);
        return Some(if neg { -r } else { r });
    }
    let n: BigInt = s.parse().ok()?;
    Some(Rat::from_integer(n))
}

/// The number `a + b·√15`.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct QF15 {
    pub a: Rat,
    pub b: Rat,
}

impl QF15 {
    pub fn new(a: Rat, b: Rat) -> Self {
        QF15 { a, b }
    }

    pub fn from_rat(a: Rat) -> Self {
        QF15 { a, b: Rat::zero() }
    }

    pub fn from_int(n: i64) -> Self {
        Self::from_rat(Rat::from_integer(BigInt::from(n)))
    }

    /// `√15` itself.
    pub fn sqrt15() -> Self {
        QF15 { a: Rat::zero(), b: Rat::one() }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn one() -> Self {
        Self::from_int(1)
    }

    pub fn is_zero(&self) -> bool {
        self.a.is_zero() && self.b.is_zero()
    }

    /// The rational value, if the irrational part vanishes.
    pub fn as_rat(&self) -> Option<&Rat> {
        self.b.is_zero().then_some(&self.a)
    }

    pub fn scale(&self, r: &Rat) -> Self {
        QF15 { a: &self.a * r, b: &self.b * r }
    }

    /// Galois conjugate `a − b√15`.
    pub fn conj(&self) -> Self {
        QF15 { a: self.a.clone(), b: -&self.b }
    }

    /// Field norm `a² − 15b²`.
    pub fn norm(&self) -> Rat {
        &self.a * &self.a - rat(15, 1) * &self.b * &self.b
    }

    pub fn inv(&self) -> Option<Self> {
        if self.is_zero() {
            return None;
        }
        let n = self.norm();
        Some(QF15 { a: &self.a / &n, b: -&self.b / &n })
    }

    pub fn signum(&self) -> i32 {
        qf_sign(self)
    }

    pub fn floor(&self) -> BigInt {
        qf_floor(self)
    }

    pub fn ceil(&self) -> BigInt {
        -qf_floor(&-self.clone())
    }

    pub fn to_f64(&self) -> f64 {
        qf_to_float(self, 53)
    }
}

impl fmt::Display for QF15 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.b.is_zero() {
            write!(f, "{}", self.a)
        } else {
            write!(f, "{} + {}·√15", self.a, self.b)
        }
    }
}

impl PartialOrd for QF15 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QF15 {
    fn cmp(&self, other: &Self) -> Ordering {
        qf_sign(&(self - other)).cmp(&0)
    }
}

pub fn qf_add(u: &QF15, v: &QF15) -> QF15 {
    QF15 { a: &u.a + &v.a, b: &u.b + &v.b }
}

pub fn qf_mul(u: &QF15, v: &QF15) -> QF15 {
    let fifteen = rat(15, 1);
    QF15 {
        a: &u.a * &v.a + fifteen * &u.b * &v.b,
        b: &u.a * &v.b + &u.b * &v.a,
    }
}

pub fn qf_neg(u: &QF15) -> QF15 {
    QF15 { a: -&u.a, b: -&u.b }
}

fn rat_sign(r: &Rat) -> i32 {
    match r.numer().sign() {
        Sign::Minus => -1,
        Sign::NoSign => 0,
        Sign::Plus => 1,
    }
}

/// Exact sign of `a + b√15`.
pub fn qf_sign(u: &QF15) -> i32 {
    let sa = rat_sign(&u.a);
    let sb = rat_sign(&u.b);
    if sa == sb || sb == 0 {
        return sa;
    }
    if sa == 0 {
        return sb;
    }
    // Opposite signs: the larger of a² and 15b² wins.
    let a2 = &u.a * &u.a;
    let b2 = rat(15, 1) * &u.b * &u.b;
    match a2.cmp(&b2) {
        Ordering::Greater => sa,
        Ordering::Less => sb,
        Ordering::Equal => 0,
    }
}

/// Greatest integer `n` with `n ≤ u`.
pub fn qf_floor(u: &QF15) -> BigInt {
    // Start from an integer lower bound: floor(a) + floor(b√15) with b√15 bracketed
    // by integer square roots, then correct with exact comparisons.
    let fa = u.a.floor().to_integer();
    let b = &u.b;
    let bsq15 = b * b * rat(15, 1);
    // |b|√15 = sqrt(15 b²); isqrt of floor gives a lower bound.
    let root = bsq15.floor().to_integer().sqrt();
    let fb = if b.is_negative() { -root - BigInt::one() } else { root };
    let mut n = fa + fb - BigInt::one();
    let as_qf = |n: &BigInt| QF15::from_rat(Rat::from_integer(n.clone()));
    while qf_sign(&(u - &as_qf(&n))) < 0 {
        n -= 1;
    }
    loop {
        let next = &n + BigInt::one();
        if qf_sign(&(u - &as_qf(&next))) >= 0 {
            n = next;
        } else {
            break;
        }
    }
    n
}

/// Approximation of `u` rounded to `precision` significant bits and returned as
/// `f64`. Precisions above 53 only affect the internal working accuracy; the
/// result is the f64 nearest to a value within one unit at that precision.
pub fn qf_to_float(u: &QF15, precision: u32) -> f64 {
    assert!(precision >= 53, "precision must be at least 53 bits");
    if u.b.is_zero() {
        return u.a.to_f64().unwrap_or(f64::NAN);
    }
    let mut shift = precision as usize + 16;
    loop {
        let scale = BigInt::one() << shift;
        // a·2^s rounded down, b√15·2^s via integer square root.
        let a_scaled = (&u.a * Rat::from_integer(scale.clone())).floor().to_integer();
        let b = &u.b;
        let b15 = b * b * rat(15, 1) * Rat::from_integer(&scale * &scale);
        let root = b15.floor().to_integer().sqrt();
        let b_scaled = if b.is_negative() { -root } else { root };
        let total = a_scaled + b_scaled;
        if total.bits() as usize > precision as usize + 8 || shift > 20_000 {
            let r = Rat::new(total, scale);
            return r.to_f64().unwrap_or(f64::NAN);
        }
        if total.is_zero() && qf_sign(u) == 0 {
            return 0.0;
        }
        shift *= 2;
    }
}

impl Add for &QF15 {
    type Output = QF15;
    fn add(self, o: &QF15) -> QF15 {
        qf_add(self, o)
    }
}

impl Sub for &QF15 {
    type Output = QF15;
    fn sub(self, o: &QF15) -> QF15 {
        QF15 { a: &self.a - &o.a, b: &self.b - &o.b }
    }
}

impl Mul for &QF15 {
    type Output = QF15;
    fn mul(self, o: &QF15) -> QF15 {
        qf_mul(self, o)
    }
}

impl Neg for QF15 {
    type Output = QF15;
    fn neg(self) -> QF15 {
        qf_neg(&self)
    }
}

impl Add for QF15 {
    type Output = QF15;
    fn add(self, o: QF15) -> QF15 {
        qf_add(&self, &o)
    }
}

impl Sub for QF15 {
    type Output = QF15;
    fn sub(self, o: QF15) -> QF15 {
        &self - &o
    }
}

impl Mul for QF15 {
    type Output = QF15;
    fn mul(self, o: QF15) -> QF15 {
        qf_mul(&self, &o)
    }
}

/// A vector in Q(√15)³.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct Vec3X {
    pub x: QF15,
    pub y: QF15,
    pub z: QF15,
}

impl Vec3X {
    pub fn new(x: QF15, y: QF15, z: QF15) -> Self {
        Vec3X { x, y, z }
    }

    pub fn from_ints(v: [i64; 3]) -> Self {
        Vec3X::new(QF15::from_int(v[0]), QF15::from_int(v[1]), QF15::from_int(v[2]))
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn comps(&self) -> [&QF15; 3] {
        [&self.x, &self.y, &self.z]
    }

    pub fn from_array(c: [QF15; 3]) -> Self {
        let [x, y, z] = c;
        Vec3X { x, y, z }
    }

    pub fn dot(&self, o: &Vec3X) -> QF15 {
        &(&(&self.x * &o.x) + &(&self.y * &o.y)) + &(&self.z * &o.z)
    }

    pub fn norm2(&self) -> QF15 {
        self.dot(self)
    }

    pub fn add(&self, o: &Vec3X) -> Vec3X {
        Vec3X::new(&self.x + &o.x, &self.y + &o.y, &self.z + &o.z)
    }

    pub fn sub(&self, o: &Vec3X) -> Vec3X {
        Vec3X::new(&self.x - &o.x, &self.y - &o.y, &self.z - &o.z)
    }

    pub fn scale(&self, s: &QF15) -> Vec3X {
        Vec3X::new(&self.x * s, &self.y * s, &self.z * s)
    }

    pub fn scale_rat(&self, r: &Rat) -> Vec3X {
        Vec3X::new(self.x.scale(r), self.y.scale(r), self.z.scale(r))
    }

    pub fn neg(&self) -> Vec3X {
        Vec3X::new(-self.x.clone(), -self.y.clone(), -self.z.clone())
    }

    pub fn is_zero(&self) -> bool {
        self.x.is_zero() && self.y.is_zero() && self.z.is_zero()
    }

    pub fn to_f64(&self) -> [f64; 3] {
        [self.x.to_f64(), self.y.to_f64(), self.z.to_f64()]
    }
}

/// 3×3 matrix over Q(√15), row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Mat3X(pub [[QF15; 3]; 3]);

impl Mat3X {
    pub fn identity() -> Self {
        let z = QF15::zero;
        let o = QF15::one;
        Mat3X([[o(), z(), z()], [z(), o(), z()], [z(), z(), o()]])
    }

    pub fn apply(&self, v: &Vec3X) -> Vec3X {
        let c = v.comps();
        let row = |r: &[QF15; 3]| &(&(&r[0] * c[0]) + &(&r[1] * c[1])) + &(&r[2] * c[2]);
        Vec3X::new(row(&self.0[0]), row(&self.0[1]), row(&self.0[2]))
    }

    pub fn mul(&self, o: &Mat3X) -> Mat3X {
        let mut out = Mat3X::identity();
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = QF15::zero();
                for k in 0..3 {
                    acc = &acc + &(&self.0[r][k] * &o.0[k][c]);
                }
                out.0[r][c] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat3X {
        let m = &self.0;
        Mat3X([
            [m[0][0].clone(), m[1][0].clone(), m[2][0].clone()],
            [m[0][1].clone(), m[1][1].clone(), m[2][1].clone()],
            [m[0][2].clone(), m[1][2].clone(), m[2][2].clone()],
        ])
    }
}
