//! Forward-mode differentiation scalars.
//!
//! Two building blocks are combined throughout the transform machinery:
//!
//! * [`MultiDual`] — a value carrying `K` simultaneous first-order
//!   derivatives (vector forward mode).
//! * [`Jet`] — a truncated Taylor polynomial with `M` coefficients over any
//!   [`Scalar`]. Propagating the plant flow as a jet yields Lie derivatives
//!   of outputs as scaled Taylor coefficients; running the same propagation
//!   over `MultiDual` coefficients yields their gradients and directional
//!   (mixed) derivatives in a single pass.

use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic scalar usable in the plant model and the jet engine.
///
/// `abs` uses `sign(0) = 0`, matching the friction term's continuous
/// derivative `d(w|w|)/dw = 2|w|` at the origin.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn from_f64(c: f64) -> Self;
    /// Leading (value) part, used for branching and convergence checks.
    fn value(&self) -> f64;
    /// Multiply by a plain constant.
    fn scale(self, c: f64) -> Self;
    /// Add a plain constant.
    fn shift(self, c: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn from_f64(c: f64) -> Self {
        c
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
    #[inline]
    fn shift(self, c: f64) -> Self {
        self + c
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// Value plus `K` first-order derivative components over any inner scalar;
/// nesting two levels yields exact second-order mixed derivatives.
#[derive(Clone, Copy, Debug)]
pub struct MultiDual<T: Scalar, const K: usize> {
    pub v: T,
    pub d: [T; K],
}

/// First-order forward-mode scalar over `f64`.
pub type Dual<const K: usize> = MultiDual<f64, K>;

impl<T: Scalar, const K: usize> MultiDual<T, K> {
    #[inline]
    pub fn constant(v: T) -> Self {
        Self { v, d: [T::zero(); K] }
    }

    /// Seed with value `v` and derivative direction `d`.
    #[inline]
    pub fn seeded(v: T, d: [T; K]) -> Self {
        Self { v, d }
    }

    /// Seed the `j`-th unit direction.
    #[inline]
    pub fn variable(v: T, j: usize) -> Self {
        let mut d = [T::zero(); K];
        d[j] = T::from_f64(1.0);
        Self { v, d }
    }
}

impl<T: Scalar, const K: usize> Add for MultiDual<T, K> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d.iter()) {
            *a = *a + *b;
        }
        Self { v: self.v + rhs.v, d }
    }
}

impl<T: Scalar, const K: usize> Sub for MultiDual<T, K> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d.iter()) {
            *a = *a - *b;
        }
        Self { v: self.v - rhs.v, d }
    }
}

impl<T: Scalar, const K: usize> Mul for MultiDual<T, K> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [T::zero(); K];
        for i in 0..K {
            d[i] = self.v * rhs.d[i] + self.d[i] * rhs.v;
        }
        Self { v: self.v * rhs.v, d }
    }
}

impl<T: Scalar, const K: usize> Neg for MultiDual<T, K> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Self { v: -self.v, d }
    }
}

impl<T: Scalar, const K: usize> Scalar for MultiDual<T, K> {
    #[inline]
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    #[inline]
    fn from_f64(c: f64) -> Self {
        Self::constant(T::from_f64(c))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v.value()
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = a.scale(c);
        }
        Self { v: self.v.scale(c), d }
    }
    #[inline]
    fn shift(self, c: f64) -> Self {
        Self { v: self.v.shift(c), d: self.d }
    }
    #[inline]
    fn sin(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = *a * c;
        }
        Self { v: s, d }
    }
    #[inline]
    fn cos(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -(*a * s);
        }
        Self { v: c, d }
    }
    #[inline]
    fn abs(self) -> Self {
        let sg = sign0(self.v.value());
        self.scale(sg)
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Truncated Taylor polynomial with `M` coefficients (degree `M - 1`) over a
/// [`Scalar`] coefficient type.
#[derive(Clone, Copy, Debug)]
pub struct Jet<T: Scalar, const M: usize> {
    pub c: [T; M],
}

impl<T: Scalar, const M: usize> Jet<T, M> {
    #[inline]
    pub fn constant(v: T) -> Self {
        let mut c = [T::zero(); M];
        c[0] = v;
        Self { c }
    }
}

impl<T: Scalar, const M: usize> Add for Jet<T, M> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut c = self.c;
        for (a, b) in c.iter_mut().zip(rhs.c.iter()) {
            *a = *a + *b;
        }
        Self { c }
    }
}

impl<T: Scalar, const M: usize> Sub for Jet<T, M> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut c = self.c;
        for (a, b) in c.iter_mut().zip(rhs.c.iter()) {
            *a = *a - *b;
        }
        Self { c }
    }
}

impl<T: Scalar, const M: usize> Mul for Jet<T, M> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut c = [T::zero(); M];
        for k in 0..M {
            let mut acc = T::zero();
            for i in 0..=k {
                acc = acc + self.c[i] * rhs.c[k - i];
            }
            c[k] = acc;
        }
        Self { c }
    }
}

impl<T: Scalar, const M: usize> Neg for Jet<T, M> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut c = self.c;
        for a in c.iter_mut() {
            *a = -*a;
        }
        Self { c }
    }
}

impl<T: Scalar, const M: usize> Scalar for Jet<T, M> {
    #[inline]
    fn zero() -> Self {
        Self { c: [T::zero(); M] }
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.c[0].value()
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        let mut c = self.c;
        for a in c.iter_mut() {
            *a = a.scale(k);
        }
        Self { c }
    }
    #[inline]
    fn shift(self, k: f64) -> Self {
        let mut c = self.c;
        c[0] = c[0].shift(k);
        Self { c }
    }
    fn sin(self) -> Self {
        self.sin_cos().0
    }
    fn cos(self) -> Self {
        self.sin_cos().1
    }
    /// `sign(a_0)·a`; exact away from a leading-coefficient zero crossing.
    fn abs(self) -> Self {
        self.scale(sign0(self.c[0].value()))
    }
}

impl<T: Scalar, const M: usize> Jet<T, M> {
    /// Composed sine and cosine by the standard Taylor recurrence
    /// `k s_k = Σ_{j=1..k} j a_j c_{k-j}`, `k c_k = -Σ_{j=1..k} j a_j s_{k-j}`.
    pub fn sin_cos(self) -> (Self, Self) {
        let mut s = [T::zero(); M];
        let mut c = [T::zero(); M];
        s[0] = self.c[0].sin();
        c[0] = self.c[0].cos();
        for k in 1..M {
            let mut sa = T::zero();
            let mut ca = T::zero();
            for j in 1..=k {
                let ja = self.c[j].scale(j as f64);
                sa = sa + ja * c[k - j];
                ca = ca + ja * s[k - j];
            }
            s[k] = sa.scale(1.0 / k as f64);
            c[k] = -ca.scale(1.0 / k as f64);
        }
        (Self { c: s }, Self { c: c })
    }
}
