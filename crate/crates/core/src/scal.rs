//! A minimal scalar abstraction so the approximation recursions are written
//! once and evaluated either on plain `f64` or on a forward-mode dual number
//! that carries partial derivatives with respect to the orthant-problem
//! surface (the K upper limits followed by the K(K-1)/2 upper-triangle
//! correlations).

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::gauss;

/// Fixed gradient width: K + K(K-1)/2 for K up to 8.
pub(crate) const AD_LANES: usize = 36;

/// Lane index of the correlation entry (i, j), i < j, for dimension k.
pub(crate) fn rho_lane(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(i < j && j < k);
    k + i * (2 * k - i - 1) / 2 + (j - i - 1)
}

pub(crate) trait Scal:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(c: f64) -> Self;
    fn fval(self) -> f64;
    fn sqrt(self) -> Self;
    fn norm_pdf(self) -> Self;
    fn norm_cdf(self) -> Self;
    fn mills(self) -> Self;
    fn bvn(b1: Self, b2: Self, rho: Self) -> Self;
    /// max(self, floor) with zero derivative on the clamped branch.
    fn clamp_floor(self, floor: f64) -> Self;
}

impl Scal for f64 {
    fn cst(c: f64) -> Self {
        c
    }
    fn fval(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn norm_pdf(self) -> Self {
        gauss::std_normal_pdf(self)
    }
    fn norm_cdf(self) -> Self {
        gauss::std_normal_cdf(self)
    }
    fn mills(self) -> Self {
        gauss::mills_ratio(self)
    }
    fn bvn(b1: Self, b2: Self, rho: Self) -> Self {
        gauss::bvn_cdf_raw(b1, b2, rho)
    }
    fn clamp_floor(self, floor: f64) -> Self {
        self.max(floor)
    }
}

/// Forward-mode dual scalar with a fixed-width gradient.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ad {
    pub v: f64,
    pub g: [f64; AD_LANES],
}

impl Ad {
    pub fn var(v: f64, lane: usize) -> Self {
        let mut g = [0.0; AD_LANES];
        g[lane] = 1.0;
        Ad { v, g }
    }

    fn lift(v: f64, dv: f64, x: &Ad) -> Self {
        let mut g = [0.0; AD_LANES];
        for (o, &xi) in g.iter_mut().zip(x.g.iter()) {
            *o = dv * xi;
        }
        Ad { v, g }
    }
}

impl Add for Ad {
    type Output = Ad;
    fn add(self, o: Ad) -> Ad {
        let mut g = self.g;
        for (a, b) in g.iter_mut().zip(o.g.iter()) {
            *a += b;
        }
        Ad { v: self.v + o.v, g }
    }
}

impl Sub for Ad {
    type Output = Ad;
    fn sub(self, o: Ad) -> Ad {
        let mut g = self.g;
        for (a, b) in g.iter_mut().zip(o.g.iter()) {
            *a -= b;
        }
        Ad { v: self.v - o.v, g }
    }
}

impl Mul for Ad {
    type Output = Ad;
    fn mul(self, o: Ad) -> Ad {
        let mut g = [0.0; AD_LANES];
        for i in 0..AD_LANES {
            g[i] = self.g[i] * o.v + o.g[i] * self.v;
        }
        Ad { v: self.v * o.v, g }
    }
}

impl Div for Ad {
    type Output = Ad;
    fn div(self, o: Ad) -> Ad {
        let v = self.v / o.v;
        let mut g = [0.0; AD_LANES];
        for i in 0..AD_LANES {
            g[i] = (self.g[i] - v * o.g[i]) / o.v;
        }
        Ad { v, g }
    }
}

impl Neg for Ad {
    type Output = Ad;
    fn neg(self) -> Ad {
        let mut g = self.g;
        for a in g.iter_mut() {
            *a = -*a;
        }
        Ad { v: -self.v, g }
    }
}

impl Scal for Ad {
    fn cst(c: f64) -> Self {
        Ad {
            v: c,
            g: [0.0; AD_LANES],
        }
    }

    fn fval(self) -> f64 {
        self.v
    }

    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Ad::lift(r, 0.5 / r, &self)
    }

    fn norm_pdf(self) -> Self {
        let p = gauss::std_normal_pdf(self.v);
        Ad::lift(p, -self.v * p, &self)
    }

    fn norm_cdf(self) -> Self {
        Ad::lift(
            gauss::std_normal_cdf(self.v),
            gauss::std_normal_pdf(self.v),
            &self,
        )
    }

    fn mills(self) -> Self {
        let a = gauss::mills_ratio(self.v);
        Ad::lift(a, gauss::mills_ratio_deriv(self.v, a), &self)
    }

    fn bvn(b1: Self, b2: Self, rho: Self) -> Self {
        let v = gauss::bvn_cdf_raw(b1.v, b2.v, rho.v);
        let s = (1.0 - rho.v * rho.v).max(1e-300).sqrt();
        // d/db1 = phi(b1) Phi((b2 - rho b1)/s); infinite limits contribute 0
        let d1 = if b1.v.is_finite() && b2.v.is_finite() {
            gauss::std_normal_pdf(b1.v) * gauss::std_normal_cdf((b2.v - rho.v * b1.v) / s)
        } else if b1.v.is_finite() {
            // b2 = +inf: reduces to the univariate cdf in b1
            gauss::std_normal_pdf(b1.v)
        } else {
            0.0
        };
        let d2 = if b1.v.is_finite() && b2.v.is_finite() {
            gauss::std_normal_pdf(b2.v) * gauss::std_normal_cdf((b1.v - rho.v * b2.v) / s)
        } else if b2.v.is_finite() {
            gauss::std_normal_pdf(b2.v)
        } else {
            0.0
        };
        // Plackett: d/drho = bivariate density at the corner
        let dr = if b1.v.is_finite() && b2.v.is_finite() {
            gauss::bvn_pdf(b1.v, b2.v, rho.v)
        } else {
            0.0
        };
        let mut g = [0.0; AD_LANES];
        for i in 0..AD_LANES {
            g[i] = d1 * b1.g[i] + d2 * b2.g[i] + dr * rho.g[i];
        }
        Ad { v, g }
    }

    fn clamp_floor(self, floor: f64) -> Self {
        if self.v < floor {
            Ad::cst(floor)
        } else {
            self
        }
    }
}
