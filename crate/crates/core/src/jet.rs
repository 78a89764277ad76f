//! Second-order forward-mode jets in two variables.
//!
//! Used for the closed-form reference metric, whose derivatives must never be
//! finite-differenced near the boundary.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Value, gradient and Hessian `[xx, xy, yy]` of a function of `(x1, x2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Jet {
    pub v: f64,
    pub d: [f64; 2],
    pub h: [f64; 3],
}

impl Jet {
    pub const fn cst(v: f64) -> Self {
        Jet { v, d: [0.0; 2], h: [0.0; 3] }
    }

    /// `<a, x> + b` evaluated at `x`.
    pub fn affine(a: [f64; 2], b: f64, x: [f64; 2]) -> Self {
        Jet { v: a[0] * x[0] + a[1] * x[1] + b, d: a, h: [0.0; 3] }
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        let r2 = r * r;
        let r3 = r2 * r;
        Jet {
            v: r,
            d: [-self.d[0] * r2, -self.d[1] * r2],
            h: [
                -self.h[0] * r2 + 2.0 * self.d[0] * self.d[0] * r3,
                -self.h[1] * r2 + 2.0 * self.d[0] * self.d[1] * r3,
                -self.h[2] * r2 + 2.0 * self.d[1] * self.d[1] * r3,
            ],
        }
    }

    pub fn scale(self, s: f64) -> Self {
        Jet {
            v: self.v * s,
            d: [self.d[0] * s, self.d[1] * s],
            h: [self.h[0] * s, self.h[1] * s, self.h[2] * s],
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1]],
            h: [self.h[0] + o.h[0], self.h[1] + o.h[1], self.h[2] + o.h[2]],
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let (a, b) = (self, o);
        Jet {
            v: a.v * b.v,
            d: [a.d[0] * b.v + a.v * b.d[0], a.d[1] * b.v + a.v * b.d[1]],
            h: [
                a.h[0] * b.v + 2.0 * a.d[0] * b.d[0] + a.v * b.h[0],
                a.h[1] * b.v + a.d[0] * b.d[1] + a.d[1] * b.d[0] + a.v * b.h[1],
                a.h[2] * b.v + 2.0 * a.d[1] * b.d[1] + a.v * b.h[2],
            ],
        }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        self.scale(s)
    }
}

impl Div for Jet {
    type Output = Jet;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}
