//! Double-double arithmetic: unevaluated sums of two `f64`s giving roughly
//! 32 significant digits. Used as an independent high-precision reference
//! when validating quantities that live near the unit roundoff.

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

#[allow(clippy::should_implement_trait)] // named like the operators they mirror
impl DoubleDouble {
    pub const ZERO: DoubleDouble = DoubleDouble { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi
    }

    pub fn add(self, other: DoubleDouble) -> DoubleDouble {
        let (s1, s2) = two_sum(self.hi, other.hi);
        let (t1, t2) = two_sum(self.lo, other.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        DoubleDouble { hi, lo }
    }

    pub fn neg(self) -> DoubleDouble {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, other: DoubleDouble) -> DoubleDouble {
        self.add(other.neg())
    }

    pub fn mul(self, other: DoubleDouble) -> DoubleDouble {
        let (p1, p2) = two_prod(self.hi, other.hi);
        let p2 = p2 + self.hi * other.lo + self.lo * other.hi;
        let (hi, lo) = quick_two_sum(p1, p2);
        DoubleDouble { hi, lo }
    }

    pub fn div(self, other: DoubleDouble) -> DoubleDouble {
        let q1 = self.hi / other.hi;
        let r = self.sub(other.mul(DoubleDouble::from_f64(q1)));
        let q2 = r.hi / other.hi;
        let r = r.sub(other.mul(DoubleDouble::from_f64(q2)));
        let q3 = r.hi / other.hi;
        let (s, e) = quick_two_sum(q1, q2);
        let (hi, lo) = quick_two_sum(s, e + q3);
        DoubleDouble { hi, lo }
    }

    pub fn abs(self) -> DoubleDouble {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            self.neg()
        } else {
            self
        }
    }

    /// Square root by Newton refinement of the f64 estimate.
    pub fn sqrt(self) -> DoubleDouble {
        assert!(self.hi >= 0.0, "sqrt of negative double-double");
        if self.hi == 0.0 {
            return DoubleDouble::ZERO;
        }
        let mut y = DoubleDouble::from_f64(self.hi.sqrt());
        let half = DoubleDouble::from_f64(0.5);
        for _ in 0..2 {
            // y <- (y + self / y) / 2
            y = y.add(self.div(y)).mul(half);
        }
        y
    }

    /// Exact product of two f64 values as a double-double.
    pub fn prod(a: f64, b: f64) -> DoubleDouble {
        let (hi, lo) = two_prod(a, b);
        DoubleDouble { hi, lo }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_two_squared_recovers_two() {
        let s = DoubleDouble::from_f64(2.0).sqrt();
        let back = s.mul(s).sub(DoubleDouble::from_f64(2.0));
        assert!(back.to_f64().abs() < 1e-30, "residual {:e}", back.to_f64());
    }

    #[test]
    fn division_round_trip() {
        let a = DoubleDouble::from_f64(1.0);
        let b = DoubleDouble::from_f64(3.0);
        let q = a.div(b);
        let back = q.mul(b).sub(a);
        assert!(back.to_f64().abs() < 1e-31);
    }

    #[test]
    fn captures_sub_ulp_structure() {
        // (1 + 2^-60) - 1 is not representable in f64 but survives in dd
        let tiny = 2f64.powi(-60);
        let x = DoubleDouble::from_f64(1.0).add(DoubleDouble::from_f64(tiny));
        let d = x.sub(DoubleDouble::from_f64(1.0));
        assert_eq!(d.to_f64(), tiny);
    }

    #[test]
    fn exact_product() {
        let x = 1.0 + 2f64.powi(-30);
        let p = DoubleDouble::prod(x, x);
        // x^2 = 1 + 2^-29 + 2^-60 exactly
        let expected = DoubleDouble::from_f64(1.0 + 2f64.powi(-29))
            .add(DoubleDouble::from_f64(2f64.powi(-60)));
        assert_eq!(p, expected);
    }
}
