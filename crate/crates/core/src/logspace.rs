//! Log-domain arithmetic and a forward-mode dual number for directional
//! derivatives through forward-backward.

use std::ops::{Add, Sub};

#[inline]
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Scalar usable by the generic forward-backward pass.
pub(crate) trait LogScalar: Copy + Add<Output = Self> + Sub<Output = Self> {
    fn constant(v: f64) -> Self;
    fn lse(a: Self, b: Self) -> Self;
    fn exp(self) -> Self;
}

impl LogScalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn lse(a: Self, b: Self) -> Self {
        logsumexp2(a, b)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// `value + eps * tangent` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub value: f64,
    pub tangent: f64,
}

impl Dual {
    pub fn new(value: f64, tangent: f64) -> Self {
        Self { value, tangent }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.value + o.value, self.tangent + o.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.value - o.value, self.tangent - o.tangent)
    }
}

impl LogScalar for Dual {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn lse(a: Self, b: Self) -> Self {
        let value = logsumexp2(a.value, b.value);
        let wa = (a.value - value).exp();
        let wb = (b.value - value).exp();
        Dual::new(value, wa * a.tangent + wb * b.tangent)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        Dual::new(e, e * self.tangent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_when_safe() {
        let v = [0.5, 2.0, -1.0];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&v) - naive).abs() < 1e-14);
        assert!((logsumexp2(0.5, 2.0) - 2.201413277982752).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_large_and_empty() {
        assert!((logsumexp2(1234.0, 1232.0) - 1234.126928011043).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            logsumexp2(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
        assert_eq!(logsumexp2(f64::NEG_INFINITY, 3.0), 3.0);
    }

    #[test]
    fn dual_lse_derivative() {
        // d/dx log(e^x + e^2) at x = 0.5
        let x = Dual::new(0.5, 1.0);
        let y = Dual::lse(x, Dual::constant(2.0));
        let expected = 0.5f64.exp() / (0.5f64.exp() + 2.0f64.exp());
        assert!((y.tangent - expected).abs() < 1e-15);
    }
}
