/// Linear interpolation along one axis with align-corners mapping: the unit
/// interval spans cell centers `0` and `n - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AxisLerp {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    /// d(frac)/d(t); zero when the query was clamped or the axis has one cell.
    pub dfrac: f64,
}

impl AxisLerp {
    pub fn new(t: f64, n: usize) -> Self {
        debug_assert!(n >= 1);
        if n == 1 {
            return Self { lo: 0, hi: 0, frac: 0.0, dfrac: 0.0 };
        }
        let inside = (0.0..=1.0).contains(&t);
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let x = t * (n - 1) as f64;
        let lo = (x.floor() as usize).min(n - 2);
        Self {
            lo,
            hi: lo + 1,
            frac: x - lo as f64,
            dfrac: if inside { (n - 1) as f64 } else { 0.0 },
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 2] {
        [1.0 - self.frac, self.frac]
    }

    #[inline]
    pub fn index(&self, corner: usize) -> usize {
        if corner == 0 {
            self.lo
        } else {
            self.hi
        }
    }

    /// Interpolates a 1D vector. Equal endpoints reproduce the value exactly.
    #[inline]
    pub fn lerp(&self, values: &[f64]) -> f64 {
        let a = values[self.lo];
        a + self.frac * (values[self.hi] - a)
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}
