//! Small numeric helpers shared across modules.

use crate::Real;

/// Neumaier-compensated accumulator. One add costs four flops and keeps the
/// running sum exact up to one final rounding, so merge order perturbs
/// results only at the 1e-12 relative level demanded of the accumulators.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Kahan<T: Real> {
    sum: T,
    comp: T,
}

impl<T: Real> Kahan<T> {
    pub fn new() -> Self {
        Self { sum: T::zero(), comp: T::zero() }
    }

    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp = self.comp + ((self.sum - t) + x);
        } else {
            self.comp = self.comp + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    /// Field-wise addition of another accumulator (sum, then compensation).
    pub fn combine(&mut self, other: &Self) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator.
pub(crate) fn ksum<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let mut acc = Kahan::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Full width at half maximum of a profile sampled at uniform `pitch`,
/// assuming the peak sits at index 0 and the profile decays monotonically
/// near it. The half crossing is located by linear interpolation. Returns
/// `None` when the profile never falls below half its peak.
pub(crate) fn fwhm_from_profile<T: Real>(profile: &[T], pitch: T) -> Option<T> {
    if profile.is_empty() {
        return None;
    }
    let peak = profile[0];
    if !(peak > T::zero()) {
        return None;
    }
    let half = peak * T::of_f64(0.5);
    for j in 1..profile.len() {
        if profile[j] <= half {
            let prev = profile[j - 1];
            let frac = (prev - half) / (prev - profile[j]);
            let crossing = T::of_usize(j - 1) + frac;
            return Some(T::of_f64(2.0) * crossing * pitch);
        }
    }
    None
}

/// Sub-pixel peak location by quadratic interpolation around the maximum of
/// `values` sampled at `positions` (uniform spacing assumed near the peak).
pub(crate) fn parabolic_peak<T: Real>(positions: &[T], values: &[T]) -> Option<T> {
    debug_assert_eq!(positions.len(), values.len());
    if values.len() < 3 {
        return None;
    }
    let mut imax = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[imax] {
            imax = i;
        }
    }
    if imax == 0 || imax == values.len() - 1 {
        return Some(positions[imax]);
    }
    let (ym, y0, yp) = (values[imax - 1], values[imax], values[imax + 1]);
    let denom = ym - T::of_f64(2.0) * y0 + yp;
    if denom == T::zero() {
        return Some(positions[imax]);
    }
    let shift = T::of_f64(0.5) * (ym - yp) / denom;
    let step = positions[imax] - positions[imax - 1];
    Some(positions[imax] + shift * step)
}
