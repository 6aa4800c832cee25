use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Virtual time in seconds. Always finite and non-negative.
#[derive(Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Validated constructor; rejects NaN, infinities and negative values.
    pub fn from_secs(secs: f64) -> Result<SimTime, SimError> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(SimError::config(format!(
                "invalid time value {secs}: must be finite and >= 0"
            )));
        }
        Ok(SimTime(secs))
    }

    /// Unchecked constructor for values known to be valid (debug-asserted).
    pub fn secs_unchecked(secs: f64) -> SimTime {
        debug_assert!(secs.is_finite() && secs >= 0.0, "bad SimTime {secs}");
        SimTime(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: SimTime) -> SimTime {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }

    /// `self - other`, clamped at zero.
    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime((self.0 - other.0).max(0.0))
    }

    pub fn scale(self, factor: f64) -> SimTime {
        SimTime::secs_unchecked(self.0 * factor)
    }
}

impl Eq for SimTime {}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Invariant: never NaN, so total_cmp agrees with the naive order.
        self.0.total_cmp(&other.0)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime::secs_unchecked(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        debug_assert!(self.0 >= rhs.0, "SimTime underflow: {} - {}", self.0, rhs.0);
        SimTime::secs_unchecked((self.0 - rhs.0).max(0.0))
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.0)
    }
}

/// Fixed-point 9-decimal rendering, used by all exports so that equal
/// times always produce identical bytes.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_values() {
        assert!(SimTime::from_secs(f64::NAN).is_err());
        assert!(SimTime::from_secs(f64::INFINITY).is_err());
        assert!(SimTime::from_secs(-1.0).is_err());
        assert!(SimTime::from_secs(0.0).is_ok());
    }

    #[test]
    fn fixed_point_display() {
        let t = SimTime::from_secs(7.0).unwrap();
        assert_eq!(t.to_string(), "7.000000000");
    }

    #[test]
    fn saturating_sub_clamps() {
        let a = SimTime::from_secs(1.0).unwrap();
        let b = SimTime::from_secs(3.0).unwrap();
        assert_eq!(a.saturating_sub(b), SimTime::ZERO);
    }
}
