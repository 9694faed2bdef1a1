//! Pass/fail reports for inequalities checked on a finite window.

use serde::Serialize;

/// Relative tolerance used by every certificate.
pub const REL_TOL: f64 = 1e-8;
/// Absolute floor paired with [`REL_TOL`].
pub const ABS_FLOOR: f64 = 1e-12;

/// Slack-tolerant comparison `lhs <= rhs`.
pub fn within(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + REL_TOL) + ABS_FLOOR
}

/// Ratio `lhs / rhs`, zero when `lhs` is below the absolute floor.
pub fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs <= ABS_FLOOR {
        return 0.0;
    }
    lhs / rhs
}

/// Ratio `lhs / rhs` without any floor, `0 / 0 = 0`. For scale-covariant inequalities.
pub fn exact_ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        return 0.0;
    }
    lhs / rhs
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst attained value of the checked quantity. For inequalities this is `lhs / rhs`,
    /// for residual checks the largest residual; `detail` says which.
    pub worst: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_at: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    pub fn new(name: impl Into<String>, worst: f64, pass: bool) -> Self {
        Self { name: name.into(), worst, pass, worst_at: None, detail: None }
    }

    /// An inequality check whose pass criterion is `worst_ratio <= 1 + REL_TOL`.
    pub fn ratio(name: impl Into<String>, worst_ratio: f64) -> Self {
        let pass = worst_ratio.is_finite() && worst_ratio <= 1.0 + REL_TOL;
        Self::new(name, worst_ratio, pass).with_detail("worst lhs/rhs")
    }

    pub fn at(mut self, location: impl Into<String>) -> Self {
        self.worst_at = Some(location.into());
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Certificate {
    /// Human-readable description of the window the checks cover.
    pub checked_window: String,
    pub inequalities: Vec<Check>,
    /// Caveats attached by the producer, e.g. "approximate" adapted norms or finite horizons.
    pub flags: Vec<String>,
    pub overall: bool,
}

impl Certificate {
    pub fn new(checked_window: impl Into<String>) -> Self {
        Self { checked_window: checked_window.into(), inequalities: Vec::new(), flags: Vec::new(), overall: true }
    }

    pub fn push(&mut self, check: Check) {
        self.overall &= check.pass;
        self.inequalities.push(check);
    }

    pub fn flag(&mut self, flag: impl Into<String>) {
        let flag = flag.into();
        if !self.flags.contains(&flag) {
            self.flags.push(flag);
        }
    }

    pub fn merge(&mut self, other: Certificate) {
        for c in other.inequalities {
            self.push(c);
        }
        for f in other.flags {
            self.flag(f);
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.inequalities.iter().find(|c| c.name == name)
    }

    /// Largest `worst` over the checks whose pass criterion is a ratio.
    pub fn worst_ratio(&self) -> f64 {
        self.inequalities
            .iter()
            .filter(|c| c.detail.as_deref() == Some("worst lhs/rhs"))
            .map(|c| c.worst)
            .fold(0.0, f64::max)
    }
}

/// Running maximum that remembers where it was attained.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Worst<L: Copy> {
    pub value: f64,
    pub at: Option<L>,
}

impl<L: Copy> Worst<L> {
    pub fn new() -> Self {
        Self { value: 0.0, at: None }
    }

    pub fn update(&mut self, value: f64, at: L) {
        // NaN must dominate so that broken inputs never certify.
        let larger = value.is_nan() || value > self.value || (self.at.is_none() && value >= self.value);
        if larger && !self.value.is_nan() {
            self.value = value;
            self.at = Some(at);
        }
    }

    pub fn merge(self, other: Self) -> Self {
        if other.value.is_nan() || other.value > self.value {
            if self.value.is_nan() {
                self
            } else {
                other
            }
        } else {
            self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_is_conjunction() {
        let mut c = Certificate::new("test");
        c.push(Check::ratio("a", 1.0));
        assert!(c.overall);
        c.push(Check::ratio("b", 1.1));
        assert!(!c.overall);
        assert_eq!(c.worst_ratio(), 1.1);
    }

    #[test]
    fn nan_never_passes() {
        assert!(!Check::ratio("nan", f64::NAN).pass);
        let mut w = Worst::new();
        w.update(1.0, 0);
        w.update(f64::NAN, 1);
        w.update(5.0, 2);
        assert!(w.value.is_nan());
    }
}
