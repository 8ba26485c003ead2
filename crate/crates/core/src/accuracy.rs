//! Exact accuracies. Comparisons never go through floating point so that
//! tie-breaking in candidate selection is independent of rounding.

use std::cmp::Ordering;
use std::fmt;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

/// `correct / total` kept unreduced so the denominator is always the number
/// of examples that were scored.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        assert!(total > 0, "accuracy over zero examples");
        assert!(correct <= total, "more correct answers than examples");
        Self { correct, total }
    }

    pub fn zero() -> Self {
        Self { correct: 0, total: 1 }
    }

    pub fn ratio(self) -> Rational64 {
        Rational64::new(self.correct as i64, self.total as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn is_perfect(self) -> bool {
        self.correct == self.total
    }

    /// `correct/total = 0.7500`
    pub fn display_fraction(self) -> String {
        format!("{}/{} = {:.4}", self.correct, self.total, self.as_f64())
    }
}

impl PartialEq for Accuracy {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Accuracy {}

impl PartialOrd for Accuracy {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Accuracy {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.correct as u128 * other.total as u128;
        let rhs = other.correct as u128 * self.total as u128;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.as_f64())
    }
}

/// Formats a rational as a signed decimal with four places, e.g. `+0.0400`.
pub fn format_signed(r: Rational64) -> String {
    let scaled = r * Rational64::from_integer(10_000);
    // round half away from zero
    let num = *scaled.numer() as i128;
    let den = *scaled.denom() as i128;
    let q = (2 * num.abs() + den) / (2 * den);
    let sign = if num < 0 { '-' } else { '+' };
    format!("{sign}{}.{:04}", q / 10_000, q % 10_000)
}
