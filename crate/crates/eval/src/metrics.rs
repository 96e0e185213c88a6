//! Summary statistics for proxy runs and annotated filtering outcomes.

use serde::{Deserialize, Serialize};
use veil_core::Scalar;

/// Filtering outcomes against human annotation: positive means "filtered".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self { tp, fn_, fp, tn }
    }

    /// Tallies `(predicted, actual)` pairs.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        outcomes.into_iter().fold(Self::default(), |mut m, (predicted, actual)| {
            match (predicted, actual) {
                (true, true) => m.tp += 1,
                (false, true) => m.fn_ += 1,
                (true, false) => m.fp += 1,
                (false, false) => m.tn += 1,
            }
            m
        })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// `tp / (tp + fp)`, absent when nothing was predicted positive.
    pub fn precision<T: Scalar>(&self) -> Option<T> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `tp / (tp + fn)`, absent when nothing is actually positive.
    pub fn recall<T: Scalar>(&self) -> Option<T> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio<T: Scalar>(num: u64, den: u64) -> Option<T> {
    (den > 0).then(|| T::of(num as f64) / T::of(den as f64))
}

pub fn confusion_metrics<T: Scalar>(matrix: &ConfusionMatrix) -> (Option<T>, Option<T>) {
    (matrix.precision(), matrix.recall())
}

/// Mean of a boolean sequence, absent when empty.
pub fn mean_correct<T: Scalar>(correct: impl IntoIterator<Item = bool>) -> Option<T> {
    let (hits, n) = correct.into_iter().fold((0u64, 0u64), |(h, n), c| (h + u64::from(c), n + 1));
    ratio(hits, n)
}
