use serde::{Deserialize, Serialize};

use crate::error::{GrfError, Result};

/// Per-training-sample forest weights `α_i(x)`: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wrap raw weights, rescaling them to sum to one.
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GrfError::InvalidData(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(GrfError::EmptySupport);
        }
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(WeightVector(weights))
    }

    /// Weight `1/|members|` on each member, zero elsewhere.
    pub fn uniform(n: usize, members: &[usize]) -> Result<Self> {
        let mut w = vec![0.0; n];
        for &i in members {
            w[i] += 1.0;
        }
        Self::new(w)
    }

    /// Trusted constructor for weights already known to be normalized.
    pub(crate) fn from_normalized(weights: Vec<f64>) -> Self {
        WeightVector(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// `(index, weight)` for every strictly positive weight.
    pub fn support(&self) -> Vec<(usize, f64)> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, w)| (i, *w))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_and_rejects_bad_input() {
        let w = WeightVector::new(vec![1.0, 3.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.75]);
        assert!(matches!(
            WeightVector::new(vec![0.0, 0.0]),
            Err(GrfError::EmptySupport)
        ));
        assert!(WeightVector::new(vec![-1.0, 2.0]).is_err());
        let u = WeightVector::uniform(4, &[2, 3]).unwrap();
        assert_eq!(u.as_slice(), &[0.0, 0.0, 0.5, 0.5]);
        assert_eq!(u.support(), vec![(2, 0.5), (3, 0.5)]);
    }
}
