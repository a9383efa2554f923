use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Empirical CDF of localization errors, with tied samples collapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfCurve {
    pub errors: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CdfPoint {
    error_m: f64,
    probability: f64,
}

/// Builds the empirical CDF. Errors must be finite and non-negative.
pub fn make_cdf(errors: &[f64]) -> Result<CdfCurve> {
    if errors.is_empty() {
        return Err(Error::invalid("error samples", "empty"));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::invalid(
            "error samples",
            "must be finite and non-negative",
        ));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut curve = CdfCurve {
        errors: Vec::new(),
        probabilities: Vec::new(),
    };
    for (i, e) in sorted.iter().enumerate() {
        if i + 1 < sorted.len() && sorted[i + 1] == *e {
            continue;
        }
        curve.errors.push(*e);
        curve.probabilities.push((i + 1) as f64 / n);
    }
    // guard against rounding in the last step
    *curve.probabilities.last_mut().unwrap() = 1.0;
    Ok(curve)
}

impl CdfCurve {
    /// Smallest error whose cumulative probability reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let i = self
            .probabilities
            .iter()
            .position(|&q| q >= p - 1e-12)
            .unwrap_or(self.errors.len() - 1);
        self.errors[i]
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// Empirical `P(error <= e)`.
    pub fn probability_at(&self, e: f64) -> f64 {
        match self.errors.iter().rposition(|&x| x <= e) {
            Some(i) => self.probabilities[i],
            None => 0.0,
        }
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for (&error_m, &probability) in self.errors.iter().zip(&self.probabilities) {
            w.serialize(CdfPoint {
                error_m,
                probability,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut curve = CdfCurve {
            errors: Vec::new(),
            probabilities: Vec::new(),
        };
        for row in r.deserialize() {
            let p: CdfPoint = row?;
            curve.errors.push(p.error_m);
            curve.probabilities.push(p.probability);
        }
        Ok(curve)
    }
}
