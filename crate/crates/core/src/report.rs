//! Root-mean-square error reports.

use crate::error::{Error, Result};

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InsufficientSamples {
            required: 1,
            available: 0,
        });
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let value = (sum / a.len() as f64).sqrt();
    if value.is_nan() {
        return Err(Error::NonFinite("rmse input".into()));
    }
    Ok(value)
}

/// Per-channel RMSE.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub channels: Vec<(String, f64)>,
}

impl RmseReport {
    /// `truth` and `estimate` are sample-major: `truth[k][c]`.
    pub fn from_samples(names: &[String], truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<Self> {
        if truth.len() != estimate.len() {
            return Err(Error::LengthMismatch {
                left: truth.len(),
                right: estimate.len(),
            });
        }
        for (a, b) in truth.iter().zip(estimate) {
            if a.len() != names.len() || b.len() != names.len() {
                return Err(Error::dims("channels per sample", names.len(), a.len().max(b.len())));
            }
        }
        let channels = names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let a: Vec<f64> = truth.iter().map(|s| s[c]).collect();
                let b: Vec<f64> = estimate.iter().map(|s| s[c]).collect();
                Ok((name.clone(), rmse(&a, &b)?))
            })
            .collect::<Result<_>>()?;
        Ok(RmseReport { channels })
    }

    pub fn values(&self) -> Vec<f64> {
        self.channels.iter().map(|(_, v)| *v).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Largest absolute entry of `a - b` over every sample and channel.
pub fn max_abs_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
