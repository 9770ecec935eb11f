//! Absolute Pearson correlation as a mapping score, its complement as a
//! training distance, and threshold decisions.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("degenerate vector: zero variance")]
    DegenerateVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
}

/// Similarity in [0, 1]; 1 means perfectly (anti-)correlated.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MatchScore(f64);

impl MatchScore {
    pub fn new(value: f64) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Acceptance threshold in [0, 1]; both limits are allowed so sweeps can reach them.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self, MetricError> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            Err(MetricError::InvalidThreshold(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn in_recommended_band(self) -> bool {
        (0.7..=0.8).contains(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn is_accept(self) -> bool {
        self == Decision::Accept
    }
}

struct Centered {
    dev: Vec<f64>,
    norm: f64,
}

fn center(x: &[f64]) -> Result<Centered, MetricError> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let norm = dev.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(MetricError::DegenerateVector);
    }
    Ok(Centered { dev, norm })
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::DimensionMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::DegenerateVector);
    }
    Ok(())
}

/// Signed Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_dims(x, y)?;
    let cx = center(x)?;
    let cy = center(y)?;
    let cov: f64 = cx.dev.iter().zip(&cy.dev).map(|(a, b)| a * b).sum();
    Ok((cov / (cx.norm * cy.norm)).clamp(-1.0, 1.0))
}

pub fn mapping_score(x: &[f64], y: &[f64]) -> Result<MatchScore, MetricError> {
    Ok(MatchScore(pearson(x, y)?.abs()))
}

/// Training distance `1 - |r|`.
pub fn distance(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    Ok(1.0 - mapping_score(x, y)?.value())
}

/// Strict: a score equal to the threshold is rejected.
pub fn decide(score: MatchScore, tau: Threshold) -> Decision {
    if score.value() > tau.value() {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// Distance and its gradients with respect to both arguments.
#[derive(Debug, Clone)]
pub struct DistanceGrad {
    pub distance: f64,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
}

/// `d = 1 - |r|` with `dr/dx = (y_hat - r x_hat) / |x_c|`, where hats are the
/// centered, unit-normalized vectors. At `r = 0` the subgradient 0 is used.
pub fn distance_with_grad(x: &[f64], y: &[f64]) -> Result<DistanceGrad, MetricError> {
    check_dims(x, y)?;
    let cx = center(x)?;
    let cy = center(y)?;
    let xh: Vec<f64> = cx.dev.iter().map(|v| v / cx.norm).collect();
    let yh: Vec<f64> = cy.dev.iter().map(|v| v / cy.norm).collect();
    let r: f64 = xh.iter().zip(&yh).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
    let sign = if r > 0.0 {
        -1.0
    } else if r < 0.0 {
        1.0
    } else {
        0.0
    };
    let grad_x = xh.iter().zip(&yh).map(|(a, b)| sign * (b - r * a) / cx.norm).collect();
    let grad_y = xh.iter().zip(&yh).map(|(a, b)| sign * (a - r * b) / cy.norm).collect();
    Ok(DistanceGrad { distance: 1.0 - r.abs(), grad_x, grad_y })
}
