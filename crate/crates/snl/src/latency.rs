//! Online private-inference latency model: ciphertext linear layers cost
//! one plaintext inference, ciphertext ReLUs cost a measured per-1K
//! garbled-circuit rate.

use crate::error::{Result, SnlError};
use serde::{Deserialize, Serialize};

/// Seconds per 1000 garbled-circuit ReLUs, from the DELPHI measurement.
pub const DEFAULT_T_PER_1K: f64 = 0.021;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Seconds per 1000 ciphertext ReLU operations.
    pub t_per_1k: f64,
    /// Seconds for one plaintext inference of the linear layers.
    pub linear_time: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { t_per_1k: DEFAULT_T_PER_1K, linear_time: 0.0 }
    }
}

/// linear_time + (relu_count / 1000) * t_per_1k.
pub fn estimate_online_latency(relu_count: usize, model: &LatencyModel) -> f64 {
    model.linear_time + relu_count as f64 / 1000.0 * model.t_per_1k
}

/// Unweighted OLS fit of latency against ReLU count.
/// Returns (slope in seconds per ReLU, intercept in seconds).
pub fn fit_per_relu_cost(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(SnlError::InvalidArgument("need at least 2 points".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SnlError::InvalidArgument(
            "degenerate fit: all ReLU counts equal".into(),
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Accuracy percent per thousand ReLUs.
pub fn accuracy_per_relu(accuracy_percent: f64, relu_count_k: f64) -> Result<f64> {
    if relu_count_k <= 0.0 {
        return Err(SnlError::InvalidArgument("relu count must be positive".into()));
    }
    Ok(accuracy_percent / relu_count_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_1k_anchor() {
        let m = LatencyModel { t_per_1k: 0.021, linear_time: 0.0 };
        assert_eq!(estimate_online_latency(1000, &m), 0.021);
    }

    #[test]
    fn zero_relus_is_linear_time() {
        let m = LatencyModel { t_per_1k: 0.021, linear_time: 0.5 };
        assert_eq!(estimate_online_latency(0, &m), 0.5);
    }

    #[test]
    fn latency_is_affine_in_count() {
        let m = LatencyModel { t_per_1k: 0.021, linear_time: 0.3 };
        let (a, b) = (1234, 5678);
        let lhs = estimate_online_latency(a + b, &m) - estimate_online_latency(a, &m);
        let rhs = estimate_online_latency(b, &m) - estimate_online_latency(0, &m);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn exact_two_point_line() {
        let (slope, intercept) = fit_per_relu_cost(&[(0.0, 0.1), (1000.0, 0.2)]).unwrap();
        assert!((slope - 1e-4).abs() < 1e-15);
        assert!((intercept - 0.1).abs() < 1e-15);
    }

    #[test]
    fn duplicated_point_changes_nothing_on_exact_line() {
        let a = fit_per_relu_cost(&[(0.0, 0.1), (1000.0, 0.2)]).unwrap();
        let b = fit_per_relu_cost(&[(0.0, 0.1), (1000.0, 0.2), (1000.0, 0.2)]).unwrap();
        assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fit_rejected() {
        assert!(fit_per_relu_cost(&[(5.0, 0.1), (5.0, 0.2)]).is_err());
        assert!(fit_per_relu_cost(&[(5.0, 0.1)]).is_err());
    }

    #[test]
    fn fit_roundtrip_noiseless() {
        let slope = 2.1e-5;
        let intercept = 0.018;
        let pts: Vec<(f64, f64)> =
            (0..10).map(|i| (i as f64 * 5000.0, intercept + slope * i as f64 * 5000.0)).collect();
        let (s, b) = fit_per_relu_cost(&pts).unwrap();
        assert!((s - slope).abs() < 1e-9);
        assert!((b - intercept).abs() < 1e-9);
    }

    #[test]
    fn accuracy_per_relu_values() {
        assert!((accuracy_per_relu(73.75, 49.9).unwrap() - 1.478).abs() < 1e-3);
        assert!((accuracy_per_relu(100.0, 100.0).unwrap() - 1.0).abs() < 1e-15);
        // The printed 5.517 for (66.53, 12.9) does not match the column
        // definition; the implementation follows the definition.
        assert!((accuracy_per_relu(66.53, 12.9).unwrap() - 5.1573).abs() < 1e-3);
        assert!(accuracy_per_relu(1.0, 0.0).is_err());
    }
}
