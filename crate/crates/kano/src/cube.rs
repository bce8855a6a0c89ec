//! Core data carriers: image/latent cubes and simplex-constrained kernels.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{KanoError, Result};

/// Dense rank-3 real array `(C, H, W)`. Images live in `[0,1]`; latents are
/// unconstrained. Values are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub data: Array3<f64>,
}

impl Cube {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(KanoError::Invalid("cube dims must be >= 1".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(KanoError::Invalid("cube holds non-finite values".into()));
        }
        Ok(Cube { data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Cube {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn max_abs_diff(&self, other: &Cube) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Clamp into `[0,1]` for image export.
    pub fn clamped_to_unit(&self) -> Cube {
        Cube {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }
}

/// `k x k` blur kernel on the probability simplex: entries nonnegative,
/// summing to one within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    values: Array2<f64>,
}

impl Kernel {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (kh, kw) = values.dim();
        if kh != kw {
            return Err(KanoError::Invalid(format!("kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(KanoError::Invalid(format!("kernel size must be odd, got {kh}")));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(KanoError::Invalid("kernel entries must be finite and >= 0".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(KanoError::Invalid(format!(
                "kernel must sum to 1 (got {sum})"
            )));
        }
        Ok(Kernel { values })
    }

    pub fn delta(size: usize) -> Self {
        let mut v = Array2::zeros((size, size));
        v[[size / 2, size / 2]] = 1.0;
        Kernel { values: v }
    }

    pub fn uniform(size: usize) -> Self {
        Kernel {
            values: Array2::from_elem((size, size), 1.0 / (size * size) as f64),
        }
    }

    pub fn size(&self) -> usize {
        self.values.dim().0
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn on_simplex(values: &Array2<f64>) -> bool {
        values.iter().all(|v| *v >= 0.0)
            && (values.iter().sum::<f64>() - 1.0).abs() <= Self::SUM_TOL
    }

    pub fn l1_distance(&self, other: &Kernel) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn mse(&self, other: &Kernel) -> f64 {
        let n = self.values.len() as f64;
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn kernel_validation() {
        assert!(Kernel::new(arr2(&[[0.5, 0.5], [0.0, 0.0]])).is_err()); // even
        assert!(Kernel::new(arr2(&[[1.5]])).is_err()); // sum != 1
        assert!(Kernel::new(arr2(&[[-0.5]])).is_err()); // negative
        assert!(Kernel::new(arr2(&[[1.0]])).is_ok());
    }

    #[test]
    fn cube_rejects_non_finite() {
        let mut a = Array3::zeros((1, 2, 2));
        a[[0, 0, 0]] = f64::NAN;
        assert!(Cube::new(a).is_err());
    }
}
