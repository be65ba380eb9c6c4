use serde::{Deserialize, Serialize};

use crate::diffcore::RealArray;

/// Per-dimension affine map `(v − shift) / scale`, frozen once fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and sample standard deviation per column; zero or non-finite
    /// spread leaves the scale at 1. The spread is computed on values
    /// pre-scaled by the column's largest magnitude so that very wide data
    /// does not overflow.
    pub fn fit(data: &RealArray) -> Self {
        let (n, d) = (data.rows(), data.cols());
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|r| data.get(r, j)).collect();
            let big = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if n == 0 || !big.is_finite() || big == 0.0 {
                continue;
            }
            let m = col.iter().map(|v| v / big).sum::<f64>() / n as f64;
            shift[j] = m * big;
            if n >= 2 {
                let var = col.iter().map(|v| (v / big - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let sd = var.sqrt() * big;
                if sd.is_finite() && sd > 0.0 {
                    scale[j] = sd;
                }
            }
        }
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, data: &RealArray) -> RealArray {
        let mut out = data.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.shift[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.shift[j]) / self.scale[j])
            .collect()
    }

    pub fn invert(&self, data: &RealArray) -> RealArray {
        let mut out = data.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.shift[j];
            }
        }
        out
    }

    /// `Σ log scale`: subtracting it converts a standardized-space log
    /// density back to the original space.
    pub fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizes_and_round_trips() {
        let data = RealArray::matrix(4, 2, vec![3.0, 1.0, 5.0, 1.0, 7.0, 1.0, 5.0, 1.0]);
        let s = Standardizer::fit(&data);
        assert_eq!(s.shift, vec![5.0, 1.0]);
        assert!((s.scale[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.scale[1], 1.0);
        let z = s.apply(&data);
        let m: f64 = (0..4).map(|r| z.get(r, 0)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-15);
        assert!((0..4).all(|r| z.get(r, 1) == 0.0));
        let back = s.invert(&z);
        for (a, b) in back.data().iter().zip(data.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_data_does_not_overflow() {
        let data = RealArray::column_vector(vec![1e300, -1e300, 0.0]);
        let s = Standardizer::fit(&data);
        assert!(s.scale[0].is_finite() && s.scale[0] > 1e299);
    }
}
