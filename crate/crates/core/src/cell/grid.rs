use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor-product grid over the slow state. Node `k` enumerates axes in
/// row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: Vec<Vec<f64>>,
}

impl TensorGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.is_empty() || a.windows(2).any(|w| !(w[1] > w[0])) || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "grid axis {i} must be non-empty, finite and strictly increasing"
                )));
            }
        }
        Ok(TensorGrid { axes })
    }

    /// `nodes[i]` equally spaced points on `[lower[i], upper[i]]` per axis.
    pub fn uniform(lower: &[f64], upper: &[f64], nodes: &[usize]) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != nodes.len() {
            return Err(Error::InvalidArgument("grid bounds and node counts differ in length".into()));
        }
        let axes = lower
            .iter()
            .zip(upper)
            .zip(nodes)
            .map(|((&lo, &hi), &k)| {
                if k == 1 {
                    vec![lo]
                } else {
                    (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
                }
            })
            .collect();
        TensorGrid::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn node(&self, mut k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for i in (0..self.dim()).rev() {
            let len = self.axes[i].len();
            out[i] = self.axes[i][k % len];
            k /= len;
        }
        out
    }

    /// Distance by which `x` lies outside the grid box (0 inside).
    pub fn outside_by(&self, x: &[f64]) -> f64 {
        self.axes
            .iter()
            .zip(x)
            .map(|(a, &v)| {
                let lo = a[0];
                let hi = a[a.len() - 1];
                if v < lo {
                    lo - v
                } else if v > hi {
                    v - hi
                } else if v.is_nan() {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// Multilinear interpolation stencil `(node, weight)`; coordinates outside
    /// the box clamp to the boundary.
    pub fn stencil(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.push((0, 1.0));
        for (i, a) in self.axes.iter().enumerate() {
            let len = a.len();
            let (lo_idx, frac) = if len == 1 || x[i] <= a[0] {
                (0, 0.0)
            } else if x[i] >= a[len - 1] {
                (len - 1, 0.0)
            } else {
                let j = a.partition_point(|&v| v <= x[i]) - 1;
                (j, (x[i] - a[j]) / (a[j + 1] - a[j]))
            };
            let current = std::mem::take(out);
            for (node, w) in current {
                let base = node * len;
                if frac == 0.0 {
                    out.push((base + lo_idx, w));
                } else {
                    out.push((base + lo_idx, w * (1.0 - frac)));
                    out.push((base + lo_idx + 1, w * frac));
                }
            }
        }
    }
}
