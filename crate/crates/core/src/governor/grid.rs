use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Point, DIM};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimension {dim}: need count >= 2 and min < max (got min {min}, max {max}, count {count})")]
    Invalid { dim: usize, min: f64, max: f64, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDim {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridDim {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count }
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.max
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

/// Regular grid over `[x, x', v, W, W']`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [GridDim; DIM],
}

impl GridSpec {
    pub fn new(dims: [GridDim; DIM]) -> Result<Self, GridError> {
        let g = Self { dims };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (dim, d) in self.dims.iter().enumerate() {
            if d.count < 2 || !(d.min < d.max) || !d.min.is_finite() || !d.max.is_finite() {
                return Err(GridError::Invalid { dim, min: d.min, max: d.max, count: d.count });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().map(|d| d.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point at flat index `i`; the last dimension varies fastest.
    pub fn point(&self, mut i: usize) -> Point {
        let mut p = [0.0; DIM];
        for d in (0..DIM).rev() {
            let n = self.dims[d].count;
            p[d] = self.dims[d].value(i % n);
            i /= n;
        }
        p
    }

    /// Maps each coordinate to `[0, 1]` over its grid range.
    pub fn normalize(&self, p: &Point) -> Point {
        let mut out = [0.0; DIM];
        for d in 0..DIM {
            let g = &self.dims[d];
            out[d] = (p[d] - g.min) / (g.max - g.min);
        }
        out
    }

    /// Half the diagonal of one grid cell in normalized coordinates.
    pub fn admissibility_radius(&self) -> f64 {
        0.5 * self.dims.iter().map(|d| (1.0 / (d.count - 1) as f64).powi(2)).sum::<f64>().sqrt()
    }
}
