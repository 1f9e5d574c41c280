//! 2D scalar grids, the slice-level currency of the pipeline.

use serde::{Deserialize, Serialize};

/// Row-major 2D grid of `f32` scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Grid2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid data length mismatch");
        Grid2 { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sum of all values (used for binary-label pixel counts).
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Number of nonzero entries.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// True when every value is 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Bilinear sample at fractional coordinates, 0 outside the grid.
    pub fn sample_bilinear(&self, r: f32, c: f32) -> f32 {
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = r - r0;
        let fc = c - c0;
        let mut acc = 0.0f32;
        for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
                let rr = r0 as i64 + dr;
                let cc = c0 as i64 + dc;
                let v = if rr >= 0 && cc >= 0 && (rr as usize) < self.rows && (cc as usize) < self.cols
                {
                    self.at(rr as usize, cc as usize)
                } else {
                    0.0
                };
                acc += wr * wc * v;
            }
        }
        acc
    }

    /// Nearest-neighbor sample, 0 outside the grid.
    pub fn sample_nearest(&self, r: f32, c: f32) -> f32 {
        let rr = r.round() as i64;
        let cc = c.round() as i64;
        if rr >= 0 && cc >= 0 && (rr as usize) < self.rows && (cc as usize) < self.cols {
            self.at(rr as usize, cc as usize)
        } else {
            0.0
        }
    }
}
