//! Dense row-major `f64` matrices and the small set of operations the
//! training and aggregation code needs.

use crate::error::{Error, Result};

/// A two-dimensional tensor stored row-major in a flat `Vec<f64>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    /// Builds a tensor from a flat row-major buffer.
    ///
    /// Fails if the buffer length does not equal `rows * cols` or if any
    /// value is non-finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "tensor values must be finite".to_string(),
            ));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// An all-zero tensor of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat row-major view of the values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat row-major view of the values.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    /// One row as a slice.
    pub fn row(&self, row: usize) -> &[f64] {
        debug_assert!(row < self.rows);
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut data = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &lhs_val) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (out, &rhs_val) in out_row.iter_mut().zip(rhs_row) {
                    *out += lhs_val * rhs_val;
                }
            }
        }
        Ok(Tensor2D {
            rows: self.rows,
            cols: rhs.cols,
            data,
        })
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Tensor2D {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor2D {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// In-place `self += scale * other`.
    pub fn add_assign_scaled(&mut self, other: &Tensor2D, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cannot accumulate {}x{} into {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (dst, &src) in self.data.iter_mut().zip(&other.data) {
            *dst += scale * src;
        }
        Ok(())
    }

    /// True when every element is finite.
    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor2D::new(2, 2, vec![1.0, 2.0, 3.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor2D::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor2D::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor2D::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rectangular_shapes() {
        let a = Tensor2D::new(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let b = Tensor2D::new(3, 2, vec![2.0, 1.0, 5.0, 5.0, 4.0, 3.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (1, 2));
        assert_eq!(c.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor2D::zeros(2, 3);
        let b = Tensor2D::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor2D::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn zip_map_adds_elementwise() {
        let a = Tensor2D::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor2D::new(1, 3, vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.zip_map(&b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0]);
        assert!(a.zip_map(&Tensor2D::zeros(3, 1), |x, _| x).is_err());
    }

    #[test]
    fn add_assign_scaled_applies_scale() {
        let mut a = Tensor2D::new(1, 2, vec![1.0, 2.0]).unwrap();
        let g = Tensor2D::new(1, 2, vec![10.0, 100.0]).unwrap();
        a.add_assign_scaled(&g, -0.1).unwrap();
        assert_eq!(a.data(), &[0.0, -8.0]);
    }
}
