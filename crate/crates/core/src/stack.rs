//! 4D scan stacks and their 2D matrix view.
//!
//! A [`ScanStack4D`] holds one diffraction pattern of `px * py` pixels per
//! scan position on an `m * n` grid. Factorization consumes the stack as a
//! [`DataMatrix`] whose column `j` is the row-major flattening of the pattern
//! at scan position `(j / n, j % n)`; the scan grid itself is traversed in
//! row-major order as well. Files store 32-bit floats, all computation is
//! 64-bit.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A 4D diffraction stack: `m * n` scan positions, each holding a
/// `px * py` pattern. Data is row-major over `(m, n, px, py)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanStack4D {
    m: usize,
    n: usize,
    px: usize,
    py: usize,
    data: Vec<f64>,
    /// Free-text label, e.g. "raw" or "mean-filtered".
    pub provenance: String,
}

impl ScanStack4D {
    /// Validates dimensions, non-negativity and finiteness.
    pub fn new(
        m: usize,
        n: usize,
        px: usize,
        py: usize,
        data: Vec<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if m == 0 || n == 0 || px == 0 || py == 0 {
            return Err(Error::ShapeMismatch {
                expected: "all dims >= 1".into(),
                actual: format!("({m}, {n}, {px}, {py})"),
            });
        }
        let expected = m * n * px * py;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteIntensity { index: i });
            }
            if v < 0.0 {
                return Err(Error::NegativeIntensity { index: i, value: v });
            }
        }
        Ok(Self {
            m,
            n,
            px,
            py,
            data,
            provenance: provenance.into(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn px(&self) -> usize {
        self.px
    }

    pub fn py(&self) -> usize {
        self.py
    }

    /// Number of scan positions.
    pub fn scan_len(&self) -> usize {
        self.m * self.n
    }

    /// Pixels per pattern.
    pub fn pattern_len(&self) -> usize {
        self.px * self.py
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The pattern at scan position `(r, c)` as a flat row-major slice.
    pub fn pattern(&self, r: usize, c: usize) -> &[f64] {
        let p = self.pattern_len();
        let start = (r * self.n + c) * p;
        &self.data[start..start + p]
    }

    /// The pattern at scan position `(r, c)` as a `(px, py)` array.
    pub fn pattern_image(&self, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_vec((self.px, self.py), self.pattern(r, c).to_vec())
            .expect("pattern slice has px*py elements")
    }
}

/// The 2D factorization input: shape `(px * py, m * n)`, column `j` holds the
/// flattened pattern at scan index `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
}

impl DataMatrix {
    /// Validates non-negativity and finiteness. `values` must already have
    /// the (pattern pixels, scan positions) orientation.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteIntensity { index: i });
            }
            if v < 0.0 {
                return Err(Error::NegativeIntensity { index: i, value: v });
            }
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Column `j` reshaped to a `(px, py)` pattern image.
    pub fn column_image(&self, j: usize, px: usize, py: usize) -> Result<Array2<f64>> {
        if px * py != self.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("px*py = {}", self.rows()),
                actual: format!("{px}*{py}"),
            });
        }
        let col: Vec<f64> = self.values.column(j).to_vec();
        Ok(Array2::from_shape_vec((px, py), col).expect("column has px*py elements"))
    }
}

/// Flattens a stack into the `(px * py, m * n)` factorization input.
/// Column `j` is the row-major flatten of the pattern at `(j / n, j % n)`.
pub fn reshape_4d_to_2d(stack: &ScanStack4D) -> DataMatrix {
    let rows = stack.pattern_len();
    let cols = stack.scan_len();
    let mut values = Array2::zeros((rows, cols));
    for j in 0..cols {
        let start = j * rows;
        let pattern = &stack.data()[start..start + rows];
        for (i, &v) in pattern.iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    DataMatrix { values }
}

/// Exact inverse of [`reshape_4d_to_2d`].
pub fn reshape_2d_to_4d(
    matrix: &DataMatrix,
    m: usize,
    n: usize,
    px: usize,
    py: usize,
) -> Result<ScanStack4D> {
    if matrix.rows() != px * py || matrix.cols() != m * n {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {})", px * py, m * n),
            actual: format!("({}, {})", matrix.rows(), matrix.cols()),
        });
    }
    let rows = matrix.rows();
    let mut data = vec![0.0; m * n * px * py];
    for j in 0..matrix.cols() {
        for i in 0..rows {
            data[j * rows + i] = matrix.values[(i, j)];
        }
    }
    ScanStack4D::new(m, n, px, py, data, "reshaped")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack_from(m: usize, n: usize, px: usize, py: usize, data: Vec<f64>) -> ScanStack4D {
        ScanStack4D::new(m, n, px, py, data, "test").unwrap()
    }

    #[test]
    fn single_pattern_flattens_to_one_column() {
        let stack = stack_from(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let matrix = reshape_4d_to_2d(&stack);
        assert_eq!(matrix.rows(), 4);
        assert_eq!(matrix.cols(), 1);
        let col: Vec<f64> = matrix.values().column(0).to_vec();
        assert_eq!(col, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_law() {
        let (m, n, px, py) = (3, 4, 5, 5);
        let stack = stack_from(m, n, px, py, vec![0.5; m * n * px * py]);
        let matrix = reshape_4d_to_2d(&stack);
        assert_eq!((matrix.rows(), matrix.cols()), (25, 12));
    }

    #[test]
    fn column_j_is_pattern_at_scan_index_j() {
        // Exhaustive on a small stack: pattern values encode their scan index.
        let (m, n, px, py) = (3, 4, 2, 3);
        let mut data = Vec::new();
        for r in 0..m {
            for c in 0..n {
                let j = (r * n + c) as f64;
                for p in 0..px * py {
                    data.push(j * 100.0 + p as f64);
                }
            }
        }
        let stack = stack_from(m, n, px, py, data);
        let matrix = reshape_4d_to_2d(&stack);
        for j in 0..m * n {
            let (r, c) = (j / n, j % n);
            let expected = stack.pattern(r, c);
            let col: Vec<f64> = matrix.values().column(j).to_vec();
            assert_eq!(col, expected, "column {j} vs pattern ({r}, {c})");
        }
    }

    #[test]
    fn reshape_2d_to_4d_single_column() {
        let values = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let matrix = DataMatrix::new(values).unwrap();
        let stack = reshape_2d_to_4d(&matrix, 1, 1, 2, 2).unwrap();
        assert_eq!(stack.pattern(0, 0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reshape_2d_to_4d_rejects_wrong_dims() {
        let values = Array2::from_elem((25, 12), 1.0);
        let matrix = DataMatrix::new(values).unwrap();
        assert!(reshape_2d_to_4d(&matrix, 3, 4, 5, 5).is_ok());
        let values = Array2::from_elem((25, 12), 1.0);
        let matrix = DataMatrix::new(values).unwrap();
        let err = reshape_2d_to_4d(&matrix, 3, 3, 5, 5).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_negative_and_nonfinite() {
        let err = ScanStack4D::new(1, 1, 1, 3, vec![0.0, -0.5, 1.0], "t").unwrap_err();
        match err {
            Error::NegativeIntensity { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
        let err = ScanStack4D::new(1, 1, 1, 2, vec![0.0, f64::NAN], "t").unwrap_err();
        assert!(matches!(err, Error::NonFiniteIntensity { index: 1 }));
    }

    proptest! {
        #[test]
        fn reshape_round_trip(
            m in 1usize..=8, n in 1usize..=8, px in 1usize..=8, py in 1usize..=8,
            seed in 0u64..1000,
        ) {
            // Cheap deterministic pseudo-random payload.
            let len = m * n * px * py;
            let data: Vec<f64> = (0..len)
                .map(|i| ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 33) as f64)
                .collect();
            let stack = stack_from(m, n, px, py, data);
            let matrix = reshape_4d_to_2d(&stack);
            let back = reshape_2d_to_4d(&matrix, m, n, px, py).unwrap();
            prop_assert_eq!(stack.data(), back.data());
        }
    }
}
