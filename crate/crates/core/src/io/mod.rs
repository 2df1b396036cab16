//! File formats: the native `stem4d` container and the npy interchange format.

pub mod container;
pub mod npy;

use std::path::Path;

use crate::error::{Error, Result};
use crate::stack::{DataMatrix, ScanStack4D};

/// On-disk stack formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackFormat {
    /// Native container: one JSON header line followed by little-endian f32.
    Container,
    /// npy version 1.0, C-order, rank-4 f32/f64.
    Interchange,
}

/// Picks a format from the file extension: `.npy` is interchange, anything
/// else the native container.
pub fn detect_format(path: &Path) -> StackFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("npy") => StackFormat::Interchange,
        _ => StackFormat::Container,
    }
}

pub fn load_stack(path: &Path, format: StackFormat) -> Result<ScanStack4D> {
    match format {
        StackFormat::Container => container::read_stack(path),
        StackFormat::Interchange => {
            let (shape, data) = npy::read(path)?;
            if shape.len() != 4 {
                return Err(Error::ShapeMismatch {
                    expected: "rank-4 array".into(),
                    actual: format!("rank-{} array", shape.len()),
                });
            }
            ScanStack4D::new(shape[0], shape[1], shape[2], shape[3], data, "loaded")
        }
    }
}

pub fn save_stack(stack: &ScanStack4D, path: &Path, format: StackFormat) -> Result<()> {
    match format {
        StackFormat::Container => container::write_stack(stack, path),
        StackFormat::Interchange => npy::write_f32(
            path,
            &[stack.m(), stack.n(), stack.px(), stack.py()],
            stack.data(),
        ),
    }
}

/// Loads a rank-2 npy file as a factorization input matrix.
pub fn load_matrix(path: &Path) -> Result<DataMatrix> {
    let (shape, data) = npy::read(path)?;
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: "rank-2 array".into(),
            actual: format!("rank-{} array", shape.len()),
        });
    }
    let values = ndarray::Array2::from_shape_vec((shape[0], shape[1]), data)
        .expect("payload length validated by reader");
    DataMatrix::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::reshape_4d_to_2d;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    #[test]
    fn container_round_trip_zeros_and_random() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = ScanStack4D::new(2, 3, 4, 4, vec![0.0; 96], "raw").unwrap();
        let path = dir.path().join("zeros.stem4d");
        save_stack(&zeros, &path, StackFormat::Container).unwrap();
        let back = load_stack(&path, StackFormat::Container).unwrap();
        assert_eq!(zeros.data(), back.data());

        let spec = SyntheticSpec {
            m: 4,
            n: 4,
            px: 8,
            py: 8,
            k_true: 2,
            noise_sigma: 0.3,
            overlaps: vec![],
            seed: 11,
        };
        let (stack, _) = generate_synthetic(&spec).unwrap();
        let path = dir.path().join("rand.stem4d");
        save_stack(&stack, &path, StackFormat::Container).unwrap();
        let back = load_stack(&path, StackFormat::Container).unwrap();
        assert_eq!(stack.data(), back.data());
    }

    #[test]
    fn synthetic_round_trips_through_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            m: 6,
            n: 5,
            px: 8,
            py: 8,
            k_true: 8,
            noise_sigma: 0.1,
            overlaps: vec![],
            seed: 7,
        };
        let (stack, _) = generate_synthetic(&spec).unwrap();
        for (name, format) in [
            ("s.stem4d", StackFormat::Container),
            ("s.npy", StackFormat::Interchange),
        ] {
            let path = dir.path().join(name);
            save_stack(&stack, &path, format).unwrap();
            let back = load_stack(&path, format).unwrap();
            assert_eq!(stack.data(), back.data(), "{name}");
            assert_eq!(detect_format(&path), format);
        }
    }

    #[test]
    fn matrix_round_trip_npy() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ScanStack4D::new(2, 2, 2, 2, (0..16).map(f64::from).collect(), "raw").unwrap();
        let matrix = reshape_4d_to_2d(&stack);
        let path = dir.path().join("v.npy");
        npy::write_f64(&path, &[matrix.rows(), matrix.cols()], matrix.values().as_slice().unwrap())
            .unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(matrix.values(), back.values());
    }
}
