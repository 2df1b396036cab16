//! Scan-space mean filtering and the noise-standard-deviation metric.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::stack::ScanStack4D;

/// Mean-filter configuration. The kernel is the fixed 3x3 scan neighborhood;
/// positions outside the grid are skipped and the sum is normalized by the
/// count of in-bounds neighbors, center included.
#[derive(Debug, Clone, Copy, Default)]
pub struct FilterConfig {
    pub edge_policy: EdgePolicy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EdgePolicy {
    #[default]
    ValidNeighborMean,
}

/// Replaces each diffraction pattern with the elementwise mean of the
/// patterns in the 3x3 scan neighborhood around it. Output keeps the scan
/// size; each output cell is independent of evaluation order.
pub fn mean_filter(stack: &ScanStack4D, _config: FilterConfig) -> ScanStack4D {
    let (m, n) = (stack.m(), stack.n());
    let pattern_len = stack.pattern_len();
    let mut data = vec![0.0f64; stack.data().len()];
    for r in 0..m {
        for c in 0..n {
            let out = &mut data[(r * n + c) * pattern_len..(r * n + c + 1) * pattern_len];
            let mut count = 0usize;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nr >= m as i64 || nc < 0 || nc >= n as i64 {
                        continue;
                    }
                    count += 1;
                    let src = stack.pattern(nr as usize, nc as usize);
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            let divisor = count as f64;
            for o in out.iter_mut() {
                *o /= divisor;
            }
        }
    }
    ScanStack4D::new(
        m,
        n,
        stack.px(),
        stack.py(),
        data,
        format!("{}+mean-filtered", stack.provenance),
    )
    .expect("mean of non-negative finite values stays non-negative and finite")
}

/// Population standard deviation of pixel values: sqrt((1/N) sum (I - mu)^2).
pub fn nsd(pattern: &Array2<f64>) -> f64 {
    let count = pattern.len() as f64;
    let mean = pattern.sum() / count;
    let variance = pattern.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / count;
    variance.sqrt()
}

/// NSD values per (dataset, cluster): one row per dataset, one column per
/// cluster representative.
#[derive(Debug, Clone)]
pub struct NsdTable {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl NsdTable {
    /// CSV with a cluster header row, dataset label column, and cells
    /// rounded to 6 significant digits.
    pub fn to_csv(&self) -> String {
        let width = self.values.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("dataset");
        for c in 0..width {
            out.push_str(&format!(",cluster_{}", c + 1));
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push(',');
                out.push_str(&format_sig(*v, 6));
            }
            out.push('\n');
        }
        out
    }
}

/// NSD of every representative, one table row per dataset.
pub fn nsd_matrix(rows: &[(String, Vec<Array2<f64>>)]) -> Result<NsdTable> {
    if rows.is_empty() || rows.iter().any(|(_, reps)| reps.is_empty()) {
        return Err(Error::EmptyInput);
    }
    Ok(NsdTable {
        labels: rows.iter().map(|(label, _)| label.clone()).collect(),
        values: rows
            .iter()
            .map(|(_, reps)| reps.iter().map(nsd).collect())
            .collect(),
    })
}

/// Plain-decimal formatting with `digits` significant digits.
pub(crate) fn format_sig(value: f64, digits: usize) -> String {
    if value == 0.0 {
        return format!("{:.*}", digits - 1, 0.0);
    }
    if !value.is_finite() {
        return value.to_string();
    }
    let magnitude = value.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{value:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn scalar_stack(m: usize, n: usize, values: Vec<f64>) -> ScanStack4D {
        ScanStack4D::new(m, n, 1, 1, values, "test").unwrap()
    }

    #[test]
    fn constant_stack_unchanged() {
        let stack = ScanStack4D::new(3, 3, 2, 2, vec![7.0; 36], "t").unwrap();
        let filtered = mean_filter(&stack, FilterConfig::default());
        assert_eq!(filtered.data(), stack.data());
    }

    #[test]
    fn single_position_unchanged() {
        let stack = ScanStack4D::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], "t").unwrap();
        let filtered = mean_filter(&stack, FilterConfig::default());
        assert_eq!(filtered.data(), stack.data());
    }

    #[test]
    fn two_by_two_grid_averages_all_four() {
        // Every 3x3 window on a 2x2 grid sees all four positions.
        let stack = scalar_stack(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let filtered = mean_filter(&stack, FilterConfig::default());
        assert_eq!(filtered.data(), &[2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn interior_equals_nine_neighbor_mean() {
        let (m, n) = (5, 6);
        let values: Vec<f64> = (0..m * n).map(|i| (i * i % 17) as f64).collect();
        let stack = scalar_stack(m, n, values.clone());
        let filtered = mean_filter(&stack, FilterConfig::default());
        for r in 1..m - 1 {
            for c in 1..n - 1 {
                let mut sum = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        sum += values[(r + dr - 1) * n + (c + dc - 1)];
                    }
                }
                assert_eq!(filtered.pattern(r, c)[0], sum / 9.0, "at ({r}, {c})");
            }
        }
    }

    #[test]
    fn nsd_basics() {
        let constant = Array2::from_elem((4, 4), 3.25);
        assert_eq!(nsd(&constant), 0.0);
        let two = Array2::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        assert_eq!(nsd(&two), 1.0);
    }

    #[test]
    fn nsd_table_examples() {
        let constant = Array2::from_elem((2, 2), 5.0);
        let table = nsd_matrix(&[("raw".into(), vec![constant])]).unwrap();
        assert_eq!(table.values, vec![vec![0.0]]);

        let a = Array2::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        let b = Array2::from_shape_vec((1, 2), vec![0.0, 4.0]).unwrap();
        let table = nsd_matrix(&[("raw".into(), vec![a, b])]).unwrap();
        assert_eq!(table.values, vec![vec![1.0, 2.0]]);
        let csv = table.to_csv();
        assert_eq!(csv, "dataset,cluster_1,cluster_2\nraw,1.00000,2.00000\n");

        assert!(matches!(nsd_matrix(&[]).unwrap_err(), Error::EmptyInput));
    }

    #[test]
    fn filtering_lowers_mean_pattern_nsd_on_noisy_stacks() {
        // i.i.d. noise, averaged per-pattern NSD must not increase: 5 seeds.
        for seed in 0..5u64 {
            let spec = SyntheticSpec {
                m: 10,
                n: 10,
                px: 16,
                py: 16,
                k_true: 4,
                noise_sigma: 0.08,
                overlaps: vec![],
                seed,
            };
            let (stack, _) = generate_synthetic(&spec).unwrap();
            let filtered = mean_filter(&stack, FilterConfig::default());
            let avg = |s: &ScanStack4D| -> f64 {
                let mut total = 0.0;
                for r in 0..s.m() {
                    for c in 0..s.n() {
                        total += nsd(&s.pattern_image(r, c));
                    }
                }
                total / s.scan_len() as f64
            };
            let (raw_nsd, filtered_nsd) = (avg(&stack), avg(&filtered));
            assert!(
                filtered_nsd <= raw_nsd,
                "seed {seed}: filtered {filtered_nsd} > raw {raw_nsd}"
            );
        }
    }

    #[test]
    fn format_sig_rounds_to_significant_digits() {
        assert_eq!(format_sig(2.5679994, 6), "2.56800");
        assert_eq!(format_sig(1234567.0, 6), "1234567");
        assert_eq!(format_sig(0.0001234567, 6), "0.000123457");
        assert_eq!(format_sig(0.0, 6), "0.00000");
    }

    proptest! {
        #[test]
        fn nsd_is_shift_invariant_and_scales_linearly(
            seed in 0u64..500, shift in 0.0f64..100.0, scale in 0.0f64..10.0,
        ) {
            let values: Vec<f64> = (0..36)
                .map(|i| (((i as u64 + 1).wrapping_mul(seed + 7) % 1000) as f64) / 10.0)
                .collect();
            let img = Array2::from_shape_vec((6, 6), values).unwrap();
            let base = nsd(&img);

            let shifted = img.mapv(|v| v + shift);
            prop_assert!((nsd(&shifted) - base).abs() <= 1e-12 * base.max(1.0));

            let scaled = img.mapv(|v| v * scale);
            prop_assert!((nsd(&scaled) - scale * base).abs() <= 1e-9 * (scale * base).max(1.0));
        }
    }
}
