//! Seeded synthetic 4D stacks with known cluster structure.
//!
//! Bases are disjoint sparse spot patterns (Gaussian blobs on a shared cell
//! grid, one cell per spot) so that clusters are controllably distinct. Every
//! basis uses the same spot count and amplitude sequence, which makes all
//! basis norms equal and the second/first weight ratio of a blended position
//! land at `mix / (1 - mix)` after factorization. Peak basis intensity is 1,
//! so `noise_sigma` reads as a fraction of peak. This is a test fixture, not
//! a physics model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::ScanStack4D;

/// One rectangular scan-space overlap band: positions in
/// `rows.0..rows.1` x `cols.0..cols.1` (half-open) get
/// `(1 - mix) * basis[cluster_a] + mix * basis[cluster_b]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapSpec {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub cluster_a: usize,
    pub cluster_b: usize,
    pub mix: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub px: usize,
    pub py: usize,
    pub k_true: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub overlaps: Vec<OverlapSpec>,
    pub seed: u64,
}

/// What the generator actually built, for checking pipeline output against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub m: usize,
    pub n: usize,
    pub px: usize,
    pub py: usize,
    pub k_true: usize,
    pub seed: u64,
    /// Dominant cluster per scan position, row-major.
    pub labels: Vec<usize>,
    /// Blend fraction per scan position, row-major; 0 outside overlap bands.
    pub mix: Vec<f64>,
    /// Basis patterns, `k_true` nested `px x py` arrays.
    pub bases: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    pub fn label_at(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.n + c]
    }

    /// Basis `c` flattened row-major to `px * py` values.
    pub fn basis_flat(&self, c: usize) -> Vec<f64> {
        self.bases[c].iter().flatten().copied().collect()
    }

    pub fn basis_image(&self, c: usize) -> Array2<f64> {
        Array2::from_shape_vec((self.px, self.py), self.basis_flat(c))
            .expect("basis has px*py values")
    }
}

/// Builds the stack and its ground truth. Deterministic for a given seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ScanStack4D, GroundTruth)> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let bases = build_bases(spec, &mut rng)?;
    let labels = snake_partition(spec.m, spec.n, spec.k_true);
    let mut mix_map = vec![0.0; spec.m * spec.n];

    let pattern_len = spec.px * spec.py;
    let mut data = vec![0.0f64; spec.m * spec.n * pattern_len];
    for j in 0..spec.m * spec.n {
        let basis = &bases[labels[j]];
        data[j * pattern_len..(j + 1) * pattern_len].copy_from_slice(basis);
    }

    let mut final_labels = labels;
    for overlap in &spec.overlaps {
        let blended: Vec<f64> = bases[overlap.cluster_a]
            .iter()
            .zip(&bases[overlap.cluster_b])
            .map(|(&a, &b)| (1.0 - overlap.mix) * a + overlap.mix * b)
            .collect();
        let dominant = if overlap.mix <= 0.5 {
            overlap.cluster_a
        } else {
            overlap.cluster_b
        };
        for r in overlap.rows.0..overlap.rows.1 {
            for c in overlap.cols.0..overlap.cols.1 {
                let j = r * spec.n + c;
                data[j * pattern_len..(j + 1) * pattern_len].copy_from_slice(&blended);
                mix_map[j] = overlap.mix;
                final_labels[j] = dominant;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidSpec(format!("bad noise sigma: {e}")))?;
        for v in data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }

    // Quantize to f32 so container round-trips are bit-exact.
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }

    let stack = ScanStack4D::new(spec.m, spec.n, spec.px, spec.py, data, "synthetic")?;
    let truth = GroundTruth {
        m: spec.m,
        n: spec.n,
        px: spec.px,
        py: spec.py,
        k_true: spec.k_true,
        seed: spec.seed,
        labels: final_labels,
        mix: mix_map,
        bases: bases
            .iter()
            .map(|b| b.chunks(spec.py).map(<[f64]>::to_vec).collect())
            .collect(),
    };
    Ok((stack, truth))
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    if spec.m == 0 || spec.n == 0 || spec.px == 0 || spec.py == 0 {
        return Err(Error::InvalidSpec("all dimensions must be >= 1".into()));
    }
    if spec.k_true == 0 {
        return Err(Error::InvalidSpec("k_true must be >= 1".into()));
    }
    if spec.k_true > spec.m * spec.n {
        return Err(Error::InvalidSpec(format!(
            "k_true = {} exceeds scan positions {}",
            spec.k_true,
            spec.m * spec.n
        )));
    }
    if !spec.noise_sigma.is_finite() || spec.noise_sigma < 0.0 {
        return Err(Error::InvalidSpec("noise_sigma must be finite and >= 0".into()));
    }
    for (i, o) in spec.overlaps.iter().enumerate() {
        if !(o.mix > 0.0 && o.mix < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "overlap {i}: mix must lie strictly in (0, 1), got {}",
                o.mix
            )));
        }
        if o.cluster_a >= spec.k_true || o.cluster_b >= spec.k_true {
            return Err(Error::InvalidSpec(format!(
                "overlap {i}: cluster index out of range"
            )));
        }
        if o.cluster_a == o.cluster_b {
            return Err(Error::InvalidSpec(format!(
                "overlap {i}: cluster_a and cluster_b must differ"
            )));
        }
        if o.rows.0 >= o.rows.1 || o.rows.1 > spec.m || o.cols.0 >= o.cols.1 || o.cols.1 > spec.n
        {
            return Err(Error::InvalidSpec(format!(
                "overlap {i}: region out of bounds or empty"
            )));
        }
    }
    Ok(())
}

/// Spot amplitudes shared by every basis; equal multisets keep basis norms equal.
const SPOT_AMPLITUDES: [f64; 12] = [
    1.0, 0.9, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5, 0.45, 0.4, 0.35,
];

/// Places spots on a shared cell grid, one occupied cell per spot, so the
/// supports of different bases never overlap.
fn build_bases(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    // Largest stamp radius whose cell grid still offers one cell per cluster.
    let mut chosen = None;
    for radius in (0usize..=2).rev() {
        let cell = if radius == 0 { 1 } else { 2 * radius + 2 };
        let (cx, cy) = (spec.px / cell, spec.py / cell);
        if cx * cy >= spec.k_true {
            chosen = Some((radius, cell, cx, cy));
            break;
        }
    }
    let (radius, cell, cx, cy) = chosen.ok_or_else(|| {
        Error::InvalidSpec(format!(
            "pattern {}x{} too small for {} disjoint bases",
            spec.px, spec.py, spec.k_true
        ))
    })?;

    let spots_per_cluster = ((cx * cy) / spec.k_true).min(SPOT_AMPLITUDES.len()).max(1);
    let mut cells: Vec<usize> = (0..cx * cy).collect();
    shuffle(&mut cells, rng);

    let sigma = 0.6f64.max(radius as f64 / 1.8);
    let pattern_len = spec.px * spec.py;
    let mut bases = Vec::with_capacity(spec.k_true);
    for k in 0..spec.k_true {
        let mut basis = vec![0.0f64; pattern_len];
        for s in 0..spots_per_cluster {
            let cell_idx = cells[k * spots_per_cluster + s];
            let (ci, cj) = (cell_idx / cy, cell_idx % cy);
            let (center_x, center_y) = (ci * cell + radius, cj * cell + radius);
            let amp = SPOT_AMPLITUDES[s];
            for dx in -(radius as isize)..=(radius as isize) {
                for dy in -(radius as isize)..=(radius as isize) {
                    let x = center_x as isize + dx;
                    let y = center_y as isize + dy;
                    let value =
                        amp * (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    basis[x as usize * spec.py + y as usize] += value;
                }
            }
        }
        // Quantize bases too, so noiseless columns equal them bit-exactly.
        for v in basis.iter_mut() {
            *v = *v as f32 as f64;
        }
        bases.push(basis);
    }
    Ok(bases)
}

/// Fisher-Yates with our seeded RNG.
fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Splits the scan grid into `k` contiguous runs along a boustrophedon walk,
/// balanced to within one position.
fn snake_partition(m: usize, n: usize, k: usize) -> Vec<usize> {
    let total = m * n;
    let base = total / k;
    let extra = total % k;
    let mut labels = vec![0usize; total];
    let mut cluster = 0usize;
    let mut remaining = base + usize::from(extra > 0);
    let mut used = 1usize;
    for step in 0..total {
        let r = step / n;
        let c = if r % 2 == 0 { step % n } else { n - 1 - step % n };
        if remaining == 0 {
            cluster += 1;
            remaining = base + usize::from(used < extra);
            used += 1;
        }
        labels[r * n + c] = cluster;
        remaining -= 1;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::reshape_4d_to_2d;

    fn spec(k_true: usize, noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            m: 6,
            n: 6,
            px: 16,
            py: 16,
            k_true,
            noise_sigma: noise,
            overlaps: vec![],
            seed,
        }
    }

    #[test]
    fn noiseless_columns_equal_basis_vectors() {
        let (stack, truth) = generate_synthetic(&spec(4, 0.0, 3)).unwrap();
        let matrix = reshape_4d_to_2d(&stack);
        for j in 0..matrix.cols() {
            let col: Vec<f64> = matrix.values().column(j).to_vec();
            let label = truth.labels[j];
            assert_eq!(col, truth.basis_flat(label), "column {j}");
        }
    }

    #[test]
    fn k1_gives_rank_one_matrix() {
        let (stack, _) = generate_synthetic(&spec(1, 0.0, 5)).unwrap();
        let matrix = reshape_4d_to_2d(&stack);
        let first: Vec<f64> = matrix.values().column(0).to_vec();
        for j in 1..matrix.cols() {
            let col: Vec<f64> = matrix.values().column(j).to_vec();
            assert_eq!(col, first);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = SyntheticSpec {
            overlaps: vec![OverlapSpec {
                rows: (2, 4),
                cols: (0, 6),
                cluster_a: 0,
                cluster_b: 1,
                mix: 0.45,
            }],
            ..spec(4, 0.5, 99)
        };
        let (a, ta) = generate_synthetic(&s).unwrap();
        let (b, tb) = generate_synthetic(&s).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ta.labels, tb.labels);
        assert_eq!(ta.bases, tb.bases);
    }

    #[test]
    fn partition_is_balanced_and_complete() {
        let labels = snake_partition(7, 5, 4);
        let mut counts = vec![0usize; 4];
        for &l in &labels {
            counts[l] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 35);
        assert!(counts.iter().all(|&c| c == 8 || c == 9), "{counts:?}");
    }

    #[test]
    fn bases_have_equal_norms_and_disjoint_support() {
        let (_, truth) = generate_synthetic(&spec(4, 0.0, 17)).unwrap();
        let norms: Vec<f64> = (0..4)
            .map(|c| truth.basis_flat(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for w in norms.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-6, "norms differ: {norms:?}");
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let dot: f64 = truth
                    .basis_flat(a)
                    .iter()
                    .zip(truth.basis_flat(b))
                    .map(|(x, y)| x * y)
                    .sum();
                assert_eq!(dot, 0.0, "bases {a} and {b} share support");
            }
        }
    }

    #[test]
    fn overlap_blends_patterns() {
        let s = SyntheticSpec {
            overlaps: vec![OverlapSpec {
                rows: (0, 1),
                cols: (0, 2),
                cluster_a: 0,
                cluster_b: 1,
                mix: 0.45,
            }],
            ..spec(2, 0.0, 2)
        };
        let (stack, truth) = generate_synthetic(&s).unwrap();
        let expected: Vec<f64> = truth
            .basis_flat(0)
            .iter()
            .zip(truth.basis_flat(1))
            .map(|(&a, b)| (0.55 * a + 0.45 * b) as f32 as f64)
            .collect();
        assert_eq!(stack.pattern(0, 0), &expected[..]);
        assert_eq!(truth.mix[0], 0.45);
        assert_eq!(truth.label_at(0, 0), 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            generate_synthetic(&spec(0, 0.0, 1)).unwrap_err(),
            Error::InvalidSpec(_)
        ));
        assert!(matches!(
            generate_synthetic(&spec(37, 0.0, 1)).unwrap_err(),
            Error::InvalidSpec(_)
        ));
        let bad_mix = SyntheticSpec {
            overlaps: vec![OverlapSpec {
                rows: (0, 1),
                cols: (0, 1),
                cluster_a: 0,
                cluster_b: 1,
                mix: 1.0,
            }],
            ..spec(2, 0.0, 1)
        };
        assert!(matches!(
            generate_synthetic(&bad_mix).unwrap_err(),
            Error::InvalidSpec(_)
        ));
    }
}
