//! Cluster assignment, representative/mean patterns, and overlap detection
//! from the coefficient matrix.
//!
//! Assignment and ratio computation read H with columns normalized to unit
//! sum (zero columns stay zero), so weights act as per-position cluster
//! probabilities. Both are therefore well-defined only for the canonical
//! gauge produced by `nmf::normalize_gauge`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::stack::{DataMatrix, ScanStack4D};

/// Label, ratio and overlap-class maps over the scan grid.
#[derive(Debug, Clone)]
pub struct ClusterMaps {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Argmax cluster per scan position, row-major.
    pub labels: Vec<usize>,
    /// Second/first weight per scan position, row-major, in [0, 1].
    pub ratio: Vec<f64>,
    /// Highest threshold index exceeded (0 = none), row-major.
    pub overlap_classes: Vec<u8>,
    pub thresholds: Vec<f64>,
}

/// Per-cluster representative (scaled W column) and raw mean patterns.
#[derive(Debug, Clone)]
pub struct ClusterPatterns {
    pub representatives: Vec<Array2<f64>>,
    pub raw_means: Vec<Array2<f64>>,
    pub member_counts: Vec<usize>,
    /// Clusters that own no scan position; reported, never dropped.
    pub empty_clusters: Vec<usize>,
}

/// Columns scaled to unit sum; zero columns are left as zeros.
pub fn normalize_h_columns(h: &Array2<f64>) -> Array2<f64> {
    let mut out = h.clone();
    for mut col in out.columns_mut() {
        let sum: f64 = col.iter().sum();
        if sum > 0.0 {
            col.mapv_inplace(|v| v / sum);
        }
    }
    out
}

/// Argmax cluster per column; ties break toward the smallest row index and
/// all-zero columns map to cluster 0.
pub fn assign_clusters(h: &Array2<f64>) -> Result<Vec<usize>> {
    if h.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let h = normalize_h_columns(h);
    let mut labels = Vec::with_capacity(h.ncols());
    let mut zero_columns = 0usize;
    for col in h.columns() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i] > col[best] {
                best = i;
            }
        }
        if col[best] == 0.0 {
            zero_columns += 1;
            best = 0;
        }
        labels.push(best);
    }
    if zero_columns > 0 {
        log::warn!("{zero_columns} all-zero H columns assigned to cluster 0");
    }
    Ok(labels)
}

/// Second-largest over largest weight per column; 0/0 is defined as 0.
pub fn weight_ratio(h: &Array2<f64>) -> Result<Vec<f64>> {
    if h.nrows() < 2 {
        return Err(Error::NeedTwoClusters(h.nrows()));
    }
    let h = normalize_h_columns(h);
    let mut ratios = Vec::with_capacity(h.ncols());
    for col in h.columns() {
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &v in col.iter() {
            if v > first {
                second = first;
                first = v;
            } else if v > second {
                second = v;
            }
        }
        ratios.push(if first > 0.0 { second / first } else { 0.0 });
    }
    Ok(ratios)
}

/// Number of thresholds each ratio meets: `class[j] = |{t : ratio[j] >= t}|`.
pub fn overlap_classes(ratio: &[f64], thresholds: &[f64]) -> Result<Vec<u8>> {
    if thresholds.is_empty()
        || thresholds.len() > u8::MAX as usize
        || thresholds.windows(2).any(|w| w[0] >= w[1])
        || thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
    {
        return Err(Error::BadThresholds);
    }
    Ok(ratio
        .iter()
        .map(|&r| thresholds.iter().filter(|&&t| r >= t).count() as u8)
        .collect())
}

/// Cluster c's representative: its W column scaled by the maximum H weight
/// in row c, reshaped to `(px, py)`.
pub fn representative_patterns(
    w: &Array2<f64>,
    h: &Array2<f64>,
    px: usize,
    py: usize,
) -> Result<Vec<Array2<f64>>> {
    if w.nrows() != px * py {
        return Err(Error::ShapeMismatch {
            expected: format!("W with {} rows", px * py),
            actual: format!("W with {} rows", w.nrows()),
        });
    }
    if w.ncols() != h.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("H with {} rows", w.ncols()),
            actual: format!("H with {} rows", h.nrows()),
        });
    }
    let mut patterns = Vec::with_capacity(w.ncols());
    for c in 0..w.ncols() {
        let scale = h.row(c).iter().copied().fold(0.0f64, f64::max);
        let flat: Vec<f64> = w.column(c).iter().map(|&v| v * scale).collect();
        patterns.push(Array2::from_shape_vec((px, py), flat).expect("length checked"));
    }
    Ok(patterns)
}

/// Elementwise mean of each cluster's member patterns plus member counts;
/// empty clusters yield a zero image with count 0.
pub fn raw_mean_patterns(
    stack: &ScanStack4D,
    labels: &[usize],
    k: usize,
) -> Result<ClusterPatternsMeans> {
    if labels.len() != stack.scan_len() {
        return Err(Error::LengthMismatch {
            expected: stack.scan_len(),
            actual: labels.len(),
        });
    }
    mean_patterns_impl(
        labels,
        k,
        stack.px(),
        stack.py(),
        |j| stack.pattern(j / stack.n(), j % stack.n()).to_vec(),
    )
}

/// Same as [`raw_mean_patterns`] but reading columns of the data matrix.
pub fn raw_mean_patterns_from_matrix(
    v: &DataMatrix,
    labels: &[usize],
    px: usize,
    py: usize,
    k: usize,
) -> Result<ClusterPatternsMeans> {
    if labels.len() != v.cols() {
        return Err(Error::LengthMismatch {
            expected: v.cols(),
            actual: labels.len(),
        });
    }
    if px * py != v.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("px*py = {}", v.rows()),
            actual: format!("{px}*{py}"),
        });
    }
    mean_patterns_impl(labels, k, px, py, |j| v.values().column(j).to_vec())
}

/// Mean patterns, counts, and the list of empty clusters.
#[derive(Debug, Clone)]
pub struct ClusterPatternsMeans {
    pub means: Vec<Array2<f64>>,
    pub counts: Vec<usize>,
    pub empty_clusters: Vec<usize>,
}

fn mean_patterns_impl(
    labels: &[usize],
    k: usize,
    px: usize,
    py: usize,
    column: impl Fn(usize) -> Vec<f64>,
) -> Result<ClusterPatternsMeans> {
    let pattern_len = px * py;
    let mut sums = vec![vec![0.0f64; pattern_len]; k];
    let mut counts = vec![0usize; k];
    for (j, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidSpec(format!(
                "label {label} out of range for k = {k}"
            )));
        }
        counts[label] += 1;
        let pattern = column(j);
        for (s, v) in sums[label].iter_mut().zip(&pattern) {
            *s += v;
        }
    }
    let mut empty = Vec::new();
    let mut means = Vec::with_capacity(k);
    for (c, mut sum) in sums.into_iter().enumerate() {
        if counts[c] == 0 {
            empty.push(c);
        } else {
            let inv = 1.0 / counts[c] as f64;
            for s in sum.iter_mut() {
                *s *= inv;
            }
        }
        means.push(Array2::from_shape_vec((px, py), sum).expect("length fixed"));
    }
    if !empty.is_empty() {
        log::warn!("empty clusters: {empty:?}");
    }
    Ok(ClusterPatternsMeans {
        means,
        counts,
        empty_clusters: empty,
    })
}

/// Representatives plus raw means for one factorization of a stack.
pub fn cluster_patterns(
    stack: &ScanStack4D,
    w: &Array2<f64>,
    h: &Array2<f64>,
) -> Result<ClusterPatterns> {
    let labels = assign_clusters(h)?;
    let representatives = representative_patterns(w, h, stack.px(), stack.py())?;
    let means = raw_mean_patterns(stack, &labels, w.ncols())?;
    Ok(ClusterPatterns {
        representatives,
        raw_means: means.means,
        member_counts: means.counts,
        empty_clusters: means.empty_clusters,
    })
}

/// Builds all three maps from a factorization's H matrix.
pub fn build_cluster_maps(
    h: &Array2<f64>,
    m: usize,
    n: usize,
    thresholds: &[f64],
) -> Result<ClusterMaps> {
    if h.ncols() != m * n {
        return Err(Error::ShapeMismatch {
            expected: format!("H with {} columns", m * n),
            actual: format!("H with {} columns", h.ncols()),
        });
    }
    let labels = assign_clusters(h)?;
    let ratio = if h.nrows() >= 2 {
        weight_ratio(h)?
    } else {
        vec![0.0; h.ncols()]
    };
    let classes = overlap_classes(&ratio, thresholds)?;
    Ok(ClusterMaps {
        m,
        n,
        k: h.nrows(),
        labels,
        ratio,
        overlap_classes: classes,
        thresholds: thresholds.to_vec(),
    })
}

/// Fixed 16-color label palette (RGB triples).
pub const LABEL_PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Overlap class colors for classes 1..=5; class 0 is transparent black and
/// longer threshold lists cycle through these.
pub const OVERLAP_PALETTE: [[u8; 3]; 5] = [
    [255, 0, 0],
    [255, 165, 0],
    [255, 255, 0],
    [0, 200, 0],
    [0, 0, 255],
];

fn png_error(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::IoFailure(io),
        other => Error::IoFailure(std::io::Error::other(other.to_string())),
    }
}

fn write_indexed_png(
    path: &Path,
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[u8],
    transparent_zero: bool,
) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette.to_vec());
    if transparent_zero {
        encoder.set_trns(vec![0u8]);
    }
    let mut writer = encoder.write_header().map_err(png_error)?;
    writer.write_image_data(indices).map_err(png_error)?;
    Ok(())
}

fn write_gray16_png(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(png_error)?;
    let mut bytes = Vec::with_capacity(values.len() * 2);
    for v in values {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer.write_image_data(&bytes).map_err(png_error)?;
    Ok(())
}

/// Writes `labels.png` (16-color indexed), `ratio.png` (16-bit grayscale,
/// ratio * 65535), `overlap.png` (indexed, class 0 transparent) and
/// `legend.json` into `dir`, file names prefixed with `prefix`. Returns the
/// written paths.
pub fn render_maps(maps: &ClusterMaps, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let (w, h) = (maps.n, maps.m);
    let join = |name: &str| -> PathBuf { dir.join(format!("{prefix}{name}")) };

    let labels_path = join("labels.png");
    let label_indices: Vec<u8> = maps.labels.iter().map(|&l| (l % 16) as u8).collect();
    let label_palette: Vec<u8> = LABEL_PALETTE.iter().flatten().copied().collect();
    write_indexed_png(&labels_path, w, h, &label_indices, &label_palette, false)?;

    let ratio_path = join("ratio.png");
    let ratio_values: Vec<u16> = maps
        .ratio
        .iter()
        .map(|&r| (r.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_gray16_png(&ratio_path, w, h, &ratio_values)?;

    let overlap_path = join("overlap.png");
    let class_count = maps.thresholds.len() + 1;
    let mut overlap_palette = vec![0u8, 0, 0];
    for class in 1..class_count {
        overlap_palette.extend_from_slice(&OVERLAP_PALETTE[(class - 1) % OVERLAP_PALETTE.len()]);
    }
    write_indexed_png(&overlap_path, w, h, &maps.overlap_classes, &overlap_palette, true)?;

    let legend_path = join("legend.json");
    let classes: Vec<serde_json::Value> = (0..class_count)
        .map(|class| {
            let rgba: [u8; 4] = if class == 0 {
                [0, 0, 0, 0]
            } else {
                let rgb = OVERLAP_PALETTE[(class - 1) % OVERLAP_PALETTE.len()];
                [rgb[0], rgb[1], rgb[2], 255]
            };
            serde_json::json!({
                "class": class,
                "threshold": if class == 0 {
                    serde_json::Value::Null
                } else {
                    serde_json::json!(maps.thresholds[class - 1])
                },
                "rgba": rgba,
            })
        })
        .collect();
    let legend = serde_json::json!({
        "overlap_classes": classes,
        "label_palette": LABEL_PALETTE,
        "notes": "labels are 0-based cluster indices; labels.png uses palette index label % 16",
    });
    std::fs::write(&legend_path, format!("{:#}\n", legend))?;

    Ok(vec![labels_path, ratio_path, overlap_path, legend_path])
}
