//! Full-reference image quality metrics over diffraction patterns.
//!
//! All metrics operate on whole images with population (1/N) statistics:
//! SSIM uses global moments rather than a sliding window, and GMSD/MDSI pool
//! their similarity maps with the population standard deviation. Stability
//! constants default to the conventional 8-bit values rescaled to the
//! effective dynamic range, since diffraction intensities are unbounded.

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Metric knobs. `None` constants resolve to the conventional defaults for
/// the effective dynamic range at call time; `max_value = None` takes the
/// maximum pixel value over the compared pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqaParams {
    pub max_value: Option<f64>,
    pub ssim_c1: Option<f64>,
    pub ssim_c2: Option<f64>,
    pub ssim_c3: Option<f64>,
    pub ssim_alpha: f64,
    pub ssim_beta: f64,
    pub ssim_gamma: f64,
    pub gmsd_c: Option<f64>,
    pub mdsi_c1: Option<f64>,
    pub mdsi_c2: Option<f64>,
    pub mdsi_c3: Option<f64>,
    /// Gradient/chromaticity blend weight in [0, 1].
    pub mdsi_alpha: f64,
}

impl Default for IqaParams {
    fn default() -> Self {
        Self {
            max_value: None,
            ssim_c1: None,
            ssim_c2: None,
            ssim_c3: None,
            ssim_alpha: 1.0,
            ssim_beta: 1.0,
            ssim_gamma: 1.0,
            gmsd_c: None,
            mdsi_c1: None,
            mdsi_c2: None,
            mdsi_c3: None,
            mdsi_alpha: 0.6,
        }
    }
}

impl IqaParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_value", self.max_value),
            ("ssim_c1", self.ssim_c1),
            ("ssim_c2", self.ssim_c2),
            ("ssim_c3", self.ssim_c3),
            ("gmsd_c", self.gmsd_c),
            ("mdsi_c1", self.mdsi_c1),
            ("mdsi_c2", self.mdsi_c2),
            ("mdsi_c3", self.mdsi_c3),
        ];
        for (name, value) in positive {
            if let Some(v) = value {
                if !(v > 0.0) {
                    return Err(Error::InvalidSpec(format!("{name} must be > 0")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mdsi_alpha) {
            return Err(Error::InvalidSpec("mdsi_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Dynamic-range maximum for a compared pair.
    fn effective_max(&self, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let observed = self.max_value.unwrap_or_else(|| {
            a.iter()
                .chain(b.iter())
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        });
        if observed > 0.0 {
            observed
        } else {
            1.0
        }
    }

    fn ssim_constants(&self, max: f64) -> (f64, f64, f64) {
        let c1 = self.ssim_c1.unwrap_or((0.01 * max) * (0.01 * max));
        let c2 = self.ssim_c2.unwrap_or((0.03 * max) * (0.03 * max));
        let c3 = self.ssim_c3.unwrap_or(c2 / 2.0);
        (c1, c2, c3)
    }

    fn gmsd_constant(&self, max: f64) -> f64 {
        self.gmsd_c
            .unwrap_or(170.0 * (max / 255.0) * (max / 255.0))
    }

    fn mdsi_constants(&self, max: f64) -> (f64, f64, f64) {
        let scale = (max / 255.0) * (max / 255.0);
        (
            self.mdsi_c1.unwrap_or(140.0 * scale),
            self.mdsi_c2.unwrap_or(55.0 * scale),
            self.mdsi_c3.unwrap_or(550.0 * scale),
        )
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let total = Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    Ok(total / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images are identical.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, params: &IqaParams) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let max = params.effective_max(a, b);
    Ok(10.0 * (max * max / err).log10())
}

/// Qualitative PSNR band: above 40 dB is excellent, below 20 unacceptable.
pub fn psnr_band(db: f64) -> &'static str {
    if db > 40.0 {
        "excellent"
    } else if db < 20.0 {
        "unacceptable"
    } else {
        "acceptable"
    }
}

/// Global-statistics SSIM: luminance, contrast and structure terms computed
/// from whole-image population moments.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, params: &IqaParams) -> Result<f64> {
    check_shapes(a, b)?;
    if a.len() < 2 {
        return Err(Error::TooFewPixels);
    }
    let n = a.len() as f64;
    let mu_x = a.sum() / n;
    let mu_y = b.sum() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        let dx = x - mu_x;
        let dy = y - mu_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    });
    var_x /= n;
    var_y /= n;
    cov /= n;
    let (sigma_x, sigma_y) = (var_x.sqrt(), var_y.sqrt());

    let max = params.effective_max(a, b);
    let (c1, c2, c3) = params.ssim_constants(max);
    let luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1);
    let contrast = (2.0 * sigma_x * sigma_y + c2) / (var_x + var_y + c2);
    let structure = (cov + c3) / (sigma_x * sigma_y + c3);

    let powi = |v: f64, e: f64| if e == 1.0 { v } else { v.powf(e) };
    Ok(powi(luminance, params.ssim_alpha)
        * powi(contrast, params.ssim_beta)
        * powi(structure, params.ssim_gamma))
}

/// Per-pixel Sobel gradient magnitude with replicate-edge padding.
pub fn gradient_magnitude(img: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = img.dim();
    if rows < 3 || cols < 3 {
        return Err(Error::TooSmall { rows, cols });
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let v = img[(clamp(r as isize + dr, rows), clamp(c as isize + dc, cols))];
                    // hx = [[-1,0,1],[-2,0,2],[-1,0,1]], hy = hx transposed.
                    let wx = (dc as f64) * (2 - dr.abs()) as f64;
                    let wy = (dr as f64) * (2 - dc.abs()) as f64;
                    gx += wx * v;
                    gy += wy * v;
                }
            }
            out[(r, c)] = (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(out)
}

/// Per-pixel gradient magnitude similarity map, each value in (0, 1].
pub fn gms_map(reference: &Array2<f64>, distorted: &Array2<f64>, params: &IqaParams) -> Result<Array2<f64>> {
    check_shapes(reference, distorted)?;
    let g_ref = gradient_magnitude(reference)?;
    let g_dist = gradient_magnitude(distorted)?;
    let c = params.gmsd_constant(params.effective_max(reference, distorted));
    Ok(similarity_map(&g_ref, &g_dist, c))
}

fn similarity_map(a: &Array2<f64>, b: &Array2<f64>, c: f64) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out).and(a).and(b).for_each(|o, &x, &y| {
        *o = (2.0 * x * y + c) / (x * x + y * y + c);
    });
    out
}

fn population_std(map: &Array2<f64>) -> f64 {
    let n = map.len() as f64;
    let mean = map.sum() / n;
    (map.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Gradient magnitude similarity deviation; 0 means identical structure.
pub fn gmsd(reference: &Array2<f64>, distorted: &Array2<f64>, params: &IqaParams) -> Result<f64> {
    Ok(population_std(&gms_map(reference, distorted, params)?))
}

/// Mean deviation similarity index via deviation pooling; 0 means identical.
///
/// Grayscale inputs are treated as three equal channels, so the luminance is
/// `0.9999 * I` and the two chromaticity channels collapse to fixed scalings
/// of intensity (`-0.01 * I` and `-0.09 * I`); the chromaticity similarity
/// degenerates to an intensity-similarity term. Note the fusion correction
/// term makes MDSI reference-sensitive: mdsi(a, b) != mdsi(b, a) in general.
pub fn mdsi(reference: &Array2<f64>, distorted: &Array2<f64>, params: &IqaParams) -> Result<f64> {
    check_shapes(reference, distorted)?;
    let (rows, cols) = reference.dim();
    if rows < 3 || cols < 3 {
        return Err(Error::TooSmall { rows, cols });
    }
    let max = params.effective_max(reference, distorted);
    let (c1, c2, c3) = params.mdsi_constants(max);
    let alpha = params.mdsi_alpha;

    // Color transform of replicated channels.
    const LUMA: f64 = 0.2989 + 0.5870 + 0.1140;
    const CHROMA_H: f64 = 0.30 + 0.04 - 0.35;
    const CHROMA_M: f64 = 0.34 - 0.60 + 0.17;
    let lum_ref = reference.mapv(|v| v * LUMA);
    let lum_dist = distorted.mapv(|v| v * LUMA);
    let fused = {
        let mut f = &lum_ref + &lum_dist;
        f.mapv_inplace(|v| 0.5 * v);
        f
    };

    let g_ref = gradient_magnitude(&lum_ref)?;
    let g_dist = gradient_magnitude(&lum_dist)?;
    let g_fused = gradient_magnitude(&fused)?;

    let gs = similarity_map(&g_ref, &g_dist, c1);
    let gs_ref_fused = similarity_map(&g_ref, &g_fused, c2);
    let gs_dist_fused = similarity_map(&g_dist, &g_fused, c2);

    let mut pooled = Array2::zeros(reference.dim());
    Zip::from(&mut pooled)
        .and(&gs)
        .and(&gs_dist_fused)
        .and(&gs_ref_fused)
        .and(reference)
        .and(distorted)
        .for_each(|p, &gs, &gs_df, &gs_rf, &r, &d| {
            let gs_hat = gs + gs_df - gs_rf;
            let (h_r, m_r) = (CHROMA_H * r, CHROMA_M * r);
            let (h_d, m_d) = (CHROMA_H * d, CHROMA_M * d);
            let cs_hat = (2.0 * (h_r * h_d + m_r * m_d) + c3)
                / (h_r * h_r + h_d * h_d + m_r * m_r + m_d * m_d + c3);
            *p = alpha * gs_hat + (1.0 - alpha) * cs_hat;
        });
    Ok(population_std(&pooled))
}

/// The four matrix metrics over cluster representatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ssim,
    Psnr,
    Gmsd,
    Mdsi,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
            Metric::Gmsd => "gmsd",
            Metric::Mdsi => "mdsi",
        }
    }

    /// Value of comparing an image with itself.
    pub fn self_value(&self) -> f64 {
        match self {
            Metric::Ssim => 1.0,
            Metric::Psnr => f64::INFINITY,
            Metric::Gmsd | Metric::Mdsi => 0.0,
        }
    }

    /// MDSI is reference-sensitive; the others are symmetric.
    pub fn symmetric(&self) -> bool {
        !matches!(self, Metric::Mdsi)
    }

    pub fn evaluate(&self, reference: &Array2<f64>, distorted: &Array2<f64>, params: &IqaParams) -> Result<f64> {
        match self {
            Metric::Ssim => ssim(reference, distorted, params),
            Metric::Psnr => psnr(reference, distorted, params),
            Metric::Gmsd => gmsd(reference, distorted, params),
            Metric::Mdsi => mdsi(reference, distorted, params),
        }
    }
}

/// Pairwise metric values over k representatives. Entry `(i, j)` holds
/// `metric(reference = i, distorted = j)`; the diagonal is the metric's
/// self-similarity value.
#[derive(Debug, Clone)]
pub struct IqaMatrix {
    pub metric: Metric,
    pub k: usize,
    pub values: Array2<f64>,
}

impl IqaMatrix {
    /// Mean of the off-diagonal entries; `None` for a 1x1 matrix.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        if self.k < 2 {
            return None;
        }
        let mut total = 0.0;
        for i in 0..self.k {
            for j in 0..self.k {
                if i != j {
                    total += self.values[(i, j)];
                }
            }
        }
        Some(total / (self.k * (self.k - 1)) as f64)
    }

    /// CSV with cluster indices on both axes; infinities print as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster");
        for j in 0..self.k {
            out.push_str(&format!(",{}", j + 1));
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(&format!("{}", i + 1));
            for j in 0..self.k {
                out.push_str(&format!(",{}", self.values[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<serde_json::Value>> = (0..self.k)
            .map(|i| {
                (0..self.k)
                    .map(|j| MetricValue(self.values[(i, j)]).to_json())
                    .collect()
            })
            .collect();
        serde_json::json!({
            "metric": self.metric.as_str(),
            "k": self.k,
            "values": rows,
        })
    }
}

/// Fills the k x k matrix; symmetric metrics are evaluated once per
/// unordered pair. Pairs run in parallel, assembly is by index.
pub fn pairwise_matrix(representatives: &[Array2<f64>], metric: Metric, params: &IqaParams) -> Result<IqaMatrix> {
    if representatives.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = representatives.len();
    let dim = representatives[0].dim();
    for rep in representatives {
        if rep.dim() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim:?}"),
                actual: format!("{:?}", rep.dim()),
            });
        }
    }
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            if metric.symmetric() && j < i {
                continue;
            }
            pairs.push((i, j));
        }
    }
    let computed: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            metric
                .evaluate(&representatives[i], &representatives[j], params)
                .map(|v| ((i, j), v))
        })
        .collect::<Result<_>>()?;

    let mut values = Array2::from_elem((k, k), metric.self_value());
    for ((i, j), v) in computed {
        values[(i, j)] = v;
        if metric.symmetric() {
            values[(j, i)] = v;
        }
    }
    Ok(IqaMatrix { metric, k, values })
}

/// A metric score that serializes infinities as the strings "inf"/"-inf".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue(pub f64);

impl MetricValue {
    pub fn to_json(self) -> serde_json::Value {
        if self.0.is_finite() {
            serde_json::json!(self.0)
        } else if self.0 > 0.0 {
            serde_json::Value::String("inf".into())
        } else {
            serde_json::Value::String("-inf".into())
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else if self.0 > 0.0 {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) => Ok(MetricValue(v)),
            Raw::Text(s) => match s.as_str() {
                "inf" => Ok(MetricValue(f64::INFINITY)),
                "-inf" => Ok(MetricValue(f64::NEG_INFINITY)),
                other => Err(D::Error::custom(format!("bad metric value {other:?}"))),
            },
        }
    }
}
