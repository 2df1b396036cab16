//! Whole-run orchestration: filter, reshape, sweep, two decision levels,
//! final factorization, maps, and artifact writing.
//!
//! Every artifact is written deterministically from the effective config, so
//! re-running from the emitted `run_manifest.json` reproduces each CSV/JSON
//! byte for byte regardless of worker count. Worker count is deliberately
//! not part of the manifest: it affects scheduling, never results.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decide::{choose_k, find_knee, range_of_interest, score_candidate, DecisionReport};
use crate::error::{Error, Result};
use crate::io::{detect_format, load_stack, npy};
use crate::iqa::{pairwise_matrix, IqaParams, Metric};
use crate::maps::{build_cluster_maps, cluster_patterns, render_maps};
use crate::nmf::{sweep, Factorization, NmfConfig, SweepResult};
use crate::preprocess::{mean_filter, nsd_matrix, FilterConfig};
use crate::stack::{reshape_4d_to_2d, ScanStack4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    #[default]
    None,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for NmfSettings {
    fn default() -> Self {
        let base = NmfConfig::default();
        Self {
            max_iter: base.max_iter,
            tol: base.tol,
            epsilon: base.epsilon,
            seed: base.seed,
        }
    }
}

impl NmfSettings {
    pub fn to_config(&self, k: usize) -> NmfConfig {
        NmfConfig {
            k,
            max_iter: self.max_iter,
            tol: self.tol,
            epsilon: self.epsilon,
            seed: self.seed,
            init: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecideSettings {
    pub tau: f64,
    pub half_width: usize,
    pub psnr_floor: f64,
}

impl Default for DecideSettings {
    fn default() -> Self {
        Self {
            tau: 0.05,
            half_width: 4,
            psnr_floor: 40.0,
        }
    }
}

/// Effective configuration for one `run` invocation; also the payload echoed
/// into `run_manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub filter: FilterKind,
    pub k_min: usize,
    pub k_max: usize,
    pub thresholds: Vec<f64>,
    pub nmf: NmfSettings,
    pub decide: DecideSettings,
    pub iqa: IqaParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            filter: FilterKind::None,
            k_min: 2,
            k_max: 16,
            thresholds: vec![0.75, 0.80, 0.85, 0.90, 0.95],
            nmf: NmfSettings::default(),
            decide: DecideSettings::default(),
            iqa: IqaParams::default(),
        }
    }
}

impl PipelineConfig {
    /// Checks every downstream precondition before any stage runs.
    pub fn validate(&self) -> Result<()> {
        if self.input.as_os_str().is_empty() {
            return Err(Error::InvalidSpec("input path is empty".into()));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::InvalidSpec(format!(
                "bad k range [{}, {}]",
                self.k_min, self.k_max
            )));
        }
        if self.nmf.max_iter < 1 {
            return Err(Error::InvalidSpec("nmf.max_iter must be >= 1".into()));
        }
        if !(self.nmf.tol >= 0.0) {
            return Err(Error::InvalidSpec("nmf.tol must be >= 0".into()));
        }
        if !(self.nmf.epsilon > 0.0) {
            return Err(Error::InvalidSpec("nmf.epsilon must be > 0".into()));
        }
        if !(self.decide.tau >= 0.0) {
            return Err(Error::InvalidSpec("decide.tau must be >= 0".into()));
        }
        if !self.decide.psnr_floor.is_finite() {
            return Err(Error::InvalidSpec("decide.psnr_floor must be finite".into()));
        }
        if self.thresholds.is_empty()
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
        {
            return Err(Error::BadThresholds);
        }
        self.iqa.validate()?;
        Ok(())
    }
}

/// A pipeline failure carrying the stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = std::result::Result<T, StageError>;

fn at_stage<T>(stage: &'static str, result: Result<T>) -> StageResult<T> {
    result.map_err(|source| StageError { stage, source })
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: DecisionReport,
    pub chosen: Factorization,
    pub sweep: SweepResult,
    pub output_dir: PathBuf,
}

/// Runs the whole pipeline and writes all artifacts into
/// `config.output_dir`. On failure, already-written artifacts are retained
/// and a `FAILED` marker names the stage.
pub fn run_pipeline(config: &PipelineConfig) -> StageResult<PipelineOutcome> {
    match run_stages(config) {
        Ok(outcome) => Ok(outcome),
        Err(err) => {
            let marker = config.output_dir.join("FAILED");
            let _ = std::fs::write(&marker, format!("{err}\n"));
            Err(err)
        }
    }
}

fn run_stages(config: &PipelineConfig) -> StageResult<PipelineOutcome> {
    at_stage("config", config.validate())?;
    let out = &config.output_dir;
    at_stage("config", std::fs::create_dir_all(out).map_err(Error::from))?;

    // Load and optionally filter.
    let stack = at_stage(
        "load",
        load_stack(&config.input, detect_format(&config.input)),
    )?;
    let stack = match config.filter {
        FilterKind::None => stack,
        FilterKind::Mean => mean_filter(&stack, FilterConfig::default()),
    };

    let v = reshape_4d_to_2d(&stack);
    let (px, py) = (stack.px(), stack.py());

    // Sweep and its loss curve.
    let base = config.nmf.to_config(config.k_min);
    let sweep_result = at_stage("sweep", sweep(&v, config.k_min, config.k_max, &base))?;
    at_stage(
        "sweep",
        write_text(&out.join("loss_curve.csv"), &sweep_result.loss_curve_csv()),
    )?;

    // Decision level 1 and 2.
    let knee = at_stage(
        "decide",
        find_knee(config.k_min, &sweep_result.losses, config.decide.tau),
    )?;
    let (lo, hi) = range_of_interest(knee, config.decide.half_width, config.k_min, config.k_max);
    let mut candidates = Vec::new();
    for k in lo..=hi {
        let fac = sweep_result
            .factorization_for(k)
            .expect("range is clipped to the sweep interval");
        candidates.push(at_stage(
            "decide",
            score_candidate(&v, fac, px, py, &config.iqa),
        )?);
    }
    let chosen = at_stage("decide", choose_k(&candidates, config.decide.psnr_floor))?;
    let mut flags = Vec::new();
    if chosen.floor_relaxed {
        flags.push("floor-relaxed".to_string());
    }
    let report = DecisionReport {
        knee_k: knee,
        range_lo: lo,
        range_hi: hi,
        per_candidate: candidates,
        chosen_k: chosen.k,
        rule: DecisionReport::rule_text(
            config.decide.tau,
            config.decide.half_width,
            config.decide.psnr_floor,
        ),
        flags,
    };
    at_stage(
        "decide",
        write_text(&out.join("decision.json"), &report.to_json_string()),
    )?;

    // Final factorization: the sweep run at the chosen k (its derived seed
    // makes a re-run bit-identical, so the sweep result is reused).
    let final_fac = sweep_result
        .factorization_for(chosen.k)
        .expect("chosen k lies in the sweep interval")
        .clone();
    at_stage("factorize", export_factorization(out, &final_fac))?;

    // Maps and per-cluster patterns.
    let maps = at_stage(
        "maps",
        build_cluster_maps(&final_fac.h, stack.m(), stack.n(), &config.thresholds),
    )?;
    let patterns = at_stage("maps", cluster_patterns(&stack, &final_fac.w, &final_fac.h))?;
    at_stage("maps", render_maps(&maps, out, "").map(|_| ()))?;
    at_stage(
        "maps",
        export_maps_and_patterns(out, &maps, &patterns, &stack, &config.iqa),
    )?;

    // Manifest last: its presence marks a complete run.
    at_stage("manifest", write_manifest(out, config, &sweep_result, &report))?;

    Ok(PipelineOutcome {
        report,
        chosen: final_fac,
        sweep: sweep_result,
        output_dir: out.clone(),
    })
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

/// Writes W.npy, H.npy and loss_history.npy for one factorization.
pub fn export_factorization(out: &Path, fac: &Factorization) -> Result<()> {
    npy::write_f64(
        &out.join("W.npy"),
        &[fac.w.nrows(), fac.w.ncols()],
        fac.w.as_slice().expect("W is standard layout"),
    )?;
    npy::write_f64(
        &out.join("H.npy"),
        &[fac.h.nrows(), fac.h.ncols()],
        fac.h.as_slice().expect("H is standard layout"),
    )?;
    npy::write_f64(
        &out.join("loss_history.npy"),
        &[fac.loss_history.len()],
        &fac.loss_history,
    )?;
    Ok(())
}

/// Writes the label/ratio arrays, per-cluster pattern files, pairwise IQA
/// matrices and the NSD table for one clustering.
pub fn export_maps_and_patterns(
    out: &Path,
    maps: &crate::maps::ClusterMaps,
    patterns: &crate::maps::ClusterPatterns,
    stack: &ScanStack4D,
    iqa: &IqaParams,
) -> Result<()> {
    let labels_f64: Vec<f64> = maps.labels.iter().map(|&l| l as f64).collect();
    npy::write_f64(&out.join("labels.npy"), &[maps.m, maps.n], &labels_f64)?;
    npy::write_f64(&out.join("ratio.npy"), &[maps.m, maps.n], &maps.ratio)?;

    for (c, (rep, mean)) in patterns
        .representatives
        .iter()
        .zip(&patterns.raw_means)
        .enumerate()
    {
        npy::write_f64(
            &out.join(format!("representative_{c:02}.npy")),
            &[stack.px(), stack.py()],
            rep.as_slice().expect("standard layout"),
        )?;
        npy::write_f64(
            &out.join(format!("raw_mean_{c:02}.npy")),
            &[stack.px(), stack.py()],
            mean.as_slice().expect("standard layout"),
        )?;
    }

    for metric in [Metric::Ssim, Metric::Gmsd, Metric::Mdsi, Metric::Psnr] {
        let matrix = pairwise_matrix(&patterns.representatives, metric, iqa)?;
        write_text(
            &out.join(format!("iqa_{}.csv", metric.as_str())),
            &matrix.to_csv(),
        )?;
    }

    let table = nsd_matrix(&[(stack.provenance.clone(), patterns.representatives.clone())])?;
    write_text(&out.join("nsd.csv"), &table.to_csv())?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    config: &PipelineConfig,
    sweep_result: &SweepResult,
    report: &DecisionReport,
) -> Result<()> {
    let sweep_seeds: Vec<serde_json::Value> = sweep_result
        .k_values
        .iter()
        .map(|&k| serde_json::json!({"k": k, "seed": config.nmf.seed.wrapping_add(k as u64)}))
        .collect();
    let manifest = serde_json::json!({
        "format": "stemfactor-run-manifest",
        "version": 1,
        "config": serde_json::to_value(config).map_err(|e| Error::InvalidSpec(e.to_string()))?,
        "derived_seeds": sweep_seeds,
        "final_seed": config.nmf.seed.wrapping_add(report.chosen_k as u64),
        "chosen_k": report.chosen_k,
    });
    write_text(&out.join("run_manifest.json"), &format!("{manifest:#}\n"))
}

/// Reads the `config` block back out of a run manifest.
pub fn config_from_manifest(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedHeader(format!("bad manifest JSON: {e}")))?;
    let config = value
        .get("config")
        .ok_or_else(|| Error::MalformedHeader("manifest has no config block".into()))?;
    serde_json::from_value(config.clone())
        .map_err(|e| Error::MalformedHeader(format!("bad manifest config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{save_stack, StackFormat};
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    fn small_config(dir: &Path, seed: u64) -> PipelineConfig {
        let spec = SyntheticSpec {
            m: 10,
            n: 10,
            px: 16,
            py: 16,
            k_true: 4,
            noise_sigma: 0.02,
            overlaps: vec![],
            seed,
        };
        let (stack, _) = generate_synthetic(&spec).unwrap();
        let input = dir.join("stack.stem4d");
        save_stack(&stack, &input, StackFormat::Container).unwrap();
        PipelineConfig {
            input,
            output_dir: dir.join("out"),
            k_min: 2,
            k_max: 7,
            nmf: NmfSettings {
                max_iter: 120,
                tol: 1e-4,
                seed: 1,
                ..NmfSettings::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn pipeline_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), 8);
        let outcome = run_pipeline(&config).unwrap();
        assert!((2..=7).contains(&outcome.report.chosen_k));
        for name in [
            "loss_curve.csv",
            "decision.json",
            "W.npy",
            "H.npy",
            "loss_history.npy",
            "labels.npy",
            "ratio.npy",
            "labels.png",
            "ratio.png",
            "overlap.png",
            "legend.json",
            "iqa_ssim.csv",
            "iqa_gmsd.csv",
            "iqa_mdsi.csv",
            "iqa_psnr.csv",
            "nsd.csv",
            "run_manifest.json",
        ] {
            assert!(config.output_dir.join(name).exists(), "missing {name}");
        }
        assert!(!config.output_dir.join("FAILED").exists());
        for c in 0..outcome.report.chosen_k {
            assert!(config
                .output_dir
                .join(format!("representative_{c:02}.npy"))
                .exists());
        }

        let roundtrip = config_from_manifest(&config.output_dir.join("run_manifest.json")).unwrap();
        assert_eq!(roundtrip.k_max, config.k_max);
        assert_eq!(roundtrip.nmf.seed, config.nmf.seed);
    }

    #[test]
    fn missing_input_fails_at_load_with_marker() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            input: dir.path().join("nope.stem4d"),
            output_dir: dir.path().join("out"),
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&config).unwrap_err();
        assert_eq!(err.stage, "load");
        let marker = std::fs::read_to_string(config.output_dir.join("FAILED")).unwrap();
        assert!(marker.contains("load"));
    }

    #[test]
    fn invalid_config_is_rejected_before_stages() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(dir.path(), 3);
        config.k_min = 9;
        config.k_max = 4;
        let err = run_pipeline(&config).unwrap_err();
        assert_eq!(err.stage, "config");
    }
}
