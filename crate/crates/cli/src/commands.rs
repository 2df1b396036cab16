//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ndarray::Array2;

use stemfactor::decide::{
    choose_k, find_knee, range_of_interest, score_candidate, DecisionReport,
};
use stemfactor::io::{detect_format, load_stack, npy, save_stack};
use stemfactor::iqa::IqaParams;
use stemfactor::maps::{build_cluster_maps, cluster_patterns, render_maps};
use stemfactor::nmf::{nmf_factorize, sweep as nmf_sweep, Factorization, NmfConfig};
use stemfactor::pipeline::{
    config_from_manifest, export_factorization, export_maps_and_patterns, run_pipeline,
    FilterKind, PipelineConfig,
};
use stemfactor::preprocess::{mean_filter, FilterConfig};
use stemfactor::stack::{reshape_4d_to_2d, DataMatrix, ScanStack4D};
use stemfactor::synthetic::{generate_synthetic, GroundTruth, OverlapSpec, SyntheticSpec};
use stemfactor::Error;

use crate::CliError;

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenerateArgs {
    /// Scan rows
    #[arg(long)]
    pub m: usize,
    /// Scan columns
    #[arg(long)]
    pub n: usize,
    /// Pattern rows
    #[arg(long)]
    pub px: usize,
    /// Pattern columns
    #[arg(long)]
    pub py: usize,
    /// Number of ground-truth clusters
    #[arg(long)]
    pub k: usize,
    /// Gaussian noise sigma (fraction of the unit basis peak), clipped at 0
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overlap band as row0:row1:col0:col1:cluster_a:cluster_b:mix
    /// (half-open ranges); repeatable
    #[arg(long = "overlap")]
    pub overlaps: Vec<String>,
    /// Stack output (.stem4d container or .npy)
    #[arg(long, default_value = "synthetic.stem4d")]
    pub out: PathBuf,
    /// Ground-truth JSON output (default: <out> with .truth.json)
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

fn parse_overlap(text: &str) -> Result<OverlapSpec, CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 7 {
        return Err(CliError::config(format!(
            "overlap {text:?} must have 7 colon-separated fields \
             row0:row1:col0:col1:cluster_a:cluster_b:mix"
        )));
    }
    let num = |i: usize| -> Result<usize, CliError> {
        parts[i]
            .parse()
            .map_err(|_| CliError::config(format!("bad overlap field {:?}", parts[i])))
    };
    let mix: f64 = parts[6]
        .parse()
        .map_err(|_| CliError::config(format!("bad overlap mix {:?}", parts[6])))?;
    Ok(OverlapSpec {
        rows: (num(0)?, num(1)?),
        cols: (num(2)?, num(3)?),
        cluster_a: num(4)?,
        cluster_b: num(5)?,
        mix,
    })
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let overlaps = args
        .overlaps
        .iter()
        .map(|o| parse_overlap(o))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SyntheticSpec {
        m: args.m,
        n: args.n,
        px: args.px,
        py: args.py,
        k_true: args.k,
        noise_sigma: args.noise_sigma,
        overlaps,
        seed: args.seed,
    };
    let (stack, truth) = generate_synthetic(&spec)?;
    save_stack(&stack, &args.out, detect_format(&args.out))?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| args.out.with_extension("truth.json"));
    write_truth(&truth_path, &truth)?;
    println!("wrote {} and {}", args.out.display(), truth_path.display());
    Ok(())
}

fn write_truth(path: &Path, truth: &GroundTruth) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(truth)
        .map_err(|e| Error::InvalidSpec(format!("truth serialization: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// convert / filter
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output format is picked from the extension (.npy vs container)
    #[arg(long)]
    pub output: PathBuf,
}

pub fn convert(args: &ConvertArgs) -> Result<(), CliError> {
    require_exists(&args.input)?;
    let stack = load_stack(&args.input, detect_format(&args.input))?;
    save_stack(&stack, &args.output, detect_format(&args.output))?;
    println!("wrote {}", args.output.display());
    Ok(())
}

#[derive(Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = FilterMethod::Mean)]
    pub method: FilterMethod,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FilterMethod {
    /// 3x3 valid-neighbor mean over the scan grid
    Mean,
}

pub fn filter(args: &FilterArgs) -> Result<(), CliError> {
    require_exists(&args.input)?;
    let stack = load_stack(&args.input, detect_format(&args.input))?;
    let filtered = match args.method {
        FilterMethod::Mean => mean_filter(&stack, FilterConfig::default()),
    };
    save_stack(&filtered, &args.output, detect_format(&args.output))?;
    println!("wrote {}", args.output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SweepArgs {
    /// Stack (.stem4d / rank-4 .npy) or data matrix (rank-2 .npy)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 16)]
    pub k_max: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Also write W_k##.npy / H_k##.npy for every candidate
    #[arg(long)]
    pub save_factorizations: bool,
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let v = load_matrix_input(&args.input)?;
    let config = NmfConfig {
        k: args.k_min,
        max_iter: args.max_iter,
        tol: args.tol,
        epsilon: args.epsilon,
        seed: args.seed,
        init: Default::default(),
    };
    let result = nmf_sweep(&v, args.k_min, args.k_max, &config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    let curve = args.out_dir.join("loss_curve.csv");
    std::fs::write(&curve, result.loss_curve_csv()).map_err(Error::from)?;
    if args.save_factorizations {
        for (i, &k) in result.k_values.iter().enumerate() {
            let fac = &result.factorizations[i];
            write_matrix_npy(&args.out_dir.join(format!("W_k{k:02}.npy")), &fac.w)?;
            write_matrix_npy(&args.out_dir.join(format!("H_k{k:02}.npy")), &fac.h)?;
        }
    }
    println!("wrote {}", curve.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// decide
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct DecideArgs {
    /// Loss curve CSV from `sweep` (columns k, k_component_loss, ...)
    #[arg(long)]
    pub loss_curve: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, default_value_t = 4)]
    pub half_width: usize,
    #[arg(long, default_value_t = 40.0)]
    pub psnr_floor: f64,
    /// Data matrix for level-2 scoring; needs --factorizations, --px, --py
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Directory with W_k##.npy / H_k##.npy from `sweep --save-factorizations`
    #[arg(long)]
    pub factorizations: Option<PathBuf>,
    #[arg(long)]
    pub px: Option<usize>,
    #[arg(long)]
    pub py: Option<usize>,
    #[arg(long, default_value = "decision.json")]
    pub out: PathBuf,
}

pub fn decide(args: &DecideArgs) -> Result<(), CliError> {
    require_exists(&args.loss_curve)?;
    let (k_min, ks, losses) = read_loss_curve(&args.loss_curve)?;
    let knee = find_knee(k_min, &losses, args.tau)?;
    let k_max = *ks.last().expect("curve is non-empty");
    let (lo, hi) = range_of_interest(knee, args.half_width, k_min, k_max);

    let level2 = match (&args.matrix, &args.factorizations, args.px, args.py) {
        (None, None, None, None) => None,
        (Some(matrix), Some(dir), Some(px), Some(py)) => Some((matrix, dir, px, py)),
        _ => {
            return Err(CliError::config(
                "level-2 scoring needs all of --matrix, --factorizations, --px, --py",
            ))
        }
    };

    let report = if let Some((matrix_path, fac_dir, px, py)) = level2 {
        require_exists(matrix_path)?;
        let v = load_matrix_input(matrix_path)?;
        let mut candidates = Vec::new();
        for k in lo..=hi {
            let fac = load_saved_factorization(fac_dir, k)?;
            candidates.push(score_candidate(&v, &fac, px, py, &IqaParams::default())?);
        }
        let chosen = choose_k(&candidates, args.psnr_floor)?;
        let mut flags = Vec::new();
        if chosen.floor_relaxed {
            flags.push("floor-relaxed".to_string());
        }
        DecisionReport {
            knee_k: knee,
            range_lo: lo,
            range_hi: hi,
            per_candidate: candidates,
            chosen_k: chosen.k,
            rule: DecisionReport::rule_text(args.tau, args.half_width, args.psnr_floor),
            flags,
        }
    } else {
        DecisionReport {
            knee_k: knee,
            range_lo: lo,
            range_hi: hi,
            per_candidate: Vec::new(),
            chosen_k: knee.clamp(lo, hi),
            rule: DecisionReport::rule_text(args.tau, args.half_width, args.psnr_floor),
            flags: vec!["level2-skipped".to_string()],
        }
    };

    std::fs::write(&args.out, report.to_json_string()).map_err(Error::from)?;
    println!(
        "knee {} range [{}, {}] chosen {} -> {}",
        report.knee_k,
        report.range_lo,
        report.range_hi,
        report.chosen_k,
        args.out.display()
    );
    Ok(())
}

fn read_loss_curve(path: &Path) -> Result<(usize, Vec<usize>, Vec<f64>), CliError> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let mut ks = Vec::new();
    let mut losses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let first = fields.next().unwrap_or_default();
        if idx == 0 && first.parse::<usize>().is_err() {
            continue; // header row
        }
        let k: usize = first
            .parse()
            .map_err(|_| CliError::config(format!("bad k field {first:?} in {}", path.display())))?;
        let loss: f64 = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| CliError::config(format!("bad loss value on line {}", idx + 1)))?;
        ks.push(k);
        losses.push(loss);
    }
    if ks.is_empty() {
        return Err(CliError::config(format!("{} has no data rows", path.display())));
    }
    for pair in ks.windows(2) {
        if pair[1] != pair[0] + 1 {
            return Err(CliError::config("loss curve k values must be consecutive"));
        }
    }
    Ok((ks[0], ks, losses))
}

fn load_saved_factorization(dir: &Path, k: usize) -> Result<Factorization, CliError> {
    let w_path = dir.join(format!("W_k{k:02}.npy"));
    let h_path = dir.join(format!("H_k{k:02}.npy"));
    require_exists(&w_path)?;
    require_exists(&h_path)?;
    let w = read_matrix_npy(&w_path)?;
    let h = read_matrix_npy(&h_path)?;
    Ok(Factorization {
        k,
        seed: 0,
        loss_history: vec![f64::NAN],
        k_component_loss: f64::NAN,
        converged: true,
        iterations_run: 0,
        w,
        h,
    })
}

// ---------------------------------------------------------------------------
// factorize
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct FactorizeArgs {
    /// Stack (.stem4d / rank-4 .npy) or data matrix (rank-2 .npy)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

pub fn factorize(args: &FactorizeArgs) -> Result<(), CliError> {
    let v = load_matrix_input(&args.input)?;
    let config = NmfConfig {
        k: args.k,
        max_iter: args.max_iter,
        tol: args.tol,
        epsilon: args.epsilon,
        seed: args.seed,
        init: Default::default(),
    };
    let fac = nmf_factorize(&v, &config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    export_factorization(&args.out_dir, &fac)?;
    println!(
        "k={} converged={} iterations={} k_component_loss={} -> {}",
        fac.k,
        fac.converged,
        fac.iterations_run,
        fac.k_component_loss,
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// maps
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct MapsArgs {
    /// The source stack (raw mean patterns and pattern dimensions)
    #[arg(long)]
    pub input: PathBuf,
    /// Feature matrix W.npy from `factorize`
    #[arg(long)]
    pub w: PathBuf,
    /// Coefficient matrix H.npy from `factorize`
    #[arg(long)]
    pub h: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.75, 0.80, 0.85, 0.90, 0.95])]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

pub fn maps(args: &MapsArgs) -> Result<(), CliError> {
    require_exists(&args.input)?;
    require_exists(&args.w)?;
    require_exists(&args.h)?;
    let stack = load_stack(&args.input, detect_format(&args.input))?;
    let w = read_matrix_npy(&args.w)?;
    let h = read_matrix_npy(&args.h)?;
    let maps = build_cluster_maps(&h, stack.m(), stack.n(), &args.thresholds)?;
    let patterns = cluster_patterns(&stack, &w, &h)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    render_maps(&maps, &args.out_dir, "")?;
    export_maps_and_patterns(&args.out_dir, &maps, &patterns, &stack, &IqaParams::default())?;
    println!("wrote maps for k={} -> {}", maps.k, args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct RunArgs {
    /// TOML pipeline config
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run from a previous run_manifest.json
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub filter: Option<FilterKindArg>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub half_width: Option<usize>,
    #[arg(long)]
    pub psnr_floor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FilterKindArg {
    None,
    Mean,
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let mut config = if let Some(manifest) = &args.manifest {
        require_exists(manifest)?;
        config_from_manifest(manifest)?
    } else if let Some(path) = &args.config {
        require_exists(path)?;
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        toml::from_str::<PipelineConfig>(&text)
            .map_err(|e| CliError::config(format!("bad config {}: {e}", path.display())))?
    } else {
        PipelineConfig::default()
    };

    if let Some(v) = &args.input {
        config.input = v.clone();
    }
    if let Some(v) = &args.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = args.filter {
        config.filter = match v {
            FilterKindArg::None => FilterKind::None,
            FilterKindArg::Mean => FilterKind::Mean,
        };
    }
    if let Some(v) = args.k_min {
        config.k_min = v;
    }
    if let Some(v) = args.k_max {
        config.k_max = v;
    }
    if let Some(v) = args.max_iter {
        config.nmf.max_iter = v;
    }
    if let Some(v) = args.tol {
        config.nmf.tol = v;
    }
    if let Some(v) = args.epsilon {
        config.nmf.epsilon = v;
    }
    if let Some(v) = args.seed {
        config.nmf.seed = v;
    }
    if let Some(v) = args.tau {
        config.decide.tau = v;
    }
    if let Some(v) = args.half_width {
        config.decide.half_width = v;
    }
    if let Some(v) = args.psnr_floor {
        config.decide.psnr_floor = v;
    }
    if let Some(v) = &args.thresholds {
        config.thresholds = v.clone();
    }

    let outcome = run_pipeline(&config)?;
    println!(
        "knee {} range [{}, {}] chosen k = {}{} -> {}",
        outcome.report.knee_k,
        outcome.report.range_lo,
        outcome.report.range_hi,
        outcome.report.chosen_k,
        if outcome.report.flags.is_empty() {
            String::new()
        } else {
            format!(" (flags: {})", outcome.report.flags.join(", "))
        },
        outcome.output_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn require_exists(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(Error::MissingUpstream(path.display().to_string()).into());
    }
    Ok(())
}

/// Loads a stack (reshaped) or a rank-2 matrix, whichever the file holds.
fn load_matrix_input(path: &Path) -> Result<DataMatrix, CliError> {
    require_exists(path)?;
    match detect_format(path) {
        stemfactor::io::StackFormat::Container => {
            let stack = load_stack(path, stemfactor::io::StackFormat::Container)?;
            Ok(reshape_4d_to_2d(&stack))
        }
        stemfactor::io::StackFormat::Interchange => {
            let (shape, data) = npy::read(path)?;
            match shape.len() {
                2 => {
                    let values = Array2::from_shape_vec((shape[0], shape[1]), data)
                        .expect("npy payload length already validated");
                    Ok(DataMatrix::new(values)?)
                }
                4 => {
                    let stack =
                        ScanStack4D::new(shape[0], shape[1], shape[2], shape[3], data, "loaded")?;
                    Ok(reshape_4d_to_2d(&stack))
                }
                other => Err(Error::ShapeMismatch {
                    expected: "rank-2 matrix or rank-4 stack".into(),
                    actual: format!("rank-{other} array"),
                }
                .into()),
            }
        }
    }
}

fn read_matrix_npy(path: &Path) -> Result<Array2<f64>, CliError> {
    let (shape, data) = npy::read(path)?;
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: "rank-2 array".into(),
            actual: format!("rank-{} array", shape.len()),
        }
        .into());
    }
    Ok(Array2::from_shape_vec((shape[0], shape[1]), data)
        .expect("npy payload length already validated"))
}

fn write_matrix_npy(path: &Path, matrix: &Array2<f64>) -> Result<(), CliError> {
    npy::write_f64(
        path,
        &[matrix.nrows(), matrix.ncols()],
        matrix.as_slice().expect("matrices are standard layout"),
    )?;
    Ok(())
}
